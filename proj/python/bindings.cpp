// SPDX-License-Identifier: Apache-2.0
#include "commands.hpp"

#include "selfroute/checkpoint.hpp"
#include "selfroute/config.hpp"
#include "selfroute/errors.hpp"
#include "selfroute/gates.hpp"
#include "selfroute/model.hpp"
#include "selfroute/ops.hpp"
#include "selfroute/telemetry.hpp"
#include "selfroute/train.hpp"

#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>
#include <sstream>

namespace py = pybind11;
using namespace selfroute;

namespace {

/// Trainer plus the corpus it reads, which must outlive it.
class PyTrainer {
public:
    PyTrainer(const ModelConfig& model, const TrainConfig& train, std::vector<int> tokens)
        : corpus_(std::make_unique<CorpusSplit>(split_corpus(std::move(tokens), model.seq_len))),
          trainer_(std::make_unique<Trainer>(model, train, *corpus_)) {}

    PyTrainer(Checkpoint state, std::vector<int> tokens) {
        corpus_ = std::make_unique<CorpusSplit>(split_corpus(std::move(tokens), state.model.config.seq_len));
        trainer_ = std::make_unique<Trainer>(std::move(state), *corpus_);
    }

    std::vector<MetricsRecord> run(std::int64_t until) {
        std::vector<MetricsRecord> records;
        py::gil_scoped_release release;
        trainer_->run(until, [&](const MetricsRecord& r) { records.push_back(r); });
        return records;
    }

    StepMetrics step() {
        py::gil_scoped_release release;
        return trainer_->step();
    }

    EvalResult evaluate(int batches) const {
        py::gil_scoped_release release;
        return trainer_->evaluate_held_out(batches);
    }

    void save(const std::string& path) const { save_checkpoint(trainer_->checkpoint(), path); }

    const Trainer& trainer() const { return *trainer_; }

private:
    std::unique_ptr<CorpusSplit> corpus_;
    std::unique_ptr<Trainer> trainer_;
};

py::array_t<float> logits_of(const Model& model, const std::vector<int>& tokens, std::int64_t batch, std::int64_t seq,
                             std::uint64_t routing_seed) {
    Tape tape(false);
    Rng rng(routing_seed);
    const auto out = forward(tape, model, tokens, batch, seq, rng);
    py::array_t<float> arr({batch, seq, static_cast<std::int64_t>(model.config.vocab)});
    std::copy(out.logits.data().begin(), out.logits.data().end(), arr.mutable_data());
    return arr;
}

py::dict counts_dict(const ParamCounts& c) {
    py::dict d;
    d["total"] = c.total;
    d["backbone"] = c.backbone;
    d["expert"] = c.expert;
    d["learned_router"] = c.learned_router;
    d["frozen"] = c.frozen;
    return d;
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Mixture-of-experts language models with parameter-free self-routing";

    auto base = py::register_exception<Error>(m, "Error");
    py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
    py::register_exception<RangeError>(m, "RangeError", base.ptr());
    py::register_exception<ContractError>(m, "ContractError", base.ptr());
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<IoError>(m, "IoError", base.ptr());
    py::register_exception<FormatError>(m, "FormatError", base.ptr());
    py::register_exception<NumericError>(m, "NumericError", base.ptr());

    py::enum_<GateKind>(m, "GateKind")
        .value("learned", GateKind::learned)
        .value("self_route", GateKind::self_route)
        .value("fixed_random", GateKind::fixed_random)
        .value("random", GateKind::random);

    py::enum_<Placement>(m, "Placement")
        .value("every", Placement::every)
        .value("every2", Placement::every2)
        .value("none", Placement::none);

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("depth", &ModelConfig::depth)
        .def_readwrite("hidden", &ModelConfig::hidden)
        .def_readwrite("heads", &ModelConfig::heads)
        .def_readwrite("seq_len", &ModelConfig::seq_len)
        .def_readwrite("vocab", &ModelConfig::vocab)
        .def_readwrite("placement", &ModelConfig::placement)
        .def_readwrite("num_experts", &ModelConfig::num_experts)
        .def_readwrite("top_k", &ModelConfig::top_k)
        .def_readwrite("gate", &ModelConfig::gate)
        .def_readwrite("slice_offset", &ModelConfig::slice_offset)
        .def_readwrite("seed", &ModelConfig::seed)
        .def("validate", &ModelConfig::validate)
        .def("moe_layers", &ModelConfig::moe_layers);

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_readwrite("steps", &TrainConfig::steps)
        .def_readwrite("batch_size", &TrainConfig::batch_size)
        .def_readwrite("learning_rate", &TrainConfig::learning_rate)
        .def_readwrite("warmup_steps", &TrainConfig::warmup_steps)
        .def_readwrite("weight_decay", &TrainConfig::weight_decay)
        .def_readwrite("balance_weight", &TrainConfig::balance_weight)
        .def_readwrite("seed", &TrainConfig::seed)
        .def_readwrite("eval_every", &TrainConfig::eval_every)
        .def_readwrite("corpus", &TrainConfig::corpus)
        .def("validate", &TrainConfig::validate);

    py::class_<RunConfig>(m, "RunConfig")
        .def(py::init<>())
        .def_readwrite("model", &RunConfig::model)
        .def_readwrite("train", &RunConfig::train);

    m.def("parse_config", &parse_config, py::arg("text"));
    m.def("load_config", &load_config, py::arg("path"));
    m.def("format_config", &format_config, py::arg("config"));

    m.def("count_params", [](const ModelConfig& c) { return counts_dict(count_params(c)); }, py::arg("config"));
    m.def("router_param_count", &router_param_count, py::arg("gate"), py::arg("layers"), py::arg("hidden"),
          py::arg("num_experts"));
    m.def(
        "balance_loss", [](std::vector<double> f, std::vector<double> p, int n) { return balance_loss({f, p}, n); },
        py::arg("f"), py::arg("p"), py::arg("num_experts"));
    m.def(
        "normalized_entropy", [](const std::vector<double>& f, int n) { return normalized_entropy(f, n); },
        py::arg("fractions"), py::arg("num_experts"));
    m.def(
        "max_expert_fraction", [](const std::vector<double>& f) { return max_expert_fraction(f); },
        py::arg("fractions"));

    py::class_<ExpertUsageStats>(m, "ExpertUsageStats")
        .def(py::init<int, int>(), py::arg("layers"), py::arg("num_experts"))
        .def_property_readonly("layers", &ExpertUsageStats::layers)
        .def_property_readonly("num_experts", &ExpertUsageStats::num_experts)
        .def(
            "accumulate_layer",
            [](ExpertUsageStats& s, int layer, const std::vector<int>& experts) { s.accumulate_layer(layer, experts); },
            py::arg("layer"), py::arg("experts"))
        .def("counts",
             [](const ExpertUsageStats& s, int layer) {
                 const auto c = s.counts(layer);
                 return std::vector<std::int64_t>(c.begin(), c.end());
             })
        .def("total", &ExpertUsageStats::total)
        .def("fractions", &ExpertUsageStats::fractions)
        .def("heatmap_csv", [](const ExpertUsageStats& s) { return heatmap_csv(s); })
        .def("summary_text", [](const ExpertUsageStats& s) { return summary_text(s); })
        .def("summary",
             [](const ExpertUsageStats& s) {
                 const auto u = summarize(s);
                 py::dict d;
                 d["mean_normalized_entropy"] = u.mean_normalized_entropy;
                 d["mean_max_fraction"] = u.mean_max_fraction;
                 py::list layers;
                 for (const auto& l : u.layers) {
                     py::dict ld;
                     ld["layer"] = l.layer;
                     ld["assignments"] = l.assignments;
                     ld["normalized_entropy"] = l.normalized_entropy;
                     ld["max_fraction"] = l.max_fraction;
                     layers.append(ld);
                 }
                 d["layers"] = layers;
                 return d;
             })
        .def("__eq__", [](const ExpertUsageStats& a, const ExpertUsageStats& b) { return a == b; });
    m.def("merge", [](const ExpertUsageStats& a, const ExpertUsageStats& b) { return merge(a, b); });

    m.def("load_corpus", &load_corpus, py::arg("path"));
    m.def(
        "detokenize", [](const std::vector<int>& t) { return py::bytes(detokenize(t)); }, py::arg("tokens"));

    py::class_<StepMetrics>(m, "StepMetrics")
        .def_readonly("task_loss", &StepMetrics::task_loss)
        .def_readonly("balance_loss", &StepMetrics::balance_loss)
        .def_readonly("total_loss", &StepMetrics::total_loss);

    py::class_<MetricsRecord>(m, "MetricsRecord")
        .def_readonly("step", &MetricsRecord::step)
        .def_readonly("task_loss", &MetricsRecord::task_loss)
        .def_readonly("balance_loss", &MetricsRecord::balance_loss)
        .def_readonly("total_loss", &MetricsRecord::total_loss)
        .def_readonly("val_loss", &MetricsRecord::val_loss)
        .def_readonly("learning_rate", &MetricsRecord::learning_rate)
        .def("__str__", &format_record);

    py::class_<EvalResult>(m, "EvalResult")
        .def_readonly("val_loss", &EvalResult::val_loss)
        .def_readonly("usage", &EvalResult::usage);

    py::class_<PyTrainer>(m, "Trainer")
        .def(py::init<const ModelConfig&, const TrainConfig&, std::vector<int>>(), py::arg("model"), py::arg("train"),
             py::arg("tokens"))
        .def_static(
            "load",
            [](const std::string& path, std::vector<int> tokens) {
                return std::make_unique<PyTrainer>(load_checkpoint(path), std::move(tokens));
            },
            py::arg("path"), py::arg("tokens"))
        .def("run", &PyTrainer::run, py::arg("until"))
        .def("step", &PyTrainer::step)
        .def("evaluate", &PyTrainer::evaluate, py::arg("batches") = kTrainEvalBatches)
        .def("save", &PyTrainer::save, py::arg("path"))
        .def_property_readonly("steps_done", [](const PyTrainer& t) { return t.trainer().steps_done(); })
        .def(
            "logits",
            [](const PyTrainer& t, const std::vector<int>& tokens, std::int64_t batch, std::int64_t seq,
               std::uint64_t routing_seed) { return logits_of(t.trainer().model(), tokens, batch, seq, routing_seed); },
            py::arg("tokens"), py::arg("batch"), py::arg("seq"), py::arg("routing_seed") = 0);

    m.def(
        "cli",
        [](const std::vector<std::string>& args) {
            std::vector<const char*> argv{"selfroute"};
            for (const auto& a : args) {
                argv.push_back(a.c_str());
            }
            std::ostringstream out, err;
            int code = 0;
            {
                py::gil_scoped_release release;
                code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
            }
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs a command line; returns (exit code, stdout, stderr).");
}
