// SPDX-License-Identifier: Apache-2.0
#include "commands.hpp"

#include "selfroute/checkpoint.hpp"
#include "selfroute/config.hpp"
#include "selfroute/errors.hpp"
#include "selfroute/telemetry.hpp"
#include "selfroute/train.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

namespace fs = std::filesystem;

namespace selfroute::cli {

namespace {

int guarded(std::ostream& err, const std::function<int()>& body) {
    try {
        return body();
    } catch (const ConfigError& e) {
        err << "error: invalid config: " << e.what() << '\n';
        return kExitInput;
    } catch (const NumericError& e) {
        err << "error: numerical failure at " << e.what() << '\n';
        return kExitNumeric;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kExitInput;
    }
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read " + path.string());
    }
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
}

void make_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
    }
}

std::string fixed6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

std::string signed6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%+.6f", v);
    return buf;
}

/// `key = value` lines into a map; blank and `#` lines skipped.
std::map<std::string, std::string> read_fields(const std::string& text) {
    std::map<std::string, std::string> out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const auto eq = line.find(" = ");
        if (line.empty() || line[0] == '#' || eq == std::string::npos) {
            continue;
        }
        out[line.substr(0, eq)] = line.substr(eq + 3);
    }
    return out;
}

std::string run_label(const std::string& dir) {
    auto p = fs::path(dir).lexically_normal();
    if (p.filename().empty()) {
        p = p.parent_path();
    }
    return p.filename().empty() ? dir : p.filename().string();
}

struct RunStats {
    std::string label;
    std::string gate;
    double val_loss = 0;
    std::optional<UsageSummary> usage; ///< absent without MoE layers
};

RunStats read_run(const std::string& dir) {
    RunStats r;
    r.label = run_label(dir);
    const auto eval_path = fs::path(dir) / kEvalFile;
    if (!fs::exists(eval_path)) {
        throw IoError("run " + r.label + ": missing " + eval_path.string() + " (run `selfroute eval --stats " + dir +
                      "` first)");
    }
    const auto fields = read_fields(read_file(eval_path));
    auto get = [&](const std::string& key) {
        const auto it = fields.find(key);
        if (it == fields.end()) {
            throw FormatError("run " + r.label + ": " + eval_path.string() + " lacks " + key);
        }
        return it->second;
    };
    r.gate = get("gate");
    try {
        r.val_loss = std::stod(get("val_loss"));
    } catch (const std::logic_error&) {
        throw FormatError("run " + r.label + ": bad val_loss in " + eval_path.string());
    }
    if (get("moe_layers") != "0") {
        const auto summary_path = fs::path(dir) / kSummaryFile;
        if (!fs::exists(summary_path)) {
            throw IoError("run " + r.label + ": missing " + summary_path.string());
        }
        try {
            r.usage = parse_summary(read_file(summary_path));
        } catch (const FormatError& e) {
            throw FormatError("run " + r.label + ": " + e.what());
        }
    }
    return r;
}

std::string compare_table(const std::vector<RunStats>& runs) {
    std::size_t width = 5;
    for (const auto& r : runs) {
        width = std::max(width, r.label.size());
    }
    auto pad = [&](const std::string& s, std::size_t w) { return s + std::string(w > s.size() ? w - s.size() : 0, ' '); };
    auto usage_cell = [](const std::optional<UsageSummary>& u, bool entropy) {
        return u ? fixed6(entropy ? u->mean_normalized_entropy : u->mean_max_fraction) : std::string("n/a");
    };

    std::string out = pad("run", width) + "  " + pad("gate", 12) + "  " + pad("val_loss", 10) + "  " +
                      pad("mean_entropy", 12) + "  mean_max_fraction\n";
    for (const auto& r : runs) {
        out += pad(r.label, width) + "  " + pad(r.gate, 12) + "  " + pad(fixed6(r.val_loss), 10) + "  " +
               pad(usage_cell(r.usage, true), 12) + "  " + usage_cell(r.usage, false) + '\n';
    }
    out += '\n';
    for (std::size_t i = 0; i < runs.size(); ++i) {
        for (std::size_t j = i + 1; j < runs.size(); ++j) {
            const auto& a = runs[i];
            const auto& b = runs[j];
            const double rel = a.val_loss != 0 ? 100.0 * (b.val_loss - a.val_loss) / a.val_loss : 0.0;
            char pct[32];
            std::snprintf(pct, sizeof pct, "%+.2f%%", rel);
            out += "delta " + b.label + " - " + a.label + ": val_loss=" + signed6(b.val_loss - a.val_loss) + " (" +
                   pct + ")";
            if (a.usage && b.usage) {
                out += " mean_entropy=" + signed6(b.usage->mean_normalized_entropy - a.usage->mean_normalized_entropy) +
                       " mean_max_fraction=" + signed6(b.usage->mean_max_fraction - a.usage->mean_max_fraction);
            } else {
                out += " mean_entropy=n/a mean_max_fraction=n/a";
            }
            out += '\n';
        }
    }
    return out;
}

} // namespace

int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        auto cfg = load_config(args.config);
        if (cfg.train.corpus.empty()) {
            throw ConfigError("data.corpus", "no corpus given");
        }
        fs::path corpus = cfg.train.corpus;
        if (corpus.is_relative()) {
            corpus = (fs::path(args.config).parent_path() / corpus).lexically_normal();
        }
        cfg.train.corpus = corpus.string();
        const auto split = split_corpus(load_corpus(cfg.train.corpus), cfg.model.seq_len);

        const fs::path dir = args.out;
        make_dir(dir);
        write_file(dir / kResolvedConfigFile, format_config(cfg));
        std::ofstream log(dir / kMetricsFile, std::ios::binary | std::ios::trunc);
        if (!log) {
            throw IoError("cannot write " + (dir / kMetricsFile).string());
        }

        Trainer trainer(cfg.model, cfg.train, split);
        trainer.run(cfg.train.steps, [&](const MetricsRecord& r) {
            const auto line = format_record(r);
            log << line << '\n' << std::flush;
            out << line << '\n' << std::flush;
        });
        if (!log) {
            throw IoError("cannot write " + (dir / kMetricsFile).string());
        }
        save_checkpoint(trainer.checkpoint(), (dir / kCheckpointFile).string());
        out << "wrote " << (dir / kCheckpointFile).string() << '\n';
        return kExitOk;
    });
}

int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        if (args.tokens < 1) {
            throw ContractError("--tokens must be positive");
        }
        const auto ckpt = load_checkpoint(args.checkpoint);
        const auto& mc = ckpt.model.config;
        const auto split = split_corpus(load_corpus(args.corpus), mc.seq_len);
        const std::int64_t per_batch = static_cast<std::int64_t>(ckpt.train.batch_size) * mc.seq_len;
        const auto batches = static_cast<int>((args.tokens + per_batch - 1) / per_batch);

        auto rng = eval_rng(ckpt.train.seed);
        const auto result =
            evaluate(ckpt.model, split.validation, ckpt.train.batch_size, mc.seq_len, batches, rng, false);

        const fs::path dir = args.stats;
        make_dir(dir);
        const int layers = result.usage.layers();
        std::string report = "gate = " + std::string(to_string(mc.gate)) + '\n';
        report += "step = " + std::to_string(ckpt.step) + '\n';
        report += "tokens = " + std::to_string(static_cast<std::int64_t>(batches) * per_batch) + '\n';
        report += "val_loss = " + fixed6(result.val_loss) + '\n';
        report += "moe_layers = " + std::to_string(layers) + '\n';
        write_file(dir / kEvalFile, report);

        out << "val_loss = " << fixed6(result.val_loss) << '\n';
        out << "moe_layers = " << layers << '\n';
        if (layers == 0) {
            out << "no MoE layers; no heatmap written\n";
            return kExitOk;
        }
        export_stats(result.usage, StatsFormat::heatmap_csv, (dir / kHeatmapFile).string());
        export_stats(result.usage, StatsFormat::summary, (dir / kSummaryFile).string());
        const auto s = summarize(result.usage);
        out << "mean normalized_entropy = " << fixed6(s.mean_normalized_entropy) << '\n';
        out << "mean max_fraction = " << fixed6(s.mean_max_fraction) << '\n';
        return kExitOk;
    });
}

int cmd_compare(const CompareArgs& args, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        if (args.runs.size() < 2) {
            throw ContractError("compare needs at least two runs");
        }
        std::vector<RunStats> runs;
        for (const auto& dir : args.runs) {
            runs.push_back(read_run(dir));
        }
        const auto table = compare_table(runs);
        if (!args.out.empty()) {
            const auto parent = fs::path(args.out).parent_path();
            if (!parent.empty()) {
                make_dir(parent);
            }
            write_file(args.out, table);
        }
        out << table;
        return kExitOk;
    });
}

int cmd_params(const ParamsArgs& args, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const auto cfg = load_config(args.config);
        const auto c = count_params(cfg.model);
        out << "gate = " << to_string(cfg.model.gate) << '\n';
        out << "moe_layers = " << cfg.model.moe_layers() << '\n';
        out << "total = " << c.total << '\n';
        out << "backbone = " << c.backbone << '\n';
        out << "expert = " << c.expert << '\n';
        out << "router = " << c.learned_router << '\n';
        out << "frozen = " << c.frozen << '\n';
        return kExitOk;
    });
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Mixture-of-experts language models with parameter-free self-routing", "selfroute"};
    app.require_subcommand(1);

    TrainArgs train;
    auto* train_cmd = app.add_subcommand("train", "Train a model from a config file");
    train_cmd->add_option("--config", train.config, "Run config (key = value lines)")->required();
    train_cmd->add_option("--out", train.out, "Output directory")->required();

    EvalArgs eval;
    auto* eval_cmd = app.add_subcommand("eval", "Held-out loss and expert-usage statistics of a checkpoint");
    eval_cmd->add_option("--checkpoint", eval.checkpoint, "Checkpoint file")->required();
    eval_cmd->add_option("--corpus", eval.corpus, "Corpus file; its held-out tail is evaluated")->required();
    eval_cmd->add_option("--tokens", eval.tokens, "Tokens to evaluate, rounded up to whole batches")
        ->capture_default_str();
    eval_cmd->add_option("--stats", eval.stats, "Directory for eval.txt, heatmap.csv and summary.txt")->required();

    CompareArgs compare;
    auto* compare_cmd = app.add_subcommand("compare", "Tabulate evaluated runs side by side");
    compare_cmd->add_option("--runs", compare.runs, "Comma-separated run directories")->delimiter(',')->required();
    compare_cmd->add_option("--out", compare.out, "Report file");

    ParamsArgs params;
    auto* params_cmd = app.add_subcommand("params", "Parameter breakdown of a config");
    params_cmd->add_option("--config", params.config, "Run config")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return kExitInput;
    }

    if (train_cmd->parsed()) {
        return cmd_train(train, out, err);
    }
    if (eval_cmd->parsed()) {
        return cmd_eval(eval, out, err);
    }
    if (compare_cmd->parsed()) {
        return cmd_compare(compare, out, err);
    }
    return cmd_params(params, out, err);
}

} // namespace selfroute::cli
