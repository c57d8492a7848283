// SPDX-License-Identifier: Apache-2.0
#include "selfroute/train.hpp"

#include "selfroute/errors.hpp"
#include "selfroute/ops.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <mutex>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace selfroute {

void TrainConfig::validate() const {
    auto need = [](bool ok, const char* key, const std::string& message) {
        if (!ok) {
            throw ConfigError(key, message);
        }
    };
    need(steps >= 1, "train.steps", "must be at least 1");
    need(batch_size >= 1, "train.batch_size", "must be at least 1");
    need(learning_rate > 0 && std::isfinite(learning_rate), "train.learning_rate", "must be positive");
    need(warmup_steps >= 0, "train.warmup_steps", "must be non-negative");
    need(weight_decay >= 0 && std::isfinite(weight_decay), "train.weight_decay", "must be non-negative");
    need(balance_weight >= 0 && std::isfinite(balance_weight), "train.balance_weight", "must be non-negative");
    need(eval_every >= 1, "train.eval_every", "must be at least 1");
}

// ---------------------------------------------------------------- data

std::vector<int> load_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open corpus " + path);
    }
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.empty()) {
        throw IoError("corpus " + path + " is empty");
    }
    std::vector<int> tokens(bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        tokens[i] = static_cast<unsigned char>(bytes[i]);
    }
    return tokens;
}

std::string detokenize(std::span<const int> tokens) {
    std::string out(tokens.size(), '\0');
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || tokens[i] > 255) {
            throw RangeError("token " + std::to_string(tokens[i]) + " is not a byte");
        }
        out[i] = static_cast<char>(static_cast<unsigned char>(tokens[i]));
    }
    return out;
}

CorpusSplit split_corpus(std::vector<int> tokens, int seq_len, double held_out) {
    const auto n = tokens.size();
    const auto window = static_cast<std::size_t>(seq_len) + 1;
    const auto tail = std::max(window, static_cast<std::size_t>(std::ceil(static_cast<double>(n) * held_out)));
    if (n < tail + window) {
        throw ContractError("corpus of " + std::to_string(n) + " tokens is too short for seq_len " +
                            std::to_string(seq_len) + " with a held-out split");
    }
    CorpusSplit s;
    s.validation.assign(tokens.end() - static_cast<std::ptrdiff_t>(tail), tokens.end());
    tokens.resize(n - tail);
    s.train = std::move(tokens);
    return s;
}

Batch sample_batch(std::span<const int> tokens, int batch, int seq, Rng& rng) {
    if (batch < 1 || seq < 1) {
        throw ContractError("sample_batch needs positive batch and sequence sizes");
    }
    if (tokens.size() <= static_cast<std::size_t>(seq)) {
        throw ContractError("corpus of " + std::to_string(tokens.size()) + " tokens is too short for seq_len " +
                            std::to_string(seq));
    }
    Batch b;
    b.batch = batch;
    b.seq = seq;
    b.inputs.resize(static_cast<std::size_t>(batch) * static_cast<std::size_t>(seq));
    b.targets.resize(b.inputs.size());
    const auto span = tokens.size() - static_cast<std::size_t>(seq);
    for (int i = 0; i < batch; ++i) {
        const auto offset = static_cast<std::size_t>(rng.below(span));
        const auto row = static_cast<std::size_t>(i) * static_cast<std::size_t>(seq);
        std::copy_n(tokens.begin() + static_cast<std::ptrdiff_t>(offset), seq, b.inputs.begin() + static_cast<std::ptrdiff_t>(row));
        std::copy_n(tokens.begin() + static_cast<std::ptrdiff_t>(offset + 1), seq,
                    b.targets.begin() + static_cast<std::ptrdiff_t>(row));
    }
    return b;
}

// ---------------------------------------------------------------- optimizer

AdamState AdamState::zeros_like(const Model& model) {
    AdamState s;
    for (const auto& p : model.parameters()) {
        const auto n = static_cast<std::size_t>(p.tensor.numel());
        s.m.emplace_back(n, 0.0f);
        s.v.emplace_back(n, 0.0f);
        s.steps.push_back(0);
    }
    return s;
}

double learning_rate_at(std::int64_t step, double lr, int warmup) {
    if (warmup <= 0 || step >= warmup) {
        return lr;
    }
    return lr * static_cast<double>(step) / static_cast<double>(warmup);
}

void adamw_update(const Model& model, AdamState& state, double lr, const AdamConfig& cfg) {
    const auto params = model.parameters();
    if (state.m.size() != params.size()) {
        throw ContractError("optimizer state does not match the model's parameter list");
    }
    const auto b1 = static_cast<float>(cfg.beta1);
    const auto b2 = static_cast<float>(cfg.beta2);
    const auto eps = static_cast<float>(cfg.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto t = params[i].tensor;
        if (params[i].role == ParamRole::frozen || !t.requires_grad() || !t.has_grad()) {
            continue;
        }
        const auto step = ++state.steps[i];
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
        const auto step_size = static_cast<float>(lr / bc1);
        const auto inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
        const auto decay = t.ndim() >= 2 ? static_cast<float>(1.0 - lr * cfg.weight_decay) : 1.0f;
        auto w = t.data();
        auto g = t.grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = b1 * m[j] + (1.0f - b1) * g[j];
            v[j] = b2 * v[j] + (1.0f - b2) * g[j] * g[j];
            const float denom = std::sqrt(v[j]) * inv_sqrt_bc2 + eps;
            w[j] = w[j] * decay - step_size * (m[j] / denom);
        }
        t.release_grad();
    }
}

// ---------------------------------------------------------------- training

StepMetrics train_step(Model& model, const Batch& batch, AdamState& opt, const TrainConfig& cfg, std::int64_t step,
                       Rng& routing_rng) {
    Tape tape;
    auto result = forward(tape, model, batch.inputs, batch.batch, batch.seq, routing_rng);
    auto task = ops::cross_entropy(tape, result.logits, batch.targets);
    StepMetrics m;
    m.task_loss = task.item();
    auto total = task;
    const auto layers = result.routing.size();
    if (layers > 0 && cfg.balance_weight > 0) {
        Tensor sum;
        for (const auto& r : result.routing) {
            auto term = balance_loss(tape, r);
            sum = sum.defined() ? ops::add(tape, sum, term) : term;
        }
        auto mean = ops::scale(tape, sum, 1.0f / static_cast<float>(layers));
        m.balance_loss = mean.item();
        total = ops::add(tape, task, ops::scale(tape, mean, static_cast<float>(cfg.balance_weight)));
    } else if (layers > 0) {
        // reported only; evaluated off the tape
        Tape off(false);
        float sum = 0;
        for (const auto& r : result.routing) {
            sum += balance_loss(off, r).item();
        }
        m.balance_loss = sum / static_cast<float>(layers);
    }
    m.total_loss = total.item();
    if (!std::isfinite(m.total_loss)) {
        throw NumericError(static_cast<long>(step), "loss is not finite (task " + std::to_string(m.task_loss) +
                                                        ", balance " + std::to_string(m.balance_loss) + ")");
    }
    tape.backward(total);
    tape.clear();
    AdamConfig adam;
    adam.weight_decay = cfg.weight_decay;
    adamw_update(model, opt, learning_rate_at(step, cfg.learning_rate, cfg.warmup_steps), adam);
    return m;
}

EvalResult evaluate(const Model& model, std::span<const int> tokens, int batch, int seq, int batches, Rng& rng,
                    bool keep_decisions) {
    if (batches < 1) {
        throw ContractError("evaluate needs at least one batch");
    }
    const auto& cfg = model.config;
    EvalResult r;
    r.usage = ExpertUsageStats(cfg.moe_layers(), cfg.placement == Placement::none ? 1 : cfg.num_experts);
    if (keep_decisions) {
        r.decisions.resize(static_cast<std::size_t>(cfg.moe_layers()));
    }
    double sum = 0;
    for (int i = 0; i < batches; ++i) {
        const auto b = sample_batch(tokens, batch, seq, rng);
        Tape tape(false);
        auto out = forward(tape, model, b.inputs, b.batch, b.seq, rng);
        sum += ops::cross_entropy(tape, out.logits, b.targets).item();
        for (std::size_t l = 0; l < out.routing.size(); ++l) {
            r.usage.accumulate_layer(static_cast<int>(l), out.routing[l].indices);
            if (keep_decisions) {
                auto d = out.routing[l].decisions();
                r.decisions[l].insert(r.decisions[l].end(), std::make_move_iterator(d.begin()),
                                      std::make_move_iterator(d.end()));
            }
        }
    }
    r.val_loss = sum / batches;
    return r;
}

std::string format_record(const MetricsRecord& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "step=%lld task_loss=%.6f balance_loss=%.6f total_loss=%.6f val_loss=%.6f lr=%.6g",
                  static_cast<long long>(r.step), r.task_loss, r.balance_loss, r.total_loss, r.val_loss,
                  r.learning_rate);
    return buf;
}

Rng eval_rng(std::uint64_t seed) {
    return Rng(derive_seed(seed, kEvalStream));
}

void tune_allocator() {
#if defined(__GLIBC__)
    static std::once_flag once;
    std::call_once(once, [] {
        mallopt(M_MMAP_THRESHOLD, 1 << 30);
        mallopt(M_TRIM_THRESHOLD, -1);
    });
#endif
}

Trainer::Trainer(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const CorpusSplit& corpus)
    : corpus_(&corpus) {
    tune_allocator();
    train_cfg.validate();
    auto cfg = model_cfg;
    cfg.seed = train_cfg.seed;
    state_.train = train_cfg;
    state_.model = build_model<float>(cfg);
    state_.opt = AdamState::zeros_like(state_.model);
    state_.data_rng = Rng(derive_seed(train_cfg.seed, kDataStream));
    state_.routing_rng = Rng(derive_seed(train_cfg.seed, kRoutingStream));
}

Trainer::Trainer(Checkpoint state, const CorpusSplit& corpus) : state_(std::move(state)), corpus_(&corpus) {
    tune_allocator();
    state_.train.validate();
}

StepMetrics Trainer::step() {
    const auto b = sample_batch(corpus_->train, state_.train.batch_size, state_.model.config.seq_len, state_.data_rng);
    ++state_.step;
    return train_step(state_.model, b, state_.opt, state_.train, state_.step, state_.routing_rng);
}

void Trainer::run(std::int64_t until, const std::function<void(const MetricsRecord&)>& on_record) {
    while (state_.step < until) {
        const auto m = step();
        state_.pending.task_loss += m.task_loss;
        state_.pending.balance_loss += m.balance_loss;
        state_.pending.total_loss += m.total_loss;
        ++state_.pending_steps;
        if (state_.step % state_.train.eval_every != 0 && state_.step != state_.train.steps) {
            continue;
        }
        const auto n = static_cast<double>(state_.pending_steps);
        MetricsRecord r;
        r.step = state_.step;
        r.task_loss = state_.pending.task_loss / n;
        r.balance_loss = state_.pending.balance_loss / n;
        r.total_loss = state_.pending.total_loss / n;
        r.val_loss = evaluate_held_out(kTrainEvalBatches).val_loss;
        r.learning_rate = learning_rate_at(state_.step, state_.train.learning_rate, state_.train.warmup_steps);
        state_.pending = {};
        state_.pending_steps = 0;
        if (on_record) {
            on_record(r);
        }
    }
}

EvalResult Trainer::evaluate_held_out(int batches, bool keep_decisions) const {
    auto rng = eval_rng(state_.train.seed);
    return evaluate(state_.model, corpus_->validation, state_.train.batch_size, state_.model.config.seq_len, batches,
                    rng, keep_decisions);
}

Checkpoint Trainer::checkpoint() const {
    Checkpoint c = state_;
    c.model = state_.model.clone();
    return c;
}

} // namespace selfroute
