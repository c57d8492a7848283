// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "selfroute/model.hpp"
#include "selfroute/rng.hpp"
#include "selfroute/telemetry.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace selfroute {

struct TrainConfig {
    int steps = 3000;
    int batch_size = 16;
    double learning_rate = 3e-4;
    int warmup_steps = 100;
    double weight_decay = 0.1;
    double balance_weight = 0.0;
    std::uint64_t seed = 0;
    int eval_every = 100;
    std::string corpus;

    void validate() const;
};

// ---------------------------------------------------------------- data

/// Whole file as byte tokens (vocabulary 256). Throws IoError when the file
/// is missing or empty.
std::vector<int> load_corpus(const std::string& path);

/// Bytes back from tokens; inverse of load_corpus's tokenization.
std::string detokenize(std::span<const int> tokens);

/// Training stream and held-out tail.
struct CorpusSplit {
    std::vector<int> train;
    std::vector<int> validation;
};

/// The last `held_out` fraction (at least seq_len + 1 tokens) is validation.
CorpusSplit split_corpus(std::vector<int> tokens, int seq_len, double held_out = 0.1);

struct Batch {
    std::int64_t batch = 0;
    std::int64_t seq = 0;
    std::vector<int> inputs;  ///< batch*seq
    std::vector<int> targets; ///< inputs shifted by one
};

/// `batch` offsets drawn uniformly from [0, len - seq - 1]. Throws
/// ContractError when the stream holds no more than `seq` tokens.
Batch sample_batch(std::span<const int> tokens, int batch, int seq, Rng& rng);

// ---------------------------------------------------------------- optimizer

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.1;
};

/// Per-parameter moments in model.parameters() order. A parameter's step
/// count only advances on updates that saw a gradient.
struct AdamState {
    std::vector<std::vector<float>> m;
    std::vector<std::vector<float>> v;
    std::vector<std::int64_t> steps;

    static AdamState zeros_like(const Model& model);
};

/// Linear warmup from lr/warmup at step 1 to lr at step `warmup`, then constant.
double learning_rate_at(std::int64_t step, double lr, int warmup);

/// One AdamW update at learning rate `lr`. Decoupled decay applies to
/// parameters with two or more dimensions; frozen parameters and those
/// without a gradient are left alone. Gradients are released afterwards.
void adamw_update(const Model& model, AdamState& state, double lr, const AdamConfig& cfg);

// ---------------------------------------------------------------- training

struct StepMetrics {
    double task_loss = 0;
    double balance_loss = 0; ///< mean over MoE layers, reported even when unweighted
    double total_loss = 0;
};

/// Forward, backward and update on one batch. The balance term joins the
/// objective only when balance_weight > 0. Throws NumericError naming `step`
/// when the loss is not finite.
StepMetrics train_step(Model& model, const Batch& batch, AdamState& opt, const TrainConfig& cfg, std::int64_t step,
                       Rng& routing_rng);

struct EvalResult {
    double val_loss = 0;
    ExpertUsageStats usage; ///< one layer per MoE block
    /// Per MoE layer, all decisions over the evaluated batches (when kept).
    std::vector<std::vector<RoutingDecision>> decisions;
};

/// Mean cross-entropy over `batches` batches without recording gradients.
EvalResult evaluate(const Model& model, std::span<const int> tokens, int batch, int seq, int batches, Rng& rng,
                    bool keep_decisions = true);

/// Held-out batches per periodic evaluation during training.
inline constexpr int kTrainEvalBatches = 8;

struct MetricsRecord {
    std::int64_t step = 0;
    double task_loss = 0;    ///< mean since the previous record
    double balance_loss = 0; ///< mean since the previous record
    double total_loss = 0;   ///< mean since the previous record
    double val_loss = 0;
    double learning_rate = 0;
};

/// One line of the metrics log, fixed field order.
std::string format_record(const MetricsRecord& r);

/// Everything needed to continue a run exactly where it stopped.
struct Checkpoint {
    TrainConfig train;
    Model model; ///< carries its ModelConfig
    AdamState opt;
    std::int64_t step = 0;
    Rng data_rng;
    Rng routing_rng;
    StepMetrics pending{};           ///< metric sums since the last record
    std::int64_t pending_steps = 0;
};

/// Owns a model, optimizer and data streams and advances them step by step.
///
/// Data batches, random-gate draws and evaluation batches each use their own
/// generator derived from the seed, so the evaluation schedule does not
/// perturb training.
class Trainer {
public:
    Trainer(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const CorpusSplit& corpus);
    Trainer(Checkpoint state, const CorpusSplit& corpus);

    /// Trains until `until` steps have run in total. `on_record` fires every
    /// eval_every steps and at step train.steps.
    void run(std::int64_t until, const std::function<void(const MetricsRecord&)>& on_record = {});

    StepMetrics step();
    EvalResult evaluate_held_out(int batches, bool keep_decisions = false) const;

    /// Copies the full state (model and moments included).
    Checkpoint checkpoint() const;

    const Model& model() const { return state_.model; }
    const TrainConfig& config() const { return state_.train; }
    std::int64_t steps_done() const { return state_.step; }

private:
    Checkpoint state_;
    const CorpusSplit* corpus_;
};

/// Seeds of the independent streams.
inline constexpr std::uint64_t kDataStream = 1;
inline constexpr std::uint64_t kRoutingStream = 2;
inline constexpr std::uint64_t kEvalStream = 3;

/// Generator for held-out evaluation; fresh per call so every evaluation of
/// a run sees the same batches.
Rng eval_rng(std::uint64_t seed);

/// Sets glibc to keep freed memory instead of returning it to the kernel.
/// Each training step allocates the same large buffers again, and first
/// touches of fresh pages otherwise dominate small-model step time.
void tune_allocator();

} // namespace selfroute
