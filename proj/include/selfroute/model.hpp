// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "selfroute/gates.hpp"
#include "selfroute/moe.hpp"
#include "selfroute/routing.hpp"
#include "selfroute/tape.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace selfroute {

/// Which transformer blocks use a mixture instead of a dense FFN.
/// every2 puts MoE in the odd-indexed blocks (1, 3, ...).
enum class Placement { every, every2, none };

std::string_view to_string(Placement p);
Placement parse_placement(std::string_view text);

struct ModelConfig {
    int depth = 4;
    int hidden = 64;
    int heads = 4;
    int seq_len = 128;
    int vocab = 256;
    Placement placement = Placement::every;
    int num_experts = 8;
    int top_k = 2;
    GateKind gate = GateKind::self_route;
    std::optional<int> slice_offset;
    double ffn_ratio = 4.0;
    std::uint64_t seed = 0;

    /// Throws ConfigError naming the first offending key.
    void validate() const;

    int ffn_hidden() const;
    bool is_moe_block(int index) const;
    int moe_layers() const;
};

/// Pre-norm transformer block. Exactly one of `ffn` (dense) or
/// `experts` + `gate` (mixture) is populated.
template <typename T>
struct BasicBlock {
    BasicTensor<T> ln1_gamma, ln1_beta;
    BasicTensor<T> w_qkv, b_qkv; ///< [H, 3H], [3H]
    BasicTensor<T> w_out, b_out; ///< [H, H], [H]
    BasicTensor<T> ln2_gamma, ln2_beta;
    bool moe = false;
    BasicExpert<T> ffn;
    std::vector<BasicExpert<T>> experts;
    BasicGate<T> gate;
};

enum class ParamRole { backbone, expert, router, frozen };

template <typename T>
struct NamedParam {
    std::string name;
    BasicTensor<T> tensor;
    ParamRole role;
};

template <typename T>
struct BasicModel {
    ModelConfig config;
    BasicTensor<T> token_embedding;    ///< [V, H], also the output projection
    BasicTensor<T> position_embedding; ///< [seq_len, H]
    std::vector<BasicBlock<T>> blocks;
    BasicTensor<T> lnf_gamma, lnf_beta;

    /// Every tensor in a fixed order; this order defines the checkpoint layout.
    std::vector<NamedParam<T>> parameters() const;

    /// Independent copy; tensors are otherwise shared handles.
    BasicModel clone() const;
};

using Model = BasicModel<float>;

/// Deterministic in cfg.seed. Gate projections draw from their own streams,
/// so models that differ only in gate kind share all other initial weights.
template <typename T>
BasicModel<T> build_model(const ModelConfig& cfg);

template <typename T>
struct ForwardResult {
    BasicTensor<T> logits;                ///< [batch, seq, vocab]
    std::vector<BasicRouting<T>> routing; ///< one per MoE block, in block order
};

/// tokens holds batch*seq ids. `routing_rng` feeds random gates only.
template <typename T>
ForwardResult<T> forward(Tape& tape, const BasicModel<T>& model, std::span<const int> tokens, std::int64_t batch,
                         std::int64_t seq, Rng& routing_rng);

struct ParamCounts {
    std::int64_t total = 0;
    std::int64_t learned_router = 0;
    std::int64_t expert = 0;   ///< dense FFNs and experts
    std::int64_t backbone = 0; ///< embeddings, attention, norms
    std::int64_t frozen = 0;   ///< fixed random projections
};

/// By formula, without allocating.
ParamCounts count_params(const ModelConfig& cfg);

template <typename T>
ParamCounts count_params(const BasicModel<T>& model);

} // namespace selfroute
