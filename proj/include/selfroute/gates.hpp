// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "selfroute/rng.hpp"
#include "selfroute/routing.hpp"
#include "selfroute/tape.hpp"
#include "selfroute/tensor.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace selfroute {

enum class GateKind { learned, self_route, fixed_random, random };

/// "learned", "self_route", "fixed_random" or "random".
std::string_view to_string(GateKind kind);

/// Inverse of to_string; throws ConfigError keyed on "model.gate".
GateKind parse_gate_kind(std::string_view text);

/// Maps a hidden state to per-expert logits.
///
/// Learned and fixed_random hold an [H, N] projection (trainable and frozen
/// respectively). self_route reads N coordinates of the hidden state
/// starting at slice_offset. random owns nothing and draws logits from the
/// caller's generator.
template <typename T>
struct BasicGate {
    GateKind kind = GateKind::self_route;
    int num_experts = 0;
    int model_dim = 0;
    int slice_offset = 0;
    BasicTensor<T> projection;
};

using Gate = BasicGate<float>;

/// Builds a gate. Projections are drawn N(0, 1/H) from `init`. The slice
/// offset defaults to H - N and is ignored by other kinds.
template <typename T>
BasicGate<T> make_gate(GateKind kind, int model_dim, int num_experts, Rng& init,
                       std::optional<int> slice_offset = std::nullopt);

/// z[T, N] for h[T, H] (leading dimensions of h are flattened into rows).
template <typename T>
BasicTensor<T> compute_logits(Tape& tape, const BasicGate<T>& gate, const BasicTensor<T>& h, Rng& rng);

/// Learned routing parameters across `layers` MoE layers: L*H*N for a
/// learned gate, 0 otherwise (a frozen projection is not learned).
std::int64_t router_param_count(GateKind kind, std::int64_t layers, std::int64_t model_dim, std::int64_t num_experts);

/// f: share of assignments per expert (sums to 1).
/// p: mean over tokens of the full-length routing distribution.
struct BalanceInputs {
    std::vector<double> f;
    std::vector<double> p;
};

BalanceInputs batch_balance_inputs(const std::vector<RoutingDecision>& decisions, int num_experts);

/// N * Σ f_i p_i. Throws ContractError on negative or mis-sized entries.
double balance_loss(const BalanceInputs& inputs, int num_experts);

/// The same quantity as a differentiable scalar: f is taken from the
/// selection counts as a constant, p flows back into the routing weights.
template <typename T>
BasicTensor<T> balance_loss(Tape& tape, const BasicRouting<T>& routing);

} // namespace selfroute
