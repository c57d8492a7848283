// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "selfroute/gates.hpp"
#include "selfroute/routing.hpp"
#include "selfroute/tape.hpp"

#include <vector>

namespace selfroute {

/// Two-layer GELU feed-forward network: W2 gelu(h W1 + b1) + b2.
template <typename T>
struct BasicExpert {
    BasicTensor<T> w1; ///< [H, H_ff]
    BasicTensor<T> b1; ///< [H_ff]
    BasicTensor<T> w2; ///< [H_ff, H]
    BasicTensor<T> b2; ///< [H]
};

using Expert = BasicExpert<float>;

/// Weights ~ N(0, in_std^2) and N(0, out_std^2); biases zero.
template <typename T>
BasicExpert<T> make_expert(int model_dim, int ffn_dim, Rng& init, double in_std, double out_std);

template <typename T>
BasicTensor<T> expert_forward(Tape& tape, const BasicExpert<T>& e, const BasicTensor<T>& h);

/// Top-k selection per row of z[T, N] and softmax over the selected logits.
/// Throws ConfigError keyed on "model.top_k" unless 1 <= k <= N.
template <typename T>
BasicRouting<T> route(Tape& tape, const BasicTensor<T>& z, int k);

struct Assignment {
    int token = 0;
    int slot = 0; ///< position within the token's selection (0 = best)
    double weight = 0;
};

/// Tokens assigned to each expert, in token order.
using DispatchPlan = std::vector<std::vector<Assignment>>;

DispatchPlan dispatch_plan(const std::vector<RoutingDecision>& decisions, int num_experts);

template <typename T>
DispatchPlan dispatch_plan(const BasicRouting<T>& routing);

template <typename T>
struct MoeOutput {
    BasicTensor<T> out; ///< [T, H]
    BasicRouting<T> routing;
};

/// Sparse mixture: each expert runs once on the rows routed to it, and
/// every token receives the weighted sum of its k selected experts. No
/// capacity limit; every assignment is computed.
template <typename T>
MoeOutput<T> moe_forward(Tape& tape, const BasicTensor<T>& h, const BasicGate<T>& gate,
                         const std::vector<BasicExpert<T>>& experts, int k, Rng& rng);

} // namespace selfroute
