// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "selfroute/tensor.hpp"

#include <cstdint>
#include <vector>

namespace selfroute {

/// One token's routing outcome.
struct RoutingDecision {
    std::vector<int> indices;    ///< selected experts, best first
    std::vector<double> weights; ///< softmax over the selected logits
    std::vector<double> logits;  ///< all N raw logits
};

/// Routing outcome for a batch of tokens, as produced inside a forward pass.
///
/// `weights` and `logits` stay attached to the tape so losses built from
/// them (the balance term) differentiate back into the gate.
template <typename T>
struct BasicRouting {
    int k = 0;
    int num_experts = 0;
    std::vector<int> indices; ///< tokens * k, row-major
    BasicTensor<T> weights;   ///< [tokens, k]
    BasicTensor<T> logits;    ///< [tokens, N]

    std::int64_t tokens() const { return k > 0 ? static_cast<std::int64_t>(indices.size()) / k : 0; }

    RoutingDecision decision(std::int64_t token) const {
        RoutingDecision d;
        const auto base = static_cast<std::size_t>(token * k);
        d.indices.assign(indices.begin() + static_cast<std::ptrdiff_t>(base),
                         indices.begin() + static_cast<std::ptrdiff_t>(base + static_cast<std::size_t>(k)));
        auto w = weights.data();
        d.weights.assign(w.begin() + static_cast<std::ptrdiff_t>(base),
                         w.begin() + static_cast<std::ptrdiff_t>(base + static_cast<std::size_t>(k)));
        auto z = logits.data();
        const auto zb = static_cast<std::size_t>(token * num_experts);
        d.logits.assign(z.begin() + static_cast<std::ptrdiff_t>(zb),
                        z.begin() + static_cast<std::ptrdiff_t>(zb + static_cast<std::size_t>(num_experts)));
        return d;
    }

    std::vector<RoutingDecision> decisions() const {
        std::vector<RoutingDecision> out;
        out.reserve(static_cast<std::size_t>(tokens()));
        for (std::int64_t t = 0; t < tokens(); ++t) {
            out.push_back(decision(t));
        }
        return out;
    }
};

using Routing = BasicRouting<float>;

} // namespace selfroute
