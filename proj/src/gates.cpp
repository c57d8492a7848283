// SPDX-License-Identifier: Apache-2.0
#include "selfroute/gates.hpp"

#include "selfroute/errors.hpp"
#include "selfroute/ops.hpp"

#include <cmath>

namespace selfroute {

std::string_view to_string(GateKind kind) {
    switch (kind) {
    case GateKind::learned:
        return "learned";
    case GateKind::self_route:
        return "self_route";
    case GateKind::fixed_random:
        return "fixed_random";
    case GateKind::random:
        return "random";
    }
    return "unknown";
}

GateKind parse_gate_kind(std::string_view text) {
    for (auto kind : {GateKind::learned, GateKind::self_route, GateKind::fixed_random, GateKind::random}) {
        if (text == to_string(kind)) {
            return kind;
        }
    }
    throw ConfigError("model.gate", "unknown gate kind '" + std::string(text) +
                                        "' (expected learned, self_route, fixed_random or random)");
}

template <typename T>
BasicGate<T> make_gate(GateKind kind, int model_dim, int num_experts, Rng& init, std::optional<int> slice_offset) {
    if (model_dim <= 0) {
        throw ConfigError("model.hidden", "must be positive");
    }
    if (num_experts <= 0) {
        throw ConfigError("model.num_experts", "must be positive");
    }
    BasicGate<T> gate;
    gate.kind = kind;
    gate.model_dim = model_dim;
    gate.num_experts = num_experts;
    switch (kind) {
    case GateKind::self_route: {
        if (num_experts > model_dim) {
            throw ConfigError("model.num_experts", "self_route needs num_experts <= hidden (" +
                                                       std::to_string(num_experts) + " > " + std::to_string(model_dim) +
                                                       ")");
        }
        gate.slice_offset = slice_offset.value_or(model_dim - num_experts);
        if (gate.slice_offset < 0 || gate.slice_offset > model_dim - num_experts) {
            throw ConfigError("model.slice_offset", "must lie in [0, " + std::to_string(model_dim - num_experts) + "]");
        }
        break;
    }
    case GateKind::learned:
    case GateKind::fixed_random: {
        const double stddev = 1.0 / std::sqrt(static_cast<double>(model_dim));
        std::vector<T> w(static_cast<std::size_t>(model_dim) * static_cast<std::size_t>(num_experts));
        for (auto& x : w) {
            x = static_cast<T>(init.normal() * stddev);
        }
        gate.projection = BasicTensor<T>::from({model_dim, num_experts}, std::move(w), kind == GateKind::learned);
        break;
    }
    case GateKind::random:
        break;
    }
    return gate;
}

template <typename T>
BasicTensor<T> compute_logits(Tape& tape, const BasicGate<T>& gate, const BasicTensor<T>& h, Rng& rng) {
    if (h.cols() != gate.model_dim) {
        throw ShapeError("compute_logits: hidden width " + std::to_string(h.cols()) + " != gate model_dim " +
                         std::to_string(gate.model_dim));
    }
    switch (gate.kind) {
    case GateKind::learned:
    case GateKind::fixed_random:
        return ops::matmul(tape, h, gate.projection);
    case GateKind::self_route:
        return ops::slice_cols(tape, h, gate.slice_offset, gate.num_experts);
    case GateKind::random: {
        const auto rows = h.rows();
        std::vector<T> z(static_cast<std::size_t>(rows * gate.num_experts));
        for (auto& x : z) {
            x = static_cast<T>(rng.normal());
        }
        return BasicTensor<T>::from({rows, gate.num_experts}, std::move(z));
    }
    }
    throw ContractError("compute_logits: unknown gate kind");
}

std::int64_t router_param_count(GateKind kind, std::int64_t layers, std::int64_t model_dim, std::int64_t num_experts) {
    return kind == GateKind::learned ? layers * model_dim * num_experts : 0;
}

BalanceInputs batch_balance_inputs(const std::vector<RoutingDecision>& decisions, int num_experts) {
    if (decisions.empty()) {
        throw ContractError("batch_balance_inputs: no routing decisions");
    }
    const auto n = static_cast<std::size_t>(num_experts);
    std::vector<std::int64_t> counts(n, 0);
    BalanceInputs in{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)};
    std::int64_t total = 0;
    for (const auto& d : decisions) {
        for (std::size_t j = 0; j < d.indices.size(); ++j) {
            const int e = d.indices[j];
            if (e < 0 || e >= num_experts) {
                throw RangeError("batch_balance_inputs: expert index " + std::to_string(e) + " out of range");
            }
            ++counts[static_cast<std::size_t>(e)];
            in.p[static_cast<std::size_t>(e)] += d.weights[j];
            ++total;
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        in.f[i] = static_cast<double>(counts[i]) / static_cast<double>(total);
        in.p[i] /= static_cast<double>(decisions.size());
    }
    return in;
}

double balance_loss(const BalanceInputs& inputs, int num_experts) {
    const auto n = static_cast<std::size_t>(num_experts);
    if (inputs.f.size() != n || inputs.p.size() != n) {
        throw ContractError("balance_loss: f and p must both have " + std::to_string(num_experts) + " entries");
    }
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (inputs.f[i] < 0 || inputs.p[i] < 0) {
            throw ContractError("balance_loss: negative entry at expert " + std::to_string(i));
        }
        acc += inputs.f[i] * inputs.p[i];
    }
    return static_cast<double>(num_experts) * acc;
}

template <typename T>
BasicTensor<T> balance_loss(Tape& tape, const BasicRouting<T>& routing) {
    const auto n = static_cast<std::size_t>(routing.num_experts);
    std::vector<T> f(n, T(0));
    for (int e : routing.indices) {
        f[static_cast<std::size_t>(e)] += T(1);
    }
    const T scale = static_cast<T>(routing.num_experts) / static_cast<T>(routing.indices.size());
    for (auto& x : f) {
        x *= scale;
    }
    auto p = ops::expert_mean_probs(tape, routing.weights, routing.indices, routing.num_experts);
    return ops::dot_const(tape, p, std::span<const T>(f));
}

template BasicGate<float> make_gate(GateKind, int, int, Rng&, std::optional<int>);
template BasicGate<double> make_gate(GateKind, int, int, Rng&, std::optional<int>);
template BasicTensor<float> compute_logits(Tape&, const BasicGate<float>&, const BasicTensor<float>&, Rng&);
template BasicTensor<double> compute_logits(Tape&, const BasicGate<double>&, const BasicTensor<double>&, Rng&);
template BasicTensor<float> balance_loss(Tape&, const BasicRouting<float>&);
template BasicTensor<double> balance_loss(Tape&, const BasicRouting<double>&);

} // namespace selfroute
