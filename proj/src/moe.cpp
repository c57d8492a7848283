// SPDX-License-Identifier: Apache-2.0
#include "selfroute/moe.hpp"

#include "selfroute/errors.hpp"
#include "selfroute/ops.hpp"

namespace selfroute {

namespace {

template <typename T>
BasicTensor<T> normal_tensor(Shape shape, Rng& rng, double stddev) {
    std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) {
        x = static_cast<T>(rng.normal() * stddev);
    }
    return BasicTensor<T>::from(std::move(shape), std::move(v), true);
}

} // namespace

template <typename T>
BasicExpert<T> make_expert(int model_dim, int ffn_dim, Rng& init, double in_std, double out_std) {
    BasicExpert<T> e;
    e.w1 = normal_tensor<T>({model_dim, ffn_dim}, init, in_std);
    e.b1 = BasicTensor<T>::zeros({ffn_dim}, true);
    e.w2 = normal_tensor<T>({ffn_dim, model_dim}, init, out_std);
    e.b2 = BasicTensor<T>::zeros({model_dim}, true);
    return e;
}

template <typename T>
BasicTensor<T> expert_forward(Tape& tape, const BasicExpert<T>& e, const BasicTensor<T>& h) {
    auto hidden = ops::gelu(tape, ops::add_bias(tape, ops::matmul(tape, h, e.w1), e.b1));
    return ops::add_bias(tape, ops::matmul(tape, hidden, e.w2), e.b2);
}

template <typename T>
BasicRouting<T> route(Tape& tape, const BasicTensor<T>& z, int k) {
    const auto n = z.cols();
    if (k < 1 || k > n) {
        throw ConfigError("model.top_k", "top_k must lie in [1, " + std::to_string(n) + "], got " + std::to_string(k));
    }
    auto top = ops::topk(tape, z, k);
    BasicRouting<T> r;
    r.k = k;
    r.num_experts = static_cast<int>(n);
    r.indices = std::move(top.indices);
    r.weights = ops::softmax(tape, top.values);
    r.logits = z;
    return r;
}

DispatchPlan dispatch_plan(const std::vector<RoutingDecision>& decisions, int num_experts) {
    DispatchPlan plan(static_cast<std::size_t>(num_experts));
    for (std::size_t t = 0; t < decisions.size(); ++t) {
        const auto& d = decisions[t];
        for (std::size_t j = 0; j < d.indices.size(); ++j) {
            const int e = d.indices[j];
            if (e < 0 || e >= num_experts) {
                throw RangeError("dispatch_plan: expert index " + std::to_string(e) + " out of range");
            }
            plan[static_cast<std::size_t>(e)].push_back({static_cast<int>(t), static_cast<int>(j), d.weights[j]});
        }
    }
    return plan;
}

template <typename T>
DispatchPlan dispatch_plan(const BasicRouting<T>& routing) {
    DispatchPlan plan(static_cast<std::size_t>(routing.num_experts));
    const auto w = routing.weights.data();
    const auto tokens = routing.tokens();
    for (std::int64_t t = 0; t < tokens; ++t) {
        for (int j = 0; j < routing.k; ++j) {
            const auto at = static_cast<std::size_t>(t * routing.k + j);
            const int e = routing.indices[at];
            plan[static_cast<std::size_t>(e)].push_back({static_cast<int>(t), j, static_cast<double>(w[at])});
        }
    }
    return plan;
}

template <typename T>
MoeOutput<T> moe_forward(Tape& tape, const BasicTensor<T>& h, const BasicGate<T>& gate,
                         const std::vector<BasicExpert<T>>& experts, int k, Rng& rng) {
    if (static_cast<int>(experts.size()) != gate.num_experts) {
        throw ShapeError("moe_forward: " + std::to_string(experts.size()) + " experts for a gate over " +
                         std::to_string(gate.num_experts));
    }
    const auto z = compute_logits(tape, gate, h, rng);
    auto routing = route(tape, z, k);
    const auto plan = dispatch_plan(routing);

    std::vector<BasicTensor<T>> outputs(experts.size());
    std::vector<ops::ExpertSlot> slots(routing.indices.size());
    for (std::size_t e = 0; e < experts.size(); ++e) {
        const auto& assigned = plan[e];
        if (assigned.empty()) {
            continue;
        }
        std::vector<int> rows;
        rows.reserve(assigned.size());
        for (std::size_t i = 0; i < assigned.size(); ++i) {
            rows.push_back(assigned[i].token);
            slots[static_cast<std::size_t>(assigned[i].token) * static_cast<std::size_t>(k) +
                  static_cast<std::size_t>(assigned[i].slot)] = {static_cast<int>(e), static_cast<int>(i)};
        }
        outputs[e] = expert_forward(tape, experts[e], ops::gather_rows(tape, h, rows));
    }
    auto out = ops::combine_experts(tape, outputs, slots, routing.weights);
    if (h.ndim() != 2) {
        out = ops::reshape(tape, out, h.shape());
    }
    return {std::move(out), std::move(routing)};
}

#define SELFROUTE_INSTANTIATE_MOE(T)                                                                                   \
    template BasicExpert<T> make_expert(int, int, Rng&, double, double);                                              \
    template BasicTensor<T> expert_forward(Tape&, const BasicExpert<T>&, const BasicTensor<T>&);                      \
    template BasicRouting<T> route(Tape&, const BasicTensor<T>&, int);                                                \
    template DispatchPlan dispatch_plan(const BasicRouting<T>&);                                                       \
    template MoeOutput<T> moe_forward(Tape&, const BasicTensor<T>&, const BasicGate<T>&,                              \
                                      const std::vector<BasicExpert<T>>&, int, Rng&);

SELFROUTE_INSTANTIATE_MOE(float)
SELFROUTE_INSTANTIATE_MOE(double)

#undef SELFROUTE_INSTANTIATE_MOE

} // namespace selfroute
