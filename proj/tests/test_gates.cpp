// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include "selfroute/gates.hpp"
#include "selfroute/grad_check.hpp"
#include "selfroute/moe.hpp"
#include "selfroute/ops.hpp"

#include <cmath>
#include <numeric>

using namespace selfroute;

namespace {

template <typename T>
BasicTensor<T> random_tensor(Shape shape, Rng& rng, bool requires_grad = true) {
    std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = static_cast<T>(rng.normal());
    return BasicTensor<T>::from(std::move(shape), std::move(v), requires_grad);
}

std::vector<double> random_distribution(int n, Rng& rng) {
    std::vector<double> d(static_cast<std::size_t>(n));
    double total = 0;
    for (auto& x : d) {
        x = -std::log(1.0 - rng.uniform());
        total += x;
    }
    for (auto& x : d) x /= total;
    return d;
}

} // namespace

TEST_CASE("gate kind names round-trip") {
    for (auto kind : {GateKind::learned, GateKind::self_route, GateKind::fixed_random, GateKind::random}) {
        CHECK(parse_gate_kind(to_string(kind)) == kind);
    }
    try {
        parse_gate_kind("hash");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.key() == "model.gate");
    }
}

TEST_SUITE("compute_logits") {
    TEST_CASE("self_route reads the trailing slice") {
        Rng init(0), rng(0);
        auto gate = make_gate<float>(GateKind::self_route, 8, 4, init);
        CHECK(gate.slice_offset == 4);
        CHECK_FALSE(gate.projection.defined());
        Tape tape(false);
        auto z = compute_logits(tape, gate, Tensor::from({1, 8}, {1, 2, 3, 4, 5, 6, 7, 8}), rng);
        CHECK(std::vector<float>(z.data().begin(), z.data().end()) == std::vector<float>{5, 6, 7, 8});

        auto shifted = make_gate<float>(GateKind::self_route, 8, 4, init, 1);
        auto z1 = compute_logits(tape, shifted, Tensor::from({1, 8}, {1, 2, 3, 4, 5, 6, 7, 8}), rng);
        CHECK(std::vector<float>(z1.data().begin(), z1.data().end()) == std::vector<float>{2, 3, 4, 5});
    }

    TEST_CASE("self_route configuration errors") {
        Rng init(0);
        try {
            make_gate<float>(GateKind::self_route, 4, 8, init);
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(e.key() == "model.num_experts");
        }
        CHECK_THROWS_AS(make_gate<float>(GateKind::self_route, 8, 4, init, 5), ConfigError);
        CHECK_THROWS_AS(make_gate<float>(GateKind::self_route, 8, 4, init, -1), ConfigError);
        CHECK_NOTHROW(make_gate<float>(GateKind::self_route, 4, 4, init, 0));
    }

    TEST_CASE("learned gate with an identity projection passes h through") {
        Rng init(0), rng(0);
        auto gate = make_gate<float>(GateKind::learned, 3, 3, init);
        CHECK(gate.projection.requires_grad());
        auto p = gate.projection.data();
        std::fill(p.begin(), p.end(), 0.0f);
        p[0] = p[4] = p[8] = 1.0f;
        Tape tape(false);
        auto h = Tensor::from({2, 3}, {0.5f, -1, 2, 3, 4, -5});
        auto z = compute_logits(tape, gate, h, rng);
        CHECK(std::vector<float>(z.data().begin(), z.data().end()) ==
              std::vector<float>(h.data().begin(), h.data().end()));
    }

    TEST_CASE("width mismatch") {
        Rng init(0), rng(0);
        auto gate = make_gate<float>(GateKind::learned, 8, 4, init);
        Tape tape(false);
        CHECK_THROWS_AS(compute_logits(tape, gate, Tensor::zeros({2, 6}), rng), ShapeError);
    }

    TEST_CASE("random logits replay with the generator and carry no gradient") {
        Rng init(0);
        auto gate = make_gate<float>(GateKind::random, 8, 4, init);
        CHECK_FALSE(gate.projection.defined());
        auto h = Tensor::zeros({5, 8}, true);
        Tape tape;
        Rng a(42), b(42);
        auto z1 = compute_logits(tape, gate, h, a);
        auto z2 = compute_logits(tape, gate, h, b);
        CHECK(std::vector<float>(z1.data().begin(), z1.data().end()) ==
              std::vector<float>(z2.data().begin(), z2.data().end()));
        auto z3 = compute_logits(tape, gate, h, a);
        CHECK(std::vector<float>(z1.data().begin(), z1.data().end()) !=
              std::vector<float>(z3.data().begin(), z3.data().end()));
        CHECK_FALSE(z1.requires_grad());
        CHECK(tape.size() == 0);
    }

    TEST_CASE("fixed random projection is frozen and scaled by 1/sqrt(H)") {
        Rng init(5), rng(0);
        auto gate = make_gate<float>(GateKind::fixed_random, 256, 8, init);
        CHECK_FALSE(gate.projection.requires_grad());
        double sq = 0;
        for (float v : gate.projection.data()) sq += double(v) * v;
        const double stddev = std::sqrt(sq / double(gate.projection.numel()));
        CHECK(stddev == doctest::Approx(1.0 / 16.0).epsilon(0.05));

        auto h = random_tensor<float>({4, 256}, rng);
        Tape tape;
        auto loss = ops::sum(tape, compute_logits(tape, gate, h, rng));
        tape.backward(loss);
        CHECK_FALSE(gate.projection.has_grad());
        double g = 0;
        for (float v : h.grad()) g += std::abs(v);
        CHECK(g > 0);
    }

    TEST_CASE("learned projection receives a nonzero gradient") {
        Rng init(1), rng(2);
        auto gate = make_gate<float>(GateKind::learned, 16, 4, init);
        auto h = random_tensor<float>({8, 16}, rng);
        Tape tape;
        auto routing = route(tape, compute_logits(tape, gate, h, rng), 2);
        std::vector<float> w(16);
        for (auto& x : w) x = static_cast<float>(rng.normal());
        auto loss = ops::dot_const(tape, routing.weights, std::span<const float>(w));
        tape.backward(loss);
        double g = 0;
        for (float v : gate.projection.grad()) g += std::abs(v);
        CHECK(g > 0);
    }
}

TEST_CASE("self_route gate path only touches the slice window") {
    Rng init(0), rng(8);
    const int hidden = 12, experts = 4, k = 2, tokens = 6;
    auto gate = make_gate<float>(GateKind::self_route, hidden, experts, init, 3);
    auto h = random_tensor<float>({tokens, hidden}, rng);
    Tape tape;
    auto routing = route(tape, compute_logits(tape, gate, h, rng), k);
    std::vector<float> w(static_cast<std::size_t>(tokens * k));
    for (auto& x : w) x = static_cast<float>(rng.normal());
    auto loss = ops::dot_const(tape, routing.weights, std::span<const float>(w));
    tape.backward(loss);
    for (int t = 0; t < tokens; ++t) {
        for (int c = 0; c < hidden; ++c) {
            const float g = h.grad()[static_cast<std::size_t>(t * hidden + c)];
            const int e = c - 3;
            const bool selected = e >= 0 && e < experts &&
                                  std::find(routing.indices.begin() + t * k, routing.indices.begin() + (t + 1) * k, e) !=
                                      routing.indices.begin() + (t + 1) * k;
            if (selected) {
                CHECK(g != 0.0f);
            } else {
                CHECK(g == 0.0f);
            }
        }
    }
}

TEST_CASE("routing is invariant under a constant shift of the logits") {
    Rng rng(13);
    Tape tape(false);
    for (int trial = 0; trial < 20; ++trial) {
        auto z = random_tensor<float>({5, 8}, rng, false);
        auto shifted = z.detach();
        const float c = static_cast<float>(rng.normal() * 4);
        for (auto& v : shifted.data()) v += c;
        auto a = route(tape, z, 2);
        auto b = route(tape, shifted, 2);
        CHECK(a.indices == b.indices);
        for (std::size_t i = 0; i < a.indices.size(); ++i) {
            CHECK(std::abs(a.weights.data()[i] - b.weights.data()[i]) <= 1e-6f);
        }
    }
}

TEST_SUITE("router_param_count") {
    TEST_CASE("published dimensions") {
        CHECK(router_param_count(GateKind::learned, 12, 768, 8) == 73728);
        CHECK(router_param_count(GateKind::self_route, 12, 768, 8) == 0);
        CHECK(router_param_count(GateKind::fixed_random, 12, 768, 8) == 0);
        CHECK(router_param_count(GateKind::random, 12, 768, 8) == 0);
        CHECK(router_param_count(GateKind::learned, 1, 1, 1) == 1);
    }
}

TEST_SUITE("balance_loss") {
    TEST_CASE("worked values") {
        const std::vector<double> uniform(8, 1.0 / 8);
        CHECK(balance_loss({uniform, uniform}, 8) == 1.0);
        std::vector<double> hot(8, 0.0);
        hot[0] = 1.0;
        CHECK(balance_loss({hot, hot}, 8) == 8.0);
        std::vector<double> half(8, 0.0);
        half[0] = half[1] = 0.5;
        CHECK(balance_loss({half, uniform}, 8) == doctest::Approx(1.0).epsilon(1e-12));
    }

    TEST_CASE("contract errors") {
        std::vector<double> bad(4, 0.25);
        bad[1] = -0.25;
        bad[2] = 0.75;
        const std::vector<double> ok(4, 0.25);
        CHECK_THROWS_AS(balance_loss({bad, ok}, 4), ContractError);
        CHECK_THROWS_AS(balance_loss({ok, ok}, 5), ContractError);
    }

    TEST_CASE("f equal to p never falls below one") {
        Rng rng(77);
        double lowest = 1e9;
        for (int i = 0; i < 1000; ++i) {
            const auto d = random_distribution(8, rng);
            lowest = std::min(lowest, balance_loss({d, d}, 8));
        }
        CHECK(lowest >= 1.0 - 1e-9);
    }

    TEST_CASE("batch inputs from decisions") {
        const std::vector<RoutingDecision> one{{{1, 2}, {0.7311, 0.2689}, {0, 3, 2, 0}}};
        const auto in = batch_balance_inputs(one, 4);
        CHECK(in.f == std::vector<double>{0, 0.5, 0.5, 0});
        CHECK(in.p == std::vector<double>{0, 0.7311, 0.2689, 0});

        std::vector<RoutingDecision> same(5, RoutingDecision{{3, 6}, {0.5, 0.5}, {}});
        const auto in2 = batch_balance_inputs(same, 8);
        CHECK(in2.f[3] == 0.5);
        CHECK(in2.f[6] == 0.5);
        CHECK(in2.p[3] == 0.5);
        CHECK(in2.p[6] == 0.5);

        std::vector<RoutingDecision> all(3, RoutingDecision{{2, 0, 1, 3}, {0.4, 0.3, 0.2, 0.1}, {}});
        for (double f : batch_balance_inputs(all, 4).f) CHECK(f == 0.25);

        CHECK_THROWS_AS(batch_balance_inputs({}, 4), ContractError);
    }

    TEST_CASE("the differentiable form matches the value form and its gradient") {
        Rng rng(3);
        auto z = random_tensor<double>({10, 6}, rng);
        Tape tape(false);
        auto routing = route(tape, z, 2);
        const double value = balance_loss(tape, routing).item();
        const auto in = batch_balance_inputs(routing.decisions(), 6);
        CHECK(value == doctest::Approx(balance_loss(in, 6)).epsilon(1e-12));
        double fsum = 0, psum = 0;
        for (double f : in.f) fsum += f;
        for (double p : in.p) psum += p;
        CHECK(std::abs(fsum - 1) <= 1e-6);
        CHECK(std::abs(psum - 1) <= 1e-6);

        ScalarFn<double> f = [&](Tape& t) { return balance_loss(t, route(t, z, 2)); };
        CHECK(grad_check(f, z, 1e-3) < 1e-3);
    }
}
