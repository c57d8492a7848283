// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include "selfroute/model.hpp"
#include "selfroute/ops.hpp"

#include <cstring>

using namespace selfroute;

namespace {

ModelConfig small_config(GateKind gate = GateKind::self_route) {
    ModelConfig cfg;
    cfg.depth = 2;
    cfg.hidden = 16;
    cfg.heads = 4;
    cfg.seq_len = 12;
    cfg.vocab = 32;
    cfg.num_experts = 4;
    cfg.top_k = 2;
    cfg.gate = gate;
    cfg.seed = 11;
    return cfg;
}

std::vector<int> random_tokens(std::size_t n, int vocab, Rng& rng) {
    std::vector<int> out(n);
    for (auto& t : out) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab)));
    return out;
}

template <typename T>
bool bitwise_equal(std::span<const T> a, std::span<const T> b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size_bytes()) == 0;
}

std::string config_error_key(const ModelConfig& cfg) {
    try {
        cfg.validate();
    } catch (const ConfigError& e) {
        return e.key();
    }
    return "";
}

} // namespace

TEST_SUITE("count_params") {
    TEST_CASE("learned router at published dimensions") {
        ModelConfig cfg;
        cfg.depth = 12;
        cfg.hidden = 768;
        cfg.heads = 12;
        cfg.seq_len = 1024;
        cfg.vocab = 50257;
        cfg.num_experts = 8;
        cfg.gate = GateKind::learned;
        const auto learned = count_params(cfg);
        CHECK(learned.learned_router == 73728);

        cfg.gate = GateKind::self_route;
        const auto self = count_params(cfg);
        CHECK(self.learned_router == 0);
        CHECK(learned.total - self.total == 12 * 768 * 8);
    }

    TEST_CASE("parts add up and agree with a built model") {
        for (auto gate : {GateKind::learned, GateKind::self_route, GateKind::fixed_random, GateKind::random}) {
            for (auto placement : {Placement::every, Placement::every2, Placement::none}) {
                auto cfg = small_config(gate);
                cfg.depth = 3;
                cfg.placement = placement;
                const auto formula = count_params(cfg);
                CHECK(formula.total ==
                      formula.backbone + formula.expert + formula.learned_router + formula.frozen);
                const auto built = count_params(build_model<float>(cfg));
                CHECK(built.total == formula.total);
                CHECK(built.backbone == formula.backbone);
                CHECK(built.expert == formula.expert);
                CHECK(built.learned_router == formula.learned_router);
                CHECK(built.frozen == formula.frozen);
                CHECK(built.learned_router ==
                      router_param_count(gate, cfg.moe_layers(), cfg.hidden, cfg.num_experts));
            }
        }
    }

    TEST_CASE("learned minus self_route is moe layers times H times N") {
        auto cfg = small_config(GateKind::learned);
        cfg.depth = 4;
        cfg.placement = Placement::every2;
        const auto a = count_params(cfg);
        cfg.gate = GateKind::self_route;
        const auto b = count_params(cfg);
        CHECK(a.total - b.total == 2 * 16 * 4);
    }

    TEST_CASE("dense placement has no router and dense expert counts") {
        auto cfg = small_config(GateKind::learned);
        cfg.placement = Placement::none;
        const auto c = count_params(cfg);
        CHECK(c.learned_router == 0);
        const std::int64_t h = cfg.hidden, f = cfg.ffn_hidden();
        CHECK(c.expert == cfg.depth * (h * f + f + f * h + h));
    }

    TEST_CASE("one expert with top-1 self routing counts like a dense model") {
        auto cfg = small_config(GateKind::self_route);
        cfg.num_experts = 1;
        cfg.top_k = 1;
        auto dense = cfg;
        dense.placement = Placement::none;
        CHECK(count_params(cfg).total == count_params(dense).total);
    }
}

TEST_SUITE("build_model") {
    TEST_CASE("placement decides which blocks are mixtures") {
        auto cfg = small_config();
        cfg.depth = 4;
        cfg.placement = Placement::every2;
        auto m = build_model<float>(cfg);
        CHECK_FALSE(m.blocks[0].moe);
        CHECK(m.blocks[1].moe);
        CHECK_FALSE(m.blocks[2].moe);
        CHECK(m.blocks[3].moe);
        CHECK(m.blocks[1].experts.size() == 4);
        CHECK(m.blocks[0].ffn.w1.defined());

        cfg.placement = Placement::every;
        CHECK(cfg.moe_layers() == 4);
        cfg.placement = Placement::none;
        CHECK(cfg.moe_layers() == 0);
    }

    TEST_CASE("same seed builds identical parameters") {
        auto a = build_model<float>(small_config(GateKind::learned));
        auto b = build_model<float>(small_config(GateKind::learned));
        const auto pa = a.parameters();
        const auto pb = b.parameters();
        REQUIRE(pa.size() == pb.size());
        for (std::size_t i = 0; i < pa.size(); ++i) {
            CHECK(pa[i].name == pb[i].name);
            CHECK(bitwise_equal<float>(pa[i].tensor.data(), pb[i].tensor.data()));
        }
        auto cfg = small_config(GateKind::learned);
        cfg.seed = 12;
        auto c = build_model<float>(cfg);
        CHECK_FALSE(bitwise_equal<float>(a.token_embedding.data(), c.token_embedding.data()));
    }

    TEST_CASE("gate kind does not disturb the other initial weights") {
        auto a = build_model<float>(small_config(GateKind::learned));
        auto b = build_model<float>(small_config(GateKind::self_route));
        CHECK(bitwise_equal<float>(a.token_embedding.data(), b.token_embedding.data()));
        CHECK(bitwise_equal<float>(a.blocks[1].experts[3].w2.data(), b.blocks[1].experts[3].w2.data()));
    }

    TEST_CASE("invalid configurations name the field") {
        auto cfg = small_config();
        cfg.heads = 3;
        CHECK(config_error_key(cfg) == "model.heads");
        cfg = small_config();
        cfg.top_k = 5;
        CHECK(config_error_key(cfg) == "model.top_k");
        cfg = small_config();
        cfg.num_experts = 17;
        cfg.top_k = 2;
        CHECK(config_error_key(cfg) == "model.num_experts");
        cfg = small_config();
        cfg.slice_offset = 13;
        CHECK(config_error_key(cfg) == "model.slice_offset");
        cfg = small_config();
        cfg.depth = 0;
        CHECK(config_error_key(cfg) == "model.depth");
        cfg = small_config();
        cfg.placement = Placement::none;
        cfg.top_k = 9;
        CHECK(config_error_key(cfg).empty());
        cfg = small_config();
        cfg.vocab = 0;
        CHECK_THROWS_AS(build_model<float>(cfg), ConfigError);
    }

    TEST_CASE("placement names round-trip") {
        for (auto p : {Placement::every, Placement::every2, Placement::none}) {
            CHECK(parse_placement(to_string(p)) == p);
        }
        CHECK_THROWS_AS(parse_placement("alternate"), ConfigError);
    }
}

TEST_SUITE("forward") {
    TEST_CASE("shapes and decision counts") {
        auto m = build_model<float>(small_config(GateKind::learned));
        Rng rng(1);
        const auto tokens = random_tokens(3 * 10, 32, rng);
        Tape tape(false);
        auto r = forward(tape, m, tokens, 3, 10, rng);
        CHECK(r.logits.shape() == Shape{3, 10, 32});
        REQUIRE(r.routing.size() == 2);
        for (const auto& layer : r.routing) {
            CHECK(layer.tokens() == 30);
            CHECK(layer.decisions().size() == 30);
        }
    }

    TEST_CASE("input errors") {
        auto m = build_model<float>(small_config());
        Rng rng(1);
        Tape tape(false);
        std::vector<int> too_long(13, 0);
        CHECK_THROWS_AS(forward(tape, m, too_long, 1, 13, rng), RangeError);
        std::vector<int> bad{1, 2, 32};
        CHECK_THROWS_AS(forward(tape, m, bad, 1, 3, rng), RangeError);
        CHECK_THROWS_AS(forward(tape, m, bad, 2, 3, rng), ShapeError);
    }

    TEST_CASE("changing a later token leaves earlier logits bitwise unchanged") {
        for (auto gate : {GateKind::learned, GateKind::self_route, GateKind::fixed_random}) {
            auto m = build_model<float>(small_config(gate));
            Rng rng(2);
            auto tokens = random_tokens(2 * 12, 32, rng);
            Tape tape(false);
            Rng ra(5), rb(5);
            auto base = forward(tape, m, tokens, 2, 12, ra);
            const int t = 7;
            tokens[t] = (tokens[t] + 1) % 32;
            tokens[12 + t] = (tokens[12 + t] + 5) % 32;
            auto changed = forward(tape, m, tokens, 2, 12, rb);
            for (int b = 0; b < 2; ++b) {
                const std::size_t begin = static_cast<std::size_t>(b * 12 * 32);
                const std::size_t count = static_cast<std::size_t>(t * 32);
                CHECK(bitwise_equal<float>(base.logits.data().subspan(begin, count),
                                           changed.logits.data().subspan(begin, count)));
                CHECK_FALSE(bitwise_equal<float>(base.logits.data().subspan(begin + count, 32),
                                                 changed.logits.data().subspan(begin + count, 32)));
            }
        }
    }

    TEST_CASE("forward and gradients are deterministic") {
        auto run = [](std::vector<float>& logits, std::vector<float>& grad) {
            auto m = build_model<float>(small_config(GateKind::random));
            Rng data(3), routing(4);
            auto tokens = random_tokens(2 * 12, 32, data);
            auto targets = random_tokens(2 * 12, 32, data);
            Tape tape;
            auto r = forward(tape, m, tokens, 2, 12, routing);
            auto loss = ops::cross_entropy(tape, r.logits, targets);
            tape.backward(loss);
            logits.assign(r.logits.data().begin(), r.logits.data().end());
            grad.assign(m.blocks[0].w_qkv.grad().begin(), m.blocks[0].w_qkv.grad().end());
        };
        std::vector<float> l1, g1, l2, g2;
        run(l1, g1);
        run(l2, g2);
        CHECK(bitwise_equal<float>(l1, l2));
        CHECK(bitwise_equal<float>(g1, g2));
    }

    TEST_CASE("untrained logits give a near-uniform loss") {
        auto cfg = small_config();
        cfg.vocab = 256;
        auto m = build_model<float>(cfg);
        Rng rng(9);
        auto tokens = random_tokens(4 * 12, 256, rng);
        auto targets = random_tokens(4 * 12, 256, rng);
        Tape tape(false);
        auto r = forward(tape, m, tokens, 4, 12, rng);
        const float loss = ops::cross_entropy(tape, r.logits, targets).item();
        CHECK(std::abs(loss - std::log(256.0f)) < 0.2f);
    }

    TEST_CASE("one expert with top-1 matches the dense model bitwise") {
        for (auto gate : {GateKind::self_route, GateKind::random}) {
            auto cfg = small_config(gate);
            cfg.num_experts = 1;
            cfg.top_k = 1;
            auto dense_cfg = cfg;
            dense_cfg.placement = Placement::none;
            auto moe = build_model<float>(cfg);
            auto dense = build_model<float>(dense_cfg);
            // same backbone stream; copy the expert weights into the dense FFNs
            for (std::size_t l = 0; l < moe.blocks.size(); ++l) {
                const auto& e = moe.blocks[l].experts[0];
                auto& f = dense.blocks[l].ffn;
                std::copy(e.w1.data().begin(), e.w1.data().end(), f.w1.data().begin());
                std::copy(e.b1.data().begin(), e.b1.data().end(), f.b1.data().begin());
                std::copy(e.w2.data().begin(), e.w2.data().end(), f.w2.data().begin());
                std::copy(e.b2.data().begin(), e.b2.data().end(), f.b2.data().begin());
            }
            Rng rng(6);
            auto tokens = random_tokens(2 * 12, 32, rng);
            Tape tape(false);
            auto a = forward(tape, moe, tokens, 2, 12, rng);
            auto b = forward(tape, dense, tokens, 2, 12, rng);
            CHECK(bitwise_equal<float>(a.logits.data(), b.logits.data()));
            for (const auto& layer : a.routing) {
                for (std::int64_t t = 0; t < layer.tokens(); ++t) {
                    CHECK(layer.weights.data()[static_cast<std::size_t>(t)] == 1.0f);
                }
            }
        }
    }
}
