// SPDX-License-Identifier: Apache-2.0
#include "selfroute/model.hpp"

#include "selfroute/errors.hpp"
#include "selfroute/ops.hpp"

#include <cmath>

namespace selfroute {

namespace {

constexpr double kInitStd = 0.02;
constexpr std::uint64_t kBackboneStream = 0;
constexpr std::uint64_t kGateStream = 1000;

template <typename T>
BasicTensor<T> normal_param(Shape shape, Rng& rng, double stddev) {
    std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) {
        x = static_cast<T>(rng.normal() * stddev);
    }
    return BasicTensor<T>::from(std::move(shape), std::move(v), true);
}

template <typename T>
BasicTensor<T> const_param(Shape shape, T value) {
    return BasicTensor<T>::full(std::move(shape), value, true);
}

std::int64_t ffn_count(std::int64_t h, std::int64_t f) {
    return h * f + f + f * h + h;
}

} // namespace

std::string_view to_string(Placement p) {
    switch (p) {
    case Placement::every:
        return "every";
    case Placement::every2:
        return "every2";
    case Placement::none:
        return "none";
    }
    return "unknown";
}

Placement parse_placement(std::string_view text) {
    for (auto p : {Placement::every, Placement::every2, Placement::none}) {
        if (text == to_string(p)) {
            return p;
        }
    }
    throw ConfigError("model.moe_placement",
                      "unknown placement '" + std::string(text) + "' (expected every, every2 or none)");
}

void ModelConfig::validate() const {
    auto need = [](bool ok, const char* key, const std::string& message) {
        if (!ok) {
            throw ConfigError(key, message);
        }
    };
    need(depth >= 1, "model.depth", "must be at least 1");
    need(hidden >= 1, "model.hidden", "must be at least 1");
    need(heads >= 1, "model.heads", "must be at least 1");
    need(hidden % heads == 0, "model.heads",
         "hidden size " + std::to_string(hidden) + " is not divisible by " + std::to_string(heads) + " heads");
    need(seq_len >= 1, "model.seq_len", "must be at least 1");
    need(vocab >= 1, "model.vocab", "must be at least 1");
    need(ffn_ratio > 0 && ffn_hidden() >= 1, "model.ffn_ratio", "must give a positive FFN width");
    if (placement == Placement::none) {
        return;
    }
    need(num_experts >= 1, "model.num_experts", "must be at least 1");
    need(top_k >= 1 && top_k <= num_experts, "model.top_k",
         "top_k " + std::to_string(top_k) + " must lie in [1, num_experts=" + std::to_string(num_experts) + "]");
    if (gate == GateKind::self_route) {
        need(num_experts <= hidden, "model.num_experts",
             "self_route needs num_experts <= hidden (" + std::to_string(num_experts) + " > " +
                 std::to_string(hidden) + ")");
        if (slice_offset) {
            need(*slice_offset >= 0 && *slice_offset <= hidden - num_experts, "model.slice_offset",
                 "must lie in [0, " + std::to_string(hidden - num_experts) + "]");
        }
    }
}

int ModelConfig::ffn_hidden() const {
    return static_cast<int>(std::lround(ffn_ratio * hidden));
}

bool ModelConfig::is_moe_block(int index) const {
    switch (placement) {
    case Placement::every:
        return true;
    case Placement::every2:
        return index % 2 == 1;
    case Placement::none:
        return false;
    }
    return false;
}

int ModelConfig::moe_layers() const {
    int n = 0;
    for (int l = 0; l < depth; ++l) {
        n += is_moe_block(l) ? 1 : 0;
    }
    return n;
}

template <typename T>
std::vector<NamedParam<T>> BasicModel<T>::parameters() const {
    std::vector<NamedParam<T>> out;
    auto add = [&](std::string name, const BasicTensor<T>& t, ParamRole role) {
        out.push_back({std::move(name), t, role});
    };
    auto add_ffn = [&](const std::string& prefix, const BasicExpert<T>& e) {
        add(prefix + ".w1", e.w1, ParamRole::expert);
        add(prefix + ".b1", e.b1, ParamRole::expert);
        add(prefix + ".w2", e.w2, ParamRole::expert);
        add(prefix + ".b2", e.b2, ParamRole::expert);
    };
    add("token_embedding", token_embedding, ParamRole::backbone);
    add("position_embedding", position_embedding, ParamRole::backbone);
    for (std::size_t l = 0; l < blocks.size(); ++l) {
        const auto& b = blocks[l];
        const std::string p = "block." + std::to_string(l);
        add(p + ".ln1.gamma", b.ln1_gamma, ParamRole::backbone);
        add(p + ".ln1.beta", b.ln1_beta, ParamRole::backbone);
        add(p + ".attn.w_qkv", b.w_qkv, ParamRole::backbone);
        add(p + ".attn.b_qkv", b.b_qkv, ParamRole::backbone);
        add(p + ".attn.w_out", b.w_out, ParamRole::backbone);
        add(p + ".attn.b_out", b.b_out, ParamRole::backbone);
        add(p + ".ln2.gamma", b.ln2_gamma, ParamRole::backbone);
        add(p + ".ln2.beta", b.ln2_beta, ParamRole::backbone);
        if (!b.moe) {
            add_ffn(p + ".ffn", b.ffn);
            continue;
        }
        if (b.gate.projection.defined()) {
            add(p + ".gate.projection", b.gate.projection,
                b.gate.kind == GateKind::learned ? ParamRole::router : ParamRole::frozen);
        }
        for (std::size_t e = 0; e < b.experts.size(); ++e) {
            add_ffn(p + ".expert." + std::to_string(e), b.experts[e]);
        }
    }
    add("lnf.gamma", lnf_gamma, ParamRole::backbone);
    add("lnf.beta", lnf_beta, ParamRole::backbone);
    return out;
}

template <typename T>
BasicModel<T> BasicModel<T>::clone() const {
    auto copy = [](const BasicTensor<T>& t) {
        if (!t.defined()) {
            return t;
        }
        auto c = t.detach();
        c.set_requires_grad(t.requires_grad());
        return c;
    };
    auto copy_ffn = [&](const BasicExpert<T>& e) {
        return BasicExpert<T>{copy(e.w1), copy(e.b1), copy(e.w2), copy(e.b2)};
    };
    BasicModel<T> m;
    m.config = config;
    m.token_embedding = copy(token_embedding);
    m.position_embedding = copy(position_embedding);
    for (const auto& b : blocks) {
        BasicBlock<T> c = b;
        for (auto* t : {&c.ln1_gamma, &c.ln1_beta, &c.w_qkv, &c.b_qkv, &c.w_out, &c.b_out, &c.ln2_gamma, &c.ln2_beta}) {
            *t = copy(*t);
        }
        c.ffn = b.moe ? BasicExpert<T>{} : copy_ffn(b.ffn);
        for (auto& e : c.experts) {
            e = copy_ffn(e);
        }
        c.gate.projection = copy(b.gate.projection);
        m.blocks.push_back(std::move(c));
    }
    m.lnf_gamma = copy(lnf_gamma);
    m.lnf_beta = copy(lnf_beta);
    return m;
}

template <typename T>
BasicModel<T> build_model(const ModelConfig& cfg) {
    cfg.validate();
    const int h = cfg.hidden;
    const int f = cfg.ffn_hidden();
    const double out_std = kInitStd / std::sqrt(2.0 * cfg.depth);
    Rng rng(derive_seed(cfg.seed, kBackboneStream));

    BasicModel<T> m;
    m.config = cfg;
    m.token_embedding = normal_param<T>({cfg.vocab, h}, rng, kInitStd);
    m.position_embedding = normal_param<T>({cfg.seq_len, h}, rng, kInitStd);
    for (int l = 0; l < cfg.depth; ++l) {
        BasicBlock<T> b;
        b.ln1_gamma = const_param<T>({h}, T(1));
        b.ln1_beta = const_param<T>({h}, T(0));
        b.w_qkv = normal_param<T>({h, 3 * h}, rng, kInitStd);
        b.b_qkv = const_param<T>({3 * h}, T(0));
        b.w_out = normal_param<T>({h, h}, rng, out_std);
        b.b_out = const_param<T>({h}, T(0));
        b.ln2_gamma = const_param<T>({h}, T(1));
        b.ln2_beta = const_param<T>({h}, T(0));
        b.moe = cfg.is_moe_block(l);
        if (b.moe) {
            for (int e = 0; e < cfg.num_experts; ++e) {
                b.experts.push_back(make_expert<T>(h, f, rng, kInitStd, out_std));
            }
            Rng gate_rng(derive_seed(cfg.seed, kGateStream + static_cast<std::uint64_t>(l)));
            b.gate = make_gate<T>(cfg.gate, h, cfg.num_experts, gate_rng, cfg.slice_offset);
        } else {
            b.ffn = make_expert<T>(h, f, rng, kInitStd, out_std);
        }
        m.blocks.push_back(std::move(b));
    }
    m.lnf_gamma = const_param<T>({h}, T(1));
    m.lnf_beta = const_param<T>({h}, T(0));
    return m;
}

template <typename T>
ForwardResult<T> forward(Tape& tape, const BasicModel<T>& model, std::span<const int> tokens, std::int64_t batch,
                         std::int64_t seq, Rng& routing_rng) {
    const auto& cfg = model.config;
    if (batch < 1 || seq < 1 || static_cast<std::int64_t>(tokens.size()) != batch * seq) {
        throw ShapeError("forward: expected " + std::to_string(batch) + "x" + std::to_string(seq) + " tokens, got " +
                         std::to_string(tokens.size()));
    }
    if (seq > cfg.seq_len) {
        throw RangeError("forward: sequence length " + std::to_string(seq) + " exceeds seq_len " +
                         std::to_string(cfg.seq_len));
    }
    for (int t : tokens) {
        if (t < 0 || t >= cfg.vocab) {
            throw RangeError("forward: token id " + std::to_string(t) + " outside [0, " + std::to_string(cfg.vocab) +
                             ")");
        }
    }

    ForwardResult<T> result;
    auto x = ops::embed(tape, model.token_embedding, model.position_embedding, tokens, batch, seq);
    for (const auto& b : model.blocks) {
        auto a = ops::layer_norm(tape, x, b.ln1_gamma, b.ln1_beta);
        auto qkv = ops::add_bias(tape, ops::matmul(tape, a, b.w_qkv), b.b_qkv);
        auto att = ops::causal_attention(tape, qkv, cfg.heads);
        x = ops::add(tape, x, ops::add_bias(tape, ops::matmul(tape, att, b.w_out), b.b_out));

        auto n = ops::layer_norm(tape, x, b.ln2_gamma, b.ln2_beta);
        if (b.moe) {
            auto mixed = moe_forward(tape, n, b.gate, b.experts, cfg.top_k, routing_rng);
            x = ops::add(tape, x, mixed.out);
            result.routing.push_back(std::move(mixed.routing));
        } else {
            x = ops::add(tape, x, expert_forward(tape, b.ffn, n));
        }
    }
    auto final_norm = ops::layer_norm(tape, x, model.lnf_gamma, model.lnf_beta);
    result.logits = ops::matmul_nt(tape, final_norm, model.token_embedding);
    return result;
}

ParamCounts count_params(const ModelConfig& cfg) {
    cfg.validate();
    const std::int64_t h = cfg.hidden;
    const std::int64_t f = cfg.ffn_hidden();
    ParamCounts c;
    c.backbone = static_cast<std::int64_t>(cfg.vocab) * h + static_cast<std::int64_t>(cfg.seq_len) * h + 2 * h;
    for (int l = 0; l < cfg.depth; ++l) {
        c.backbone += 4 * h + h * 3 * h + 3 * h + h * h + h;
        c.expert += cfg.is_moe_block(l) ? cfg.num_experts * ffn_count(h, f) : ffn_count(h, f);
    }
    const std::int64_t moe = cfg.moe_layers();
    c.learned_router = router_param_count(cfg.gate, moe, h, cfg.num_experts);
    c.frozen = cfg.gate == GateKind::fixed_random ? moe * h * cfg.num_experts : 0;
    c.total = c.backbone + c.expert + c.learned_router + c.frozen;
    return c;
}

template <typename T>
ParamCounts count_params(const BasicModel<T>& model) {
    ParamCounts c;
    for (const auto& p : model.parameters()) {
        const auto n = p.tensor.numel();
        switch (p.role) {
        case ParamRole::backbone:
            c.backbone += n;
            break;
        case ParamRole::expert:
            c.expert += n;
            break;
        case ParamRole::router:
            c.learned_router += n;
            break;
        case ParamRole::frozen:
            c.frozen += n;
            break;
        }
        c.total += n;
    }
    return c;
}

#define SELFROUTE_INSTANTIATE_MODEL(T)                                                                                 \
    template struct BasicModel<T>;                                                                                     \
    template BasicModel<T> build_model(const ModelConfig&);                                                            \
    template ForwardResult<T> forward(Tape&, const BasicModel<T>&, std::span<const int>, std::int64_t, std::int64_t,   \
                                      Rng&);                                                                           \
    template ParamCounts count_params(const BasicModel<T>&);

SELFROUTE_INSTANTIATE_MODEL(float)
SELFROUTE_INSTANTIATE_MODEL(double)

#undef SELFROUTE_INSTANTIATE_MODEL

} // namespace selfroute
