// SPDX-License-Identifier: Apache-2.0
#include "selfroute/config.hpp"

#include "selfroute/errors.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

namespace selfroute {

namespace {

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) {
        return {};
    }
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

template <typename Int>
Int parse_int(std::string_view key, std::string_view v) {
    Int out{};
    const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || end != v.data() + v.size()) {
        throw ConfigError(std::string(key), "expected an integer, got '" + std::string(v) + "'");
    }
    return out;
}

double parse_double(std::string_view key, std::string_view v) {
    double out = 0;
    const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || end != v.data() + v.size()) {
        throw ConfigError(std::string(key), "expected a number, got '" + std::string(v) + "'");
    }
    return out;
}

using Setter = std::function<void(RunConfig&, std::string_view key, std::string_view value)>;
using Getter = std::function<std::string(const RunConfig&)>;

struct Field {
    std::string_view key;
    Setter set;
    Getter get;
};

template <typename Int, typename Member>
Field int_field(std::string_view key, Member member) {
    return {key,
            [member](RunConfig& c, std::string_view k, std::string_view v) { member(c) = parse_int<Int>(k, v); },
            [member](const RunConfig& c) { return std::to_string(member(c)); }};
}

template <typename Member>
Field double_field(std::string_view key, Member member) {
    return {key, [member](RunConfig& c, std::string_view k, std::string_view v) { member(c) = parse_double(k, v); },
            [member](const RunConfig& c) { return format_double(member(c)); }};
}

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        int_field<int>("model.depth", [](auto& c) -> auto& { return c.model.depth; }),
        int_field<int>("model.hidden", [](auto& c) -> auto& { return c.model.hidden; }),
        int_field<int>("model.heads", [](auto& c) -> auto& { return c.model.heads; }),
        int_field<int>("model.seq_len", [](auto& c) -> auto& { return c.model.seq_len; }),
        int_field<int>("model.vocab", [](auto& c) -> auto& { return c.model.vocab; }),
        {"model.moe_placement",
         [](RunConfig& c, std::string_view, std::string_view v) { c.model.placement = parse_placement(v); },
         [](const RunConfig& c) { return std::string(to_string(c.model.placement)); }},
        int_field<int>("model.num_experts", [](auto& c) -> auto& { return c.model.num_experts; }),
        int_field<int>("model.top_k", [](auto& c) -> auto& { return c.model.top_k; }),
        {"model.gate", [](RunConfig& c, std::string_view, std::string_view v) { c.model.gate = parse_gate_kind(v); },
         [](const RunConfig& c) { return std::string(to_string(c.model.gate)); }},
        {"model.slice_offset",
         [](RunConfig& c, std::string_view k, std::string_view v) {
             if (v == "auto") {
                 c.model.slice_offset.reset();
             } else {
                 c.model.slice_offset = parse_int<int>(k, v);
             }
         },
         [](const RunConfig& c) {
             return c.model.slice_offset ? std::to_string(*c.model.slice_offset) : std::string("auto");
         }},
        int_field<int>("train.steps", [](auto& c) -> auto& { return c.train.steps; }),
        int_field<int>("train.batch_size", [](auto& c) -> auto& { return c.train.batch_size; }),
        double_field("train.learning_rate", [](auto& c) -> auto& { return c.train.learning_rate; }),
        int_field<int>("train.warmup_steps", [](auto& c) -> auto& { return c.train.warmup_steps; }),
        double_field("train.weight_decay", [](auto& c) -> auto& { return c.train.weight_decay; }),
        double_field("train.balance_weight", [](auto& c) -> auto& { return c.train.balance_weight; }),
        int_field<std::uint64_t>("train.seed", [](auto& c) -> auto& { return c.train.seed; }),
        int_field<int>("train.eval_every", [](auto& c) -> auto& { return c.train.eval_every; }),
        {"data.corpus", [](RunConfig& c, std::string_view, std::string_view v) { c.train.corpus = std::string(v); },
         [](const RunConfig& c) { return c.train.corpus; }},
    };
    return table;
}

} // namespace

void RunConfig::validate() const {
    model.validate();
    train.validate();
}

const std::vector<std::string_view>& config_keys() {
    static const std::vector<std::string_view> keys = [] {
        std::vector<std::string_view> k;
        for (const auto& f : fields()) {
            k.push_back(f.key);
        }
        return k;
    }();
    return keys;
}

std::string format_double(double v) {
    char buf[64];
    const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return ec == std::errc() ? std::string(buf, end) : std::to_string(v);
}

RunConfig parse_config(std::string_view text) {
    std::map<std::string_view, const Field*> by_key;
    for (const auto& f : fields()) {
        by_key[f.key] = &f;
    }
    RunConfig cfg;
    std::set<std::string, std::less<>> seen;
    std::size_t line_no = 0;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) {
            line = line.substr(0, hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError("", "line " + std::to_string(line_no) + ": expected 'key = value'");
        }
        const auto key = trim(line.substr(0, eq));
        const auto value = trim(line.substr(eq + 1));
        const auto it = by_key.find(key);
        if (it == by_key.end()) {
            throw ConfigError(std::string(key), "unknown key");
        }
        if (!seen.insert(std::string(key)).second) {
            throw ConfigError(std::string(key), "given more than once");
        }
        it->second->set(cfg, key, value);
    }
    cfg.model.seed = cfg.train.seed;
    cfg.validate();
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read config " + path);
    }
    std::ostringstream text;
    text << in.rdbuf();
    return parse_config(text.str());
}

std::string format_config(const RunConfig& cfg) {
    std::string out;
    for (const auto& f : fields()) {
        out += std::string(f.key) + " = " + f.get(cfg) + '\n';
    }
    return out;
}

} // namespace selfroute
