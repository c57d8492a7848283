// SPDX-License-Identifier: Apache-2.0
#include "selfroute/checkpoint.hpp"

#include "selfroute/config.hpp"
#include "selfroute/errors.hpp"

#include <bit>
#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace selfroute {

namespace {

constexpr std::string_view kMagic = "selfroute-checkpoint";
constexpr int kLengthDigits = 10;

std::uint32_t to_le(std::uint32_t x) {
    if constexpr (std::endian::native == std::endian::big) {
        x = (x >> 24) | ((x >> 8) & 0xff00u) | ((x << 8) & 0xff0000u) | (x << 24);
    }
    return x;
}

void put_floats(std::string& out, std::span<const float> v) {
    const auto base = out.size();
    out.resize(base + v.size() * 4);
    for (std::size_t i = 0; i < v.size(); ++i) {
        const auto bits = to_le(std::bit_cast<std::uint32_t>(v[i]));
        std::memcpy(out.data() + base + i * 4, &bits, 4);
    }
}

void get_floats(std::string_view blob, std::size_t offset, std::span<float> out) {
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint32_t bits = 0;
        std::memcpy(&bits, blob.data() + offset + i * 4, 4);
        out[i] = std::bit_cast<float>(to_le(bits));
    }
}

std::string dims_text(const Shape& shape) {
    std::string s;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        s += (i ? "x" : "") + std::to_string(shape[i]);
    }
    return s;
}

struct Entry {
    std::string name;
    std::span<const float> values;
    Shape shape;
};

std::vector<Entry> entries(const Checkpoint& c) {
    const auto params = c.model.parameters();
    if (c.opt.m.size() != params.size() || c.opt.v.size() != params.size() || c.opt.steps.size() != params.size()) {
        throw ContractError("optimizer state does not match the model's parameter list");
    }
    std::vector<Entry> out;
    for (const auto& p : params) {
        out.push_back({p.name, p.tensor.data(), p.tensor.shape()});
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        out.push_back({"adam.m." + params[i].name, c.opt.m[i], params[i].tensor.shape()});
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        out.push_back({"adam.v." + params[i].name, c.opt.v[i], params[i].tensor.shape()});
    }
    return out;
}

[[noreturn]] void bad(const std::string& what) {
    throw FormatError("checkpoint: " + what);
}

template <typename Int>
Int to_int(std::string_view text, std::string_view what) {
    Int v{};
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || end != text.data() + text.size()) {
        bad("invalid " + std::string(what) + " '" + std::string(text) + "'");
    }
    return v;
}

double to_double(std::string_view text, std::string_view what) {
    double v = 0;
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || end != text.data() + text.size()) {
        bad("invalid " + std::string(what) + " '" + std::string(text) + "'");
    }
    return v;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
    std::vector<std::string_view> parts;
    while (true) {
        const auto at = s.find(sep);
        parts.push_back(s.substr(0, at));
        if (at == std::string_view::npos) {
            return parts;
        }
        s.remove_prefix(at + 1);
    }
}

} // namespace

std::string encode_checkpoint(const Checkpoint& c) {
    const auto list = entries(c);
    std::string body;
    body += format_config(RunConfig{c.model.config, c.train});
    body += "step = " + std::to_string(c.step) + '\n';
    body += "data_rng = " + c.data_rng.state() + '\n';
    body += "routing_rng = " + c.routing_rng.state() + '\n';
    body += "pending.steps = " + std::to_string(c.pending_steps) + '\n';
    body += "pending.task_loss = " + format_double(c.pending.task_loss) + '\n';
    body += "pending.balance_loss = " + format_double(c.pending.balance_loss) + '\n';
    body += "pending.total_loss = " + format_double(c.pending.total_loss) + '\n';
    std::size_t offset = 0;
    for (const auto& e : list) {
        body += "tensor " + e.name + ' ' + dims_text(e.shape) + ' ' + std::to_string(offset) + ' ' +
                std::to_string(e.values.size()) + '\n';
        offset += e.values.size() * 4;
    }
    body += "adam.steps =";
    for (const auto s : c.opt.steps) {
        body += ' ' + std::to_string(s);
    }
    body += "\nend\n";

    std::string head = std::string(kMagic) + "\nversion = " + std::to_string(kCheckpointVersion) + "\nheader_bytes = ";
    const auto total = head.size() + kLengthDigits + 1 + body.size();
    char digits[kLengthDigits + 2];
    std::snprintf(digits, sizeof digits, "%0*zu\n", kLengthDigits, total);
    std::string out = head + digits + body;
    out.reserve(total + offset);
    for (const auto& e : list) {
        put_floats(out, e.values);
    }
    return out;
}

Checkpoint decode_checkpoint(std::string_view bytes) {
    // Fixed preamble
    const auto first = std::string(kMagic) + "\nversion = ";
    if (bytes.substr(0, first.size()) != first) {
        bad("not a selfroute checkpoint");
    }
    auto rest = bytes.substr(first.size());
    const auto nl = rest.find('\n');
    if (nl == std::string_view::npos) {
        bad("truncated header");
    }
    const auto version = to_int<int>(rest.substr(0, nl), "version");
    if (version != kCheckpointVersion) {
        bad("version " + std::to_string(version) + " is not supported (expected " +
            std::to_string(kCheckpointVersion) + ")");
    }
    rest.remove_prefix(nl + 1);
    constexpr std::string_view length_key = "header_bytes = ";
    if (rest.substr(0, length_key.size()) != length_key || rest.size() < length_key.size() + kLengthDigits + 1) {
        bad("missing header_bytes");
    }
    const auto header_bytes = to_int<std::size_t>(rest.substr(length_key.size(), kLengthDigits), "header_bytes");
    if (header_bytes > bytes.size()) {
        bad("header_bytes exceeds the file size");
    }
    const auto body_start = first.size() + nl + 1 + length_key.size() + kLengthDigits + 1;
    if (header_bytes < body_start + 5) {
        bad("header_bytes is too small");
    }
    const auto header = bytes.substr(0, header_bytes);
    const auto blob = bytes.substr(header_bytes);
    if ( header.substr(header.size() - 5) != "\nend\n") {
        bad("header is not terminated by 'end'");
    }
    auto lines = split(header.substr(body_start, header.size() - body_start - 5), '\n');

    // Key-value lines and manifest
    std::string config_text;
    std::map<std::string, std::string, std::less<>> fields;
    struct Manifest {
        std::string name;
        std::string dims;
        std::size_t offset;
        std::size_t count;
    };
    std::vector<Manifest> manifest;
    const auto& keys = config_keys();
    for (const auto line : lines) {
        if (line.starts_with("tensor ")) {
            const auto parts = split(line.substr(7), ' ');
            if (parts.size() != 4) {
                bad("malformed manifest line '" + std::string(line) + "'");
            }
            manifest.push_back({std::string(parts[0]), std::string(parts[1]),
                                to_int<std::size_t>(parts[2], "tensor offset"),
                                to_int<std::size_t>(parts[3], "tensor count")});
            continue;
        }
        const auto eq = line.find(" = ");
        const auto bare = line.find(" =");
        if (eq == std::string_view::npos && !(bare != std::string_view::npos && bare + 2 == line.size())) {
            bad("malformed header line '" + std::string(line) + "'");
        }
        const auto key = line.substr(0, eq != std::string_view::npos ? eq : bare);
        if (std::find(keys.begin(), keys.end(), key) != keys.end()) {
            config_text.append(line);
            config_text += '\n';
            continue;
        }
        const auto value = eq != std::string_view::npos ? line.substr(eq + 3) : std::string_view{};
        if (!fields.emplace(std::string(key), std::string(value)).second) {
            bad("duplicate header key '" + std::string(key) + "'");
        }
    }
    auto field = [&](std::string_view key) -> const std::string& {
        const auto it = fields.find(key);
        if (it == fields.end()) {
            bad("missing header key '" + std::string(key) + "'");
        }
        return it->second;
    };

    RunConfig cfg;
    try {
        cfg = parse_config(config_text);
    } catch (const ConfigError& e) {
        bad(std::string("invalid config: ") + e.what());
    }

    Checkpoint c;
    c.train = cfg.train;
    c.model = build_model<float>(cfg.model);
    c.step = to_int<std::int64_t>(field("step"), "step");
    try {
        c.data_rng.set_state(field("data_rng"));
        c.routing_rng.set_state(field("routing_rng"));
    } catch (const FormatError&) {
        bad("invalid generator state");
    }
    c.pending_steps = to_int<std::int64_t>(field("pending.steps"), "pending.steps");
    c.pending.task_loss = to_double(field("pending.task_loss"), "pending.task_loss");
    c.pending.balance_loss = to_double(field("pending.balance_loss"), "pending.balance_loss");
    c.pending.total_loss = to_double(field("pending.total_loss"), "pending.total_loss");
    if (fields.size() != 8) {
        bad("unexpected header keys");
    }

    const auto params = c.model.parameters();
    c.opt = AdamState::zeros_like(c.model);
    const auto step_text = split(field("adam.steps"), ' ');
    if (field("adam.steps").empty() ? !params.empty() : step_text.size() != params.size()) {
        bad("adam.steps has the wrong length");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        c.opt.steps[i] = to_int<std::int64_t>(step_text[i], "adam step count");
    }

    // Manifest against the expected layout
    struct Target {
        std::string name;
        Shape shape;
        std::span<float> out;
    };
    std::vector<Target> targets;
    for (auto& p : params) {
        auto t = p.tensor;
        targets.push_back({p.name, t.shape(), t.data()});
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        targets.push_back({"adam.m." + params[i].name, params[i].tensor.shape(), c.opt.m[i]});
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        targets.push_back({"adam.v." + params[i].name, params[i].tensor.shape(), c.opt.v[i]});
    }
    if (manifest.size() != targets.size()) {
        bad("manifest lists " + std::to_string(manifest.size()) + " tensors, the config implies " +
            std::to_string(targets.size()));
    }
    std::size_t expected = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        const auto& m = manifest[i];
        const auto& t = targets[i];
        if (m.name != t.name || m.dims != dims_text(t.shape) || m.count != t.out.size() || m.offset != expected) {
            bad("manifest entry '" + m.name + "' does not match the expected tensor '" + t.name + "'");
        }
        expected += m.count * 4;
    }
    if (blob.size() != expected) {
        bad("blob holds " + std::to_string(blob.size()) + " bytes, the manifest describes " +
            std::to_string(expected));
    }
    for (std::size_t i = 0; i < targets.size(); ++i) {
        get_floats(blob, manifest[i].offset, targets[i].out);
    }
    return c;
}

void save_checkpoint(const Checkpoint& c, const std::string& path) {
    const auto bytes = encode_checkpoint(c);
    const auto tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw IoError("cannot write checkpoint " + tmp);
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        throw IoError("cannot move checkpoint into place at " + path + ": " + ec.message());
    }
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot read checkpoint " + path);
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return decode_checkpoint(buf.str());
}

} // namespace selfroute
