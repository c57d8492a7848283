// SPDX-License-Identifier: Apache-2.0
#include "selfroute/rng.hpp"

#include "selfroute/errors.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace selfroute {

double Rng::normal() {
    // 1 - uniform() lies in (0, 1], so the log is finite.
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
    if (n == 0) {
        throw ContractError("Rng::below requires n > 0");
    }
    // Rejection sampling removes modulo bias.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x = engine_();
    while (x >= limit) {
        x = engine_();
    }
    return x % n;
}

std::string Rng::state() const {
    std::ostringstream out;
    out << engine_;
    return out.str();
}

void Rng::set_state(const std::string& text) {
    std::istringstream in(text);
    std::mt19937_64 engine;
    in >> engine;
    if (in.fail()) {
        throw FormatError("invalid rng state");
    }
    engine_ = engine;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    // splitmix64 finalizer over the combined value
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

} // namespace selfroute
