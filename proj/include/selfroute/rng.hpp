// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace selfroute {

/// Seeded generator with platform-independent derived distributions.
///
/// The engine is std::mt19937_64; uniform/normal/below are computed here
/// rather than through <random> distributions so that a given seed yields
/// the same stream on every standard library. The full engine state can be
/// captured as text for checkpoints.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 bits of resolution.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    /// Standard normal (Box-Muller; one draw consumes two engine outputs).
    double normal();

    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t below(std::uint64_t n);

    std::string state() const;
    void set_state(const std::string& text);

    friend bool operator==(const Rng& a, const Rng& b) { return a.engine_ == b.engine_; }

private:
    std::mt19937_64 engine_;
};

/// Mixes a base seed with a stream id so independent consumers do not share draws.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

} // namespace selfroute
