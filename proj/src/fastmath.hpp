// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <type_traits>

namespace selfroute::detail {

// exp over an array. The float path is a branch-free range reduction plus a
// degree-6 polynomial that the compiler vectorizes (within 2 ulp of
// std::exp; exact 1 at 0, exact 0 below the normal range). Double uses the
// library function, which the gradient checks rely on.
template <typename T>
void exp_inplace(T* x, std::int64_t n) {
    if constexpr (std::is_same_v<T, float>) {
        constexpr float kLog2e = 1.44269504088896341f;
        constexpr float kLn2Hi = 0.693359375f;
        constexpr float kLn2Lo = -2.12194440e-4f;
        constexpr float kShift = 12582912.0f; // 1.5 * 2^23: rounds to nearest integer
        for (std::int64_t i = 0; i < n; ++i) {
            const float v = x[i];
            const float lo = v < -87.3f ? -87.3f : v;
            const float c = lo > 88.3f ? 88.3f : lo;
            const float t = c * kLog2e + kShift;
            const float k = t - kShift;
            const float r = (c - k * kLn2Hi) - k * kLn2Lo;
            float p = 1.9875691500e-4f;
            p = p * r + 1.3981999507e-3f;
            p = p * r + 8.3334519073e-3f;
            p = p * r + 4.1665795894e-2f;
            p = p * r + 1.6666665459e-1f;
            p = p * r + 5.0000001201e-1f;
            p = p * (r * r) + r + 1.0f;
            // the low mantissa bits of t hold k
            const std::uint32_t e = std::bit_cast<std::uint32_t>(t) - std::bit_cast<std::uint32_t>(kShift) + 127u;
            const float scale = std::bit_cast<float>(e << 23);
            x[i] = v < -87.3f ? 0.0f : p * scale;
        }
    } else {
        for (std::int64_t i = 0; i < n; ++i) {
            x[i] = std::exp(x[i]);
        }
    }
}

// tanh over an array via 1 - 2 / (exp(2u) + 1).
template <typename T>
void tanh_inplace(T* x, std::int64_t n) {
    if constexpr (std::is_same_v<T, float>) {
        for (std::int64_t i = 0; i < n; ++i) {
            const float lo = x[i] < -10.0f ? -10.0f : x[i];
            x[i] = 2.0f * (lo > 10.0f ? 10.0f : lo);
        }
        exp_inplace(x, n);
        for (std::int64_t i = 0; i < n; ++i) {
            x[i] = 1.0f - 2.0f / (x[i] + 1.0f);
        }
    } else {
        for (std::int64_t i = 0; i < n; ++i) {
            x[i] = std::tanh(x[i]);
        }
    }
}

} // namespace selfroute::detail
