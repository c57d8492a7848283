// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "selfroute/tape.hpp"
#include "selfroute/tensor.hpp"

#include <functional>

namespace selfroute {

/// A deterministic scalar function of some leaf tensor, built on the given tape.
template <typename T>
using ScalarFn = std::function<BasicTensor<T>(Tape&)>;

/// Compares the tape gradient of `f` with respect to `x` against central
/// differences, perturbing each coordinate of `x` in place by ±eps.
///
/// Returns max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-8). `f` must read `x`
/// (the same storage) and must be deterministic; anything random inside it
/// has to be replayed from a fixed state on every call.
template <typename T>
double grad_check(const ScalarFn<T>& f, BasicTensor<T> x, double eps);

} // namespace selfroute
