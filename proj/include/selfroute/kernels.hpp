// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace selfroute::kernels {

enum class Trans : bool { no = false, yes = true };

/// Known zero pattern of a square op(A) (m == k). Terms the pattern makes
/// zero are left out of the chains, which changes no finite result.
enum class Band {
    full,
    lower, ///< op(A)[i][d] == 0 for d > i
    upper, ///< op(A)[i][d] == 0 for d < i
};

/// C[m,n] = op(A)[m,k] * op(B)[k,n], or C += ... when `accumulate`.
///
/// op(A) is stored [m,k] (Trans::no) or [k,m] (Trans::yes); likewise op(B)
/// is stored [k,n] or [n,k]. Every output element is a single fused
/// multiply-add chain over k in increasing order, starting from zero (or
/// from C when accumulating). A row of C therefore depends only on the
/// matching row of op(A), bit for bit, whatever m is.
///
/// With `lower_only`, elements with j > i may be skipped and hold
/// unspecified values afterwards.
template <typename T>
void gemm(Trans ta, Trans tb, std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c,
          bool accumulate, Band band = Band::full, bool lower_only = false);

} // namespace selfroute::kernels
