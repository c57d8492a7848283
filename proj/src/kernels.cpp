// SPDX-License-Identifier: Apache-2.0
#include "selfroute/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace selfroute::kernels {

namespace {

constexpr std::int64_t kRowBlock = 6;
constexpr std::int64_t kDepthBlock = 256;
constexpr std::int64_t kLanes = 16;

template <typename T>
struct Scratch {
    std::vector<T> a;
    std::vector<T> b;
    std::vector<T> tile;
};

template <typename T>
Scratch<T>& scratch() {
    static thread_local Scratch<T> s;
    return s;
}

// Packs rows [0, m) x depth [k0, k0+kc) of op(A) into blocks of kRowBlock
// rows laid out [block][depth][row]; missing rows are zero.
template <typename T>
void pack_a(Trans ta, std::int64_t m, std::int64_t k, const T* a, std::int64_t k0, std::int64_t kc, T* out) {
    const std::int64_t blocks = (m + kRowBlock - 1) / kRowBlock;
    for (std::int64_t q = 0; q < blocks; ++q) {
        T* dst = out + q * kc * kRowBlock;
        const std::int64_t row0 = q * kRowBlock;
        const std::int64_t rows = std::min(kRowBlock, m - row0);
        if (ta == Trans::yes) {
            // op(A) rows are contiguous runs in each stored row of A
            for (std::int64_t d = 0; d < kc; ++d) {
                const T* src = a + (k0 + d) * m + row0;
                T* o = dst + d * kRowBlock;
                for (std::int64_t r = 0; r < rows; ++r) {
                    o[r] = src[r];
                }
                for (std::int64_t r = rows; r < kRowBlock; ++r) {
                    o[r] = T(0);
                }
            }
            continue;
        }
        for (std::int64_t r = 0; r < kRowBlock; ++r) {
            if (r >= rows) {
                for (std::int64_t d = 0; d < kc; ++d) {
                    dst[d * kRowBlock + r] = T(0);
                }
                continue;
            }
            const T* src = a + (row0 + r) * k + k0;
            for (std::int64_t d = 0; d < kc; ++d) {
                dst[d * kRowBlock + r] = src[d];
            }
        }
    }
}

// Packs columns [j0, j0+width) x depth [k0, k0+kc) of op(B) as [depth][col],
// zero-padding columns past n up to `padded` width.
template <typename T>
void pack_b(Trans tb, std::int64_t n, std::int64_t k, const T* b, std::int64_t j0, std::int64_t width,
            std::int64_t padded, std::int64_t k0, std::int64_t kc, T* out) {
    for (std::int64_t d = 0; d < kc; ++d) {
        T* dst = out + d * padded;
        if (tb == Trans::no) {
            std::memcpy(dst, b + (k0 + d) * n + j0, static_cast<std::size_t>(width) * sizeof(T));
        } else {
            for (std::int64_t j = 0; j < width; ++j) {
                dst[j] = b[(j0 + j) * k + k0 + d];
            }
        }
        for (std::int64_t j = width; j < padded; ++j) {
            dst[j] = T(0);
        }
    }
}

// Portable micro-kernel: a kRowBlock x W tile, one fma chain per element.
template <typename T, std::int64_t W>
void micro_generic(const T* ap, const T* bp, std::int64_t kc, T* c, std::int64_t ldc, bool load) {
    T acc[kRowBlock][W];
    for (std::int64_t r = 0; r < kRowBlock; ++r) {
        for (std::int64_t j = 0; j < W; ++j) {
            acc[r][j] = load ? c[r * ldc + j] : T(0);
        }
    }
    for (std::int64_t d = 0; d < kc; ++d) {
        const T* brow = bp + d * W;
        for (std::int64_t r = 0; r < kRowBlock; ++r) {
            const T av = ap[d * kRowBlock + r];
            for (std::int64_t j = 0; j < W; ++j) {
                acc[r][j] = std::fma(av, brow[j], acc[r][j]);
            }
        }
    }
    for (std::int64_t r = 0; r < kRowBlock; ++r) {
        for (std::int64_t j = 0; j < W; ++j) {
            c[r * ldc + j] = acc[r][j];
        }
    }
}

#if defined(__AVX512F__)
// The register tile only stays in registers when every r/v loop is fully
// unrolled; GCC's default heuristics stop short of that.
template <int V>
void micro_avx512(const float* ap, const float* bp, std::int64_t kc, float* c, std::int64_t ldc, bool load) {
    constexpr int W = 16 * V;
    __m512 acc[kRowBlock][V];
#pragma GCC unroll 8
    for (int r = 0; r < kRowBlock; ++r) {
#pragma GCC unroll 8
        for (int v = 0; v < V; ++v) {
            acc[r][v] = load ? _mm512_loadu_ps(c + r * ldc + 16 * v) : _mm512_setzero_ps();
        }
    }
    for (std::int64_t d = 0; d < kc; ++d) {
        const float* brow = bp + d * W;
        __m512 bv[V];
#pragma GCC unroll 8
        for (int v = 0; v < V; ++v) {
            bv[v] = _mm512_loadu_ps(brow + 16 * v);
        }
#pragma GCC unroll 8
        for (int r = 0; r < kRowBlock; ++r) {
            const __m512 av = _mm512_set1_ps(ap[d * kRowBlock + r]);
#pragma GCC unroll 8
            for (int v = 0; v < V; ++v) {
                acc[r][v] = _mm512_fmadd_ps(av, bv[v], acc[r][v]);
            }
        }
    }
#pragma GCC unroll 8
    for (int r = 0; r < kRowBlock; ++r) {
#pragma GCC unroll 8
        for (int v = 0; v < V; ++v) {
            _mm512_storeu_ps(c + r * ldc + 16 * v, acc[r][v]);
        }
    }
}
#endif

template <typename T, std::int64_t W>
void micro(const T* ap, const T* bp, std::int64_t kc, T* c, std::int64_t ldc, bool load) {
#if defined(__AVX512F__)
    if constexpr (std::is_same_v<T, float>) {
        micro_avx512<static_cast<int>(W / 16)>(ap, bp, kc, c, ldc, load);
        return;
    }
#endif
    micro_generic<T, W>(ap, bp, kc, c, ldc, load);
}

struct Depth {
    Band band;
    std::int64_t k;
    std::int64_t k0;
    std::int64_t kc;
    bool accumulate;
};

template <typename T, std::int64_t W>
void panel(std::int64_t m, std::int64_t n, std::int64_t j0, std::int64_t width, const T* ap, const T* bp,
           const Depth& depth, bool lower_only, T* c, T* tile) {
    const std::int64_t blocks = (m + kRowBlock - 1) / kRowBlock;
    const std::int64_t kc = depth.kc;
    for (std::int64_t q = 0; q < blocks; ++q) {
        const std::int64_t row0 = q * kRowBlock;
        const std::int64_t rows = std::min(kRowBlock, m - row0);
        if (lower_only && j0 >= row0 + rows) {
            continue;
        }
        // nonzero depth range of this row block, clipped to the current depth block
        std::int64_t lo = 0;
        std::int64_t hi = depth.k;
        if (depth.band == Band::lower) {
            hi = std::min(depth.k, row0 + rows);
        } else if (depth.band == Band::upper) {
            lo = row0;
        }
        const bool load = depth.accumulate || lo < depth.k0;
        lo = std::max(lo, depth.k0) - depth.k0;
        hi = std::min(hi, depth.k0 + kc) - depth.k0;
        if (lo >= hi) {
            continue;
        }
        const T* a = ap + q * kc * kRowBlock + lo * kRowBlock;
        const T* b = bp + lo * W;
        if (rows == kRowBlock && width == W) {
            micro<T, W>(a, b, hi - lo, c + row0 * n + j0, n, load);
            continue;
        }
        // edge tiles go through a full-size buffer
        if (load) {
            for (std::int64_t r = 0; r < rows; ++r) {
                std::memcpy(tile + r * W, c + (row0 + r) * n + j0, static_cast<std::size_t>(width) * sizeof(T));
            }
        }
        micro<T, W>(a, b, hi - lo, tile, W, load);
        for (std::int64_t r = 0; r < rows; ++r) {
            std::memcpy(c + (row0 + r) * n + j0, tile + r * W, static_cast<std::size_t>(width) * sizeof(T));
        }
    }
}

} // namespace

template <typename T>
void gemm(Trans ta, Trans tb, std::int64_t m, std::int64_t n, std::int64_t k, const T* a, const T* b, T* c,
          bool accumulate, Band band, bool lower_only) {
    if (m <= 0 || n <= 0) {
        return;
    }
    if (k <= 0) {
        if (!accumulate) {
            std::fill(c, c + m * n, T(0));
        }
        return;
    }
    constexpr std::int64_t wide = 4 * kLanes;
    auto& s = scratch<T>();
    const std::int64_t blocks = (m + kRowBlock - 1) / kRowBlock;
    s.a.resize(static_cast<std::size_t>(blocks * kRowBlock * std::min(k, kDepthBlock)));
    s.b.resize(static_cast<std::size_t>(wide * std::min(k, kDepthBlock)));
    s.tile.resize(static_cast<std::size_t>(kRowBlock * wide));

    for (std::int64_t k0 = 0; k0 < k; k0 += kDepthBlock) {
        const std::int64_t kc = std::min(kDepthBlock, k - k0);
        const Depth depth{m == k ? band : Band::full, k, k0, kc, accumulate};
        pack_a(ta, m, k, a, k0, kc, s.a.data());
        std::int64_t j0 = 0;
        for (; j0 + wide <= n; j0 += wide) {
            pack_b(tb, n, k, b, j0, wide, wide, k0, kc, s.b.data());
            panel<T, wide>(m, n, j0, wide, s.a.data(), s.b.data(), depth, lower_only, c, s.tile.data());
        }
        for (; j0 < n; j0 += kLanes) {
            const std::int64_t width = std::min(kLanes, n - j0);
            pack_b(tb, n, k, b, j0, width, kLanes, k0, kc, s.b.data());
            panel<T, kLanes>(m, n, j0, width, s.a.data(), s.b.data(), depth, lower_only, c, s.tile.data());
        }
    }
}

template void gemm<float>(Trans, Trans, std::int64_t, std::int64_t, std::int64_t, const float*, const float*, float*,
                          bool, Band, bool);
template void gemm<double>(Trans, Trans, std::int64_t, std::int64_t, std::int64_t, const double*, const double*,
                           double*, bool, Band, bool);

} // namespace selfroute::kernels
