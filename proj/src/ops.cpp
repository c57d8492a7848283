// SPDX-License-Identifier: Apache-2.0
#include "selfroute/ops.hpp"

#include "selfroute/kernels.hpp"

#include "fastmath.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

namespace selfroute::ops {

using kernels::gemm;
using kernels::Band;
using kernels::Trans;

namespace {

template <typename T>
using Storage = std::shared_ptr<TensorStorage<T>>;

Shape with_last(const Shape& shape, std::int64_t last) {
    Shape out = shape;
    out.back() = last;
    return out;
}

template <typename T>
T* grad_of(TensorStorage<T>& s) {
    if (s.grad.empty()) {
        s.grad.assign(s.data.size(), T(0));
    }
    return s.grad.data();
}

// Allocates s.grad uninitialized if it has none yet. A true result means the
// caller must assign every element rather than accumulate.
template <typename T>
bool claim_grad(TensorStorage<T>& s) {
    if (s.grad.empty()) {
        s.grad.resize(s.data.size());
        return true;
    }
    return false;
}

template <typename T>
bool wants(const Storage<T>& s) {
    return s && s->requires_grad;
}

void require(bool cond, const std::string& message) {
    if (!cond) {
        throw ShapeError(message);
    }
}

} // namespace

// ---------------------------------------------------------------- linear maps

template <typename T>
BasicTensor<T> matmul(Tape& tape, const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require(b.ndim() == 2 && a.cols() == b.dim(0),
            "matmul: inner dimensions disagree: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
    const auto rows = a.rows();
    const auto inner = a.cols();
    const auto outer = b.dim(1);
    auto out = BasicTensor<T>::uninitialized(with_last(a.shape(), outer));
    gemm<T>(Trans::no, Trans::no, rows, outer, inner, a.ptr(), b.ptr(), out.ptr(), false);
    if (tape.needs_grad({&a, &b})) {
        Storage<T> as = a.storage(), bs = b.storage(), os = out.storage();
        tape.record(out, [as, bs, os, rows, inner, outer] {
            if (os->grad.empty()) {
                return;
            }
            if (wants(as)) {
                const bool fresh = claim_grad(*as);
                gemm<T>(Trans::no, Trans::yes, rows, inner, outer, os->grad.data(), bs->data.data(), as->grad.data(),
                        !fresh);
            }
            if (wants(bs)) {
                const bool fresh = claim_grad(*bs);
                gemm<T>(Trans::yes, Trans::no, inner, outer, rows, as->data.data(), os->grad.data(), bs->grad.data(),
                        !fresh);
            }
        });
    }
    return out;
}

template <typename T>
BasicTensor<T> matmul_nt(Tape& tape, const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require(b.ndim() == 2 && a.cols() == b.dim(1),
            "matmul_nt: inner dimensions disagree: " + shape_string(a.shape()) + " x " + shape_string(b.shape()) +
                "^T");
    const auto rows = a.rows();
    const auto inner = a.cols();
    const auto outer = b.dim(0);
    auto out = BasicTensor<T>::uninitialized(with_last(a.shape(), outer));
    gemm<T>(Trans::no, Trans::yes, rows, outer, inner, a.ptr(), b.ptr(), out.ptr(), false);
    if (tape.needs_grad({&a, &b})) {
        Storage<T> as = a.storage(), bs = b.storage(), os = out.storage();
        tape.record(out, [as, bs, os, rows, inner, outer] {
            if (os->grad.empty()) {
                return;
            }
            if (wants(as)) {
                const bool fresh = claim_grad(*as);
                gemm<T>(Trans::no, Trans::no, rows, inner, outer, os->grad.data(), bs->data.data(), as->grad.data(),
                        !fresh);
            }
            if (wants(bs)) {
                const bool fresh = claim_grad(*bs);
                gemm<T>(Trans::yes, Trans::no, outer, inner, rows, os->grad.data(), as->data.data(), bs->grad.data(),
                        !fresh);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------- elementwise

template <typename T>
BasicTensor<T> add(Tape& tape, const BasicTensor<T>& a, const BasicTensor<T>& b) {
    require(a.shape() == b.shape(), "add: shapes differ: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    auto out = BasicTensor<T>::uninitialized(a.shape());
    const auto n = static_cast<std::size_t>(a.numel());
    const T* x = a.ptr();
    const T* y = b.ptr();
    T* o = out.ptr();
    for (std::size_t i = 0; i < n; ++i) {
        o[i] = x[i] + y[i];
    }
    if (tape.needs_grad({&a, &b})) {
        Storage<T> as = a.storage(), bs = b.storage(), os = out.storage();
        tape.record(out, [as, bs, os, n] {
            if (os->grad.empty()) {
                return;
            }
            const T* g = os->grad.data();
            for (const auto& s : {as, bs}) {
                if (wants(s)) {
                    if (claim_grad(*s)) {
                        std::copy_n(g, n, s->grad.data());
                        continue;
                    }
                    T* d = s->grad.data();
                    for (std::size_t i = 0; i < n; ++i) {
                        d[i] += g[i];
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
BasicTensor<T> reshape(Tape& tape, const BasicTensor<T>& x, Shape shape) {
    require(shape_numel(shape) == x.numel(),
            "reshape: " + shape_string(x.shape()) + " cannot become " + shape_string(shape));
    auto out = BasicTensor<T>::from(std::move(shape), x.data());
    if (tape.needs_grad({&x})) {
        Storage<T> xs = x.storage(), os = out.storage();
        tape.record(out, [xs, os] {
            if (os->grad.empty()) {
                return;
            }
            if (claim_grad(*xs)) {
                std::copy(os->grad.begin(), os->grad.end(), xs->grad.begin());
                return;
            }
            T* d = xs->grad.data();
            for (std::size_t i = 0; i < os->grad.size(); ++i) {
                d[i] += os->grad[i];
            }
        });
    }
    return out;
}

template <typename T>
BasicTensor<T> add_bias(Tape& tape, const BasicTensor<T>& x, const BasicTensor<T>& bias) {
    require(bias.numel() == x.cols(),
            "add_bias: bias " + shape_string(bias.shape()) + " does not match " + shape_string(x.shape()));
    auto out = BasicTensor<T>::uninitialized(x.shape());
    const auto rows = x.rows();
    const auto cols = x.cols();
    const T* b = bias.ptr();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xi = x.ptr() + r * cols;
        T* o = out.ptr() + r * cols;
        for (std::int64_t c = 0; c < cols; ++c) {
            o[c] = xi[c] + b[c];
        }
    }
    if (tape.needs_grad({&x, &bias})) {
        Storage<T> xs = x.storage(), bs = bias.storage(), os = out.storage();
        tape.record(out, [xs, bs, os, rows, cols] {
            if (os->grad.empty()) {
                return;
            }
            const T* g = os->grad.data();
            if (wants(xs) && claim_grad(*xs)) {
                std::copy_n(g, rows * cols, xs->grad.data());
            } else if (wants(xs)) {
                T* d = xs->grad.data();
                for (std::int64_t i = 0; i < rows * cols; ++i) {
                    d[i] += g[i];
                }
            }
            if (wants(bs)) {
                T* d = grad_of(*bs);
                for (std::int64_t r = 0; r < rows; ++r) {
                    for (std::int64_t c = 0; c < cols; ++c) {
                        d[c] += g[r * cols + c];
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
BasicTensor<T> scale(Tape& tape, const BasicTensor<T>& x, T factor) {
    auto out = BasicTensor<T>::uninitialized(x.shape());
    const auto n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        out.ptr()[i] = x.ptr()[i] * factor;
    }
    if (tape.needs_grad({&x})) {
        Storage<T> xs = x.storage(), os = out.storage();
        tape.record(out, [xs, os, n, factor] {
            if (os->grad.empty()) {
                return;
            }
            T* d = grad_of(*xs);
            for (std::int64_t i = 0; i < n; ++i) {
                d[i] += os->grad[static_cast<std::size_t>(i)] * factor;
            }
        });
    }
    return out;
}

template <typename T>
BasicTensor<T> gelu(Tape& tape, const BasicTensor<T>& x) {
    constexpr T kAlpha = T(0.7978845608028654); // sqrt(2/pi)
    constexpr T kBeta = T(0.044715);
    auto out = BasicTensor<T>::uninitialized(x.shape());
    const auto n = x.numel();
    const T* xi = x.ptr();
    T* o = out.ptr();
    std::vector<T> th(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const T v = xi[i];
        th[static_cast<std::size_t>(i)] = kAlpha * (v + kBeta * v * v * v);
    }
    detail::tanh_inplace(th.data(), n);
    for (std::int64_t i = 0; i < n; ++i) {
        o[i] = T(0.5) * xi[i] * (T(1) + th[static_cast<std::size_t>(i)]);
    }
    if (tape.needs_grad({&x})) {
        Storage<T> xs = x.storage(), os = out.storage();
        tape.record(out, [xs, os, n, th = std::move(th)] {
            if (os->grad.empty()) {
                return;
            }
            const T* g = os->grad.data();
            const T* xv = xs->data.data();
            const bool fresh = claim_grad(*xs);
            T* d = xs->grad.data();
            for (std::int64_t i = 0; i < n; ++i) {
                const T v = xv[i];
                const T t = th[static_cast<std::size_t>(i)];
                const T dt = kAlpha * (T(1) + T(3) * kBeta * v * v);
                const T contrib = g[i] * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * dt);
                d[i] = fresh ? contrib : d[i] + contrib;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------- normalization

template <typename T>
BasicTensor<T> layer_norm(Tape& tape, const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps) {
    const auto rows = x.rows();
    const auto cols = x.cols();
    require(gamma.numel() == cols && beta.numel() == cols,
            "layer_norm: affine parameters do not match " + shape_string(x.shape()));
    auto out = BasicTensor<T>::uninitialized(x.shape());
    // normalized activations and inverse std are kept for backward
    std::vector<T> xhat(static_cast<std::size_t>(rows * cols));
    std::vector<T> inv_std(static_cast<std::size_t>(rows));
    const T* g = gamma.ptr();
    const T* b = beta.ptr();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xi = x.ptr() + r * cols;
        T mu = 0;
        for (std::int64_t c = 0; c < cols; ++c) {
            mu += xi[c];
        }
        mu /= static_cast<T>(cols);
        T var = 0;
        for (std::int64_t c = 0; c < cols; ++c) {
            const T dv = xi[c] - mu;
            var += dv * dv;
        }
        var /= static_cast<T>(cols);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(r)] = is;
        T* xh = xhat.data() + r * cols;
        T* o = out.ptr() + r * cols;
        for (std::int64_t c = 0; c < cols; ++c) {
            xh[c] = (xi[c] - mu) * is;
            o[c] = xh[c] * g[c] + b[c];
        }
    }
    if (tape.needs_grad({&x, &gamma, &beta})) {
        Storage<T> xs = x.storage(), gs = gamma.storage(), bs = beta.storage(), os = out.storage();
        tape.record(out, [xs, gs, bs, os, rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
            if (os->grad.empty()) {
                return;
            }
            const T* dy = os->grad.data();
            if (wants(gs) || wants(bs)) {
                T* dg = wants(gs) ? grad_of(*gs) : nullptr;
                T* db = wants(bs) ? grad_of(*bs) : nullptr;
                for (std::int64_t r = 0; r < rows; ++r) {
                    for (std::int64_t c = 0; c < cols; ++c) {
                        const auto i = r * cols + c;
                        if (dg) {
                            dg[c] += dy[i] * xhat[static_cast<std::size_t>(i)];
                        }
                        if (db) {
                            db[c] += dy[i];
                        }
                    }
                }
            }
            if (wants(xs)) {
                const bool fresh = claim_grad(*xs);
                T* dx = xs->grad.data();
                const T* g = gs->data.data();
                const T inv_n = T(1) / static_cast<T>(cols);
                for (std::int64_t r = 0; r < rows; ++r) {
                    const T* xh = xhat.data() + r * cols;
                    T sum_d = 0;
                    T sum_dx = 0;
                    for (std::int64_t c = 0; c < cols; ++c) {
                        const T d = dy[r * cols + c] * g[c];
                        sum_d += d;
                        sum_dx += d * xh[c];
                    }
                    const T is = inv_std[static_cast<std::size_t>(r)];
                    for (std::int64_t c = 0; c < cols; ++c) {
                        const T d = dy[r * cols + c] * g[c];
                        const T contrib = is * (d - sum_d * inv_n - xh[c] * sum_dx * inv_n);
                        dx[r * cols + c] = fresh ? contrib : dx[r * cols + c] + contrib;
                    }
                }
            }
        });
    }
    return out;
}

namespace {

template <typename T>
void softmax_row(const T* x, T* y, std::int64_t n) {
    T mx = x[0];
    for (std::int64_t i = 1; i < n; ++i) {
        mx = std::max(mx, x[i]);
    }
    for (std::int64_t i = 0; i < n; ++i) {
        y[i] = x[i] - mx;
    }
    detail::exp_inplace(y, n);
    T total = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        total += y[i];
    }
    const T inv = T(1) / total;
    for (std::int64_t i = 0; i < n; ++i) {
        y[i] *= inv;
    }
}

// dx += y * (dy - <dy, y>)
template <typename T>
void softmax_row_backward(const T* y, const T* dy, T* dx, std::int64_t n) {
    T dot = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        dot += dy[i] * y[i];
    }
    for (std::int64_t i = 0; i < n; ++i) {
        dx[i] += y[i] * (dy[i] - dot);
    }
}

} // namespace

template <typename T>
BasicTensor<T> softmax(Tape& tape, const BasicTensor<T>& x) {
    const auto rows = x.rows();
    const auto cols = x.cols();
    auto out = BasicTensor<T>::uninitialized(x.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
        softmax_row(x.ptr() + r * cols, out.ptr() + r * cols, cols);
    }
    if (tape.needs_grad({&x})) {
        Storage<T> xs = x.storage(), os = out.storage();
        tape.record(out, [xs, os, rows, cols] {
            if (os->grad.empty()) {
                return;
            }
            T* dx = grad_of(*xs);
            for (std::int64_t r = 0; r < rows; ++r) {
                softmax_row_backward(os->data.data() + r * cols, os->grad.data() + r * cols, dx + r * cols, cols);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------- indexing

template <typename T>
BasicTensor<T> slice_cols(Tape& tape, const BasicTensor<T>& x, std::int64_t offset, std::int64_t n) {
    const auto rows = x.rows();
    const auto cols = x.cols();
    if (n < 1 || offset < 0 || offset + n > cols) {
        throw ShapeError("slice of " + std::to_string(n) + " columns at offset " + std::to_string(offset) +
                         " does not fit last dimension " + std::to_string(cols));
    }
    auto out = BasicTensor<T>::uninitialized(with_last(x.shape(), n));
    for (std::int64_t r = 0; r < rows; ++r) {
        std::copy_n(x.ptr() + r * cols + offset, n, out.ptr() + r * n);
    }
    if (tape.needs_grad({&x})) {
        Storage<T> xs = x.storage(), os = out.storage();
        tape.record(out, [xs, os, rows, cols, offset, n] {
            if (os->grad.empty()) {
                return;
            }
            T* dx = grad_of(*xs);
            for (std::int64_t r = 0; r < rows; ++r) {
                for (std::int64_t c = 0; c < n; ++c) {
                    dx[r * cols + offset + c] += os->grad[static_cast<std::size_t>(r * n + c)];
                }
            }
        });
    }
    return out;
}

template <typename T>
BasicTensor<T> slice_last(Tape& tape, const BasicTensor<T>& x, std::int64_t n) {
    if (n < 1 || n > x.cols()) {
        throw ShapeError("slice_last: n=" + std::to_string(n) + " outside [1, " + std::to_string(x.cols()) + "]");
    }
    return slice_cols(tape, x, x.cols() - n, n);
}

template <typename T>
std::vector<int> topk_indices(std::span<const T> values, int k) {
    const auto d = static_cast<int>(values.size());
    if (k < 1 || k > d) {
        throw ShapeError("topk: k=" + std::to_string(k) + " outside [1, " + std::to_string(d) + "]");
    }
    std::vector<int> order(static_cast<std::size_t>(d));
    std::iota(order.begin(), order.end(), 0);
    // stable: equal values keep ascending index order
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
        const T va = values[static_cast<std::size_t>(a)];
        const T vb = values[static_cast<std::size_t>(b)];
        return va > vb || (va == vb && a < b);
    });
    order.resize(static_cast<std::size_t>(k));
    return order;
}

template <typename T>
TopK<T> topk(Tape& tape, const BasicTensor<T>& x, int k) {
    const auto rows = x.rows();
    const auto cols = x.cols();
    TopK<T> result;
    result.indices.reserve(static_cast<std::size_t>(rows * k));
    for (std::int64_t r = 0; r < rows; ++r) {
        auto idx = topk_indices<T>(x.data().subspan(static_cast<std::size_t>(r * cols), static_cast<std::size_t>(cols)), k);
        result.indices.insert(result.indices.end(), idx.begin(), idx.end());
    }
    result.values = gather_cols(tape, x, result.indices, k);
    return result;
}

template <typename T>
BasicTensor<T> gather_cols(Tape& tape, const BasicTensor<T>& x, std::span<const int> indices, int k) {
    const auto rows = x.rows();
    const auto cols = x.cols();
    require(k >= 1 && static_cast<std::int64_t>(indices.size()) == rows * k,
            "gather_cols: expected " + std::to_string(rows) + "x" + std::to_string(k) + " indices");
    for (int i : indices) {
        if (i < 0 || i >= cols) {
            throw RangeError("gather_cols: column " + std::to_string(i) + " outside [0, " + std::to_string(cols) + ")");
        }
    }
    auto out = BasicTensor<T>::uninitialized(with_last(x.shape(), k));
    for (std::int64_t r = 0; r < rows; ++r) {
        for (int j = 0; j < k; ++j) {
            out.ptr()[r * k + j] = x.ptr()[r * cols + indices[static_cast<std::size_t>(r * k + j)]];
        }
    }
    if (tape.needs_grad({&x})) {
        Storage<T> xs = x.storage(), os = out.storage();
        std::vector<int> idx(indices.begin(), indices.end());
        tape.record(out, [xs, os, rows, cols, k, idx = std::move(idx)] {
            if (os->grad.empty()) {
                return;
            }
            T* dx = grad_of(*xs);
            for (std::int64_t r = 0; r < rows; ++r) {
                for (int j = 0; j < k; ++j) {
                    dx[r * cols + idx[static_cast<std::size_t>(r * k + j)]] += os->grad[static_cast<std::size_t>(r * k + j)];
                }
            }
        });
    }
    return out;
}

template <typename T>
BasicTensor<T> gather_rows(Tape& tape, const BasicTensor<T>& x, std::span<const int> rows) {
    const auto n = static_cast<std::int64_t>(rows.size());
    const auto cols = x.cols();
    const auto total = x.rows();
    require(n > 0, "gather_rows: empty row list");
    for (int r : rows) {
        if (r < 0 || r >= total) {
            throw RangeError("gather_rows: row " + std::to_string(r) + " outside [0, " + std::to_string(total) + ")");
        }
    }
    auto out = BasicTensor<T>::uninitialized({n, cols});
    for (std::int64_t i = 0; i < n; ++i) {
        std::copy_n(x.ptr() + rows[static_cast<std::size_t>(i)] * cols, cols, out.ptr() + i * cols);
    }
    if (tape.needs_grad({&x})) {
        Storage<T> xs = x.storage(), os = out.storage();
        std::vector<int> idx(rows.begin(), rows.end());
        tape.record(out, [xs, os, cols, idx = std::move(idx)] {
            if (os->grad.empty()) {
                return;
            }
            T* dx = grad_of(*xs);
            for (std::size_t i = 0; i < idx.size(); ++i) {
                const T* g = os->grad.data() + static_cast<std::int64_t>(i) * cols;
                T* d = dx + static_cast<std::int64_t>(idx[i]) * cols;
                for (std::int64_t c = 0; c < cols; ++c) {
                    d[c] += g[c];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------- reductions / losses

template <typename T>
BasicTensor<T> cross_entropy(Tape& tape, const BasicTensor<T>& logits, std::span<const int> targets) {
    const auto rows = logits.rows();
    const auto vocab = logits.cols();
    require(static_cast<std::int64_t>(targets.size()) == rows,
            "cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) + " rows");
    for (int t : targets) {
        if (t < 0 || t >= vocab) {
            throw RangeError("cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(vocab) +
                             ")");
        }
    }
    std::vector<T> probs(static_cast<std::size_t>(rows * vocab));
    T total = 0;
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* z = logits.ptr() + r * vocab;
        T mx = z[0];
        for (std::int64_t v = 1; v < vocab; ++v) {
            mx = std::max(mx, z[v]);
        }
        T denom = 0;
        T* p = probs.data() + r * vocab;
        for (std::int64_t v = 0; v < vocab; ++v) {
            p[v] = z[v] - mx;
        }
        detail::exp_inplace(p, vocab);
        for (std::int64_t v = 0; v < vocab; ++v) {
            denom += p[v];
        }
        const T inv = T(1) / denom;
        for (std::int64_t v = 0; v < vocab; ++v) {
            p[v] *= inv;
        }
        total += std::log(denom) + mx - z[targets[static_cast<std::size_t>(r)]];
    }
    auto out = BasicTensor<T>::scalar(total / static_cast<T>(rows));
    if (tape.needs_grad({&logits})) {
        Storage<T> ls = logits.storage(), os = out.storage();
        std::vector<int> tgt(targets.begin(), targets.end());
        tape.record(out, [ls, os, rows, vocab, probs = std::move(probs), tgt = std::move(tgt)] {
            if (os->grad.empty()) {
                return;
            }
            const T g = os->grad[0] / static_cast<T>(rows);
            const bool fresh = claim_grad(*ls);
            T* d = ls->grad.data();
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* p = probs.data() + r * vocab;
                T* dr = d + r * vocab;
                for (std::int64_t v = 0; v < vocab; ++v) {
                    dr[v] = fresh ? g * p[v] : dr[v] + g * p[v];
                }
                dr[tgt[static_cast<std::size_t>(r)]] -= g;
            }
        });
    }
    return out;
}

template <typename T>
BasicTensor<T> sum(Tape& tape, const BasicTensor<T>& x) {
    T total = 0;
    for (T v : x.data()) {
        total += v;
    }
    auto out = BasicTensor<T>::scalar(total);
    if (tape.needs_grad({&x})) {
        Storage<T> xs = x.storage(), os = out.storage();
        tape.record(out, [xs, os] {
            if (os->grad.empty()) {
                return;
            }
            T* d = grad_of(*xs);
            for (std::size_t i = 0; i < xs->data.size(); ++i) {
                d[i] += os->grad[0];
            }
        });
    }
    return out;
}

template <typename T>
BasicTensor<T> mean(Tape& tape, const BasicTensor<T>& x) {
    return scale(tape, sum(tape, x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
BasicTensor<T> dot_const(Tape& tape, const BasicTensor<T>& x, std::span<const T> weights) {
    require(static_cast<std::int64_t>(weights.size()) == x.numel(),
            "dot_const: " + std::to_string(weights.size()) + " weights for " + shape_string(x.shape()));
    T total = 0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        total += x.data()[i] * weights[i];
    }
    auto out = BasicTensor<T>::scalar(total);
    if (tape.needs_grad({&x})) {
        Storage<T> xs = x.storage(), os = out.storage();
        std::vector<T> w(weights.begin(), weights.end());
        tape.record(out, [xs, os, w = std::move(w)] {
            if (os->grad.empty()) {
                return;
            }
            T* d = grad_of(*xs);
            for (std::size_t i = 0; i < w.size(); ++i) {
                d[i] += os->grad[0] * w[i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------- transformer pieces

template <typename T>
BasicTensor<T> embed(Tape& tape, const BasicTensor<T>& token_table, const BasicTensor<T>& pos_table,
                     std::span<const int> tokens, std::int64_t batch, std::int64_t seq) {
    const auto vocab = token_table.dim(0);
    const auto hidden = token_table.cols();
    require(pos_table.cols() == hidden, "embed: token and position tables disagree on width");
    require(static_cast<std::int64_t>(tokens.size()) == batch * seq, "embed: token count != batch*seq");
    if (seq > pos_table.dim(0)) {
        throw ShapeError("embed: sequence length " + std::to_string(seq) + " exceeds " +
                         std::to_string(pos_table.dim(0)) + " positions");
    }
    for (int t : tokens) {
        if (t < 0 || t >= vocab) {
            throw RangeError("token id " + std::to_string(t) + " outside [0, " + std::to_string(vocab) + ")");
        }
    }
    auto out = BasicTensor<T>::uninitialized({batch, seq, hidden});
    for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t s = 0; s < seq; ++s) {
            const T* te = token_table.ptr() + tokens[static_cast<std::size_t>(b * seq + s)] * hidden;
            const T* pe = pos_table.ptr() + s * hidden;
            T* o = out.ptr() + (b * seq + s) * hidden;
            for (std::int64_t c = 0; c < hidden; ++c) {
                o[c] = te[c] + pe[c];
            }
        }
    }
    if (tape.needs_grad({&token_table, &pos_table})) {
        Storage<T> ts = token_table.storage(), ps = pos_table.storage(), os = out.storage();
        std::vector<int> tok(tokens.begin(), tokens.end());
        tape.record(out, [ts, ps, os, batch, seq, hidden, tok = std::move(tok)] {
            if (os->grad.empty()) {
                return;
            }
            T* dt = wants(ts) ? grad_of(*ts) : nullptr;
            T* dp = wants(ps) ? grad_of(*ps) : nullptr;
            for (std::int64_t b = 0; b < batch; ++b) {
                for (std::int64_t s = 0; s < seq; ++s) {
                    const T* g = os->grad.data() + (b * seq + s) * hidden;
                    if (dt) {
                        T* d = dt + tok[static_cast<std::size_t>(b * seq + s)] * hidden;
                        for (std::int64_t c = 0; c < hidden; ++c) {
                            d[c] += g[c];
                        }
                    }
                    if (dp) {
                        T* d = dp + s * hidden;
                        for (std::int64_t c = 0; c < hidden; ++c) {
                            d[c] += g[c];
                        }
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
BasicTensor<T> causal_attention(Tape& tape, const BasicTensor<T>& qkv, int heads) {
    require(qkv.ndim() == 3, "causal_attention: expected [batch, seq, 3H], got " + shape_string(qkv.shape()));
    const auto batch = qkv.dim(0);
    const auto seq = qkv.dim(1);
    const auto width = qkv.dim(2);
    require(width % 3 == 0, "causal_attention: last dimension must be 3H");
    const auto hidden = width / 3;
    require(heads >= 1 && hidden % heads == 0, "causal_attention: hidden size not divisible by heads");
    const auto hd = hidden / heads;
    const T scale_factor = T(1) / std::sqrt(static_cast<T>(hd));

    auto out = BasicTensor<T>::uninitialized({batch, seq, hidden});
    // attention probabilities per (batch, head), kept for backward
    std::vector<T> probs(static_cast<std::size_t>(batch * heads * seq * seq));
    std::vector<T> q(static_cast<std::size_t>(seq * hd)), k(q.size()), v(q.size()), o(q.size());

    auto load_head = [&](const T* src, std::int64_t b, std::int64_t part, std::int64_t h, T* dst) {
        for (std::int64_t s = 0; s < seq; ++s) {
            std::copy_n(src + (b * seq + s) * width + part * hidden + h * hd, hd, dst + s * hd);
        }
    };

    for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t h = 0; h < heads; ++h) {
            load_head(qkv.ptr(), b, 0, h, q.data());
            load_head(qkv.ptr(), b, 1, h, k.data());
            load_head(qkv.ptr(), b, 2, h, v.data());
            T* p = probs.data() + (b * heads + h) * seq * seq;
            gemm<T>(Trans::no, Trans::yes, seq, seq, hd, q.data(), k.data(), p, false, Band::full, true);
            for (std::int64_t i = 0; i < seq; ++i) {
                T* row = p + i * seq;
                for (std::int64_t j = 0; j <= i; ++j) {
                    row[j] *= scale_factor;
                }
                softmax_row(row, row, i + 1);
                std::fill(row + i + 1, row + seq, T(0));
            }
            gemm<T>(Trans::no, Trans::no, seq, hd, seq, p, v.data(), o.data(), false, Band::lower);
            for (std::int64_t s = 0; s < seq; ++s) {
                std::copy_n(o.data() + s * hd, hd, out.ptr() + (b * seq + s) * hidden + h * hd);
            }
        }
    }

    if (tape.needs_grad({&qkv})) {
        Storage<T> xs = qkv.storage(), os = out.storage();
        tape.record(out, [xs, os, batch, seq, width, hidden, heads, hd, scale_factor, probs = std::move(probs)] {
            if (os->grad.empty()) {
                return;
            }
            const bool fresh = claim_grad(*xs);
            T* dx = xs->grad.data();
            const T* x = xs->data.data();
            const auto n = static_cast<std::size_t>(seq * hd);
            std::vector<T> q(n), k(n), v(n), dout(n), dq(n), dk(n), dv(n);
            std::vector<T> dp(static_cast<std::size_t>(seq * seq));
            auto load_qkv = [&](std::int64_t b, std::int64_t part, std::int64_t h, T* dst) {
                for (std::int64_t s = 0; s < seq; ++s) {
                    std::copy_n(x + (b * seq + s) * width + part * hidden + h * hd, hd, dst + s * hd);
                }
            };
            for (std::int64_t b = 0; b < batch; ++b) {
                for (std::int64_t h = 0; h < heads; ++h) {
                    load_qkv(b, 0, h, q.data());
                    load_qkv(b, 1, h, k.data());
                    load_qkv(b, 2, h, v.data());
                    for (std::int64_t s = 0; s < seq; ++s) {
                        std::copy_n(os->grad.data() + (b * seq + s) * hidden + h * hd, hd, dout.data() + s * hd);
                    }
                    const T* p = probs.data() + (b * heads + h) * seq * seq;
                    // dV = P^T dO ; dP = dO V^T
                    gemm<T>(Trans::yes, Trans::no, seq, hd, seq, p, dout.data(), dv.data(), false, Band::upper);
                    gemm<T>(Trans::no, Trans::yes, seq, seq, hd, dout.data(), v.data(), dp.data(), false, Band::full,
                            true);
                    // dS = P * (dP - rowsum(dP * P)), scaled; masked entries have P = 0
                    for (std::int64_t i = 0; i < seq; ++i) {
                        const T* pr = p + i * seq;
                        T* dr = dp.data() + i * seq;
                        T dot = 0;
                        for (std::int64_t j = 0; j <= i; ++j) {
                            dot += dr[j] * pr[j];
                        }
                        for (std::int64_t j = 0; j <= i; ++j) {
                            dr[j] = pr[j] * (dr[j] - dot) * scale_factor;
                        }
                        std::fill(dr + i + 1, dr + seq, T(0));
                    }
                    // dQ = dS K ; dK = dS^T Q
                    gemm<T>(Trans::no, Trans::no, seq, hd, seq, dp.data(), k.data(), dq.data(), false, Band::lower);
                    gemm<T>(Trans::yes, Trans::no, seq, hd, seq, dp.data(), q.data(), dk.data(), false, Band::upper);
                    for (std::int64_t s = 0; s < seq; ++s) {
                        T* row = dx + (b * seq + s) * width + h * hd;
                        const T* parts[3] = {dq.data() + s * hd, dk.data() + s * hd, dv.data() + s * hd};
                        for (int part = 0; part < 3; ++part) {
                            T* d = row + part * hidden;
                            if (fresh) {
                                std::copy_n(parts[part], hd, d);
                                continue;
                            }
                            for (std::int64_t c = 0; c < hd; ++c) {
                                d[c] += parts[part][c];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------- mixture of experts

template <typename T>
BasicTensor<T> combine_experts(Tape& tape, const std::vector<BasicTensor<T>>& expert_outputs,
                               std::span<const ExpertSlot> slots, const BasicTensor<T>& weights) {
    const auto tokens = weights.rows();
    const auto k = weights.cols();
    require(static_cast<std::int64_t>(slots.size()) == tokens * k, "combine_experts: slot count != tokens*k");
    std::int64_t hidden = -1;
    for (const auto& y : expert_outputs) {
        if (y.defined()) {
            require(hidden < 0 || y.cols() == hidden, "combine_experts: expert outputs disagree on width");
            hidden = y.cols();
        }
    }
    require(hidden > 0, "combine_experts: no expert outputs");
    for (const auto& s : slots) {
        if (s.expert < 0 || s.expert >= static_cast<int>(expert_outputs.size()) ||
            !expert_outputs[static_cast<std::size_t>(s.expert)].defined() || s.row < 0 ||
            s.row >= expert_outputs[static_cast<std::size_t>(s.expert)].rows()) {
            throw RangeError("combine_experts: slot refers to a missing expert row");
        }
    }
    auto row_ptr = [&](const ExpertSlot& s) {
        return expert_outputs[static_cast<std::size_t>(s.expert)].ptr() + static_cast<std::int64_t>(s.row) * hidden;
    };
    auto out = BasicTensor<T>::uninitialized({tokens, hidden});
    for (std::int64_t t = 0; t < tokens; ++t) {
        const T* y0 = row_ptr(slots[static_cast<std::size_t>(t * k)]);
        T* o = out.ptr() + t * hidden;
        std::copy_n(y0, hidden, o);
        for (std::int64_t j = 1; j < k; ++j) {
            const T w = weights.ptr()[t * k + j];
            const T* yj = row_ptr(slots[static_cast<std::size_t>(t * k + j)]);
            for (std::int64_t c = 0; c < hidden; ++c) {
                o[c] += w * (yj[c] - y0[c]);
            }
        }
    }

    bool any = tape.needs_grad({&weights});
    for (const auto& y : expert_outputs) {
        any = any || (y.defined() && tape.needs_grad({&y}));
    }
    if (any) {
        std::vector<Storage<T>> ys;
        ys.reserve(expert_outputs.size());
        for (const auto& y : expert_outputs) {
            ys.push_back(y.defined() ? y.storage() : nullptr);
        }
        Storage<T> ws = weights.storage(), os = out.storage();
        std::vector<ExpertSlot> sl(slots.begin(), slots.end());
        tape.record(out, [ys = std::move(ys), ws, os, tokens, k, hidden, sl = std::move(sl)] {
            if (os->grad.empty()) {
                return;
            }
            auto data_of = [&](const ExpertSlot& s) {
                return ys[static_cast<std::size_t>(s.expert)]->data.data() + static_cast<std::int64_t>(s.row) * hidden;
            };
            T* dw = wants(ws) ? grad_of(*ws) : nullptr;
            for (std::int64_t t = 0; t < tokens; ++t) {
                const T* g = os->grad.data() + t * hidden;
                const ExpertSlot& s0 = sl[static_cast<std::size_t>(t * k)];
                const T* y0 = data_of(s0);
                T rest = 0;
                for (std::int64_t j = 1; j < k; ++j) {
                    const T w = ws->data[static_cast<std::size_t>(t * k + j)];
                    rest += w;
                    const ExpertSlot& sj = sl[static_cast<std::size_t>(t * k + j)];
                    const auto& yj = ys[static_cast<std::size_t>(sj.expert)];
                    if (dw) {
                        const T* yv = data_of(sj);
                        T acc = 0;
                        for (std::int64_t c = 0; c < hidden; ++c) {
                            acc += g[c] * (yv[c] - y0[c]);
                        }
                        dw[t * k + j] += acc;
                    }
                    if (yj->requires_grad) {
                        T* d = grad_of(*yj) + static_cast<std::int64_t>(sj.row) * hidden;
                        for (std::int64_t c = 0; c < hidden; ++c) {
                            d[c] += w * g[c];
                        }
                    }
                }
                const auto& y0s = ys[static_cast<std::size_t>(s0.expert)];
                if (y0s->requires_grad) {
                    T* d = grad_of(*y0s) + static_cast<std::int64_t>(s0.row) * hidden;
                    const T w0 = T(1) - rest;
                    for (std::int64_t c = 0; c < hidden; ++c) {
                        d[c] += w0 * g[c];
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
BasicTensor<T> expert_mean_probs(Tape& tape, const BasicTensor<T>& weights, std::span<const int> indices,
                                 int num_experts) {
    const auto tokens = weights.rows();
    const auto k = weights.cols();
    require(static_cast<std::int64_t>(indices.size()) == tokens * k, "expert_mean_probs: index count != tokens*k");
    for (int e : indices) {
        if (e < 0 || e >= num_experts) {
            throw RangeError("expert_mean_probs: expert " + std::to_string(e) + " outside [0, " +
                             std::to_string(num_experts) + ")");
        }
    }
    auto out = BasicTensor<T>::zeros({num_experts});
    const T inv = T(1) / static_cast<T>(tokens);
    for (std::int64_t i = 0; i < tokens * k; ++i) {
        out.ptr()[indices[static_cast<std::size_t>(i)]] += weights.ptr()[i];
    }
    for (int e = 0; e < num_experts; ++e) {
        out.ptr()[e] *= inv;
    }
    if (tape.needs_grad({&weights})) {
        Storage<T> ws = weights.storage(), os = out.storage();
        std::vector<int> idx(indices.begin(), indices.end());
        tape.record(out, [ws, os, inv, idx = std::move(idx)] {
            if (os->grad.empty()) {
                return;
            }
            T* d = grad_of(*ws);
            for (std::size_t i = 0; i < idx.size(); ++i) {
                d[i] += os->grad[static_cast<std::size_t>(idx[i])] * inv;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------- instantiation

#define SELFROUTE_INSTANTIATE_OPS(T)                                                                                  \
    template BasicTensor<T> matmul(Tape&, const BasicTensor<T>&, const BasicTensor<T>&);                             \
    template BasicTensor<T> matmul_nt(Tape&, const BasicTensor<T>&, const BasicTensor<T>&);                          \
    template BasicTensor<T> add(Tape&, const BasicTensor<T>&, const BasicTensor<T>&);                                \
    template BasicTensor<T> add_bias(Tape&, const BasicTensor<T>&, const BasicTensor<T>&);                           \
    template BasicTensor<T> scale(Tape&, const BasicTensor<T>&, T);                                                  \
    template BasicTensor<T> gelu(Tape&, const BasicTensor<T>&);                                                      \
    template BasicTensor<T> layer_norm(Tape&, const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&,   \
                                       T);                                                                           \
    template BasicTensor<T> softmax(Tape&, const BasicTensor<T>&);                                                   \
    template BasicTensor<T> slice_cols(Tape&, const BasicTensor<T>&, std::int64_t, std::int64_t);                    \
    template BasicTensor<T> slice_last(Tape&, const BasicTensor<T>&, std::int64_t);                                  \
    template std::vector<int> topk_indices(std::span<const T>, int);                                                 \
    template TopK<T> topk(Tape&, const BasicTensor<T>&, int);                                                        \
    template BasicTensor<T> gather_cols(Tape&, const BasicTensor<T>&, std::span<const int>, int);                    \
    template BasicTensor<T> gather_rows(Tape&, const BasicTensor<T>&, std::span<const int>);                         \
    template BasicTensor<T> cross_entropy(Tape&, const BasicTensor<T>&, std::span<const int>);                       \
    template BasicTensor<T> sum(Tape&, const BasicTensor<T>&);                                                       \
    template BasicTensor<T> mean(Tape&, const BasicTensor<T>&);                                                      \
    template BasicTensor<T> dot_const(Tape&, const BasicTensor<T>&, std::span<const T>);                             \
    template BasicTensor<T> embed(Tape&, const BasicTensor<T>&, const BasicTensor<T>&, std::span<const int>,         \
                                  std::int64_t, std::int64_t);                                                       \
    template BasicTensor<T> causal_attention(Tape&, const BasicTensor<T>&, int);                                     \
    template BasicTensor<T> reshape(Tape&, const BasicTensor<T>&, Shape);                                       \
    template BasicTensor<T> combine_experts(Tape&, const std::vector<BasicTensor<T>>&, std::span<const ExpertSlot>,  \
                                            const BasicTensor<T>&);                                                  \
    template BasicTensor<T> expert_mean_probs(Tape&, const BasicTensor<T>&, std::span<const int>, int);

SELFROUTE_INSTANTIATE_OPS(float)
SELFROUTE_INSTANTIATE_OPS(double)

#undef SELFROUTE_INSTANTIATE_OPS

} // namespace selfroute::ops
