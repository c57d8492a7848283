// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include "selfroute/grad_check.hpp"
#include "selfroute/kernels.hpp"
#include "selfroute/ops.hpp"
#include "selfroute/rng.hpp"

#include <cmath>
#include <cstring>
#include <numeric>

using namespace selfroute;

namespace {

template <typename T>
BasicTensor<T> random_tensor(Shape shape, Rng& rng, bool requires_grad = true, double stddev = 1.0) {
    std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) {
        x = static_cast<T>(rng.normal() * stddev);
    }
    return BasicTensor<T>::from(std::move(shape), std::move(v), requires_grad);
}

std::vector<double> random_weights(std::size_t n, Rng& rng) {
    std::vector<double> w(n);
    for (auto& x : w) {
        x = rng.normal();
    }
    return w;
}

// Scalar probe: Σ op(x) ⊙ R with fixed random R, so every output coordinate matters.
using Op = std::function<BasicTensor<double>(Tape&)>;

double probe_error(const Op& op, const BasicTensor<double>& x, Rng& rng, double eps = 1e-3) {
    Tape sizing(false);
    const auto n = static_cast<std::size_t>(op(sizing).numel());
    const auto w = random_weights(n, rng);
    ScalarFn<double> f = [&](Tape& t) { return ops::dot_const(t, op(t), std::span<const double>(w)); };
    return grad_check(f, x, eps);
}

// Reference product for the kernel: plain triple loop in double.
std::vector<double> naive_product(kernels::Trans ta, kernels::Trans tb, int m, int n, int k, const std::vector<float>& a,
                                  const std::vector<float>& b) {
    std::vector<double> c(static_cast<std::size_t>(m * n), 0.0);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            double acc = 0;
            for (int d = 0; d < k; ++d) {
                const double av = ta == kernels::Trans::no ? a[i * k + d] : a[d * m + i];
                const double bv = tb == kernels::Trans::no ? b[d * n + j] : b[j * k + d];
                acc += av * bv;
            }
            c[i * n + j] = acc;
        }
    }
    return c;
}

} // namespace

TEST_SUITE("kernels") {
    TEST_CASE("gemm matches a naive product for every transpose combination") {
        Rng rng(3);
        for (auto [m, n, k] : {std::tuple{1, 1, 1}, {5, 7, 3}, {13, 70, 300}, {6, 64, 16}, {37, 129, 65}}) {
            for (auto ta : {kernels::Trans::no, kernels::Trans::yes}) {
                for (auto tb : {kernels::Trans::no, kernels::Trans::yes}) {
                    std::vector<float> a(static_cast<std::size_t>(m * k)), b(static_cast<std::size_t>(k * n));
                    for (auto& x : a) x = static_cast<float>(rng.normal());
                    for (auto& x : b) x = static_cast<float>(rng.normal());
                    std::vector<float> c(static_cast<std::size_t>(m * n), 1.0f);
                    kernels::gemm<float>(ta, tb, m, n, k, a.data(), b.data(), c.data(), false);
                    const auto ref = naive_product(ta, tb, m, n, k, a, b);
                    for (std::size_t i = 0; i < c.size(); ++i) {
                        CHECK(c[i] == doctest::Approx(ref[i]).epsilon(1e-4).scale(std::sqrt(double(k))));
                    }
                    std::vector<float> acc(c.size(), 2.0f);
                    kernels::gemm<float>(ta, tb, m, n, k, a.data(), b.data(), acc.data(), true);
                    for (std::size_t i = 0; i < c.size(); ++i) {
                        CHECK(acc[i] == doctest::Approx(ref[i] + 2.0).epsilon(1e-4).scale(std::sqrt(double(k))));
                    }
                }
            }
        }
    }

    TEST_CASE("a row of the product does not depend on which other rows are present") {
        Rng rng(11);
        const int k = 300;
        const int n = 83;
        const int m = 29;
        std::vector<float> a(static_cast<std::size_t>(m * k)), b(static_cast<std::size_t>(k * n));
        for (auto& x : a) x = static_cast<float>(rng.normal());
        for (auto& x : b) x = static_cast<float>(rng.normal());
        std::vector<float> full(static_cast<std::size_t>(m * n));
        kernels::gemm<float>(kernels::Trans::no, kernels::Trans::no, m, n, k, a.data(), b.data(), full.data(), false);
        for (int start : {0, 5, 17}) {
            for (int rows : {1, 2, 7, 12}) {
                if (start + rows > m) continue;
                std::vector<float> part(static_cast<std::size_t>(rows * n));
                kernels::gemm<float>(kernels::Trans::no, kernels::Trans::no, rows, n, k, a.data() + start * k, b.data(),
                                     part.data(), false);
                CHECK(std::memcmp(part.data(), full.data() + start * n, part.size() * sizeof(float)) == 0);
            }
        }
    }
}

TEST_SUITE("matmul") {
    TEST_CASE("identity and hand-checked products") {
        Tape tape(false);
        auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
        auto m = Tensor::from({2, 2}, {3, 4, 5, 6});
        auto p = ops::matmul(tape, eye, m);
        CHECK(std::vector<float>(p.data().begin(), p.data().end()) == std::vector<float>{3, 4, 5, 6});

        auto row = Tensor::from({1, 2}, {1, 2});
        auto col = Tensor::from({2, 1}, {3, 4});
        CHECK(ops::matmul(tape, row, col).item() == 11.0f);
    }

    TEST_CASE("leading dimensions are carried through") {
        Tape tape(false);
        auto a = Tensor::zeros({2, 3, 4});
        auto b = Tensor::zeros({4, 5});
        CHECK(ops::matmul(tape, a, b).shape() == Shape{2, 3, 5});
    }

    TEST_CASE("shape mismatch names both shapes") {
        Tape tape(false);
        auto a = Tensor::zeros({2, 3});
        auto b = Tensor::zeros({4, 5});
        CHECK_THROWS_WITH_AS(ops::matmul(tape, a, b), doctest::Contains("[2,3] x [4,5]"), ShapeError);
    }

    TEST_CASE("random 4x3 by 3x2 gradients agree with central differences") {
        Rng rng(7);
        auto a = random_tensor<double>({4, 3}, rng);
        auto b = random_tensor<double>({3, 2}, rng);
        const Op op = [&](Tape& t) { return ops::matmul(t, a, b); };
        CHECK(probe_error(op, a, rng) < 1e-3);
        CHECK(probe_error(op, b, rng) < 1e-3);
    }
}

TEST_SUITE("softmax") {
    TEST_CASE("worked values") {
        Tape tape(false);
        auto even = ops::softmax(tape, Tensor::from({2}, {0, 0}));
        CHECK(even.data()[0] == doctest::Approx(0.5));
        CHECK(even.data()[1] == doctest::Approx(0.5));

        auto p = ops::softmax(tape, Tensor::from({2}, {3, 2}));
        // 1 / (1 + e^-1)
        CHECK(p.data()[0] == doctest::Approx(0.7311).epsilon(1e-4));
        CHECK(p.data()[1] == doctest::Approx(0.2689).epsilon(1e-4));

        auto big = ops::softmax(tape, Tensor::from({2}, {1000, 0}));
        CHECK(big.data()[0] == 1.0f);
        CHECK(big.data()[1] == 0.0f);
    }

    TEST_CASE("rows are positive and sum to one") {
        Rng rng(5);
        Tape tape(false);
        for (int trial = 0; trial < 20; ++trial) {
            auto x = random_tensor<float>({6, 9}, rng, false, 5.0);
            auto y = ops::softmax(tape, x);
            for (int r = 0; r < 6; ++r) {
                double total = 0;
                for (int c = 0; c < 9; ++c) {
                    const float v = y.data()[static_cast<std::size_t>(r * 9 + c)];
                    CHECK(v > 0.0f);
                    total += v;
                }
                CHECK(std::abs(total - 1.0) <= 1e-6);
            }
        }
    }
}

TEST_SUITE("slice_last") {
    TEST_CASE("selects the trailing coordinates") {
        Tape tape(false);
        auto x = Tensor::from({8}, {1, 2, 3, 4, 5, 6, 7, 8});
        auto y = ops::slice_last(tape, x, 4);
        CHECK(std::vector<float>(y.data().begin(), y.data().end()) == std::vector<float>{5, 6, 7, 8});
        auto all = ops::slice_last(tape, x, 8);
        CHECK(std::vector<float>(all.data().begin(), all.data().end()) ==
              std::vector<float>(x.data().begin(), x.data().end()));
        CHECK_THROWS_AS(ops::slice_last(tape, x, 9), ShapeError);
        CHECK_THROWS_AS(ops::slice_last(tape, x, 0), ShapeError);
    }

    TEST_CASE("gradient lands only in the sliced coordinates") {
        Tape tape;
        auto x = Tensor::from({6}, {1, 2, 3, 4, 5, 6}, true);
        auto loss = ops::sum(tape, ops::slice_last(tape, x, 2));
        tape.backward(loss);
        CHECK(std::vector<float>(x.grad().begin(), x.grad().end()) == std::vector<float>{0, 0, 0, 0, 1, 1});
    }

    TEST_CASE("arbitrary window gradient is exactly zero outside the window") {
        Rng rng(2);
        auto x = random_tensor<float>({5, 12}, rng);
        Tape tape;
        auto w = random_weights(5 * 4, rng);
        std::vector<float> wf(w.begin(), w.end());
        auto loss = ops::dot_const(tape, ops::slice_cols(tape, x, 3, 4), std::span<const float>(wf));
        tape.backward(loss);
        for (int r = 0; r < 5; ++r) {
            for (int c = 0; c < 12; ++c) {
                const float g = x.grad()[static_cast<std::size_t>(r * 12 + c)];
                if (c < 3 || c >= 7) {
                    CHECK(g == 0.0f);
                } else {
                    CHECK(g == wf[static_cast<std::size_t>(r * 4 + c - 3)]);
                }
            }
        }
    }
}

TEST_SUITE("topk") {
    TEST_CASE("worked selections") {
        Tape tape(false);
        auto r = ops::topk(tape, Tensor::from({4}, {1.0f, 3.0f, 2.0f, 0.5f}), 2);
        CHECK(r.indices == std::vector<int>{1, 2});
        CHECK(r.values.data()[0] == 3.0f);
        CHECK(r.values.data()[1] == 2.0f);

        CHECK(ops::topk_indices<float>(std::vector<float>{5, 5, 5}, 2) == std::vector<int>{0, 1});
        CHECK(ops::topk_indices<float>(std::vector<float>{0.1f, 0.4f, -2.0f, 0.3f}, 4) == std::vector<int>{1, 3, 0, 2});
        CHECK_THROWS_AS(ops::topk_indices<float>(std::vector<float>{1, 2}, 3), ShapeError);
        CHECK_THROWS_AS(ops::topk_indices<float>(std::vector<float>{1, 2}, 0), ShapeError);
    }

    TEST_CASE("selection is deterministic under ties") {
        Rng rng(9);
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<float> v(8);
            for (auto& x : v) x = static_cast<float>(rng.below(3));
            const auto first = ops::topk_indices<float>(v, 3);
            CHECK(first == ops::topk_indices<float>(v, 3));
            // brute force: lexicographic (value desc, index asc)
            std::vector<int> order(8);
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return v[a] > v[b]; });
            CHECK(first == std::vector<int>(order.begin(), order.begin() + 3));
        }
    }
}

TEST_SUITE("layer_norm") {
    TEST_CASE("worked values") {
        Tape tape(false);
        auto ones = Tensor::full({4}, 1.0f);
        auto zeros = Tensor::zeros({4});
        auto y = ops::layer_norm(tape, Tensor::full({4}, 3.0f), ones, zeros);
        for (float v : y.data()) CHECK(v == 0.0f);

        auto g2 = Tensor::full({2}, 1.0f);
        auto b2 = Tensor::zeros({2});
        auto z = ops::layer_norm(tape, Tensor::from({2}, {1, -1}), g2, b2);
        CHECK(z.data()[0] == doctest::Approx(1.0).epsilon(1e-3));
        CHECK(z.data()[1] == doctest::Approx(-1.0).epsilon(1e-3));
    }

    TEST_CASE("gradient on a random 4x8 input") {
        Rng rng(4);
        auto x = random_tensor<double>({4, 8}, rng);
        auto gamma = random_tensor<double>({8}, rng);
        auto beta = random_tensor<double>({8}, rng);
        const Op op = [&](Tape& t) { return ops::layer_norm(t, x, gamma, beta); };
        CHECK(probe_error(op, x, rng) < 1e-3);
        CHECK(probe_error(op, gamma, rng) < 1e-3);
        CHECK(probe_error(op, beta, rng) < 1e-3);
    }
}

TEST_SUITE("cross_entropy") {
    TEST_CASE("uniform and dominant logits") {
        Tape tape(false);
        const std::vector<int> t0{0};
        auto uniform = ops::cross_entropy(tape, Tensor::zeros({1, 4}), t0);
        CHECK(uniform.item() == doctest::Approx(std::log(4.0)).epsilon(1e-6));

        const std::vector<int> t2{2};
        auto peaked = ops::cross_entropy(tape, Tensor::from({1, 4}, {0, 0, 20, 0}), t2);
        CHECK(peaked.item() == doctest::Approx(0.0).epsilon(1e-6).scale(1.0));
        CHECK(peaked.item() < 1e-7f);
    }

    TEST_CASE("random 3x5 batch matches a per-row exp-normalize") {
        Rng rng(12);
        auto logits = random_tensor<float>({3, 5}, rng, false, 2.0);
        const std::vector<int> targets{4, 0, 2};
        Tape tape(false);
        const double loss = ops::cross_entropy(tape, logits, targets).item();
        double expected = 0;
        for (int r = 0; r < 3; ++r) {
            double denom = 0;
            for (int c = 0; c < 5; ++c) denom += std::exp(double(logits.data()[r * 5 + c]));
            expected += -std::log(std::exp(double(logits.data()[r * 5 + targets[r]])) / denom);
        }
        CHECK(loss == doctest::Approx(expected / 3).epsilon(1e-5));
    }

    TEST_CASE("target out of range") {
        Tape tape(false);
        const std::vector<int> bad{4};
        CHECK_THROWS_AS(ops::cross_entropy(tape, Tensor::zeros({1, 4}), bad), RangeError);
    }
}

TEST_SUITE("backward") {
    TEST_CASE("sum gives ones and repeated sweeps accumulate") {
        Tape tape;
        auto x = Tensor::from({3}, {1, 2, 3}, true);
        auto loss = ops::sum(tape, x);
        tape.backward(loss);
        CHECK(std::vector<float>(x.grad().begin(), x.grad().end()) == std::vector<float>{1, 1, 1});
        tape.backward(loss);
        CHECK(std::vector<float>(x.grad().begin(), x.grad().end()) == std::vector<float>{2, 2, 2});
        x.zero_grad();
        CHECK(std::vector<float>(x.grad().begin(), x.grad().end()) == std::vector<float>{0, 0, 0});
    }

    TEST_CASE("sum of x W with fixed W") {
        // d/dx_ik Σ_ij (xW)_ij = Σ_j W_kj: row sums of W, i.e. [1+2, 3+4]
        Tape tape;
        auto x = Tensor::from({2, 2}, {0.5f, -1, 2, 3}, true);
        auto w = Tensor::from({2, 2}, {1, 2, 3, 4});
        auto loss = ops::sum(tape, ops::matmul(tape, x, w));
        tape.backward(loss);
        CHECK(std::vector<float>(x.grad().begin(), x.grad().end()) == std::vector<float>{3, 7, 3, 7});
        CHECK_FALSE(w.has_grad());
    }

    TEST_CASE("disconnected tensors keep a zero gradient") {
        Tape tape;
        auto x = Tensor::from({2}, {1, 2}, true);
        auto other = Tensor::from({2}, {5, 6}, true);
        auto loss = ops::sum(tape, x);
        tape.backward(loss);
        for (float g : other.grad()) CHECK(g == 0.0f);
    }

    TEST_CASE("non-scalar loss is rejected") {
        Tape tape;
        auto x = Tensor::from({2}, {1, 2}, true);
        auto y = ops::scale(tape, x, 2.0f);
        CHECK_THROWS_AS(tape.backward(y), ContractError);
    }

    TEST_CASE("a no-grad tape records nothing") {
        Tape tape(false);
        auto x = Tensor::from({2}, {1, 2}, true);
        auto y = ops::sum(tape, x);
        CHECK(tape.size() == 0);
        CHECK_FALSE(y.requires_grad());
    }

    TEST_CASE("replaying the same computation gives bit-identical gradients") {
        auto run = [] {
            Rng rng(21);
            auto qkv = random_tensor<float>({2, 5, 24}, rng);
            auto w = random_tensor<float>({8, 3}, rng);
            Tape tape;
            auto att = ops::causal_attention(tape, qkv, 2);
            auto loss = ops::sum(tape, ops::gelu(tape, ops::matmul(tape, att, w)));
            tape.backward(loss);
            return std::vector<float>(qkv.grad().begin(), qkv.grad().end());
        };
        const auto a = run();
        const auto b = run();
        CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
    }
}

TEST_SUITE("grad_check") {
    TEST_CASE("sum of squares") {
        Rng rng(1);
        // Σ x_i^2 = x x^T with x viewed as a 1x10 row
        auto row = random_tensor<double>({1, 10}, rng);
        ScalarFn<double> sumsq = [&](Tape& t) { return ops::matmul_nt(t, row, row); };
        CHECK(grad_check(sumsq, row, 1e-3) < 1e-4);
    }

    TEST_CASE("constant function") {
        auto x = BasicTensor<double>::from({3}, {1, 2, 3});
        auto c = BasicTensor<double>::scalar(4.0);
        ScalarFn<double> f = [&](Tape&) { return c; };
        CHECK(grad_check(f, x, 1e-3) == 0.0);
    }

    TEST_CASE("eps outside the supported range") {
        auto x = BasicTensor<double>::from({1}, {1});
        ScalarFn<double> f = [&](Tape& t) { return ops::sum(t, x); };
        CHECK_THROWS_AS(grad_check(f, x, 1.0), ContractError);
    }
}

TEST_CASE("every primitive passes a finite-difference check on ten seeds") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        CAPTURE(seed);
        Rng rng(100 + seed);
        const double eps = 1e-3;
        auto a = random_tensor<double>({3, 4}, rng);
        auto b = random_tensor<double>({4, 5}, rng);
        auto bt = random_tensor<double>({5, 4}, rng);
        auto c = random_tensor<double>({3, 4}, rng);
        auto bias = random_tensor<double>({4}, rng);
        auto gamma = random_tensor<double>({4}, rng);
        auto beta = random_tensor<double>({4}, rng);

        CHECK(probe_error([&](Tape& t) { return ops::matmul(t, a, b); }, a, rng, eps) < 1e-3);
        CHECK(probe_error([&](Tape& t) { return ops::matmul_nt(t, a, bt); }, bt, rng, eps) < 1e-3);
        CHECK(probe_error([&](Tape& t) { return ops::add(t, a, c); }, c, rng, eps) < 1e-3);
        CHECK(probe_error([&](Tape& t) { return ops::add_bias(t, a, bias); }, bias, rng, eps) < 1e-3);
        CHECK(probe_error([&](Tape& t) { return ops::scale(t, a, 0.7); }, a, rng, eps) < 1e-3);
        CHECK(probe_error([&](Tape& t) { return ops::gelu(t, a); }, a, rng, eps) < 1e-3);
        CHECK(probe_error([&](Tape& t) { return ops::layer_norm(t, a, gamma, beta); }, a, rng, eps) < 1e-3);
        CHECK(probe_error([&](Tape& t) { return ops::softmax(t, a); }, a, rng, eps) < 1e-3);
        CHECK(probe_error([&](Tape& t) { return ops::slice_cols(t, a, 1, 2); }, a, rng, eps) < 1e-3);
        CHECK(probe_error([&](Tape& t) { return ops::slice_last(t, a, 3); }, a, rng, eps) < 1e-3);
        CHECK(probe_error([&](Tape& t) { return ops::topk(t, a, 2).values; }, a, rng, eps) < 1e-3);
        const std::vector<int> rows{2, 0, 2};
        CHECK(probe_error([&](Tape& t) { return ops::gather_rows(t, a, rows); }, a, rng, eps) < 1e-3);
        const std::vector<int> targets{1, 3, 0};
        CHECK(probe_error([&](Tape& t) { return ops::cross_entropy(t, a, targets); }, a, rng, eps) < 1e-3);
        CHECK(probe_error([&](Tape& t) { return ops::sum(t, a); }, a, rng, eps) < 1e-3);

        auto tok = random_tensor<double>({6, 4}, rng);
        auto pos = random_tensor<double>({3, 4}, rng);
        const std::vector<int> ids{5, 1, 1, 0, 2, 5};
        CHECK(probe_error([&](Tape& t) { return ops::embed(t, tok, pos, ids, 2, 3); }, tok, rng, eps) < 1e-3);
        CHECK(probe_error([&](Tape& t) { return ops::embed(t, tok, pos, ids, 2, 3); }, pos, rng, eps) < 1e-3);

        auto qkv = random_tensor<double>({2, 4, 12}, rng);
        CHECK(probe_error([&](Tape& t) { return ops::causal_attention(t, qkv, 2); }, qkv, rng, eps) < 1e-3);

        // two experts, three tokens, k = 2
        auto y0 = random_tensor<double>({3, 4}, rng);
        auto y1 = random_tensor<double>({3, 4}, rng);
        auto logits = random_tensor<double>({3, 2}, rng);
        const std::vector<ops::ExpertSlot> slots{{0, 0}, {1, 0}, {1, 1}, {0, 1}, {0, 2}, {1, 2}};
        auto combined = [&](Tape& t) {
            return ops::combine_experts(t, std::vector<BasicTensor<double>>{y0, y1}, slots, ops::softmax(t, logits));
        };
        CHECK(probe_error(combined, y0, rng, eps) < 1e-3);
        CHECK(probe_error(combined, y1, rng, eps) < 1e-3);
        CHECK(probe_error(combined, logits, rng, eps) < 1e-3);

        const std::vector<int> chosen{0, 1, 1, 0, 0, 1};
        CHECK(probe_error([&](Tape& t) { return ops::expert_mean_probs(t, ops::softmax(t, logits), chosen, 3); },
                          logits, rng, eps) < 1e-3);
    }
}

TEST_CASE("combine_experts returns the shared output when all selected experts agree") {
    Rng rng(31);
    auto y = random_tensor<float>({4, 6}, rng, false);
    Tape tape(false);
    for (int trial = 0; trial < 10; ++trial) {
        auto logits = random_tensor<float>({4, 3}, rng, false);
        auto w = ops::softmax(tape, logits);
        std::vector<ops::ExpertSlot> slots;
        for (int t = 0; t < 4; ++t) {
            for (int e = 0; e < 3; ++e) slots.push_back({e, t});
        }
        auto out = ops::combine_experts(tape, std::vector<Tensor>{y, y.detach(), y.detach()}, slots, w);
        CHECK(std::memcmp(out.ptr(), y.ptr(), sizeof(float) * 24) == 0);
    }
}
