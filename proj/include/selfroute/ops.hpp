// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "selfroute/tape.hpp"
#include "selfroute/tensor.hpp"

#include <span>
#include <vector>

/// Differentiable primitives.
///
/// Every op treats its tensor arguments as a 2-D matrix of rows x last-dim;
/// leading dimensions are carried through to the output unchanged. An op
/// records a backward rule on `tape` only when the tape is recording and
/// some input requires grad.
namespace selfroute::ops {

/// a[..,K] @ b[K,P] -> [..,P]
template <typename T>
BasicTensor<T> matmul(Tape& tape, const BasicTensor<T>& a, const BasicTensor<T>& b);

/// a[..,K] @ b[P,K]^T -> [..,P]  (tied output embedding)
template <typename T>
BasicTensor<T> matmul_nt(Tape& tape, const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> add(Tape& tape, const BasicTensor<T>& a, const BasicTensor<T>& b);

/// Same values under a new shape with equal element count.
template <typename T>
BasicTensor<T> reshape(Tape& tape, const BasicTensor<T>& x, Shape shape);

/// x[..,D] + bias[D], broadcast over rows.
template <typename T>
BasicTensor<T> add_bias(Tape& tape, const BasicTensor<T>& x, const BasicTensor<T>& bias);

template <typename T>
BasicTensor<T> scale(Tape& tape, const BasicTensor<T>& x, T factor);

/// tanh-approximated GELU.
template <typename T>
BasicTensor<T> gelu(Tape& tape, const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> layer_norm(Tape& tape, const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                          const BasicTensor<T>& beta, T eps = T(1e-5));

/// Softmax over the last axis, max-subtracted.
template <typename T>
BasicTensor<T> softmax(Tape& tape, const BasicTensor<T>& x);

/// Columns [offset, offset+n) of every row.
template <typename T>
BasicTensor<T> slice_cols(Tape& tape, const BasicTensor<T>& x, std::int64_t offset, std::int64_t n);

/// The last n columns of every row.
template <typename T>
BasicTensor<T> slice_last(Tape& tape, const BasicTensor<T>& x, std::int64_t n);

/// Indices of the k largest values, in descending value order; ties go to
/// the lower index.
template <typename T>
std::vector<int> topk_indices(std::span<const T> values, int k);

template <typename T>
struct TopK {
    std::vector<int> indices; ///< rows * k, row-major
    BasicTensor<T> values;    ///< [..,k]
};

/// Row-wise top-k. Selection carries no gradient; values are a gather.
template <typename T>
TopK<T> topk(Tape& tape, const BasicTensor<T>& x, int k);

/// out[r, j] = x[r, indices[r*k + j]]
template <typename T>
BasicTensor<T> gather_cols(Tape& tape, const BasicTensor<T>& x, std::span<const int> indices, int k);

/// out[i, :] = x[rows[i], :]
template <typename T>
BasicTensor<T> gather_rows(Tape& tape, const BasicTensor<T>& x, std::span<const int> rows);

/// Mean negative log-likelihood of `targets` under softmax(logits) per row.
template <typename T>
BasicTensor<T> cross_entropy(Tape& tape, const BasicTensor<T>& logits, std::span<const int> targets);

template <typename T>
BasicTensor<T> sum(Tape& tape, const BasicTensor<T>& x);

template <typename T>
BasicTensor<T> mean(Tape& tape, const BasicTensor<T>& x);

/// Σ x[i] * weights[i] against constant weights -> scalar.
template <typename T>
BasicTensor<T> dot_const(Tape& tape, const BasicTensor<T>& x, std::span<const T> weights);

/// token_table[tokens] + pos_table[position] -> [batch, seq, H]
template <typename T>
BasicTensor<T> embed(Tape& tape, const BasicTensor<T>& token_table, const BasicTensor<T>& pos_table,
                     std::span<const int> tokens, std::int64_t batch, std::int64_t seq);

/// Multi-head causal self-attention over packed projections.
/// qkv is [batch, seq, 3H] holding Q | K | V; returns [batch, seq, H].
template <typename T>
BasicTensor<T> causal_attention(Tape& tape, const BasicTensor<T>& qkv, int heads);

/// Where one routed (token, slot) pair lives: row `row` of expert `expert`'s output.
struct ExpertSlot {
    int expert = 0;
    int row = 0;
};

/// Weighted sum of the selected experts' outputs per token.
///
/// `slots` has tokens*k entries; weights is [tokens, k] and each row sums to
/// one. The sum is formed relative to slot 0 as
///     y0 + Σ_{j>=1} w_j (y_j - y0),
/// which equals Σ_j w_j y_j whenever the weights sum to one and returns y0
/// exactly when all selected outputs coincide.
template <typename T>
BasicTensor<T> combine_experts(Tape& tape, const std::vector<BasicTensor<T>>& expert_outputs,
                               std::span<const ExpertSlot> slots, const BasicTensor<T>& weights);

/// Mean over tokens of each token's full-length routing distribution
/// (selected experts carry their weight, the rest zero) -> [num_experts].
template <typename T>
BasicTensor<T> expert_mean_probs(Tape& tape, const BasicTensor<T>& weights, std::span<const int> indices,
                                 int num_experts);

} // namespace selfroute::ops
