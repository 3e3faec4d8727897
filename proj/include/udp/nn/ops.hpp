#pragma once

#include <span>
#include <vector>

#include "udp/nn/autograd.hpp"

// Differentiable tensor ops. Every tensor is a 2-D matrix; batches are rows.

namespace udp::nn {

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// a (n x c) + row (1 x c) broadcast over rows.
Var add_row(Var a, Var row);
/// a (n x c) * row (1 x c) elementwise, broadcast over rows.
Var mul_row(Var a, Var row);
/// a (n x c) * col (n x 1) elementwise, broadcast over columns.
Var mul_col(Var a, Var col);

Var silu(Var a);
Var tanh(Var a);
Var relu(Var a);
Var softplus(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
Var reciprocal(Var a);

Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
/// Gathers rows by index (indices may repeat).
Var gather_rows(Var a, std::span<const int> rows);
/// Each row repeated `times` consecutive times.
Var repeat_rows(Var a, int times);

Var sum(Var a);
Var mean(Var a);
/// n x 1 vector of row sums.
Var row_sums(Var a);

Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
Var l2_normalize_rows(Var a, double eps = 1e-12);
Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5);

/// n x 1 column holding a(i, index[i]).
Var pick(Var a, std::span<const int> index);
/// Mean over rows of -log_softmax(logits)[label].
Var cross_entropy(Var logits, std::span<const int> labels);

/// Squared Euclidean distances between rows of a (n x d) and b (m x d).
Var pairwise_sq_dist(Var a, Var b);
/// out(b, k) = <q.row(b), keys.row(b * groups + k)>.
Var grouped_dot(Var q, Var keys, int groups);
/// Scaled dot-product self attention over consecutive blocks of `seq_len`
/// rows, split into `heads` column groups. q, k, v share shape (B*L x d).
Var multi_head_attention(Var q, Var k, Var v, int seq_len, int heads);

}  // namespace udp::nn
