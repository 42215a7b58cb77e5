// Copyright 2026 xsa contributors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0

#pragma once

#include <functional>
#include <vector>

#include "xsa/common.hpp"

namespace xsa::ag {

/// Values on the tape are batches of equally-shaped dense matrices.
/// A scalar is batch size 1 with a 1x1 matrix; a plain matrix (parameters,
/// feature tables, logits) is batch size 1.
using Batch = std::vector<Matrix>;

class Tape;

/// Lightweight handle to a tape node.
struct Var {
  Tape* tape = nullptr;
  int idx = -1;
  bool valid() const { return tape != nullptr && idx >= 0; }
};

struct Node {
  Batch value;
  Batch grad;  // allocated lazily on first accumulation
  std::function<void(Tape&)> backward;
  bool requires_grad = false;
};

/// Define-by-run reverse-mode tape. Build a fresh tape per training step or
/// per forward evaluation; nodes only reference earlier nodes, so reverse
/// creation order is a valid topological order for backprop.
class Tape {
 public:
  Var constant(Batch v);
  Var constant(Matrix m);
  Var scalar(double v);
  Var leaf(Batch v, bool requires_grad);
  Var leaf(Matrix m, bool requires_grad);

  const Batch& value(Var v) const { return nodes_[v.idx].value; }
  const Matrix& item(Var v, std::size_t i = 0) const { return nodes_[v.idx].value[i]; }
  double scalar_value(Var v) const { return nodes_[v.idx].value[0](0, 0); }

  /// Runs backprop from a scalar node. Gradients accumulate into grad().
  void backward(Var loss);

  bool has_grad(Var v) const { return !nodes_[v.idx].grad.empty(); }
  const Batch& grad_batch(Var v) const { return nodes_[v.idx].grad; }
  /// Gradient of a batch-1 node (parameters); zeros if it never received one.
  Matrix grad(Var v) const;

  // internal plumbing for op implementations
  int emit(Node n);
  Node& node(int i) { return nodes_[i]; }
  const Node& node(int i) const { return nodes_[i]; }
  void accumulate(int idx, std::size_t item, const Matrix& g);
  bool wants_grad(Var v) const { return nodes_[v.idx].requires_grad; }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

// ---- arithmetic -----------------------------------------------------------

/// Elementwise add. Shapes must match; b may have batch 1 (broadcast).
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Elementwise multiply with the same broadcast rule as add.
Var mul(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// Matrix product per batch item; either side may have batch 1 (shared).
Var matmul(Var a, Var b);
Var transpose(Var a);
/// Adds a 1 x cols row vector (batch 1) to every row of every item.
Var add_rowvec(Var a, Var bias);
/// Subtracts a rows x 1 column (same batch) from every column of each item.
Var sub_colvec(Var a, Var v);
Var slice_cols(Var a, Eigen::Index first, Eigen::Index count);
Var concat_cols(const std::vector<Var>& parts);

// ---- nonlinearities -------------------------------------------------------

Var relu(Var a);
Var elu(Var a, double alpha = 1.0);
Var exp_(Var a);
Var log_(Var a);
Var softmax_rows(Var a);
/// Row-wise logsumexp -> rows x 1 per item (numerically stable).
Var logsumexp_rows(Var a);
/// Per-row layer norm with affine gamma/beta (1 x cols, batch 1).
Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5);

// ---- reductions -----------------------------------------------------------

Var sum_all(Var a);
Var mean_all(Var a);

// ---- structure ------------------------------------------------------------

/// Flattens each item (rows x cols, row-major order) into one row of a
/// single batch-1 matrix of shape n_items x (rows*cols).
Var flatten_items(Var a);

// ---- convolution / pooling ------------------------------------------------

/// x: batch of C x T, kernels: batch-1 F x k. Output batch of (F*C) x T,
/// rows grouped filter-major (row f*C + c), "same" zero padding,
/// cross-correlation orientation.
Var temporal_conv(Var x, Var kernels);
/// x: batch of R x T, kernels: batch-1 R x k; row r is convolved with
/// kernels.row(r), same padding.
Var rowwise_conv(Var x, Var kernels);
/// x: batch of (G*c_in) x T, weights: batch-1 (G*d_mult) x c_in.
/// out[g*d_mult + d] = sum_c W(g*d_mult + d, c) * x[g*c_in + c].
Var row_mix_groups(Var x, Var weights, int groups);
/// Non-overlapping average pooling along columns; trailing remainder dropped.
Var avg_pool_cols(Var x, int pool);

// ---- batch norm / dropout --------------------------------------------------

/// Rows of each item are split into n_groups contiguous groups; statistics are
/// computed per group over (batch, group rows, cols). gamma/beta are
/// batch-1 1 x n_groups. Running stats are 1 x n_groups rows (mean starts at
/// 0, var at 1); training mode normalizes with batch statistics and updates
/// them, eval mode normalizes with them.
Var batch_norm(Var x, Var gamma, Var beta, int n_groups, Matrix* running_mean,
               Matrix* running_var, bool training, double momentum = 0.1,
               double eps = 1e-5);

/// Inverted dropout; identity when !training or p == 0.
Var dropout(Var x, double p, Rng& rng, bool training);

// ---- loss helpers ----------------------------------------------------------

/// Mean negative log-likelihood of integer labels under softmax(logits).
/// logits: batch-1 N x K.
Var cross_entropy_logits(Var logits, const std::vector<int>& labels);

/// Pairwise squared Euclidean distances between rows: batch-1 Na x F and
/// Nb x F -> batch-1 Na x Nb.
Var pairwise_sqdist(Var a, Var b);

}  // namespace xsa::ag
