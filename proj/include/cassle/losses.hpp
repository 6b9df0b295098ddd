#pragma once

#include "cassle/nn.hpp"
#include "cassle/tensor.hpp"

namespace cassle {

struct LossConfig {
  Scalar temperature = 0.2;             // InfoNCE
  Scalar prototype_temperature = 0.1;   // prototype cross-entropy
  Scalar barlow_offdiag_weight = 5e-3;  // lambda
  int sinkhorn_iters = 3;
  Scalar sinkhorn_eps = 0.05;
  bool include_positive_in_denominator = true;

  void validate() const;
};

// Soft cluster assignments, rows summing to 1. Computed outside the gradient
// graph: assignments are targets.
struct AssignmentMatrix {
  MatrixRM values;  // [batch, K]

  void validate() const;  // row sums within 1e-6 of 1, entries in [0,1]
};

// NT-Xent over a batch of paired views: anchors are rows of zA, positives the
// matching rows of zB, and the denominator pools the other samples of both
// views (2N-2 negatives, plus the positive when configured).
Tensor infonce_loss(Graph& g, const Tensor& zA, const Tensor& zB, const LossConfig& cfg);

// InfoNCE with an explicit shared negative set instead of in-batch negatives.
Tensor infonce_with_negatives(Graph& g, const Tensor& anchors, const Tensor& positives,
                              const Tensor& negatives, const LossConfig& cfg);

// mean_i -cos(q_i, z_i); gradients reach only q's subgraph, z must already be
// detached (stop-gradient side).
Tensor negative_cosine_loss(Graph& g, const Tensor& q, const Tensor& z);

// Balanced soft assignments from similarity scores: exp(scores/eps) scaled
// alternately so prototypes receive batch/K mass and rows sum to 1, with a
// final row normalization. With a single row the prototype-side constraint
// collapses and the result is the softmax of that row.
AssignmentMatrix sinkhorn_assignments(const MatrixRM& scores, const LossConfig& cfg);

// mean_i -sum_d a_d log softmax_d(sim(z_i, c_d)/tau)
Tensor prototype_ce_loss(Graph& g, const Tensor& zA, const AssignmentMatrix& assignmentsB,
                         PrototypeBank& bank, const LossConfig& cfg);

// Correlation matrix between per-dimension mean-centered views, normalized by
// the centered column norms; entries in [-1, 1].
Tensor cross_correlation(Graph& g, const Tensor& zA, const Tensor& zB);

// sum_u (1 - C_uu)^2 + lambda * sum_{u != v} C_uv^2
Tensor barlow_twins_loss(Graph& g, const Tensor& zA, const Tensor& zB, const LossConfig& cfg);

// Multinomial logistic-regression loss (used by the linear probe):
// mean_i [logsumexp(logits_i) - logits_i[label_i]].
Tensor softmax_cross_entropy(Graph& g, const Tensor& logits, const std::vector<int>& labels);

}  // namespace cassle
