#include "cassle/losses.hpp"

#include <cmath>

namespace cassle {

void LossConfig::validate() const {
  if (temperature <= 0.0) throw config_error("losses.temperature must be positive");
  if (prototype_temperature <= 0.0)
    throw config_error("losses.prototype_temperature must be positive");
  if (barlow_offdiag_weight <= 0.0)
    throw config_error("losses.barlow_lambda must be positive");
  if (sinkhorn_iters < 1) throw config_error("losses.sinkhorn_iters must be >= 1");
  if (sinkhorn_eps <= 0.0) throw config_error("losses.sinkhorn_eps must be positive");
}

void AssignmentMatrix::validate() const {
  for (Index i = 0; i < values.rows(); ++i) {
    const Scalar row_sum = values.row(i).sum();
    if (std::abs(row_sum - 1.0) > 1e-6)
      throw contract_error("assignment row " + std::to_string(i) + " sums to " +
                           std::to_string(row_sum));
    if ((values.row(i).array() < -1e-12).any() || (values.row(i).array() > 1.0 + 1e-12).any())
      throw contract_error("assignment entries outside [0, 1]");
  }
}

namespace {

// -log of the softmax-selected positive, shared by both InfoNCE forms.
// `candidates` holds the per-anchor denominator logits [N, M]; `mask` zeroes
// the excluded entries; `positive_logits` is [N, 1].
Tensor nt_xent_from_logits(Graph& g, const Tensor& candidates, const MatrixRM& mask,
                           const Tensor& positive_logits) {
  const Index n = candidates.rows();
  const Index m = candidates.cols();
  // Per-entry shift: the row max over kept entries for kept positions, the
  // entry's own value for masked ones (so exp() sees 0 there). The shift is a
  // constant, so it cancels exactly in the log-sum-exp.
  auto cvals = as_matrix(candidates.value(), candidates.shape());
  MatrixRM shift(n, m);
  for (Index i = 0; i < n; ++i) {
    Scalar row_max = -std::numeric_limits<Scalar>::infinity();
    for (Index j = 0; j < m; ++j)
      if (mask(i, j) != 0.0) row_max = std::max(row_max, cvals(i, j));
    if (!std::isfinite(row_max)) throw degenerate_input("infonce: empty denominator");
    for (Index j = 0; j < m; ++j) shift(i, j) = mask(i, j) != 0.0 ? row_max : cvals(i, j);
  }
  Tensor shift_t = g.constant_matrix(shift);
  Tensor mask_t = g.constant_matrix(mask);
  Tensor expd = mul(exp(sub(candidates, shift_t)), mask_t);
  // log(sum_j exp(c_ij - m_i)) + m_i, with m_i recovered from column 0 of the
  // kept shift (every kept entry of a row shares it).
  MatrixRM row_shift(n, 1);
  for (Index i = 0; i < n; ++i) {
    Scalar m_i = 0.0;
    for (Index j = 0; j < m; ++j)
      if (mask(i, j) != 0.0) {
        m_i = shift(i, j);
        break;
      }
    row_shift(i, 0) = m_i;
  }
  Tensor lse = add(log(sum(expd, 1, /*keepdim=*/true)), g.constant_matrix(row_shift));
  Tensor per_sample = sub(lse, positive_logits);  // [N, 1]
  return mean(per_sample);
}

Tensor diag_as_column(Graph& g, const Tensor& square) {
  const Index n = square.rows();
  MatrixRM eye = MatrixRM::Identity(n, n);
  return sum(mul(square, g.constant_matrix(eye)), 1, /*keepdim=*/true);
}

}  // namespace

Tensor infonce_loss(Graph& g, const Tensor& zA, const Tensor& zB, const LossConfig& cfg) {
  cfg.validate();
  if (zA.shape().size() != 2 || !same_shape(zA.shape(), zB.shape()))
    throw shape_error("infonce_loss expects matching [batch, d] views");
  const Index n = zA.rows();
  if (n < 2) throw degenerate_input("infonce_loss needs batch >= 2 for in-batch negatives");

  Tensor a = l2_normalize(zA, 1);
  Tensor b = l2_normalize(zB, 1);
  const Scalar inv_tau = 1.0 / cfg.temperature;
  Tensor s_aa = scale(matmul(a, transpose(a)), inv_tau);
  Tensor s_ab = scale(matmul(a, transpose(b)), inv_tau);
  Tensor candidates = concat({s_aa, s_ab}, 1);  // [n, 2n]

  MatrixRM mask = MatrixRM::Ones(n, 2 * n);
  for (Index i = 0; i < n; ++i) {
    mask(i, i) = 0.0;  // self-similarity, never a candidate
    if (!cfg.include_positive_in_denominator) mask(i, n + i) = 0.0;
  }
  return nt_xent_from_logits(g, candidates, mask, diag_as_column(g, s_ab));
}

Tensor infonce_with_negatives(Graph& g, const Tensor& anchors, const Tensor& positives,
                              const Tensor& negatives, const LossConfig& cfg) {
  cfg.validate();
  if (anchors.shape().size() != 2 || !same_shape(anchors.shape(), positives.shape()))
    throw shape_error("infonce_with_negatives expects matching [batch, d] anchors/positives");
  if (negatives.shape().size() != 2 || negatives.cols() != anchors.cols())
    throw shape_error("negatives must be [m, d] with matching d");

  Tensor a = l2_normalize(anchors, 1);
  Tensor p = l2_normalize(positives, 1);
  Tensor neg = l2_normalize(negatives, 1);
  const Scalar inv_tau = 1.0 / cfg.temperature;
  Tensor pos_logits = scale(sum(mul(a, p), 1, /*keepdim=*/true), inv_tau);
  Tensor s_an = scale(matmul(a, transpose(neg)), inv_tau);

  const Index n = anchors.rows();
  Tensor candidates =
      cfg.include_positive_in_denominator ? concat({pos_logits, s_an}, 1) : s_an;
  MatrixRM mask = MatrixRM::Ones(candidates.rows(), candidates.cols());
  (void)n;
  return nt_xent_from_logits(g, candidates, mask, pos_logits);
}

Tensor negative_cosine_loss(Graph& g, const Tensor& q, const Tensor& z) {
  if (q.shape().size() != 2 || !same_shape(q.shape(), z.shape()))
    throw shape_error("negative_cosine_loss expects matching [batch, d] inputs");
  if (z.requires_grad())
    throw contract_error("negative_cosine_loss: second argument must be detached");
  (void)g;
  Tensor qn = l2_normalize(q, 1);
  Tensor zn = l2_normalize(z, 1);
  return negate(mean(sum(mul(qn, zn), 1)));
}

AssignmentMatrix sinkhorn_assignments(const MatrixRM& scores, const LossConfig& cfg) {
  cfg.validate();
  if (!scores.allFinite()) throw domain_error("sinkhorn_assignments: non-finite scores");
  const Index n = scores.rows();
  const Index k = scores.cols();
  if (n < 1 || k < 1) throw shape_error("sinkhorn_assignments: empty score matrix");

  MatrixRM q(n, k);
  for (Index i = 0; i < n; ++i) {
    const Scalar row_max = scores.row(i).maxCoeff();
    q.row(i) = ((scores.row(i).array() - row_max) / cfg.sinkhorn_eps).exp();
  }
  const Scalar col_target = static_cast<Scalar>(n) / static_cast<Scalar>(k);
  for (int it = 0; it < cfg.sinkhorn_iters; ++it) {
    if (n > 1) {  // with one sample the prototype-side constraint collapses
      for (Index j = 0; j < k; ++j) {
        const Scalar col_sum = q.col(j).sum();
        if (col_sum > 0.0) q.col(j) *= col_target / col_sum;
      }
    }
    for (Index i = 0; i < n; ++i) {
      const Scalar row_sum = q.row(i).sum();
      if (row_sum > 0.0) q.row(i) /= row_sum;
    }
  }
  for (Index i = 0; i < n; ++i) {
    const Scalar row_sum = q.row(i).sum();
    if (row_sum > 0.0) q.row(i) /= row_sum;
  }
  if (!q.allFinite()) throw domain_error("sinkhorn_assignments: diverged");
  return AssignmentMatrix{std::move(q)};
}

Tensor prototype_ce_loss(Graph& g, const Tensor& zA, const AssignmentMatrix& assignmentsB,
                         PrototypeBank& bank, const LossConfig& cfg) {
  cfg.validate();
  assignmentsB.validate();
  if (bank.value.size() == 0) throw config_error("prototype_ce_loss: empty prototype bank");
  if (assignmentsB.values.rows() != zA.rows() || assignmentsB.values.cols() != bank.shape[0])
    throw shape_error("prototype_ce_loss: assignment shape mismatch");
  Tensor scores = prototype_scores(g, zA, bank, cfg.prototype_temperature);
  Tensor logp = sub(scores, broadcast_to(logsumexp(scores, 1, /*keepdim=*/true),
                                         scores.shape()));
  Tensor targets = g.constant_matrix(assignmentsB.values);
  return negate(mean(sum(mul(targets, logp), 1)));
}

Tensor cross_correlation(Graph& g, const Tensor& zA, const Tensor& zB) {
  if (zA.shape().size() != 2 || !same_shape(zA.shape(), zB.shape()))
    throw shape_error("cross_correlation expects matching [batch, d] views");
  if (zA.rows() < 2) throw degenerate_input("cross_correlation needs batch >= 2");
  (void)g;

  auto normalize_columns = [](const Tensor& z) {
    Tensor centered = sub(z, broadcast_to(mean(z, 0, /*keepdim=*/true), z.shape()));
    Tensor norms2 = sum(pow2(centered), 0, /*keepdim=*/true);
    if (norms2.value().minCoeff() < 1e-24)
      throw degenerate_input("cross_correlation: constant feature dimension");
    return div(centered, broadcast_to(sqrt(norms2), z.shape()));
  };
  Tensor na = normalize_columns(zA);
  Tensor nb = normalize_columns(zB);
  return matmul(transpose(na), nb);
}

Tensor barlow_twins_loss(Graph& g, const Tensor& zA, const Tensor& zB, const LossConfig& cfg) {
  cfg.validate();
  Tensor c = cross_correlation(g, zA, zB);
  const Index d = c.rows();
  MatrixRM eye = MatrixRM::Identity(d, d);
  MatrixRM weights = MatrixRM::Constant(d, d, cfg.barlow_offdiag_weight);
  weights.diagonal().setOnes();
  Tensor residual = sub(g.constant_matrix(eye), c);
  return sum(mul(pow2(residual), g.constant_matrix(weights)));
}

Tensor softmax_cross_entropy(Graph& g, const Tensor& logits, const std::vector<int>& labels) {
  if (logits.shape().size() != 2) throw shape_error("softmax_cross_entropy expects [batch, C]");
  const Index n = logits.rows();
  const Index c = logits.cols();
  if (static_cast<Index>(labels.size()) != n)
    throw shape_error("softmax_cross_entropy: label count mismatch");
  MatrixRM onehot = MatrixRM::Zero(n, c);
  for (Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<size_t>(i)];
    if (y < 0 || y >= c) throw contract_error("label out of range");
    onehot(i, y) = 1.0;
  }
  Tensor picked = sum(mul(logits, g.constant_matrix(onehot)), 1, /*keepdim=*/true);
  Tensor lse = logsumexp(logits, 1, /*keepdim=*/true);
  return mean(sub(lse, picked));
}

}  // namespace cassle
