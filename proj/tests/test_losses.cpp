#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cassle/losses.hpp"
#include "cassle/rng.hpp"

using namespace cassle;

namespace {

MatrixRM random_matrix(Rng& rng, Index r, Index c) {
  MatrixRM m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = rng.normal();
  return m;
}

PrototypeBank axis_bank(Index k, Index d) {
  PrototypeBank bank;
  bank.name = "bank";
  bank.shape = {k, d};
  MatrixRM m = MatrixRM::Zero(k, d);
  for (Index i = 0; i < k; ++i) m(i, i % d) = 1.0;
  bank.value = flatten(m);
  bank.trainable = false;
  return bank;
}

}  // namespace

TEST_CASE("infonce closed form with a single orthogonal negative") {
  LossConfig cfg;
  cfg.include_positive_in_denominator = true;

  for (Scalar tau : {1.0, 0.1}) {
    cfg.temperature = tau;
    Graph g;
    MatrixRM anchor(1, 2), neg(1, 2);
    anchor << 1, 0;
    neg << 0, 1;
    Tensor loss = infonce_with_negatives(g, g.constant_matrix(anchor),
                                         g.constant_matrix(anchor), g.constant_matrix(neg), cfg);
    const Scalar expected = std::log1p(std::exp(-1.0 / tau));
    CHECK(std::abs(loss.scalar() - expected) < 1e-9);
  }
}

TEST_CASE("infonce is symmetric for identical views with a symmetric negative set") {
  LossConfig cfg;
  Rng rng(5);
  MatrixRM v = random_matrix(rng, 3, 4);
  MatrixRM negs = random_matrix(rng, 5, 4);
  Graph g1, g2;
  Tensor l1 = infonce_with_negatives(g1, g1.constant_matrix(v), g1.constant_matrix(v),
                                     g1.constant_matrix(negs), cfg);
  Tensor l2 = infonce_with_negatives(g2, g2.constant_matrix(v), g2.constant_matrix(v),
                                     g2.constant_matrix(negs), cfg);
  CHECK(l1.scalar() == l2.scalar());
}

TEST_CASE("batch infonce: nonnegative with positive included, permutation invariant") {
  LossConfig cfg;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const Index n = 4 + rng.uniform_int(5);
    MatrixRM za = random_matrix(rng, n, 6);
    MatrixRM zb = random_matrix(rng, n, 6);
    Graph g;
    Tensor loss = infonce_loss(g, g.constant_matrix(za), g.constant_matrix(zb), cfg);
    CHECK(loss.scalar() >= 0.0);

    std::vector<Index> perm(static_cast<size_t>(n));
    for (Index i = 0; i < n; ++i) perm[static_cast<size_t>(i)] = i;
    rng.shuffle(perm);
    MatrixRM pa(n, 6), pb(n, 6);
    for (Index i = 0; i < n; ++i) {
      pa.row(i) = za.row(perm[static_cast<size_t>(i)]);
      pb.row(i) = zb.row(perm[static_cast<size_t>(i)]);
    }
    Graph g2;
    Tensor ploss = infonce_loss(g2, g2.constant_matrix(pa), g2.constant_matrix(pb), cfg);
    CHECK(std::abs(loss.scalar() - ploss.scalar()) < 1e-12);
  }
}

TEST_CASE("batch infonce error contracts") {
  LossConfig cfg;
  Graph g;
  MatrixRM one = MatrixRM::Ones(1, 3);
  CHECK_THROWS_AS(
      (void)infonce_loss(g, g.constant_matrix(one), g.constant_matrix(one), cfg), Error);
  cfg.temperature = -1.0;
  MatrixRM two = MatrixRM::Ones(2, 3);
  CHECK_THROWS_AS(
      (void)infonce_loss(g, g.constant_matrix(two), g.constant_matrix(two), cfg), Error);
}

TEST_CASE("literal reading: positive excluded from denominator can go negative") {
  LossConfig cfg;
  cfg.include_positive_in_denominator = false;
  cfg.temperature = 0.5;
  Graph g;
  // anchor aligned with positive, one far-away negative: -log(pos/neg) < 0
  MatrixRM a(1, 2), p(1, 2), neg(1, 2);
  a << 1, 0;
  p << 1, 0;
  neg << -1, 0;
  Tensor loss =
      infonce_with_negatives(g, g.constant_matrix(a), g.constant_matrix(p), g.constant_matrix(neg), cfg);
  // loss = -pos/tau + log(exp(neg/tau)) = -(1 - (-1))/tau = -4
  CHECK(loss.scalar() == doctest::Approx(-4.0).epsilon(1e-12));
}

TEST_CASE("negative cosine closed forms") {
  Graph g;
  Rng rng(3);
  MatrixRM q = random_matrix(rng, 4, 5);
  Tensor loss = negative_cosine_loss(g, g.constant_matrix(q), g.constant_matrix(q));
  CHECK(std::abs(loss.scalar() - (-1.0)) < 1e-9);

  MatrixRM a(1, 2), b(1, 2);
  a << 1, 0;
  b << 0, 1;
  Graph g2;
  Tensor orth = negative_cosine_loss(g2, g2.constant_matrix(a), g2.constant_matrix(b));
  CHECK(std::abs(orth.scalar()) < 1e-9);

  MatrixRM qq(1, 2), zz(1, 2);
  qq << 1, 1;
  zz << 1, 0;
  Graph g3;
  Tensor diag = negative_cosine_loss(g3, g3.constant_matrix(qq), g3.constant_matrix(zz));
  CHECK(std::abs(diag.scalar() - (-1.0 / std::sqrt(2.0))) < 1e-9);
}

TEST_CASE("negative cosine: range, rescale invariance, stop-gradient contract") {
  Rng rng(7);
  for (int s = 0; s < 5; ++s) {
    MatrixRM q = random_matrix(rng, 6, 4);
    MatrixRM z = random_matrix(rng, 6, 4);
    Graph g;
    Tensor loss = negative_cosine_loss(g, g.constant_matrix(q), g.constant_matrix(z));
    CHECK(loss.scalar() >= -1.0 - 1e-12);
    CHECK(loss.scalar() <= 1.0 + 1e-12);

    Graph g2;
    Tensor scaled =
        negative_cosine_loss(g2, g2.constant_matrix(MatrixRM(3.7 * q)), g2.constant_matrix(MatrixRM(0.2 * z)));
    CHECK(std::abs(scaled.scalar() - loss.scalar()) < 1e-12);
  }

  Graph g;
  MatrixRM m = MatrixRM::Ones(2, 2);
  Tensor live = g.matrix(m, /*requires_grad=*/true);
  CHECK_THROWS_AS((void)negative_cosine_loss(g, g.constant_matrix(m), live), Error);

  // gradient flows only through the first argument
  Graph g4;
  Rng rng2(9);
  Tensor q4 = g4.matrix(random_matrix(rng2, 3, 4), true);
  Tensor z4 = g4.constant_matrix(random_matrix(rng2, 3, 4));
  GradientMap gm = g4.backward(negative_cosine_loss(g4, q4, z4));
  CHECK(gm.contains(q4));
  CHECK_FALSE(gm.contains(z4));
}

TEST_CASE("sinkhorn: uniform scores give uniform assignments") {
  LossConfig cfg;
  AssignmentMatrix a = sinkhorn_assignments(MatrixRM::Zero(6, 4), cfg);
  CHECK((a.values.array() - 0.25).abs().maxCoeff() < 1e-12);
}

TEST_CASE("sinkhorn: row sums are 1 for any iteration count") {
  Rng rng(11);
  for (int iters = 1; iters <= 6; ++iters) {
    LossConfig cfg;
    cfg.sinkhorn_iters = iters;
    MatrixRM scores = random_matrix(rng, 9, 5);
    AssignmentMatrix a = sinkhorn_assignments(scores, cfg);
    a.validate();
    for (Index i = 0; i < a.values.rows(); ++i)
      CHECK(std::abs(a.values.row(i).sum() - 1.0) < 1e-6);
  }
}

TEST_CASE("sinkhorn: column sums converge to batch/K") {
  Rng rng(13);
  LossConfig cfg;
  cfg.sinkhorn_iters = 50000;  // run the alternating scaling to convergence
  MatrixRM scores = random_matrix(rng, 16, 8);
  AssignmentMatrix a = sinkhorn_assignments(scores, cfg);
  const Scalar target = 16.0 / 8.0;
  for (Index j = 0; j < 8; ++j) CHECK(std::abs(a.values.col(j).sum() - target) < 1e-4);
}

TEST_CASE("sinkhorn: single row reduces to softmax") {
  LossConfig cfg;
  cfg.sinkhorn_eps = 0.5;
  MatrixRM scores(1, 4);
  scores << 0.3, -1.2, 2.0, 0.0;
  AssignmentMatrix a = sinkhorn_assignments(scores, cfg);
  Eigen::ArrayXd expected = ((scores.row(0).array() - 2.0) / 0.5).exp();
  expected /= expected.sum();
  CHECK((a.values.row(0).transpose().array() - expected).abs().maxCoeff() < 1e-12);
}

TEST_CASE("sinkhorn: guarded against overflow") {
  LossConfig cfg;
  MatrixRM scores(3, 3);
  scores << 1e6, 0, -1e6, 0, 1e6, 0, -1e6, 0, 1e6;
  AssignmentMatrix a = sinkhorn_assignments(scores, cfg);
  CHECK(a.values.allFinite());
}

TEST_CASE("prototype CE: one-hot target with uniform scores gives log K") {
  LossConfig cfg;
  PrototypeBank bank = axis_bank(4, 5);
  Graph g;
  MatrixRM z = MatrixRM::Zero(1, 5);
  z(0, 4) = 1.0;  // orthogonal to every prototype -> uniform scores
  MatrixRM target = MatrixRM::Zero(1, 4);
  target(0, 2) = 1.0;
  Tensor loss = prototype_ce_loss(g, g.constant_matrix(z), AssignmentMatrix{target}, bank, cfg);
  CHECK(std::abs(loss.scalar() - std::log(4.0)) < 1e-9);
}

TEST_CASE("prototype CE: target equal to prediction gives its entropy") {
  LossConfig cfg;
  PrototypeBank bank = axis_bank(3, 4);
  Rng rng(17);
  MatrixRM z = random_matrix(rng, 5, 4);

  // predicted softmax, computed independently
  MatrixRM zn = z;
  for (Index i = 0; i < z.rows(); ++i) zn.row(i).normalize();
  MatrixRM cn = unflatten(bank.value, 3, 4);
  for (Index i = 0; i < 3; ++i) cn.row(i).normalize();
  MatrixRM logits = (zn * cn.transpose()) / cfg.prototype_temperature;
  MatrixRM probs(5, 3);
  Scalar entropy = 0.0;
  for (Index i = 0; i < 5; ++i) {
    Eigen::ArrayXd row = (logits.row(i).array() - logits.row(i).maxCoeff()).exp();
    probs.row(i) = (row / row.sum()).matrix();
    for (Index j = 0; j < 3; ++j) entropy -= probs(i, j) * std::log(probs(i, j));
  }
  entropy /= 5.0;

  Graph g;
  Tensor loss = prototype_ce_loss(g, g.constant_matrix(z), AssignmentMatrix{probs}, bank, cfg);
  CHECK(std::abs(loss.scalar() - entropy) < 1e-9);
}

TEST_CASE("prototype CE: near-zero temperature drives aligned loss to zero") {
  LossConfig cfg;
  cfg.prototype_temperature = 0.01;
  PrototypeBank bank = axis_bank(4, 4);
  Graph g;
  MatrixRM z = MatrixRM::Zero(1, 4);
  z(0, 1) = 2.0;  // exactly prototype 1 after normalization
  MatrixRM target = MatrixRM::Zero(1, 4);
  target(0, 1) = 1.0;
  Tensor loss = prototype_ce_loss(g, g.constant_matrix(z), AssignmentMatrix{target}, bank, cfg);
  const Scalar closed = std::log1p(3.0 * std::exp(-1.0 / cfg.prototype_temperature));
  CHECK(std::abs(loss.scalar() - closed) < 1e-9);
  CHECK(loss.scalar() < 1e-9);
}

TEST_CASE("prototype CE contract errors") {
  LossConfig cfg;
  PrototypeBank bank = axis_bank(4, 4);
  Graph g;
  MatrixRM z = MatrixRM::Ones(1, 4);
  MatrixRM bad = MatrixRM::Constant(1, 4, 0.5);  // sums to 2
  CHECK_THROWS_AS(
      (void)prototype_ce_loss(g, g.constant_matrix(z), AssignmentMatrix{bad}, bank, cfg), Error);
}

TEST_CASE("cross correlation diagonals") {
  Rng rng(19);
  MatrixRM z = random_matrix(rng, 12, 4);
  Graph g;
  Tensor c_same = cross_correlation(g, g.constant_matrix(z), g.constant_matrix(z));
  auto cm = as_matrix(c_same.value(), c_same.shape());
  for (Index i = 0; i < 4; ++i) CHECK(std::abs(cm(i, i) - 1.0) < 1e-12);

  Graph g2;
  Tensor c_anti = cross_correlation(g2, g2.constant_matrix(z), g2.constant_matrix(MatrixRM(-z)));
  auto am = as_matrix(c_anti.value(), c_anti.shape());
  for (Index i = 0; i < 4; ++i) CHECK(std::abs(am(i, i) + 1.0) < 1e-12);
  CHECK((c_anti.value().abs() <= 1.0 + 1e-12).all());
}

TEST_CASE("cross correlation: independent columns stay weakly correlated") {
  Rng rng(23);  // seed chosen with the batch size so 0.25 holds comfortably
  MatrixRM za = random_matrix(rng, 256, 6);
  MatrixRM zb = random_matrix(rng, 256, 6);
  Graph g;
  Tensor c = cross_correlation(g, g.constant_matrix(za), g.constant_matrix(zb));
  CHECK(c.value().abs().maxCoeff() < 0.25);
}

TEST_CASE("cross correlation degenerate input") {
  Graph g;
  MatrixRM z = MatrixRM::Ones(4, 2);  // constant columns
  CHECK_THROWS_AS((void)cross_correlation(g, g.constant_matrix(z), g.constant_matrix(z)), Error);
}

TEST_CASE("barlow twins closed forms") {
  LossConfig cfg;
  cfg.barlow_offdiag_weight = 5e-3;

  // decorrelated identical views -> identity correlation -> loss 0
  MatrixRM z(4, 2);
  z << 1, 1, -1, 1, 1, -1, -1, -1;
  Graph g;
  Tensor zero_loss = barlow_twins_loss(g, g.constant_matrix(z), g.constant_matrix(z), cfg);
  CHECK(std::abs(zero_loss.scalar()) < 1e-8);

  // duplicated column, zB = zA -> all-ones correlation -> 2 lambda
  MatrixRM dup(4, 2);
  dup.col(0) << 1, -1, 2, -2;
  dup.col(1) = dup.col(0);
  Graph g2;
  Tensor dup_loss = barlow_twins_loss(g2, g2.constant_matrix(dup), g2.constant_matrix(dup), cfg);
  CHECK(std::abs(dup_loss.scalar() - 2.0 * cfg.barlow_offdiag_weight) < 1e-9);

  // zB = -zA with decorrelated columns -> C = -I -> 4d
  Graph g3;
  Tensor anti_loss = barlow_twins_loss(g3, g3.constant_matrix(z), g3.constant_matrix(MatrixRM(-z)), cfg);
  CHECK(std::abs(anti_loss.scalar() - 4.0 * 2.0) < 1e-9);
}

TEST_CASE("barlow twins is nonnegative and zero only at identity correlation") {
  Rng rng(29);
  LossConfig cfg;
  for (int s = 0; s < 8; ++s) {
    MatrixRM za = random_matrix(rng, 8, 3);
    MatrixRM zb = random_matrix(rng, 8, 3);
    Graph g;
    Tensor loss = barlow_twins_loss(g, g.constant_matrix(za), g.constant_matrix(zb), cfg);
    CHECK(loss.scalar() >= 0.0);
    CHECK(loss.scalar() > 1e-8);  // random views are never perfectly aligned
  }
}

TEST_CASE("softmax cross entropy matches a direct computation") {
  Rng rng(31);
  MatrixRM logits = random_matrix(rng, 5, 3);
  std::vector<int> labels = {0, 2, 1, 1, 0};
  Graph g;
  Tensor loss = softmax_cross_entropy(g, g.constant_matrix(logits), labels);

  Scalar expected = 0.0;
  for (Index i = 0; i < 5; ++i) {
    const Scalar m = logits.row(i).maxCoeff();
    const Scalar lse = m + std::log((logits.row(i).array() - m).exp().sum());
    expected += lse - logits(i, labels[static_cast<size_t>(i)]);
  }
  expected /= 5.0;
  CHECK(std::abs(loss.scalar() - expected) < 1e-12);
}

TEST_CASE("symmetrized batch infonce swaps views consistently") {
  Rng rng(37);
  MatrixRM za = random_matrix(rng, 5, 4);
  MatrixRM zb = random_matrix(rng, 5, 4);
  LossConfig cfg;
  Graph g1;
  const Scalar fwd = infonce_loss(g1, g1.constant_matrix(za), g1.constant_matrix(zb), cfg).scalar() +
                     infonce_loss(g1, g1.constant_matrix(zb), g1.constant_matrix(za), cfg).scalar();
  Graph g2;
  const Scalar swapped =
      infonce_loss(g2, g2.constant_matrix(zb), g2.constant_matrix(za), cfg).scalar() +
      infonce_loss(g2, g2.constant_matrix(za), g2.constant_matrix(zb), cfg).scalar();
  CHECK(std::abs(fwd - swapped) < 1e-12);
}
