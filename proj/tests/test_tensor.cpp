#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cassle/gradcheck.hpp"
#include "cassle/gradcheck_suite.hpp"
#include "cassle/rng.hpp"
#include "cassle/tensor.hpp"

using namespace cassle;

namespace {

Array arr(std::initializer_list<Scalar> v) {
  Array a(static_cast<Index>(v.size()));
  Index i = 0;
  for (Scalar x : v) a[i++] = x;
  return a;
}

Array random_array(Rng& rng, Index n) {
  Array a(n);
  for (Index i = 0; i < n; ++i) a[i] = rng.normal();
  return a;
}

}  // namespace

TEST_CASE("forward primitives match direct arithmetic") {
  Graph g;
  Tensor a = g.leaf(Shape{2}, arr({1, 2}), false);
  Tensor b = g.leaf(Shape{2}, arr({3, 4}), false);
  Tensor s = add(a, b);
  CHECK(s.value()[0] == 4.0);
  CHECK(s.value()[1] == 6.0);

  // matmul with the identity leaves any 3x3 matrix unchanged
  MatrixRM eye = MatrixRM::Identity(3, 3);
  MatrixRM m(3, 3);
  m << 1, 2, 3, 4, 5, 6, 7, 8, 9;
  Tensor prod = matmul(g.constant_matrix(eye), g.constant_matrix(m));
  CHECK(unflatten(prod.value(), 3, 3).isApprox(m, 0.0));

  Tensor r = relu(g.leaf(Shape{3}, arr({-1, 0, 2}), false));
  CHECK(r.value()[0] == 0.0);
  CHECK(r.value()[1] == 0.0);
  CHECK(r.value()[2] == 2.0);
}

TEST_CASE("backward of x^2 at x=3 gives 6") {
  Graph g;
  Tensor x = g.leaf(Shape{}, arr({3}), true);
  Tensor loss = pow2(x);
  GradientMap gm = g.backward(loss);
  CHECK(gm.get(x)[0] == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("backward of sum(matmul(A,B)) matches finite differences") {
  Rng rng(7);
  const Index m = 3, k = 4, n = 2;
  Array va = random_array(rng, m * k);
  Array vb = random_array(rng, k * n);

  Graph g;
  Tensor a = g.leaf(Shape{m, k}, va, true);
  Tensor b = g.leaf(Shape{k, n}, vb, true);
  GradientMap gm = g.backward(sum(matmul(a, b)));

  auto loss_at = [&](const Array& pa, const Array& pb) {
    Graph fg;
    Tensor fa = fg.leaf(Shape{m, k}, pa, false);
    Tensor fb = fg.leaf(Shape{k, n}, pb, false);
    return sum(matmul(fa, fb)).scalar();
  };
  Array fda = finite_difference_gradient([&](const Array& x) { return loss_at(x, vb); }, va);
  Array fdb = finite_difference_gradient([&](const Array& x) { return loss_at(va, x); }, vb);
  CHECK(allclose(gm.get(a), fda, 1e-6, 1e-9));
  CHECK(allclose(gm.get(b), fdb, 1e-6, 1e-9));
}

TEST_CASE("loss depending only on constants yields an empty gradient map") {
  Graph g;
  Tensor c = g.constant(Shape{3}, arr({1, 2, 3}));
  GradientMap gm = g.backward(sum(pow2(c)));
  CHECK(gm.size() == 0);
  CHECK(gm.get(c).isZero());
}

TEST_CASE("constant-flagged tensors accumulate exactly zero gradient") {
  Graph g;
  Tensor x = g.leaf(Shape{2}, arr({1, 2}), true);
  Tensor frozen = g.leaf(Shape{2}, arr({5, -3}), false);
  Tensor loss = sum(mul(x, frozen));
  GradientMap gm = g.backward(loss);
  CHECK(gm.get(frozen).isZero());
  CHECK(gm.get(x)[0] == 5.0);
  CHECK(gm.get(x)[1] == -3.0);
}

TEST_CASE("backward requires a scalar loss") {
  Graph g;
  Tensor x = g.leaf(Shape{2}, arr({1, 2}), true);
  CHECK_THROWS_AS((void)g.backward(x), Error);
}

TEST_CASE("gradient accumulation is additive until zero_grad") {
  Graph g;
  Tensor x = g.leaf(Shape{}, arr({2}), true);
  Tensor loss = pow2(x);
  (void)g.backward(loss);
  GradientMap gm2 = g.backward(loss);
  CHECK(gm2.get(x)[0] == doctest::Approx(8.0));  // 4 + 4
  g.zero_grad();
  GradientMap gm3 = g.backward(loss);
  CHECK(gm3.get(x)[0] == doctest::Approx(4.0));
}

TEST_CASE("shape and domain error contracts") {
  Graph g;
  Tensor a = g.leaf(Shape{2, 3}, Array::Zero(6), false);
  Tensor b = g.leaf(Shape{2, 2}, Array::Zero(4), false);
  CHECK_THROWS_AS((void)matmul(a, b), Error);
  CHECK_THROWS_AS((void)add(a, b), Error);
  CHECK_THROWS_AS((void)log(g.leaf(Shape{1}, arr({-1}), false)), Error);
  CHECK_THROWS_AS((void)sqrt(g.leaf(Shape{1}, arr({-1}), false)), Error);
  // division by zero surfaces as a non-finite domain error
  CHECK_THROWS_AS((void)div(g.constant(1.0), g.constant(0.0)), Error);
}

TEST_CASE("finite_difference_gradient oracle") {
  auto square = [](const Array& x) { return x[0] * x[0]; };
  Array x0 = arr({3});
  Array fd = finite_difference_gradient(square, x0, 1e-5);
  CHECK(std::abs(fd[0] - 6.0) < 1e-6);

  auto constant_fn = [](const Array&) { return 1.5; };
  Array fdc = finite_difference_gradient(constant_fn, arr({1, 2, 3}), 1e-5);
  CHECK(fdc.isZero());

  // l2-normalize then dot with a fixed vector, vs backward
  Rng rng(11);
  Array v = random_array(rng, 4);
  Array z0 = random_array(rng, 4);
  auto f = [&](const Array& z) {
    Graph fg;
    Tensor zt = fg.leaf(Shape{4}, z, false);
    Tensor vt = fg.constant(Shape{4}, v);
    return sum(mul(l2_normalize(zt, 0), vt)).scalar();
  };
  Graph g;
  Tensor zt = g.leaf(Shape{4}, z0, true);
  GradientMap gm = g.backward(sum(mul(l2_normalize(zt, 0), g.constant(Shape{4}, v))));
  CHECK(allclose(gm.get(zt), finite_difference_gradient(f, z0), 1e-4, 1e-9));
}

TEST_CASE("l2_normalize") {
  Graph g;
  Tensor v = g.leaf(Shape{2}, arr({3, 4}), false);
  Tensor n = l2_normalize(v, 0);
  CHECK(n.value()[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(n.value()[1] == doctest::Approx(0.8).epsilon(1e-12));

  Tensor unit = g.leaf(Shape{2}, arr({1, 0}), false);
  CHECK((l2_normalize(unit, 0).value() - unit.value()).abs().maxCoeff() < 1e-15);

  Rng rng(3);
  Graph g2;
  Tensor batch = g2.leaf(Shape{8, 4}, random_array(rng, 32), false);
  Tensor nb = l2_normalize(batch, 1);
  auto m = as_matrix(nb.value(), nb.shape());
  for (Index i = 0; i < 8; ++i) CHECK(std::abs(m.row(i).norm() - 1.0) < 1e-9);

  CHECK_THROWS_AS((void)l2_normalize(g2.leaf(Shape{2}, arr({0, 0}), false), 0), Error);
}

TEST_CASE("standardize") {
  Graph g;
  Tensor col = g.leaf(Shape{2, 1}, arr({1, 3}), false);
  Tensor sc = standardize(col);
  CHECK(sc.value()[0] == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(sc.value()[1] == doctest::Approx(1.0).epsilon(1e-6));

  Rng rng(5);
  Graph g2;
  Tensor batch = g2.leaf(Shape{16, 8}, random_array(rng, 128), false);
  Tensor sb = standardize(batch);
  auto m = as_matrix(sb.value(), sb.shape());
  for (Index j = 0; j < 8; ++j) {
    const Scalar mean_j = m.col(j).mean();
    const Scalar var_j = (m.col(j).array() - mean_j).square().sum() / 16.0;
    CHECK(std::abs(mean_j) < 1e-9);
    CHECK(std::abs(var_j - 1.0) < 1e-6);
  }

  // standardized input is a fixed point, up to the eps guard inside the
  // sqrt (1e-8) which rescales by 1/sqrt(1 + eps/var)
  Graph g3;
  Tensor again = standardize(g3.leaf(Shape{16, 8}, sb.value(), false));
  CHECK((again.value() - sb.value()).abs().maxCoeff() < 2e-8);

  Graph g4;
  Array constant_col = Array::Zero(8);
  CHECK_THROWS_AS((void)standardize(g4.leaf(Shape{4, 2}, constant_col, false)), Error);
}

TEST_CASE("two forward passes are bitwise identical") {
  Rng rng(17);
  Array va = random_array(rng, 12);
  Array vb = random_array(rng, 12);
  auto build = [&]() {
    Graph g;
    Tensor a = g.leaf(Shape{3, 4}, va, true);
    Tensor b = g.leaf(Shape{3, 4}, vb, true);
    Tensor out = sum(mul(exp(scale(a, 0.3)), add(a, b)), -1);
    return out.value()[0];
  };
  const Scalar first = build();
  const Scalar second = build();
  CHECK(std::memcmp(&first, &second, sizeof(Scalar)) == 0);
}

TEST_CASE("broadcast and slice round out the primitive set") {
  Graph g;
  Tensor row = g.leaf(Shape{1, 3}, arr({1, 2, 3}), false);
  Tensor big = broadcast_to(row, Shape{2, 3});
  CHECK(big.value()[3] == 1.0);
  CHECK(big.value()[5] == 3.0);

  Tensor m = g.leaf(Shape{3, 3}, arr({1, 2, 3, 4, 5, 6, 7, 8, 9}), false);
  Tensor s = slice(m, 1, 2, 0, 2);
  CHECK(s.value()[0] == 4.0);
  CHECK(s.value()[3] == 8.0);

  Tensor cat = concat({row, row}, 0);
  CHECK(cat.shape() == Shape{2, 3});
  CHECK_THROWS_AS((void)slice(m, 2, 2, 0, 2), Error);
}

TEST_CASE("every primitive passes finite-difference checks over 20 seeds") {
  auto results = run_primitive_gradchecks(20);
  for (const auto& r : results) {
    INFO(r.name, " worst abs diff ", r.worst_abs_diff);
    CHECK(r.passed);
  }
  CHECK(all_passed(results));
}
