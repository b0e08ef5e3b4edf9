#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "helo/error.hpp"
#include "helo/ot.hpp"

using namespace helo;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Matrix m(r, c);
  for (double& x : m.values()) x = rng.uniform(lo, hi);
  return m;
}

/// Exact OT value for uniform marginals: the optimum sits on a permutation
/// matrix (Birkhoff), so enumerate all of them.
double permutation_oracle(const Matrix& cost) {
  const std::size_t n = cost.rows();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = 1e300;
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += cost(i, perm[i]);
    best = std::min(best, s / static_cast<double>(n));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

}  // namespace

TEST_CASE("cost matrix range") {
  Rng rng(1);
  const Matrix x = random_matrix(4, 6, rng);
  const Matrix self = cost_matrix(x, x);
  for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(self(i, i)) <= 1e-15);
  CHECK(cost_matrix(x, scale(x, -1.0))(2, 2) == doctest::Approx(2.0));
  for (int t = 0; t < 50; ++t) {
    const Matrix c = cost_matrix(random_matrix(5, 3, rng), random_matrix(7, 3, rng));
    for (double v : c.values()) CHECK((v >= 0.0 && v <= 2.0));
  }
}

TEST_CASE("sinkhorn on a zero cost is the outer product") {
  const TransportPlan p = sinkhorn_uniform(Matrix(4, 4, 0.0), {});
  for (double v : p.coupling.values()) CHECK(std::abs(v - 1.0 / 16.0) <= 1e-12);
  CHECK(p.wd == 0.0);
  const TransportPlan q = sinkhorn(Matrix(2, 3, 0.0), {0.25, 0.75}, {0.5, 0.25, 0.25}, {});
  CHECK(std::abs(q.coupling(1, 0) - 0.375) <= 1e-12);
}

TEST_CASE("sinkhorn selects the diagonal permutation") {
  SinkhornOptions o;
  o.epsilon = 0.01;
  o.max_iter = 2000;
  const TransportPlan p = sinkhorn_uniform(Matrix::from_rows({{0, 1}, {1, 0}}), o);
  CHECK(p.coupling(0, 0) == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(p.coupling(0, 1) <= 1e-6);
  CHECK(p.wd <= 0.01);
}

TEST_CASE("sinkhorn approaches the permutation optimum") {
  Rng rng(2);
  SinkhornOptions o;
  o.epsilon = 0.01;
  o.max_iter = 5000;
  for (int t = 0; t < 20; ++t) {
    const Matrix c = random_matrix(4, 4, rng, 0.0, 1.0);
    const TransportPlan p = sinkhorn_uniform(c, o);
    CHECK(std::abs(p.wd - permutation_oracle(c)) <= 0.05);
  }
}

TEST_CASE("sinkhorn invariants and diagnostics") {
  Rng rng(3);
  for (int t = 0; t < 30; ++t) {
    const Matrix c = random_matrix(6, 5, rng, 0.0, 2.0);
    const TransportPlan p = sinkhorn_uniform(c, {});
    for (double v : p.coupling.values()) CHECK(v >= 0.0);
    CHECK(p.wd >= 0.0);
    if (p.converged) CHECK(p.marginal_violation <= 1e-6);
    CHECK(p.marginal_violation == doctest::Approx(marginal_violation(p.coupling, p.u, p.v)));
    CHECK(p.violation_history.size() == static_cast<std::size_t>(p.iterations));
    for (std::size_t i = 1; i < p.violation_history.size(); ++i)
      CHECK(p.violation_history[i] <= p.violation_history[i - 1] + 1e-15);
  }
  std::ostringstream csv;
  write_violation_csv(csv, sinkhorn_uniform(random_matrix(3, 3, rng, 0.0, 1.0), {}));
  CHECK(csv.str().rfind("iteration,violation\n1,", 0) == 0);
}

TEST_CASE("entropic cost decreases toward the LP value as epsilon shrinks") {
  int violations = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const Matrix c = random_matrix(5, 5, rng, 0.0, 1.0);
    SinkhornOptions lo, hi;
    lo.epsilon = 0.05;
    hi.epsilon = 0.5;
    lo.max_iter = hi.max_iter = 5000;
    lo.tol = hi.tol = 1e-10;
    if (sinkhorn_uniform(c, lo).wd > sinkhorn_uniform(c, hi).wd + 1e-9) ++violations;
  }
  CHECK(violations == 0);
}

TEST_CASE("sinkhorn validates inputs") {
  SinkhornOptions bad;
  bad.epsilon = 0.0;
  CHECK_THROWS_AS(sinkhorn_uniform(Matrix(2, 2, 0.5), bad), ConfigError);
  CHECK_THROWS_AS(sinkhorn(Matrix(2, 2, 0.5), {0.5, 0.4}, {0.5, 0.5}, {}), ConfigError);
  CHECK_THROWS_AS(sinkhorn(Matrix(2, 2, -1.0), {0.5, 0.5}, {0.5, 0.5}, {}), ConfigError);
  CHECK_THROWS_AS(sinkhorn(Matrix(2, 2, 0.5), {0.5, 0.5, 0.0}, {0.5, 0.5}, {}), DimensionError);
}

TEST_CASE("transport fusion with fixed plans") {
  Rng rng(4);
  const std::size_t c2 = 4, d = 8;
  const EncoderParams enc_phy = make_encoder("p", d, 8, 2, 1, rng);
  const EncoderParams enc_v = make_encoder("v", d, 8, 2, 1, rng);
  const Matrix x_phy = random_matrix(c2, d, rng), x_v = random_matrix(c2, d, rng);

  TransportPlan uniform;
  uniform.coupling = Matrix(c2, c2, 1.0 / static_cast<double>(c2 * c2));
  OthmCache cache;
  const Matrix fused = othm_fuse(x_phy, x_v, uniform, enc_phy, enc_v, false, &cache);
  CHECK(fused.rows() == 2 * c2);
  // Literal form: every transported row is the mean token scaled by 1/n.
  Matrix mean = scale(column_sums(x_phy), 1.0 / static_cast<double>(c2 * c2));
  const Matrix expect_top = transformer_encode(vstack(std::vector<Matrix>(c2, mean)), enc_phy);
  CHECK(max_abs_diff(slice_rows(fused, 0, c2), expect_top) <= 1e-12);
  CHECK(max_abs_diff(slice_rows(fused, c2, c2), transformer_encode(x_v, enc_v)) <= 1e-12);

  TransportPlan diagonal;
  diagonal.coupling = scale(Matrix::identity(c2), 1.0 / static_cast<double>(c2));
  const Matrix literal = othm_fuse(x_phy, x_v, diagonal, enc_phy, enc_v, false);
  CHECK(max_abs_diff(slice_rows(literal, 0, c2),
                     transformer_encode(scale(x_phy, 1.0 / static_cast<double>(c2)), enc_phy)) <=
        1e-12);
  const Matrix rescaled = othm_fuse(x_phy, x_v, diagonal, enc_phy, enc_v, true);
  CHECK(max_abs_diff(slice_rows(rescaled, 0, c2), transformer_encode(x_phy, enc_phy)) <= 1e-12);

  for (std::size_t c : {2u, 4u, 8u}) {
    const Matrix a = random_matrix(2 * c, d, rng), b = random_matrix(2 * c, d, rng);
    const TransportPlan p = sinkhorn_uniform(cost_matrix(a, b), {});
    CHECK(othm_fuse(a, b, p, enc_phy, enc_v, true).rows() == 4 * c);
  }
}

TEST_CASE("transport fusion gradients with a detached plan") {
  Rng rng(5);
  const std::size_t n = 4, d = 8;
  EncoderParams enc_phy = make_encoder("p", d, 8, 2, 1, rng);
  EncoderParams enc_v = make_encoder("v", d, 8, 2, 1, rng);
  Parameter x_phy("x_phy", random_matrix(n, d, rng)), x_v("x_v", random_matrix(n, d, rng));
  const TransportPlan plan = sinkhorn_uniform(cost_matrix(x_phy.value, x_v.value), {});
  const Matrix w = random_matrix(2 * n, d, rng);
  ParameterList params{&x_phy, &x_v};
  enc_phy.collect(params);
  enc_v.collect(params);
  auto loss = [&](bool with_grad) {
    OthmCache cache;
    const Matrix y = othm_fuse(x_phy.value, x_v.value, plan, enc_phy, enc_v, true, &cache);
    if (with_grad) {
      OthmGrads g = othm_backward(cache, w, enc_phy, enc_v);
      x_phy.grad = g.d_phy;
      x_v.grad = g.d_v;
    }
    return frobenius_dot(y, w);
  };
  CHECK(grad_check(loss, params, 1e-5).max_relative_error <= 1e-4);
}
