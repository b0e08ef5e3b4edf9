#include <doctest.h>

#include <cmath>

#include "helo/attention.hpp"
#include "helo/error.hpp"

using namespace helo;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& x : m.values()) x = rng.uniform(-1.0, 1.0);
  return m;
}

CrossAttentionParams identity_params(std::size_t d, std::size_t heads) {
  Rng rng(0);
  CrossAttentionParams p = make_cross_attention("t", d, heads, 1, rng);
  p.wq.value = Matrix::identity(d);
  p.kv[0].wk.value = Matrix::identity(d);
  p.kv[0].wv.value = Matrix::identity(d);
  p.wo.value = Matrix::identity(d);
  return p;
}

}  // namespace

TEST_CASE("heads must divide d") {
  Rng rng(1);
  CHECK_THROWS_AS(make_cross_attention("x", 10, 4, 1, rng), ConfigError);
  CHECK_THROWS_AS(make_encoder("x", 10, 8, 3, 1, rng), ConfigError);
}

TEST_CASE("token projection shapes and linearity") {
  Rng rng(2);
  const TokenProjection eeg = make_projection("eeg", 6, 15, 4, 128, rng);
  std::vector<double> raw(90);
  for (double& x : raw) x = rng.normal();
  const auto tokens = project_modality("eeg", raw, eeg);
  CHECK(tokens.tokens.rows() == 4);
  CHECK(tokens.tokens.cols() == 128);
  CHECK(tokens.modality == "eeg");

  TokenProjection id = make_projection("id", 3, 5, 3, 5, rng);
  id.mix.value = Matrix::identity(3);
  id.weight.value = Matrix::identity(5);
  id.bias.value.fill(0.0);
  std::vector<double> x(15);
  for (double& v : x) v = rng.normal();
  const auto same = project_modality("id", x, id);
  for (std::size_t i = 0; i < 15; ++i) CHECK(same.tokens.values()[i] == x[i]);

  id.weight.value = random_matrix(5, 5, rng);
  const auto zero = project_modality("id", std::vector<double>(15, 0.0), id);
  CHECK(max_abs(zero.tokens) == 0.0);
  CHECK_THROWS_AS(project_modality("id", std::vector<double>(14, 0.0), id), DimensionError);
}

TEST_CASE("saturated cross attention selects a single key") {
  const std::size_t d = 4;
  CrossAttentionParams p = identity_params(d, 1);
  // Scale the query so the matching logit dominates by a factor of 50.
  Matrix q = Matrix::from_rows({{0, 50.0 * std::sqrt(4.0), 0, 0}});
  Matrix kv = Matrix::from_rows({{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}});
  // One query row needs a matching residual row count, so repeat the query.
  const Matrix q3 = vstack(std::vector<Matrix>{q, q, q});
  const Matrix out = cross_attend_projected(q3, kv, p, 0);
  const Matrix residual = layer_norm(kv, p.ln_gamma.value, p.ln_beta.value, kLayerNormEps);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < d; ++c) {
      CHECK(std::abs(out(r, c) - (kv(1, c) + residual(r, c))) <= 1e-6);
    }
  }
}

TEST_CASE("identical value rows pass through attention") {
  Rng rng(3);
  const std::size_t d = 8;
  CrossAttentionParams p = make_cross_attention("t", d, 2, 1, rng);
  p.wo.value = Matrix::identity(d);
  p.ln_gamma.value.fill(0.0);
  p.ln_beta.value.fill(0.0);
  // kv_src rows identical → V rows identical regardless of W_V.
  Matrix row = random_matrix(1, d, rng);
  const Matrix kv = vstack(std::vector<Matrix>{row, row, row});
  const Matrix v = matmul(row, p.kv[0].wv.value);
  const Matrix out = cross_attend_projected(random_matrix(3, d, rng), kv, p, 0);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < d; ++c) CHECK(out(r, c) == doctest::Approx(v(0, c)).epsilon(1e-12));
}

TEST_CASE("attention is invariant to joint key/value permutation") {
  Rng rng(4);
  const Matrix q = random_matrix(3, 8, rng), k = random_matrix(5, 8, rng), v = random_matrix(5, 8, rng);
  AttentionCache cache;
  const Matrix out = multi_head_attention(q, k, v, 2, 0.5, nullptr, &cache);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  Matrix kp(5, 8), vp(5, 8);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t c = 0; c < 8; ++c) {
      kp(i, c) = k(perm[i], c);
      vp(i, c) = v(perm[i], c);
    }
  CHECK(max_abs_diff(out, multi_head_attention(q, kp, vp, 2, 0.5, nullptr)) <= 1e-9);
  for (const auto& pr : cache.probs) {
    for (std::size_t r = 0; r < pr.rows(); ++r) {
      double s = 0.0;
      for (double x : pr.row(r)) s += x;
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("per-head scaling keeps logits order one") {
  // Unit-variance Q, K with per-head width 32: scaled logits have std ≈ 1.
  int inside = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const std::size_t dh = 32;
    Matrix q(16, dh), k(16, dh);
    for (double& x : q.values()) x = rng.normal();
    for (double& x : k.values()) x = rng.normal();
    const Matrix logits = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(dh)));
    double s = 0.0, s2 = 0.0;
    for (double x : logits.values()) {
      s += x;
      s2 += x * x;
    }
    const double n = static_cast<double>(logits.size());
    const double sd = std::sqrt(s2 / n - (s / n) * (s / n));
    if (sd >= 0.5 && sd <= 2.0) ++inside;
  }
  CHECK(inside == 100);
}

TEST_CASE("fuse_physio stacks along tokens") {
  const Matrix a = Matrix::from_rows({{1, 2, 3}, {4, 5, 6}});
  const Matrix b = Matrix::from_rows({{7, 8, 9}, {10, 11, 12}});
  const Matrix f = fuse_physio(a, b);
  CHECK(f == Matrix::from_rows({{1, 2, 3}, {4, 5, 6}, {7, 8, 9}, {10, 11, 12}}));
  const Matrix same = fuse_physio(a, a);
  CHECK(slice_rows(same, 0, 2) == slice_rows(same, 2, 2));
  Rng rng(5);
  for (std::size_t c = 1; c <= 8; ++c) CHECK(fuse_physio(random_matrix(c, 3, rng), random_matrix(c, 3, rng)).rows() == 2 * c);
}

TEST_CASE("encoder preserves shape and is deterministic") {
  Rng rng(6);
  for (std::size_t depth = 1; depth <= 3; ++depth) {
    const EncoderParams enc = make_encoder("e", 8, 16, 2, depth, rng);
    const Matrix x = random_matrix(5, 8, rng);
    const Matrix y = transformer_encode(x, enc);
    CHECK(y.rows() == 5);
    CHECK(y.cols() == 8);
    CHECK(y == transformer_encode(x, enc));
  }
  EncoderParams zero = make_encoder("z", 8, 16, 2, 1, rng);
  for (auto& layer : zero.layers) {
    for (Parameter* p : {&layer.wq, &layer.wk, &layer.wv, &layer.wo, &layer.w1, &layer.b1,
                         &layer.w2, &layer.b2})
      p->value.fill(0.0);
  }
  const Matrix x = random_matrix(4, 8, rng);
  CHECK(transformer_encode(x, zero) == x);
}

TEST_CASE("cross attention and encoder gradients") {
  Rng rng(7);
  const std::size_t d = 8;
  CrossAttentionParams capf = make_cross_attention("c", d, 2, 2, rng);
  EncoderParams enc = make_encoder("e", d, 6, 2, 2, rng);
  const Matrix query = random_matrix(3, d, rng);
  const std::vector<Matrix> keys{random_matrix(3, d, rng), random_matrix(3, d, rng)};
  const Matrix target = random_matrix(6, d, rng);
  ParameterList params;
  capf.collect(params);
  enc.collect(params);
  auto loss = [&](bool with_grad) {
    CapfCache cc;
    EncoderCache ec;
    const Matrix y = transformer_encode(capf_forward(query, keys, capf, &cc), enc, &ec);
    const Matrix diff = subtract(y, target);
    if (with_grad) {
      const Matrix d_phy = transformer_encode_backward(ec, scale(diff, 2.0), enc);
      (void)capf_backward(cc, d_phy, capf);
    }
    return frobenius_squared(diff);
  };
  const auto report = grad_check(loss, params, 1e-5);
  CHECK(report.max_relative_error <= 1e-4);
}

TEST_CASE("attention input gradients") {
  Rng rng(8);
  Parameter q("q", random_matrix(3, 6, rng)), k("k", random_matrix(4, 6, rng)),
      v("v", random_matrix(4, 6, rng)), bias("b", random_matrix(3, 4, rng));
  const Matrix w = random_matrix(3, 6, rng);
  auto loss = [&](bool with_grad) {
    AttentionCache cache;
    const Matrix out = multi_head_attention(q.value, k.value, v.value, 3, 0.7, &bias.value, &cache);
    if (with_grad) {
      AttentionGrads g = multi_head_attention_backward(cache, w, true);
      q.grad = g.dq;
      k.grad = g.dk;
      v.grad = g.dv;
      bias.grad = g.d_bias;
    }
    return frobenius_dot(out, w);
  };
  CHECK(grad_check(loss, {&q, &k, &v, &bias}, 1e-5).max_relative_error <= 1e-6);
}
