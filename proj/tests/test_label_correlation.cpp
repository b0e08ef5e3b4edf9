#include <doctest.h>

#include <cmath>
#include <sstream>

#include "helo/error.hpp"
#include "helo/label_correlation.hpp"

using namespace helo;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  Matrix m(r, c);
  for (double& x : m.values()) x = rng.uniform(-1.0, 1.0);
  return m;
}

EmotionDistribution random_distribution(std::size_t l, Rng& rng) {
  EmotionDistribution d;
  double s = 0.0;
  for (std::size_t i = 0; i < l; ++i) {
    d.probs.push_back(rng.uniform(0.0, 1.0));
    s += d.probs.back();
  }
  for (double& p : d.probs) p /= s;
  return d;
}

}  // namespace

TEST_CASE("correlation matrix") {
  const auto id = correlation_matrix(Matrix::identity(3));
  CHECK(id.values == Matrix::identity(3));
  const auto col = correlation_matrix(Matrix::from_rows({{1, 2}, {2, 4}}));
  CHECK(col.values(0, 1) == doctest::Approx(1.0).epsilon(1e-15));
  Rng rng(1);
  const auto m = correlation_matrix(random_matrix(6, 5, rng));
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(std::abs(m.values(i, i) - 1.0) <= 1e-12);
    for (std::size_t j = 0; j < 6; ++j) {
      CHECK(m.values(i, j) == m.values(j, i));
      CHECK(std::abs(m.values(i, j)) <= 1.0);
    }
  }
}

TEST_CASE("batch label correlation uses label columns across the batch") {
  const std::vector<EmotionDistribution> batch{{{0.8, 0.2}}, {{0.6, 0.4}}};
  const auto m = batch_label_correlation(batch);
  const double oracle = (0.8 * 0.2 + 0.6 * 0.4) /
                        (std::sqrt(0.8 * 0.8 + 0.6 * 0.6) * std::sqrt(0.2 * 0.2 + 0.4 * 0.4));
  CHECK(m.values(0, 1) == doctest::Approx(oracle).epsilon(1e-14));
  CHECK(m.values(0, 1) == doctest::Approx(0.8944).epsilon(1e-4));
  const auto single = batch_label_correlation(std::vector<EmotionDistribution>{{{0.3, 0.7}}});
  CHECK(single.values == Matrix(2, 2, 1.0));
}

TEST_CASE("cc loss") {
  const Matrix a = Matrix::identity(2), b(2, 2, 1.0);
  CHECK(cc_loss(a, a) == 0.0);
  CHECK(cc_loss(a, b) == 2.0);
  Rng rng(2);
  const Matrix x = random_matrix(4, 4, rng), y = random_matrix(4, 4, rng);
  CHECK(cc_loss(x, y) == cc_loss(y, x));
  CHECK(cc_loss(x, y) >= 0.0);
  CHECK(max_abs_diff(cc_loss_gradient(x, y), scale(subtract(x, y), 2.0)) == 0.0);
}

TEST_CASE("kl divergence and overall loss") {
  const EmotionDistribution t{{0.75, 0.25}}, p{{0.5, 0.5}};
  CHECK(kld_loss(p, t) == doctest::Approx(0.75 * std::log(1.5) + 0.25 * std::log(0.5)).epsilon(1e-7));
  CHECK(kld_loss(p, t) == doctest::Approx(0.13081).epsilon(1e-4));
  CHECK(kld_loss(t, t) == 0.0);
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const auto a = random_distribution(7, rng), b = random_distribution(7, rng);
    CHECK(kld_loss(a, b) >= -1e-12);
  }
  CHECK(overall_loss(0.1, 0.2, 1.0) == doctest::Approx(0.3));
  CHECK(overall_loss(0.42, 0.0, 3.0) == 0.42);
  CHECK(overall_loss(0.13081, 2.0, 0.5) == doctest::Approx(1.13081).epsilon(1e-12));
  CHECK_THROWS_AS(overall_loss(0.1, 0.2, -1.0), ConfigError);
  // Exact zeros in the truth are smoothed rather than producing infinities.
  CHECK(std::isfinite(kld_loss(EmotionDistribution{{1.0, 0.0}}, EmotionDistribution{{0.0, 1.0}})));
}

TEST_CASE("lcdca attention") {
  Rng rng(4);
  const std::size_t l = 3, d = 4;
  LcdcaParams p = make_lcdca(d, rng);
  const Matrix q = random_matrix(l, d, rng), tokens = random_matrix(l, d, rng);

  // With a zero bias this is plain single-head scaled dot-product attention.
  const Matrix out = lcdca_projected(q, tokens, Matrix(l, l, 0.0), p);
  const Matrix k = matmul(tokens, p.wk.value), v = matmul(tokens, p.wv.value);
  const Matrix logits = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(d)));
  CHECK(max_abs_diff(out, matmul(softmax_rows(logits), v)) <= 1e-15);

  // A +50·sqrt(d) bias entry dominates an otherwise zero logit row.
  Matrix bias(l, l, 0.0);
  bias(1, 2) = 50.0 * std::sqrt(static_cast<double>(d));
  LcdcaCache cache;
  (void)lcdca_projected(Matrix(l, d, 0.0), tokens, bias, p, &cache);
  CHECK(cache.attention.probs[0](1, 2) >= 1.0 - 1e-20);
  for (std::size_t r = 0; r < l; ++r) {
    double s = 0.0;
    for (double x : cache.attention.probs[0].row(r)) s += x;
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }

  const LabelEmbedding emb = make_label_embedding(l, d, rng);
  CHECK_THROWS_AS(lcdca(emb, random_matrix(l + 1, d, rng), correlation_matrix(emb.x_l.value), p),
                  ConfigError);
}

TEST_CASE("prediction head") {
  Rng rng(5);
  PredictionHeadParams head = make_prediction_head(8, 16, 8, 10, rng);
  CHECK(head.labels() == 10);
  for (int t = 0; t < 100; ++t) {
    PredictionHeadParams h = make_prediction_head(8, 16, 8, 10, rng);
    const auto p = predict_head(random_matrix(10, 8, rng), h);
    CHECK(p.size() == 10);
    CHECK(p.valid(1e-9));
  }
  for (Parameter* p : {&head.w1, &head.b1, &head.w2, &head.b2, &head.w3, &head.b3}) p->value.fill(0.0);
  const auto u = predict_head(random_matrix(10, 8, rng), head);
  for (double x : u.probs) CHECK(x == doctest::Approx(0.1).epsilon(1e-15));
}

TEST_CASE("label branch gradients including the correlation path") {
  Rng rng(6);
  const std::size_t l = 4, d = 6, n = 5;
  LabelEmbedding emb = make_label_embedding(l, d, rng);
  TokenPool pool = make_token_pool(l, n, rng);
  LcdcaParams lc = make_lcdca(d, rng);
  PredictionHeadParams head = make_prediction_head(d, 7, 5, l, rng);
  Parameter x_m("x_m", random_matrix(n, d, rng));
  const EmotionDistribution truth = random_distribution(l, rng);
  const Matrix m_gt = correlation_matrix(random_matrix(l, 3, rng)).values;
  ParameterList params{&emb.x_l, &pool.weight, &x_m};
  lc.collect(params);
  head.collect(params);
  auto loss = [&](bool with_grad) {
    const Matrix& xl = emb.x_l.value;
    const Matrix q = matmul(xl, lc.wq.value);
    const Matrix m_l = correlation_matrix(xl).values;
    const Matrix pooled = pool_tokens(x_m.value, pool);
    LcdcaCache lcache;
    const Matrix x_o = lcdca_projected(q, pooled, m_l, lc, &lcache);
    HeadCache hcache;
    const auto pred = predict_head(x_o, head, &hcache);
    const double value = overall_loss(kld_loss(pred, truth), cc_loss(m_l, m_gt), 1.0);
    if (with_grad) {
      const Matrix d_xo = predict_head_backward(hcache, kld_loss_gradient(pred, truth), head);
      LcdcaGrads g = lcdca_backward(lcache, d_xo, lc);
      x_m.grad = pool_tokens_backward(x_m.value, g.d_tokens, pool);
      axpy(1.0, cc_loss_gradient(m_l, m_gt), g.d_correlation);
      matmul_tn_accumulate(xl, g.d_q_label, lc.wq.grad);
      Matrix d_xl = matmul_nt(g.d_q_label, lc.wq.value);
      cosine_rows_backward(xl, xl, g.d_correlation, d_xl, d_xl);
      axpy(1.0, d_xl, emb.x_l.grad);
    }
    return value;
  };
  CHECK(grad_check(loss, params, 1e-5).max_relative_error <= 1e-4);
}

TEST_CASE("correlation csv export") {
  std::ostringstream out;
  const std::vector<std::string> names{"a", "b"};
  write_correlation_csv(out, Matrix::from_rows({{1, 0.5}, {0.5, 1}}), names);
  CHECK(out.str() == "label,a,b\na,1,0.5\nb,0.5,1\n");
}
