#include "helo/label_correlation.hpp"

#include <cmath>
#include <ostream>

#include "helo/error.hpp"

namespace helo {

bool EmotionDistribution::valid(double tol) const {
  if (probs.empty()) return false;
  double total = 0.0;
  for (double p : probs) {
    if (!std::isfinite(p) || p < 0.0) return false;
    total += p;
  }
  return std::abs(total - 1.0) <= tol;
}

std::vector<double> smooth_distribution(std::span<const double> probs) {
  const double denom = 1.0 + static_cast<double>(probs.size()) * kDistributionSmoothing;
  std::vector<double> out(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) out[i] = (probs[i] + kDistributionSmoothing) / denom;
  return out;
}

CorrelationMatrix correlation_matrix(const Matrix& rows) {
  if (rows.rows() == 0) throw DimensionError("correlation_matrix: needs at least one row");
  CosineResult r = cosine_rows(rows, rows);
  return {std::move(r.similarity), r.degenerate};
}

CorrelationMatrix batch_label_correlation(const Matrix& labels) {
  return correlation_matrix(transpose(labels));
}

CorrelationMatrix batch_label_correlation(std::span<const EmotionDistribution> labels) {
  if (labels.empty()) throw EmptySetError("batch_label_correlation: empty batch");
  const std::size_t l = labels.front().size();
  Matrix m(labels.size(), l);
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b].size() != l) throw DimensionError("batch_label_correlation: ragged labels");
    for (std::size_t j = 0; j < l; ++j) m(b, j) = labels[b].probs[j];
  }
  return batch_label_correlation(m);
}

double cc_loss(const Matrix& m_learn, const Matrix& m_gt) {
  return frobenius_squared(subtract(m_learn, m_gt));
}

Matrix cc_loss_gradient(const Matrix& m_learn, const Matrix& m_gt) {
  return scale(subtract(m_learn, m_gt), 2.0);
}

LabelEmbedding make_label_embedding(std::size_t labels, std::size_t d, Rng& rng) {
  return {xavier_parameter("label.embedding", labels, d, rng)};
}

TokenPool make_token_pool(std::size_t labels, std::size_t tokens, Rng& rng) {
  return {xavier_parameter("label.token_pool", labels, tokens, rng)};
}

Matrix pool_tokens(const Matrix& x_m, const TokenPool& pool) {
  return matmul(pool.weight.value, x_m);
}

Matrix pool_tokens_backward(const Matrix& x_m, const Matrix& d_pooled, TokenPool& pool) {
  pool.weight.grad = add(pool.weight.grad, matmul_nt(d_pooled, x_m));
  return matmul_tn(pool.weight.value, d_pooled);
}

LcdcaParams make_lcdca(std::size_t d, Rng& rng) {
  return {xavier_parameter("lcdca.wq", d, d, rng), xavier_parameter("lcdca.wk", d, d, rng),
          xavier_parameter("lcdca.wv", d, d, rng)};
}

Matrix lcdca_projected(const Matrix& q_label, const Matrix& tokens, const Matrix& m_learn,
                       const LcdcaParams& params, LcdcaCache* cache) {
  if (tokens.rows() != q_label.rows()) {
    throw ConfigError("lcdca: " + std::to_string(tokens.rows()) +
                      " key tokens after pooling, but the label count is " +
                      std::to_string(q_label.rows()));
  }
  require_shape(tokens.cols() == params.dim(), "lcdca(tokens)", tokens, params.wk.value);
  require_shape(m_learn.rows() == q_label.rows() && m_learn.cols() == tokens.rows(),
                "lcdca(correlation)", m_learn, q_label);
  const Matrix k = matmul(tokens, params.wk.value);
  const Matrix v = matmul(tokens, params.wv.value);
  const double s = 1.0 / std::sqrt(static_cast<double>(params.dim()));
  Matrix out = multi_head_attention(q_label, k, v, 1, s, &m_learn,
                                    cache ? &cache->attention : nullptr);
  if (cache) cache->tokens = tokens;
  return out;
}

Matrix lcdca(const LabelEmbedding& x_l, const Matrix& tokens, const CorrelationMatrix& m_learn,
             const LcdcaParams& params, LcdcaCache* cache) {
  require_shape(x_l.x_l.value.cols() == params.dim(), "lcdca(embedding)", x_l.x_l.value,
                params.wq.value);
  const Matrix q = matmul(x_l.x_l.value, params.wq.value);
  return lcdca_projected(q, tokens, m_learn.values, params, cache);
}

LcdcaGrads lcdca_backward(const LcdcaCache& cache, const Matrix& d_out, LcdcaParams& params) {
  AttentionGrads ag = multi_head_attention_backward(cache.attention, d_out, true);
  matmul_tn_accumulate(cache.tokens, ag.dk, params.wk.grad);
  matmul_tn_accumulate(cache.tokens, ag.dv, params.wv.grad);
  Matrix d_tokens = add(matmul_nt(ag.dk, params.wk.value), matmul_nt(ag.dv, params.wv.value));
  return {std::move(ag.dq), std::move(ag.d_bias), std::move(d_tokens)};
}

PredictionHeadParams make_prediction_head(std::size_t d, std::size_t hidden1, std::size_t hidden2,
                                          std::size_t labels, Rng& rng) {
  if (d == 0 || hidden1 == 0 || hidden2 == 0 || labels == 0) {
    throw ConfigError("prediction head widths must be positive");
  }
  return {xavier_parameter("head.w1", d, hidden1, rng),
          constant_parameter("head.b1", 1, hidden1, 0.0),
          xavier_parameter("head.w2", hidden1, hidden2, rng),
          constant_parameter("head.b2", 1, hidden2, 0.0),
          xavier_parameter("head.w3", hidden2, labels, rng),
          constant_parameter("head.b3", 1, labels, 0.0)};
}

EmotionDistribution predict_head(const Matrix& x_o, const PredictionHeadParams& params,
                                 HeadCache* cache) {
  require_shape(x_o.cols() == params.w1.value.rows(), "predict_head", x_o, params.w1.value);
  HeadCache local;
  HeadCache& c = cache ? *cache : local;
  c.rows = x_o.rows();
  c.pooled = row_mean(x_o);
  c.pre1 = add_row_bias(matmul(c.pooled, params.w1.value), params.b1.value);
  c.act1 = gelu(c.pre1);
  c.pre2 = add_row_bias(matmul(c.act1, params.w2.value), params.b2.value);
  c.act2 = gelu(c.pre2);
  c.probs = softmax_rows(add_row_bias(matmul(c.act2, params.w3.value), params.b3.value));
  return {std::vector<double>(c.probs.values().begin(), c.probs.values().end())};
}

Matrix predict_head_backward(const HeadCache& cache, std::span<const double> d_probs,
                             PredictionHeadParams& params) {
  const Matrix d_logits = softmax_rows_backward(cache.probs, Matrix::row_vector(d_probs));
  matmul_tn_accumulate(cache.act2, d_logits, params.w3.grad);
  axpy(1.0, d_logits, params.b3.grad);
  const Matrix d_pre2 = gelu_backward(cache.pre2, matmul_nt(d_logits, params.w3.value));
  matmul_tn_accumulate(cache.act1, d_pre2, params.w2.grad);
  axpy(1.0, d_pre2, params.b2.grad);
  const Matrix d_pre1 = gelu_backward(cache.pre1, matmul_nt(d_pre2, params.w2.value));
  matmul_tn_accumulate(cache.pooled, d_pre1, params.w1.grad);
  axpy(1.0, d_pre1, params.b1.grad);
  const Matrix d_pooled = matmul_nt(d_pre1, params.w1.value);
  Matrix d_x(cache.rows, d_pooled.cols());
  const double inv = 1.0 / static_cast<double>(cache.rows);
  for (std::size_t i = 0; i < cache.rows; ++i)
    for (std::size_t j = 0; j < d_pooled.cols(); ++j) d_x(i, j) = d_pooled(0, j) * inv;
  return d_x;
}

double kld_loss(const EmotionDistribution& pred, const EmotionDistribution& truth) {
  if (pred.size() != truth.size()) {
    throw DimensionError("kld_loss: lengths " + std::to_string(pred.size()) + " and " +
                         std::to_string(truth.size()));
  }
  const auto p = smooth_distribution(pred.probs);
  const auto t = smooth_distribution(truth.probs);
  double acc = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) acc += t[j] * std::log(t[j] / p[j]);
  return acc;
}

std::vector<double> kld_loss_gradient(const EmotionDistribution& pred,
                                      const EmotionDistribution& truth) {
  if (pred.size() != truth.size()) throw DimensionError("kld_loss_gradient: length mismatch");
  const auto p = smooth_distribution(pred.probs);
  const auto t = smooth_distribution(truth.probs);
  const double denom = 1.0 + static_cast<double>(p.size()) * kDistributionSmoothing;
  std::vector<double> g(p.size());
  for (std::size_t j = 0; j < p.size(); ++j) g[j] = -t[j] / p[j] / denom;
  return g;
}

double overall_loss(double kld, double cc, double lambda_cc) {
  if (lambda_cc < 0.0) throw ConfigError("overall_loss: lambda_cc must be non-negative");
  return kld + lambda_cc * cc;
}

void write_correlation_csv(std::ostream& out, const Matrix& m,
                           std::span<const std::string> label_names) {
  if (label_names.size() != m.rows() || m.rows() != m.cols()) {
    throw DimensionError("write_correlation_csv: " + std::to_string(label_names.size()) +
                         " names for a " + m.shape_string() + " matrix");
  }
  out << "label";
  for (const auto& n : label_names) out << ',' << n;
  out << '\n';
  out.precision(17);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    out << label_names[i];
    for (std::size_t j = 0; j < m.cols(); ++j) out << ',' << m(i, j);
    out << '\n';
  }
}

}  // namespace helo
