#pragma once

// Label-correlation-driven cross attention: learnable label embeddings, the
// learned and ground-truth label correlation matrices, the
// correlation-constrained loss, correlation-biased attention from labels onto
// fused tokens, the MLP prediction head and the KL objective.

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "helo/attention.hpp"
#include "helo/numerics.hpp"

namespace helo {

/// Additive smoothing applied before any logarithm of a distribution.
inline constexpr double kDistributionSmoothing = 1e-8;

struct EmotionDistribution {
  std::vector<double> probs;

  [[nodiscard]] std::size_t size() const { return probs.size(); }
  /// Entries >= 0 and sum within `tol` of 1.
  [[nodiscard]] bool valid(double tol = 1e-9) const;
};

/// (p + 1e-8) / (1 + l·1e-8)
std::vector<double> smooth_distribution(std::span<const double> probs);

struct CorrelationMatrix {
  Matrix values;
  bool degenerate = false;
};

/// M(i, j) = cosine(rows_i, rows_j).
CorrelationMatrix correlation_matrix(const Matrix& rows);

/// Ground-truth correlation of a batch: row i of the input to
/// correlation_matrix is label i's probability across the batch (length B).
/// A single-sample batch yields the degenerate all-ones matrix.
CorrelationMatrix batch_label_correlation(std::span<const EmotionDistribution> labels);
/// Same, from a B × l label matrix.
CorrelationMatrix batch_label_correlation(const Matrix& labels);

/// ||m_learn - m_gt||_F²
double cc_loss(const Matrix& m_learn, const Matrix& m_gt);
/// d cc_loss / d m_learn
Matrix cc_loss_gradient(const Matrix& m_learn, const Matrix& m_gt);

struct LabelEmbedding {
  Parameter x_l;  // l × d

  [[nodiscard]] std::size_t labels() const { return x_l.value.rows(); }
};

LabelEmbedding make_label_embedding(std::size_t labels, std::size_t d, Rng& rng);

/// Learned linear pooling of N fused tokens down to l tokens.
struct TokenPool {
  Parameter weight;  // l × N
};

TokenPool make_token_pool(std::size_t labels, std::size_t tokens, Rng& rng);
Matrix pool_tokens(const Matrix& x_m, const TokenPool& pool);
/// Accumulates the pool gradient and returns dL/dx_m.
Matrix pool_tokens_backward(const Matrix& x_m, const Matrix& d_pooled, TokenPool& pool);

struct LcdcaParams {
  Parameter wq;
  Parameter wk;
  Parameter wv;

  [[nodiscard]] std::size_t dim() const { return wq.value.rows(); }
  void collect(ParameterList& out) { out.insert(out.end(), {&wq, &wk, &wv}); }
};

LcdcaParams make_lcdca(std::size_t d, Rng& rng);

struct LcdcaCache {
  Matrix tokens;  // pooled fused tokens, l × d
  AttentionCache attention;
};

/// x^o = softmax((Q^L Kᵀ + M^L) / sqrt(d)) V, with Q^L supplied already
/// projected (it is shared by every sample of a batch).
Matrix lcdca_projected(const Matrix& q_label, const Matrix& tokens, const Matrix& m_learn,
                       const LcdcaParams& params, LcdcaCache* cache = nullptr);

/// Full form: projects the label embedding with W_Q first. Throws ConfigError
/// when the token count differs from the label count.
Matrix lcdca(const LabelEmbedding& x_l, const Matrix& tokens, const CorrelationMatrix& m_learn,
             const LcdcaParams& params, LcdcaCache* cache = nullptr);

struct LcdcaGrads {
  Matrix d_q_label;
  Matrix d_correlation;
  Matrix d_tokens;
};

LcdcaGrads lcdca_backward(const LcdcaCache& cache, const Matrix& d_out, LcdcaParams& params);

struct PredictionHeadParams {
  Parameter w1, b1, w2, b2, w3, b3;

  [[nodiscard]] std::size_t labels() const { return w3.value.cols(); }
  void collect(ParameterList& out) { out.insert(out.end(), {&w1, &b1, &w2, &b2, &w3, &b3}); }
};

PredictionHeadParams make_prediction_head(std::size_t d, std::size_t hidden1, std::size_t hidden2,
                                          std::size_t labels, Rng& rng);

struct HeadCache {
  std::size_t rows = 0;
  Matrix pooled, pre1, act1, pre2, act2, probs;
};

/// Row-mean pooling, then affine→GELU→affine→GELU→affine→softmax.
EmotionDistribution predict_head(const Matrix& x_o, const PredictionHeadParams& params,
                                 HeadCache* cache = nullptr);
/// Returns dL/dx_o given dL/dprobs.
Matrix predict_head_backward(const HeadCache& cache, std::span<const double> d_probs,
                             PredictionHeadParams& params);

/// KL(truth || pred) after smoothing both sides.
double kld_loss(const EmotionDistribution& pred, const EmotionDistribution& truth);
/// d kld_loss / d pred.probs (through the smoothing).
std::vector<double> kld_loss_gradient(const EmotionDistribution& pred,
                                      const EmotionDistribution& truth);

/// kld + lambda_cc · cc. Throws ConfigError for negative lambda_cc.
double overall_loss(double kld, double cc, double lambda_cc);

/// l × l matrix as CSV with a header row and a leading label column.
void write_correlation_csv(std::ostream& out, const Matrix& m,
                           std::span<const std::string> label_names);

}  // namespace helo
