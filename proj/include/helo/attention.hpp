#pragma once

// Cross-attention physiological fusion: token projection of flat feature
// vectors, multi-head scaled dot-product attention, the query-modality-led
// cross attention with layer-normed residual, and a pre-norm transformer
// encoder. Forward functions optionally fill a cache consumed by the matching
// backward function, which accumulates into Parameter::grad.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "helo/numerics.hpp"

namespace helo {

inline constexpr double kLayerNormEps = 1e-5;

struct ModalityTokens {
  std::string modality;
  Matrix tokens;  // C × d
};

/// Maps a flat feature vector reshaped to (raw_tokens × raw_dim) onto C × d
/// tokens: mix · R · weight + bias.
struct TokenProjection {
  Parameter mix;     // C × raw_tokens
  Parameter weight;  // raw_dim × d
  Parameter bias;    // 1 × d
  std::size_t raw_tokens = 0;
  std::size_t raw_dim = 0;

  [[nodiscard]] std::size_t tokens() const { return mix.value.rows(); }
  [[nodiscard]] std::size_t dim() const { return weight.value.cols(); }
  void collect(ParameterList& out) { out.insert(out.end(), {&mix, &weight, &bias}); }
};

TokenProjection make_projection(const std::string& name, std::size_t raw_tokens,
                                std::size_t raw_dim, std::size_t tokens, std::size_t d, Rng& rng);

struct ProjectionCache {
  Matrix reshaped;  // raw_tokens × raw_dim
  Matrix mixed;     // C × raw_dim
};

ModalityTokens project_modality(const std::string& modality, std::span<const double> raw,
                                const TokenProjection& proj, ProjectionCache* cache = nullptr);
/// Inputs are data, so only parameter gradients are produced.
void project_modality_backward(const ProjectionCache& cache, const Matrix& d_tokens,
                               TokenProjection& proj);

// ------------------------------------------------------ scaled dot product

struct AttentionCache {
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, rows sum to 1
  std::size_t heads = 1;
  double scale = 1.0;
};

/// Splits q, k, v into `heads` column blocks, computes
/// softmax(scale · (q_h k_hᵀ + bias)) v_h per head and concatenates the heads
/// back to width d. `bias` (optional) must be q.rows × k.rows.
Matrix multi_head_attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads,
                            double scale, const Matrix* bias, AttentionCache* cache = nullptr);

struct AttentionGrads {
  Matrix dq, dk, dv, d_bias;
};

AttentionGrads multi_head_attention_backward(const AttentionCache& cache, const Matrix& d_out,
                                             bool want_bias_grad);

// --------------------------------------------------------- cross attention

struct KeyValueWeights {
  Parameter wk;
  Parameter wv;
};

/// One query projection shared by every key modality, per-key-modality K/V
/// projections, the head-merging W_MHA and the residual layer norm.
struct CrossAttentionParams {
  Parameter wq;
  std::vector<KeyValueWeights> kv;
  Parameter wo;
  Parameter ln_gamma;
  Parameter ln_beta;
  std::size_t heads = 1;

  [[nodiscard]] std::size_t dim() const { return wq.value.rows(); }
  void collect(ParameterList& out);
};

/// Throws ConfigError when heads does not divide d.
CrossAttentionParams make_cross_attention(const std::string& name, std::size_t d,
                                          std::size_t heads, std::size_t key_modalities, Rng& rng);

struct CrossAttentionCache {
  Matrix kv_src;
  AttentionCache attention;
  Matrix merged;  // concatenated heads, C × d
  LayerNormCache ln;
};

/// Cross attention from an already-projected query (q = query_src · W_Q):
/// concat_h(softmax(Q_h K_hᵀ / sqrt(d/h)) V_h) · W_MHA + LN(kv_src).
Matrix cross_attend_projected(const Matrix& q, const Matrix& kv_src,
                              const CrossAttentionParams& params, std::size_t branch,
                              CrossAttentionCache* cache = nullptr);

struct CrossAttentionGrads {
  Matrix d_q;
  Matrix d_kv_src;
};

CrossAttentionGrads cross_attend_projected_backward(const CrossAttentionCache& cache,
                                                    const Matrix& d_out,
                                                    CrossAttentionParams& params,
                                                    std::size_t branch);

/// Convenience for a single query/key pair: projects the query with W_Q first.
Matrix cross_attend(const ModalityTokens& query_src, const ModalityTokens& kv_src,
                    const CrossAttentionParams& params, std::size_t branch = 0,
                    CrossAttentionCache* cache = nullptr);

/// Concatenation of two cross-modal representations along the token axis.
Matrix fuse_physio(const Matrix& x_eg, const Matrix& x_ep);

struct CapfCache {
  Matrix query_src;
  std::vector<CrossAttentionCache> branches;
};

/// Query-modality-led fusion over every key modality; the branch outputs are
/// stacked along the token axis (K·C × d).
Matrix capf_forward(const Matrix& query_tokens, std::span<const Matrix> key_tokens,
                    const CrossAttentionParams& params, CapfCache* cache = nullptr);

struct CapfGrads {
  Matrix d_query;
  std::vector<Matrix> d_keys;
};

CapfGrads capf_backward(const CapfCache& cache, const Matrix& d_phy, CrossAttentionParams& params);

// ----------------------------------------------------------------- encoder

struct EncoderLayer {
  Parameter ln1_gamma, ln1_beta;
  Parameter wq, wk, wv, wo;
  Parameter ln2_gamma, ln2_beta;
  Parameter w1, b1, w2, b2;
};

struct EncoderParams {
  std::vector<EncoderLayer> layers;
  std::size_t heads = 1;

  [[nodiscard]] std::size_t depth() const { return layers.size(); }
  void collect(ParameterList& out);
};

EncoderParams make_encoder(const std::string& name, std::size_t d, std::size_t ffn,
                           std::size_t heads, std::size_t depth, Rng& rng);

struct EncoderLayerCache {
  Matrix input;
  LayerNormCache ln1;
  Matrix ln1_out;
  AttentionCache attention;
  Matrix merged;
  Matrix hidden;  // input + attention branch
  LayerNormCache ln2;
  Matrix ln2_out;
  Matrix pre_activation;
  Matrix activation;
};

struct EncoderCache {
  std::vector<EncoderLayerCache> layers;
};

/// Pre-norm blocks: h = x + MHA(LN1(x)); y = h + W2·GELU(W1·LN2(h) + b1) + b2.
Matrix transformer_encode(const Matrix& x, const EncoderParams& params,
                          EncoderCache* cache = nullptr);
/// Returns dL/dx.
Matrix transformer_encode_backward(const EncoderCache& cache, const Matrix& d_out,
                                   EncoderParams& params);

}  // namespace helo
