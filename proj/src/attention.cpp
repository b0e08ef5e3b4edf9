#include "helo/attention.hpp"

#include <cmath>

#include "helo/error.hpp"

namespace helo {

// ---------------------------------------------------------------- projection

TokenProjection make_projection(const std::string& name, std::size_t raw_tokens,
                                std::size_t raw_dim, std::size_t tokens, std::size_t d, Rng& rng) {
  if (raw_tokens == 0 || raw_dim == 0 || tokens == 0 || d == 0) {
    throw ConfigError("projection '" + name + "' needs positive token and feature sizes");
  }
  TokenProjection p;
  p.mix = xavier_parameter(name + ".mix", tokens, raw_tokens, rng);
  p.weight = xavier_parameter(name + ".weight", raw_dim, d, rng);
  p.bias = constant_parameter(name + ".bias", 1, d, 0.0);
  p.raw_tokens = raw_tokens;
  p.raw_dim = raw_dim;
  return p;
}

ModalityTokens project_modality(const std::string& modality, std::span<const double> raw,
                                const TokenProjection& proj, ProjectionCache* cache) {
  if (raw.size() != proj.raw_tokens * proj.raw_dim) {
    throw DimensionError("project_modality(" + modality + "): feature length " +
                         std::to_string(raw.size()) + " does not reshape to " +
                         std::to_string(proj.raw_tokens) + "x" + std::to_string(proj.raw_dim));
  }
  Matrix reshaped(proj.raw_tokens, proj.raw_dim, std::vector<double>(raw.begin(), raw.end()));
  Matrix mixed = matmul(proj.mix.value, reshaped);
  Matrix tokens = add_row_bias(matmul(mixed, proj.weight.value), proj.bias.value);
  if (cache) {
    cache->reshaped = std::move(reshaped);
    cache->mixed = std::move(mixed);
  }
  return {modality, std::move(tokens)};
}

void project_modality_backward(const ProjectionCache& cache, const Matrix& d_tokens,
                               TokenProjection& proj) {
  matmul_tn_accumulate(cache.mixed, d_tokens, proj.weight.grad);
  axpy(1.0, column_sums(d_tokens), proj.bias.grad);
  const Matrix d_mixed = matmul_nt(d_tokens, proj.weight.value);
  proj.mix.grad = add(proj.mix.grad, matmul_nt(d_mixed, cache.reshaped));
}

// ----------------------------------------------------------------- attention

Matrix multi_head_attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t heads,
                            double scale, const Matrix* bias, AttentionCache* cache) {
  require_shape(q.cols() == k.cols(), "attention(q,k)", q, k);
  require_shape(k.rows() == v.rows() && v.cols() == q.cols(), "attention(k,v)", k, v);
  if (heads == 0 || q.cols() % heads != 0) {
    throw ConfigError("attention: " + std::to_string(heads) + " heads do not divide width " +
                      std::to_string(q.cols()));
  }
  if (bias) require_shape(bias->rows() == q.rows() && bias->cols() == k.rows(), "attention(bias)",
                          *bias, k);
  const std::size_t dh = q.cols() / heads;
  Matrix out(q.rows(), q.cols());
  std::vector<Matrix> probs;
  probs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Matrix qh = heads == 1 ? q : slice_cols(q, h * dh, dh);
    const Matrix kh = heads == 1 ? k : slice_cols(k, h * dh, dh);
    const Matrix vh = heads == 1 ? v : slice_cols(v, h * dh, dh);
    Matrix logits = matmul_nt(qh, kh);
    if (bias) logits = add(logits, *bias);
    for (double& x : logits.values()) x *= scale;
    Matrix p = softmax_rows(logits);
    set_cols(out, h * dh, matmul(p, vh));
    probs.push_back(std::move(p));
  }
  if (cache) {
    cache->q = q;
    cache->k = k;
    cache->v = v;
    cache->probs = std::move(probs);
    cache->heads = heads;
    cache->scale = scale;
  }
  return out;
}

AttentionGrads multi_head_attention_backward(const AttentionCache& cache, const Matrix& d_out,
                                             bool want_bias_grad) {
  const std::size_t heads = cache.heads;
  const std::size_t dh = cache.q.cols() / heads;
  AttentionGrads g{Matrix(cache.q.rows(), cache.q.cols()), Matrix(cache.k.rows(), cache.k.cols()),
                   Matrix(cache.v.rows(), cache.v.cols()),
                   want_bias_grad ? Matrix(cache.q.rows(), cache.k.rows()) : Matrix()};
  for (std::size_t h = 0; h < heads; ++h) {
    const Matrix qh = heads == 1 ? cache.q : slice_cols(cache.q, h * dh, dh);
    const Matrix kh = heads == 1 ? cache.k : slice_cols(cache.k, h * dh, dh);
    const Matrix vh = heads == 1 ? cache.v : slice_cols(cache.v, h * dh, dh);
    const Matrix doh = heads == 1 ? d_out : slice_cols(d_out, h * dh, dh);
    const Matrix& p = cache.probs[h];
    const Matrix d_p = matmul_nt(doh, vh);
    set_cols(g.dv, h * dh, matmul_tn(p, doh));
    Matrix d_z = softmax_rows_backward(p, d_p);
    for (double& x : d_z.values()) x *= cache.scale;
    set_cols(g.dq, h * dh, matmul(d_z, kh));
    set_cols(g.dk, h * dh, matmul_tn(d_z, qh));
    if (want_bias_grad) axpy(1.0, d_z, g.d_bias);
  }
  return g;
}

// ----------------------------------------------------------- cross attention

void CrossAttentionParams::collect(ParameterList& out) {
  out.push_back(&wq);
  for (auto& b : kv) out.insert(out.end(), {&b.wk, &b.wv});
  out.insert(out.end(), {&wo, &ln_gamma, &ln_beta});
}

CrossAttentionParams make_cross_attention(const std::string& name, std::size_t d,
                                          std::size_t heads, std::size_t key_modalities, Rng& rng) {
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("cross attention '" + name + "': heads (" + std::to_string(heads) +
                      ") must divide d (" + std::to_string(d) + ")");
  }
  CrossAttentionParams p;
  p.wq = xavier_parameter(name + ".wq", d, d, rng);
  for (std::size_t m = 0; m < key_modalities; ++m) {
    const std::string prefix = name + ".kv" + std::to_string(m);
    KeyValueWeights kv;
    kv.wk = xavier_parameter(prefix + ".wk", d, d, rng);
    kv.wv = xavier_parameter(prefix + ".wv", d, d, rng);
    p.kv.push_back(std::move(kv));
  }
  p.wo = xavier_parameter(name + ".wo", d, d, rng);
  p.ln_gamma = constant_parameter(name + ".ln_gamma", 1, d, 1.0);
  p.ln_beta = constant_parameter(name + ".ln_beta", 1, d, 0.0);
  p.heads = heads;
  return p;
}

Matrix cross_attend_projected(const Matrix& q, const Matrix& kv_src,
                              const CrossAttentionParams& params, std::size_t branch,
                              CrossAttentionCache* cache) {
  if (branch >= params.kv.size()) {
    throw ConfigError("cross attention has no key branch " + std::to_string(branch));
  }
  require_shape(kv_src.cols() == params.dim(), "cross_attend(kv)", kv_src, params.wq.value);
  require_shape(q.rows() == kv_src.rows(), "cross_attend(residual)", q, kv_src);
  const auto& kv = params.kv[branch];
  const Matrix k = matmul(kv_src, kv.wk.value);
  const Matrix v = matmul(kv_src, kv.wv.value);
  const double scale = 1.0 / std::sqrt(static_cast<double>(params.dim() / params.heads));
  AttentionCache* attn_cache = cache ? &cache->attention : nullptr;
  Matrix merged = multi_head_attention(q, k, v, params.heads, scale, nullptr, attn_cache);
  LayerNormCache* ln_cache = cache ? &cache->ln : nullptr;
  Matrix out = add(matmul(merged, params.wo.value),
                   layer_norm(kv_src, params.ln_gamma.value, params.ln_beta.value, kLayerNormEps,
                              ln_cache));
  if (cache) {
    cache->kv_src = kv_src;
    cache->merged = std::move(merged);
  }
  return out;
}

CrossAttentionGrads cross_attend_projected_backward(const CrossAttentionCache& cache,
                                                    const Matrix& d_out,
                                                    CrossAttentionParams& params,
                                                    std::size_t branch) {
  auto& kv = params.kv[branch];
  matmul_tn_accumulate(cache.merged, d_out, params.wo.grad);
  const Matrix d_merged = matmul_nt(d_out, params.wo.value);
  const AttentionGrads ag = multi_head_attention_backward(cache.attention, d_merged, false);
  matmul_tn_accumulate(cache.kv_src, ag.dk, kv.wk.grad);
  matmul_tn_accumulate(cache.kv_src, ag.dv, kv.wv.grad);
  Matrix d_kv = add(matmul_nt(ag.dk, kv.wk.value), matmul_nt(ag.dv, kv.wv.value));
  d_kv = add(d_kv, layer_norm_backward(cache.ln, params.ln_gamma.value, d_out, params.ln_gamma.grad,
                                       params.ln_beta.grad));
  return {ag.dq, std::move(d_kv)};
}

Matrix cross_attend(const ModalityTokens& query_src, const ModalityTokens& kv_src,
                    const CrossAttentionParams& params, std::size_t branch,
                    CrossAttentionCache* cache) {
  require_shape(query_src.tokens.cols() == params.dim(), "cross_attend(query)", query_src.tokens,
                params.wq.value);
  const Matrix q = matmul(query_src.tokens, params.wq.value);
  return cross_attend_projected(q, kv_src.tokens, params, branch, cache);
}

Matrix fuse_physio(const Matrix& x_eg, const Matrix& x_ep) {
  require_shape(x_eg.cols() == x_ep.cols(), "fuse_physio", x_eg, x_ep);
  const Matrix parts[] = {x_eg, x_ep};
  return vstack(parts);
}

Matrix capf_forward(const Matrix& query_tokens, std::span<const Matrix> key_tokens,
                    const CrossAttentionParams& params, CapfCache* cache) {
  if (key_tokens.size() != params.kv.size()) {
    throw ConfigError("capf: " + std::to_string(key_tokens.size()) + " key modalities but " +
                      std::to_string(params.kv.size()) + " key projections");
  }
  require_shape(query_tokens.cols() == params.dim(), "capf(query)", query_tokens, params.wq.value);
  const Matrix q = matmul(query_tokens, params.wq.value);
  std::vector<Matrix> outputs;
  outputs.reserve(key_tokens.size());
  if (cache) {
    cache->query_src = query_tokens;
    cache->branches.assign(key_tokens.size(), {});
  }
  for (std::size_t b = 0; b < key_tokens.size(); ++b) {
    outputs.push_back(cross_attend_projected(q, key_tokens[b], params, b,
                                             cache ? &cache->branches[b] : nullptr));
  }
  return vstack(outputs);
}

CapfGrads capf_backward(const CapfCache& cache, const Matrix& d_phy, CrossAttentionParams& params) {
  const std::size_t tokens = cache.query_src.rows();
  Matrix d_q(tokens, params.dim());
  CapfGrads grads;
  for (std::size_t b = 0; b < cache.branches.size(); ++b) {
    const Matrix d_out = slice_rows(d_phy, b * tokens, tokens);
    CrossAttentionGrads g = cross_attend_projected_backward(cache.branches[b], d_out, params, b);
    axpy(1.0, g.d_q, d_q);
    grads.d_keys.push_back(std::move(g.d_kv_src));
  }
  matmul_tn_accumulate(cache.query_src, d_q, params.wq.grad);
  grads.d_query = matmul_nt(d_q, params.wq.value);
  return grads;
}

// ------------------------------------------------------------------- encoder

void EncoderParams::collect(ParameterList& out) {
  for (auto& l : layers) {
    out.insert(out.end(), {&l.ln1_gamma, &l.ln1_beta, &l.wq, &l.wk, &l.wv, &l.wo, &l.ln2_gamma,
                           &l.ln2_beta, &l.w1, &l.b1, &l.w2, &l.b2});
  }
}

EncoderParams make_encoder(const std::string& name, std::size_t d, std::size_t ffn,
                           std::size_t heads, std::size_t depth, Rng& rng) {
  if (depth == 0) throw ConfigError("encoder '" + name + "': depth must be at least 1");
  if (heads == 0 || d % heads != 0) {
    throw ConfigError("encoder '" + name + "': heads must divide d");
  }
  if (ffn == 0) throw ConfigError("encoder '" + name + "': feed-forward width must be positive");
  EncoderParams p;
  p.heads = heads;
  for (std::size_t i = 0; i < depth; ++i) {
    const std::string prefix = name + ".layer" + std::to_string(i);
    EncoderLayer l;
    l.ln1_gamma = constant_parameter(prefix + ".ln1_gamma", 1, d, 1.0);
    l.ln1_beta = constant_parameter(prefix + ".ln1_beta", 1, d, 0.0);
    l.wq = xavier_parameter(prefix + ".wq", d, d, rng);
    l.wk = xavier_parameter(prefix + ".wk", d, d, rng);
    l.wv = xavier_parameter(prefix + ".wv", d, d, rng);
    l.wo = xavier_parameter(prefix + ".wo", d, d, rng);
    l.ln2_gamma = constant_parameter(prefix + ".ln2_gamma", 1, d, 1.0);
    l.ln2_beta = constant_parameter(prefix + ".ln2_beta", 1, d, 0.0);
    l.w1 = xavier_parameter(prefix + ".w1", d, ffn, rng);
    l.b1 = constant_parameter(prefix + ".b1", 1, ffn, 0.0);
    l.w2 = xavier_parameter(prefix + ".w2", ffn, d, rng);
    l.b2 = constant_parameter(prefix + ".b2", 1, d, 0.0);
    p.layers.push_back(std::move(l));
  }
  return p;
}

Matrix transformer_encode(const Matrix& x, const EncoderParams& params, EncoderCache* cache) {
  if (cache) cache->layers.assign(params.layers.size(), {});
  Matrix current = x;
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    const EncoderLayer& l = params.layers[i];
    require_shape(current.cols() == l.wq.value.rows(), "transformer_encode", current, l.wq.value);
    EncoderLayerCache local;
    EncoderLayerCache& c = cache ? cache->layers[i] : local;
    const double scale =
        1.0 / std::sqrt(static_cast<double>(current.cols() / params.heads));

    c.input = current;
    c.ln1_out = layer_norm(current, l.ln1_gamma.value, l.ln1_beta.value, kLayerNormEps, &c.ln1);
    const Matrix q = matmul(c.ln1_out, l.wq.value);
    const Matrix k = matmul(c.ln1_out, l.wk.value);
    const Matrix v = matmul(c.ln1_out, l.wv.value);
    c.merged = multi_head_attention(q, k, v, params.heads, scale, nullptr, &c.attention);
    c.hidden = add(current, matmul(c.merged, l.wo.value));
    c.ln2_out = layer_norm(c.hidden, l.ln2_gamma.value, l.ln2_beta.value, kLayerNormEps, &c.ln2);
    c.pre_activation = add_row_bias(matmul(c.ln2_out, l.w1.value), l.b1.value);
    c.activation = gelu(c.pre_activation);
    current = add(c.hidden, add_row_bias(matmul(c.activation, l.w2.value), l.b2.value));
  }
  return current;
}

Matrix transformer_encode_backward(const EncoderCache& cache, const Matrix& d_out,
                                   EncoderParams& params) {
  Matrix d = d_out;
  for (std::size_t i = params.layers.size(); i-- > 0;) {
    EncoderLayer& l = params.layers[i];
    const EncoderLayerCache& c = cache.layers[i];

    // feed-forward branch
    matmul_tn_accumulate(c.activation, d, l.w2.grad);
    axpy(1.0, column_sums(d), l.b2.grad);
    const Matrix d_act = matmul_nt(d, l.w2.value);
    const Matrix d_pre = gelu_backward(c.pre_activation, d_act);
    matmul_tn_accumulate(c.ln2_out, d_pre, l.w1.grad);
    axpy(1.0, column_sums(d_pre), l.b1.grad);
    const Matrix d_ln2 = matmul_nt(d_pre, l.w1.value);
    Matrix d_hidden =
        add(d, layer_norm_backward(c.ln2, l.ln2_gamma.value, d_ln2, l.ln2_gamma.grad,
                                   l.ln2_beta.grad));

    // attention branch
    matmul_tn_accumulate(c.merged, d_hidden, l.wo.grad);
    const Matrix d_merged = matmul_nt(d_hidden, l.wo.value);
    const AttentionGrads ag = multi_head_attention_backward(c.attention, d_merged, false);
    matmul_tn_accumulate(c.ln1_out, ag.dq, l.wq.grad);
    matmul_tn_accumulate(c.ln1_out, ag.dk, l.wk.grad);
    matmul_tn_accumulate(c.ln1_out, ag.dv, l.wv.grad);
    Matrix d_ln1 = matmul_nt(ag.dq, l.wq.value);
    axpy(1.0, matmul_nt(ag.dk, l.wk.value), d_ln1);
    axpy(1.0, matmul_nt(ag.dv, l.wv.value), d_ln1);
    d = add(d_hidden, layer_norm_backward(c.ln1, l.ln1_gamma.value, d_ln1, l.ln1_gamma.grad,
                                          l.ln1_beta.grad));
  }
  return d;
}

}  // namespace helo
