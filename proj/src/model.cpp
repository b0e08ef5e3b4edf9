#include "helo/model.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <exception>
#include <iostream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "helo/error.hpp"

namespace helo {

// -------------------------------------------------------------- TrainConfig

void TrainConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string("config: ") + name + " must be positive");
  };
  positive(batch_size, "batch_size");
  positive(heads, "heads");
  positive(embed_dim, "embed_dim");
  positive(ffn_dim, "ffn_dim");
  positive(encoder_depth, "encoder_depth");
  positive(tokens, "tokens");
  positive(head_hidden1, "head_hidden1");
  positive(head_hidden2, "head_hidden2");
  if (embed_dim % heads != 0) {
    throw ConfigError("config: heads (" + std::to_string(heads) + ") must divide embed_dim (" +
                      std::to_string(embed_dim) + ")");
  }
  if (!(learning_rate >= 0.0)) throw ConfigError("config: learning_rate must be non-negative");
  if (!(sinkhorn.epsilon > 0.0)) throw ConfigError("config: sinkhorn epsilon must be positive");
  if (sinkhorn.max_iter < 1) throw ConfigError("config: sinkhorn max_iter must be positive");
  if (!(sinkhorn.tol > 0.0)) throw ConfigError("config: sinkhorn tol must be positive");
  if (lambda_cc < 0.0) throw ConfigError("config: lambda_cc must be non-negative");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("config: Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ConfigError("config: adam_eps must be positive");
  if (!(split_ratio > 0.0 && split_ratio <= 1.0)) {
    throw ConfigError("config: split_ratio must lie in (0, 1]");
  }
}

std::string TrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["learning_rate"] = learning_rate;
  j["batch_size"] = batch_size;
  j["epochs"] = epochs;
  j["heads"] = heads;
  j["embed_dim"] = embed_dim;
  j["ffn_dim"] = ffn_dim;
  j["encoder_depth"] = encoder_depth;
  j["tokens"] = tokens;
  j["head_hidden1"] = head_hidden1;
  j["head_hidden2"] = head_hidden2;
  j["sinkhorn_epsilon"] = sinkhorn.epsilon;
  j["sinkhorn_max_iter"] = sinkhorn.max_iter;
  j["sinkhorn_tol"] = sinkhorn.tol;
  j["lambda_cc"] = lambda_cc;
  j["adam_beta1"] = adam_beta1;
  j["adam_beta2"] = adam_beta2;
  j["adam_eps"] = adam_eps;
  j["split_ratio"] = split_ratio;
  j["rescale_transport"] = rescale_transport;
  j["global_label_correlation"] = global_label_correlation;
  j["seed"] = seed;
  return j.dump();
}

void TrainConfig::merge_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  if (!j.is_object()) throw ParseError("config: expected a JSON object");
  static const std::vector<std::string> known = {
      "learning_rate", "batch_size",     "epochs",        "heads",
      "embed_dim",     "ffn_dim",        "encoder_depth", "tokens",
      "head_hidden1",  "head_hidden2",   "sinkhorn_epsilon", "sinkhorn_max_iter",
      "sinkhorn_tol",  "lambda_cc",      "adam_beta1",    "adam_beta2",
      "adam_eps",      "split_ratio",    "rescale_transport", "global_label_correlation",
      "seed"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
      throw ParseError("config: unknown key '" + it.key() + "'");
    }
  }
  try {
    learning_rate = j.value("learning_rate", learning_rate);
    batch_size = j.value("batch_size", batch_size);
    epochs = j.value("epochs", epochs);
    heads = j.value("heads", heads);
    embed_dim = j.value("embed_dim", embed_dim);
    ffn_dim = j.value("ffn_dim", ffn_dim);
    encoder_depth = j.value("encoder_depth", encoder_depth);
    tokens = j.value("tokens", tokens);
    head_hidden1 = j.value("head_hidden1", head_hidden1);
    head_hidden2 = j.value("head_hidden2", head_hidden2);
    sinkhorn.epsilon = j.value("sinkhorn_epsilon", sinkhorn.epsilon);
    sinkhorn.max_iter = j.value("sinkhorn_max_iter", sinkhorn.max_iter);
    sinkhorn.tol = j.value("sinkhorn_tol", sinkhorn.tol);
    lambda_cc = j.value("lambda_cc", lambda_cc);
    adam_beta1 = j.value("adam_beta1", adam_beta1);
    adam_beta2 = j.value("adam_beta2", adam_beta2);
    adam_eps = j.value("adam_eps", adam_eps);
    split_ratio = j.value("split_ratio", split_ratio);
    rescale_transport = j.value("rescale_transport", rescale_transport);
    global_label_correlation = j.value("global_label_correlation", global_label_correlation);
    seed = j.value("seed", seed);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
}

std::string TrainConfig::hash() const {
  std::ostringstream s;
  s << std::hex << fnv1a64(to_json());
  std::string h = s.str();
  return std::string(16 - h.size(), '0') + h;
}

// ------------------------------------------------------------- AblationSpec

namespace {

std::string upper(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  return s;
}

}  // namespace

std::string AblationSpec::label() const {
  if (is_full()) return "full";
  std::vector<std::string> parts;
  if (disable_capf) parts.emplace_back("CAPF");
  if (disable_othm) parts.emplace_back("OTHM");
  if (disable_lcdca) parts.emplace_back("LCDCA");
  for (const auto& m : excluded_modalities) parts.push_back(upper(m));
  std::string out = "w/o ";
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? "+" : "") + parts[i];
  return out;
}

std::string AblationSpec::to_json() const {
  nlohmann::ordered_json j;
  j["disable_capf"] = disable_capf;
  j["disable_othm"] = disable_othm;
  j["disable_lcdca"] = disable_lcdca;
  j["excluded_modalities"] = excluded_modalities;
  return j.dump();
}

AblationSpec AblationSpec::from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    AblationSpec a;
    a.disable_capf = j.value("disable_capf", false);
    a.disable_othm = j.value("disable_othm", false);
    a.disable_lcdca = j.value("disable_lcdca", false);
    a.excluded_modalities = j.value("excluded_modalities", std::vector<std::string>{});
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("ablation: ") + e.what());
  }
}

void AblationSpec::validate(const DatasetSchema& schema) const {
  std::size_t phy_left = 0;
  for (const auto& m : excluded_modalities) {
    if (!schema.has(m)) throw ConfigError("ablation: unknown modality '" + m + "'");
  }
  if (excluded_modalities.size() >= schema.modalities.size()) {
    throw ConfigError("ablation: excluded modalities must be a strict subset of the schema");
  }
  for (const auto& spec : schema.modalities) {
    const bool excluded = std::find(excluded_modalities.begin(), excluded_modalities.end(),
                                    spec.name) != excluded_modalities.end();
    if (!excluded && spec.group == ModalityGroup::physiological) ++phy_left;
  }
  if (phy_left == 0) {
    throw ConfigError("ablation: excluding every physiological modality leaves nothing to fuse");
  }
}

// ------------------------------------------------------------------- threads

std::size_t worker_threads() {
  if (const char* env = std::getenv("HELO_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

namespace {

template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace

// ---------------------------------------------------------------- HeloModel

HeloModel::HeloModel(DatasetSchema schema, TrainConfig config, AblationSpec ablation)
    : schema_(std::move(schema)), config_(std::move(config)), ablation_(std::move(ablation)) {
  schema_.validate();
  config_.validate();
  ablation_.validate(schema_);
  Rng rng(config_.seed);
  build(rng);
}

void HeloModel::build(Rng& rng) {
  const auto excluded = [&](const std::string& name) {
    return std::find(ablation_.excluded_modalities.begin(), ablation_.excluded_modalities.end(),
                     name) != ablation_.excluded_modalities.end();
  };
  for (std::size_t i = 0; i < schema_.modalities.size(); ++i) {
    const auto& m = schema_.modalities[i];
    if (excluded(m.name)) continue;
    if (m.group == ModalityGroup::physiological) {
      active_phy_.push_back(i);
    } else {
      behavioral_ = i;
    }
  }
  query_ = active_phy_.front();
  keys_.assign(active_phy_.begin() + 1, active_phy_.end());
  const std::size_t c = config_.tokens;
  const std::size_t d = config_.embed_dim;
  if (!ablation_.disable_capf) {
    self_keyed_ = keys_.empty();
    phy_tokens_ = self_keyed_ ? c : keys_.size() * c;
  } else {
    phy_tokens_ = active_phy_.size() * c;
  }
  fused_tokens_ = behavioral_ ? 2 * phy_tokens_ : phy_tokens_;

  projections_.resize(schema_.modalities.size());
  projection_used_.assign(schema_.modalities.size(), false);
  for (std::size_t i = 0; i < schema_.modalities.size(); ++i) {
    const auto& m = schema_.modalities[i];
    const bool used = std::find(active_phy_.begin(), active_phy_.end(), i) != active_phy_.end() ||
                      (behavioral_ && *behavioral_ == i);
    if (!used) continue;
    const std::size_t tokens = m.group == ModalityGroup::behavioral ? phy_tokens_ : c;
    projections_[i] = make_projection("proj." + m.name, m.tokens, m.dim / m.tokens, tokens, d, rng);
    projection_used_[i] = true;
  }
  if (!ablation_.disable_capf) {
    capf_ = make_cross_attention("capf", d, config_.heads, self_keyed_ ? 1 : keys_.size(), rng);
  }
  const bool transport = behavioral_ && !ablation_.disable_othm;
  if (transport || !behavioral_) {
    enc_phy_ = make_encoder("encoder.phy", d, config_.ffn_dim, config_.heads,
                            config_.encoder_depth, rng);
  }
  if (transport) {
    enc_v_ = make_encoder("encoder.behavioral", d, config_.ffn_dim, config_.heads,
                          config_.encoder_depth, rng);
  }
  const std::size_t l = schema_.label_count();
  if (!ablation_.disable_lcdca) {
    label_embedding_ = make_label_embedding(l, d, rng);
    token_pool_ = make_token_pool(l, fused_tokens_, rng);
    lcdca_ = make_lcdca(d, rng);
  }
  head_ = make_prediction_head(d, config_.head_hidden1, config_.head_hidden2, l, rng);
}

ParameterList HeloModel::parameters() {
  ParameterList out;
  for (std::size_t i = 0; i < projections_.size(); ++i)
    if (projection_used_[i]) projections_[i].collect(out);
  if (!ablation_.disable_capf) capf_.collect(out);
  if (!enc_phy_.layers.empty()) enc_phy_.collect(out);
  if (!enc_v_.layers.empty()) enc_v_.collect(out);
  if (!ablation_.disable_lcdca) {
    out.push_back(&label_embedding_.x_l);
    out.push_back(&token_pool_.weight);
    lcdca_.collect(out);
  }
  head_.collect(out);
  return out;
}

std::size_t HeloModel::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter* p : const_cast<HeloModel*>(this)->parameters()) n += p->value.size();
  return n;
}

LabelState HeloModel::label_state() const {
  if (ablation_.disable_lcdca) return {};
  return {matmul(label_embedding_.x_l.value, lcdca_.wq.value),
          correlation_matrix(label_embedding_.x_l.value)};
}

Matrix HeloModel::learned_correlation() const {
  if (ablation_.disable_lcdca) {
    throw ConfigError("learned correlation is unavailable when LCDCA is disabled");
  }
  return correlation_matrix(label_embedding_.x_l.value).values;
}

EmotionDistribution HeloModel::forward(const Sample& sample, const LabelState& labels,
                                       SampleTrace* trace, const TransportPlan* fixed_plan) const {
  if (sample.features.size() != schema_.modalities.size()) {
    throw DimensionError("sample has " + std::to_string(sample.features.size()) +
                         " modalities, schema '" + schema_.name + "' has " +
                         std::to_string(schema_.modalities.size()));
  }
  SampleTrace local;
  SampleTrace& t = trace ? *trace : local;
  const std::size_t n_mod = schema_.modalities.size();
  t.projections.assign(n_mod, {});
  t.tokens.assign(n_mod, {});
  for (std::size_t i = 0; i < n_mod; ++i) {
    if (!projection_used_[i]) continue;
    t.tokens[i] = project_modality(schema_.modalities[i].name, sample.features[i], projections_[i],
                                   &t.projections[i])
                      .tokens;
  }

  if (!ablation_.disable_capf) {
    std::vector<Matrix> keys;
    if (self_keyed_) {
      keys.push_back(t.tokens[query_]);
    } else {
      for (std::size_t k : keys_) keys.push_back(t.tokens[k]);
    }
    t.x_phy = capf_forward(t.tokens[query_], keys, capf_, &t.capf);
  } else {
    std::vector<Matrix> parts;
    for (std::size_t k : active_phy_) parts.push_back(t.tokens[k]);
    t.x_phy = vstack(parts);
  }

  t.has_plan = false;
  if (behavioral_) {
    t.x_v = t.tokens[*behavioral_];
    if (!ablation_.disable_othm) {
      if (fixed_plan) {
        t.plan = *fixed_plan;
      } else {
        const Matrix cost = cost_matrix(t.x_phy, t.x_v);
        if (!all_finite(cost)) throw NumericalError("forward: non-finite tokens reached the transport step");
        t.plan = sinkhorn_uniform(cost, config_.sinkhorn);
      }
      t.has_plan = true;
      t.x_m = othm_fuse(t.x_phy, t.x_v, t.plan, enc_phy_, enc_v_, config_.rescale_transport,
                        &t.othm);
    } else {
      const Matrix parts[] = {t.x_phy, t.x_v};
      t.x_m = vstack(parts);
    }
  } else {
    t.x_m = transformer_encode(t.x_phy, enc_phy_, &t.phy_only);
  }

  if (!ablation_.disable_lcdca) {
    t.pooled = pool_tokens(t.x_m, token_pool_);
    t.x_o = lcdca_projected(labels.q_label, t.pooled, labels.m_learn.values, lcdca_, &t.lcdca);
    t.prediction = predict_head(t.x_o, head_, &t.head);
  } else {
    t.prediction = predict_head(t.x_m, head_, &t.head);
  }
  return t.prediction;
}

EmotionDistribution HeloModel::predict(const Sample& sample) const {
  return forward(sample, label_state());
}

std::vector<EmotionDistribution> HeloModel::predict_all(std::span<const Sample> samples,
                                                        std::size_t threads) const {
  const LabelState labels = label_state();
  std::vector<EmotionDistribution> out(samples.size());
  parallel_for(samples.size(), threads,
               [&](std::size_t i) { out[i] = forward(samples[i], labels); });
  return out;
}

void HeloModel::backward_sample(const SampleTrace& t, std::span<const double> d_pred,
                                Matrix& d_q_label, Matrix& d_m_learn) {
  Matrix d_x_m;
  const Matrix d_head_in = predict_head_backward(t.head, d_pred, head_);
  if (!ablation_.disable_lcdca) {
    LcdcaGrads g = lcdca_backward(t.lcdca, d_head_in, lcdca_);
    axpy(1.0, g.d_q_label, d_q_label);
    axpy(1.0, g.d_correlation, d_m_learn);
    d_x_m = pool_tokens_backward(t.x_m, g.d_tokens, token_pool_);
  } else {
    d_x_m = d_head_in;
  }

  Matrix d_phy, d_v;
  if (behavioral_) {
    if (!ablation_.disable_othm) {
      OthmGrads og = othm_backward(t.othm, d_x_m, enc_phy_, enc_v_);
      d_phy = std::move(og.d_phy);
      d_v = std::move(og.d_v);
    } else {
      d_phy = slice_rows(d_x_m, 0, phy_tokens_);
      d_v = slice_rows(d_x_m, phy_tokens_, phy_tokens_);
    }
  } else {
    d_phy = transformer_encode_backward(t.phy_only, d_x_m, enc_phy_);
  }

  std::vector<Matrix> d_tokens(schema_.modalities.size());
  if (!ablation_.disable_capf) {
    CapfGrads cg = capf_backward(t.capf, d_phy, capf_);
    d_tokens[query_] = std::move(cg.d_query);
    if (self_keyed_) {
      axpy(1.0, cg.d_keys[0], d_tokens[query_]);
    } else {
      for (std::size_t k = 0; k < keys_.size(); ++k) d_tokens[keys_[k]] = std::move(cg.d_keys[k]);
    }
  } else {
    const std::size_t c = config_.tokens;
    for (std::size_t k = 0; k < active_phy_.size(); ++k)
      d_tokens[active_phy_[k]] = slice_rows(d_phy, k * c, c);
  }
  if (behavioral_) d_tokens[*behavioral_] = std::move(d_v);

  for (std::size_t i = 0; i < schema_.modalities.size(); ++i) {
    if (!projection_used_[i]) continue;
    project_modality_backward(t.projections[i], d_tokens[i], projections_[i]);
  }
}

BatchResult HeloModel::batch_loss(std::span<const Sample* const> batch, bool with_grad,
                                  const std::vector<TransportPlan>* fixed_plans,
                                  const Matrix* m_gt_override, std::size_t threads) {
  if (batch.empty()) throw EmptySetError("batch_loss: empty batch");
  if (fixed_plans && fixed_plans->size() != batch.size()) {
    throw DimensionError("batch_loss: " + std::to_string(fixed_plans->size()) +
                         " fixed plans for a batch of " + std::to_string(batch.size()));
  }
  const std::size_t n = batch.size();
  const LabelState labels = label_state();
  std::vector<SampleTrace> traces(n);
  BatchResult result;
  result.predictions.resize(n);
  parallel_for(n, threads, [&](std::size_t i) {
    const TransportPlan* plan = fixed_plans ? &(*fixed_plans)[i] : nullptr;
    result.predictions[i] = forward(*batch[i], labels, &traces[i], plan);
  });

  double kld_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) kld_sum += kld_loss(result.predictions[i], batch[i]->label);
  result.kld = kld_sum / static_cast<double>(n);

  Matrix m_gt;
  if (!ablation_.disable_lcdca) {
    if (m_gt_override) {
      m_gt = *m_gt_override;
    } else {
      if (n == 1) {
        std::clog << "warning: single-sample batch; ground-truth label correlation is all ones\n";
      }
      std::vector<EmotionDistribution> truths;
      truths.reserve(n);
      for (const Sample* s : batch) truths.push_back(s->label);
      m_gt = batch_label_correlation(truths).values;
    }
    result.cc = cc_loss(labels.m_learn.values, m_gt);
  }
  result.loss = overall_loss(result.kld, result.cc, config_.lambda_cc);

  for (auto& t : traces)
    if (t.has_plan) result.plans.push_back(t.plan);

  if (with_grad) {
    const std::size_t l = schema_.label_count();
    const std::size_t d = config_.embed_dim;
    Matrix d_q(l, d), d_m(l, l);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      auto g = kld_loss_gradient(result.predictions[i], batch[i]->label);
      for (double& x : g) x *= inv_n;
      backward_sample(traces[i], g, d_q, d_m);
    }
    if (!ablation_.disable_lcdca) {
      axpy(config_.lambda_cc, cc_loss_gradient(labels.m_learn.values, m_gt), d_m);
      const Matrix& x_l = label_embedding_.x_l.value;
      matmul_tn_accumulate(x_l, d_q, lcdca_.wq.grad);
      Matrix d_x_l = matmul_nt(d_q, lcdca_.wq.value);
      cosine_rows_backward(x_l, x_l, d_m, d_x_l, d_x_l);
      axpy(1.0, d_x_l, label_embedding_.x_l.grad);
    }
  }
  return result;
}

}  // namespace helo
