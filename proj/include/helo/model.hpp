#pragma once

// Assembly of the full pipeline (projection → cross-attention fusion →
// transport-guided fusion → label-correlation attention → prediction head),
// its ablated variants, and the batch objective with hand-written backward.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "helo/attention.hpp"
#include "helo/data.hpp"
#include "helo/label_correlation.hpp"
#include "helo/ot.hpp"

namespace helo {

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 128;
  std::size_t epochs = 300;
  std::size_t heads = 4;
  std::size_t embed_dim = 128;
  std::size_t ffn_dim = 64;
  std::size_t encoder_depth = 1;
  /// Tokens per physiological modality after projection (C).
  std::size_t tokens = 4;
  std::size_t head_hidden1 = 128;
  std::size_t head_hidden2 = 64;
  SinkhornOptions sinkhorn{};
  double lambda_cc = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double split_ratio = 0.8;
  /// Multiply the transported stream by the token count so rows keep unit mass.
  bool rescale_transport = true;
  /// Use the training set's label correlation instead of the per-batch one.
  bool global_label_correlation = false;
  std::uint64_t seed = 42;

  /// Throws ConfigError for non-positive sizes or heads not dividing embed_dim.
  void validate() const;
  [[nodiscard]] std::string to_json() const;
  /// Fields absent from `text` keep their current values.
  void merge_json(const std::string& text);
  /// Hex FNV-1a of the canonical JSON form.
  [[nodiscard]] std::string hash() const;
};

struct AblationSpec {
  bool disable_capf = false;
  bool disable_othm = false;
  bool disable_lcdca = false;
  std::vector<std::string> excluded_modalities;

  [[nodiscard]] bool is_full() const {
    return !disable_capf && !disable_othm && !disable_lcdca && excluded_modalities.empty();
  }
  /// "full", "w/o CAPF", "w/o EEG", ... (components joined with '+').
  [[nodiscard]] std::string label() const;
  [[nodiscard]] std::string to_json() const;
  static AblationSpec from_json(const std::string& text);
  /// Throws ConfigError for unknown modalities or when no physiological
  /// modality would remain.
  void validate(const DatasetSchema& schema) const;
};

/// Batch-shared quantities derived from the label embedding.
struct LabelState {
  Matrix q_label;          // x^L · W_Q
  CorrelationMatrix m_learn;  // cosine(x^L, x^L)
};

struct SampleTrace {
  std::vector<ProjectionCache> projections;  // active modalities
  std::vector<Matrix> tokens;                // active modalities
  CapfCache capf;
  Matrix x_phy;
  Matrix x_v;
  TransportPlan plan;
  bool has_plan = false;
  OthmCache othm;
  EncoderCache phy_only;
  Matrix x_m;
  Matrix pooled;
  LcdcaCache lcdca;
  Matrix x_o;
  HeadCache head;
  EmotionDistribution prediction;
};

struct BatchResult {
  double loss = 0.0;  // kld + lambda · cc
  double kld = 0.0;   // mean over the batch
  double cc = 0.0;    // 0 when LCDCA is disabled
  std::vector<EmotionDistribution> predictions;
  std::vector<TransportPlan> plans;
};

class HeloModel {
 public:
  HeloModel(DatasetSchema schema, TrainConfig config, AblationSpec ablation = {});

  [[nodiscard]] const DatasetSchema& schema() const { return schema_; }
  [[nodiscard]] const TrainConfig& config() const { return config_; }
  [[nodiscard]] const AblationSpec& ablation() const { return ablation_; }

  /// Every trainable parameter in a fixed order.
  [[nodiscard]] ParameterList parameters();
  [[nodiscard]] std::size_t parameter_count() const;

  /// Schema indices of the query modality and the key modalities used by the
  /// cross-attention fusion, and of the behavioral modality (if kept).
  [[nodiscard]] std::size_t query_modality() const { return query_; }
  [[nodiscard]] const std::vector<std::size_t>& key_modalities() const { return keys_; }
  [[nodiscard]] std::optional<std::size_t> behavioral_modality() const { return behavioral_; }
  [[nodiscard]] std::size_t fused_tokens() const { return fused_tokens_; }
  [[nodiscard]] bool uses_label_correlation() const { return !ablation_.disable_lcdca; }

  [[nodiscard]] LabelState label_state() const;
  [[nodiscard]] Matrix learned_correlation() const;

  /// Forward pass for one sample. When `fixed_plan` is given the transport
  /// plan is reused instead of being solved from the current tokens.
  EmotionDistribution forward(const Sample& sample, const LabelState& labels,
                              SampleTrace* trace = nullptr,
                              const TransportPlan* fixed_plan = nullptr) const;
  [[nodiscard]] EmotionDistribution predict(const Sample& sample) const;
  /// Forward passes fanned out over `threads` workers; output in input order.
  [[nodiscard]] std::vector<EmotionDistribution> predict_all(std::span<const Sample> samples,
                                                             std::size_t threads = 1) const;

  /// Mean KL + lambda·CC over the batch. With `with_grad`, accumulates the
  /// gradient into every parameter's grad (callers zero them first).
  /// `fixed_plans` freezes the per-sample transport plans; `m_gt_override`
  /// replaces the per-batch ground-truth correlation.
  BatchResult batch_loss(std::span<const Sample* const> batch, bool with_grad,
                         const std::vector<TransportPlan>* fixed_plans = nullptr,
                         const Matrix* m_gt_override = nullptr, std::size_t threads = 1);

 private:
  void build(Rng& rng);
  void backward_sample(const SampleTrace& trace, std::span<const double> d_pred, Matrix& d_q_label,
                       Matrix& d_m_learn);

  DatasetSchema schema_;
  TrainConfig config_;
  AblationSpec ablation_;

  std::vector<std::size_t> active_phy_;  // schema order
  std::size_t query_ = 0;
  std::vector<std::size_t> keys_;
  bool self_keyed_ = false;  // single physiological modality attends to itself
  std::optional<std::size_t> behavioral_;
  std::size_t phy_tokens_ = 0;
  std::size_t fused_tokens_ = 0;

  std::vector<TokenProjection> projections_;  // one per schema modality (unused ones empty)
  std::vector<bool> projection_used_;
  CrossAttentionParams capf_;
  EncoderParams enc_phy_;
  EncoderParams enc_v_;
  LabelEmbedding label_embedding_;
  TokenPool token_pool_;
  LcdcaParams lcdca_;
  PredictionHeadParams head_;
};

/// Number of workers from HELO_THREADS (default: hardware concurrency).
std::size_t worker_threads();

}  // namespace helo
