#pragma once

// Adam, the epoch loop, ablation variants, checkpoints and CSV exports.

#include <cstddef>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "helo/data.hpp"
#include "helo/metrics.hpp"
#include "helo/model.hpp"

namespace helo {

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
};

AdamState make_adam_state(const ParameterList& params, const TrainConfig& config);

/// One bias-corrected Adam update. Gradients are left untouched. Throws
/// DimensionError when the moment buffers no longer match the parameters.
void adam_step(const ParameterList& params, AdamState& state, double lr);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // mean over batches
  double kld = 0.0;
  double cc = 0.0;
  std::optional<MetricVector> test;  // absent when the test set is empty
};

struct TrainOptions {
  std::size_t threads = 1;
  /// Training-set label correlation instead of per-batch (overrides config).
  std::optional<bool> global_label_correlation;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Runs config.epochs epochs of shuffled mini-batch Adam on `fold.train`,
/// recording test metrics on `fold.test` after every epoch. Throws
/// DivergenceError naming the epoch and batch if the loss stops being finite.
std::vector<EpochRecord> train(HeloModel& model, AdamState& adam, std::span<const Sample> samples,
                               const Fold& fold, const TrainOptions& options = {});

/// Mean metrics of the model's predictions over `indices`.
MetricVector evaluate_indices(const HeloModel& model, std::span<const Sample> samples,
                              std::span<const std::size_t> indices, std::size_t threads = 1);

HeloModel build_ablated(const DatasetSchema& schema, const TrainConfig& config,
                        const AblationSpec& ablation);

/// full, w/o CAPF, w/o OTHM, w/o LCDCA, then one single-modality removal per
/// schema modality.
std::vector<AblationSpec> ablation_grid(const DatasetSchema& schema);

/// Small-width configuration for finite-difference checks of the whole
/// pipeline (d = 8, 2 heads, 2 tokens per modality).
TrainConfig grad_check_config(std::uint64_t seed);

/// grad_check of the batch objective on a 4-sample synthetic batch of
/// `schema`, with transport plans frozen at their current solution.
GradCheckReport pipeline_grad_check(const DatasetSchema& schema, std::uint64_t seed, double eps,
                                    const AblationSpec& ablation = {});

// ------------------------------------------------------------ persistence

struct RunInfo {
  std::string split = "subject-dependent";
  int fold = -1;  // loso fold index, -1 otherwise
  std::size_t epochs_trained = 0;
};

struct Checkpoint {
  std::unique_ptr<HeloModel> model;
  AdamState adam;
  RunInfo run;
};

void save_checkpoint(const std::filesystem::path& path, HeloModel& model, const AdamState& adam,
                     const RunInfo& run);
/// Throws ParseError for a corrupt or foreign file.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// "# helo format_version=1 config_hash=<hex> seed=<n>"
std::string metadata_line(const TrainConfig& config);

/// Fixed-precision text for a double that round-trips exactly.
std::string format_double(double x);

void write_history_csv(std::ostream& out, const TrainConfig& config,
                       std::span<const EpochRecord> history);

}  // namespace helo
