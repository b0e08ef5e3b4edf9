#pragma once

// Dataset schemas, synthetic trials with a planted label-correlation
// structure, JSON-lines ingestion and the two evaluation split protocols.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "helo/label_correlation.hpp"
#include "helo/numerics.hpp"

namespace helo {

enum class ModalityGroup { physiological, behavioral };

struct ModalitySpec {
  std::string name;
  std::size_t dim = 0;
  ModalityGroup group = ModalityGroup::physiological;
  /// Rows of the (tokens × dim/tokens) reshape applied before projection.
  std::size_t tokens = 1;
};

struct DatasetSchema {
  std::string name;
  std::vector<ModalitySpec> modalities;
  std::vector<std::string> label_names;

  [[nodiscard]] std::size_t label_count() const { return label_names.size(); }
  /// Index in `modalities`, or throws ValidationError.
  [[nodiscard]] std::size_t index_of(const std::string& modality) const;
  [[nodiscard]] bool has(const std::string& modality) const;
  /// Throws ValidationError unless there is exactly one behavioral modality,
  /// at least one physiological one, and every reshape divides its dim.
  void validate() const;
};

/// EEG 90, GSR 28, PPG 27 physiological; video 768 behavioral; 10 labels.
DatasetSchema dmer_schema();
/// ECG 73, EDA 4, EMG 14 physiological; ACC 12 behavioral; 10 labels.
DatasetSchema wesad_schema();
/// "dmer" / "wesad" (case-insensitive) or a path to a schema JSON file.
DatasetSchema resolve_schema(const std::string& name_or_path);

std::string schema_to_json(const DatasetSchema& schema);
DatasetSchema schema_from_json(const std::string& text);

struct Sample {
  int subject = 0;
  int trial = 0;
  std::vector<std::vector<double>> features;  // schema modality order
  EmotionDistribution label;

  friend bool operator==(const Sample& a, const Sample& b) {
    return a.subject == b.subject && a.trial == b.trial && a.features == b.features &&
           a.label.probs == b.label.probs;
  }
};

enum class PanasTransform { sum_normalize, softmax };

/// Converts 1..5 intensity scores into a distribution. Throws ValidationError
/// for out-of-range scores.
EmotionDistribution panas_to_distribution(std::span<const int> scores,
                                          PanasTransform transform = PanasTransform::sum_normalize);

/// Latent correlation planted by the generator (l × l, positive definite).
/// Labels 5, 7, 8 (afraid, nervous, scared) form the strongest cluster.
Matrix planted_latent_correlation(std::size_t labels);
/// Correlation of the centred log-ratio of generated labels, which equals the
/// correlation of the centred latent: normalize(H Σ H), H = I - 11ᵀ/l.
Matrix planted_label_correlation(std::size_t labels);
/// Indices of the planted afraid/nervous/scared cluster.
std::vector<std::size_t> planted_fear_cluster();

/// Deterministic per seed. Each trial draws a correlated latent emotion
/// vector, maps it through softmax to the label, and emits every modality as
/// a modality-specific linear map of a warped latent plus a per-subject
/// offset plus noise. Physiological and behavioral streams use different
/// warps.
std::vector<Sample> generate_synthetic(const DatasetSchema& schema, int n_subjects,
                                       int trials_per_subject, std::uint64_t seed);

void write_sample_jsonl(std::ostream& out, const Sample& sample, const DatasetSchema& schema);
void save_dataset(const std::filesystem::path& path, std::span<const Sample> samples,
                  const DatasetSchema& schema);
/// Parses JSON lines; errors name the line number and field. Blank lines are
/// skipped, an empty file is an empty dataset.
std::vector<Sample> load_dataset(std::istream& in, const DatasetSchema& schema);
std::vector<Sample> load_dataset(const std::filesystem::path& path, const DatasetSchema& schema);

enum class SplitMode { subject_dependent, loso };

std::string to_string(SplitMode mode);
SplitMode parse_split_mode(const std::string& text);

struct Fold {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  int held_out_subject = -1;  // loso only
};

struct SplitPlan {
  SplitMode mode = SplitMode::subject_dependent;
  std::vector<Fold> folds;
};

/// Per subject, a seeded shuffle puts ceil(ratio·n) samples in train and the
/// rest in test. Throws SplitError for a subject with fewer than 2 samples.
SplitPlan split_subject_dependent(std::span<const Sample> samples, double ratio,
                                  std::uint64_t seed);
/// One fold per subject (ascending id), holding out that subject.
SplitPlan split_loso(std::span<const Sample> samples);

}  // namespace helo
