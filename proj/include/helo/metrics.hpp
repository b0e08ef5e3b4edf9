#pragma once

// The six label-distribution evaluation measures and average-rank tables.

#include <array>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "helo/label_correlation.hpp"

namespace helo {

struct MetricVector {
  double chebyshev = 0.0;
  double clark = 0.0;
  double canberra = 0.0;
  double kl = 0.0;
  double cosine = 0.0;
  double intersection = 0.0;

  [[nodiscard]] std::array<double, 6> as_array() const {
    return {chebyshev, clark, canberra, kl, cosine, intersection};
  }
  static MetricVector from_array(const std::array<double, 6>& v) {
    return {v[0], v[1], v[2], v[3], v[4], v[5]};
  }
};

enum class Direction { lower_is_better, higher_is_better };

/// Metric short names in MetricVector order: cheb, clark, canb, kl, cos, inter.
inline constexpr std::array<std::string_view, 6> kMetricKeys = {"cheb", "clark", "canb",
                                                                "kl",   "cos",   "inter"};
inline constexpr std::array<std::string_view, 6> kMetricTitles = {
    "Chebyshev", "Clark", "Canberra", "KL", "Cosine", "Intersection"};
inline constexpr std::array<Direction, 6> kMetricDirections = {
    Direction::lower_is_better, Direction::lower_is_better,  Direction::lower_is_better,
    Direction::lower_is_better, Direction::higher_is_better, Direction::higher_is_better};

/// Throws DimensionError on a length mismatch. Clark/Canberra terms whose
/// denominator is zero contribute 0; KL uses the same smoothing as training.
MetricVector metric_vector(const EmotionDistribution& pred, const EmotionDistribution& truth);

/// Mean of per-sample metric vectors. Throws EmptySetError on empty input.
MetricVector evaluate_set(std::span<const EmotionDistribution> preds,
                          std::span<const EmotionDistribution> truths);

struct ScoreTable {
  std::vector<std::string> methods;
  std::vector<std::string> metrics;
  std::vector<Direction> directions;                     // per metric
  std::vector<std::vector<std::optional<double>>> scores;  // [method][metric]
};

struct RankTable {
  std::vector<std::string> methods;
  std::vector<std::string> metrics;
  std::vector<std::vector<double>> scores;  // [method][metric]
  std::vector<std::vector<double>> ranks;   // [method][metric], ties share the mean rank
  std::vector<double> average_rank;         // per method
  std::vector<double> overall_rank;         // rank of average_rank (lower is better)
};

/// Ranks per metric (1 = best for its direction), ties share the mean rank.
/// Throws IncompleteTableError naming the first missing cell.
RankTable average_rank(const ScoreTable& table);

/// Ranks `values` with rank 1 the best; ties share the mean rank.
std::vector<double> rank_with_ties(std::span<const double> values, Direction direction);

/// Truncates to two decimals and drops trailing zeros ("7/6" prints as 1.16).
std::string format_rank(double value);

/// Metric rows, method columns, "score (rank)" cells, then an Average Rank row.
void render_rank_table_text(std::ostream& out, const RankTable& table);
/// One row per method: method,<metric>,<metric>_rank,...,average_rank,overall_rank.
void render_rank_table_csv(std::ostream& out, const RankTable& table);

}  // namespace helo
