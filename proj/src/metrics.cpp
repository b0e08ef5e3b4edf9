#include "helo/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

#include "helo/error.hpp"

namespace helo {

MetricVector metric_vector(const EmotionDistribution& pred, const EmotionDistribution& truth) {
  if (pred.size() != truth.size() || pred.size() == 0) {
    throw DimensionError("metric_vector: prediction length " + std::to_string(pred.size()) +
                         " vs truth length " + std::to_string(truth.size()));
  }
  MetricVector m;
  double clark_sq = 0.0, dot = 0.0, nt = 0.0, np = 0.0;
  for (std::size_t j = 0; j < pred.size(); ++j) {
    const double d = truth.probs[j];
    const double p = pred.probs[j];
    const double diff = std::abs(d - p);
    const double sum = d + p;
    m.chebyshev = std::max(m.chebyshev, diff);
    if (sum > 0.0) {
      clark_sq += (diff * diff) / (sum * sum);
      m.canberra += diff / sum;
    }
    dot += d * p;
    nt += d * d;
    np += p * p;
    m.intersection += std::min(d, p);
  }
  m.clark = std::sqrt(clark_sq);
  m.kl = kld_loss(pred, truth);
  m.cosine = (nt > 0.0 && np > 0.0) ? dot / (std::sqrt(nt) * std::sqrt(np)) : 0.0;
  return m;
}

MetricVector evaluate_set(std::span<const EmotionDistribution> preds,
                          std::span<const EmotionDistribution> truths) {
  if (preds.empty()) throw EmptySetError("evaluate_set: no predictions to evaluate");
  if (preds.size() != truths.size()) {
    throw DimensionError("evaluate_set: " + std::to_string(preds.size()) + " predictions vs " +
                         std::to_string(truths.size()) + " truths");
  }
  std::array<double, 6> acc{};
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto v = metric_vector(preds[i], truths[i]).as_array();
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += v[k];
  }
  for (double& a : acc) a /= static_cast<double>(preds.size());
  return MetricVector::from_array(acc);
}

std::vector<double> rank_with_ties(std::span<const double> values, Direction direction) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  auto better = [&](std::size_t a, std::size_t b) {
    return direction == Direction::lower_is_better ? values[a] < values[b] : values[a] > values[b];
  };
  std::stable_sort(order.begin(), order.end(), better);
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double mean_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mean_rank;
    i = j + 1;
  }
  return ranks;
}

RankTable average_rank(const ScoreTable& table) {
  const std::size_t n_methods = table.methods.size();
  const std::size_t n_metrics = table.metrics.size();
  if (n_methods == 0 || n_metrics == 0) throw IncompleteTableError("average_rank: empty table");
  if (table.directions.size() != n_metrics) {
    throw IncompleteTableError("average_rank: one direction per metric is required");
  }
  if (table.scores.size() != n_methods) {
    throw IncompleteTableError("average_rank: score rows do not match the method list");
  }
  RankTable out;
  out.methods = table.methods;
  out.metrics = table.metrics;
  out.scores.assign(n_methods, std::vector<double>(n_metrics));
  out.ranks.assign(n_methods, std::vector<double>(n_metrics));
  for (std::size_t m = 0; m < n_methods; ++m) {
    if (table.scores[m].size() != n_metrics) {
      throw IncompleteTableError("average_rank: method '" + table.methods[m] + "' has " +
                                 std::to_string(table.scores[m].size()) + " of " +
                                 std::to_string(n_metrics) + " metrics");
    }
    for (std::size_t k = 0; k < n_metrics; ++k) {
      if (!table.scores[m][k].has_value()) {
        throw IncompleteTableError("average_rank: missing score for method '" + table.methods[m] +
                                   "', metric '" + table.metrics[k] + "'");
      }
      out.scores[m][k] = *table.scores[m][k];
    }
  }
  for (std::size_t k = 0; k < n_metrics; ++k) {
    std::vector<double> column(n_methods);
    for (std::size_t m = 0; m < n_methods; ++m) column[m] = out.scores[m][k];
    const auto r = rank_with_ties(column, table.directions[k]);
    for (std::size_t m = 0; m < n_methods; ++m) out.ranks[m][k] = r[m];
  }
  out.average_rank.resize(n_methods);
  for (std::size_t m = 0; m < n_methods; ++m) {
    double s = 0.0;
    for (double r : out.ranks[m]) s += r;
    out.average_rank[m] = s / static_cast<double>(n_metrics);
  }
  out.overall_rank = rank_with_ties(out.average_rank, Direction::lower_is_better);
  return out;
}

std::string format_rank(double value) {
  const double truncated = std::floor(value * 100.0 + 1e-9) / 100.0;
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << truncated;
  std::string text = s.str();
  while (!text.empty() && text.back() == '0') text.pop_back();
  if (!text.empty() && text.back() == '.') text.pop_back();
  return text;
}

namespace {

std::string score_cell(double score, double rank) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << score << " (" << format_rank(rank) << ")";
  return s.str();
}

}  // namespace

void render_rank_table_text(std::ostream& out, const RankTable& table) {
  std::vector<std::vector<std::string>> grid;
  std::vector<std::string> header{"Measure"};
  header.insert(header.end(), table.methods.begin(), table.methods.end());
  grid.push_back(header);
  for (std::size_t k = 0; k < table.metrics.size(); ++k) {
    std::vector<std::string> row{table.metrics[k]};
    for (std::size_t m = 0; m < table.methods.size(); ++m)
      row.push_back(score_cell(table.scores[m][k], table.ranks[m][k]));
    grid.push_back(row);
  }
  std::vector<std::string> avg{"Average Rank"};
  for (std::size_t m = 0; m < table.methods.size(); ++m)
    avg.push_back(format_rank(table.average_rank[m]) + " (" + format_rank(table.overall_rank[m]) +
                  ")");
  grid.push_back(avg);

  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : grid)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  for (const auto& row : grid) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c > 0) out << "  ";
      out << std::left << std::setw(static_cast<int>(width[c])) << row[c];
    }
    out << '\n';
  }
}

void render_rank_table_csv(std::ostream& out, const RankTable& table) {
  out << "method";
  for (const auto& metric : table.metrics) out << ',' << metric << ',' << metric << "_rank";
  out << ",average_rank,overall_rank\n";
  out.precision(17);
  for (std::size_t m = 0; m < table.methods.size(); ++m) {
    out << table.methods[m];
    for (std::size_t k = 0; k < table.metrics.size(); ++k)
      out << ',' << table.scores[m][k] << ',' << table.ranks[m][k];
    out << ',' << table.average_rank[m] << ',' << table.overall_rank[m] << '\n';
  }
}

}  // namespace helo
