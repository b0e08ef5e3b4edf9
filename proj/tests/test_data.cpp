#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

#include "helo/data.hpp"
#include "helo/error.hpp"

using namespace helo;

namespace {

// Correlation of centred log-ratio labels, computed the long way.
Matrix clr_correlation(const std::vector<Sample>& samples, std::size_t l) {
  const double n = static_cast<double>(samples.size());
  std::vector<std::vector<double>> z;
  for (const auto& s : samples) {
    std::vector<double> row(l);
    double mean = 0.0;
    for (std::size_t j = 0; j < l; ++j) mean += (row[j] = std::log(s.label.probs[j]));
    mean /= static_cast<double>(l);
    for (double& x : row) x -= mean;
    z.push_back(row);
  }
  std::vector<double> mu(l, 0.0);
  for (const auto& r : z)
    for (std::size_t j = 0; j < l; ++j) mu[j] += r[j] / n;
  Matrix cov(l, l, 0.0);
  for (const auto& r : z)
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t j = 0; j < l; ++j) cov(i, j) += (r[i] - mu[i]) * (r[j] - mu[j]);
  Matrix c(l, l);
  for (std::size_t i = 0; i < l; ++i)
    for (std::size_t j = 0; j < l; ++j) c(i, j) = cov(i, j) / std::sqrt(cov(i, i) * cov(j, j));
  return c;
}

}  // namespace

TEST_CASE("built-in schemas") {
  const auto dmer = dmer_schema();
  CHECK(dmer.modalities.size() == 4);
  CHECK(dmer.modalities[dmer.index_of("eeg")].dim == 90);
  CHECK(dmer.modalities[dmer.index_of("gsr")].dim == 28);
  CHECK(dmer.modalities[dmer.index_of("ppg")].dim == 27);
  CHECK(dmer.modalities[dmer.index_of("video")].dim == 768);
  CHECK(dmer.modalities[dmer.index_of("video")].group == ModalityGroup::behavioral);
  CHECK(dmer.label_count() == 10);
  const auto wesad = wesad_schema();
  CHECK(wesad.modalities[wesad.index_of("acc")].group == ModalityGroup::behavioral);
  CHECK(wesad.label_count() == 10);
  CHECK_THROWS_AS((void)dmer.index_of("ecg"), ValidationError);
  CHECK(schema_from_json(schema_to_json(wesad)).modalities.size() == wesad.modalities.size());
  CHECK(resolve_schema("DMER").name == dmer.name);
}

TEST_CASE("panas conversion") {
  const std::vector<int> scores{5, 1, 1, 1, 1, 1, 1, 1, 1, 1};
  const auto d = panas_to_distribution(scores);
  CHECK(d.probs[0] == doctest::Approx(5.0 / 14.0).epsilon(1e-15));
  CHECK(d.probs[1] == doctest::Approx(1.0 / 14.0).epsilon(1e-15));
  CHECK(d.valid(1e-12));
  const auto s = panas_to_distribution(scores, PanasTransform::softmax);
  CHECK(s.valid(1e-12));
  CHECK(s.probs[0] > s.probs[1]);
  CHECK_THROWS_AS(panas_to_distribution(std::vector<int>{0, 3}), ValidationError);
  CHECK_THROWS_AS(panas_to_distribution(std::vector<int>{6, 3}), ValidationError);
}

TEST_CASE("synthetic generation") {
  const auto schema = dmer_schema();
  const auto a = generate_synthetic(schema, 3, 4, 9);
  CHECK(a.size() == 12);
  CHECK(a == generate_synthetic(schema, 3, 4, 9));
  CHECK_FALSE(a == generate_synthetic(schema, 3, 4, 10));
  for (const auto& s : a) {
    CHECK(s.label.valid(1e-9));
    REQUIRE(s.features.size() == schema.modalities.size());
    for (std::size_t m = 0; m < s.features.size(); ++m)
      CHECK(s.features[m].size() == schema.modalities[m].dim);
  }
  CHECK(generate_synthetic(schema, 73, 32, 1).size() == 2336);
}

TEST_CASE("planted label correlation is recoverable") {
  const auto samples = generate_synthetic(dmer_schema(), 100, 100, 3);
  const Matrix planted = planted_label_correlation(10);
  const Matrix measured = clr_correlation(samples, 10);
  CHECK(max_abs_diff(planted, measured) <= 0.1);
  // The fear cluster stands out from everything else.
  const auto cluster = planted_fear_cluster();
  const std::set<std::size_t> in(cluster.begin(), cluster.end());
  double inter = 0.0;
  int count = 0;
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t j = 0; j < 10; ++j)
      if (i != j && !(in.count(i) && in.count(j))) {
        inter += planted(i, j);
        ++count;
      }
  inter /= count;
  for (auto i : cluster)
    for (auto j : cluster)
      if (i != j) CHECK(planted(i, j) > inter);
}

TEST_CASE("jsonl round trip and validation") {
  const auto schema = dmer_schema();
  const auto samples = generate_synthetic(schema, 2, 3, 5);
  const auto path = std::filesystem::temp_directory_path() / "helo_test_roundtrip.jsonl";
  save_dataset(path, samples, schema);
  CHECK(load_dataset(path, schema) == samples);
  std::filesystem::remove(path);

  std::ostringstream line;
  write_sample_jsonl(line, samples[0], schema);
  std::string text = line.str();
  // Drop the last EEG value.
  const auto pos = text.find("\"eeg\"");
  REQUIRE(pos != std::string::npos);
  const auto close = text.find(']', pos);
  const auto comma = text.rfind(',', close);
  text.erase(comma, close - comma);
  std::istringstream in(text);
  try {
    (void)load_dataset(in, schema);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    const std::string what = e.what();
    CHECK(what.find("eeg") != std::string::npos);
    CHECK(what.find("90") != std::string::npos);
    CHECK(what.find("89") != std::string::npos);
  }

  std::istringstream empty("");
  CHECK(load_dataset(empty, schema).empty());
  std::istringstream garbage("{not json\n");
  CHECK_THROWS_AS(load_dataset(garbage, schema), Error);
}

TEST_CASE("subject-dependent split") {
  const auto samples = generate_synthetic(dmer_schema(), 1, 32, 1);
  const auto plan = split_subject_dependent(samples, 0.8, 7);
  REQUIRE(plan.folds.size() == 1);
  CHECK(plan.folds[0].train.size() == 26);
  CHECK(plan.folds[0].test.size() == 6);
  CHECK(split_subject_dependent(samples, 0.8, 7).folds[0].train == plan.folds[0].train);

  const auto many = generate_synthetic(dmer_schema(), 4, 7, 2);
  const auto p = split_subject_dependent(many, 0.8, 3);
  std::vector<std::size_t> all = p.folds[0].train;
  all.insert(all.end(), p.folds[0].test.begin(), p.folds[0].test.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < many.size(); ++i) CHECK(all[i] == i);
  for (auto t : p.folds[0].test) CHECK(std::count(p.folds[0].train.begin(), p.folds[0].train.end(), t) == 0);

  const auto lone = generate_synthetic(dmer_schema(), 1, 1, 1);
  CHECK_THROWS_AS(split_subject_dependent(lone, 0.8, 1), SplitError);
}

TEST_CASE("leave one subject out") {
  const auto samples = generate_synthetic(wesad_schema(), 14, 3, 4);
  const auto plan = split_loso(samples);
  CHECK(plan.folds.size() == 14);
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    const auto& fold = plan.folds[f];
    CHECK(fold.held_out_subject == samples[fold.test.front()].subject);
    for (auto t : fold.test) CHECK(samples[t].subject == fold.held_out_subject);
    for (auto t : fold.train) CHECK(samples[t].subject != fold.held_out_subject);
    CHECK(fold.train.size() + fold.test.size() == samples.size());
  }
  CHECK_THROWS_AS(split_loso(generate_synthetic(wesad_schema(), 1, 3, 4)), SplitError);
  CHECK(parse_split_mode(to_string(SplitMode::loso)) == SplitMode::loso);
}
