#include <doctest.h>

#include <cmath>
#include <sstream>

#include "helo/error.hpp"
#include "helo/metrics.hpp"

using namespace helo;

namespace {

EmotionDistribution dist(std::initializer_list<double> p) { return EmotionDistribution{p}; }

}  // namespace

TEST_CASE("metric vector examples") {
  const auto same = metric_vector(dist({0.2, 0.3, 0.5}), dist({0.2, 0.3, 0.5}));
  CHECK(same.chebyshev == 0.0);
  CHECK(same.clark == 0.0);
  CHECK(same.canberra == 0.0);
  CHECK(same.kl == 0.0);
  CHECK(same.cosine == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(same.intersection == doctest::Approx(1.0).epsilon(1e-15));

  const auto m = metric_vector(dist({0.5, 0.5}), dist({1.0, 0.0}));
  CHECK(m.chebyshev == doctest::Approx(0.5));
  CHECK(m.intersection == doctest::Approx(0.5));
  CHECK(m.cosine == doctest::Approx(0.5 / std::sqrt(0.5)).epsilon(1e-14));
  CHECK(m.cosine == doctest::Approx(0.70711).epsilon(1e-5));
  CHECK(m.canberra == doctest::Approx(4.0 / 3.0).epsilon(1e-14));

  const auto a = metric_vector(dist({0.1, 0.6, 0.3}), dist({0.5, 0.2, 0.3}));
  const auto b = metric_vector(dist({0.6, 0.3, 0.1}), dist({0.2, 0.3, 0.5}));
  // Only the summation order changes.
  for (std::size_t k = 0; k < 6; ++k) CHECK(a.as_array()[k] == doctest::Approx(b.as_array()[k]).epsilon(1e-14));
  CHECK_THROWS_AS(metric_vector(dist({0.5, 0.5}), dist({1.0, 0.0, 0.0})), DimensionError);
}

TEST_CASE("zero denominators contribute nothing") {
  const auto m = metric_vector(dist({0.5, 0.5, 0.0}), dist({0.5, 0.5, 0.0}));
  CHECK(m.clark == 0.0);
  CHECK(m.canberra == 0.0);
}

TEST_CASE("evaluate set averages") {
  const auto p1 = dist({0.5, 0.5}), t1 = dist({1.0, 0.0});
  const auto p2 = dist({0.25, 0.75}), t2 = dist({0.5, 0.5});
  const std::vector<EmotionDistribution> one_p{p1}, one_t{t1};
  CHECK(evaluate_set(one_p, one_t).as_array() == metric_vector(p1, t1).as_array());
  const std::vector<EmotionDistribution> dup_p{p1, p1}, dup_t{t1, t1};
  CHECK(evaluate_set(dup_p, dup_t).as_array() == metric_vector(p1, t1).as_array());
  const std::vector<EmotionDistribution> ps{p1, p2}, ts{t1, t2};
  const auto mean = evaluate_set(ps, ts).as_array();
  const auto a = metric_vector(p1, t1).as_array(), b = metric_vector(p2, t2).as_array();
  for (std::size_t k = 0; k < 6; ++k) CHECK(mean[k] == doctest::Approx((a[k] + b[k]) / 2.0));
  // Hand values for the second pair: chebyshev 0.25, intersection 0.75.
  CHECK(mean[0] == doctest::Approx((0.5 + 0.25) / 2.0));
  CHECK(mean[5] == doctest::Approx((0.5 + 0.75) / 2.0));
  CHECK_THROWS_AS(evaluate_set({}, {}), EmptySetError);
}

TEST_CASE("metric bounds") {
  Rng rng(1);
  for (int t = 0; t < 500; ++t) {
    const std::size_t l = 2 + rng.below(15);
    EmotionDistribution p, q;
    double sp = 0.0, sq = 0.0;
    for (std::size_t j = 0; j < l; ++j) {
      p.probs.push_back(rng.uniform());
      q.probs.push_back(rng.uniform());
      sp += p.probs.back();
      sq += q.probs.back();
    }
    for (double& x : p.probs) x /= sp;
    for (double& x : q.probs) x /= sq;
    const auto m = metric_vector(p, q);
    CHECK(m.canberra <= static_cast<double>(l));
    CHECK(m.clark <= std::sqrt(static_cast<double>(l)));
    CHECK((m.chebyshev >= 0.0 && m.chebyshev <= 1.0));
    CHECK((m.intersection >= 0.0 && m.intersection <= 1.0 + 1e-12));
    CHECK((m.cosine >= 0.0 && m.cosine <= 1.0 + 1e-12));
    CHECK(m.kl >= 0.0);
  }
}

TEST_CASE("average rank") {
  ScoreTable single;
  single.methods = {"only"};
  single.metrics = {"a", "b"};
  single.directions = {Direction::lower_is_better, Direction::higher_is_better};
  single.scores = {{0.3, 0.9}};
  const auto s = average_rank(single);
  CHECK(s.average_rank[0] == 1.0);

  ScoreTable tie;
  tie.methods = {"x", "y", "z"};
  tie.metrics = {"kl"};
  tie.directions = {Direction::lower_is_better};
  tie.scores = {{0.1}, {0.1}, {0.3}};
  const auto r = average_rank(tie);
  CHECK(r.ranks[0][0] == 1.5);
  CHECK(r.ranks[1][0] == 1.5);
  CHECK(r.ranks[2][0] == 3.0);

  tie.scores[1][0].reset();
  CHECK_THROWS_AS(average_rank(tie), IncompleteTableError);
}

TEST_CASE("rank pattern from the comparison table") {
  // Ranks (1,1,1,2,1,1) average to 7/6, printed truncated as 1.16.
  ScoreTable t;
  t.methods = {"HeLo", "other"};
  for (auto title : kMetricTitles) t.metrics.emplace_back(title);
  t.directions.assign(kMetricDirections.begin(), kMetricDirections.end());
  t.scores = {{0.0446, 0.1, 0.2, 0.05, 0.9, 0.9}, {0.05, 0.2, 0.3, 0.04, 0.8, 0.8}};
  const auto r = average_rank(t);
  CHECK(r.ranks[0] == std::vector<double>{1, 1, 1, 2, 1, 1});
  CHECK(r.average_rank[0] == doctest::Approx(7.0 / 6.0));
  CHECK(format_rank(r.average_rank[0]) == "1.16");
  CHECK(format_rank(r.overall_rank[0]) == "1");
  CHECK(format_rank(2.5) == "2.5");

  std::ostringstream text;
  render_rank_table_text(text, r);
  CHECK(text.str().find("0.0446 (1)") != std::string::npos);
  CHECK(text.str().find("1.16 (1)") != std::string::npos);
  std::ostringstream csv;
  render_rank_table_csv(csv, r);
  CHECK(csv.str().rfind("method,Chebyshev,Chebyshev_rank,", 0) == 0);
}

TEST_CASE("ranks ignore monotone rescaling") {
  ScoreTable t;
  t.methods = {"a", "b", "c", "d"};
  t.metrics = {"m1", "m2"};
  t.directions = {Direction::lower_is_better, Direction::higher_is_better};
  t.scores = {{0.3, 0.1}, {0.1, 0.4}, {0.2, 0.2}, {0.4, 0.3}};
  const auto before = average_rank(t);
  for (auto& row : t.scores) row[0] = std::exp(*row[0] * 10.0) + 5.0;
  const auto after = average_rank(t);
  CHECK(before.ranks == after.ranks);
  CHECK(before.average_rank == after.average_rank);
}
