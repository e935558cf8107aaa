#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "cbmlab/metrics.hpp"
#include "set_oracle.hpp"
#include "toy_models.hpp"

using namespace cbm;
using Set = std::vector<std::size_t>;
using cbm::testing::members;

TEST_CASE("sample filter decisions") {
  std::vector<double> truth(12, 0.0);
  truth[3] = truth[10] = 1.0;
  std::vector<double> perfect(12, 0.1);
  perfect[3] = perfect[10] = 0.9;
  CHECK_FALSE(filter_decision(3, 3, perfect, truth, ConceptKind::kBinary).has_value());
  CHECK(filter_decision(2, 3, perfect, truth, ConceptKind::kBinary) == SkipReason::kWrongPrediction);

  // 7 of 12 correct is 58.3%
  auto seven = perfect;
  for (std::size_t j : {0, 1, 2, 4, 5}) seven[j] = 0.9;
  CHECK(filter_decision(3, 3, seven, truth, ConceptKind::kBinary) == SkipReason::kLowConceptAccuracy);
  // 8 of 12 is 66.7%: kept
  auto eight = perfect;
  for (std::size_t j : {0, 1, 2, 4}) eight[j] = 0.9;
  CHECK_FALSE(filter_decision(3, 3, eight, truth, ConceptKind::kBinary).has_value());
  // exactly 60% is skipped
  std::vector<double> t5{1, 1, 1, 0, 0}, s5{0.9, 0.9, 0.9, 0.9, 0.9};
  CHECK(filter_decision(0, 0, s5, t5, ConceptKind::kBinary) == SkipReason::kLowConceptAccuracy);

  std::vector<double> ct{1.0, 2.0}, near{1.5, 2.5}, far{1.6, 2.6};
  CHECK_FALSE(filter_decision(0, 0, near, ct, ConceptKind::kContinuous).has_value());  // RMSE 0.5
  CHECK(filter_decision(0, 0, far, ct, ConceptKind::kContinuous) == SkipReason::kLowConceptAccuracy);

  CHECK_THROWS_AS(filter_decision(0, 0, near, t5, ConceptKind::kBinary), std::invalid_argument);
}

TEST_CASE("sample filter through a model") {
  CbmModel m(testing::linear_arch(2, 2, 2, ConceptKind::kBinary), 0, 0);
  testing::set_linear(m, {0, 0, 0, 0}, {3.0, -3.0}, {1, 0, 0, 1}, {1, 0});  // concepts {0}, class 0
  ConceptSample good{{0.1, 0.2}, 0, {1, 0}};
  ConceptSample wrong{{0.1, 0.2}, 1, {1, 0}};
  ConceptSample bad_concepts{{0.1, 0.2}, 0, {0, 1}};
  CHECK_FALSE(sample_filter(m, good).has_value());
  CHECK(sample_filter(m, wrong) == SkipReason::kWrongPrediction);
  CHECK(sample_filter(m, bad_concepts) == SkipReason::kLowConceptAccuracy);
  std::vector<ConceptSample> all{good, wrong, bad_concepts};
  const auto d = filter_samples(m, all);
  REQUIRE(d.size() == 3);
  CHECK_FALSE(d[0].has_value());
  CHECK(d[1] == SkipReason::kWrongPrediction);
  CHECK(d[2] == SkipReason::kLowConceptAccuracy);
  CHECK(filter_samples(m, std::vector<ConceptSample>{}).empty());
}

TEST_CASE("flip percentage examples") {
  std::vector<double> orig{0.9, 0.1, 0.9, 0.1}, pert{0.9, 0.9, 0.1, 0.1};
  CHECK(pct_flipped(orig, pert, ConceptKind::kBinary) == 50.0);
  CHECK(pct_flipped(orig, orig, ConceptKind::kBinary) == 0.0);
  std::vector<double> co{3.0, 1.0}, cp{5.5, 1.5};
  CHECK(pct_flipped(co, cp, ConceptKind::kContinuous, 0.5, 2.0) == 50.0);
  CHECK_THROWS_AS(pct_flipped(co, orig, ConceptKind::kBinary), std::invalid_argument);
  CHECK_THROWS_AS(pct_flipped(std::vector<double>{}, std::vector<double>{}, ConceptKind::kBinary),
                  std::invalid_argument);
}

TEST_CASE("introduced and retained examples") {
  CHECK(pct_introduced(Set{0, 1}, Set{0, 1}) == 0.0);
  CHECK(pct_retained(Set{0, 1}, Set{0, 1}) == 100.0);
  CHECK(pct_introduced(Set{0}, Set{0, 1, 2}) == 200.0);
  CHECK(pct_retained(Set{0}, Set{0, 1, 2}) == 100.0);
  CHECK(pct_introduced(Set{0, 1}, Set{2}) == 50.0);
  CHECK(pct_retained(Set{0, 1}, Set{2}) == 0.0);
  CHECK_FALSE(pct_introduced(Set{}, Set{1}).has_value());
  CHECK_FALSE(pct_retained(Set{}, Set{1}).has_value());
}

TEST_CASE("jaccard examples") {
  CHECK(jaccard(Set{1, 4}, Set{1, 4}) == 1.0);
  CHECK(jaccard(Set{1}, Set{2}) == 0.0);
  CHECK(jaccard(Set{0, 1, 2}, Set{1, 2, 3}) == 0.5);
  CHECK(jaccard(Set{}, Set{}) == 1.0);
  CHECK(jaccard(Set{}, Set{3}) == 0.0);
}

TEST_CASE("delta statistics") {
  std::vector<double> a{1, 2}, b{2, 4};
  CHECK(delta_stats(a, a).avg == 0.0);
  CHECK(delta_stats(a, a).min == 0.0);
  CHECK(delta_stats(a, b).avg == 1.5);
  CHECK(delta_stats(a, b).min == 1.0);
  CHECK_THROWS_AS(delta_stats(a, std::vector<double>{1}), std::invalid_argument);
}

TEST_CASE("mean and population standard deviation") {
  std::vector<double> v{2, 4, 4, 4, 5, 5, 7, 9};
  const auto r = mean_std(v);
  CHECK(r.mean == 5.0);
  CHECK(r.std == 2.0);
  CHECK(r.n == 8);
  CHECK(mean_std(std::vector<double>{3.5}).std == 0.0);
  CHECK(mean_std(std::vector<double>{}).n == 0);
}

TEST_CASE("set metrics match brute-force enumeration on 1000 random pairs") {
  std::mt19937_64 rng(8);
  for (const auto& p : testing::random_set_pairs(1000, 77)) {
    const auto a = members(p.orig, p.universe), b = members(p.pert, p.universe);
    CHECK(jaccard(a, b) == testing::oracle_jaccard(p));
    CHECK(pct_introduced(a, b) == testing::oracle_introduced(p));
    CHECK(pct_retained(a, b) == testing::oracle_retained(p));
    const auto so = testing::scores_for(p.orig, p.universe, rng), sp = testing::scores_for(p.pert, p.universe, rng);
    CHECK(presence_set(so) == a);
    CHECK(pct_flipped(so, sp, ConceptKind::kBinary) == testing::oracle_flipped(p));
  }
}

TEST_CASE("set metric properties") {
  for (const auto& p : testing::random_set_pairs(500, 3)) {
    const auto a = members(p.orig, p.universe), b = members(p.pert, p.universe);
    CHECK(jaccard(a, b) == jaccard(b, a));
    CHECK(jaccard(a, a) == 1.0);
    const double j = jaccard(a, b);
    CHECK((j >= 0.0 && j <= 1.0));
    if (auto r = pct_retained(a, b)) {
      CHECK((*r >= 0.0 && *r <= 100.0));
      // introduced and retained counts partition the perturbed set
      const double n = static_cast<double>(a.size());
      CHECK(std::round(*pct_introduced(a, b) * n / 100.0) + std::round(*r * n / 100.0) ==
            static_cast<double>(b.size()));
    }
  }
  // Growing the symmetric difference inside a fixed union never raises jaccard.
  const Set uni{0, 1, 2, 3, 4, 5};
  double prev = jaccard(uni, uni);
  for (std::size_t k = 1; k <= uni.size(); ++k) {
    const Set shrunk(uni.begin() + static_cast<long>(k), uni.end());
    const double j = jaccard(uni, shrunk);
    CHECK(j <= prev);
    prev = j;
  }
}

TEST_CASE("flip percentage properties") {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0, 1);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<double> a(9), b(9);
    for (auto& x : a) x = u(rng);
    for (auto& x : b) x = u(rng);
    CHECK(pct_flipped(a, a, ConceptKind::kBinary) == 0.0);
    CHECK(pct_flipped(a, a, ConceptKind::kContinuous) == 0.0);
    const double f = pct_flipped(a, b, ConceptKind::kBinary);
    CHECK((f >= 0.0 && f <= 100.0));
  }
}
