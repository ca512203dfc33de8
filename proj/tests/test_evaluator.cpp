#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "proqe/error.hpp"
#include "proqe/evaluator.hpp"

using namespace proqe;

namespace {
std::vector<EntityId> iota_ids(std::size_t n) {
  std::vector<EntityId> v(n);
  std::iota(v.begin(), v.end(), 0u);
  return v;
}

InductiveSplit mask_split(std::size_t n, std::vector<EntityId> emerging) {
  InductiveSplit s;
  s.emerging.assign(n, 0);
  for (auto e : emerging) s.emerging[e] = 1;
  s.v_test = std::move(emerging);
  return s;
}

// Score = id, so entity i ranks at position i + 1.
std::vector<double> by_id(std::size_t n) {
  std::vector<double> s(n);
  std::iota(s.begin(), s.end(), 0.0);
  return s;
}
}  // namespace

TEST_CASE("mrr examples") {
  const auto r = iota_ids(10);
  CHECK(mrr(r, EntitySet{0}, true) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(mrr(r, EntitySet{0, 1}, true) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(mrr(r, EntitySet{0, 1}, false) == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(mrr(r, EntitySet{9}, false) == doctest::Approx(0.1).epsilon(1e-12));
  // answers at positions 2 and 5: filtered ranks 2 and 4
  CHECK(mrr(r, EntitySet{1, 4}, true) == doctest::Approx((0.5 + 0.25) / 2).epsilon(1e-12));
  CHECK_THROWS_AS(mrr(r, EntitySet{}, true), InvalidArgument);
  CHECK_THROWS_AS(mrr(r, EntitySet{42}, true), InvalidArgument);
}

TEST_CASE("rank sorts ascending with ties to the smaller id") {
  std::vector<double> s{0.5, 0.1, 0.5, 0.1};
  CHECK(rank(s, iota_ids(4)) == std::vector<EntityId>{1, 3, 0, 2});
}

TEST_CASE("filtered mrr is never below unfiltered") {
  Rng rng(3);
  for (int rep = 0; rep < 200; ++rep) {
    auto ids = iota_ids(30);
    for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[uniform_index(rng, i)]);
    std::vector<EntityId> a;
    const auto k = 1 + uniform_index(rng, 6);
    for (std::size_t i = 0; i < k; ++i) a.push_back(static_cast<EntityId>(uniform_index(rng, 30)));
    auto A = EntitySet::from_unsorted(a);
    CHECK(mrr(ids, A, true) >= mrr(ids, A, false));
    CHECK(mrr(ids, A, true) <= 1.0);
  }
}

TEST_CASE("expected random mrr matches simulation") {
  Rng rng(11);
  for (auto [n, k] : {std::pair<std::size_t, std::size_t>{20, 1}, {20, 3}, {50, 7}}) {
    for (bool filtered : {true, false}) {
      const int trials = 20000;
      double sum = 0, sq = 0;
      EntitySet A = EntitySet::from_unsorted(iota_ids(k));
      auto ids = iota_ids(n);
      for (int t = 0; t < trials; ++t) {
        for (std::size_t i = n; i > 1; --i) std::swap(ids[i - 1], ids[uniform_index(rng, i)]);
        const double v = mrr(ids, A, filtered);
        sum += v;
        sq += v * v;
      }
      const double mean = sum / trials, sd = std::sqrt(sq / trials - mean * mean);
      CHECK(std::abs(expected_random_mrr(n, k, filtered) - mean) < 3 * sd / std::sqrt(trials));
    }
  }
  CHECK(expected_random_mrr(1, 1, true) == 1.0);
  CHECK_THROWS_AS(expected_random_mrr(3, 4, true), InvalidArgument);
}

TEST_CASE("SE answer rules") {
  auto split = mask_split(6, {4, 5});
  QueryRecord se{Structure::P1, {0}, {0}, EntitySet{1, 4, 5}, QueryClass::SE};
  CHECK(evaluation_answers(se, split, SeRule::Emerging) == EntitySet{4, 5});
  CHECK(evaluation_answers(se, split, SeRule::Seen) == EntitySet{1});
  QueryRecord es{Structure::P1, {4}, {0}, EntitySet{1, 2}, QueryClass::ES};
  CHECK(evaluation_answers(es, split, SeRule::Emerging) == EntitySet{1, 2});
}

TEST_CASE("report cells, averages and formats") {
  const std::size_t n = 10;
  auto split = mask_split(n, {8, 9});
  std::vector<QueryRecord> recs{
      {Structure::P1, {8}, {0}, EntitySet{0}, QueryClass::ES},        // rr 1
      {Structure::P1, {8}, {1}, EntitySet{3}, QueryClass::ES},        // rr 1/4
      {Structure::I2, {8, 1}, {0, 1}, EntitySet{9}, QueryClass::EE},  // rr 1/10
      {Structure::P1, {0}, {0}, EntitySet{1, 8}, QueryClass::SE},     // A = {8}: rr 1/9 unfiltered
      {Structure::P2, {0}, {0, 1}, EntitySet{2}, QueryClass::SE},     // no emerging answer: skipped
  };
  auto scorer = [&](const QueryRecord&, std::size_t) { return by_id(n); };
  EvalProtocol raw{false, SeRule::Emerging};
  auto rep = evaluate(recs, n, split, raw, scorer);
  const auto p1 = 0, i2 = 3;
  CHECK(*rep.cells[p1][1] == doctest::Approx((1.0 + 0.25) / 2).epsilon(1e-12));
  CHECK(rep.counts[p1][1] == 2);
  CHECK(*rep.cells[i2][0] == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(*rep.cells[p1][2] == doctest::Approx(1.0 / 9).epsilon(1e-12));
  CHECK_FALSE(rep.cells[1][2].has_value());
  CHECK(rep.skipped == 1);
  CHECK(*rep.average(QueryClass::ES) == doctest::Approx(0.625));
  CHECK(*rep.overall() == doctest::Approx((0.625 + 0.1 + 1.0 / 9) / 3));

  const auto csv = rep.csv();
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 11);
  CHECK(csv.rfind("structure,EE,ES,SE\n", 0) == 0);
  CHECK(csv.find("1p,,0.625000,0.111111\n") != std::string::npos);
  CHECK(csv.find("2p,,,\n") != std::string::npos);
  const auto text = rep.text();
  CHECK(text.find("62.50") != std::string::npos);
  CHECK(std::count(text.begin(), text.end(), '\n') == 11);

  // the same run with threads gives the same report
  auto rep4 = evaluate(recs, n, split, raw, scorer, 4);
  CHECK(rep4.csv() == csv);

  std::vector<QueryRecord> ss{{Structure::P1, {0}, {0}, EntitySet{1}, QueryClass::SS}};
  CHECK_THROWS_AS(evaluate(ss, n, split, raw, scorer), InvalidArgument);
}

TEST_CASE("random scorer lands near the analytic baseline") {
  const std::size_t n = 200;
  auto split = mask_split(n, {190, 191, 192, 193, 194, 195, 196, 197, 198, 199});
  Rng rng(5);
  std::vector<QueryRecord> recs;
  for (int i = 0; i < 500; ++i) {
    std::vector<EntityId> a;
    const auto k = 1 + uniform_index(rng, 5);
    for (std::size_t j = 0; j < k; ++j) a.push_back(static_cast<EntityId>(uniform_index(rng, n)));
    recs.push_back({Structure::P1, {190}, {0}, EntitySet::from_unsorted(a), QueryClass::ES});
  }
  EvalProtocol prot{true, SeRule::Emerging};
  auto scorer = [&](const QueryRecord&, std::size_t i) {
    Rng r(1000 + i);
    std::vector<double> s(n);
    for (auto& x : s) x = uniform01(r);
    return s;
  };
  auto got = evaluate(recs, n, split, prot, scorer);
  auto want = random_baseline(recs, n, split, prot);
  // standard error from the per-query reciprocal ranks
  std::vector<EntityId> cand(n);
  std::iota(cand.begin(), cand.end(), 0u);
  double sum = 0, sq = 0;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const double v = mrr(rank(scorer(recs[i], i), cand), recs[i].answers, true);
    sum += v;
    sq += v * v;
  }
  const double N = static_cast<double>(recs.size());
  const double sigma = std::sqrt((sq / N - (sum / N) * (sum / N)) / N);
  CHECK(*got.cells[0][1] == doctest::Approx(sum / N).epsilon(1e-12));
  CHECK(std::abs(*got.cells[0][1] - *want.cells[0][1]) < 3 * sigma);
}
