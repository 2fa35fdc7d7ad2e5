#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "xar/metrics.hpp"

using namespace xar;

namespace {

SimilarityMatrix from_rows(const std::vector<std::vector<double>>& rows) {
  SimilarityMatrix s(static_cast<int>(rows.size()),
                     static_cast<int>(rows[0].size()));
  for (int i = 0; i < s.q; ++i)
    for (int j = 0; j < s.g; ++j) s.at(i, j) = rows[i][j];
  return s;
}

// Sort-based ranking oracle: place the query's scores in descending order
// and take the first slot whose score matches the candidate (optimistic
// tie handling), minimized over the correct set.
double recall_oracle(const SimilarityMatrix& s, const GroundTruth& gt, int k) {
  k = std::min(k, s.g);
  int hits = 0;
  for (int i = 0; i < s.q; ++i) {
    std::vector<double> row(s.g);
    for (int j = 0; j < s.g; ++j) row[j] = s.at(i, j);
    std::vector<double> sorted = row;
    std::sort(sorted.begin(), sorted.end(), std::greater<double>());
    int best = s.g + 1;
    for (int c : gt[i]) {
      auto it = std::find(sorted.begin(), sorted.end(), row[c]);
      best = std::min(best, static_cast<int>(it - sorted.begin()) + 1);
    }
    if (best <= k) ++hits;
  }
  return 100.0 * hits / s.q;
}

double loss_oracle(const SimilarityMatrix& s, double m) {
  double total = 0;
  for (int i = 0; i < s.q; ++i)
    for (int j = 0; j < s.q; ++j) {
      if (j == i) continue;
      total += std::max(m + s.at(i, j) - s.at(i, i), 0.0);
      total += std::max(m + s.at(j, i) - s.at(i, i), 0.0);
    }
  return total / s.q;
}

double tape_loss(const SimilarityMatrix& s, double m) {
  Tape tape;
  Var sv = tape.leaf(Tensor({s.q, s.g}, s.s));
  return tape.val(ranking_loss(tape, sv, m)).data[0];
}

}  // namespace

TEST_CASE("ranking loss worked examples") {
  CHECK(tape_loss(from_rows({{0.9}}), 0.2) == 0.0);  // B=1: empty sum

  // perfect separation: all hinges inactive
  SimilarityMatrix sep = from_rows({{1, -1, -1}, {-1, 1, -1}, {-1, -1, 1}});
  CHECK(tape_loss(sep, 0.2) == 0.0);

  // brute-force evaluation of all four hinge terms: (0.3+0.1+0.3+0.5)/2
  SimilarityMatrix s = from_rows({{0.5, 0.6}, {0.4, 0.3}});
  CHECK(std::fabs(tape_loss(s, 0.2) - 0.6) < 1e-9);
  CHECK(std::fabs(ranking_loss_value(s, 0.2) - 0.6) < 1e-9);
}

TEST_CASE("ranking loss equals double-loop oracle on random matrices") {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    int b = 1 + rng.uniform_int(16);
    SimilarityMatrix s(b, b);
    for (auto& v : s.s) v = rng.uniform(-1, 1);
    double got = tape_loss(s, 0.2);
    CHECK(got >= 0.0);
    CHECK(std::fabs(got - loss_oracle(s, 0.2)) < 1e-6);
  }
}

TEST_CASE("ranking loss is shift invariant") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    int b = 2 + rng.uniform_int(8);
    SimilarityMatrix s(b, b);
    for (auto& v : s.s) v = rng.uniform(-1, 1);
    SimilarityMatrix shifted = s;
    double c = rng.uniform(-5, 5);
    for (auto& v : shifted.s) v += c;
    CHECK(std::fabs(tape_loss(s, 0.2) - tape_loss(shifted, 0.2)) < 1e-9);
  }
}

TEST_CASE("ranking loss gradient away from hinge kinks") {
  Rng rng(3);
  int checked = 0;
  while (checked < 10) {
    int b = 2 + rng.uniform_int(4);
    Tensor s({b, b});
    for (auto& v : s.data) v = rng.uniform(-1, 1);
    // skip draws that land near a kink
    bool near_kink = false;
    for (int i = 0; i < b && !near_kink; ++i)
      for (int j = 0; j < b; ++j) {
        if (i == j) continue;
        if (std::fabs(0.2 + s.at(i, j) - s.at(i, i)) < 1e-3 ||
            std::fabs(0.2 + s.at(j, i) - s.at(i, i)) < 1e-3)
          near_kink = true;
      }
    if (near_kink) continue;
    auto rep = finite_diff_check(
        [](Tape& tp, Var x) { return ranking_loss(tp, x, 0.2); }, s);
    CAPTURE(rep.max_rel_err);
    CHECK(rep.pass);
    ++checked;
  }
}

TEST_CASE("ranking loss rejects non-square input") {
  Tape tape;
  Var s = tape.leaf(Tensor({2, 3}));
  CHECK_THROWS_AS(ranking_loss(tape, s, 0.2), ShapeError);
}

TEST_CASE("recall at k worked examples") {
  SimilarityMatrix id = from_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  GroundTruth gt = {{0}, {1}, {2}};
  CHECK(recall_at_k(id, gt, 1) == 100.0);

  SimilarityMatrix anti = from_rows({{0, 1}, {1, 0}});
  GroundTruth gt2 = {{0}, {1}};
  CHECK(recall_at_k(anti, gt2, 1) == 0.0);
  CHECK(recall_at_k(anti, gt2, 2) == 100.0);

  // only query 0 correct at rank 1; queries 1 and 2 rank 3 and 2
  SimilarityMatrix s3 =
      from_rows({{0.9, 0.2, 0.5}, {0.8, 0.3, 0.4}, {0.1, 0.7, 0.6}});
  GroundTruth gt3 = {{0}, {1}, {2}};
  CHECK(recall_at_k(s3, gt3, 1) == doctest::Approx(100.0 / 3).epsilon(1e-9));
  CHECK(recall_at_k(s3, gt3, 2) == doctest::Approx(200.0 / 3).epsilon(1e-9));
  CHECK(recall_oracle(s3, gt3, 1) == doctest::Approx(100.0 / 3).epsilon(1e-9));
}

TEST_CASE("recall matches sort-based oracle with ties and multi-caption gt") {
  Rng rng(4);
  const double levels[5] = {0.0, 0.25, 0.5, 0.75, 1.0};
  for (int trial = 0; trial < 1000; ++trial) {
    int q = 1 + rng.uniform_int(64);
    int g = 1 + rng.uniform_int(64);
    SimilarityMatrix s(q, g);
    bool coarse = trial % 2 == 0;  // coarse draws force duplicate scores
    for (auto& v : s.s)
      v = coarse ? levels[rng.uniform_int(5)] : rng.uniform(-1, 1);
    GroundTruth gt(q);
    for (int i = 0; i < q; ++i) {
      int n = 1 + rng.uniform_int(std::min(3, g));
      for (int c = 0; c < n; ++c) gt[i].push_back(rng.uniform_int(g));
    }
    int k = 1 + rng.uniform_int(10);
    double got = recall_at_k(s, gt, k);
    CHECK(got == doctest::Approx(recall_oracle(s, gt, k)).epsilon(1e-12));
  }
}

TEST_CASE("recall is nondecreasing in k") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    int q = 2 + rng.uniform_int(10), g = 2 + rng.uniform_int(10);
    SimilarityMatrix s(q, g);
    for (auto& v : s.s) v = rng.uniform(-1, 1);
    GroundTruth gt(q);
    for (int i = 0; i < q; ++i) gt[i] = {rng.uniform_int(g)};
    double prev = 0;
    for (int k = 1; k <= g; ++k) {
      double r = recall_at_k(s, gt, k);
      CHECK(r >= prev);
      prev = r;
    }
    // k beyond gallery size clamps
    CHECK(recall_at_k(s, gt, g + 5) == recall_at_k(s, gt, g));
  }
}

TEST_CASE("geometric mean score") {
  CHECK(geometric_mean_score(42.0, 42.0, 42.0) == doctest::Approx(42.0));
  CHECK(geometric_mean_score(0.0, 50.0, 80.0) == 0.0);
  CHECK(geometric_mean_score(10, 40, 70) == doctest::Approx(30.366).epsilon(1e-4));
  CHECK_THROWS_AS(geometric_mean_score(-1, 50, 50), ConfigError);
}

TEST_CASE("seed aggregation") {
  auto mk = [](double r1) {
    SeedRun r;
    r.recalls = {{1, r1}, {5, r1 + 30}, {10, r1 + 50}};
    r.geom_mean =
        geometric_mean_score(r.recalls[1], r.recalls[5], r.recalls[10]);
    return r;
  };
  RetrievalReport rep =
      aggregate_seeds("t2a", {mk(18.0), mk(18.2), mk(17.8)});
  CHECK(rep.mean_recall(1) == doctest::Approx(18.0));
  CHECK(rep.std_recall(1) == doctest::Approx(0.2));
  CHECK(format_mean_std(rep.mean_recall(1),
                        std::array<double, 1>{rep.std_recall(1)}.data()) ==
        "18.0±0.2");

  RetrievalReport same = aggregate_seeds("t2a", {mk(20.0), mk(20.0)});
  CHECK(same.std_recall(1) == 0.0);

  RetrievalReport single = aggregate_seeds("t2a", {mk(20.0)});
  CHECK_FALSE(single.has_std());
  CHECK(format_mean_std(single.mean_recall(1), nullptr) == "20.0");

  CHECK_THROWS_AS(aggregate_seeds("t2a", {}), ConfigError);
}

TEST_CASE("report JSON round trip") {
  SeedRun a{7, {{1, 18.0}, {5, 40.0}, {10, 62.0}},
            geometric_mean_score(18.0, 40.0, 62.0)};
  SeedRun b{8, {{1, 18.2}, {5, 41.0}, {10, 63.0}},
            geometric_mean_score(18.2, 41.0, 63.0)};
  RetrievalReport rep = aggregate_seeds("a2t", {a, b});
  nlohmann::json j = report_to_json(rep);
  CHECK(j.contains("recalls"));
  CHECK(j.contains("geom_mean"));
  CHECK(j.contains("mean"));
  CHECK(j.contains("std"));
  RetrievalReport back = report_from_json(j);
  CHECK(back.direction == "a2t");
  REQUIRE(back.runs.size() == 2);
  CHECK(back.runs[0].seed == 7);
  CHECK(back.mean_recall(1) == doctest::Approx(rep.mean_recall(1)));
  CHECK(back.std_recall(10) == doctest::Approx(rep.std_recall(10)));
}
