#pragma once

#include <cmath>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "xar/tensor.hpp"

namespace xar {

// Rows = queries, columns = gallery items.
struct SimilarityMatrix {
  int q = 0, g = 0;
  std::vector<double> s;
  std::vector<std::string> query_ids, gallery_ids;

  SimilarityMatrix() = default;
  SimilarityMatrix(int q_, int g_) : q(q_), g(g_), s(static_cast<size_t>(q_) * g_, 0.0) {}

  double& at(int i, int j) { return s[static_cast<size_t>(i) * g + j]; }
  double at(int i, int j) const { return s[static_cast<size_t>(i) * g + j]; }

  SimilarityMatrix transposed() const {
    SimilarityMatrix t(g, q);
    for (int i = 0; i < q; ++i)
      for (int j = 0; j < g; ++j) t.at(j, i) = at(i, j);
    t.query_ids = gallery_ids;
    t.gallery_ids = query_ids;
    return t;
  }
};

// query index -> nonempty set of correct gallery indices.
using GroundTruth = std::vector<std::vector<int>>;

// Bidirectional max-margin ranking loss over a square batch similarity
// matrix whose diagonal holds the matched pairs:
//   L = (1/B) sum_{i, j != i} [m + s_ij - s_ii]_+ + [m + s_ji - s_ii]_+
inline Var ranking_loss(Tape& tape, Var s, double margin) {
  const Tensor& sv = tape.val(s);
  if (sv.ndim() != 2 || sv.shape[0] != sv.shape[1])
    throw ShapeError("ranking_loss: square matrix required");
  int b = sv.shape[0];
  if (b == 1) return tape.constant(0.0);
  Tensor offdiag({b, b});
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < b; ++j) offdiag.at(i, j) = (i == j) ? 0.0 : 1.0;
  Var maskv = tape.constant(std::move(offdiag));
  Var d = diag(s);
  Var t1 = relu(add_scalar(sub_colvec(s, d), margin));
  Var t2 = relu(add_scalar(sub_colvec(transpose(s), d), margin));
  Var total = add(sum(mul(t1, maskv)), sum(mul(t2, maskv)));
  return scale(total, 1.0 / b);
}

// Tape-free reference of the same formula, used as the training-loss value
// check and by tests as an oracle term.
inline double ranking_loss_value(const SimilarityMatrix& s, double margin) {
  if (s.q != s.g) throw ShapeError("ranking_loss: square matrix required");
  double total = 0.0;
  for (int i = 0; i < s.q; ++i)
    for (int j = 0; j < s.q; ++j) {
      if (i == j) continue;
      total += std::max(margin + s.at(i, j) - s.at(i, i), 0.0);
      total += std::max(margin + s.at(j, i) - s.at(i, i), 0.0);
    }
  return total / s.q;
}

// Rank of the best correct item = 1 + count of strictly greater scores
// (optimistic tie rule); with several correct items the minimum rank
// counts. Returns a percentage.
inline double recall_at_k(const SimilarityMatrix& s, const GroundTruth& gt,
                          int k) {
  if (k < 1) throw ConfigError("recall_at_k: k must be >= 1");
  if (static_cast<int>(gt.size()) != s.q)
    throw ConfigError("recall_at_k: ground truth size mismatch");
  if (k > s.g) {
    std::cerr << "warning: recall_at_k: k=" << k << " exceeds gallery size "
              << s.g << ", clamping\n";
    k = s.g;
  }
  int hits = 0;
  for (int i = 0; i < s.q; ++i) {
    if (gt[i].empty())
      throw ConfigError("recall_at_k: empty ground truth for query " +
                        std::to_string(i));
    int best_rank = s.g + 1;
    for (int c : gt[i]) {
      if (c < 0 || c >= s.g)
        throw ConfigError("recall_at_k: ground truth index out of range");
      int greater = 0;
      for (int j = 0; j < s.g; ++j)
        if (s.at(i, j) > s.at(i, c)) ++greater;
      best_rank = std::min(best_rank, greater + 1);
    }
    if (best_rank <= k) ++hits;
  }
  return 100.0 * hits / s.q;
}

inline double geometric_mean_score(double r1, double r5, double r10) {
  if (r1 < 0 || r5 < 0 || r10 < 0 || r1 > 100 || r5 > 100 || r10 > 100)
    throw ConfigError("geometric_mean_score: recalls must be in [0,100]");
  return std::cbrt(r1 * r5 * r10);
}

struct SeedRun {
  uint64_t seed = 0;
  std::map<int, double> recalls;  // k -> percentage
  double geom_mean = 0.0;
};

struct RetrievalReport {
  std::string direction;  // "t2a" | "a2t"
  std::vector<SeedRun> runs;

  bool has_std() const { return runs.size() >= 2; }

  double mean_recall(int k) const {
    double s = 0.0;
    for (const auto& r : runs) s += r.recalls.at(k);
    return s / runs.size();
  }
  double std_recall(int k) const {
    double m = mean_recall(k), s = 0.0;
    for (const auto& r : runs) {
      double d = r.recalls.at(k) - m;
      s += d * d;
    }
    return std::sqrt(s / (runs.size() - 1));
  }
  double mean_geom() const {
    double s = 0.0;
    for (const auto& r : runs) s += r.geom_mean;
    return s / runs.size();
  }
  double std_geom() const {
    double m = mean_geom(), s = 0.0;
    for (const auto& r : runs) {
      double d = r.geom_mean - m;
      s += d * d;
    }
    return std::sqrt(s / (runs.size() - 1));
  }
  std::vector<int> ks() const {
    std::vector<int> out;
    for (const auto& kv : runs.at(0).recalls) out.push_back(kv.first);
    return out;
  }
};

// Per-metric mean and sample standard deviation over seeds.
inline RetrievalReport aggregate_seeds(const std::string& direction,
                                       const std::vector<SeedRun>& runs) {
  if (runs.empty()) throw ConfigError("aggregate_seeds: no runs");
  RetrievalReport r;
  r.direction = direction;
  r.runs = runs;
  return r;
}

inline nlohmann::json report_to_json(const RetrievalReport& r) {
  nlohmann::json j;
  j["direction"] = r.direction;
  nlohmann::json recalls, mean, stdj;
  for (int k : r.ks()) {
    recalls[std::to_string(k)] = r.mean_recall(k);
    mean[std::to_string(k)] = r.mean_recall(k);
    if (r.has_std()) stdj[std::to_string(k)] = r.std_recall(k);
  }
  j["recalls"] = recalls;
  j["geom_mean"] = r.mean_geom();
  std::vector<uint64_t> seeds;
  nlohmann::json per_seed = nlohmann::json::array();
  for (const auto& run : r.runs) {
    seeds.push_back(run.seed);
    nlohmann::json jr;
    jr["seed"] = run.seed;
    for (const auto& kv : run.recalls)
      jr["recalls"][std::to_string(kv.first)] = kv.second;
    jr["geom_mean"] = run.geom_mean;
    per_seed.push_back(jr);
  }
  j["seeds"] = seeds;
  j["per_seed"] = per_seed;
  j["mean"] = mean;
  if (r.has_std()) {
    j["std"] = stdj;
    j["std"]["geom_mean"] = r.std_geom();
  }
  return j;
}

inline RetrievalReport report_from_json(const nlohmann::json& j) {
  RetrievalReport r;
  r.direction = j.at("direction").get<std::string>();
  for (const auto& jr : j.at("per_seed")) {
    SeedRun run;
    run.seed = jr.at("seed").get<uint64_t>();
    for (auto it = jr.at("recalls").begin(); it != jr.at("recalls").end(); ++it)
      run.recalls[std::stoi(it.key())] = it.value().get<double>();
    run.geom_mean = jr.at("geom_mean").get<double>();
    r.runs.push_back(run);
  }
  if (r.runs.empty()) throw DataError("report has no per-seed runs");
  return r;
}

// "18.0±0.2" with one decimal, the results-table convention.
inline std::string format_mean_std(double mean, const double* stddev) {
  char buf[64];
  if (stddev)
    std::snprintf(buf, sizeof(buf), "%.1f±%.1f", mean, *stddev);
  else
    std::snprintf(buf, sizeof(buf), "%.1f", mean);
  return buf;
}

}  // namespace xar
