// Command-line front end: train / evaluate / query / report.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "xar/data.hpp"
#include "xar/encoders.hpp"
#include "xar/metrics.hpp"
#include "xar/trainer.hpp"

namespace {

using nlohmann::json;

json load_json_file(const xar::fs::path& path, const char* what) {
  std::ifstream in(path);
  if (!in)
    throw xar::ConfigError(std::string(what) + " not found: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw xar::ConfigError(std::string(what) + " parse error: " + e.what());
  }
  return j;
}

struct TrainArgs {
  std::string config, data, out, init;
  int64_t seed = -1;
  double train_fraction = -1.0;
};

int cmd_train(const TrainArgs& a) {
  xar::ExperimentConfig cfg = xar::config_from_json(
      load_json_file(a.config, "config"));
  if (a.seed >= 0) cfg.train.seeds = {static_cast<uint64_t>(a.seed)};
  if (a.train_fraction > 0) cfg.train.train_fraction = a.train_fraction;
  xar::Dataset ds = xar::load_dataset(a.data);
  xar::resolve_experts(cfg.model, ds);
  xar::resolve_padding(cfg.padding, cfg.model);
  cfg.model.validate();
  cfg.train.validate();

  xar::ParamStore init_params_store;
  const xar::ParamStore* init = nullptr;
  if (!a.init.empty()) {
    xar::Checkpoint ck = xar::load_checkpoint(a.init);
    init_params_store = std::move(ck.params);
    init = &init_params_store;
  }
  xar::fs::path out_dir(a.out);
  xar::fs::create_directories(out_dir);
  xar::ExperimentResult res =
      xar::run_experiment(cfg, ds, init, &out_dir);

  json report;
  report["config"] = xar::config_to_json(cfg);
  report["train_fraction"] = res.train_fraction;
  report["train_size"] = static_cast<int>(
      xar::subsample_train(ds.split_indices("train"), cfg.train.train_fraction,
                           cfg.train.seeds[0])
          .size());
  report["best_epochs"] = res.best_epochs;
  report["t2a"] = xar::report_to_json(res.t2a);
  report["a2t"] = xar::report_to_json(res.a2t);
  std::ofstream out(out_dir / "report.json");
  out << report.dump(1) << "\n";

  auto line = [&](const xar::RetrievalReport& r) {
    double s1 = 0, s10 = 0;
    const double* p1 = nullptr;
    const double* p10 = nullptr;
    if (r.has_std()) {
      s1 = r.std_recall(1);
      s10 = r.std_recall(10);
      p1 = &s1;
      p10 = &s10;
    }
    std::printf("%s  R@1 %s  R@10 %s  geom %.1f\n", r.direction.c_str(),
                xar::format_mean_std(r.mean_recall(1), p1).c_str(),
                xar::format_mean_std(r.mean_recall(10), p10).c_str(),
                r.mean_geom());
  };
  line(res.t2a);
  line(res.a2t);
  return 0;
}

struct EvalArgs {
  std::string ckpt, data, split = "test";
  bool as_json = false;
};

xar::ExperimentConfig checkpoint_config(const xar::Checkpoint& ck,
                                        const xar::Dataset& ds) {
  xar::ExperimentConfig cfg = xar::config_from_json(ck.config);
  for (const auto& e : cfg.model.experts) {
    bool found = false;
    for (const auto& d : ds.experts)
      if (d.name == e.name) {
        if (d.dim != e.dim)
          throw xar::ConfigError("checkpoint expert '" + e.name + "' has dim " +
                                 std::to_string(e.dim) + " but dataset has " +
                                 std::to_string(d.dim));
        found = true;
      }
    if (!found)
      throw xar::ConfigError("checkpoint expert '" + e.name +
                             "' not present in dataset");
  }
  xar::resolve_padding(cfg.padding, cfg.model);
  return cfg;
}

int cmd_evaluate(const EvalArgs& a) {
  xar::Checkpoint ck = xar::load_checkpoint(a.ckpt);
  xar::Dataset ds = xar::load_dataset(a.data);
  xar::ExperimentConfig cfg = checkpoint_config(ck, ds);
  std::vector<int> idx = ds.split_indices(a.split);
  if (idx.empty())
    throw xar::DataError("split '" + a.split + "' is empty");
  xar::SplitEvaluation ev =
      xar::evaluate_split(ds, idx, cfg.model, cfg.padding, ck.params);
  auto run_json = [](const xar::SeedRun& r) {
    json j;
    for (const auto& kv : r.recalls)
      j["recalls"][std::to_string(kv.first)] = kv.second;
    j["geom_mean"] = r.geom_mean;
    return j;
  };
  if (a.as_json) {
    json j;
    j["split"] = a.split;
    j["recalls"] = run_json(ev.t2a)["recalls"];
    j["geom_mean"] = ev.t2a.geom_mean;
    j["t2a"] = run_json(ev.t2a);
    j["a2t"] = run_json(ev.a2t);
    std::cout << j.dump(1) << "\n";
  } else {
    std::printf("split %s\n", a.split.c_str());
    std::printf("%-4s %6s %6s %6s %6s\n", "dir", "R@1", "R@5", "R@10", "geom");
    auto row = [](const char* d, const xar::SeedRun& r) {
      std::printf("%-4s %6.1f %6.1f %6.1f %6.1f\n", d, r.recalls.at(1),
                  r.recalls.at(5), r.recalls.at(10), r.geom_mean);
    };
    row("t2a", ev.t2a);
    row("a2t", ev.a2t);
  }
  return 0;
}

struct QueryArgs {
  std::string ckpt, data, text, split = "all";
  int topk = 10;
};

int cmd_query(const QueryArgs& a) {
  xar::Checkpoint ck = xar::load_checkpoint(a.ckpt);
  xar::Dataset ds = xar::load_dataset(a.data);
  xar::ExperimentConfig cfg = checkpoint_config(ck, ds);
  std::vector<std::string> tokens;
  try {
    tokens = xar::tokenize_caption(a.text);
  } catch (const xar::DataError&) {
    throw xar::ConfigError("query is empty after tokenization");
  }
  std::vector<int> idx = ds.split_indices(a.split);
  if (idx.empty()) throw xar::DataError("split '" + a.split + "' is empty");
  xar::EvalEmbeddings gallery =
      xar::compute_embeddings(ds, idx, cfg.model, cfg.padding, ck.params);

  xar::Tape tape;
  tape.grad_enabled = false;
  xar::TapeParams tp = xar::lift_params(tape, ck.params, false);
  xar::Tensor tok = xar::embed_tokens(tokens, ds.words);
  auto [tpad, tmask] = xar::pad_sequence(tok, cfg.padding.text);
  xar::EncodedText et = xar::encode_text(tape, tpad, tmask, cfg.model, tp);

  int n = static_cast<int>(gallery.audio.size());
  std::vector<std::pair<double, int>> scored(n);
  const xar::Tensor& w = tape.val(et.weights);
  for (int j = 0; j < n; ++j) {
    double sim = 0.0;
    for (size_t e = 0; e < gallery.audio[j].size(); ++e) {
      const xar::Tensor& te = tape.val(et.expert_emb[e]);
      double d = 0.0;
      for (size_t x = 0; x < te.data.size(); ++x)
        d += te.data[x] * gallery.audio[j][e][x];
      sim += w.data[e] * d;
    }
    scored[j] = {sim, j};
  }
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  int k = a.topk;
  if (k > n) {
    std::cerr << "warning: --topk " << k << " exceeds gallery size " << n
              << ", returning full gallery\n";
    k = n;
  }
  for (int r = 0; r < k; ++r)
    std::printf("%d %s %.4f\n", r + 1,
                gallery.sample_ids[scored[r].second].c_str(), scored[r].first);
  return 0;
}

struct ReportArgs {
  std::vector<std::string> runs;
};

int cmd_report(const ReportArgs& a) {
  if (a.runs.empty()) throw xar::ConfigError("report: no run files given");
  struct Row {
    std::string label;
    std::vector<xar::SeedRun> t2a, a2t;
  };
  std::vector<Row> rows;
  std::vector<int> expected_ks;
  for (const auto& path : a.runs) {
    json j = load_json_file(path, "run report");
    if (!j.contains("t2a") || !j.contains("a2t"))
      throw xar::ConfigError("run report " + path +
                             ": missing t2a/a2t directions");
    xar::RetrievalReport t2a = xar::report_from_json(j.at("t2a"));
    xar::RetrievalReport a2t = xar::report_from_json(j.at("a2t"));
    if (t2a.direction != "t2a" || a2t.direction != "a2t")
      throw xar::ConfigError("run report " + path + ": mixed directions");
    if (expected_ks.empty())
      expected_ks = t2a.ks();
    else if (t2a.ks() != expected_ks || a2t.ks() != expected_ks)
      throw xar::ConfigError("run report " + path + ": mixed metric sets");
    std::string label = "run";
    if (j.contains("config")) {
      const auto& m = j["config"]["model"];
      label = m.value("arch", "?");
      for (const auto& e : m["experts"])
        label += "+" + e.at("name").get<std::string>();
      double f = j.value("train_fraction", 1.0);
      if (f < 1.0) label += " f=" + std::to_string(f).substr(0, 4);
    }
    Row* row = nullptr;
    for (auto& r : rows)
      if (r.label == label) row = &r;
    if (!row) {
      rows.push_back(Row{label, {}, {}});
      row = &rows.back();
    }
    for (const auto& r : t2a.runs) row->t2a.push_back(r);
    for (const auto& r : a2t.runs) row->a2t.push_back(r);
  }
  auto cell = [](const std::vector<xar::SeedRun>& runs, int k) {
    xar::RetrievalReport r = xar::aggregate_seeds("x", runs);
    double sd = 0.0;
    const double* p = nullptr;
    if (r.has_std()) {
      sd = r.std_recall(k);
      p = &sd;
    }
    return xar::format_mean_std(r.mean_recall(k), p);
  };
  std::printf("%-28s %12s %12s %12s %12s\n", "configuration", "t2a R@1",
              "t2a R@10", "a2t R@1", "a2t R@10");
  for (const auto& row : rows)
    std::printf("%-28s %12s %12s %12s %12s\n", row.label.c_str(),
                cell(row.t2a, 1).c_str(), cell(row.t2a, 10).c_str(),
                cell(row.a2t, 1).c_str(), cell(row.a2t, 10).c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-modal text/audio retrieval"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a retrieval model");
  train->add_option("--config", ta.config, "experiment config (JSON)")
      ->required();
  train->add_option("--data", ta.data, "dataset directory")->required();
  train->add_option("--out", ta.out, "output checkpoint directory")->required();
  train->add_option("--init", ta.init, "init checkpoint directory");
  train->add_option("--seed", ta.seed, "single-seed override");
  train->add_option("--train-fraction", ta.train_fraction,
                    "training-split fraction override");

  EvalArgs ea;
  auto* eval = app.add_subcommand("evaluate", "evaluate a checkpoint");
  eval->add_option("--ckpt", ea.ckpt, "checkpoint directory")->required();
  eval->add_option("--data", ea.data, "dataset directory")->required();
  eval->add_option("--split", ea.split, "dataset split (default test)");
  eval->add_flag("--json", ea.as_json, "machine-readable output");

  QueryArgs qa;
  auto* query = app.add_subcommand("query", "rank the gallery for a caption");
  query->add_option("--ckpt", qa.ckpt, "checkpoint directory")->required();
  query->add_option("--data", qa.data, "dataset directory")->required();
  query->add_option("--text", qa.text, "free-form text query")->required();
  query->add_option("--topk", qa.topk, "results to print (default 10)");
  query->add_option("--split", qa.split, "gallery split (default all)");

  ReportArgs ra;
  auto* report = app.add_subcommand("report", "aggregate run reports");
  report->add_option("--runs", ra.runs, "run report files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*train) return cmd_train(ta);
    if (*eval) return cmd_evaluate(ea);
    if (*query) return cmd_query(qa);
    if (*report) return cmd_report(ra);
  } catch (const xar::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const xar::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const xar::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
