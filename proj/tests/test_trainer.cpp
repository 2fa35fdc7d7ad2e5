#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "xar/trainer.hpp"

using namespace xar;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("xar_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ParamStore scalar_params(double value) {
  ParamStore p;
  p.add("w", Tensor({1}, {value}));
  return p;
}

GradMap scalar_grad(double g) {
  GradMap m;
  m["w"] = Tensor({1}, {g});
  return m;
}

// Independent step-by-step evaluation of the published RAdam recurrence,
// including the float32 rounding the trainer applies after each step.
double radam_oracle(const std::vector<double>& grads, double lr, double wd) {
  double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double rho_inf = 2.0 / (1.0 - b2) - 1.0;
  double theta = 0.0, m = 0.0, v = 0.0;
  for (size_t i = 0; i < grads.size(); ++i) {
    double t = static_cast<double>(i + 1);
    double g = grads[i] + wd * theta;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    double mhat = m / (1 - std::pow(b1, t));
    double rho = rho_inf - 2 * t * std::pow(b2, t) / (1 - std::pow(b2, t));
    if (rho > 4) {
      double r = std::sqrt((rho - 4) * (rho - 2) * rho_inf /
                           ((rho_inf - 4) * (rho_inf - 2) * rho));
      theta -= lr * r * mhat / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    } else {
      theta -= lr * mhat;
    }
    theta = static_cast<double>(static_cast<float>(theta));
  }
  return theta;
}

ModelConfig tiny_model(const std::string& arch, int text_dim,
                       const std::vector<SynthExpert>& experts) {
  ModelConfig m;
  m.arch = arch;
  m.word_dim = text_dim;
  m.text_clusters = 2;
  m.text_ghosts = 1;
  m.joint_dim = 12;
  m.common_dim = 12;
  for (const auto& e : experts) m.experts.push_back({e.name, e.dim, 2, 0});
  return m;
}

PaddingSpec tiny_padding(const ModelConfig& m) {
  PaddingSpec p;
  p.text = 8;
  for (const auto& e : m.experts) p.audio[e.name] = 6;
  return p;
}

Dataset make_synth(const std::string& name, SynthSpec spec) {
  fs::path dir = fresh_dir(name);
  synth_generate(spec, dir);
  return load_dataset(dir);
}

SynthSpec overfit_spec() {
  SynthSpec s;
  s.n_samples = 32;
  s.latent_dim = 16;
  s.text_dim = 12;
  s.experts = {{"e1", 10, 0}, {"e2", 8, 0}};
  s.sigma = 0.05;
  s.seed = 42;
  s.min_tokens = 3;
  s.max_tokens = 6;
  s.min_frames = 3;
  s.max_frames = 5;
  return s;
}

}  // namespace

TEST_CASE("radam step worked examples") {
  // zero gradient, wd = 0: parameters unchanged
  ParamStore p = scalar_params(0.5);
  OptState st = init_opt_state(p);
  radam_step(p, scalar_grad(0.0), st, 0.01, 0.0);
  CHECK(p.at("w").data[0] == 0.5);

  // one step from 0 with grad 1: rho_1 <= 4, so a plain momentum step of
  // lr * mhat = 0.01
  ParamStore q = scalar_params(0.0);
  OptState st2 = init_opt_state(q);
  radam_step(q, scalar_grad(1.0), st2, 0.01, 0.0);
  CHECK(q.at("w").data[0] == doctest::Approx(-0.01).epsilon(1e-7));
  CHECK(q.at("w").data[0] ==
        doctest::Approx(radam_oracle({1.0}, 0.01, 0.0)).epsilon(1e-12));
}

TEST_CASE("radam matches the reference recurrence over many steps") {
  Rng rng(9);
  std::vector<double> grads;
  ParamStore p = scalar_params(0.0);
  OptState st = init_opt_state(p);
  for (int i = 0; i < 20; ++i) {
    grads.push_back(rng.uniform(-1, 1));
    radam_step(p, scalar_grad(grads.back()), st, 0.01, 0.001);
  }
  // wd couples theta into the gradient, so replay with the oracle's theta
  double want = radam_oracle(grads, 0.01, 0.001);
  CHECK(p.at("w").data[0] == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("radam is deterministic and validates gradients") {
  ParamStore a = scalar_params(0.3), b = scalar_params(0.3);
  OptState sa = init_opt_state(a), sb = init_opt_state(b);
  for (int i = 0; i < 5; ++i) {
    radam_step(a, scalar_grad(0.7), sa, 0.01, 0.001);
    radam_step(b, scalar_grad(0.7), sb, 0.01, 0.001);
  }
  CHECK(a.at("w").data[0] == b.at("w").data[0]);

  GradMap nan = scalar_grad(std::nan(""));
  CHECK_THROWS_AS(radam_step(a, nan, sa, 0.01, 0.0), NumericError);
  CHECK_THROWS_AS(radam_step(a, GradMap{}, sa, 0.01, 0.0), NumericError);
}

TEST_CASE("lookahead sync") {
  ParamStore fast = scalar_params(1.0);
  OptState st = init_opt_state(scalar_params(0.0));

  // non-sync step: no-op
  lookahead_sync(fast, st.slow, 0.5, 3, 5);
  CHECK(fast.at("w").data[0] == 1.0);
  CHECK(st.slow["w"].data[0] == 0.0);

  // sync step, alpha = 0.5: both land at the midpoint
  lookahead_sync(fast, st.slow, 0.5, 5, 5);
  CHECK(fast.at("w").data[0] == 0.5);
  CHECK(st.slow["w"].data[0] == 0.5);

  // alpha = 1: slow jumps to fast, fast unchanged
  ParamStore f2 = scalar_params(2.0);
  OptState s2 = init_opt_state(scalar_params(0.0));
  lookahead_sync(f2, s2.slow, 1.0, 5, 5);
  CHECK(f2.at("w").data[0] == 2.0);
  CHECK(s2.slow["w"].data[0] == 2.0);
}

TEST_CASE("train epoch batches, determinism, and overfit trend") {
  SynthSpec spec = overfit_spec();
  Dataset ds = make_synth("epoch", spec);
  ModelConfig model = tiny_model("moee", spec.text_dim, spec.experts);
  PaddingSpec pad = tiny_padding(model);
  TrainConfig tc;
  tc.batch_size = 16;  // 32 samples -> 2 batches
  std::vector<int> idx = ds.split_indices("train");
  REQUIRE(idx.size() == 32);

  auto run_epochs = [&](int n_epochs) {
    ParamStore params = init_params(model, 1);
    OptState opt = init_opt_state(params);
    std::vector<EpochStats> stats;
    for (int e = 0; e < n_epochs; ++e) {
      Rng erng(mix_seed(1, e));
      stats.push_back(
          train_epoch(params, opt, ds, idx, model, pad, tc, 0.01, erng));
    }
    return stats;
  };

  auto s1 = run_epochs(5);
  CHECK(s1[0].batches == 2);
  CHECK(s1[4].mean_loss < s1[0].mean_loss);  // overfit set: loss falls

  auto s2 = run_epochs(5);
  for (int e = 0; e < 5; ++e) CHECK(s1[e].mean_loss == s2[e].mean_loss);

  TrainConfig empty_tc;
  ParamStore params = init_params(model, 1);
  OptState opt = init_opt_state(params);
  Rng rng(0);
  CHECK_THROWS_AS(
      train_epoch(params, opt, ds, {}, model, pad, empty_tc, 0.01, rng),
      DataError);
}

TEST_CASE("checkpoint selection") {
  CHECK(select_checkpoint({10, 30, 20}) == 1);
  CHECK(select_checkpoint({30, 30}) == 0);  // tie -> earliest
  CHECK(select_checkpoint({25}) == 0);
  CHECK_THROWS_AS(select_checkpoint({}), ConfigError);
}

TEST_CASE("checkpoint round trip is bit exact and preserves metrics") {
  SynthSpec spec = overfit_spec();
  Dataset ds = make_synth("ckpt", spec);
  ModelConfig model = tiny_model("ce", spec.text_dim, spec.experts);
  PaddingSpec pad = tiny_padding(model);
  ParamStore params = init_params(model, 3);

  std::vector<int> idx = ds.split_indices("train");
  SplitEvaluation before = evaluate_split(ds, idx, model, pad, params);

  fs::path dir = fresh_dir("ckpt_dir") / "ck";
  save_checkpoint(dir, params, nlohmann::json::object(), 4, before.combined_geom());
  Checkpoint ck = load_checkpoint(dir);
  CHECK(ck.epoch == 4);
  REQUIRE(ck.params.names == params.names);
  for (const auto& n : params.names)
    CHECK(ck.params.at(n).data == params.at(n).data);

  SplitEvaluation after = evaluate_split(ds, idx, model, pad, ck.params);
  CHECK(after.t2a.recalls == before.t2a.recalls);
  CHECK(after.a2t.recalls == before.a2t.recalls);
  CHECK(after.combined_geom() == before.combined_geom());

  CHECK_THROWS_AS(load_checkpoint(dir / "nope"), DataError);
}

TEST_CASE("checkpoint compatibility checks") {
  ModelConfig model =
      tiny_model("moee", 12, {{"e1", 10, 0}, {"e2", 8, 0}});
  ParamStore a = init_params(model, 1);
  ParamStore b = init_params(model, 2);
  CHECK_NOTHROW(check_compatible(a, b));

  ParamStore missing = b;
  missing.values.erase("mix.u");
  missing.names.erase(
      std::find(missing.names.begin(), missing.names.end(), "mix.u"));
  CHECK_THROWS_AS(check_compatible(a, missing), ConfigError);
  CHECK_THROWS_AS(check_compatible(missing, a), ConfigError);

  ParamStore reshaped = b;
  reshaped.values["mix.u"] = Tensor::zeros({3, 3});
  CHECK_THROWS_AS(check_compatible(a, reshaped), ConfigError);
}

TEST_CASE("train subsampling") {
  std::vector<int> idx(10);
  for (int i = 0; i < 10; ++i) idx[i] = i + 100;
  auto half = subsample_train(idx, 0.5, 7);
  CHECK(half.size() == 5);
  CHECK(half == subsample_train(idx, 0.5, 7));  // deterministic per seed
  for (int v : half) CHECK(std::count(idx.begin(), idx.end(), v) == 1);
  CHECK(subsample_train(idx, 1.0, 7) == idx);
  CHECK(subsample_train(idx, 0.25, 7).size() == 2);  // floor(2.5)
  CHECK_THROWS_AS(subsample_train(idx, 0.05, 7), ConfigError);
}

TEST_CASE("run experiment aggregates seeds and honors init checkpoints") {
  SynthSpec spec = overfit_spec();
  spec.n_samples = 24;
  spec.n_val = 4;
  spec.n_test = 4;
  Dataset ds = make_synth("exp", spec);

  ExperimentConfig cfg;
  cfg.model = tiny_model("moee", spec.text_dim, spec.experts);
  cfg.padding = tiny_padding(cfg.model);
  cfg.train.batch_size = 16;
  cfg.train.epochs = 2;
  cfg.train.seeds = {0, 1, 2};

  fs::path ckpts = fresh_dir("exp_ckpts");
  ExperimentResult r = run_experiment(cfg, ds, nullptr, &ckpts);
  CHECK(r.t2a.runs.size() == 3);
  CHECK(r.t2a.has_std());
  CHECK(r.a2t.has_std());
  CHECK(r.best_epochs.size() == 3);
  for (int e : r.best_epochs) CHECK((e == 0 || e == 1));
  for (uint64_t s : {0, 1, 2})
    CHECK(fs::exists(ckpts / ("seed" + std::to_string(s)) / "params.bin"));

  // init from one of the produced checkpoints
  Checkpoint ck = load_checkpoint(ckpts / "seed0");
  cfg.train.seeds = {5};
  cfg.train.epochs = 1;
  ExperimentResult r2 = run_experiment(cfg, ds, &ck.params);
  CHECK(r2.t2a.runs.size() == 1);

  // incompatible init rejected
  ModelConfig other = cfg.model;
  other.joint_dim = 8;
  ParamStore bad = init_params(other, 0);
  CHECK_THROWS_AS(run_experiment(cfg, ds, &bad), ConfigError);
}

TEST_CASE("experiment determinism") {
  SynthSpec spec = overfit_spec();
  spec.n_samples = 16;
  Dataset ds = make_synth("det", spec);
  ExperimentConfig cfg;
  cfg.model = tiny_model("ce", spec.text_dim, spec.experts);
  cfg.padding = tiny_padding(cfg.model);
  cfg.train.batch_size = 8;
  cfg.train.epochs = 2;
  cfg.train.seeds = {3};

  ExperimentResult a = run_experiment(cfg, ds);
  ExperimentResult b = run_experiment(cfg, ds);
  CHECK(a.t2a.runs[0].recalls == b.t2a.runs[0].recalls);
  CHECK(a.a2t.runs[0].geom_mean == b.a2t.runs[0].geom_mean);
  CHECK(a.best_epochs == b.best_epochs);
}

TEST_CASE("evaluation is independent of the worker count") {
  SynthSpec spec = overfit_spec();
  spec.n_samples = 12;
  Dataset ds = make_synth("threads", spec);
  ModelConfig model = tiny_model("moee", spec.text_dim, spec.experts);
  PaddingSpec pad = tiny_padding(model);
  ParamStore params = init_params(model, 2);
  std::vector<int> idx = ds.split_indices("train");

  unsetenv("XAR_THREADS");
  EvalEmbeddings single = compute_embeddings(ds, idx, model, pad, params);
  SimilarityMatrix s1 = similarity_matrix(single);
  setenv("XAR_THREADS", "4", 1);
  CHECK(worker_count() == 4);
  EvalEmbeddings multi = compute_embeddings(ds, idx, model, pad, params);
  SimilarityMatrix s4 = similarity_matrix(multi);
  setenv("XAR_THREADS", "0", 1);
  CHECK(worker_count() == 1);  // 0 = single-threaded deterministic mode
  unsetenv("XAR_THREADS");

  CHECK(s1.s == s4.s);
  CHECK(single.caption_ids == multi.caption_ids);
}

TEST_CASE("config json round trip") {
  ExperimentConfig c;
  c.model.arch = "ce";
  c.model.experts = {{"vggish", 128, 16, 1}};
  c.padding.audio["vggish"] = 29;
  c.train.epochs = 7;
  c.train.seeds = {4, 5};
  nlohmann::json j = config_to_json(c);
  ExperimentConfig back = config_from_json(j);
  CHECK(back.model.arch == "ce");
  CHECK(back.model.experts.size() == 1);
  CHECK(back.model.experts[0].clusters == 16);
  CHECK(back.padding.audio.at("vggish") == 29);
  CHECK(back.train.epochs == 7);
  CHECK(back.train.seeds == std::vector<uint64_t>{4, 5});

  CHECK_THROWS_AS(config_from_json(nlohmann::json{
                      {"train", {{"seeds", "oops"}}}}),
                  ConfigError);

  TrainConfig bad;
  bad.train_fraction = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}
