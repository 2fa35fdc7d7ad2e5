#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <thread>

#include <json.hpp>

#include "xar/data.hpp"
#include "xar/encoders.hpp"
#include "xar/metrics.hpp"

namespace xar {

struct TrainConfig {
  int batch_size = 128;
  double margin = 0.2;
  double lr = 0.01;
  double weight_decay = 0.001;
  double lr_decay = 0.95;  // per epoch
  int epochs = 20;
  std::vector<uint64_t> seeds = {0, 1, 2};
  int lookahead_k = 5;
  double lookahead_alpha = 0.5;
  double train_fraction = 1.0;

  void validate() const {
    if (batch_size < 1 || epochs < 1 || lookahead_k < 1)
      throw ConfigError("train: batch_size, epochs, lookahead_k must be >= 1");
    if (margin <= 0 || lr <= 0 || weight_decay < 0 || lr_decay <= 0)
      throw ConfigError("train: margin, lr, lr_decay must be positive");
    if (lookahead_alpha <= 0 || lookahead_alpha > 1)
      throw ConfigError("train: lookahead_alpha must be in (0,1]");
    if (train_fraction <= 0 || train_fraction > 1)
      throw ConfigError("train: train_fraction must be in (0,1]");
    if (seeds.empty()) throw ConfigError("train: seed list must be nonempty");
  }
};

struct ExperimentConfig {
  ModelConfig model;
  PaddingSpec padding;
  TrainConfig train;
};

// ---- JSON config ----

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    if (j.contains("model")) {
      const auto& m = j.at("model");
      if (m.contains("arch")) c.model.arch = m.at("arch").get<std::string>();
      if (m.contains("word_dim")) c.model.word_dim = m.at("word_dim");
      if (m.contains("text_clusters"))
        c.model.text_clusters = m.at("text_clusters");
      if (m.contains("text_ghosts")) c.model.text_ghosts = m.at("text_ghosts");
      if (m.contains("joint_dim")) c.model.joint_dim = m.at("joint_dim");
      if (m.contains("common_dim")) c.model.common_dim = m.at("common_dim");
      if (m.contains("experts"))
        for (const auto& je : m.at("experts")) {
          ExpertConfig e;
          e.name = je.at("name").get<std::string>();
          if (je.contains("dim")) e.dim = je.at("dim");
          if (je.contains("clusters")) e.clusters = je.at("clusters");
          if (je.contains("ghosts")) e.ghosts = je.at("ghosts");
          c.model.experts.push_back(e);
        }
    }
    if (j.contains("padding")) {
      const auto& p = j.at("padding");
      if (p.contains("text")) c.padding.text = p.at("text");
      if (p.contains("audio"))
        for (auto it = p.at("audio").begin(); it != p.at("audio").end(); ++it)
          c.padding.audio[it.key()] = it.value().get<int>();
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      if (t.contains("batch_size")) c.train.batch_size = t.at("batch_size");
      if (t.contains("margin")) c.train.margin = t.at("margin");
      if (t.contains("lr")) c.train.lr = t.at("lr");
      if (t.contains("weight_decay")) c.train.weight_decay = t.at("weight_decay");
      if (t.contains("lr_decay")) c.train.lr_decay = t.at("lr_decay");
      if (t.contains("epochs")) c.train.epochs = t.at("epochs");
      if (t.contains("seeds"))
        c.train.seeds = t.at("seeds").get<std::vector<uint64_t>>();
      if (t.contains("lookahead_k")) c.train.lookahead_k = t.at("lookahead_k");
      if (t.contains("lookahead_alpha"))
        c.train.lookahead_alpha = t.at("lookahead_alpha");
      if (t.contains("train_fraction"))
        c.train.train_fraction = t.at("train_fraction");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad config: " + std::string(e.what()));
  }
  return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  auto& m = j["model"];
  m["arch"] = c.model.arch;
  m["word_dim"] = c.model.word_dim;
  m["text_clusters"] = c.model.text_clusters;
  m["text_ghosts"] = c.model.text_ghosts;
  m["joint_dim"] = c.model.joint_dim;
  m["common_dim"] = c.model.common_dim;
  m["experts"] = nlohmann::json::array();
  for (const auto& e : c.model.experts)
    m["experts"].push_back({{"name", e.name},
                            {"dim", e.dim},
                            {"clusters", e.clusters},
                            {"ghosts", e.ghosts}});
  j["padding"]["text"] = c.padding.text;
  for (const auto& [k, v] : c.padding.audio) j["padding"]["audio"][k] = v;
  auto& t = j["train"];
  t["batch_size"] = c.train.batch_size;
  t["margin"] = c.train.margin;
  t["lr"] = c.train.lr;
  t["weight_decay"] = c.train.weight_decay;
  t["lr_decay"] = c.train.lr_decay;
  t["epochs"] = c.train.epochs;
  t["seeds"] = c.train.seeds;
  t["lookahead_k"] = c.train.lookahead_k;
  t["lookahead_alpha"] = c.train.lookahead_alpha;
  t["train_fraction"] = c.train.train_fraction;
  return j;
}

// Fill missing expert dims (or the whole expert list) from the dataset.
inline void resolve_experts(ModelConfig& cfg, const Dataset& ds) {
  if (cfg.experts.empty())
    for (const auto& e : ds.experts)
      cfg.experts.push_back(ExpertConfig{e.name, e.dim, 16, 0});
  for (auto& e : cfg.experts) {
    int dim = ds.expert_dim(e.name);
    if (e.dim == 0) e.dim = dim;
    if (e.dim != dim)
      throw ConfigError("expert '" + e.name + "': config dim " +
                        std::to_string(e.dim) + " != dataset dim " +
                        std::to_string(dim));
  }
}

inline void resolve_padding(PaddingSpec& pad, const ModelConfig& cfg,
                            int default_audio = 29) {
  for (const auto& e : cfg.experts)
    if (!pad.audio.count(e.name)) pad.audio[e.name] = default_audio;
}

// ---- optimizer ----

using GradMap = std::unordered_map<std::string, Tensor>;

struct OptState {
  GradMap m, v;      // first/second moment accumulators
  GradMap slow;      // Lookahead slow weights
  long long step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

inline OptState init_opt_state(const ParamStore& params) {
  OptState s;
  for (const auto& n : params.names) {
    s.m[n] = Tensor::zeros(params.at(n).shape);
    s.v[n] = Tensor::zeros(params.at(n).shape);
    s.slow[n] = params.at(n);
  }
  return s;
}

// RAdam: rectified adaptive step when rho_t > 4, plain momentum step
// otherwise. Weight decay is added to the gradient before the moments.
inline void radam_step(ParamStore& params, const GradMap& grads, OptState& st,
                       double lr, double weight_decay) {
  st.step += 1;
  double t = static_cast<double>(st.step);
  double b1t = std::pow(st.beta1, t), b2t = std::pow(st.beta2, t);
  double rho_inf = 2.0 / (1.0 - st.beta2) - 1.0;
  double rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
  double rect = 0.0;
  bool rectified = rho_t > 4.0;
  if (rectified)
    rect = std::sqrt(((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) /
                     ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));
  for (const auto& name : params.names) {
    Tensor& p = params.at(name);
    auto git = grads.find(name);
    if (git == grads.end())
      throw NumericError("radam: missing gradient for " + name);
    const Tensor& g0 = git->second;
    if (!g0.same_shape(p)) throw ShapeError("radam: gradient shape mismatch");
    if (!g0.finite())
      throw NumericError("radam: NaN/Inf gradient in " + name +
                         " at step " + std::to_string(st.step));
    Tensor& m = st.m[name];
    Tensor& v = st.v[name];
    for (int i = 0; i < p.size(); ++i) {
      double g = g0.data[i] + weight_decay * p.data[i];
      m.data[i] = st.beta1 * m.data[i] + (1.0 - st.beta1) * g;
      v.data[i] = st.beta2 * v.data[i] + (1.0 - st.beta2) * g * g;
      double mhat = m.data[i] / (1.0 - b1t);
      if (rectified) {
        double vhat = std::sqrt(v.data[i] / (1.0 - b2t));
        p.data[i] -= lr * rect * mhat / (vhat + st.eps);
      } else {
        p.data[i] -= lr * mhat;
      }
    }
    p.round_to_float();
  }
}

// Every k steps: slow <- slow + alpha (fast - slow), fast <- slow.
inline void lookahead_sync(ParamStore& fast, GradMap& slow, double alpha,
                           long long step, int k) {
  if (step % k != 0) return;
  for (const auto& name : fast.names) {
    Tensor& f = fast.at(name);
    Tensor& s = slow[name];
    for (int i = 0; i < f.size(); ++i) {
      s.data[i] += alpha * (f.data[i] - s.data[i]);
      f.data[i] = s.data[i];
    }
    s.round_to_float();
    f = s;
  }
}

// ---- evaluation ----

inline int worker_count() {
  const char* env = std::getenv("XAR_THREADS");
  if (!env) return 1;
  int n = std::atoi(env);
  return n <= 0 ? 1 : n;
}

struct EvalEmbeddings {
  // audio[sample][expert], text[caption][expert]: unit-norm joint vectors
  std::vector<std::vector<std::vector<double>>> audio;
  std::vector<std::vector<std::vector<double>>> text;
  std::vector<std::vector<double>> weights;  // [caption][expert]
  std::vector<int> caption_sample;           // caption -> local sample index
  std::vector<std::string> sample_ids, caption_ids;
};

namespace detail {

inline std::vector<double> to_vec(const Tensor& t) { return t.data; }

inline void embed_one(const Dataset& ds, int idx, const ModelConfig& cfg,
                      const PaddingSpec& pad, const ParamStore& params,
                      std::vector<std::vector<double>>& audio_out,
                      std::vector<std::vector<std::vector<double>>>& text_out,
                      std::vector<std::vector<double>>& weight_out) {
  const LoadedSample& s = ds.samples[idx];
  Tape tape;
  tape.grad_enabled = false;
  TapeParams tp = lift_params(tape, params, false);
  std::vector<Tensor> seqs;
  std::vector<std::vector<char>> masks;
  for (const auto& e : cfg.experts) {
    auto it = s.features.find(e.name);
    if (it == s.features.end())
      throw DataError("sample '" + s.id + "' lacks expert '" + e.name + "'");
    auto [padded, mask] = pad_sequence(it->second, pad.audio_len(e.name));
    seqs.push_back(std::move(padded));
    masks.push_back(std::move(mask));
  }
  auto aud = encode_audio(tape, seqs, masks, cfg, tp);
  audio_out.clear();
  for (Var v : aud) audio_out.push_back(to_vec(tape.val(v)));
  text_out.assign(s.caption_tokens.size(), {});
  weight_out.assign(s.caption_tokens.size(), {});
  for (size_t c = 0; c < s.caption_tokens.size(); ++c) {
    Tensor tokens = embed_tokens(s.caption_tokens[c], ds.words);
    auto [padded, mask] = pad_sequence(tokens, pad.text);
    EncodedText et = encode_text(tape, padded, mask, cfg, tp);
    for (Var v : et.expert_emb) text_out[c].push_back(to_vec(tape.val(v)));
    weight_out[c] = to_vec(tape.val(et.weights));
  }
}

template <class F>
void parallel_for(int n, F&& body) {
  int workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> threads;
  for (int w = 0; w < workers; ++w)
    threads.emplace_back([&, w] {
      for (int i = w; i < n; i += workers) body(i);
    });
  for (auto& t : threads) t.join();
}

}  // namespace detail

// Frozen-parameter forward passes; parallel over samples with results
// written into fixed slots so worker count never changes the output.
inline EvalEmbeddings compute_embeddings(const Dataset& ds,
                                         const std::vector<int>& indices,
                                         const ModelConfig& cfg,
                                         const PaddingSpec& pad,
                                         const ParamStore& params) {
  int n = static_cast<int>(indices.size());
  EvalEmbeddings out;
  out.audio.resize(n);
  std::vector<std::vector<std::vector<std::vector<double>>>> texts(n);
  std::vector<std::vector<std::vector<double>>> weights(n);
  std::exception_ptr err;
  detail::parallel_for(n, [&](int i) {
    try {
      detail::embed_one(ds, indices[i], cfg, pad, params, out.audio[i],
                        texts[i], weights[i]);
    } catch (...) {
      err = std::current_exception();
    }
  });
  if (err) std::rethrow_exception(err);
  for (int i = 0; i < n; ++i) {
    const LoadedSample& s = ds.samples[indices[i]];
    out.sample_ids.push_back(s.id);
    for (size_t c = 0; c < texts[i].size(); ++c) {
      out.text.push_back(texts[i][c]);
      out.weights.push_back(weights[i][c]);
      out.caption_sample.push_back(i);
      out.caption_ids.push_back(s.id + "#" + std::to_string(c));
    }
  }
  return out;
}

// Caption-query x audio-gallery similarity matrix (t2a orientation).
inline SimilarityMatrix similarity_matrix(const EvalEmbeddings& emb) {
  int q = static_cast<int>(emb.text.size());
  int g = static_cast<int>(emb.audio.size());
  if (q == 0 || g == 0) throw DataError("similarity_matrix: empty batch");
  SimilarityMatrix s(q, g);
  s.query_ids = emb.caption_ids;
  s.gallery_ids = emb.sample_ids;
  int ne = static_cast<int>(emb.audio[0].size());
  detail::parallel_for(q, [&](int i) {
    for (int j = 0; j < g; ++j) {
      double sim = 0.0;
      for (int e = 0; e < ne; ++e) {
        double d = 0.0;
        const auto& te = emb.text[i][e];
        const auto& ae = emb.audio[j][e];
        for (size_t x = 0; x < te.size(); ++x) d += te[x] * ae[x];
        sim += emb.weights[i][e] * d;
      }
      s.at(i, j) = sim;
    }
  });
  return s;
}

struct SplitEvaluation {
  SeedRun t2a, a2t;
  double combined_geom() const { return 0.5 * (t2a.geom_mean + a2t.geom_mean); }
};

inline SeedRun score_direction(const SimilarityMatrix& s,
                               const GroundTruth& gt) {
  SeedRun run;
  for (int k : {1, 5, 10}) run.recalls[k] = recall_at_k(s, gt, k);
  run.geom_mean = geometric_mean_score(run.recalls[1], run.recalls[5],
                                       run.recalls[10]);
  return run;
}

inline SplitEvaluation evaluate_split(const Dataset& ds,
                                      const std::vector<int>& indices,
                                      const ModelConfig& cfg,
                                      const PaddingSpec& pad,
                                      const ParamStore& params) {
  EvalEmbeddings emb = compute_embeddings(ds, indices, cfg, pad, params);
  SimilarityMatrix t2a = similarity_matrix(emb);
  GroundTruth gt_t2a(t2a.q);
  GroundTruth gt_a2t(t2a.g);
  for (int c = 0; c < t2a.q; ++c) {
    gt_t2a[c] = {emb.caption_sample[c]};
    gt_a2t[emb.caption_sample[c]].push_back(c);
  }
  SplitEvaluation ev;
  ev.t2a = score_direction(t2a, gt_t2a);
  ev.a2t = score_direction(t2a.transposed(), gt_a2t);
  return ev;
}

// ---- training ----

struct EpochStats {
  double mean_loss = 0.0;
  int batches = 0;
};

// One pass: shuffle, encode, square similarity matrix of matched pairs,
// ranking loss, backward, RAdam, Lookahead. The final short batch is kept.
inline EpochStats train_epoch(ParamStore& params, OptState& opt,
                              const Dataset& ds,
                              const std::vector<int>& train_idx,
                              const ModelConfig& cfg, const PaddingSpec& pad,
                              const TrainConfig& tc, double lr, Rng& rng) {
  if (train_idx.empty()) throw DataError("train_epoch: empty training split");
  int n = static_cast<int>(train_idx.size());
  std::vector<int> order = rng.permutation(n);
  EpochStats stats;
  double loss_sum = 0.0;
  for (int start = 0; start < n; start += tc.batch_size) {
    int bsz = std::min(tc.batch_size, n - start);
    Tape tape;
    TapeParams tp = lift_params(tape, params, true);
    std::vector<EncodedText> texts;
    std::vector<std::vector<Var>> audio;
    for (int b = 0; b < bsz; ++b) {
      const LoadedSample& s = ds.samples[train_idx[order[start + b]]];
      int ci = s.caption_tokens.size() > 1
                   ? rng.uniform_int(static_cast<int>(s.caption_tokens.size()))
                   : 0;
      Tensor tokens = embed_tokens(s.caption_tokens[ci], ds.words);
      auto [tpad, tmask] = pad_sequence(tokens, pad.text);
      texts.push_back(encode_text(tape, tpad, tmask, cfg, tp));
      std::vector<Tensor> seqs;
      std::vector<std::vector<char>> masks;
      for (const auto& e : cfg.experts) {
        auto it = s.features.find(e.name);
        if (it == s.features.end())
          throw DataError("sample '" + s.id + "' lacks expert '" + e.name +
                          "'");
        auto [apad, amask] = pad_sequence(it->second, pad.audio_len(e.name));
        seqs.push_back(std::move(apad));
        masks.push_back(std::move(amask));
      }
      audio.push_back(encode_audio(tape, seqs, masks, cfg, tp));
    }
    Var s = batch_similarity(tape, texts, audio);
    Var loss = ranking_loss(tape, s, tc.margin);
    double loss_val = tape.val(loss).data[0];
    if (!std::isfinite(loss_val))
      throw NumericError("train_epoch: non-finite loss");
    tape.backward(loss);
    GradMap grads;
    for (const auto& name : params.names)
      grads[name] = tape.grad(tp.at(name));
    radam_step(params, grads, opt, lr, tc.weight_decay);
    lookahead_sync(params, opt.slow, tc.lookahead_alpha, opt.step,
                   tc.lookahead_k);
    loss_sum += loss_val * bsz;
    stats.batches += 1;
  }
  stats.mean_loss = loss_sum / n;
  return stats;
}

// Argmax of validation score; ties break to the earliest epoch.
inline int select_checkpoint(const std::vector<double>& scores) {
  if (scores.empty()) throw ConfigError("select_checkpoint: no epochs");
  int best = 0;
  for (int i = 1; i < static_cast<int>(scores.size()); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

// ---- checkpoints ----

struct Checkpoint {
  ParamStore params;
  nlohmann::json config;
  int epoch = 0;
  double val_score = 0.0;
  int version = 1;
};

inline void save_checkpoint(const fs::path& dir, const ParamStore& params,
                            const nlohmann::json& config_echo, int epoch,
                            double val_score) {
  fs::create_directories(dir);
  nlohmann::json j;
  j["format_version"] = 1;
  j["epoch"] = epoch;
  j["val_geom_mean"] = val_score;
  j["config"] = config_echo;
  j["params"] = nlohmann::json::array();
  std::ofstream bin(dir / "params.bin", std::ios::binary);
  if (!bin) throw DataError("cannot write " + (dir / "params.bin").string());
  long long offset = 0;
  for (const auto& name : params.names) {
    const Tensor& t = params.at(name);
    j["params"].push_back(
        {{"name", name}, {"shape", t.shape}, {"offset", offset}});
    std::vector<float> buf(t.data.size());
    for (size_t i = 0; i < buf.size(); ++i)
      buf[i] = static_cast<float>(t.data[i]);
    bin.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(4 * buf.size()));
    offset += 4LL * t.size();
  }
  std::ofstream meta(dir / "params.json");
  meta << j.dump(1) << "\n";
}

inline Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream meta(dir / "params.json");
  if (!meta)
    throw DataError("checkpoint metadata not found: " +
                    (dir / "params.json").string());
  nlohmann::json j;
  try {
    meta >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint parse error: " + std::string(e.what()));
  }
  Checkpoint ck;
  ck.version = j.at("format_version").get<int>();
  ck.epoch = j.at("epoch").get<int>();
  ck.val_score = j.at("val_geom_mean").get<double>();
  ck.config = j.at("config");
  std::ifstream bin(dir / "params.bin", std::ios::binary);
  if (!bin)
    throw DataError("checkpoint weights not found: " +
                    (dir / "params.bin").string());
  for (const auto& jp : j.at("params")) {
    std::string name = jp.at("name").get<std::string>();
    std::vector<int> shape = jp.at("shape").get<std::vector<int>>();
    Tensor t(shape);
    bin.seekg(jp.at("offset").get<long long>());
    std::vector<float> buf(t.data.size());
    bin.read(reinterpret_cast<char*>(buf.data()),
             static_cast<std::streamsize>(4 * buf.size()));
    if (!bin) throw DataError("checkpoint weights truncated at " + name);
    for (size_t i = 0; i < buf.size(); ++i)
      t.data[i] = static_cast<double>(buf[i]);
    ck.params.add(name, std::move(t));
  }
  return ck;
}

inline void check_compatible(const ParamStore& model, const ParamStore& init) {
  for (const auto& name : model.names) {
    if (!init.has(name))
      throw ConfigError("init checkpoint missing parameter " + name);
    if (!init.at(name).same_shape(model.at(name)))
      throw ConfigError("init checkpoint shape mismatch for " + name + ": " +
                        shape_str(init.at(name).shape) + " vs " +
                        shape_str(model.at(name).shape));
  }
  for (const auto& name : init.names)
    if (!model.has(name))
      throw ConfigError("init checkpoint has extra parameter " + name);
}

// ---- experiments ----

struct ExperimentResult {
  RetrievalReport t2a, a2t;
  double train_fraction = 1.0;
  std::vector<int> best_epochs;  // per seed
};

inline uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  uint64_t x = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  x ^= x >> 31;
  return x;
}

// Deterministic per-seed prefix of a seed-shuffled order, rounded down.
inline std::vector<int> subsample_train(const std::vector<int>& train_idx,
                                        double fraction, uint64_t seed) {
  if (fraction >= 1.0) return train_idx;
  int keep = static_cast<int>(fraction * train_idx.size());
  if (keep < 1) throw ConfigError("train_fraction leaves no training data");
  Rng rng(mix_seed(seed, 0xF4AC));
  std::vector<int> order = rng.permutation(static_cast<int>(train_idx.size()));
  std::vector<int> out;
  for (int i = 0; i < keep; ++i) out.push_back(train_idx[order[i]]);
  std::sort(out.begin(), out.end());
  return out;
}

// Full recipe per seed: init (or load), train with per-epoch decay, select
// the epoch with the best validation geometric mean, evaluate on test in
// both directions; then aggregate over seeds.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                       const Dataset& ds,
                                       const ParamStore* init = nullptr,
                                       const fs::path* ckpt_dir = nullptr) {
  cfg.model.validate();
  cfg.train.validate();
  std::vector<int> train_all = ds.split_indices("train");
  if (train_all.empty()) throw DataError("dataset has no training split");
  std::vector<int> val_idx = ds.split_indices("val");
  if (val_idx.empty()) val_idx = train_all;  // select on train when no val
  std::vector<int> test_idx = ds.split_indices("test");
  if (test_idx.empty()) test_idx = train_all;

  ExperimentResult result;
  result.train_fraction = cfg.train.train_fraction;
  std::vector<SeedRun> t2a_runs, a2t_runs;
  for (uint64_t seed : cfg.train.seeds) {
    ParamStore params = init_params(cfg.model, seed);
    if (init) {
      check_compatible(params, *init);
      params = *init;
    }
    std::vector<int> train_idx =
        subsample_train(train_all, cfg.train.train_fraction, seed);
    OptState opt = init_opt_state(params);
    std::vector<double> val_scores;
    ParamStore best_params = params;
    double best_score = -1.0;
    int best_epoch = -1;
    for (int epoch = 0; epoch < cfg.train.epochs; ++epoch) {
      double lr = cfg.train.lr * std::pow(cfg.train.lr_decay, epoch);
      Rng erng(mix_seed(seed, static_cast<uint64_t>(epoch)));
      train_epoch(params, opt, ds, train_idx, cfg.model, cfg.padding,
                  cfg.train, lr, erng);
      SplitEvaluation ev =
          evaluate_split(ds, val_idx, cfg.model, cfg.padding, params);
      double score = ev.combined_geom();
      val_scores.push_back(score);
      if (score > best_score) {
        best_score = score;
        best_params = params;
        best_epoch = epoch;
      }
    }
    result.best_epochs.push_back(best_epoch);
    SplitEvaluation test_ev =
        evaluate_split(ds, test_idx, cfg.model, cfg.padding, best_params);
    test_ev.t2a.seed = seed;
    test_ev.a2t.seed = seed;
    t2a_runs.push_back(test_ev.t2a);
    a2t_runs.push_back(test_ev.a2t);
    if (ckpt_dir)
      save_checkpoint(*ckpt_dir / ("seed" + std::to_string(seed)), best_params,
                      config_to_json(cfg), best_epoch, best_score);
  }
  result.t2a = aggregate_seeds("t2a", t2a_runs);
  result.a2t = aggregate_seeds("a2t", a2t_runs);
  return result;
}

}  // namespace xar
