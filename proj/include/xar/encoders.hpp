#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "xar/tensor.hpp"

namespace xar {

struct ExpertConfig {
  std::string name;
  int dim = 0;
  int clusters = 16;  // VLAD clusters for audio experts
  int ghosts = 0;
};

struct ModelConfig {
  std::string arch = "moee";  // "moee" | "ce"
  std::vector<ExpertConfig> experts;
  int word_dim = 300;
  int text_clusters = 20;
  int text_ghosts = 1;
  int joint_dim = 512;   // per-expert joint embedding width
  int common_dim = 512;  // CE common projection width

  bool use_gating() const { return arch == "ce"; }
  int num_experts() const { return static_cast<int>(experts.size()); }
  int text_agg_dim() const { return text_clusters * word_dim; }
  int expert_agg_dim(int e) const {
    return experts[e].clusters * experts[e].dim;
  }
  int expert_geu_in(int e) const {
    return use_gating() ? common_dim : expert_agg_dim(e);
  }
  int expert_index(const std::string& name) const {
    for (int e = 0; e < num_experts(); ++e)
      if (experts[e].name == name) return e;
    return -1;
  }
  void validate() const {
    if (arch != "moee" && arch != "ce")
      throw ConfigError("model.arch must be moee or ce, got '" + arch + "'");
    if (experts.empty()) throw ConfigError("expert list must be nonempty");
    for (const auto& e : experts) {
      if (e.dim <= 0)
        throw ConfigError("expert '" + e.name + "' has non-positive dim");
      if (e.clusters <= 0 || e.ghosts < 0)
        throw ConfigError("expert '" + e.name + "' has bad cluster config");
    }
    if (word_dim <= 0 || text_clusters <= 0 || text_ghosts < 0 ||
        joint_dim <= 0 || common_dim <= 0)
      throw ConfigError("model dimensions must be positive");
  }
};

// Ordered name -> tensor map; iteration order is the serialization order.
struct ParamStore {
  std::vector<std::string> names;
  std::unordered_map<std::string, Tensor> values;

  Tensor& add(const std::string& name, Tensor t) {
    if (values.count(name)) throw ConfigError("duplicate parameter " + name);
    names.push_back(name);
    return values[name] = std::move(t);
  }
  Tensor& at(const std::string& name) {
    auto it = values.find(name);
    if (it == values.end()) throw ConfigError("missing parameter " + name);
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end()) throw ConfigError("missing parameter " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return values.count(name) > 0; }

  void round_to_float() {
    for (auto& n : names) values[n].round_to_float();
  }
};

namespace detail {
inline Tensor init_weight(std::vector<int> shape, int fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : t.data) v = rng.uniform(-s, s);
  return t;
}
inline void add_geu(ParamStore& p, const std::string& prefix, int din,
                    int dout, Rng& rng) {
  p.add(prefix + ".w1", init_weight({din, dout}, din, rng));
  p.add(prefix + ".b1", Tensor::zeros({dout}));
  p.add(prefix + ".w2", init_weight({dout, dout}, dout, rng));
  p.add(prefix + ".b2", Tensor::zeros({dout}));
}
inline void add_vlad(ParamStore& p, const std::string& prefix, int k, int g,
                     int d, Rng& rng) {
  p.add(prefix + ".centers", init_weight({k, d}, d, rng));
  p.add(prefix + ".assign_w", init_weight({d, k + g}, d, rng));
  p.add(prefix + ".assign_b", Tensor::zeros({k + g}));
}
}  // namespace detail

// Seeded uniform init scaled by 1/sqrt(fan_in); biases zero.
inline ParamStore init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ParamStore p;
  detail::add_vlad(p, "text.vlad", cfg.text_clusters, cfg.text_ghosts,
                   cfg.word_dim, rng);
  for (int e = 0; e < cfg.num_experts(); ++e)
    detail::add_geu(p, "text.geu." + cfg.experts[e].name, cfg.text_agg_dim(),
                    cfg.joint_dim, rng);
  p.add("mix.u", detail::init_weight({cfg.num_experts(), cfg.text_agg_dim()},
                                     cfg.text_agg_dim(), rng));
  for (int e = 0; e < cfg.num_experts(); ++e) {
    const auto& ex = cfg.experts[e];
    std::string prefix = "audio." + ex.name;
    detail::add_vlad(p, prefix + ".vlad", ex.clusters, ex.ghosts, ex.dim, rng);
    if (cfg.use_gating()) {
      p.add(prefix + ".proj.w",
            detail::init_weight({cfg.expert_agg_dim(e), cfg.common_dim},
                                cfg.expert_agg_dim(e), rng));
      p.add(prefix + ".proj.b", Tensor::zeros({cfg.common_dim}));
    }
    detail::add_geu(p, prefix + ".geu", cfg.expert_geu_in(e), cfg.joint_dim,
                    rng);
  }
  if (cfg.use_gating() && cfg.num_experts() >= 2) {
    int c = cfg.common_dim;
    p.add("gate.pair.w", detail::init_weight({2 * c, c}, 2 * c, rng));
    p.add("gate.pair.b", Tensor::zeros({c}));
    p.add("gate.mask.w1", detail::init_weight({c, c}, c, rng));
    p.add("gate.mask.b1", Tensor::zeros({c}));
    p.add("gate.mask.w2", detail::init_weight({c, c}, c, rng));
    p.add("gate.mask.b2", Tensor::zeros({c}));
  }
  p.round_to_float();  // parameters live on the float32 grid throughout
  return p;
}

// Parameters lifted onto a tape as leaves.
struct TapeParams {
  std::map<std::string, Var> vars;
  Var at(const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw ConfigError("missing parameter " + name);
    return it->second;
  }
};

inline TapeParams lift_params(Tape& tape, const ParamStore& p,
                              bool requires_grad) {
  TapeParams tp;
  for (const auto& n : p.names)
    tp.vars[n] = tape.leaf(p.at(n), requires_grad);
  return tp;
}

// NetVLAD: soft-assign frames over K+G columns, aggregate residuals over
// the first K, intra-normalize per cluster, flatten, final L2 normalize.
// Masked frames contribute nothing.
inline Var netvlad_forward(Tape& tape, Var x, const std::vector<char>& mask,
                           Var centers, Var assign_w, Var assign_b, int k,
                           int g) {
  const Tensor& xv = tape.val(x);
  if (xv.ndim() != 2) throw ShapeError("netvlad: T x D input required");
  int t = xv.shape[0], d = xv.shape[1];
  if (static_cast<int>(mask.size()) != t)
    throw ShapeError("netvlad: mask length mismatch");
  Tensor mvec({t});
  int live = 0;
  for (int i = 0; i < t; ++i) {
    mvec.data[i] = mask[i] ? 1.0 : 0.0;
    live += mask[i] ? 1 : 0;
  }
  if (live == 0) throw DataError("netvlad: all frames masked");
  Var alpha = softmax_rows(affine(x, assign_w, assign_b));
  alpha = rowscale(alpha, tape.constant(std::move(mvec)));
  if (g > 0) alpha = colslice(alpha, 0, k);
  Var at = transpose(alpha);                        // [K, T]
  Var v = matmul(at, x);                            // [K, D]
  Var counts = reshape(matmul(at, tape.constant(Tensor::full({t, 1}, 1.0))),
                       {k});                        // per-cluster mass
  v = sub(v, rowscale(centers, counts));
  v = l2norm_rows(v);
  return l2norm_rows(reshape(v, {k * d}));
}

inline Var netvlad_forward(Tape& tape, Var x, const std::vector<char>& mask,
                           const TapeParams& p, const std::string& prefix,
                           int k, int g) {
  return netvlad_forward(tape, x, mask, p.at(prefix + ".centers"),
                         p.at(prefix + ".assign_w"), p.at(prefix + ".assign_b"),
                         k, g);
}

// Gated Embedding Unit: y1 = W1 x + b1, y = y1 * sigmoid(W2 y1 + b2),
// then L2 normalize.
inline Var gated_embed(Tape& tape, Var x, Var w1, Var b1, Var w2, Var b2) {
  Var y1 = affine(x, w1, b1);
  Var y = mul(y1, sigmoid(affine(y1, w2, b2)));
  return l2norm_rows(y);
}

inline Var gated_embed(Tape& tape, Var x, const TapeParams& p,
                       const std::string& prefix) {
  return gated_embed(tape, x, p.at(prefix + ".w1"), p.at(prefix + ".b1"),
                     p.at(prefix + ".w2"), p.at(prefix + ".b2"));
}

// Softmax over expert logits u . h — weights come from the text side only.
inline Var mixture_weights(Tape& tape, Var h, Var u) {
  const Tensor& hv = tape.val(h);
  Var logits = reshape(matmul(u, reshape(h, {hv.size(), 1})),
                       {tape.val(u).shape[0]});
  return softmax_rows(logits);
}

// Collaborative gating: each expert is filtered with a sigmoid mask
// produced from the summed pairwise projections against the other experts.
// With a single expert the gate is the identity.
inline std::vector<Var> collaborative_gate(Tape& tape,
                                           const std::vector<Var>& features,
                                           const TapeParams& p) {
  int e = static_cast<int>(features.size());
  if (e <= 1) return features;
  std::vector<Var> out;
  out.reserve(e);
  for (int i = 0; i < e; ++i) {
    Var acc;
    for (int j = 0; j < e; ++j) {
      if (j == i) continue;
      Var pair = affine(concat1d({features[i], features[j]}),
                        p.at("gate.pair.w"), p.at("gate.pair.b"));
      acc = acc.valid() ? add(acc, pair) : pair;
    }
    Var hidden = relu(affine(acc, p.at("gate.mask.w1"), p.at("gate.mask.b1")));
    Var m = sigmoid(affine(hidden, p.at("gate.mask.w2"), p.at("gate.mask.b2")));
    out.push_back(mul(features[i], m));
  }
  return out;
}

struct EncodedText {
  Var h;                        // aggregated caption descriptor
  std::vector<Var> expert_emb;  // unit-norm, one per expert
  Var weights;                  // probability vector over experts
};

inline EncodedText encode_text(Tape& tape, const Tensor& tokens,
                               const std::vector<char>& mask,
                               const ModelConfig& cfg, const TapeParams& p) {
  if (tokens.ndim() != 2 || tokens.shape[1] != cfg.word_dim)
    throw ShapeError("encode_text: expected T x " +
                     std::to_string(cfg.word_dim) + " token matrix");
  Var x = tape.constant(tokens);
  EncodedText out;
  out.h = netvlad_forward(tape, x, mask, p, "text.vlad", cfg.text_clusters,
                          cfg.text_ghosts);
  for (int e = 0; e < cfg.num_experts(); ++e)
    out.expert_emb.push_back(
        gated_embed(tape, out.h, p, "text.geu." + cfg.experts[e].name));
  out.weights = mixture_weights(tape, out.h, p.at("mix.u"));
  return out;
}

// One expert sequence -> aggregated (and, for CE, projected) feature.
inline Var encode_audio_expert_agg(Tape& tape, const Tensor& seq,
                                   const std::vector<char>& mask,
                                   const ModelConfig& cfg, const TapeParams& p,
                                   int e) {
  const auto& ex = cfg.experts[e];
  if (seq.ndim() != 2 || seq.shape[1] != ex.dim)
    throw ShapeError("expert '" + ex.name + "': expected T x " +
                     std::to_string(ex.dim) + " features, got " +
                     shape_str(seq.shape));
  Var x = tape.constant(seq);
  Var v = netvlad_forward(tape, x, mask, p, "audio." + ex.name + ".vlad",
                          ex.clusters, ex.ghosts);
  if (cfg.use_gating())
    v = affine(v, p.at("audio." + ex.name + ".proj.w"),
               p.at("audio." + ex.name + ".proj.b"));
  return v;
}

// Full audio side: per-expert aggregated features, optional collaborative
// gate, then per-expert GEUs. Returns unit-norm embeddings.
inline std::vector<Var> encode_audio(
    Tape& tape, const std::vector<Tensor>& seqs,
    const std::vector<std::vector<char>>& masks, const ModelConfig& cfg,
    const TapeParams& p, bool apply_gate = true) {
  if (static_cast<int>(seqs.size()) != cfg.num_experts())
    throw ShapeError("encode_audio: expected one sequence per expert");
  std::vector<Var> feats;
  for (int e = 0; e < cfg.num_experts(); ++e)
    feats.push_back(
        encode_audio_expert_agg(tape, seqs[e], masks[e], cfg, p, e));
  if (apply_gate && cfg.use_gating())
    feats = collaborative_gate(tape, feats, p);
  std::vector<Var> embs;
  for (int e = 0; e < cfg.num_experts(); ++e)
    embs.push_back(gated_embed(tape, feats[e], p,
                               "audio." + cfg.experts[e].name + ".geu"));
  return embs;
}

// Single-expert convenience used by tests: NetVLAD + GEU, unit norm.
inline Var encode_audio_expert(Tape& tape, const Tensor& seq,
                               const std::vector<char>& mask,
                               const ModelConfig& cfg, const TapeParams& p,
                               int e) {
  Var v = encode_audio_expert_agg(tape, seq, mask, cfg, p, e);
  return gated_embed(tape, v, p, "audio." + cfg.experts[e].name + ".geu");
}

// Weighted sum of per-expert cosines; the mixture weights come from text.
inline Var moee_similarity(Tape& tape, const std::vector<Var>& audio_emb,
                           const EncodedText& text) {
  std::vector<Var> dots;
  for (size_t e = 0; e < audio_emb.size(); ++e)
    dots.push_back(dot(audio_emb[e], text.expert_emb[e]));
  return sum(mul(text.weights, concat1d(dots)));
}

// CE similarity = collaborative gate on the audio side, then the MoEE
// weighted cosine. Identical to MoEE when E = 1.
inline Var ce_similarity(Tape& tape, const std::vector<Tensor>& seqs,
                         const std::vector<std::vector<char>>& masks,
                         const EncodedText& text, const ModelConfig& cfg,
                         const TapeParams& p) {
  auto audio = encode_audio(tape, seqs, masks, cfg, p, /*apply_gate=*/true);
  return moee_similarity(tape, audio, text);
}

// Square batch similarity s[i][j] = sim(text_i, audio_j) from stacked
// per-sample embeddings.
inline Var batch_similarity(Tape& tape,
                            const std::vector<EncodedText>& texts,
                            const std::vector<std::vector<Var>>& audio) {
  int b = static_cast<int>(texts.size());
  if (b == 0 || audio.empty()) throw ShapeError("batch_similarity: empty batch");
  int ne = static_cast<int>(texts[0].expert_emb.size());
  std::vector<Var> wrows;
  for (const auto& t : texts) wrows.push_back(t.weights);
  Var w = stack_rows(wrows);  // [B, E]
  Var s;
  for (int e = 0; e < ne; ++e) {
    std::vector<Var> trows, arows;
    for (int i = 0; i < b; ++i) {
      trows.push_back(texts[i].expert_emb[e]);
      arows.push_back(audio[i][e]);
    }
    Var cos = matmul(stack_rows(trows), transpose(stack_rows(arows)));
    Var term = rowscale(cos, col(w, e));
    s = s.valid() ? add(s, term) : term;
  }
  return s;
}

}  // namespace xar
