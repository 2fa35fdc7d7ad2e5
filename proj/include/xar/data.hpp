#pragma once

#include <cctype>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "xar/tensor.hpp"

namespace xar {

namespace fs = std::filesystem;

struct ExpertDesc {
  std::string name;
  int dim = 0;
};

struct BlobRef {
  std::string path;  // relative to the manifest directory
  int rows = 0;
};

struct SampleDesc {
  std::string id;
  std::string split;
  std::map<std::string, BlobRef> features;
  std::vector<std::string> captions;
};

struct Manifest {
  int version = 1;
  std::vector<ExpertDesc> experts;
  std::vector<SampleDesc> samples;
  fs::path root;

  int expert_dim(const std::string& name) const {
    for (const auto& e : experts)
      if (e.name == name) return e.dim;
    throw DataError("unknown expert '" + name + "'");
  }
};

// ---- feature blobs: headerless row-major little-endian float32 ----

inline Tensor read_feature_archive(const fs::path& path, int rows, int dim) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open feature archive " + path.string());
  in.seekg(0, std::ios::end);
  auto bytes = static_cast<long long>(in.tellg());
  long long expect = 4LL * rows * dim;
  if (bytes != expect)
    throw DataError("feature archive " + path.string() + ": expected " +
                    std::to_string(expect) + " bytes, found " +
                    std::to_string(bytes));
  in.seekg(0);
  std::vector<float> buf(static_cast<size_t>(rows) * dim);
  in.read(reinterpret_cast<char*>(buf.data()), expect);
  if (!in) throw DataError("short read on " + path.string());
  Tensor t({rows, dim});
  for (size_t i = 0; i < buf.size(); ++i) {
    if (!std::isfinite(buf[i]))
      throw DataError("non-finite value in " + path.string());
    t.data[i] = static_cast<double>(buf[i]);
  }
  return t;
}

inline void write_feature_archive(const fs::path& path, const Tensor& t) {
  if (t.ndim() != 2) throw ShapeError("write_feature_archive: T x D required");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write feature archive " + path.string());
  std::vector<float> buf(t.data.size());
  for (size_t i = 0; i < buf.size(); ++i)
    buf[i] = static_cast<float>(t.data[i]);
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(4 * buf.size()));
}

// ---- manifest ----

inline Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("manifest not found: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest parse error: " + std::string(e.what()));
  }
  Manifest m;
  m.root = path.parent_path();
  try {
    m.version = j.at("version").get<int>();
    for (const auto& je : j.at("experts")) {
      ExpertDesc e{je.at("name").get<std::string>(), je.at("dim").get<int>()};
      if (e.dim <= 0)
        throw DataError("expert '" + e.name + "' declares dim " +
                        std::to_string(e.dim));
      for (const auto& prev : m.experts)
        if (prev.name == e.name)
          throw DataError("duplicate expert '" + e.name + "'");
      m.experts.push_back(e);
    }
    for (const auto& js : j.at("samples")) {
      SampleDesc s;
      s.id = js.at("id").get<std::string>();
      s.split = js.at("split").get<std::string>();
      for (auto it = js.at("features").begin(); it != js.at("features").end();
           ++it) {
        BlobRef b{it.value().at("path").get<std::string>(),
                  it.value().at("rows").get<int>()};
        if (b.rows <= 0)
          throw DataError("sample '" + s.id + "': non-positive row count");
        s.features[it.key()] = b;
      }
      for (const auto& c : js.at("captions"))
        s.captions.push_back(c.get<std::string>());
      m.samples.push_back(std::move(s));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest schema violation: " + std::string(e.what()));
  }
  // Referential checks: every blob exists with the declared size.
  for (const auto& s : m.samples) {
    for (const auto& [expert, blob] : s.features) {
      int dim = m.expert_dim(expert);
      fs::path p = m.root / blob.path;
      if (!fs::exists(p))
        throw DataError("sample '" + s.id + "': missing feature blob " +
                        blob.path);
      auto bytes = static_cast<long long>(fs::file_size(p));
      if (bytes != 4LL * blob.rows * dim)
        throw DataError("sample '" + s.id + "': blob " + blob.path +
                        " size mismatch");
    }
    if (s.captions.empty())
      throw DataError("sample '" + s.id + "': no captions");
  }
  return m;
}

// ---- captions ----

// Lowercase, strip punctuation, split on whitespace.
inline std::vector<std::string> tokenize_caption(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (unsigned char ch : text) {
    if (std::isalnum(ch)) {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    } else if (std::isspace(ch)) {
      if (!cur.empty()) tokens.push_back(std::move(cur));
      cur.clear();
    }
    // other punctuation is dropped
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  if (tokens.empty())
    throw DataError("caption empty after tokenization: '" + text + "'");
  return tokens;
}

// ---- word-embedding table ----

struct WordTable {
  int dim = 0;
  std::unordered_map<std::string, std::vector<float>> vectors;

  bool has(const std::string& token) const { return vectors.count(token) > 0; }
};

inline WordTable load_word_table(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("word table not found: " + path.string());
  WordTable t;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string token;
    ss >> token;
    std::vector<float> vec;
    double v;
    while (ss >> v) vec.push_back(static_cast<float>(v));
    if (vec.empty())
      throw DataError("word table line " + std::to_string(lineno) +
                      ": no values");
    if (t.dim == 0)
      t.dim = static_cast<int>(vec.size());
    else if (static_cast<int>(vec.size()) != t.dim)
      throw DataError("word table line " + std::to_string(lineno) +
                      ": dimension mismatch");
    t.vectors[token] = std::move(vec);
  }
  if (t.dim == 0) throw DataError("word table is empty: " + path.string());
  return t;
}

inline void save_word_table(const fs::path& path, const WordTable& t,
                            const std::vector<std::string>& order) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write word table " + path.string());
  char buf[48];
  for (const auto& token : order) {
    out << token;
    for (float v : t.vectors.at(token)) {
      std::snprintf(buf, sizeof(buf), " %.9g", static_cast<double>(v));
      out << buf;
    }
    out << "\n";
  }
}

// Per-token lookup; out-of-vocabulary tokens map to the zero vector and
// stay in the sequence.
inline Tensor embed_tokens(const std::vector<std::string>& tokens,
                           const WordTable& table) {
  if (tokens.empty()) throw DataError("embed_tokens: empty token list");
  Tensor t({static_cast<int>(tokens.size()), table.dim});
  for (size_t i = 0; i < tokens.size(); ++i) {
    auto it = table.vectors.find(tokens[i]);
    if (it == table.vectors.end()) continue;
    for (int j = 0; j < table.dim; ++j)
      t.data[i * table.dim + j] = static_cast<double>(it->second[j]);
  }
  return t;
}

// ---- zero padding ----

struct PaddingSpec {
  int text = 20;
  std::map<std::string, int> audio;  // per-expert lengths

  int audio_len(const std::string& expert) const {
    auto it = audio.find(expert);
    if (it == audio.end())
      throw ConfigError("no padding length for expert '" + expert + "'");
    if (it->second <= 0) throw ConfigError("padding length must be positive");
    return it->second;
  }
};

// Shorter sequences are zero-filled with mask false; longer sequences keep
// their first z frames.
inline std::pair<Tensor, std::vector<char>> pad_sequence(const Tensor& seq,
                                                         int z) {
  if (seq.ndim() != 2) throw ShapeError("pad_sequence: T x D required");
  if (z <= 0) throw ConfigError("pad_sequence: z must be positive");
  int t = seq.shape[0], d = seq.shape[1];
  Tensor out({z, d});
  std::vector<char> mask(z, 0);
  int keep = std::min(t, z);
  for (int i = 0; i < keep; ++i) {
    mask[i] = 1;
    for (int j = 0; j < d; ++j) out.data[i * d + j] = seq.data[i * d + j];
  }
  return {std::move(out), std::move(mask)};
}

struct PaddedBatch {
  int b = 0, z = 0, d = 0;
  std::vector<double> data;  // B x z x D
  std::vector<char> mask;    // B x z, true = real frame

  double& at(int i, int t, int j) {
    return data[(static_cast<size_t>(i) * z + t) * d + j];
  }
  std::vector<char> sample_mask(int i) const {
    return std::vector<char>(mask.begin() + static_cast<size_t>(i) * z,
                             mask.begin() + static_cast<size_t>(i + 1) * z);
  }
  Tensor sample(int i) const {
    Tensor t({z, d});
    std::copy(data.begin() + static_cast<size_t>(i) * z * d,
              data.begin() + static_cast<size_t>(i + 1) * z * d,
              t.data.begin());
    return t;
  }
};

inline PaddedBatch pad_batch(const std::vector<Tensor>& seqs, int z) {
  if (seqs.empty()) throw DataError("pad_batch: empty batch");
  PaddedBatch b;
  b.b = static_cast<int>(seqs.size());
  b.z = z;
  b.d = seqs[0].shape[1];
  b.data.assign(static_cast<size_t>(b.b) * z * b.d, 0.0);
  b.mask.assign(static_cast<size_t>(b.b) * z, 0);
  for (int i = 0; i < b.b; ++i) {
    if (seqs[i].shape[1] != b.d)
      throw ShapeError("pad_batch: mixed feature dims");
    auto [padded, mask] = pad_sequence(seqs[i], z);
    std::copy(padded.data.begin(), padded.data.end(),
              b.data.begin() + static_cast<size_t>(i) * z * b.d);
    std::copy(mask.begin(), mask.end(),
              b.mask.begin() + static_cast<size_t>(i) * z);
  }
  return b;
}

// ---- loaded dataset ----

struct LoadedSample {
  std::string id;
  std::string split;
  std::map<std::string, Tensor> features;  // expert -> T x D
  std::vector<std::string> captions_raw;
  std::vector<std::vector<std::string>> caption_tokens;
};

struct Dataset {
  std::vector<ExpertDesc> experts;
  std::vector<LoadedSample> samples;
  WordTable words;

  std::vector<int> split_indices(const std::string& split) const {
    std::vector<int> out;
    for (size_t i = 0; i < samples.size(); ++i)
      if (split == "all" || samples[i].split == split)
        out.push_back(static_cast<int>(i));
    return out;
  }
  int expert_dim(const std::string& name) const {
    for (const auto& e : experts)
      if (e.name == name) return e.dim;
    throw DataError("unknown expert '" + name + "'");
  }
};

inline Dataset load_dataset(const fs::path& dir) {
  Manifest m = load_manifest(dir / "manifest.json");
  Dataset d;
  d.experts = m.experts;
  d.words = load_word_table(dir / "words.txt");
  for (const auto& s : m.samples) {
    LoadedSample ls;
    ls.id = s.id;
    ls.split = s.split;
    for (const auto& [expert, blob] : s.features)
      ls.features[expert] =
          read_feature_archive(m.root / blob.path, blob.rows,
                               m.expert_dim(expert));
    for (const auto& c : s.captions) {
      ls.captions_raw.push_back(c);
      ls.caption_tokens.push_back(tokenize_caption(c));
    }
    d.samples.push_back(std::move(ls));
  }
  return d;
}

// ---- synthetic planted-correspondence generator ----

struct SynthExpert {
  std::string name;
  int dim = 0;
  int rank = 0;  // 0 = full latent rank
};

struct SynthSpec {
  int n_samples = 32;
  int latent_dim = 16;
  int text_dim = 32;
  std::vector<SynthExpert> experts;
  double sigma = 0.05;
  uint64_t seed = 1;
  int min_tokens = 4, max_tokens = 8;
  int min_frames = 4, max_frames = 10;
  int captions_per_sample = 1;
  int n_val = 0, n_test = 0;  // remainder is train
};

// Text tokens and per-expert audio frames are distinct fixed random linear
// images of a per-sample latent plus Gaussian noise. Deterministic given
// the seed.
inline void synth_generate(const SynthSpec& spec, const fs::path& dir) {
  if (spec.sigma < 0) throw ConfigError("synth: sigma must be >= 0");
  if (spec.experts.empty()) throw ConfigError("synth: no experts");
  if (spec.n_val + spec.n_test >= spec.n_samples)
    throw ConfigError("synth: splits exhaust the sample budget");
  fs::create_directories(dir / "blobs");
  Rng rng(spec.seed);
  int L = spec.latent_dim;
  auto linear_map = [&](int out_dim, int rank) {
    // out_dim x L, optionally factored through a rank-limited projection
    std::vector<double> map(static_cast<size_t>(out_dim) * L, 0.0);
    if (rank <= 0 || rank >= L) {
      for (auto& v : map) v = rng.normal() / std::sqrt(static_cast<double>(L));
    } else {
      std::vector<double> b(static_cast<size_t>(out_dim) * rank);
      std::vector<double> pr(static_cast<size_t>(rank) * L);
      for (auto& v : b) v = rng.normal() / std::sqrt(static_cast<double>(rank));
      for (auto& v : pr) v = rng.normal() / std::sqrt(static_cast<double>(L));
      for (int i = 0; i < out_dim; ++i)
        for (int j = 0; j < L; ++j)
          for (int r = 0; r < rank; ++r)
            map[i * L + j] += b[i * rank + r] * pr[r * L + j];
    }
    return map;
  };
  auto text_map = linear_map(spec.text_dim, 0);
  std::vector<std::vector<double>> audio_maps;
  for (const auto& e : spec.experts)
    audio_maps.push_back(linear_map(e.dim, e.rank));

  auto emit_frame = [&](const std::vector<double>& map, int out_dim,
                        const std::vector<double>& u, double* dst) {
    for (int i = 0; i < out_dim; ++i) {
      double v = 0.0;
      for (int j = 0; j < L; ++j) v += map[i * L + j] * u[j];
      dst[i] =
          static_cast<double>(static_cast<float>(v + spec.sigma * rng.normal()));
    }
  };

  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["experts"] = nlohmann::json::array();
  for (const auto& e : spec.experts)
    manifest["experts"].push_back({{"name", e.name}, {"dim", e.dim}});
  manifest["samples"] = nlohmann::json::array();

  WordTable words;
  words.dim = spec.text_dim;
  std::vector<std::string> word_order;

  int n_train = spec.n_samples - spec.n_val - spec.n_test;
  for (int i = 0; i < spec.n_samples; ++i) {
    std::string id = "s" + std::to_string(i);
    std::string split =
        i < n_train ? "train" : (i < n_train + spec.n_val ? "val" : "test");
    std::vector<double> u(L);
    for (auto& v : u) v = rng.normal();

    nlohmann::json js;
    js["id"] = id;
    js["split"] = split;
    js["captions"] = nlohmann::json::array();
    for (int c = 0; c < spec.captions_per_sample; ++c) {
      int nt = spec.min_tokens + rng.uniform_int(spec.max_tokens -
                                                 spec.min_tokens + 1);
      std::string caption;
      std::vector<double> frame(spec.text_dim);
      for (int t = 0; t < nt; ++t) {
        std::string token =
            id + "c" + std::to_string(c) + "t" + std::to_string(t);
        emit_frame(text_map, spec.text_dim, u, frame.data());
        std::vector<float> vec(spec.text_dim);
        for (int j = 0; j < spec.text_dim; ++j)
          vec[j] = static_cast<float>(frame[j]);
        words.vectors[token] = std::move(vec);
        word_order.push_back(token);
        if (t) caption += " ";
        caption += token;
      }
      js["captions"].push_back(caption);
    }
    js["features"] = nlohmann::json::object();
    for (size_t e = 0; e < spec.experts.size(); ++e) {
      const auto& ex = spec.experts[e];
      int nf = spec.min_frames + rng.uniform_int(spec.max_frames -
                                                 spec.min_frames + 1);
      Tensor feat({nf, ex.dim});
      for (int t = 0; t < nf; ++t)
        emit_frame(audio_maps[e], ex.dim, u, feat.data.data() + t * ex.dim);
      std::string rel = "blobs/" + id + "_" + ex.name + ".bin";
      write_feature_archive(dir / rel, feat);
      js["features"][ex.name] = {{"path", rel}, {"rows", nf}};
    }
    manifest["samples"].push_back(std::move(js));
  }
  save_word_table(dir / "words.txt", words, word_order);
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(1) << "\n";
}

}  // namespace xar
