#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "dcpn/common.hpp"
#include "dcpn/encoders.hpp"
#include "dcpn/fewshot.hpp"
#include "dcpn/pretrain.hpp"

#include "json.hpp"

namespace dcpn {

// ---------------------------------------------------------------------------
// experiment configuration
// ---------------------------------------------------------------------------

struct DataConfig {
  std::string corpus_dir = "data";  // synth writes here; loaders read from it
  int image_size = 32;
  int synth_classes = 8;
  int synth_train_per_class = 12;
  int synth_test_per_class = 8;
};

struct PretrainConfig {
  double sm_ratio = 0.25;
  int batch_size = 16;
  int steps = 200;
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.95;
  double weight_decay = 0.05;
  std::string loss_scope = "missing";  // or "dropped-only"
  DecoderConfig decoder;
};

struct FewshotSection {
  int n_way = 5, k_shot = 1, q_queries = 15;
  int epochs = 10, episodes_per_epoch = 30;
  double lr = 1e-3;
  int pca_bank_cap = 512;
  std::vector<std::string> scales{"global", "local", "mix"};
  std::string metric = "euclidean";
  double tau = 1.0;
  bool squared = false;
};

struct EvalConfig {
  int n_tasks = 1000;
  int q = 15;
};

struct ExperimentConfig {
  DataConfig data;
  PyramidEncoderConfig pyramid;
  ConvEncoderConfig conv;
  PretrainConfig pretrain;
  FewshotSection fewshot;
  EvalConfig eval;
  std::uint64_t seed = 0;

  FewshotConfig head() const {
    bool g = false, l = false, m = false;
    for (const auto& s : fewshot.scales) {
      if (s == "global")
        g = true;
      else if (s == "local")
        l = true;
      else if (s == "mix")
        m = true;
      else
        throw ConfigError("unknown scale '" + s + "'");
    }
    return ablation_config(g, l, m, metric(), fewshot.tau, fewshot.squared);
  }

  Metric metric() const {
    if (fewshot.metric == "euclidean") return Metric::euclidean;
    if (fewshot.metric == "cosine") return Metric::cosine;
    throw ConfigError("unknown metric '" + fewshot.metric + "'");
  }

  LossScope loss_scope() const {
    if (pretrain.loss_scope == "missing") return LossScope::missing;
    if (pretrain.loss_scope == "dropped-only") return LossScope::dropped_only;
    throw ConfigError("unknown loss scope '" + pretrain.loss_scope + "'");
  }

  void validate() const {
    pyramid.validate();
    conv.validate();
    if (pyramid.embed_dim != conv.embed_dim)
      throw ConfigError("encoders.embed_dim must match between channels");
    if (pyramid.embed_dim % 2 != 0)
      throw ConfigError("encoders.embed_dim must be even for the PCA split");
    if (data.image_size != pyramid.image_size ||
        data.image_size != conv.image_size)
      throw ConfigError("data.image_size must match both encoder configs");
    if (pretrain.sm_ratio < 0.0 || pretrain.sm_ratio >= 1.0)
      throw ConfigError("pretrain.sm_ratio must lie in [0, 1)");
    if (pretrain.batch_size < 1 || pretrain.steps < 1)
      throw ConfigError("pretrain.batch_size and steps must be positive");
    if (fewshot.n_way < 2 || fewshot.k_shot < 1 || fewshot.q_queries < 1)
      throw ConfigError("fewshot episode shape is degenerate");
    if (eval.n_tasks < 1 || eval.q < 1)
      throw ConfigError("eval.n_tasks and eval.q must be positive");
    head();        // validates scales and metric
    loss_scope();  // validates the scope string
  }
};

namespace detail_cfg {

inline void reject_unknown(const nlohmann::json& j,
                           const std::set<std::string>& allowed,
                           const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError("unknown config key '" + where + "." + it.key() + "'");
}

template <typename T>
void get_if(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail_cfg

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  using detail_cfg::get_if;
  using detail_cfg::reject_unknown;
  ExperimentConfig c;
  reject_unknown(j, {"data", "encoders", "pretrain", "fewshot", "eval", "seed"},
                 "");
  get_if(j, "seed", c.seed);
  if (j.contains("data")) {
    const auto& d = j.at("data");
    reject_unknown(d,
                   {"corpus_dir", "image_size", "synth_classes",
                    "synth_train_per_class", "synth_test_per_class"},
                   "data");
    get_if(d, "corpus_dir", c.data.corpus_dir);
    get_if(d, "image_size", c.data.image_size);
    get_if(d, "synth_classes", c.data.synth_classes);
    get_if(d, "synth_train_per_class", c.data.synth_train_per_class);
    get_if(d, "synth_test_per_class", c.data.synth_test_per_class);
    c.pyramid.image_size = c.data.image_size;
    c.conv.image_size = c.data.image_size;
  }
  if (j.contains("encoders")) {
    const auto& e = j.at("encoders");
    reject_unknown(e,
                   {"embed_dim", "stage_dims", "stage_heads", "sr_ratios",
                    "mlp_ratio", "conv_widths", "conv_blocks_per_stage"},
                   "encoders");
    int d = c.pyramid.embed_dim;
    get_if(e, "embed_dim", d);
    c.pyramid.embed_dim = d;
    c.conv.embed_dim = d;
    get_if(e, "stage_dims", c.pyramid.stage_dims);
    get_if(e, "stage_heads", c.pyramid.stage_heads);
    get_if(e, "sr_ratios", c.pyramid.sr_ratios);
    get_if(e, "mlp_ratio", c.pyramid.mlp_ratio);
    get_if(e, "conv_widths", c.conv.widths);
    get_if(e, "conv_blocks_per_stage", c.conv.blocks_per_stage);
  }
  if (j.contains("pretrain")) {
    const auto& p = j.at("pretrain");
    reject_unknown(p,
                   {"sm_ratio", "batch_size", "steps", "lr", "beta1", "beta2",
                    "weight_decay", "loss_scope", "decoder_depth",
                    "decoder_dim", "decoder_heads", "decoder_upsample"},
                   "pretrain");
    get_if(p, "sm_ratio", c.pretrain.sm_ratio);
    get_if(p, "batch_size", c.pretrain.batch_size);
    get_if(p, "steps", c.pretrain.steps);
    get_if(p, "lr", c.pretrain.lr);
    get_if(p, "beta1", c.pretrain.beta1);
    get_if(p, "beta2", c.pretrain.beta2);
    get_if(p, "weight_decay", c.pretrain.weight_decay);
    get_if(p, "loss_scope", c.pretrain.loss_scope);
    get_if(p, "decoder_depth", c.pretrain.decoder.depth);
    get_if(p, "decoder_dim", c.pretrain.decoder.dim);
    get_if(p, "decoder_heads", c.pretrain.decoder.heads);
    get_if(p, "decoder_upsample", c.pretrain.decoder.upsample_factor);
  }
  if (j.contains("fewshot")) {
    const auto& f = j.at("fewshot");
    reject_unknown(f,
                   {"n_way", "k_shot", "q_queries", "epochs",
                    "episodes_per_epoch", "lr", "pca_bank_cap", "scales",
                    "metric", "tau", "squared"},
                   "fewshot");
    get_if(f, "n_way", c.fewshot.n_way);
    get_if(f, "k_shot", c.fewshot.k_shot);
    get_if(f, "q_queries", c.fewshot.q_queries);
    get_if(f, "epochs", c.fewshot.epochs);
    get_if(f, "episodes_per_epoch", c.fewshot.episodes_per_epoch);
    get_if(f, "lr", c.fewshot.lr);
    get_if(f, "pca_bank_cap", c.fewshot.pca_bank_cap);
    get_if(f, "scales", c.fewshot.scales);
    get_if(f, "metric", c.fewshot.metric);
    get_if(f, "tau", c.fewshot.tau);
    get_if(f, "squared", c.fewshot.squared);
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    reject_unknown(e, {"n_tasks", "q"}, "eval");
    get_if(e, "n_tasks", c.eval.n_tasks);
    get_if(e, "q", c.eval.q);
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error in " + path.string() + ": " +
                      e.what());
  }
  return parse_config(j);
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["data"] = {{"corpus_dir", c.data.corpus_dir},
               {"image_size", c.data.image_size},
               {"synth_classes", c.data.synth_classes},
               {"synth_train_per_class", c.data.synth_train_per_class},
               {"synth_test_per_class", c.data.synth_test_per_class}};
  j["encoders"] = {{"embed_dim", c.pyramid.embed_dim},
                   {"stage_dims", c.pyramid.stage_dims},
                   {"stage_heads", c.pyramid.stage_heads},
                   {"sr_ratios", c.pyramid.sr_ratios},
                   {"mlp_ratio", c.pyramid.mlp_ratio},
                   {"conv_widths", c.conv.widths},
                   {"conv_blocks_per_stage", c.conv.blocks_per_stage}};
  j["pretrain"] = {{"sm_ratio", c.pretrain.sm_ratio},
                   {"batch_size", c.pretrain.batch_size},
                   {"steps", c.pretrain.steps},
                   {"lr", c.pretrain.lr},
                   {"beta1", c.pretrain.beta1},
                   {"beta2", c.pretrain.beta2},
                   {"weight_decay", c.pretrain.weight_decay},
                   {"loss_scope", c.pretrain.loss_scope},
                   {"decoder_depth", c.pretrain.decoder.depth},
                   {"decoder_dim", c.pretrain.decoder.dim},
                   {"decoder_heads", c.pretrain.decoder.heads},
                   {"decoder_upsample", c.pretrain.decoder.upsample_factor}};
  j["fewshot"] = {{"n_way", c.fewshot.n_way},
                  {"k_shot", c.fewshot.k_shot},
                  {"q_queries", c.fewshot.q_queries},
                  {"epochs", c.fewshot.epochs},
                  {"episodes_per_epoch", c.fewshot.episodes_per_epoch},
                  {"lr", c.fewshot.lr},
                  {"pca_bank_cap", c.fewshot.pca_bank_cap},
                  {"scales", c.fewshot.scales},
                  {"metric", c.fewshot.metric},
                  {"tau", c.fewshot.tau},
                  {"squared", c.fewshot.squared}};
  j["eval"] = {{"n_tasks", c.eval.n_tasks}, {"q", c.eval.q}};
  return j;
}

inline std::string config_hash(const ExperimentConfig& c) {
  return hex64(fnv1a64(config_to_json(c).dump()));
}

// ---------------------------------------------------------------------------
// embedding cache: raw little-endian doubles plus a JSON sidecar
// ---------------------------------------------------------------------------

struct EmbeddingCache {
  std::vector<std::vector<double>> features;  // [M][D]
  nlohmann::json sidecar;
};

inline void save_embeddings(const std::filesystem::path& bin_path,
                            const std::vector<std::vector<double>>& feats,
                            const std::string& dataset_name,
                            const std::string& split,
                            const std::string& ckpt_checksum,
                            const std::string& channel) {
  if (feats.empty()) throw std::runtime_error("save_embeddings: empty matrix");
  std::size_t d = feats[0].size();
  std::vector<double> flat;
  flat.reserve(feats.size() * d);
  for (const auto& row : feats) {
    if (row.size() != d)
      throw std::runtime_error("save_embeddings: ragged matrix");
    flat.insert(flat.end(), row.begin(), row.end());
  }
  std::ofstream bin(bin_path, std::ios::binary);
  if (!bin)
    throw std::runtime_error("cannot write embeddings: " + bin_path.string());
  bin.write(reinterpret_cast<const char*>(flat.data()),
            static_cast<std::streamsize>(flat.size() * sizeof(double)));
  nlohmann::json side;
  side["dataset"] = dataset_name;
  side["split"] = split;
  side["checkpoint_checksum"] = ckpt_checksum;
  side["channel"] = channel;
  side["shape"] = {feats.size(), d};
  side["dtype"] = "float64";
  side["checksum"] = hex64(fnv1a64(flat));
  std::ofstream sj(bin_path.string() + ".json");
  if (!sj)
    throw std::runtime_error("cannot write embedding sidecar: " +
                             bin_path.string() + ".json");
  sj << side.dump(2) << "\n";
}

inline EmbeddingCache load_embeddings(const std::filesystem::path& bin_path) {
  std::ifstream sj(bin_path.string() + ".json");
  if (!sj)
    throw std::runtime_error("missing embedding sidecar: " +
                             bin_path.string() + ".json");
  nlohmann::json side;
  sj >> side;
  auto shape = side.at("shape").get<std::vector<std::size_t>>();
  std::vector<double> flat(shape[0] * shape[1]);
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin)
    throw std::runtime_error("cannot read embeddings: " + bin_path.string());
  bin.read(reinterpret_cast<char*>(flat.data()),
           static_cast<std::streamsize>(flat.size() * sizeof(double)));
  if (!bin)
    throw std::runtime_error("embedding file shorter than its sidecar shape: " +
                             bin_path.string());
  if (hex64(fnv1a64(flat)) != side.at("checksum").get<std::string>())
    throw std::runtime_error("embedding checksum mismatch: " +
                             bin_path.string());
  EmbeddingCache cache;
  cache.sidecar = std::move(side);
  cache.features.resize(shape[0]);
  for (std::size_t i = 0; i < shape[0]; ++i)
    cache.features[i].assign(flat.begin() + i * shape[1],
                             flat.begin() + (i + 1) * shape[1]);
  return cache;
}

}  // namespace dcpn
