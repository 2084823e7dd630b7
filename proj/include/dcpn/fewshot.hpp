#pragma once

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcpn/common.hpp"
#include "dcpn/data.hpp"
#include "dcpn/encoders.hpp"
#include "dcpn/tensor.hpp"

namespace dcpn {

// ---------------------------------------------------------------------------
// PCA projector (fit on the base-dataset feature bank, frozen per epoch)
// ---------------------------------------------------------------------------

struct PCAProjector {
  int in_dim = 0, out_dim = 0;
  std::vector<double> mean_g, mean_l;  // [D]
  std::vector<double> comp_g, comp_l;  // [D x out_dim], row-major, orthonormal
  std::string fit_provenance;

  bool valid() const { return in_dim > 0; }
};

namespace detail_pca {

// covariance eigendecomposition; components in descending eigenvalue order,
// sign fixed so the largest-magnitude entry of each component is positive
inline void fit_channel(const std::vector<std::vector<double>>& bank,
                        int out_dim, std::vector<double>& mean,
                        std::vector<double>& comps) {
  int m = static_cast<int>(bank.size());
  int d = static_cast<int>(bank[0].size());
  if (m < out_dim)
    throw std::runtime_error(
        "fit_pca: bank of " + std::to_string(m) +
        " samples cannot support " + std::to_string(out_dim) +
        " components; shrink the embedding dimension or grow the bank");
  mean.assign(d, 0.0);
  for (const auto& row : bank)
    for (int i = 0; i < d; ++i) mean[i] += row[i];
  for (auto& v : mean) v /= double(m);
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
  Eigen::VectorXd centered(d);
  for (const auto& row : bank) {
    for (int i = 0; i < d; ++i) centered(i) = row[i] - mean[i];
    cov += centered * centered.transpose();
  }
  cov /= double(m);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  comps.assign(std::size_t(d) * out_dim, 0.0);
  for (int k = 0; k < out_dim; ++k) {
    Eigen::VectorXd v = es.eigenvectors().col(d - 1 - k);  // descending
    int arg = 0;
    for (int i = 1; i < d; ++i)
      if (std::abs(v(i)) > std::abs(v(arg))) arg = i;
    if (v(arg) < 0.0) v = -v;
    for (int i = 0; i < d; ++i) comps[std::size_t(i) * out_dim + k] = v(i);
  }
}

}  // namespace detail_pca

inline PCAProjector fit_pca(const std::vector<std::vector<double>>& bank_g,
                            const std::vector<std::vector<double>>& bank_l,
                            int out_dim, const std::string& provenance = "") {
  if (bank_g.empty() || bank_l.empty())
    throw std::runtime_error("fit_pca: empty feature bank");
  PCAProjector p;
  p.in_dim = static_cast<int>(bank_g[0].size());
  p.out_dim = out_dim;
  p.fit_provenance = provenance;
  detail_pca::fit_channel(bank_g, out_dim, p.mean_g, p.comp_g);
  detail_pca::fit_channel(bank_l, out_dim, p.mean_l, p.comp_l);
  return p;
}

// ---------------------------------------------------------------------------
// multi-scale features and prototypes
// ---------------------------------------------------------------------------

struct MultiScaleFeature {
  std::vector<double> z_g, z_l, z_mix;
};

inline MultiScaleFeature mix_features(const std::vector<double>& z_g,
                                      const std::vector<double>& z_l,
                                      const PCAProjector& proj) {
  if (static_cast<int>(z_g.size()) != proj.in_dim ||
      static_cast<int>(z_l.size()) != proj.in_dim)
    throw std::invalid_argument("mix_features: dimension mismatch");
  MultiScaleFeature f;
  f.z_g = z_g;
  f.z_l = z_l;
  f.z_mix.assign(std::size_t(proj.out_dim) * 2, 0.0);
  for (int k = 0; k < proj.out_dim; ++k) {
    double sg = 0.0, sl = 0.0;
    for (int i = 0; i < proj.in_dim; ++i) {
      sg += (z_g[i] - proj.mean_g[i]) *
            proj.comp_g[std::size_t(i) * proj.out_dim + k];
      sl += (z_l[i] - proj.mean_l[i]) *
            proj.comp_l[std::size_t(i) * proj.out_dim + k];
    }
    f.z_mix[k] = sg;
    f.z_mix[proj.out_dim + k] = sl;
  }
  return f;
}

// N x 3 grid of per-class prototypes (global, local, mix), class order =
// episode label order
struct PrototypeMatrix {
  int n_way = 0;
  std::vector<std::vector<double>> g, l, mix;  // [N][dim]
};

inline PrototypeMatrix compute_prototypes(
    const std::vector<MultiScaleFeature>& feats, const std::vector<int>& labels,
    int n_way = -1) {
  if (feats.empty() || feats.size() != labels.size())
    throw std::invalid_argument("compute_prototypes: size mismatch");
  if (n_way < 0) n_way = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<int> counts(n_way, 0);
  PrototypeMatrix mp;
  mp.n_way = n_way;
  mp.g.assign(n_way, std::vector<double>(feats[0].z_g.size(), 0.0));
  mp.l.assign(n_way, std::vector<double>(feats[0].z_l.size(), 0.0));
  mp.mix.assign(n_way, std::vector<double>(feats[0].z_mix.size(), 0.0));
  for (size_t i = 0; i < feats.size(); ++i) {
    int c = labels[i];
    counts[c]++;
    for (size_t j = 0; j < feats[i].z_g.size(); ++j)
      mp.g[c][j] += feats[i].z_g[j];
    for (size_t j = 0; j < feats[i].z_l.size(); ++j)
      mp.l[c][j] += feats[i].z_l[j];
    for (size_t j = 0; j < feats[i].z_mix.size(); ++j)
      mp.mix[c][j] += feats[i].z_mix[j];
  }
  for (int c = 0; c < n_way; ++c) {
    if (counts[c] == 0)
      throw std::runtime_error("compute_prototypes: class " +
                               std::to_string(c) + " has no support samples");
    for (auto& v : mp.g[c]) v /= counts[c];
    for (auto& v : mp.l[c]) v /= counts[c];
    for (auto& v : mp.mix[c]) v /= counts[c];
  }
  return mp;
}

// ---------------------------------------------------------------------------
// soft-voting scorer
// ---------------------------------------------------------------------------

enum class Metric { euclidean, cosine };

struct FewshotConfig {
  bool use_global = true, use_local = true, use_mix = true;
  Metric metric = Metric::euclidean;
  double tau = 1.0;       // divides distances before exp(-d)
  bool squared = false;   // squared euclidean variant
  double prob_floor = 1e-12;

  void validate() const {
    if (!use_global && !use_local && !use_mix)
      throw ConfigError("fewshot: at least one scale must be enabled");
    if (!(tau > 0.0) || !std::isfinite(tau))
      throw ConfigError("fewshot: temperature must be positive and finite");
  }
};

inline FewshotConfig ablation_config(bool global_scale, bool local_scale,
                                     bool mix_scale, Metric metric,
                                     double tau = 1.0, bool squared = false) {
  FewshotConfig c;
  c.use_global = global_scale;
  c.use_local = local_scale;
  c.use_mix = mix_scale;
  c.metric = metric;
  c.tau = tau;
  c.squared = squared;
  c.validate();
  return c;
}

struct ScoreResult {
  std::vector<std::array<double, 3>> distances;  // [N][scale]; 0 if disabled
  std::vector<double> confidence;                // alpha, [N]
  std::vector<double> probs;                     // softmax(alpha), [N]
  int predicted = 0;
};

namespace detail_score {

inline double distance(const std::vector<double>& a,
                       const std::vector<double>& b, const FewshotConfig& cfg) {
  double out;
  if (cfg.metric == Metric::euclidean) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    out = cfg.squared ? s : std::sqrt(s);
  } else {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
      dot += a[i] * b[i];
      na += a[i] * a[i];
      nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0)
      throw std::runtime_error("cosine distance undefined for a zero-norm "
                               "vector");
    out = 1.0 - dot / std::sqrt(na * nb);
  }
  return out / cfg.tau;
}

}  // namespace detail_score

inline ScoreResult score_query(const MultiScaleFeature& q,
                               const PrototypeMatrix& mp,
                               const FewshotConfig& cfg) {
  cfg.validate();
  int n = mp.n_way;
  ScoreResult r;
  r.distances.assign(n, {0.0, 0.0, 0.0});
  r.confidence.assign(n, 0.0);
  for (int c = 0; c < n; ++c) {
    if (cfg.use_global)
      r.distances[c][0] = detail_score::distance(q.z_g, mp.g[c], cfg);
    if (cfg.use_local)
      r.distances[c][1] = detail_score::distance(q.z_l, mp.l[c], cfg);
    if (cfg.use_mix) {
      if (q.z_mix.empty() || mp.mix[c].empty())
        throw std::runtime_error("score_query: mix scale requires a fitted "
                                 "PCA projector");
      r.distances[c][2] = detail_score::distance(q.z_mix, mp.mix[c], cfg);
    }
    double alpha = 0.0;
    if (cfg.use_global) alpha += std::exp(-r.distances[c][0]);
    if (cfg.use_local) alpha += std::exp(-r.distances[c][1]);
    if (cfg.use_mix) alpha += std::exp(-r.distances[c][2]);
    r.confidence[c] = alpha;
  }
  // softmax with max subtraction
  double mx = *std::max_element(r.confidence.begin(), r.confidence.end());
  r.probs.assign(n, 0.0);
  double z = 0.0;
  for (int c = 0; c < n; ++c) z += (r.probs[c] = std::exp(r.confidence[c] - mx));
  for (auto& p : r.probs) p /= z;
  r.predicted = 0;
  for (int c = 1; c < n; ++c)
    if (r.probs[c] > r.probs[r.predicted]) r.predicted = c;
  return r;
}

inline int classify(const ScoreResult& r) { return r.predicted; }

inline double episode_loss(const std::vector<ScoreResult>& results,
                           const std::vector<int>& labels,
                           double prob_floor = 1e-12) {
  if (results.size() != labels.size() || results.empty())
    throw std::invalid_argument("episode_loss: size mismatch");
  double s = 0.0;
  for (size_t i = 0; i < results.size(); ++i) {
    double p = results[i].probs[labels[i]];
    if (p <= 0.0) {
      std::cerr << "warning: clamping zero probability in episode loss\n";
      p = prob_floor;
    }
    s += -std::log(std::max(p, prob_floor));
  }
  return s / double(results.size());
}

// ---------------------------------------------------------------------------
// differentiable episode head (same math, autograd path)
// ---------------------------------------------------------------------------

struct EpisodeGraph {
  Tensor loss;   // scalar
  Tensor probs;  // [Q, N]
};

namespace detail_graph {

inline Tensor project_channel(const Tensor& z, const std::vector<double>& mean,
                              const std::vector<double>& comps, int in_dim,
                              int out_dim) {
  int rows = z.shape()[0];
  std::vector<double> mean_rows(std::size_t(rows) * in_dim);
  for (int r = 0; r < rows; ++r)
    std::copy(mean.begin(), mean.end(), mean_rows.begin() + std::size_t(r) * in_dim);
  Tensor centered = sub(z, Tensor::from_data({rows, in_dim}, std::move(mean_rows)));
  Tensor c = Tensor::from_data({in_dim, out_dim}, comps);
  return matmul(centered, c);  // PCA map held constant, no grad through comps
}

// pairwise distances between queries [Q,dim] and prototypes [N,dim] -> [Q,N]
inline Tensor pair_distances(const Tensor& queries, const Tensor& protos,
                             const FewshotConfig& cfg) {
  int Q = queries.shape()[0], N = protos.shape()[0], dim = queries.shape()[1];
  std::vector<int> qrep(std::size_t(Q) * N), prep(std::size_t(Q) * N);
  for (int q = 0; q < Q; ++q)
    for (int c = 0; c < N; ++c) {
      qrep[std::size_t(q) * N + c] = q;
      prep[std::size_t(q) * N + c] = c;
    }
  Tensor qx = gather_rows(queries, qrep);
  Tensor px = gather_rows(protos, prep);
  Tensor d;
  if (cfg.metric == Metric::euclidean) {
    Tensor diff = sub(qx, px);
    Tensor ss = sum_lastdim(mul(diff, diff));
    d = cfg.squared ? ss : sqrt_t(ss);
  } else {
    auto norm = [](const Tensor& t) {
      return sqrt_t(sum_lastdim(mul(t, t)));
    };
    Tensor nq = norm(qx), np = norm(px);
    for (double v : nq.data())
      if (v == 0.0)
        throw std::runtime_error("cosine distance undefined for a zero-norm "
                                 "vector");
    for (double v : np.data())
      if (v == 0.0)
        throw std::runtime_error("cosine distance undefined for a zero-norm "
                                 "vector");
    Tensor cosine = div(sum_lastdim(mul(qx, px)), mul(nq, np));
    d = sub(Tensor::from_data({Q * N}, std::vector<double>(std::size_t(Q) * N, 1.0)),
            cosine);
  }
  return reshape(scale(d, 1.0 / cfg.tau), {Q, N});
}

}  // namespace detail_graph

// Builds the episode loss graph from per-channel feature tensors. The PCA
// map enters as a constant linear layer; gradients flow to the features (and
// through them to the encoders).
inline EpisodeGraph episode_graph(const Tensor& support_g,
                                  const Tensor& support_l,
                                  const Tensor& query_g, const Tensor& query_l,
                                  const std::vector<int>& support_labels,
                                  const std::vector<int>& query_labels,
                                  int n_way, const PCAProjector& pca,
                                  const FewshotConfig& cfg) {
  cfg.validate();
  int S = support_g.shape()[0], Q = query_g.shape()[0];
  int D = support_g.shape()[1];
  if (cfg.use_mix && !pca.valid())
    throw std::runtime_error("episode_graph: mix scale requires a fitted PCA "
                             "projector");

  // class-mean matrix: protos = Avg * feats
  std::vector<int> counts(n_way, 0);
  for (int l : support_labels) counts.at(l)++;
  std::vector<double> avg(std::size_t(n_way) * S, 0.0);
  for (int i = 0; i < S; ++i) {
    int c = support_labels[i];
    if (counts[c] == 0)
      throw std::runtime_error("episode_graph: class without support");
    avg[std::size_t(c) * S + i] = 1.0 / double(counts[c]);
  }
  Tensor avg_m = Tensor::from_data({n_way, S}, std::move(avg));

  std::vector<std::pair<Tensor, Tensor>> scales;  // (support, query) per scale
  if (cfg.use_global) scales.push_back({support_g, query_g});
  if (cfg.use_local) scales.push_back({support_l, query_l});
  if (cfg.use_mix) {
    Tensor sg = detail_graph::project_channel(support_g, pca.mean_g,
                                              pca.comp_g, D, pca.out_dim);
    Tensor sl = detail_graph::project_channel(support_l, pca.mean_l,
                                              pca.comp_l, D, pca.out_dim);
    Tensor qg = detail_graph::project_channel(query_g, pca.mean_g, pca.comp_g,
                                              D, pca.out_dim);
    Tensor ql = detail_graph::project_channel(query_l, pca.mean_l, pca.comp_l,
                                              D, pca.out_dim);
    scales.push_back({concat_lastdim(sg, sl), concat_lastdim(qg, ql)});
  }

  Tensor alpha;
  for (auto& [sup, qry] : scales) {
    Tensor protos = matmul(avg_m, sup);
    Tensor d = detail_graph::pair_distances(qry, protos, cfg);
    Tensor conf = exp_t(neg(d));
    alpha = alpha.defined() ? add(alpha, conf) : conf;
  }
  Tensor probs = softmax_lastdim(alpha);
  std::vector<double> onehot(std::size_t(Q) * n_way, 0.0);
  for (int q = 0; q < Q; ++q) onehot[std::size_t(q) * n_way + query_labels[q]] = 1.0;
  Tensor p_true = sum_lastdim(
      mul(probs, Tensor::from_data({Q, n_way}, std::move(onehot))));
  Tensor loss = neg(mean_all(log_t(clamp_min(p_true, cfg.prob_floor))));
  return {loss, probs};
}

// ---------------------------------------------------------------------------
// feature extraction and the assembled model
// ---------------------------------------------------------------------------

inline std::vector<std::vector<double>> tensor_rows(const Tensor& t) {
  int rows = t.shape()[0], cols = t.shape()[1];
  std::vector<std::vector<double>> out(rows);
  for (int r = 0; r < rows; ++r)
    out[r].assign(t.data().begin() + std::int64_t(r) * cols,
                  t.data().begin() + std::int64_t(r + 1) * cols);
  return out;
}

// eval-mode features for a set of samples, batched; returns (global, local)
inline std::pair<std::vector<std::vector<double>>,
                 std::vector<std::vector<double>>>
extract_features(DualEncoder& enc, const Dataset& ds,
                 const std::vector<int>& indices, int batch_size = 64) {
  std::vector<std::vector<double>> g, l;
  for (size_t start = 0; start < indices.size(); start += batch_size) {
    size_t end = std::min(indices.size(), start + batch_size);
    std::vector<int> chunk(indices.begin() + start, indices.begin() + end);
    Tensor images = images_to_tensor(ds, chunk);
    auto [zg, zl] = enc.forward(images, false);
    auto gr = tensor_rows(zg);
    auto lr = tensor_rows(zl);
    g.insert(g.end(), gr.begin(), gr.end());
    l.insert(l.end(), lr.begin(), lr.end());
  }
  return {std::move(g), std::move(l)};
}

struct DcpnModel {
  DualEncoder encoder;
  PCAProjector pca;
  FewshotConfig head;
};

// score every query of an episode in eval mode
inline std::vector<ScoreResult> classify_episode(DcpnModel& model,
                                                 const Dataset& ds,
                                                 const Episode& ep) {
  auto [sg, sl] = extract_features(model.encoder, ds, ep.support_idx);
  auto [qg, ql] = extract_features(model.encoder, ds, ep.query_idx);
  auto to_feat = [&](const std::vector<double>& g,
                     const std::vector<double>& l) {
    if (model.head.use_mix) return mix_features(g, l, model.pca);
    MultiScaleFeature f;
    f.z_g = g;
    f.z_l = l;
    return f;
  };
  std::vector<MultiScaleFeature> support;
  for (size_t i = 0; i < sg.size(); ++i) support.push_back(to_feat(sg[i], sl[i]));
  PrototypeMatrix mp = compute_prototypes(support, ep.support_label, ep.n_way);
  std::vector<ScoreResult> out;
  out.reserve(qg.size());
  for (size_t i = 0; i < qg.size(); ++i)
    out.push_back(score_query(to_feat(qg[i], ql[i]), mp, model.head));
  return out;
}

// ---------------------------------------------------------------------------
// meta-training
// ---------------------------------------------------------------------------

struct MetaTrainSettings {
  int n_way = 5, k_shot = 1, q_queries = 15;
  int epochs = 10;
  int episodes_per_epoch = 30;
  double lr = 1e-3;
  int pca_bank_cap = 512;  // subsample cap for the per-epoch PCA refresh
  FewshotConfig head;
};

struct MetaTrainLog {
  std::vector<double> losses, accuracies;  // one row per episode
};

// Episodic meta-training on the base dataset. The PCA projector is refreshed
// from the current feature bank at each epoch boundary and held constant
// within the epoch; the returned projector is the final one, frozen for
// meta-testing.
inline MetaTrainLog meta_train(
    DualEncoder& model, const Dataset& base, const MetaTrainSettings& s,
    Rng& rng, PCAProjector& out_pca,
    const std::function<void(int, double, double)>& on_episode = nullptr) {
  s.head.validate();
  StateDict sd;
  model.state(sd);
  AdamW opt(sd.params, s.lr);
  MetaTrainLog log;
  EpisodeSpec spec{s.n_way, s.k_shot, s.q_queries};
  int episode_no = 0;
  for (int epoch = 0; epoch < s.epochs; ++epoch) {
    // refresh the projector from the base bank (eval mode, no grad use)
    std::vector<int> bank_idx(base.samples.size());
    for (size_t i = 0; i < bank_idx.size(); ++i) bank_idx[i] = int(i);
    if (static_cast<int>(bank_idx.size()) > s.pca_bank_cap) {
      rng.shuffle(bank_idx);
      bank_idx.resize(s.pca_bank_cap);
    }
    auto [bg, bl] = extract_features(model, base, bank_idx);
    out_pca = fit_pca(bg, bl, model.embed_dim() / 2,
                      base.name + "/" + to_string(base.split) + " epoch " +
                          std::to_string(epoch));

    for (int e = 0; e < s.episodes_per_epoch; ++e, ++episode_no) {
      Episode ep = sample_episode(base, spec, rng);
      std::vector<int> all_idx = ep.support_idx;
      all_idx.insert(all_idx.end(), ep.query_idx.begin(), ep.query_idx.end());
      Tensor images = images_to_tensor(base, all_idx);
      auto [zg, zl] = model.forward(images, true);
      int S = static_cast<int>(ep.support_idx.size());
      int Q = static_cast<int>(ep.query_idx.size());
      std::vector<int> sup_rows(S), qry_rows(Q);
      for (int i = 0; i < S; ++i) sup_rows[i] = i;
      for (int i = 0; i < Q; ++i) qry_rows[i] = S + i;
      EpisodeGraph g = episode_graph(
          gather_rows(zg, sup_rows), gather_rows(zl, sup_rows),
          gather_rows(zg, qry_rows), gather_rows(zl, qry_rows),
          ep.support_label, ep.query_label, s.n_way, out_pca, s.head);
      double lv = g.loss.item();
      if (!std::isfinite(lv))
        throw std::runtime_error("meta_train: non-finite loss at episode " +
                                 std::to_string(episode_no));
      opt.zero_grad();
      g.loss.backward();
      opt.step();

      int correct = 0;
      for (int q = 0; q < Q; ++q) {
        int arg = 0;
        for (int c = 1; c < s.n_way; ++c)
          if (g.probs.data()[std::size_t(q) * s.n_way + c] >
              g.probs.data()[std::size_t(q) * s.n_way + arg])
            arg = c;
        if (arg == ep.query_label[q]) ++correct;
      }
      double acc = double(correct) / double(Q);
      log.losses.push_back(lv);
      log.accuracies.push_back(acc);
      if (on_episode) on_episode(episode_no, lv, acc);
    }
  }
  return log;
}

}  // namespace dcpn
