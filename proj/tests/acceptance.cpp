// Acceptance suite: one line per criterion, nonzero exit if any required
// criterion fails. Criterion 12 needs full-scale datasets and GPU training
// and is reported as skipped.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <vector>

#include "dcpn/eval.hpp"
#include "dcpn/fewshot.hpp"
#include "dcpn/pretrain.hpp"
#include "gradcheck.hpp"

using namespace dcpn;

namespace {

int failures = 0;

void report(int number, const char* what, bool ok) {
  std::printf("[%s] criterion %2d: %s\n", ok ? "PASS" : "FAIL", number, what);
  if (!ok) ++failures;
}

double elapsed_s(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

PyramidEncoderConfig tiny_pyramid() {
  PyramidEncoderConfig c;
  c.image_size = 32;
  c.stage_dims = {8, 8, 16, 16};
  c.stage_heads = {1, 1, 2, 2};
  c.sr_ratios = {2, 1, 1, 1};
  c.mlp_ratio = 2;
  c.embed_dim = 16;
  return c;
}

PyramidEncoderConfig micro_pyramid() {
  PyramidEncoderConfig c = tiny_pyramid();
  c.stage_dims = {4, 4, 8, 8};
  c.stage_heads = {1, 1, 2, 2};
  c.embed_dim = 8;
  return c;
}

ConvEncoderConfig micro_conv() {
  ConvEncoderConfig c;
  c.image_size = 32;
  c.widths = {8, 8, 8};
  c.blocks_per_stage = 1;
  c.embed_dim = 8;
  return c;
}

DecoderConfig tiny_decoder() {
  DecoderConfig d;
  d.depth = 1;
  d.dim = 16;
  d.heads = 2;
  d.upsample_factor = 4;
  return d;
}

// --- criterion 1: masking invariants --------------------------------------

bool masking_invariants() {
  Rng rng(1);
  for (int trial = 0; trial < 10000; ++trial) {
    int gh = 2 * (1 + rng.uniform_int(14));  // even sizes 2..28
    int gw = 2 * (1 + rng.uniform_int(14));
    MaskPlan p = uniform_sample_mask(gh, gw, rng);
    if (static_cast<int>(p.kept.size()) != gh * gw / 4) return false;
    std::set<std::pair<int, int>> cells;
    for (int patch : p.kept) cells.insert({(patch / gw) / 2, (patch % gw) / 2});
    if (cells.size() != p.kept.size()) return false;
  }
  std::vector<int> counts(4, 0);
  for (int i = 0; i < 10000; ++i) {
    int patch = uniform_sample_mask(2, 2, rng).kept[0];
    counts[(patch / 2) * 2 + patch % 2]++;
  }
  for (int pos = 0; pos < 4; ++pos)
    if (std::abs(counts[pos] / 10000.0 - 0.25) >= 0.02) return false;
  return true;
}

// --- criterion 2: reconstruction loss -------------------------------------

bool recon_loss() {
  if (mae_loss({{1.0, 2.0}, {1.0, 2.0}}) != 0.0) return false;
  if (mae_loss({{0.0}, {1.0}}) != 1.0) return false;
  if (mae_loss({{0.0, 0.0}, {1.0, 3.0}}) != 5.0) return false;
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    ReconTarget base, scaled;
    double lambda = 0.5 + 2.0 * rng.uniform();
    for (int i = 0; i < 50; ++i) {
      double t = rng.uniform(), p = rng.uniform();
      base.target_pixels.push_back(t);
      base.predicted_pixels.push_back(p);
      scaled.target_pixels.push_back(t);
      scaled.predicted_pixels.push_back(t + lambda * (p - t));
    }
    if (std::abs(mae_loss(scaled) - lambda * lambda * mae_loss(base)) >= 1e-9)
      return false;
  }
  return true;
}

// --- criterion 3: pixel shuffle -------------------------------------------

bool pixel_shuffle_ok() {
  // [1,4,1,1] with r=2 -> [1,1,2,2] laid out row-major
  Tensor x = Tensor::from_data({1, 4, 1, 1}, {1.0, 2.0, 3.0, 4.0});
  Tensor y = pixel_shuffle(x, 2);
  if (y.shape() != Shape{1, 1, 2, 2}) return false;
  if (y.data() != std::vector<double>{1.0, 2.0, 3.0, 4.0}) return false;

  Rng rng(3);
  Tensor z = Tensor::zeros({2, 12, 4, 4});
  for (auto& v : z.data()) v = rng.normal();
  Tensor back = pixel_unshuffle(pixel_shuffle(z, 2), 2);
  return back.shape() == z.shape() && back.data() == z.data();
}

// --- criterion 4: prototype-head oracle equivalence ------------------------

bool head_oracle() {
  Rng rng(4);
  auto euclid = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0;
    for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
  };
  for (int episode = 0; episode < 200; ++episode) {
    int n = 2 + rng.uniform_int(4);
    int k = 1 + rng.uniform_int(10);
    int d = 4 + rng.uniform_int(29);
    std::vector<MultiScaleFeature> support;
    std::vector<int> labels;
    for (int c = 0; c < n; ++c)
      for (int i = 0; i < k; ++i) {
        MultiScaleFeature f;
        f.z_g.resize(d);
        f.z_l.resize(d);
        f.z_mix.resize(d);
        for (int j = 0; j < d; ++j) {
          f.z_g[j] = rng.normal() + c;
          f.z_l[j] = rng.normal();
          f.z_mix[j] = rng.normal() - c;
        }
        support.push_back(f);
        labels.push_back(c);
      }
    PrototypeMatrix mp = compute_prototypes(support, labels, n);
    MultiScaleFeature q;
    q.z_g.resize(d);
    q.z_l.resize(d);
    q.z_mix.resize(d);
    for (int j = 0; j < d; ++j) {
      q.z_g[j] = rng.normal();
      q.z_l[j] = rng.normal();
      q.z_mix[j] = rng.normal();
    }
    ScoreResult lib = score_query(q, mp, FewshotConfig{});

    // naive reference
    std::vector<double> alpha(n, 0.0);
    for (int c = 0; c < n; ++c) {
      double dg = euclid(q.z_g, mp.g[c]);
      double dl = euclid(q.z_l, mp.l[c]);
      double dm = euclid(q.z_mix, mp.mix[c]);
      if (std::abs(lib.distances[c][0] - dg) > 1e-6 * std::max(1.0, dg))
        return false;
      if (std::abs(lib.distances[c][1] - dl) > 1e-6 * std::max(1.0, dl))
        return false;
      if (std::abs(lib.distances[c][2] - dm) > 1e-6 * std::max(1.0, dm))
        return false;
      alpha[c] = std::exp(-dg) + std::exp(-dl) + std::exp(-dm);
      if (std::abs(lib.confidence[c] - alpha[c]) >
          1e-6 * std::max(1.0, alpha[c]))
        return false;
    }
    double mx = alpha[0];
    for (double a : alpha) mx = std::max(mx, a);
    double z = 0;
    for (double a : alpha) z += std::exp(a - mx);
    int ref_pred = 0;
    for (int c = 0; c < n; ++c) {
      double p = std::exp(alpha[c] - mx) / z;
      if (std::abs(lib.probs[c] - p) > 1e-6 * std::max(1.0, p)) return false;
      if (p > std::exp(alpha[ref_pred] - mx) / z) ref_pred = c;
    }
    if (lib.predicted != ref_pred) return false;
  }

  // hand case d(A)=(0,0,0), d(B)=(1,1,1)
  MultiScaleFeature q;
  q.z_g = {0, 0};
  q.z_l = {0, 0};
  q.z_mix = {0, 0};
  PrototypeMatrix mp;
  mp.n_way = 2;
  mp.g = {{0, 0}, {1, 0}};
  mp.l = {{0, 0}, {0, 1}};
  mp.mix = {{0, 0}, {1, 0}};
  ScoreResult r = score_query(q, mp, FewshotConfig{});
  return std::abs(r.probs[0] - 0.8695) < 1e-4;
}

// --- criterion 5: gradient checks -----------------------------------------

bool gradients() {
  using dcpn::testing::gradcheck;
  Rng rng(5);
  int n = 3, k = 2, q_count = 2, d = 8;
  std::vector<std::vector<double>> bank(16, std::vector<double>(d));
  for (auto& row : bank)
    for (auto& v : row) v = rng.normal();
  PCAProjector pca = fit_pca(bank, bank, d / 2);
  int S = n * k;
  auto rand_tensor = [&](int rows) {
    Tensor t = Tensor::zeros({rows, d}, true);
    for (auto& v : t.data()) v = rng.normal();
    return t;
  };
  Tensor sg = rand_tensor(S), sl = rand_tensor(S);
  Tensor qg = rand_tensor(q_count), ql = rand_tensor(q_count);
  std::vector<int> sup_labels{0, 0, 1, 1, 2, 2}, qry_labels{2, 0};
  FewshotConfig cfg;
  auto loss_fn = [&]() {
    return episode_graph(sg, sl, qg, ql, sup_labels, qry_labels, n, pca, cfg)
        .loss;
  };
  for (const Tensor& t : {qg, ql, sg, sl})
    if (gradcheck(t, loss_fn) >= 1e-4) return false;

  // encoder parameters through a full episode on the micro configuration
  Rng init(6);
  DualEncoder model(micro_pyramid(), micro_conv(), init);
  Rng data_rng(7);
  Tensor images = Tensor::zeros({5, 3, 32, 32});
  for (auto& v : images.data()) v = data_rng.uniform(0.0, 1.0);
  std::vector<std::vector<double>> bank8(8, std::vector<double>(8));
  for (auto& row : bank8)
    for (auto& v : row) v = data_rng.normal();
  PCAProjector pca8 = fit_pca(bank8, bank8, 4);
  std::vector<int> sup{0, 1, 2}, qry{3, 4};
  std::vector<int> sup_l{0, 1, 2}, qry_l{1, 2};
  // scoring-path batch-norm statistics (training-mode BN makes the loss
  // nearly scale-invariant in the early conv weights, so finite differences
  // there measure only noise)
  auto episode_fn = [&]() {
    auto [zg, zl] = model.forward(images, false);
    return episode_graph(gather_rows(zg, sup), gather_rows(zl, sup),
                         gather_rows(zg, qry), gather_rows(zl, qry), sup_l,
                         qry_l, 3, pca8, cfg)
        .loss;
  };
  StateDict sd;
  model.state(sd);
  for (auto& [name, t] : sd.params) {
    if (name != "global.patch_embed.weight" && name != "local.stem.weight" &&
        name != "global.head.weight" && name != "local.head.bias")
      continue;
    if (gradcheck(t, episode_fn) >= 1e-3) return false;
  }
  return true;
}

// --- criterion 6: PCA ------------------------------------------------------

bool pca_checks() {
  // exact line data
  std::vector<std::vector<double>> line;
  for (int i = -10; i <= 10; ++i) line.push_back({double(i), double(i)});
  PCAProjector p = fit_pca(line, line, 1);
  double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  if (std::abs(p.comp_g[0] - inv_sqrt2) >= 1e-6) return false;
  if (std::abs(p.comp_g[1] - inv_sqrt2) >= 1e-6) return false;

  Rng rng(8);
  int d = 8, out = 4, m = 300;
  std::vector<std::vector<double>> bank(m, std::vector<double>(d));
  for (auto& row : bank)
    for (int i = 0; i < d; ++i) row[i] = rng.normal() * (1.0 + 0.4 * i);
  PCAProjector q = fit_pca(bank, bank, out);
  for (int a = 0; a < out; ++a)
    for (int b = 0; b < out; ++b) {
      double dot = 0;
      for (int i = 0; i < d; ++i)
        dot += q.comp_g[i * out + a] * q.comp_g[i * out + b];
      if (std::abs(dot - (a == b ? 1.0 : 0.0)) >= 1e-6) return false;
    }

  // reconstruction error vs discarded eigenvalue mass
  PCAProjector full = fit_pca(bank, bank, d);
  std::vector<double> lam(d, 0.0);
  for (const auto& row : bank)
    for (int kk = 0; kk < d; ++kk) {
      double s = 0;
      for (int i = 0; i < d; ++i)
        s += (row[i] - full.mean_g[i]) * full.comp_g[i * d + kk];
      lam[kk] += s * s / m;
    }
  double err = 0.0;
  for (const auto& row : bank) {
    std::vector<double> rec(full.mean_g);
    for (int kk = 0; kk < out; ++kk) {
      double s = 0;
      for (int i = 0; i < d; ++i)
        s += (row[i] - q.mean_g[i]) * q.comp_g[i * out + kk];
      for (int i = 0; i < d; ++i) rec[i] += s * q.comp_g[i * out + kk];
    }
    for (int i = 0; i < d; ++i) err += (row[i] - rec[i]) * (row[i] - rec[i]);
  }
  err /= m;
  double discarded = 0.0;
  for (int kk = out; kk < d; ++kk) discarded += lam[kk];
  return std::abs(err - discarded) < 1e-6;
}

// --- criterion 7: metrics ---------------------------------------------------

bool metric_checks() {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    int n = 2 + rng.uniform_int(6);
    int q = 5 + rng.uniform_int(26);
    std::vector<int> preds, labels;
    for (int i = 0; i < q; ++i) {
      preds.push_back(rng.uniform_int(n));
      labels.push_back(rng.uniform_int(n));
    }
    MetricsReport lib = metrics(confusion(preds, labels, n));
    long ptp = 0, ptn = 0, pfp = 0, pfn = 0;
    double mp = 0, mr = 0, mf = 0;
    for (int c = 0; c < n; ++c) {
      long tp = 0, tn = 0, fp = 0, fn = 0;
      for (int i = 0; i < q; ++i) {
        if (preds[i] == c && labels[i] == c) tp++;
        if (preds[i] == c && labels[i] != c) fp++;
        if (preds[i] != c && labels[i] == c) fn++;
        if (preds[i] != c && labels[i] != c) tn++;
      }
      ptp += tp;
      ptn += tn;
      pfp += fp;
      pfn += fn;
      double prec = tp + fp == 0 ? 0.0 : double(tp) / (tp + fp);
      double rec = tp + fn == 0 ? 0.0 : double(tp) / (tp + fn);
      mp += prec / n;
      mr += rec / n;
      mf += (prec + rec == 0 ? 0.0 : 2 * prec * rec / (prec + rec)) / n;
    }
    if (lib.accuracy != double(ptp + ptn) / double(ptp + ptn + pfp + pfn))
      return false;
    if (std::abs(lib.precision - mp) > 1e-15) return false;
    if (std::abs(lib.recall - mr) > 1e-15) return false;
    if (std::abs(lib.f1 - mf) > 1e-15) return false;
  }
  // F1 identity: precision = recall = p forces F1 = p, exactly
  ConfusionCounts c;
  c.n_way = 1;
  c.tp = {3};
  c.fp = {1};
  c.fn = {1};
  c.tn = {0};
  MetricsReport r = metrics(c);
  return r.precision == 0.75 && r.recall == 0.75 && r.f1 == 0.75;
}

// --- criterion 8: single-scale degeneracy ----------------------------------

bool degeneracy() {
  Rng rng(10);
  FewshotConfig local_only =
      ablation_config(false, true, false, Metric::euclidean);
  for (int episode = 0; episode < 50; ++episode) {
    int n = 2 + rng.uniform_int(4);
    int k = 1 + rng.uniform_int(5);
    int d = 4 + rng.uniform_int(12);
    // standalone prototypical network on Z_L: naive means, distances, and the
    // exp(-d) confidence link of the soft-vote head
    std::vector<std::vector<double>> feats;
    std::vector<int> labels;
    for (int c = 0; c < n; ++c)
      for (int i = 0; i < k; ++i) {
        std::vector<double> f(d);
        for (auto& v : f) v = rng.normal() + 0.3 * c;
        feats.push_back(f);
        labels.push_back(c);
      }
    std::vector<double> query(d);
    for (auto& v : query) v = rng.normal();

    std::vector<double> alpha;
    for (int c = 0; c < n; ++c) {
      std::vector<double> proto(d, 0.0);
      for (size_t i = 0; i < feats.size(); ++i)
        if (labels[i] == c)
          for (int j = 0; j < d; ++j) proto[j] += feats[i][j] / k;
      double s = 0;
      for (int j = 0; j < d; ++j)
        s += (query[j] - proto[j]) * (query[j] - proto[j]);
      alpha.push_back(std::exp(-std::sqrt(s)));
    }
    double mx = alpha[0];
    for (double a : alpha) mx = std::max(mx, a);
    double z = 0;
    for (double a : alpha) z += std::exp(a - mx);

    // DCPN path with scales={local}
    std::vector<MultiScaleFeature> support;
    for (const auto& f : feats) {
      MultiScaleFeature msf;
      msf.z_g = f;  // ignored by the config
      msf.z_l = f;
      support.push_back(msf);
    }
    PrototypeMatrix mp = compute_prototypes(support, labels, n);
    MultiScaleFeature q;
    q.z_g = query;
    q.z_l = query;
    ScoreResult r = score_query(q, mp, local_only);
    for (int c = 0; c < n; ++c)
      if (std::abs(r.probs[c] - std::exp(alpha[c] - mx) / z) >= 1e-12)
        return false;
  }
  return true;
}

// --- criterion 9: pretraining regression ------------------------------------

bool pretrain_regression() {
  auto t0 = std::chrono::steady_clock::now();
  Rng init(11);
  Pretrainer trainer(tiny_pyramid(), tiny_decoder(), init);
  Dataset ds = generate_synthetic_corpus(6, 8, 32, 12);
  PretrainSettings s;
  s.batch_size = 8;
  s.steps = 200;
  Rng rng(13);
  PretrainLog log = pretrain_loop(trainer, ds, s, rng);
  double head = 0, tail = 0;
  for (int i = 0; i < 20; ++i) head += log.losses[i] / 20.0;
  for (int i = 180; i < 200; ++i) tail += log.losses[i] / 20.0;
  std::printf("          pretrain loss %.4f -> %.4f in %.0fs\n", head, tail,
              elapsed_s(t0));
  return tail <= 0.5 * head && elapsed_s(t0) < 600.0;
}

// --- criterion 10: end-to-end learnability ----------------------------------

bool end_to_end() {
  auto t0 = std::chrono::steady_clock::now();
  Dataset base = generate_synthetic_corpus(8, 12, 32, 41);
  Dataset novel = generate_synthetic_corpus(8, 8, 32, 42);

  // nearest-centroid oracle in pixel space must already separate the corpus
  int d = 3 * 32 * 32;
  std::vector<std::vector<double>> centroids(base.n_classes(),
                                             std::vector<double>(d, 0.0));
  for (int c = 0; c < base.n_classes(); ++c)
    for (int idx : base.by_class[c])
      for (int j = 0; j < d; ++j)
        centroids[c][j] += base.samples[idx].image[j] / base.by_class[c].size();
  int oracle_hits = 0;
  for (const auto& s : novel.samples) {
    int best = 0;
    double best_d = 1e300;
    for (int c = 0; c < novel.n_classes(); ++c) {
      double dist = 0;
      for (int j = 0; j < d; ++j)
        dist += (s.image[j] - centroids[c][j]) * (s.image[j] - centroids[c][j]);
      if (dist < best_d) {
        best_d = dist;
        best = c;
      }
    }
    if (best == s.class_id) ++oracle_hits;
  }
  double oracle_acc = double(oracle_hits) / novel.samples.size();
  std::printf("          nearest-centroid oracle accuracy %.3f\n", oracle_acc);
  if (oracle_acc <= 0.85) return false;

  Rng init(13);
  DualEncoder model(micro_pyramid(), micro_conv(), init);
  MetaTrainSettings s;
  s.n_way = 5;
  s.k_shot = 1;
  s.q_queries = 5;
  s.epochs = 10;
  s.episodes_per_epoch = 15;
  Rng rng(14);
  PCAProjector pca;
  meta_train(model, base, s, rng, pca);

  DcpnModel m{std::move(model), pca, s.head};
  Rng eval_rng(15);
  EpisodeSpec spec{5, 1, 5};
  int correct = 0, total = 0;
  for (int e = 0; e < 100; ++e) {
    Episode ep = sample_episode(novel, spec, eval_rng);
    auto results = classify_episode(m, novel, ep);
    for (size_t i = 0; i < results.size(); ++i) {
      if (classify(results[i]) == ep.query_label[i]) ++correct;
      ++total;
    }
  }
  double acc = double(correct) / total;
  std::printf("          meta-test accuracy %.3f in %.0fs\n", acc,
              elapsed_s(t0));
  return acc >= 0.90 && elapsed_s(t0) < 900.0;
}

// --- criterion 11: protocol determinism -------------------------------------

bool protocol_determinism() {
  auto t0 = std::chrono::steady_clock::now();
  Rng init(16);
  DcpnModel model{DualEncoder(micro_pyramid(), micro_conv(), init),
                  PCAProjector{},
                  ablation_config(true, true, false, Metric::euclidean)};
  Dataset ds = generate_synthetic_corpus(6, 20, 32, 17);
  EpisodeSpec spec{5, 1, 15};
  MetricsReport a = evaluate_protocol(model, ds, spec, 1000, 99);
  double first = elapsed_s(t0);
  MetricsReport b = evaluate_protocol(model, ds, spec, 1000, 99);
  std::printf("          1000-episode run %.0fs, mean accuracy %.3f\n", first,
              a.mean_accuracy);
  return a.mean_accuracy == b.mean_accuracy && a.accuracy == b.accuracy &&
         a.precision == b.precision && a.recall == b.recall && a.f1 == b.f1 &&
         a.auc == b.auc && a.ci95 == b.ci95 && first < 600.0;
}

}  // namespace

int main() {
  report(1, "masking keeps one patch per 2x2 cell, uniformly", masking_invariants());
  report(2, "masked reconstruction loss hand cases and quadratic scaling", recon_loss());
  report(3, "pixel shuffle rearrangement and inverse", pixel_shuffle_ok());
  report(4, "soft-vote head matches the naive reference on 200 episodes", head_oracle());
  report(5, "episode loss gradients match finite differences", gradients());
  report(6, "PCA direction, orthonormality, and reconstruction identity", pca_checks());
  report(7, "classification metrics match brute-force oracles", metric_checks());
  report(8, "single-scale scoring degenerates to a prototypical network", degeneracy());
  report(9, "pretraining halves the reconstruction loss on the synthetic corpus", pretrain_regression());
  report(10, "end-to-end 5-way 1-shot reaches 90% on separable classes", end_to_end());
  report(11, "1000-episode evaluation protocol is bit-reproducible", protocol_determinism());
  std::printf("[SKIP] criterion 12: pretraining benefit on real datasets needs "
              "full-scale data and GPU training; not runnable here\n");
  if (failures) {
    std::printf("%d criterion(s) failed\n", failures);
    return 1;
  }
  std::printf("all runnable criteria passed\n");
  return 0;
}
