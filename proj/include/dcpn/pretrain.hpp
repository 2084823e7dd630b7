#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcpn/common.hpp"
#include "dcpn/data.hpp"
#include "dcpn/encoders.hpp"
#include "dcpn/nn.hpp"
#include "dcpn/rng.hpp"
#include "dcpn/tensor.hpp"

namespace dcpn {

// ---------------------------------------------------------------------------
// masking
// ---------------------------------------------------------------------------

// Uniform-sampling mask state: exactly one kept patch per disjoint 2x2 cell,
// in cell row-major order, plus the secondarily masked subset of the kept
// patches.
struct MaskPlan {
  int grid_h = 0, grid_w = 0;
  std::vector<int> kept;       // patch indices, one per cell, cell row-major
  std::vector<int> sm_masked;  // subset of kept

  bool is_kept_position(int patch_idx) const {
    return std::find(kept.begin(), kept.end(), patch_idx) != kept.end();
  }
};

inline MaskPlan uniform_sample_mask(int grid_h, int grid_w, Rng& rng) {
  if (grid_h % 2 != 0 || grid_w % 2 != 0 || grid_h < 2 || grid_w < 2)
    throw std::invalid_argument("uniform_sample_mask: grid " +
                                std::to_string(grid_h) + "x" +
                                std::to_string(grid_w) + " must be even");
  MaskPlan plan;
  plan.grid_h = grid_h;
  plan.grid_w = grid_w;
  plan.kept.reserve(std::size_t(grid_h) * grid_w / 4);
  for (int ci = 0; ci < grid_h / 2; ++ci)
    for (int cj = 0; cj < grid_w / 2; ++cj) {
      int di = rng.uniform_int(2);
      int dj = rng.uniform_int(2);
      plan.kept.push_back((2 * ci + di) * grid_w + (2 * cj + dj));
    }
  return plan;
}

inline MaskPlan secondary_mask(const MaskPlan& plan, double ratio, Rng& rng) {
  if (!plan.sm_masked.empty())
    throw std::invalid_argument("secondary_mask: plan already masked");
  if (ratio < 0.0 || ratio >= 1.0)
    throw std::invalid_argument("secondary_mask: ratio must be in [0, 1)");
  MaskPlan out = plan;
  int n = static_cast<int>(std::floor(ratio * double(plan.kept.size())));
  std::vector<int> pick =
      rng.sample_without_replacement(static_cast<int>(plan.kept.size()), n);
  out.sm_masked.reserve(n);
  for (int i : pick) out.sm_masked.push_back(plan.kept[i]);
  std::sort(out.sm_masked.begin(), out.sm_masked.end());
  return out;
}

// ---------------------------------------------------------------------------
// reconstruction loss (Mean Squared Error over missing pixels)
// ---------------------------------------------------------------------------

struct ReconTarget {
  std::vector<double> target_pixels;
  std::vector<double> predicted_pixels;
};

inline double mae_loss(const ReconTarget& t) {
  if (t.target_pixels.size() != t.predicted_pixels.size())
    throw std::invalid_argument("mae_loss: shape mismatch");
  if (t.target_pixels.empty())
    throw std::invalid_argument("mae_loss: no missing pixels, no training "
                                "signal");
  double s = 0.0;
  for (size_t i = 0; i < t.target_pixels.size(); ++i) {
    double e = t.predicted_pixels[i] - t.target_pixels[i];
    s += e * e;
  }
  return s / double(t.target_pixels.size());
}

enum class LossScope { missing, dropped_only };

// ---------------------------------------------------------------------------
// decoder
// ---------------------------------------------------------------------------

struct DecoderConfig {
  int depth = 1;
  int dim = 64;
  int heads = 4;
  int upsample_factor = 4;  // restores the latent grid to the compact grid

  void validate() const {
    if (depth < 0 || dim < 1 || heads < 1 || dim % heads != 0)
      throw ConfigError("decoder: invalid depth/dim/heads");
    if (upsample_factor < 1)
      throw ConfigError("decoder: upsample_factor must be >= 1");
  }
};

// UM-MAE trainer: patch embedding and pyramid stages run on the compact
// quarter-resolution grid of kept patches; a PixelShuffle restores the latent
// to the compact grid; the decoder sees the full patch grid with mask tokens
// at every patch the encoder did not output.
struct Pretrainer {
  PyramidEncoder encoder;
  DecoderConfig dec_cfg;
  double sm_ratio = 0.25;
  LossScope loss_scope = LossScope::missing;

  Tensor enc_mask_token;  // [C0], fed to the encoder at SM positions
  Linear expand;          // [C3 -> r^2 * dec dim]
  Tensor dec_mask_token;  // [dec dim]
  Tensor dec_pos_table;   // [g*g, dec dim]
  std::vector<PvtBlock> dec_blocks;
  LayerNorm dec_norm;
  Linear pixel_head;      // [dec dim -> 3*p*p]

  Pretrainer(const PyramidEncoderConfig& enc_cfg, const DecoderConfig& dc,
             Rng& rng)
      : encoder(enc_cfg, rng), dec_cfg(dc) {
    dec_cfg.validate();
    int g = encoder.cfg.grid();
    if (g % 2 != 0)
      throw ConfigError("pretrain: patch grid " + std::to_string(g) +
                        " must be even for 2x2 uniform sampling");
    enc_mask_token = make_param({encoder.cfg.stage_dims[0]}, rng, 0.02);
    expand = Linear(encoder.cfg.stage_dims[3],
                    dec_cfg.upsample_factor * dec_cfg.upsample_factor *
                        dec_cfg.dim,
                    rng, 0.02);
    dec_mask_token = make_param({dec_cfg.dim}, rng, 0.02);
    dec_pos_table = make_param({g * g, dec_cfg.dim}, rng, 0.02);
    for (int i = 0; i < dec_cfg.depth; ++i)
      dec_blocks.emplace_back(dec_cfg.dim, dec_cfg.heads, 1, 2, rng);
    dec_norm = LayerNorm(dec_cfg.dim);
    pixel_head = Linear(dec_cfg.dim, 3 * encoder.cfg.patch_size *
                                         encoder.cfg.patch_size,
                        rng, 0.02);
  }

  // kept patch embeddings arranged on the compact half-resolution grid, with
  // the shared mask token substituted at secondarily masked positions and
  // positional information taken from each patch's original location
  Tensor assemble_encoder_input(const Tensor& patch_tokens, int batch,
                                const std::vector<MaskPlan>& plans) const {
    int g = encoder.cfg.grid();
    int kept_per_img = g * g / 4;
    if (patch_tokens.shape()[0] != batch * g * g)
      throw std::invalid_argument("assemble: token count mismatch");
    std::vector<int> kept_idx, pos_idx;
    std::vector<double> sm_flag;
    kept_idx.reserve(std::size_t(batch) * kept_per_img);
    for (int b = 0; b < batch; ++b) {
      const MaskPlan& plan = plans[b];
      if (plan.grid_h != g || plan.grid_w != g ||
          static_cast<int>(plan.kept.size()) != kept_per_img)
        throw std::invalid_argument("assemble: plan/grid mismatch");
      for (int patch : plan.kept) {
        kept_idx.push_back(b * g * g + patch);
        pos_idx.push_back(patch);
        bool sm = std::binary_search(plan.sm_masked.begin(),
                                     plan.sm_masked.end(), patch);
        sm_flag.push_back(sm ? 1.0 : 0.0);
      }
    }
    Tensor kept = gather_rows(patch_tokens, kept_idx);
    int rows = static_cast<int>(kept_idx.size());
    int c0 = encoder.cfg.stage_dims[0];
    // blend in the mask token row-wise: x*(1-m) + token*m
    std::vector<double> keep_w(std::size_t(rows) * c0),
        mask_w(std::size_t(rows) * c0);
    for (int r = 0; r < rows; ++r)
      for (int j = 0; j < c0; ++j) {
        keep_w[std::size_t(r) * c0 + j] = 1.0 - sm_flag[r];
        mask_w[std::size_t(r) * c0 + j] = sm_flag[r];
      }
    Tensor ones = Tensor::from_data({rows, 1}, std::vector<double>(rows, 1.0));
    Tensor token_rows = matmul(ones, reshape(enc_mask_token, {1, c0}));
    Tensor mixed = add(mul(kept, Tensor::from_data({rows, c0}, keep_w)),
                       mul(token_rows, Tensor::from_data({rows, c0}, mask_w)));
    return add(mixed, gather_rows(encoder.pos_table, pos_idx));
  }

  // full forward on one batch; returns the scalar loss tensor and, when
  // `predictions` is non-null, the per-patch pixel predictions [B*g*g, 3*p*p]
  Tensor forward(const Tensor& images, const std::vector<MaskPlan>& plans,
                 Tensor* predictions = nullptr) {
    int B = images.shape()[0];
    int p = encoder.cfg.patch_size;
    int g = encoder.cfg.grid();
    int gc = g / 2;
    Tensor patch_tokens = encoder.embed_patches(images);
    Tensor compact = assemble_encoder_input(patch_tokens, B, plans);
    Tensor latent = encoder.run_stages(compact, B, gc, gc);  // [B,C3,hf,wf]
    int hf = latent.shape()[2], wf = latent.shape()[3];
    int r = dec_cfg.upsample_factor;
    if (hf * r != gc)
      throw ConfigError("pretrain: upsample_factor " + std::to_string(r) +
                        " does not restore latent grid " + std::to_string(hf) +
                        " to compact grid " + std::to_string(gc));
    int c3 = encoder.cfg.stage_dims[3];
    Tensor ex = expand.forward(
        reshape(permute(latent, {0, 2, 3, 1}), {B * hf * wf, c3}));
    Tensor up = pixel_shuffle(
        permute(reshape(ex, {B, hf, wf, r * r * dec_cfg.dim}), {0, 3, 1, 2}),
        r);  // [B, dec, gc, gc]
    Tensor compact_dec =
        reshape(permute(up, {0, 2, 3, 1}), {B * gc * gc, dec_cfg.dim});

    // scatter to the full grid, mask token everywhere the encoder was blind
    Tensor src = concat_rows(compact_dec, reshape(dec_mask_token,
                                                  {1, dec_cfg.dim}));
    int mask_row = B * gc * gc;
    std::vector<int> full_idx(std::size_t(B) * g * g, mask_row);
    std::vector<int> pos_idx(std::size_t(B) * g * g);
    std::vector<double> missing_flag(std::size_t(B) * g * g, 1.0);
    for (int b = 0; b < B; ++b) {
      const MaskPlan& plan = plans[b];
      for (int i = 0; i < gc * gc; ++i) {
        int patch = plan.kept[i];
        full_idx[std::size_t(b) * g * g + patch] = b * gc * gc + i;
        bool sm = std::binary_search(plan.sm_masked.begin(),
                                     plan.sm_masked.end(), patch);
        if (!sm) missing_flag[std::size_t(b) * g * g + patch] = 0.0;
        if (sm && loss_scope == LossScope::dropped_only)
          missing_flag[std::size_t(b) * g * g + patch] = 0.0;
      }
      for (int i = 0; i < g * g; ++i) pos_idx[std::size_t(b) * g * g + i] = i;
    }
    Tensor full = add(gather_rows(src, full_idx),
                      gather_rows(dec_pos_table, pos_idx));
    Tensor x = reshape(full, {B, g * g, dec_cfg.dim});
    for (auto& blk : dec_blocks) x = blk.forward(x, g, g);
    Tensor pred = pixel_head.forward(
        dec_norm.forward(reshape(x, {B * g * g, dec_cfg.dim})));
    if (predictions) *predictions = pred;

    Tensor target = im2col(images, p, p, p, 0);  // constant, [B*g*g, 3*p*p]
    int cols = 3 * p * p;
    std::int64_t n_missing = 0;
    std::vector<double> mask(std::size_t(B) * g * g * cols, 0.0);
    for (std::size_t row = 0; row < missing_flag.size(); ++row)
      if (missing_flag[row] > 0.0) {
        ++n_missing;
        std::fill_n(mask.begin() + row * cols, cols, 1.0);
      }
    if (n_missing == 0)
      throw std::runtime_error("pretrain: no missing patches, no training "
                               "signal");
    Tensor diff = sub(pred, target);
    Tensor masked = mul(mul(diff, diff),
                        Tensor::from_data({B * g * g, cols}, std::move(mask)));
    return scale(sum_all(masked), 1.0 / double(n_missing * cols));
  }

  std::vector<MaskPlan> sample_plans(int batch, Rng& rng) const {
    int g = encoder.cfg.grid();
    std::vector<MaskPlan> plans;
    plans.reserve(batch);
    for (int b = 0; b < batch; ++b)
      plans.push_back(secondary_mask(uniform_sample_mask(g, g, rng), sm_ratio,
                                     rng));
    return plans;
  }

  void state(StateDict& sd) {
    encoder.state("global", sd);
    sd.add_param("pretrain.enc_mask_token", enc_mask_token);
    expand.state("pretrain.expand", sd);
    sd.add_param("pretrain.dec_mask_token", dec_mask_token);
    sd.add_param("pretrain.dec_pos_table", dec_pos_table);
    for (size_t i = 0; i < dec_blocks.size(); ++i)
      dec_blocks[i].state("pretrain.block" + std::to_string(i), sd);
    dec_norm.state("pretrain.dec_norm", sd);
    pixel_head.state("pretrain.pixel_head", sd);
  }
};

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct PretrainSettings {
  int batch_size = 16;
  int steps = 200;          // total optimization steps
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.95;  // AdamW defaults for masked pretraining
  double weight_decay = 0.05;
  double sm_ratio = 0.25;
  LossScope loss_scope = LossScope::missing;
};

struct PretrainLog {
  std::vector<double> losses;  // one row per step
};

// Runs masked pretraining; per-step losses go to `log` and optionally through
// `on_step(step, loss, lr)`. Aborts on non-finite loss, leaving the model at
// its last finite state.
inline PretrainLog pretrain_loop(
    Pretrainer& trainer, const Dataset& dataset, const PretrainSettings& s,
    Rng& rng,
    const std::function<void(int, double, double)>& on_step = nullptr) {
  if (dataset.samples.empty())
    throw std::runtime_error("pretrain: empty dataset");
  trainer.sm_ratio = s.sm_ratio;
  trainer.loss_scope = s.loss_scope;
  StateDict sd;
  trainer.state(sd);
  AdamW opt(sd.params, s.lr, s.beta1, s.beta2, s.weight_decay);

  PretrainLog log;
  int n = static_cast<int>(dataset.samples.size());
  std::vector<int> order;
  std::vector<double> snapshot;
  for (int step = 0; step < s.steps; ++step) {
    std::vector<int> batch;
    for (int i = 0; i < s.batch_size; ++i) {
      if (order.empty()) {
        order.resize(n);
        for (int j = 0; j < n; ++j) order[j] = j;
        rng.shuffle(order);
      }
      batch.push_back(order.back());
      order.pop_back();
    }
    Tensor images = images_to_tensor(dataset, batch);
    auto plans = trainer.sample_plans(s.batch_size, rng);

    // snapshot for divergence rollback
    snapshot.clear();
    for (auto& [name, t] : sd.params)
      snapshot.insert(snapshot.end(), t.data().begin(), t.data().end());

    opt.zero_grad();
    Tensor loss = trainer.forward(images, plans);
    double lv = loss.item();
    if (!std::isfinite(lv)) {
      size_t pos = 0;
      for (auto& [name, t] : sd.params) {
        std::copy_n(snapshot.begin() + pos, t.size(), t.data().begin());
        pos += t.size();
      }
      throw std::runtime_error("pretrain: loss diverged at step " +
                               std::to_string(step) +
                               "; parameters rolled back to last finite step");
    }
    loss.backward();
    opt.step();
    log.losses.push_back(lv);
    if (on_step) on_step(step, lv, s.lr);
  }
  return log;
}

}  // namespace dcpn
