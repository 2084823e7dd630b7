#pragma once

#include <array>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcpn/common.hpp"
#include "dcpn/nn.hpp"
#include "dcpn/rng.hpp"
#include "dcpn/tensor.hpp"

namespace dcpn {

// ---------------------------------------------------------------------------
// pyramid (global) channel
// ---------------------------------------------------------------------------

struct PyramidEncoderConfig {
  int image_size = 32;
  int patch_size = 4;  // stage-1 patch embed; stage strides are 4,8,16,32
  std::array<int, 4> stage_depths{1, 1, 1, 1};
  std::array<int, 4> stage_dims{16, 32, 64, 128};
  std::array<int, 4> stage_heads{1, 2, 4, 8};
  std::array<int, 4> sr_ratios{2, 1, 1, 1};
  int mlp_ratio = 2;
  int embed_dim = 64;  // common dimension D after the projection head

  int grid() const { return image_size / patch_size; }

  void validate() const {
    if (image_size % 32 != 0)
      throw ConfigError("pyramid: image_size " + std::to_string(image_size) +
                        " not divisible by the total stride 32");
    if (patch_size != 4)
      throw ConfigError("pyramid: stage strides 4,8,16,32 require patch_size "
                        "4");
    for (int s = 0; s < 4; ++s) {
      if (stage_dims[s] % stage_heads[s] != 0)
        throw ConfigError("pyramid: stage_dims[" + std::to_string(s) +
                          "] not divisible by stage_heads");
      if (s > 0 && stage_dims[s] < stage_dims[s - 1])
        throw ConfigError("pyramid: stage_dims must be nondecreasing");
      if (stage_depths[s] < 1 || sr_ratios[s] < 1)
        throw ConfigError("pyramid: depths and sr_ratios must be >= 1");
    }
    if (embed_dim < 2 || embed_dim % 2 != 0)
      throw ConfigError("pyramid: embed_dim must be even and >= 2");
  }
};

// Multi-head self-attention with spatial reduction of keys/values.
struct SRAttention {
  int dim = 0, heads = 1, sr_ratio = 1;
  Linear q, k, v, proj;
  Conv2d sr;       // kernel sr_ratio, stride sr_ratio
  LayerNorm sr_norm;

  SRAttention() = default;
  SRAttention(int dim_, int heads_, int sr, Rng& rng)
      : dim(dim_), heads(heads_), sr_ratio(sr),
        q(dim_, dim_, rng, 0.02),
        k(dim_, dim_, rng, 0.02),
        v(dim_, dim_, rng, 0.02),
        proj(dim_, dim_, rng, 0.02) {
    if (sr_ratio > 1) {
      this->sr = Conv2d(dim_, dim_, sr_ratio, sr_ratio, 0, rng);
      sr_norm = LayerNorm(dim_);
    }
  }

  // x: [B, S, C] with S = h*w
  Tensor forward(const Tensor& x, int h, int w) {
    int B = x.shape()[0], S = x.shape()[1];
    int dh = dim / heads;
    // the reduction is skipped when the map is too small to divide evenly
    int r = (sr_ratio > 1 && h % sr_ratio == 0 && w % sr_ratio == 0)
                ? sr_ratio
                : 1;
    Tensor flat = reshape(x, {B * S, dim});
    Tensor kv_src = flat;
    int Skv = S;
    if (r > 1) {
      Tensor grid = permute(reshape(x, {B, h, w, dim}), {0, 3, 1, 2});
      Tensor red = sr.forward(grid);  // [B, C, h/r, w/r]
      Skv = (h / r) * (w / r);
      kv_src = reshape(permute(red, {0, 2, 3, 1}), {B * Skv, dim});
      kv_src = sr_norm.forward(kv_src);
    }
    auto to_heads = [&](const Tensor& t, int s) {
      // [B*s, C] -> [B*heads, s, dh]
      Tensor y = reshape(t, {B, s, heads, dh});
      return reshape(permute(y, {0, 2, 1, 3}), {B * heads, s, dh});
    };
    Tensor qh = to_heads(q.forward(flat), S);
    Tensor kh = to_heads(k.forward(kv_src), Skv);
    Tensor vh = to_heads(v.forward(kv_src), Skv);
    Tensor attn = scale(bmm(qh, permute(kh, {0, 2, 1})),
                        1.0 / std::sqrt(double(dh)));
    attn = softmax_lastdim(attn);
    Tensor out = bmm(attn, vh);  // [B*heads, S, dh]
    out = reshape(permute(reshape(out, {B, heads, S, dh}), {0, 2, 1, 3}),
                  {B * S, dim});
    return reshape(proj.forward(out), {B, S, dim});
  }

  void state(const std::string& p, StateDict& sd) {
    q.state(p + ".q", sd);
    k.state(p + ".k", sd);
    v.state(p + ".v", sd);
    proj.state(p + ".proj", sd);
    if (sr_ratio > 1) {
      sr.state(p + ".sr", sd);
      sr_norm.state(p + ".sr_norm", sd);
    }
  }
};

struct PvtBlock {
  LayerNorm ln1, ln2;
  SRAttention attn;
  Linear fc1, fc2;

  PvtBlock() = default;
  PvtBlock(int dim, int heads, int sr, int mlp_ratio, Rng& rng)
      : ln1(dim), ln2(dim), attn(dim, heads, sr, rng),
        fc1(dim, dim * mlp_ratio, rng, 0.02),
        fc2(dim * mlp_ratio, dim, rng, 0.02) {}

  Tensor forward(const Tensor& x, int h, int w) {
    int B = x.shape()[0], S = x.shape()[1], C = x.shape()[2];
    Tensor y = add(x, attn.forward(reshape(ln1.forward(reshape(x, {B * S, C})),
                                           {B, S, C}),
                                   h, w));
    Tensor m = ln2.forward(reshape(y, {B * S, C}));
    m = fc2.forward(gelu(fc1.forward(m)));
    return add(y, reshape(m, {B, S, C}));
  }

  void state(const std::string& p, StateDict& sd) {
    ln1.state(p + ".ln1", sd);
    ln2.state(p + ".ln2", sd);
    attn.state(p + ".attn", sd);
    fc1.state(p + ".fc1", sd);
    fc2.state(p + ".fc2", sd);
  }
};

// Four-stage pyramid transformer. Stage 1 embeds patch_size x patch_size
// patches; each later stage halves the spatial grid (skipped once the grid is
// 1x1, which happens on the compact pretraining grid). The same parameters
// serve both the full-grid (classification) and compact-grid (masked
// pretraining) paths.
struct PyramidEncoder {
  PyramidEncoderConfig cfg;
  Linear patch_embed;  // [3*p*p -> C0]
  LayerNorm patch_norm;
  Tensor pos_table;  // [grid*grid, C0]
  std::vector<std::vector<PvtBlock>> stages;
  struct Transition {
    Conv2d conv;  // 2x2 stride 2, or 1x1 when the grid cannot shrink
    LayerNorm norm;
  };
  std::vector<Transition> down2, down1;  // per transition, both variants
  LayerNorm final_norm;
  Linear head;  // C3 -> D

  PyramidEncoder() = default;
  PyramidEncoder(const PyramidEncoderConfig& c, Rng& rng) : cfg(c) {
    cfg.validate();
    int p = cfg.patch_size;
    patch_embed = Linear(3 * p * p, cfg.stage_dims[0], rng, 0.02);
    patch_norm = LayerNorm(cfg.stage_dims[0]);
    pos_table = make_param({cfg.grid() * cfg.grid(), cfg.stage_dims[0]}, rng,
                           0.02);
    for (int s = 0; s < 4; ++s) {
      stages.emplace_back();
      for (int d = 0; d < cfg.stage_depths[s]; ++d)
        stages[s].emplace_back(cfg.stage_dims[s], cfg.stage_heads[s],
                               cfg.sr_ratios[s], cfg.mlp_ratio, rng);
      if (s > 0) {
        down2.push_back({Conv2d(cfg.stage_dims[s - 1], cfg.stage_dims[s], 2, 2,
                                0, rng),
                         LayerNorm(cfg.stage_dims[s])});
        down1.push_back({Conv2d(cfg.stage_dims[s - 1], cfg.stage_dims[s], 1, 1,
                                0, rng),
                         LayerNorm(cfg.stage_dims[s])});
      }
    }
    final_norm = LayerNorm(cfg.stage_dims[3]);
    head = Linear(cfg.stage_dims[3], cfg.embed_dim, rng, 0.02);
  }

  // images [B,3,H,W] -> patch tokens [B*g*g, C0], row-major over the patch
  // grid, positional embedding not yet added
  Tensor embed_patches(const Tensor& images) const {
    int p = cfg.patch_size;
    if (images.shape()[2] % p != 0 || images.shape()[3] % p != 0)
      throw std::invalid_argument("pyramid: input not divisible by patch size");
    Tensor cols = im2col(images, p, p, p, 0);  // [B*g*g, 3*p*p]
    return patch_norm.forward(patch_embed.forward(cols));
  }

  // tokens [B*h*w, C0] already carrying positional information
  // returns final stage map [B, C3, hf, wf]
  Tensor run_stages(const Tensor& tokens, int B, int h, int w) {
    Tensor x = reshape(tokens, {B, h * w, cfg.stage_dims[0]});
    for (int s = 0; s < 4; ++s) {
      if (s > 0) {
        Tensor grid = permute(reshape(x, {B, h, w, cfg.stage_dims[s - 1]}),
                              {0, 3, 1, 2});
        bool shrink = h >= 2 && w >= 2;
        if (shrink && (h % 2 != 0 || w % 2 != 0))
          throw std::invalid_argument("pyramid: odd grid at stage " +
                                      std::to_string(s + 1));
        Transition& t = shrink ? down2[s - 1] : down1[s - 1];
        Tensor red = t.conv.forward(grid);
        if (shrink) {
          h /= 2;
          w /= 2;
        }
        x = reshape(permute(red, {0, 2, 3, 1}), {B, h * w, cfg.stage_dims[s]});
        x = reshape(t.norm.forward(reshape(x, {B * h * w, cfg.stage_dims[s]})),
                    {B, h * w, cfg.stage_dims[s]});
      }
      for (auto& blk : stages[s]) x = blk.forward(x, h, w);
    }
    Tensor y = final_norm.forward(reshape(x, {B * h * w, cfg.stage_dims[3]}));
    return permute(reshape(y, {B, h, w, cfg.stage_dims[3]}), {0, 3, 1, 2});
  }

  // full-grid forward to the common dimension D: Z_G
  Tensor forward(const Tensor& images) {
    int B = images.shape()[0];
    int g = images.shape()[2] / cfg.patch_size;
    if (g != cfg.grid())
      throw std::invalid_argument("pyramid: configured for grid " +
                                  std::to_string(cfg.grid()) + ", got " +
                                  std::to_string(g));
    Tensor tokens = embed_patches(images);
    std::vector<int> pos_idx(std::size_t(B) * g * g);
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < g * g; ++i) pos_idx[std::size_t(b) * g * g + i] = i;
    tokens = add(tokens, gather_rows(pos_table, pos_idx));
    Tensor map = run_stages(tokens, B, g, g);
    return head.forward(global_avg_pool(map));
  }

  void state(const std::string& p, StateDict& sd) {
    patch_embed.state(p + ".patch_embed", sd);
    patch_norm.state(p + ".patch_norm", sd);
    sd.add_param(p + ".pos_table", pos_table);
    for (int s = 0; s < 4; ++s)
      for (size_t d = 0; d < stages[s].size(); ++d)
        stages[s][d].state(p + ".stage" + std::to_string(s + 1) + ".block" +
                               std::to_string(d),
                           sd);
    for (size_t i = 0; i < down2.size(); ++i) {
      down2[i].conv.state(p + ".down" + std::to_string(i + 2) + ".conv", sd);
      down2[i].norm.state(p + ".down" + std::to_string(i + 2) + ".norm", sd);
      down1[i].conv.state(p + ".keep" + std::to_string(i + 2) + ".conv", sd);
      down1[i].norm.state(p + ".keep" + std::to_string(i + 2) + ".norm", sd);
    }
    final_norm.state(p + ".final_norm", sd);
    head.state(p + ".head", sd);
  }
};

// ---------------------------------------------------------------------------
// convolutional (local) channel
// ---------------------------------------------------------------------------

struct ConvEncoderConfig {
  int image_size = 32;
  std::vector<int> widths{16, 32, 64};
  int blocks_per_stage = 1;
  int embed_dim = 64;

  void validate() const {
    if (widths.empty()) throw ConfigError("conv: widths must be non-empty");
    int stride = 1 << static_cast<int>(widths.size());
    if (image_size / stride < 1)
      throw ConfigError("conv: output spatial size below 1x1 for image_size " +
                        std::to_string(image_size));
  }
};

struct ResBlock {
  Conv2d c1, c2;
  BatchNorm2d b1, b2;

  ResBlock() = default;
  ResBlock(int ch, Rng& rng)
      : c1(ch, ch, 3, 1, 1, rng), c2(ch, ch, 3, 1, 1, rng), b1(ch), b2(ch) {}

  Tensor forward(const Tensor& x, bool training) {
    Tensor y = relu(b1.forward(c1.forward(x), training));
    y = b2.forward(c2.forward(y), training);
    return relu(add(x, y));
  }

  void state(const std::string& p, StateDict& sd) {
    c1.state(p + ".c1", sd);
    c2.state(p + ".c2", sd);
    b1.state(p + ".b1", sd);
    b2.state(p + ".b2", sd);
  }
};

// Residual CNN: stem, then one stride-2 transition plus residual blocks per
// stage, global average pool, projection head to D: Z_L
struct ConvEncoder {
  ConvEncoderConfig cfg;
  Conv2d stem;
  BatchNorm2d stem_bn;
  std::vector<Conv2d> trans;
  std::vector<BatchNorm2d> trans_bn;
  std::vector<std::vector<ResBlock>> blocks;
  Linear head;

  ConvEncoder() = default;
  ConvEncoder(const ConvEncoderConfig& c, Rng& rng) : cfg(c) {
    cfg.validate();
    stem = Conv2d(3, cfg.widths[0], 3, 1, 1, rng);
    stem_bn = BatchNorm2d(cfg.widths[0]);
    int prev = cfg.widths[0];
    for (size_t s = 0; s < cfg.widths.size(); ++s) {
      trans.emplace_back(prev, cfg.widths[s], 3, 2, 1, rng);
      trans_bn.emplace_back(cfg.widths[s]);
      blocks.emplace_back();
      for (int b = 0; b < cfg.blocks_per_stage; ++b)
        blocks.back().emplace_back(cfg.widths[s], rng);
      prev = cfg.widths[s];
    }
    head = Linear(prev, cfg.embed_dim, rng);
  }

  Tensor forward(const Tensor& images, bool training) {
    Tensor x = relu(stem_bn.forward(stem.forward(images), training));
    for (size_t s = 0; s < trans.size(); ++s) {
      x = relu(trans_bn[s].forward(trans[s].forward(x), training));
      for (auto& blk : blocks[s]) x = blk.forward(x, training);
    }
    return head.forward(global_avg_pool(x));
  }

  void state(const std::string& p, StateDict& sd) {
    stem.state(p + ".stem", sd);
    stem_bn.state(p + ".stem_bn", sd);
    for (size_t s = 0; s < trans.size(); ++s) {
      trans[s].state(p + ".trans" + std::to_string(s), sd);
      trans_bn[s].state(p + ".trans_bn" + std::to_string(s), sd);
      for (size_t b = 0; b < blocks[s].size(); ++b)
        blocks[s][b].state(p + ".stage" + std::to_string(s) + ".block" +
                               std::to_string(b),
                           sd);
    }
    head.state(p + ".head", sd);
  }
};

// ---------------------------------------------------------------------------
// dual-channel wrapper
// ---------------------------------------------------------------------------

struct DualEncoder {
  PyramidEncoder global_ch;
  ConvEncoder local_ch;

  DualEncoder() = default;
  DualEncoder(const PyramidEncoderConfig& pc, const ConvEncoderConfig& cc,
              Rng& rng)
      : global_ch(pc, rng), local_ch(cc, rng) {
    if (pc.embed_dim != cc.embed_dim)
      throw ConfigError("dual encoder: channels disagree on embed_dim");
  }

  int embed_dim() const { return global_ch.cfg.embed_dim; }

  // both channels on the same batch, independently: (Z_G, Z_L), each [B, D]
  std::pair<Tensor, Tensor> forward(const Tensor& images, bool training) {
    return {global_ch.forward(images), local_ch.forward(images, training)};
  }

  void state(StateDict& sd) {
    global_ch.state("global", sd);
    local_ch.state("local", sd);
  }
};

}  // namespace dcpn
