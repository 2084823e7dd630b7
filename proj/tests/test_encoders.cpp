#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "dcpn/encoders.hpp"
#include "gradcheck.hpp"

using namespace dcpn;
using dcpn::testing::gradcheck;

namespace {

Tensor random_images(int b, int s, Rng& rng) {
  Tensor t = Tensor::zeros({b, 3, s, s});
  for (auto& v : t.data()) v = rng.uniform(0.0, 1.0);
  return t;
}

// one tiny block per stage so finite differences stay cheap
PyramidEncoderConfig micro_pyramid() {
  PyramidEncoderConfig c;
  c.image_size = 32;
  c.stage_dims = {4, 4, 8, 8};
  c.stage_heads = {1, 1, 2, 2};
  c.sr_ratios = {2, 1, 1, 1};
  c.mlp_ratio = 2;
  c.embed_dim = 8;
  return c;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    d += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return d / std::sqrt(na * nb);
}

}  // namespace

TEST_CASE("pyramid forward shape and determinism") {
  Rng rng(1);
  PyramidEncoderConfig cfg;
  cfg.image_size = 32;
  cfg.embed_dim = 64;
  PyramidEncoder enc(cfg, rng);
  Rng data_rng(2);
  Tensor imgs = random_images(2, 32, data_rng);
  // duplicate image 0 into slot 1
  std::copy_n(imgs.data().begin(), 3 * 32 * 32,
              imgs.data().begin() + 3 * 32 * 32);
  Tensor out = enc.forward(imgs);
  REQUIRE(out.shape() == Shape{2, 64});
  for (int j = 0; j < 64; ++j)
    CHECK(out.data()[j] == Catch::Approx(out.data()[64 + j]).epsilon(1e-12));
}

TEST_CASE("pyramid final stage spatial size follows total stride 32") {
  // 224/32 = 7 without building a 224-sized model: check the arithmetic the
  // run_stages path uses, then verify a 64-input model ends at 2x2
  CHECK(224 / 32 == 7);
  Rng rng(3);
  PyramidEncoderConfig cfg = micro_pyramid();
  cfg.image_size = 64;
  PyramidEncoder enc(cfg, rng);
  Rng data_rng(4);
  Tensor imgs = random_images(1, 64, data_rng);
  Tensor tokens = enc.embed_patches(imgs);
  std::vector<int> pos(16 * 16);
  for (int i = 0; i < 256; ++i) pos[i] = i;
  Tensor map = enc.run_stages(add(tokens, gather_rows(enc.pos_table, pos)), 1,
                              16, 16);
  CHECK(map.shape() == Shape{1, 8, 2, 2});
}

TEST_CASE("pyramid config validation") {
  PyramidEncoderConfig cfg;
  cfg.image_size = 48;
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg.image_size = 32;
  cfg.stage_heads = {3, 2, 4, 8};
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
  cfg = PyramidEncoderConfig{};
  cfg.stage_dims = {32, 16, 64, 128};
  REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("conv forward shape, determinism, degenerate input") {
  Rng rng(5);
  ConvEncoderConfig cfg;
  cfg.image_size = 32;
  cfg.embed_dim = 64;
  ConvEncoder enc(cfg, rng);
  Rng data_rng(6);
  Tensor imgs = random_images(2, 32, data_rng);
  Tensor out = enc.forward(imgs, false);
  REQUIRE(out.shape() == Shape{2, 64});

  Tensor zeros = Tensor::zeros({1, 3, 32, 32});
  Tensor z = enc.forward(zeros, false);
  for (double v : z.data()) CHECK(std::isfinite(v));
}

TEST_CASE("conv features move boundedly under one-pixel translation") {
  Rng rng(7);
  ConvEncoderConfig cfg;
  cfg.image_size = 32;
  ConvEncoder enc(cfg, rng);
  Rng data_rng(8);
  Tensor a = random_images(1, 32, data_rng);
  Tensor b = Tensor::zeros({1, 3, 32, 32});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        b.data()[(c * 32 + y) * 32 + x] =
            a.data()[(c * 32 + y) * 32 + (x + 1) % 32];
  Tensor fa = enc.forward(a, false), fb = enc.forward(b, false);
  double shift = 0.0, norm = 0.0;
  for (int i = 0; i < 64; ++i) {
    shift += (fa.data()[i] - fb.data()[i]) * (fa.data()[i] - fb.data()[i]);
    norm += fa.data()[i] * fa.data()[i];
  }
  // pinned regression bound: pooled features drift by far less than their norm
  CHECK(std::sqrt(shift) < 0.5 * std::sqrt(norm));
}

TEST_CASE("projection head identity and linearity") {
  Rng rng(9);
  Linear head(4, 4, rng);
  // identity-initialized head
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      head.weight.data()[i * 4 + j] = (i == j) ? 1.0 : 0.0;
  Tensor x = Tensor::from_data({1, 4}, {1.0, -2.0, 3.0, 0.5});
  CHECK(head.forward(x).data() == x.data());

  // zero input -> bias
  for (auto& v : head.bias.data()) v = 0.25;
  Tensor z = head.forward(Tensor::zeros({1, 4}));
  for (double v : z.data()) CHECK(v == Catch::Approx(0.25));

  // f(a+b) = f(a)+f(b)-bias
  Rng drng(10);
  Linear f(3, 5, drng);
  for (auto& v : f.bias.data()) v = drng.uniform(-1.0, 1.0);
  Tensor a = Tensor::from_data({1, 3}, {0.3, -1.2, 0.8});
  Tensor b = Tensor::from_data({1, 3}, {2.0, 0.1, -0.4});
  Tensor ab = f.forward(add(a, b));
  Tensor fa = f.forward(a), fb = f.forward(b);
  for (int j = 0; j < 5; ++j)
    CHECK(ab.data()[j] ==
          Catch::Approx(fa.data()[j] + fb.data()[j] - f.bias.data()[j])
              .margin(1e-12));
}

TEST_CASE("dual encode returns distinct channels and is batch-equivariant") {
  Rng rng(11);
  PyramidEncoderConfig pc = micro_pyramid();
  ConvEncoderConfig cc;
  cc.image_size = 32;
  cc.widths = {4, 8, 8};
  cc.embed_dim = 8;
  DualEncoder dual(pc, cc, rng);
  Rng data_rng(12);
  Tensor imgs = random_images(2, 32, data_rng);
  auto [zg, zl] = dual.forward(imgs, false);
  REQUIRE(zg.shape() == Shape{2, 8});
  REQUIRE(zl.shape() == Shape{2, 8});
  std::vector<double> g0(zg.data().begin(), zg.data().begin() + 8);
  std::vector<double> l0(zl.data().begin(), zl.data().begin() + 8);
  CHECK(cosine(g0, l0) < 0.999);

  // swap batch order
  Tensor swapped = Tensor::zeros({2, 3, 32, 32});
  std::copy_n(imgs.data().begin() + 3 * 32 * 32, 3 * 32 * 32,
              swapped.data().begin());
  std::copy_n(imgs.data().begin(), 3 * 32 * 32,
              swapped.data().begin() + 3 * 32 * 32);
  auto [zg2, zl2] = dual.forward(swapped, false);
  for (int j = 0; j < 8; ++j) {
    CHECK(zg2.data()[8 + j] == Catch::Approx(zg.data()[j]).epsilon(1e-12));
    CHECK(zl2.data()[8 + j] == Catch::Approx(zl.data()[j]).epsilon(1e-12));
  }
}

TEST_CASE("encoder parameter gradients match finite differences") {
  Rng rng(13);
  PyramidEncoderConfig pc = micro_pyramid();
  PyramidEncoder enc(pc, rng);
  Rng data_rng(14);
  Tensor imgs = random_images(1, 32, data_rng);
  Tensor w = Tensor::zeros({1, 8});
  for (auto& v : w.data()) v = data_rng.uniform(-1.0, 1.0);
  auto loss = [&] { return sum_all(mul(enc.forward(imgs), w)); };
  CHECK(gradcheck(enc.patch_embed.weight, loss, 1e-5) < 1e-3);
  CHECK(gradcheck(enc.stages[0][0].attn.q.weight, loss, 1e-5) < 1e-3);
  CHECK(gradcheck(enc.stages[2][0].fc1.weight, loss, 1e-5) < 1e-3);
  CHECK(gradcheck(enc.pos_table, loss, 1e-5) < 1e-3);
  CHECK(gradcheck(enc.head.weight, loss, 1e-5) < 1e-3);

  ConvEncoderConfig cc;
  cc.image_size = 32;
  cc.widths = {2, 4, 4};
  cc.embed_dim = 8;
  ConvEncoder cenc(cc, rng);
  auto closs = [&] { return sum_all(mul(cenc.forward(imgs, true), w)); };
  CHECK(gradcheck(cenc.stem.weight, closs, 1e-5) < 1e-3);
  CHECK(gradcheck(cenc.blocks[1][0].c1.weight, closs, 1e-5) < 1e-3);
  CHECK(gradcheck(cenc.head.weight, closs, 1e-5) < 1e-3);
}
