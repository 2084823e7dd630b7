#include <catch2/catch_amalgamated.hpp>

#include "dcpn/nn.hpp"
#include "dcpn/rng.hpp"
#include "dcpn/tensor.hpp"
#include "gradcheck.hpp"

using namespace dcpn;
using dcpn::testing::gradcheck;

namespace {

Tensor random_tensor(const Shape& s, Rng& rng, bool rg = true,
                     double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(s, rg);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("elementwise forward values") {
  Tensor a = Tensor::from_data({3}, {1.0, -2.0, 3.0});
  Tensor b = Tensor::from_data({3}, {0.5, 4.0, -1.0});
  CHECK(add(a, b).data()[1] == Catch::Approx(2.0));
  CHECK(sub(a, b).data()[0] == Catch::Approx(0.5));
  CHECK(mul(a, b).data()[2] == Catch::Approx(-3.0));
  CHECK(div(a, b).data()[1] == Catch::Approx(-0.5));
  CHECK(relu(a).data()[1] == 0.0);
  CHECK(sum_all(a).item() == Catch::Approx(2.0));
  CHECK(mean_all(a).item() == Catch::Approx(2.0 / 3.0));
}

TEST_CASE("matmul matches hand computation") {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_data({2, 2}, {5, 6, 7, 8});
  Tensor c = matmul(a, b);
  CHECK(c.data() == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("gradients of elementwise and reduction ops") {
  Rng rng(7);
  Tensor x = random_tensor({4, 3}, rng);
  Tensor y = random_tensor({4, 3}, rng, false, 0.1, 2.0);

  CHECK(gradcheck(x, [&] { return sum_all(mul(add(x, y), sub(x, y))); }) <
        1e-6);
  CHECK(gradcheck(x, [&] { return sum_all(div(x, y)); }) < 1e-6);
  CHECK(gradcheck(x, [&] { return sum_all(gelu(x)); }) < 1e-6);
  CHECK(gradcheck(x, [&] { return sum_all(exp_t(x)); }) < 1e-6);
  CHECK(gradcheck(x, [&] {
          return sum_all(log_t(clamp_min(add_scalar(mul(x, x), 0.1), 1e-9)));
        }) < 1e-6);
  CHECK(gradcheck(x, [&] {
          return sum_all(sqrt_t(add_scalar(mul(x, x), 0.5)));
        }) < 1e-6);
}

TEST_CASE("gradients of matmul, bmm, bias") {
  Rng rng(11);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  Tensor bias = random_tensor({2}, rng);
  CHECK(gradcheck(a, [&] { return sum_all(matmul(a, b)); }) < 1e-6);
  CHECK(gradcheck(b, [&] { return mean_all(matmul(a, b)); }) < 1e-6);
  CHECK(gradcheck(bias, [&] {
          return sum_all(mul(add_bias(matmul(a, b), bias),
                             add_bias(matmul(a, b), bias)));
        }) < 1e-6);

  Tensor p = random_tensor({2, 3, 4}, rng);
  Tensor q = random_tensor({2, 4, 2}, rng);
  CHECK(gradcheck(p, [&] { return sum_all(mul(bmm(p, q), bmm(p, q))); }) <
        1e-6);
  CHECK(gradcheck(q, [&] { return sum_all(bmm(p, q)); }) < 1e-6);
}

TEST_CASE("gradients of shape ops") {
  Rng rng(13);
  Tensor x = random_tensor({2, 3, 4}, rng);
  CHECK(gradcheck(x, [&] {
          Tensor y = permute(x, {2, 0, 1});
          return sum_all(mul(y, y));
        }) < 1e-6);
  CHECK(gradcheck(x, [&] {
          Tensor y = reshape(x, {6, 4});
          return sum_all(mul(gather_rows(y, {0, 2, 2, 5}),
                             gather_rows(y, {1, 2, 2, 0})));
        }) < 1e-6);
  Tensor a = random_tensor({2, 3}, rng);
  Tensor b = random_tensor({2, 5}, rng);
  CHECK(gradcheck(a, [&] {
          Tensor y = concat_lastdim(a, b);
          return sum_all(mul(y, y));
        }) < 1e-6);
  CHECK(gradcheck(b, [&] {
          Tensor y = concat_rows(reshape(a, {3, 2}), reshape(b, {5, 2}));
          return sum_all(mul(y, y));
        }) < 1e-6);
}

TEST_CASE("softmax rows sum to one and gradcheck") {
  Rng rng(17);
  Tensor x = random_tensor({3, 5}, rng, true, -3.0, 3.0);
  Tensor y = softmax_lastdim(x);
  for (int r = 0; r < 3; ++r) {
    double s = 0.0;
    for (int j = 0; j < 5; ++j) s += y.data()[r * 5 + j];
    CHECK(s == Catch::Approx(1.0).epsilon(1e-12));
  }
  Tensor w = random_tensor({3, 5}, rng, false);
  CHECK(gradcheck(x, [&] {
          return sum_all(mul(softmax_lastdim(x), w));
        }) < 1e-6);
}

TEST_CASE("layer norm output statistics and gradcheck") {
  Rng rng(19);
  Tensor x = random_tensor({4, 8}, rng, true, -2.0, 2.0);
  LayerNorm ln(8);
  Tensor y = ln.forward(x);
  for (int r = 0; r < 4; ++r) {
    double mu = 0.0;
    for (int j = 0; j < 8; ++j) mu += y.data()[r * 8 + j];
    CHECK(mu / 8.0 == Catch::Approx(0.0).margin(1e-10));
  }
  Tensor w = random_tensor({4, 8}, rng, false);
  CHECK(gradcheck(x, [&] { return sum_all(mul(ln.forward(x), w)); }) < 1e-5);
  CHECK(gradcheck(ln.gamma, [&] { return sum_all(mul(ln.forward(x), w)); }) <
        1e-6);
}

TEST_CASE("im2col/conv gradcheck") {
  Rng rng(23);
  Tensor x = random_tensor({2, 3, 5, 5}, rng);
  Conv2d conv(3, 4, 3, 1, 1, rng);
  Tensor w = random_tensor({2, 4, 5, 5}, rng, false);
  CHECK(gradcheck(x, [&] { return sum_all(mul(conv.forward(x), w)); }) < 1e-5);
  CHECK(gradcheck(conv.weight,
                  [&] { return sum_all(mul(conv.forward(x), w)); }) < 1e-5);
  // strided, no pad
  Conv2d down(3, 2, 2, 2, 0, rng);
  CHECK(gradcheck(x, [&] {
          Tensor y = down.forward(x);
          return sum_all(mul(y, y));
        }) < 1e-5);
}

TEST_CASE("batch norm training mode gradcheck and running stats") {
  Rng rng(29);
  Tensor x = random_tensor({3, 2, 4, 4}, rng);
  BatchNorm2d bn(2);
  Tensor w = random_tensor({3, 2, 4, 4}, rng, false);
  CHECK(gradcheck(x, [&] { return sum_all(mul(bn.forward(x, true), w)); }) <
        1e-5);
  CHECK(gradcheck(bn.gamma,
                  [&] { return sum_all(mul(bn.forward(x, true), w)); }) < 1e-6);
  // inference path is affine in x
  CHECK(gradcheck(x, [&] { return sum_all(mul(bn.forward(x, false), w)); }) <
        1e-6);
  CHECK(bn.running_mean[0] != 0.0);
}

TEST_CASE("pixel shuffle r=2 enumerated and inverse identity") {
  Tensor x = Tensor::from_data({1, 4, 1, 1}, {1, 2, 3, 4});
  Tensor y = pixel_shuffle(x, 2);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  CHECK(y.data() == std::vector<double>{1, 2, 3, 4});

  CHECK(pixel_shuffle(x, 1).data() == x.data());

  Rng rng(31);
  Tensor z = random_tensor({2, 8, 3, 3}, rng);
  Tensor round = pixel_unshuffle(pixel_shuffle(z, 2), 2);
  CHECK(round.data() == z.data());
  CHECK(gradcheck(z, [&] {
          Tensor s = pixel_shuffle(z, 2);
          return sum_all(mul(s, s));
        }) < 1e-6);
}

TEST_CASE("global average pool") {
  Rng rng(37);
  Tensor x = random_tensor({2, 3, 4, 4}, rng);
  Tensor y = global_avg_pool(x);
  CHECK(y.shape() == Shape{2, 3});
  double s = 0.0;
  for (int i = 0; i < 16; ++i) s += x.data()[i];
  CHECK(y.data()[0] == Catch::Approx(s / 16.0));
  CHECK(gradcheck(x, [&] {
          Tensor p = global_avg_pool(x);
          return sum_all(mul(p, p));
        }) < 1e-6);
}

TEST_CASE("adam step reduces simple quadratic") {
  Rng rng(41);
  Tensor p = random_tensor({4}, rng, true);
  AdamW opt({{"p", p}}, 0.05);
  double first = 0.0;
  for (int step = 0; step < 200; ++step) {
    opt.zero_grad();
    Tensor loss = sum_all(mul(p, p));
    if (step == 0) first = loss.item();
    loss.backward();
    opt.step();
  }
  Tensor final_loss = sum_all(mul(p, p));
  CHECK(final_loss.item() < 1e-3 * first);
}

TEST_CASE("optimizer state round-trips") {
  Rng rng(43);
  Tensor p = random_tensor({3}, rng, true);
  Tensor p2 = Tensor::from_data({3}, p.data(), true);
  AdamW a({{"p", p}}, 0.01), b({{"p", p2}}, 0.01);
  auto step_once = [](AdamW& o, Tensor& t) {
    o.zero_grad();
    Tensor l = sum_all(mul(t, t));
    l.backward();
    o.step();
  };
  step_once(a, p);
  std::vector<double> st;
  a.serialize(st);
  step_once(b, p2);  // desync
  p2.data() = p.data();
  b.deserialize(st);
  step_once(a, p);
  step_once(b, p2);
  CHECK(p.data() == p2.data());
}
