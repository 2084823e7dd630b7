#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "dcpn/rng.hpp"
#include "dcpn/tensor.hpp"

namespace dcpn {

// Named parameter/buffer registry used for checkpointing and optimizers.
// Buffers are non-trainable state (batch-norm running statistics).
struct StateDict {
  std::vector<std::pair<std::string, Tensor>> params;
  std::vector<std::pair<std::string, std::vector<double>*>> buffers;

  void add_param(const std::string& name, const Tensor& t) {
    params.emplace_back(name, t);
  }
  void add_buffer(const std::string& name, std::vector<double>* v) {
    buffers.emplace_back(name, v);
  }
};

inline Tensor make_param(const Shape& s, Rng& rng, double stddev) {
  Tensor t = Tensor::zeros(s, true);
  if (stddev > 0.0)
    for (auto& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(int in, int out, Rng& rng, double stddev = -1.0) {
    if (stddev < 0.0) stddev = std::sqrt(2.0 / double(in));
    weight = make_param({in, out}, rng, stddev);
    bias = Tensor::zeros({out}, true);
  }

  Tensor forward(const Tensor& x) const {
    return add_bias(matmul(x, weight), bias);
  }

  void state(const std::string& p, StateDict& sd) {
    sd.add_param(p + ".weight", weight);
    sd.add_param(p + ".bias", bias);
  }
};

struct LayerNorm {
  Tensor gamma, beta;
  double eps = 1e-5;

  LayerNorm() = default;
  explicit LayerNorm(int dim) {
    gamma = Tensor::zeros({dim}, true);
    for (auto& v : gamma.data()) v = 1.0;
    beta = Tensor::zeros({dim}, true);
  }

  Tensor forward(const Tensor& x) const {
    return layer_norm(x, gamma, beta, eps);
  }

  void state(const std::string& p, StateDict& sd) {
    sd.add_param(p + ".gamma", gamma);
    sd.add_param(p + ".beta", beta);
  }
};

struct Conv2d {
  int in_ch = 0, out_ch = 0, kernel = 1, stride = 1, pad = 0;
  Tensor weight;  // [in*k*k, out]
  Tensor bias;    // [out]

  Conv2d() = default;
  Conv2d(int in, int out, int k, int s, int p, Rng& rng)
      : in_ch(in), out_ch(out), kernel(k), stride(s), pad(p) {
    weight = make_param({in * k * k, out}, rng,
                        std::sqrt(2.0 / double(in * k * k)));
    bias = Tensor::zeros({out}, true);
  }

  // x: [B, C, H, W] -> [B, out, OH, OW]
  Tensor forward(const Tensor& x) const {
    int B = x.shape()[0], H = x.shape()[2], W = x.shape()[3];
    int OH = (H + 2 * pad - kernel) / stride + 1;
    int OW = (W + 2 * pad - kernel) / stride + 1;
    Tensor cols = im2col(x, kernel, kernel, stride, pad);
    Tensor y = add_bias(matmul(cols, weight), bias);
    y = reshape(y, {B, OH, OW, out_ch});
    return permute(y, {0, 3, 1, 2});
  }

  void state(const std::string& p, StateDict& sd) {
    sd.add_param(p + ".weight", weight);
    sd.add_param(p + ".bias", bias);
  }
};

struct BatchNorm2d {
  Tensor gamma, beta;
  std::vector<double> running_mean, running_var;
  double momentum = 0.1, eps = 1e-5;

  BatchNorm2d() = default;
  explicit BatchNorm2d(int ch) {
    gamma = Tensor::zeros({ch}, true);
    for (auto& v : gamma.data()) v = 1.0;
    beta = Tensor::zeros({ch}, true);
    running_mean.assign(ch, 0.0);
    running_var.assign(ch, 1.0);
  }

  // x: [B, C, H, W]
  Tensor forward(const Tensor& x, bool training) {
    int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    std::int64_t M = std::int64_t(B) * H * W;
    std::int64_t hw = std::int64_t(H) * W;
    std::vector<double> mean(C), istd(C);
    if (training) {
      for (int c = 0; c < C; ++c) {
        double mu = 0.0;
        for (int b = 0; b < B; ++b) {
          const double* in = x.data().data() + (std::int64_t(b) * C + c) * hw;
          for (std::int64_t i = 0; i < hw; ++i) mu += in[i];
        }
        mu /= double(M);
        double var = 0.0;
        for (int b = 0; b < B; ++b) {
          const double* in = x.data().data() + (std::int64_t(b) * C + c) * hw;
          for (std::int64_t i = 0; i < hw; ++i) var += (in[i] - mu) * (in[i] - mu);
        }
        var /= double(M);
        mean[c] = mu;
        istd[c] = 1.0 / std::sqrt(var + eps);
        running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mu;
        running_var[c] = (1.0 - momentum) * running_var[c] + momentum * var;
      }
    } else {
      for (int c = 0; c < C; ++c) {
        mean[c] = running_mean[c];
        istd[c] = 1.0 / std::sqrt(running_var[c] + eps);
      }
    }
    std::vector<double> v(x.size());
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c) {
        const double* in = x.data().data() + (std::int64_t(b) * C + c) * hw;
        double* out = v.data() + (std::int64_t(b) * C + c) * hw;
        double g = gamma.data()[c], bt = beta.data()[c];
        for (std::int64_t i = 0; i < hw; ++i)
          out[i] = g * (in[i] - mean[c]) * istd[c] + bt;
      }
    auto stats = std::make_shared<std::vector<double>>();
    stats->insert(stats->end(), mean.begin(), mean.end());
    stats->insert(stats->end(), istd.begin(), istd.end());
    Tensor xt = x, gm = gamma, bt = beta;
    return detail::make_op(
        x.shape(), std::move(v), {x, gamma, beta},
        [xt, gm, bt, stats, B, C, hw, M, training](Tensor::Node& n) {
          for (int c = 0; c < C; ++c) {
            double mu = (*stats)[c], is = (*stats)[C + c];
            double g = gm.data()[c];
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int b = 0; b < B; ++b) {
              const double* in = xt.data().data() + (std::int64_t(b) * C + c) * hw;
              const double* dy = n.grad.data() + (std::int64_t(b) * C + c) * hw;
              for (std::int64_t i = 0; i < hw; ++i) {
                sum_dy += dy[i];
                sum_dy_xhat += dy[i] * (in[i] - mu) * is;
              }
            }
            if (gm.requires_grad()) gm.grad()[c] += sum_dy_xhat;
            if (bt.requires_grad()) bt.grad()[c] += sum_dy;
            if (!xt.requires_grad()) continue;
            for (int b = 0; b < B; ++b) {
              const double* in = xt.data().data() + (std::int64_t(b) * C + c) * hw;
              const double* dy = n.grad.data() + (std::int64_t(b) * C + c) * hw;
              double* dx = xt.grad().data() + (std::int64_t(b) * C + c) * hw;
              for (std::int64_t i = 0; i < hw; ++i) {
                if (training) {
                  double xhat = (in[i] - mu) * is;
                  dx[i] += g * is *
                           (dy[i] - sum_dy / double(M) -
                            xhat * sum_dy_xhat / double(M));
                } else {
                  dx[i] += g * is * dy[i];
                }
              }
            }
          }
        });
  }

  void state(const std::string& p, StateDict& sd) {
    sd.add_param(p + ".gamma", gamma);
    sd.add_param(p + ".beta", beta);
    sd.add_buffer(p + ".running_mean", &running_mean);
    sd.add_buffer(p + ".running_var", &running_var);
  }
};

// Adam with optional decoupled weight decay (AdamW when weight_decay > 0).
struct AdamW {
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 0.0;

  explicit AdamW(std::vector<std::pair<std::string, Tensor>> params,
                 double lr_ = 1e-3, double b1 = 0.9, double b2 = 0.999,
                 double wd = 0.0)
      : lr(lr_), beta1(b1), beta2(b2), weight_decay(wd) {
    for (auto& [name, t] : params) {
      (void)name;
      params_.push_back(t);
      m_.emplace_back(t.size(), 0.0);
      v_.emplace_back(t.size(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step() {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1, t_);
    double bc2 = 1.0 - std::pow(beta2, t_);
    for (size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      for (std::int64_t i = 0; i < p.size(); ++i) {
        double g = p.grad()[i];
        m_[k][i] = beta1 * m_[k][i] + (1.0 - beta1) * g;
        v_[k][i] = beta2 * v_[k][i] + (1.0 - beta2) * g * g;
        double mhat = m_[k][i] / bc1;
        double vhat = v_[k][i] / bc2;
        p.data()[i] -= lr * (mhat / (std::sqrt(vhat) + eps) +
                             weight_decay * p.data()[i]);
      }
    }
  }

  // optimizer state for exact checkpoint resume
  void serialize(std::vector<double>& out) const {
    out.clear();
    out.push_back(double(t_));
    for (size_t k = 0; k < params_.size(); ++k) {
      out.insert(out.end(), m_[k].begin(), m_[k].end());
      out.insert(out.end(), v_[k].begin(), v_[k].end());
    }
  }

  void deserialize(const std::vector<double>& in) {
    size_t pos = 0;
    t_ = static_cast<long>(in.at(pos++));
    for (size_t k = 0; k < params_.size(); ++k) {
      for (auto& x : m_[k]) x = in.at(pos++);
      for (auto& x : v_[k]) x = in.at(pos++);
    }
  }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace dcpn
