#pragma once

#include <Eigen/Dense>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace dcpn {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i)
    out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

using EMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

// Reverse-mode autodiff tensor. Values are double precision; the graph is a
// shared DAG of nodes, each with a closure that pushes gradients to its
// parents. Leaves with requires_grad accumulate into .grad until zeroed.
class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<double> val;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backprop;  // may be empty (leaf)
  };
  using NodePtr = std::shared_ptr<Node>;

  Tensor() = default;
  explicit Tensor(NodePtr n) : n_(std::move(n)) {}

  static Tensor zeros(const Shape& s, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = s;
    n->val.assign(numel(s), 0.0);
    n->grad.assign(numel(s), 0.0);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from_data(const Shape& s, std::vector<double> v,
                          bool requires_grad = false) {
    if (static_cast<std::int64_t>(v.size()) != numel(s))
      throw std::invalid_argument("from_data: size mismatch for " +
                                  shape_str(s));
    auto n = std::make_shared<Node>();
    n->shape = s;
    n->val = std::move(v);
    n->grad.assign(numel(s), 0.0);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v) { return from_data({1}, {v}); }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  std::int64_t size() const { return numel(n_->shape); }
  int dim(int i) const { return n_->shape[i]; }
  // Tensor is a shared handle; payload mutability follows the node, not the
  // handle.
  std::vector<double>& data() const { return n_->val; }
  std::vector<double>& grad() const { return n_->grad; }
  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool b) { n_->requires_grad = b; }
  NodePtr node() const { return n_; }

  double item() const {
    if (size() != 1) throw std::logic_error("item(): tensor is not scalar");
    return n_->val[0];
  }

  void zero_grad() { std::fill(n_->grad.begin(), n_->grad.end(), 0.0); }

  // Backpropagate from this scalar through the graph.
  void backward() {
    if (size() != 1) throw std::logic_error("backward(): root must be scalar");
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack{{n_.get(), 0}};
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, i] = stack.back();
      if (i < node->parents.size()) {
        Node* p = node->parents[i++].get();
        if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    n_->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
      if ((*it)->backprop) (*it)->backprop();
  }

 private:
  NodePtr n_;
};

namespace detail {

inline Tensor make_op(Shape shape, std::vector<double> val,
                      std::vector<Tensor> parents,
                      std::function<void(Tensor::Node&)> bp) {
  auto n = std::make_shared<Tensor::Node>();
  n->shape = std::move(shape);
  n->val = std::move(val);
  n->grad.assign(n->val.size(), 0.0);
  for (auto& p : parents) {
    n->parents.push_back(p.node());
    n->requires_grad = n->requires_grad || p.requires_grad();
  }
  if (n->requires_grad) {
    Tensor::Node* raw = n.get();
    n->backprop = [raw, bp = std::move(bp)]() { bp(*raw); };
  }
  return Tensor(n);
}

inline void check_same_shape(const Tensor& a, const Tensor& b,
                             const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<double> v(a.size());
  for (std::int64_t i = 0; i < a.size(); ++i) v[i] = a.data()[i] + b.data()[i];
  return detail::make_op(a.shape(), std::move(v), {a, b},
                         [a, b](Tensor::Node& n) {
                           for (size_t i = 0; i < n.grad.size(); ++i) {
                             if (a.requires_grad()) a.grad()[i] += n.grad[i];
                             if (b.requires_grad()) b.grad()[i] += n.grad[i];
                           }
                         });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<double> v(a.size());
  for (std::int64_t i = 0; i < a.size(); ++i) v[i] = a.data()[i] - b.data()[i];
  return detail::make_op(a.shape(), std::move(v), {a, b},
                         [a, b](Tensor::Node& n) {
                           for (size_t i = 0; i < n.grad.size(); ++i) {
                             if (a.requires_grad()) a.grad()[i] += n.grad[i];
                             if (b.requires_grad()) b.grad()[i] -= n.grad[i];
                           }
                         });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<double> v(a.size());
  for (std::int64_t i = 0; i < a.size(); ++i) v[i] = a.data()[i] * b.data()[i];
  return detail::make_op(
      a.shape(), std::move(v), {a, b}, [a, b](Tensor::Node& n) {
        for (size_t i = 0; i < n.grad.size(); ++i) {
          if (a.requires_grad()) a.grad()[i] += n.grad[i] * b.data()[i];
          if (b.requires_grad()) b.grad()[i] += n.grad[i] * a.data()[i];
        }
      });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "div");
  std::vector<double> v(a.size());
  for (std::int64_t i = 0; i < a.size(); ++i) v[i] = a.data()[i] / b.data()[i];
  return detail::make_op(
      a.shape(), std::move(v), {a, b}, [a, b](Tensor::Node& n) {
        for (size_t i = 0; i < n.grad.size(); ++i) {
          double inv = 1.0 / b.data()[i];
          if (a.requires_grad()) a.grad()[i] += n.grad[i] * inv;
          if (b.requires_grad())
            b.grad()[i] -= n.grad[i] * a.data()[i] * inv * inv;
        }
      });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> v(a.size());
  for (std::int64_t i = 0; i < a.size(); ++i) v[i] = a.data()[i] * s;
  return detail::make_op(a.shape(), std::move(v), {a},
                         [a, s](Tensor::Node& n) {
                           for (size_t i = 0; i < n.grad.size(); ++i)
                             a.grad()[i] += n.grad[i] * s;
                         });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> v(a.size());
  for (std::int64_t i = 0; i < a.size(); ++i) v[i] = a.data()[i] + s;
  return detail::make_op(a.shape(), std::move(v), {a},
                         [a](Tensor::Node& n) {
                           for (size_t i = 0; i < n.grad.size(); ++i)
                             a.grad()[i] += n.grad[i];
                         });
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

inline Tensor relu(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::int64_t i = 0; i < a.size(); ++i)
    v[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  return detail::make_op(a.shape(), std::move(v), {a},
                         [a](Tensor::Node& n) {
                           for (size_t i = 0; i < n.grad.size(); ++i)
                             if (a.data()[i] > 0.0) a.grad()[i] += n.grad[i];
                         });
}

inline Tensor gelu(const Tensor& a) {
  std::vector<double> v(a.size());
  const double inv_sqrt2 = 1.0 / std::numbers::sqrt2;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    double x = a.data()[i];
    v[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
  }
  return detail::make_op(
      a.shape(), std::move(v), {a}, [a, inv_sqrt2](Tensor::Node& n) {
        const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (size_t i = 0; i < n.grad.size(); ++i) {
          double x = a.data()[i];
          double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
          double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
          a.grad()[i] += n.grad[i] * (cdf + x * pdf);
        }
      });
}

inline Tensor exp_t(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::int64_t i = 0; i < a.size(); ++i) v[i] = std::exp(a.data()[i]);
  return detail::make_op(a.shape(), std::move(v), {a},
                         [a](Tensor::Node& n) {
                           for (size_t i = 0; i < n.grad.size(); ++i)
                             a.grad()[i] += n.grad[i] * n.val[i];
                         });
}

inline Tensor log_t(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::int64_t i = 0; i < a.size(); ++i) v[i] = std::log(a.data()[i]);
  return detail::make_op(a.shape(), std::move(v), {a},
                         [a](Tensor::Node& n) {
                           for (size_t i = 0; i < n.grad.size(); ++i)
                             a.grad()[i] += n.grad[i] / a.data()[i];
                         });
}

inline Tensor sqrt_t(const Tensor& a) {
  std::vector<double> v(a.size());
  for (std::int64_t i = 0; i < a.size(); ++i) v[i] = std::sqrt(a.data()[i]);
  return detail::make_op(a.shape(), std::move(v), {a},
                         [a](Tensor::Node& n) {
                           for (size_t i = 0; i < n.grad.size(); ++i)
                             if (n.val[i] > 0.0)
                               a.grad()[i] += n.grad[i] * 0.5 / n.val[i];
                         });
}

inline Tensor clamp_min(const Tensor& a, double floor) {
  std::vector<double> v(a.size());
  for (std::int64_t i = 0; i < a.size(); ++i)
    v[i] = a.data()[i] > floor ? a.data()[i] : floor;
  return detail::make_op(a.shape(), std::move(v), {a},
                         [a, floor](Tensor::Node& n) {
                           for (size_t i = 0; i < n.grad.size(); ++i)
                             if (a.data()[i] > floor) a.grad()[i] += n.grad[i];
                         });
}

// x: [..., C], bias: [C]
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
  int c = x.shape().back();
  if (b.size() != c)
    throw std::invalid_argument("add_bias: bias length " +
                                std::to_string(b.size()) + " != " +
                                std::to_string(c));
  std::int64_t rows = x.size() / c;
  std::vector<double> v(x.size());
  for (std::int64_t r = 0; r < rows; ++r)
    for (int j = 0; j < c; ++j) v[r * c + j] = x.data()[r * c + j] + b.data()[j];
  return detail::make_op(x.shape(), std::move(v), {x, b},
                         [x, b, rows, c](Tensor::Node& n) {
                           for (std::int64_t r = 0; r < rows; ++r)
                             for (int j = 0; j < c; ++j) {
                               double g = n.grad[r * c + j];
                               if (x.requires_grad()) x.grad()[r * c + j] += g;
                               if (b.requires_grad()) b.grad()[j] += g;
                             }
                         });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_op({1}, {s}, {a}, [a](Tensor::Node& n) {
    for (size_t i = 0; i < a.grad().size(); ++i) a.grad()[i] += n.grad[0];
  });
}

inline Tensor mean_all(const Tensor& a) {
  return scale(sum_all(a), 1.0 / double(a.size()));
}

// x: [R, C] -> [R]
inline Tensor sum_lastdim(const Tensor& x) {
  int c = x.shape().back();
  std::int64_t rows = x.size() / c;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  std::vector<double> v(rows, 0.0);
  for (std::int64_t r = 0; r < rows; ++r)
    for (int j = 0; j < c; ++j) v[r] += x.data()[r * c + j];
  return detail::make_op(out_shape, std::move(v), {x},
                         [x, rows, c](Tensor::Node& n) {
                           for (std::int64_t r = 0; r < rows; ++r)
                             for (int j = 0; j < c; ++j)
                               x.grad()[r * c + j] += n.grad[r];
                         });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

// a: [m, k], b: [k, n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 ||
      a.shape()[1] != b.shape()[0])
    throw std::invalid_argument("matmul: incompatible " +
                                shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> v(std::int64_t(m) * n);
  {
    ECMap A(a.data().data(), m, k), B(b.data().data(), k, n);
    EMap C(v.data(), m, n);
    C.noalias() = A * B;
  }
  return detail::make_op(
      {m, n}, std::move(v), {a, b}, [a, b, m, k, n](Tensor::Node& node) {
        ECMap G(node.grad.data(), m, n);
        if (a.requires_grad()) {
          ECMap B(b.data().data(), k, n);
          EMap dA(a.grad().data(), m, k);
          dA.noalias() += G * B.transpose();
        }
        if (b.requires_grad()) {
          ECMap A(a.data().data(), m, k);
          EMap dB(b.grad().data(), k, n);
          dB.noalias() += A.transpose() * G;
        }
      });
}

// a: [N, m, k], b: [N, k, n]
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 3 || b.shape().size() != 3 ||
      a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1])
    throw std::invalid_argument("bmm: incompatible " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  int N = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[2];
  std::vector<double> v(std::int64_t(N) * m * n);
  for (int i = 0; i < N; ++i) {
    ECMap A(a.data().data() + std::int64_t(i) * m * k, m, k);
    ECMap B(b.data().data() + std::int64_t(i) * k * n, k, n);
    EMap C(v.data() + std::int64_t(i) * m * n, m, n);
    C.noalias() = A * B;
  }
  return detail::make_op(
      {N, m, n}, std::move(v), {a, b},
      [a, b, N, m, k, n](Tensor::Node& node) {
        for (int i = 0; i < N; ++i) {
          ECMap G(node.grad.data() + std::int64_t(i) * m * n, m, n);
          if (a.requires_grad()) {
            ECMap B(b.data().data() + std::int64_t(i) * k * n, k, n);
            EMap dA(a.grad().data() + std::int64_t(i) * m * k, m, k);
            dA.noalias() += G * B.transpose();
          }
          if (b.requires_grad()) {
            ECMap A(a.data().data() + std::int64_t(i) * m * k, m, k);
            EMap dB(b.grad().data() + std::int64_t(i) * k * n, k, n);
            dB.noalias() += A.transpose() * G;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, const Shape& s) {
  if (numel(s) != a.size())
    throw std::invalid_argument("reshape: numel mismatch " +
                                shape_str(a.shape()) + " -> " + shape_str(s));
  std::vector<double> v = a.data();
  return detail::make_op(s, std::move(v), {a}, [a](Tensor::Node& n) {
    for (size_t i = 0; i < n.grad.size(); ++i) a.grad()[i] += n.grad[i];
  });
}

inline Tensor permute(const Tensor& a, const std::vector<int>& perm) {
  const Shape& s = a.shape();
  if (perm.size() != s.size())
    throw std::invalid_argument("permute: rank mismatch");
  int rank = static_cast<int>(s.size());
  Shape out_shape(rank);
  for (int i = 0; i < rank; ++i) out_shape[i] = s[perm[i]];
  std::vector<std::int64_t> in_strides(rank, 1), out_strides(rank, 1);
  for (int i = rank - 2; i >= 0; --i) {
    in_strides[i] = in_strides[i + 1] * s[i + 1];
    out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
  }
  auto index_map = std::make_shared<std::vector<std::int64_t>>(a.size());
  std::vector<double> v(a.size());
  std::vector<int> idx(rank, 0);
  for (std::int64_t o = 0; o < a.size(); ++o) {
    std::int64_t src = 0;
    for (int i = 0; i < rank; ++i) src += std::int64_t(idx[i]) * in_strides[perm[i]];
    (*index_map)[o] = src;
    v[o] = a.data()[src];
    for (int i = rank - 1; i >= 0; --i) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  return detail::make_op(out_shape, std::move(v), {a},
                         [a, index_map](Tensor::Node& n) {
                           for (size_t o = 0; o < n.grad.size(); ++o)
                             a.grad()[(*index_map)[o]] += n.grad[o];
                         });
}

// a: [Ra, C], b: [Rb, C] -> [Ra+Rb, C]
inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 ||
      a.shape()[1] != b.shape()[1])
    throw std::invalid_argument("concat_rows: incompatible shapes");
  int c = a.shape()[1];
  std::vector<double> v;
  v.reserve(a.size() + b.size());
  v.insert(v.end(), a.data().begin(), a.data().end());
  v.insert(v.end(), b.data().begin(), b.data().end());
  return detail::make_op(
      {a.shape()[0] + b.shape()[0], c}, std::move(v), {a, b},
      [a, b](Tensor::Node& n) {
        size_t na = a.grad().size();
        if (a.requires_grad())
          for (size_t i = 0; i < na; ++i) a.grad()[i] += n.grad[i];
        if (b.requires_grad())
          for (size_t i = 0; i < b.grad().size(); ++i)
            b.grad()[i] += n.grad[na + i];
      });
}

// a: [R, Ca], b: [R, Cb] -> [R, Ca+Cb]
inline Tensor concat_lastdim(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 ||
      a.shape()[0] != b.shape()[0])
    throw std::invalid_argument("concat_lastdim: incompatible shapes");
  int r = a.shape()[0], ca = a.shape()[1], cb = b.shape()[1];
  std::vector<double> v(std::int64_t(r) * (ca + cb));
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < ca; ++j) v[std::int64_t(i) * (ca + cb) + j] = a.data()[std::int64_t(i) * ca + j];
    for (int j = 0; j < cb; ++j)
      v[std::int64_t(i) * (ca + cb) + ca + j] = b.data()[std::int64_t(i) * cb + j];
  }
  return detail::make_op(
      {r, ca + cb}, std::move(v), {a, b}, [a, b, r, ca, cb](Tensor::Node& n) {
        for (int i = 0; i < r; ++i) {
          if (a.requires_grad())
            for (int j = 0; j < ca; ++j)
              a.grad()[std::int64_t(i) * ca + j] += n.grad[std::int64_t(i) * (ca + cb) + j];
          if (b.requires_grad())
            for (int j = 0; j < cb; ++j)
              b.grad()[std::int64_t(i) * cb + j] +=
                  n.grad[std::int64_t(i) * (ca + cb) + ca + j];
        }
      });
}

// x: [R, C], idx in [0, R) -> [|idx|, C]; duplicate indices accumulate on
// backward.
inline Tensor gather_rows(const Tensor& x, std::vector<int> idx) {
  if (x.shape().size() != 2)
    throw std::invalid_argument("gather_rows: expects 2-D input");
  int c = x.shape()[1];
  int m = static_cast<int>(idx.size());
  std::vector<double> v(std::int64_t(m) * c);
  for (int i = 0; i < m; ++i) {
    if (idx[i] < 0 || idx[i] >= x.shape()[0])
      throw std::out_of_range("gather_rows: index out of range");
    std::copy_n(x.data().begin() + std::int64_t(idx[i]) * c, c,
                v.begin() + std::int64_t(i) * c);
  }
  auto ids = std::make_shared<std::vector<int>>(std::move(idx));
  return detail::make_op({m, c}, std::move(v), {x},
                         [x, ids, c](Tensor::Node& n) {
                           for (size_t i = 0; i < ids->size(); ++i)
                             for (int j = 0; j < c; ++j)
                               x.grad()[std::int64_t((*ids)[i]) * c + j] +=
                                   n.grad[std::int64_t(i) * c + j];
                         });
}

// ---------------------------------------------------------------------------
// normalization / softmax (fused forward+backward)
// ---------------------------------------------------------------------------

// softmax over the last dimension
inline Tensor softmax_lastdim(const Tensor& x) {
  int c = x.shape().back();
  std::int64_t rows = x.size() / c;
  std::vector<double> v(x.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * c;
    double* out = v.data() + r * c;
    double mx = in[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, in[j]);
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += (out[j] = std::exp(in[j] - mx));
    for (int j = 0; j < c; ++j) out[j] /= s;
  }
  return detail::make_op(x.shape(), std::move(v), {x},
                         [x, rows, c](Tensor::Node& n) {
                           for (std::int64_t r = 0; r < rows; ++r) {
                             const double* y = n.val.data() + r * c;
                             const double* g = n.grad.data() + r * c;
                             double dot = 0.0;
                             for (int j = 0; j < c; ++j) dot += g[j] * y[j];
                             for (int j = 0; j < c; ++j)
                               x.grad()[r * c + j] += y[j] * (g[j] - dot);
                           }
                         });
}

// x: [..., C], gamma, beta: [C]
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma,
                         const Tensor& beta, double eps = 1e-5) {
  int c = x.shape().back();
  if (gamma.size() != c || beta.size() != c)
    throw std::invalid_argument("layer_norm: affine size mismatch");
  std::int64_t rows = x.size() / c;
  std::vector<double> v(x.size());
  auto stats = std::make_shared<std::vector<double>>(2 * rows);  // mean, istd
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * c;
    double mean = 0.0;
    for (int j = 0; j < c; ++j) mean += in[j];
    mean /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= c;
    double istd = 1.0 / std::sqrt(var + eps);
    (*stats)[2 * r] = mean;
    (*stats)[2 * r + 1] = istd;
    for (int j = 0; j < c; ++j)
      v[r * c + j] = gamma.data()[j] * (in[j] - mean) * istd + beta.data()[j];
  }
  return detail::make_op(
      x.shape(), std::move(v), {x, gamma, beta},
      [x, gamma, beta, stats, rows, c](Tensor::Node& n) {
        for (std::int64_t r = 0; r < rows; ++r) {
          const double* in = x.data().data() + r * c;
          const double* g = n.grad.data() + r * c;
          double mean = (*stats)[2 * r], istd = (*stats)[2 * r + 1];
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (int j = 0; j < c; ++j) {
            double xhat = (in[j] - mean) * istd;
            double dxhat = g[j] * gamma.data()[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            if (gamma.requires_grad()) gamma.grad()[j] += g[j] * xhat;
            if (beta.requires_grad()) beta.grad()[j] += g[j];
          }
          if (x.requires_grad()) {
            for (int j = 0; j < c; ++j) {
              double xhat = (in[j] - mean) * istd;
              double dxhat = g[j] * gamma.data()[j];
              x.grad()[r * c + j] +=
                  istd * (dxhat - (sum_dxhat + xhat * sum_dxhat_xhat) / c);
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// image ops
// ---------------------------------------------------------------------------

// x: [B, C, H, W] -> rows [B*OH*OW, C*kh*kw]; zero padding.
inline Tensor im2col(const Tensor& x, int kh, int kw, int stride, int pad) {
  if (x.shape().size() != 4) throw std::invalid_argument("im2col: expects 4-D");
  int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  int OH = (H + 2 * pad - kh) / stride + 1;
  int OW = (W + 2 * pad - kw) / stride + 1;
  if (OH <= 0 || OW <= 0)
    throw std::invalid_argument("im2col: kernel larger than padded input");
  std::int64_t rows = std::int64_t(B) * OH * OW, cols = std::int64_t(C) * kh * kw;
  auto index_map = std::make_shared<std::vector<std::int64_t>>(rows * cols);
  std::vector<double> v(rows * cols, 0.0);
  std::int64_t o = 0;
  for (int b = 0; b < B; ++b)
    for (int oh = 0; oh < OH; ++oh)
      for (int ow = 0; ow < OW; ++ow)
        for (int c = 0; c < C; ++c)
          for (int i = 0; i < kh; ++i)
            for (int j = 0; j < kw; ++j, ++o) {
              int h = oh * stride + i - pad;
              int w = ow * stride + j - pad;
              if (h >= 0 && h < H && w >= 0 && w < W) {
                std::int64_t src = ((std::int64_t(b) * C + c) * H + h) * W + w;
                (*index_map)[o] = src;
                v[o] = x.data()[src];
              } else {
                (*index_map)[o] = -1;
              }
            }
  return detail::make_op({int(rows), int(cols)}, std::move(v), {x},
                         [x, index_map](Tensor::Node& n) {
                           for (size_t i = 0; i < n.grad.size(); ++i) {
                             std::int64_t src = (*index_map)[i];
                             if (src >= 0) x.grad()[src] += n.grad[i];
                           }
                         });
}

// x: [B, r*r*C', h, w] -> [B, C', r*h, r*w]
// out[b, c, r*i+di, r*j+dj] = x[b, c*r*r + di*r + dj, i, j]
inline Tensor pixel_shuffle(const Tensor& x, int r) {
  if (x.shape().size() != 4)
    throw std::invalid_argument("pixel_shuffle: expects 4-D");
  int B = x.shape()[0], C = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  if (C % (r * r) != 0)
    throw std::invalid_argument(
        "pixel_shuffle: channels " + std::to_string(C) +
        " not divisible by r^2=" + std::to_string(r * r));
  int Co = C / (r * r);
  auto index_map = std::make_shared<std::vector<std::int64_t>>(x.size());
  std::vector<double> v(x.size());
  std::int64_t o = 0;
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < Co; ++c)
      for (int oh = 0; oh < r * h; ++oh)
        for (int ow = 0; ow < r * w; ++ow, ++o) {
          int i = oh / r, di = oh % r, j = ow / r, dj = ow % r;
          std::int64_t src =
              ((std::int64_t(b) * C + (c * r * r + di * r + dj)) * h + i) * w + j;
          (*index_map)[o] = src;
          v[o] = x.data()[src];
        }
  return detail::make_op({B, Co, r * h, r * w}, std::move(v), {x},
                         [x, index_map](Tensor::Node& n) {
                           for (size_t i = 0; i < n.grad.size(); ++i)
                             x.grad()[(*index_map)[i]] += n.grad[i];
                         });
}

// exact inverse of pixel_shuffle
inline Tensor pixel_unshuffle(const Tensor& x, int r) {
  if (x.shape().size() != 4)
    throw std::invalid_argument("pixel_unshuffle: expects 4-D");
  int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  if (H % r != 0 || W % r != 0)
    throw std::invalid_argument("pixel_unshuffle: spatial not divisible by r");
  int h = H / r, w = W / r;
  auto index_map = std::make_shared<std::vector<std::int64_t>>(x.size());
  std::vector<double> v(x.size());
  std::int64_t o = 0;
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C * r * r; ++c)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j, ++o) {
          int cc = c / (r * r), di = (c % (r * r)) / r, dj = c % r;
          std::int64_t src =
              ((std::int64_t(b) * C + cc) * H + (i * r + di)) * W + (j * r + dj);
          (*index_map)[o] = src;
          v[o] = x.data()[src];
        }
  return detail::make_op({B, C * r * r, h, w}, std::move(v), {x},
                         [x, index_map](Tensor::Node& n) {
                           for (size_t i = 0; i < n.grad.size(); ++i)
                             x.grad()[(*index_map)[i]] += n.grad[i];
                         });
}

// x: [B, C, H, W] -> [B, C], mean over spatial positions
inline Tensor global_avg_pool(const Tensor& x) {
  if (x.shape().size() != 4)
    throw std::invalid_argument("global_avg_pool: expects 4-D");
  int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  std::int64_t hw = std::int64_t(H) * W;
  std::vector<double> v(std::int64_t(B) * C, 0.0);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double* in = x.data().data() + (std::int64_t(b) * C + c) * hw;
      double s = 0.0;
      for (std::int64_t i = 0; i < hw; ++i) s += in[i];
      v[std::int64_t(b) * C + c] = s / double(hw);
    }
  return detail::make_op({B, C}, std::move(v), {x},
                         [x, B, C, hw](Tensor::Node& n) {
                           for (std::int64_t bc = 0; bc < std::int64_t(B) * C; ++bc) {
                             double g = n.grad[bc] / double(hw);
                             for (std::int64_t i = 0; i < hw; ++i)
                               x.grad()[bc * hw + i] += g;
                           }
                         });
}

}  // namespace dcpn
