#pragma once

// Minimal reverse-mode autodiff over dense row-major double tensors.
//
// Every op records its parents and a backward closure when gradient
// recording is enabled and at least one input requires a gradient.
// Calling backward() on a scalar result walks the recorded graph in
// reverse topological order and accumulates into leaf gradients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lpdo/errors.hpp"
#include "lpdo/random.hpp"

namespace lpdo {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> values) {
    if (numel(shape) != values.size())
      throw ShapeError("constant: shape " + shape_string(shape) +
                       " does not hold " + std::to_string(values.size()) +
                       " values");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape) {
    auto size = numel(shape);
    return constant(std::move(shape), std::vector<double>(size, 0.0));
  }

  static Tensor parameter(Shape shape, std::vector<double> values) {
    Tensor t = constant(std::move(shape), std::move(values));
    t.node_->requires_grad = true;
    return t;
  }

  // Builds an op result. The closure receives the result node and must
  // accumulate into the parents' gradients.
  static Tensor make(Shape shape, std::vector<double> values,
                     std::vector<Tensor> inputs,
                     std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    bool needs = false;
    if (detail::grad_mode())
      for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (needs) {
      n->requires_grad = true;
      for (auto& in : inputs) n->parents.push_back(in.node_);
      n->backward = std::move(backward);
    }
    return Tensor(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  std::vector<double>& grad_buffer() { return node_->ensure_grad(); }
  double operator[](std::size_t i) const { return node_->value[i]; }

  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor " + shape_string(shape()));
    return node_->value[0];
  }

  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  Node* node() const { return node_.get(); }

  // Reverse pass from a scalar.
  void backward() const {
    if (size() != 1) throw ShapeError("backward() requires a scalar");
    if (!requires_grad()) return;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        Node* p = n->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

 private:
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  std::shared_ptr<Node> node_;
};

namespace detail {
inline std::vector<double>& parent_grad(Node& n, std::size_t i) {
  return n.parents[i]->ensure_grad();
}
inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}
}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  const bool ga = a.requires_grad(), gb = b.requires_grad();
  return Tensor::make(a.shape(), std::move(out), {a, b}, [ga, gb](Node& n) {
    std::size_t slot = 0;
    for (bool g : {ga, gb}) {
      if (g) {
        auto& pg = n.parents[slot]->ensure_grad();
        for (std::size_t i = 0; i < n.grad.size(); ++i) pg[i] += n.grad[i];
      }
      ++slot;
    }
  });
}

// x + y where y's shape is a trailing suffix of x's shape.
inline Tensor add_broadcast(const Tensor& x, const Tensor& y) {
  const auto& xs = x.shape();
  const auto& ys = y.shape();
  if (ys.size() > xs.size() ||
      !std::equal(ys.begin(), ys.end(), xs.end() - static_cast<long>(ys.size())))
    throw ShapeError("add_broadcast: " + shape_string(ys) + " is not a suffix of " +
                     shape_string(xs));
  const std::size_t ny = y.size();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i % ny];
  const bool gx = x.requires_grad(), gy = y.requires_grad();
  return Tensor::make(xs, std::move(out), {x, y}, [gx, gy, ny](Node& n) {
    if (gx) {
      auto& pg = n.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) pg[i] += n.grad[i];
    }
    if (gy) {
      auto& pg = n.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) pg[i % ny] += n.grad[i];
    }
  });
}

// x (B, L, d) + y (B, d): y is repeated over the middle axis.
inline Tensor add_per_sequence(const Tensor& x, const Tensor& y) {
  if (x.rank() != 3 || y.rank() != 2 || x.dim(0) != y.dim(0) || x.dim(2) != y.dim(1))
    throw ShapeError("add_per_sequence: " + shape_string(x.shape()) + " and " +
                     shape_string(y.shape()));
  const std::size_t B = x.dim(0), L = x.dim(1), d = x.dim(2);
  std::vector<double> out(x.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t c = 0; c < d; ++c)
        out[(b * L + l) * d + c] = x[(b * L + l) * d + c] + y[b * d + c];
  const bool gx = x.requires_grad(), gy = y.requires_grad();
  return Tensor::make(x.shape(), std::move(out), {x, y}, [=](Node& n) {
    if (gx) {
      auto& pg = n.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) pg[i] += n.grad[i];
    }
    if (gy) {
      auto& pg = n.parents[1]->ensure_grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t l = 0; l < L; ++l)
          for (std::size_t c = 0; c < d; ++c) pg[b * d + c] += n.grad[(b * L + l) * d + c];
    }
  });
}

inline Tensor scale(const Tensor& x, double c) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x[i];
  return Tensor::make(x.shape(), std::move(out), {x}, [c](Node& n) {
    auto& pg = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) pg[i] += c * n.grad[i];
  });
}

// Multiplies slice b of x (leading axis) by coeffs[b].
inline Tensor scale_leading(const Tensor& x, std::vector<double> coeffs) {
  if (x.rank() == 0 || x.dim(0) != coeffs.size())
    throw ShapeError("scale_leading: leading dim does not match coefficient count");
  const std::size_t inner = x.size() / coeffs.size();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = coeffs[i / inner] * x[i];
  return Tensor::make(x.shape(), std::move(out), {x},
                      [coeffs = std::move(coeffs), inner](Node& n) {
                        auto& pg = n.parents[0]->ensure_grad();
                        for (std::size_t i = 0; i < n.grad.size(); ++i)
                          pg[i] += coeffs[i / inner] * n.grad[i];
                      });
}

// Weighted sum of scalars; used to compose the training objective.
inline Tensor weighted_sum(const std::vector<std::pair<Tensor, double>>& terms) {
  std::vector<Tensor> inputs;
  std::vector<double> weights;
  double total = 0.0;
  for (const auto& [t, w] : terms) {
    if (t.size() != 1) throw ShapeError("weighted_sum expects scalars");
    inputs.push_back(t);
    weights.push_back(w);
    total += w * t.item();
  }
  return Tensor::make({1}, {total}, inputs, [weights](Node& n) {
    for (std::size_t i = 0; i < weights.size(); ++i)
      if (n.parents.size() > i && n.parents[i]->requires_grad)
        n.parents[i]->ensure_grad()[0] += weights[i] * n.grad[0];
  });
}

// y = x W + b over the last axis. W is (in, out), b is (out).
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t in = w.dim(0), out_dim = w.dim(1);
  if (x.shape().back() != in || b.size() != out_dim)
    throw ShapeError("linear: input " + shape_string(x.shape()) + " weight " +
                     shape_string(w.shape()));
  const std::size_t rows = x.size() / in;
  std::vector<double> out(rows * out_dim);
  const auto xv = x.values(), wv = w.values(), bv = b.values();
  for (std::size_t r = 0; r < rows; ++r) {
    double* o = out.data() + r * out_dim;
    std::copy(bv.begin(), bv.end(), o);
    for (std::size_t i = 0; i < in; ++i) {
      const double xi = xv[r * in + i];
      const double* wrow = wv.data() + i * out_dim;
      for (std::size_t c = 0; c < out_dim; ++c) o[c] += xi * wrow[c];
    }
  }
  Shape shape = x.shape();
  shape.back() = out_dim;
  const bool gx = x.requires_grad(), gw = w.requires_grad(), gb = b.requires_grad();
  return Tensor::make(std::move(shape), std::move(out), {x, w, b},
                      [=](Node& n) {
    const auto& xv = n.parents[0]->value;
    const auto& wv = n.parents[1]->value;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* go = n.grad.data() + r * out_dim;
      if (gx) {
        auto& gxv = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < in; ++i) {
          const double* wrow = wv.data() + i * out_dim;
          double acc = 0.0;
          for (std::size_t c = 0; c < out_dim; ++c) acc += go[c] * wrow[c];
          gxv[r * in + i] += acc;
        }
      }
      if (gw) {
        auto& gwv = n.parents[1]->ensure_grad();
        for (std::size_t i = 0; i < in; ++i) {
          const double xi = xv[r * in + i];
          if (xi == 0.0) continue;
          double* grow = gwv.data() + i * out_dim;
          for (std::size_t c = 0; c < out_dim; ++c) grow[c] += xi * go[c];
        }
      }
      if (gb) {
        auto& gbv = n.parents[2]->ensure_grad();
        for (std::size_t c = 0; c < out_dim; ++c) gbv[c] += go[c];
      }
    }
  });
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  const std::size_t d = x.shape().back();
  if (gamma.size() != d || beta.size() != d)
    throw ShapeError("layer_norm: affine size does not match last axis");
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size()), xhat(x.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += x[r * d + c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double z = x[r * d + c] - mean;
      var += z * z;
    }
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      const std::size_t i = r * d + c;
      xhat[i] = (x[i] - mean) * inv_std[r];
      out[i] = gamma[c] * xhat[i] + beta[c];
    }
  }
  const bool gx = x.requires_grad(), gg = gamma.requires_grad(), gbeta = beta.requires_grad();
  return Tensor::make(x.shape(), std::move(out), {x, gamma, beta},
                      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
    const auto& gv = n.parents[1]->value;
    std::vector<double> dxhat(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* go = n.grad.data() + r * d;
      const double* xh = xhat.data() + r * d;
      if (gg) {
        auto& pg = n.parents[1]->ensure_grad();
        for (std::size_t c = 0; c < d; ++c) pg[c] += go[c] * xh[c];
      }
      if (gbeta) {
        auto& pg = n.parents[2]->ensure_grad();
        for (std::size_t c = 0; c < d; ++c) pg[c] += go[c];
      }
      if (gx) {
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          dxhat[c] = go[c] * gv[c];
          mean_dxhat += dxhat[c];
          mean_dxhat_xhat += dxhat[c] * xh[c];
        }
        mean_dxhat /= static_cast<double>(d);
        mean_dxhat_xhat /= static_cast<double>(d);
        auto& pg = n.parents[0]->ensure_grad();
        for (std::size_t c = 0; c < d; ++c)
          pg[r * d + c] += inv_std[r] * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
      }
    }
  });
}

// tanh approximation of GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  std::vector<double> out(x.size()), deriv(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x[i];
    const double th = std::tanh(kC * (v + kA * v * v * v));
    out[i] = 0.5 * v * (1.0 + th);
    deriv[i] = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kC * (1.0 + 3.0 * kA * v * v);
  }
  return Tensor::make(x.shape(), std::move(out), {x}, [deriv = std::move(deriv)](Node& n) {
    auto& pg = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) pg[i] += deriv[i] * n.grad[i];
  });
}

// Inverted dropout. p == 0 returns x unchanged.
inline Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  const double keep = 1.0 - p;
  std::vector<double> mask(x.size()), out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    mask[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
    out[i] = x[i] * mask[i];
  }
  return Tensor::make(x.shape(), std::move(out), {x}, [mask = std::move(mask)](Node& n) {
    auto& pg = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < n.grad.size(); ++i) pg[i] += mask[i] * n.grad[i];
  });
}

// Row lookup into a (V, d) table. The result has shape lead + {d}.
// Id 0 is padding: it looks up a zero vector and sends no gradient.
inline Tensor embedding(const Tensor& table, std::span<const int> ids, Shape lead) {
  const std::size_t V = table.dim(0), d = table.dim(1);
  if (numel(lead) != ids.size()) throw ShapeError("embedding: id count does not match shape");
  std::vector<double> out(ids.size() * d);
  std::vector<int> idv(ids.begin(), ids.end());
  for (std::size_t r = 0; r < idv.size(); ++r) {
    if (idv[r] < 0 || static_cast<std::size_t>(idv[r]) >= V)
      throw VocabularyError("item id " + std::to_string(idv[r]) +
                            " outside vocabulary of " + std::to_string(V) + " rows");
    if (idv[r] == 0) continue;
    std::copy_n(table.values().begin() + static_cast<long>(idv[r] * d), d,
                out.begin() + static_cast<long>(r * d));
  }
  lead.push_back(d);
  return Tensor::make(std::move(lead), std::move(out), {table},
                      [idv = std::move(idv), d](Node& n) {
    auto& pg = n.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < idv.size(); ++r) {
      if (idv[r] == 0) continue;
      for (std::size_t c = 0; c < d; ++c) pg[idv[r] * d + c] += n.grad[r * d + c];
    }
  });
}

// Concatenates (B, La, d) and (B, Lb, d) along the sequence axis.
inline Tensor concat_seq(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
    throw ShapeError("concat_seq: " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  const std::size_t B = a.dim(0), La = a.dim(1), Lb = b.dim(1), d = a.dim(2);
  const std::size_t L = La + Lb;
  std::vector<double> out(B * L * d);
  for (std::size_t s = 0; s < B; ++s) {
    std::copy_n(a.values().begin() + static_cast<long>(s * La * d), La * d,
                out.begin() + static_cast<long>(s * L * d));
    std::copy_n(b.values().begin() + static_cast<long>(s * Lb * d), Lb * d,
                out.begin() + static_cast<long>((s * L + La) * d));
  }
  const bool ga = a.requires_grad(), gb = b.requires_grad();
  return Tensor::make({B, L, d}, std::move(out), {a, b}, [=](Node& n) {
    for (std::size_t s = 0; s < B; ++s) {
      if (ga) {
        auto& pg = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < La * d; ++i) pg[s * La * d + i] += n.grad[s * L * d + i];
      }
      if (gb) {
        auto& pg = n.parents[1]->ensure_grad();
        for (std::size_t i = 0; i < Lb * d; ++i)
          pg[s * Lb * d + i] += n.grad[(s * L + La) * d + i];
      }
    }
  });
}

// Positions [start, start + len) of a (B, L, d) tensor.
inline Tensor slice_seq(const Tensor& x, std::size_t start, std::size_t len) {
  if (x.rank() != 3 || start + len > x.dim(1))
    throw ShapeError("slice_seq: range out of bounds for " + shape_string(x.shape()));
  const std::size_t B = x.dim(0), L = x.dim(1), d = x.dim(2);
  std::vector<double> out(B * len * d);
  for (std::size_t s = 0; s < B; ++s)
    std::copy_n(x.values().begin() + static_cast<long>((s * L + start) * d), len * d,
                out.begin() + static_cast<long>(s * len * d));
  return Tensor::make({B, len, d}, std::move(out), {x}, [=](Node& n) {
    auto& pg = n.parents[0]->ensure_grad();
    for (std::size_t s = 0; s < B; ++s)
      for (std::size_t i = 0; i < len * d; ++i)
        pg[(s * L + start) * d + i] += n.grad[s * len * d + i];
  });
}

// Scaled dot-product attention with `heads` heads over already-projected
// inputs. q is (B, Lq, d); k and v are (B, Lk, d); allowed is a (B, Lq, Lk)
// 0/1 mask. A query row with no allowed key yields a zero output.
inline Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                   std::size_t heads, std::span<const std::uint8_t> allowed) {
  if (q.rank() != 3 || k.rank() != 3 || v.shape() != k.shape() || q.dim(0) != k.dim(0) ||
      q.dim(2) != k.dim(2))
    throw ShapeError("attention: q " + shape_string(q.shape()) + " k " +
                     shape_string(k.shape()) + " v " + shape_string(v.shape()));
  const std::size_t B = q.dim(0), Lq = q.dim(1), Lk = k.dim(1), d = q.dim(2);
  if (heads == 0 || d % heads != 0) throw ShapeError("attention: d not divisible by heads");
  if (allowed.size() != B * Lq * Lk) throw ShapeError("attention: mask size mismatch");
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<std::uint8_t> mask(allowed.begin(), allowed.end());
  std::vector<double> probs(B * heads * Lq * Lk, 0.0);
  std::vector<double> out(B * Lq * d, 0.0);
  const auto qv = q.values(), kv = k.values(), vv = v.values();
  std::vector<double> row(Lk);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < Lq; ++i) {
        const double* qi = qv.data() + (b * Lq + i) * d + h * dh;
        const std::uint8_t* m = mask.data() + (b * Lq + i) * Lk;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < Lk; ++j) {
          if (!m[j]) continue;
          const double* kj = kv.data() + (b * Lk + j) * d + h * dh;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
          row[j] = s * inv_sqrt;
          mx = std::max(mx, row[j]);
        }
        if (mx == -std::numeric_limits<double>::infinity()) continue;
        double* p = probs.data() + ((b * heads + h) * Lq + i) * Lk;
        double z = 0.0;
        for (std::size_t j = 0; j < Lk; ++j) {
          if (!m[j]) continue;
          p[j] = std::exp(row[j] - mx);
          z += p[j];
        }
        double* oi = out.data() + (b * Lq + i) * d + h * dh;
        for (std::size_t j = 0; j < Lk; ++j) {
          if (!m[j]) continue;
          p[j] /= z;
          const double* vj = vv.data() + (b * Lk + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
        }
      }
    }
  }
  const bool gq = q.requires_grad(), gk = k.requires_grad(), gv = v.requires_grad();
  return Tensor::make(q.shape(), std::move(out), {q, k, v},
                      [=, probs = std::move(probs), mask = std::move(mask)](Node& n) {
    const auto& qv = n.parents[0]->value;
    const auto& kv = n.parents[1]->value;
    const auto& vv = n.parents[2]->value;
    std::vector<double>* dq = gq ? &n.parents[0]->ensure_grad() : nullptr;
    std::vector<double>* dk = gk ? &n.parents[1]->ensure_grad() : nullptr;
    std::vector<double>* dv = gv ? &n.parents[2]->ensure_grad() : nullptr;
    std::vector<double> dp(Lk);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < Lq; ++i) {
          const double* p = probs.data() + ((b * heads + h) * Lq + i) * Lk;
          const std::uint8_t* m = mask.data() + (b * Lq + i) * Lk;
          const double* go = n.grad.data() + (b * Lq + i) * d + h * dh;
          double dot = 0.0;
          for (std::size_t j = 0; j < Lk; ++j) {
            dp[j] = 0.0;
            if (!m[j] || p[j] == 0.0) continue;
            const double* vj = vv.data() + (b * Lk + j) * d + h * dh;
            for (std::size_t c = 0; c < dh; ++c) dp[j] += go[c] * vj[c];
            dot += p[j] * dp[j];
            if (dv) {
              double* gvj = dv->data() + (b * Lk + j) * d + h * dh;
              for (std::size_t c = 0; c < dh; ++c) gvj[c] += p[j] * go[c];
            }
          }
          const double* qi = qv.data() + (b * Lq + i) * d + h * dh;
          for (std::size_t j = 0; j < Lk; ++j) {
            if (!m[j] || p[j] == 0.0) continue;
            const double ds = p[j] * (dp[j] - dot) * inv_sqrt;
            const double* kj = kv.data() + (b * Lk + j) * d + h * dh;
            if (dq) {
              double* gqi = dq->data() + (b * Lq + i) * d + h * dh;
              for (std::size_t c = 0; c < dh; ++c) gqi[c] += ds * kj[c];
            }
            if (dk) {
              double* gkj = dk->data() + (b * Lk + j) * d + h * dh;
              for (std::size_t c = 0; c < dh; ++c) gkj[c] += ds * qi[c];
            }
          }
        }
      }
    }
  });
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace lpdo
