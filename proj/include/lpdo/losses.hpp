#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "lpdo/errors.hpp"
#include "lpdo/tensor.hpp"

namespace lpdo {

struct LossWeights {
  double lambda = 0.1;      // reconstruction share; (1 - lambda) goes to the ranking term
  double gamma = 0.0;       // 0 = strict Plackett-Luce exclusion, 1 = full-softmax denominators
  double reg_weight = 1.0;  // coefficient of the output-norm regularizer

  void validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("lambda must lie in [0, 1]");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
    if (!(reg_weight >= 0.0)) throw ConfigError("reg_weight must be >= 0");
  }
};

// Mean squared error over the positions whose mask entry is 1 and all their
// feature dimensions. pred and target are (B, L, d); mask is (B, L) or empty
// for "everything".
inline Tensor simple_loss(const Tensor& pred, const Tensor& target,
                          std::span<const std::uint8_t> mask = {}) {
  if (pred.shape() != target.shape())
    throw ShapeError("simple_loss: " + shape_string(pred.shape()) + " vs " +
                     shape_string(target.shape()));
  const std::size_t d = pred.shape().back();
  const std::size_t rows = pred.size() / d;
  if (!mask.empty() && mask.size() != rows) throw ShapeError("simple_loss: mask size mismatch");
  std::size_t active = 0;
  double sum = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask.empty() && !mask[r]) continue;
    ++active;
    for (std::size_t c = 0; c < d; ++c) {
      const double diff = pred[r * d + c] - target[r * d + c];
      sum += diff * diff;
    }
  }
  if (active == 0) throw ArgumentError("simple_loss: every position is masked");
  const double denom = static_cast<double>(active * d);
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  const bool gp = pred.requires_grad(), gt = target.requires_grad();
  return Tensor::make({1}, {sum / denom}, {pred, target}, [=, m = std::move(m)](Node& n) {
    const auto& pv = n.parents[0]->value;
    const auto& tv = n.parents[1]->value;
    const double g = n.grad[0] * 2.0 / denom;
    for (std::size_t r = 0; r < rows; ++r) {
      if (!m.empty() && !m[r]) continue;
      for (std::size_t c = 0; c < d; ++c) {
        const std::size_t i = r * d + c;
        const double diff = pv[i] - tv[i];
        if (gp) n.parents[0]->ensure_grad()[i] += g * diff;
        if (gt) n.parents[1]->ensure_grad()[i] -= g * diff;
      }
    }
  });
}

// Mean of squared entries of the denoiser output over the active positions:
// a single-timestep estimate of the prior-matching norm penalty.
inline Tensor reg_loss(const Tensor& output, std::span<const std::uint8_t> mask = {}) {
  const std::size_t d = output.shape().back();
  const std::size_t rows = output.size() / d;
  if (output.size() == 0) throw ArgumentError("reg_loss: empty output");
  if (!mask.empty() && mask.size() != rows) throw ShapeError("reg_loss: mask size mismatch");
  std::size_t active = 0;
  double sum = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask.empty() && !mask[r]) continue;
    ++active;
    for (std::size_t c = 0; c < d; ++c) sum += output[r * d + c] * output[r * d + c];
  }
  if (active == 0) return Tensor::constant({1}, {0.0});
  const double denom = static_cast<double>(active * d);
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return Tensor::make({1}, {sum / denom}, {output}, [=, m = std::move(m)](Node& n) {
    auto& pg = n.parents[0]->ensure_grad();
    const auto& v = n.parents[0]->value;
    const double g = n.grad[0] * 2.0 / denom;
    for (std::size_t r = 0; r < rows; ++r) {
      if (!m.empty() && !m[r]) continue;
      for (std::size_t c = 0; c < d; ++c) pg[r * d + c] += g * v[r * d + c];
    }
  });
}

// One softened Plackett-Luce choice:
//   -log exp(s_t) / ((1 - gamma) * sum_{i not in excluded} exp(s_i) + gamma * sum_i exp(s_i))
// `excluded` flags the items already placed at earlier ranks. When `grad` is
// non-null the derivative w.r.t. each score is accumulated into it.
inline double soft_choice_nll(std::span<const double> scores, std::size_t target,
                              std::span<const std::uint8_t> excluded, double gamma,
                              std::span<double> grad = {}, double grad_scale = 1.0) {
  const double mx = *std::max_element(scores.begin(), scores.end());
  double z_all = 0.0, z_rest = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double e = std::exp(scores[i] - mx);
    z_all += e;
    if (!excluded[i]) z_rest += e;
  }
  const double denom = (1.0 - gamma) * z_rest + gamma * z_all;
  const double loss = std::log(denom) - (scores[target] - mx);
  if (!grad.empty()) {
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const double w = excluded[i] ? gamma : 1.0;
      grad[i] += grad_scale * w * std::exp(scores[i] - mx) / denom;
    }
    grad[target] -= grad_scale;
  }
  return loss;
}

// Soft-ListMLE over a single score vector: rank r uses the candidates not
// placed at ranks 1..r-1, blended with the full candidate set by gamma.
inline double soft_listmle(std::span<const double> scores, std::span<const std::size_t> ranking,
                           double gamma, std::span<double> grad = {}) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ArgumentError("gamma must lie in [0, 1]");
  if (ranking.size() > scores.size())
    throw ArgumentError("ranking is longer than the candidate set");
  if (!grad.empty() && grad.size() != scores.size())
    throw ShapeError("soft_listmle: gradient buffer size mismatch");
  std::vector<std::uint8_t> placed(scores.size(), 0);
  double loss = 0.0;
  for (std::size_t idx : ranking) {
    if (idx >= scores.size()) throw ArgumentError("ranked item outside the candidate set");
    if (placed[idx]) throw ArgumentError("ranking lists item " + std::to_string(idx) + " twice");
    loss += soft_choice_nll(scores, idx, placed, gamma, grad);
    placed[idx] = 1;
  }
  return loss;
}

// Listwise trajectory loss. scores is (B, k, M) with column i - 1 holding
// item i; targets is (B, k) in [1, M]. Position j scores rank j and its
// denominator drops the ground-truth items of positions 1..j-1 (each id at
// most once, never the current target), softened by gamma. Returns the
// batch mean of the per-trajectory sums.
inline Tensor list_pref_loss(const Tensor& scores, std::span<const int> targets, double gamma) {
  if (scores.rank() != 3) throw ShapeError("list_pref_loss: scores must be (B, k, M)");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ArgumentError("gamma must lie in [0, 1]");
  const std::size_t B = scores.dim(0), k = scores.dim(1), M = scores.dim(2);
  if (targets.size() != B * k) throw ShapeError("list_pref_loss: targets must be (B, k)");
  if (!all_finite(scores.values())) throw NumericError("list_pref_loss: non-finite score");
  for (int t : targets)
    if (t < 1 || static_cast<std::size_t>(t) > M)
      throw VocabularyError("target item " + std::to_string(t) + " outside [1, " +
                            std::to_string(M) + "]");

  std::vector<double> grad(scores.size(), 0.0);
  std::vector<std::uint8_t> excluded(M);
  double total = 0.0;
  const double inv_b = 1.0 / static_cast<double>(B);
  const auto sv = scores.values();
  for (std::size_t b = 0; b < B; ++b) {
    std::fill(excluded.begin(), excluded.end(), 0);
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t target = static_cast<std::size_t>(targets[b * k + j] - 1);
      excluded[target] = 0;
      const std::size_t off = (b * k + j) * M;
      total += soft_choice_nll(sv.subspan(off, M), target, excluded, gamma,
                               std::span<double>(grad.data() + off, M), inv_b);
      excluded[target] = 1;
    }
  }
  return Tensor::make({1}, {total * inv_b}, {scores}, [grad = std::move(grad)](Node& n) {
    auto& pg = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < grad.size(); ++i) pg[i] += n.grad[0] * grad[i];
  });
}

// lambda * simple + (1 - lambda) * list_pref + reg_weight * reg.
inline Tensor lpdo_loss(const Tensor& simple, const Tensor& list_pref, const Tensor& reg,
                        const LossWeights& w) {
  w.validate();
  for (const Tensor* t : {&simple, &list_pref, &reg})
    if (!std::isfinite(t->item())) throw NumericError("lpdo_loss: non-finite component");
  return weighted_sum({{simple, w.lambda}, {list_pref, 1.0 - w.lambda}, {reg, w.reg_weight}});
}

inline double lpdo_loss(double simple, double list_pref, double reg, const LossWeights& w) {
  w.validate();
  return w.lambda * simple + (1.0 - w.lambda) * list_pref + w.reg_weight * reg;
}

}  // namespace lpdo
