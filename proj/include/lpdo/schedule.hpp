#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "lpdo/errors.hpp"
#include "lpdo/tensor.hpp"

namespace lpdo {

// Variance-preserving noise schedule for T diffusion steps.
//
// Steps are 1-based. alpha_bar(0) is 1 so that the final reverse update
// collapses onto the clean estimate without a special case.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;

  explicit NoiseSchedule(std::vector<double> betas) : beta_(std::move(betas)) {
    if (beta_.empty()) throw ConfigError("noise schedule needs at least one step");
    alpha_bar_.assign(beta_.size() + 1, 1.0);
    for (std::size_t t = 1; t <= beta_.size(); ++t) {
      const double b = beta_[t - 1];
      if (!(b >= 0.0 && b < 1.0))
        throw ConfigError("beta_" + std::to_string(t) + " = " + std::to_string(b) +
                          " outside [0, 1)");
      alpha_bar_[t] = alpha_bar_[t - 1] * (1.0 - b);
    }
  }

  std::size_t steps() const { return beta_.size(); }
  double beta(std::size_t t) const { return beta_.at(check(t) - 1); }
  double alpha(std::size_t t) const { return 1.0 - beta(t); }
  double alpha_bar(std::size_t t) const {
    if (t > steps()) throw IndexError("step " + std::to_string(t) + " beyond T=" +
                                      std::to_string(steps()));
    return alpha_bar_[t];
  }
  double snr(std::size_t t) const { return alpha_bar(t) / (1.0 - alpha_bar(t)); }
  std::span<const double> betas() const { return beta_; }

  std::size_t check(std::size_t t) const {
    if (t < 1 || t > steps())
      throw IndexError("step " + std::to_string(t) + " outside [1, " +
                       std::to_string(steps()) + "]");
    return t;
  }

 private:
  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
};

// beta_1 = beta_start, beta_T = beta_end, linear in between.
inline NoiseSchedule linear_schedule(std::size_t steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("diffusion steps must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ConfigError("need 0 < beta_start <= beta_end < 1, got [" +
                      std::to_string(beta_start) + ", " + std::to_string(beta_end) + "]");
  std::vector<double> betas(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    betas[i] = beta_start + frac * (beta_end - beta_start);
  }
  return NoiseSchedule(std::move(betas));
}

// Evenly strided descending subset of [1, T] with n entries, always
// starting at T. Used to run inference with fewer steps than training.
inline std::vector<std::size_t> inference_steps(const NoiseSchedule& sched, std::size_t n) {
  const std::size_t T = sched.steps();
  if (n < 1 || n > T)
    throw ConfigError("inference steps " + std::to_string(n) + " outside [1, " +
                      std::to_string(T) + "]");
  std::vector<std::size_t> out;
  for (std::size_t i = n; i >= 1; --i) {
    const double pos = static_cast<double>(T) * static_cast<double>(i) / static_cast<double>(n);
    out.push_back(static_cast<std::size_t>(std::llround(pos)));
  }
  return out;
}

// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise, with one step per
// leading-axis slice of x0.
inline Tensor q_sample(const Tensor& x0, std::span<const std::size_t> steps,
                       std::span<const double> noise, const NoiseSchedule& sched) {
  if (noise.size() != x0.size())
    throw ShapeError("q_sample: noise has " + std::to_string(noise.size()) +
                     " values, latent has " + std::to_string(x0.size()));
  if (x0.rank() == 0 || steps.size() != x0.dim(0))
    throw ShapeError("q_sample: one step index per example required");
  std::vector<double> signal(steps.size()), sigma(steps.size());
  for (std::size_t b = 0; b < steps.size(); ++b) {
    const double ab = sched.alpha_bar(sched.check(steps[b]));
    signal[b] = std::sqrt(ab);
    sigma[b] = std::sqrt(1.0 - ab);
  }
  std::vector<double> scaled_noise(noise.begin(), noise.end());
  const std::size_t inner = x0.size() / steps.size();
  for (std::size_t i = 0; i < scaled_noise.size(); ++i) scaled_noise[i] *= sigma[i / inner];
  return add(scale_leading(x0, signal), Tensor::constant(x0.shape(), std::move(scaled_noise)));
}

// Scalar form used by the algebra tests.
inline double q_sample(double x0, std::size_t t, double noise, const NoiseSchedule& sched) {
  const double ab = sched.alpha_bar(sched.check(t));
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * noise;
}

// Reverse update from step t to step `to` (default t - 1):
// sqrt(alpha_bar_to) x0_hat + sqrt(1 - alpha_bar_to) noise.
// The caller passes zero noise on the final step.
inline std::vector<double> posterior_step(std::span<const double> x_t,
                                          std::span<const double> x0_hat, std::size_t t,
                                          const NoiseSchedule& sched,
                                          std::span<const double> noise,
                                          std::size_t to = static_cast<std::size_t>(-1)) {
  sched.check(t);
  if (to == static_cast<std::size_t>(-1)) to = t - 1;
  if (to >= t) throw IndexError("posterior_step must move to an earlier step");
  if (x_t.size() != x0_hat.size() || noise.size() != x0_hat.size())
    throw ShapeError("posterior_step: latent, estimate and noise sizes differ");
  const double ab = sched.alpha_bar(to);
  const double a = std::sqrt(ab), s = std::sqrt(1.0 - ab);
  std::vector<double> out(x0_hat.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0_hat[i] + s * noise[i];
  return out;
}

}  // namespace lpdo
