#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lpdo/dataset.hpp"
#include "lpdo/denoiser.hpp"
#include "lpdo/losses.hpp"
#include "lpdo/metrics.hpp"
#include "lpdo/random.hpp"
#include "lpdo/sampler.hpp"
#include "lpdo/schedule.hpp"

namespace lpdo {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over a fixed, ordered parameter list.
class Adam {
 public:
  Adam() = default;
  Adam(std::size_t param_count_hint, double lr, AdamConfig cfg = {}) : lr_(lr), cfg_(cfg) {
    m_.reserve(param_count_hint);
  }

  void step(std::vector<std::pair<std::string, Tensor>>& params) {
    if (m_.empty()) {
      for (auto& [name, p] : params) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = params[i].second;
      const auto g = p.grad();
      if (g.empty()) continue;
      auto w = p.mutable_values();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        w[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
      }
    }
  }

  double learning_rate() const { return lr_; }
  const AdamConfig& config() const { return cfg_; }
  std::size_t steps_taken() const { return t_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }

  void restore(std::size_t t, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v) {
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  double lr_ = 1e-3;
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct TrainConfig {
  double learning_rate = 0.001;
  std::size_t batch_size = 256;
  std::size_t max_epochs = 1000;
  std::size_t patience = 5;
  std::uint64_t seed = 0;
  LossWeights weights;
  bool no_listpref = false;
  bool no_simple = false;
  bool no_reg = false;
  // Reconstruct only the trajectory slots instead of the full concatenation.
  bool trajectory_only_reconstruction = false;
  std::size_t eval_every = 1;
  std::size_t eval_steps = 1;  // reverse steps used for validation
  std::size_t select_k = 5;    // model selection on validation SeqNDCG@select_k
  AdamConfig adam;

  void validate() const {
    weights.validate();
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  }

  // The ablation's row label, or "full".
  std::string ablation_label() const {
    std::string s;
    auto add = [&](const char* l) { s += (s.empty() ? "" : "+") + std::string(l); };
    if (no_listpref) add("w/o-L_ListPref");
    if (no_simple) add("w/o-L_Simple");
    if (no_reg) add("w/o-L_Reg");
    return s.empty() ? "full" : s;
  }
};

struct LossComponents {
  double simple = 0.0;
  double list_pref = 0.0;
  double reg = 0.0;
  double total = 0.0;
};

// Mask over the (B, n_max + k) concatenated positions that take part in the
// reconstruction and norm terms.
inline std::vector<std::uint8_t> latent_position_mask(const Batch& batch, bool trajectory_only) {
  const std::size_t L = batch.n_max + batch.k;
  std::vector<std::uint8_t> mask(batch.size() * L, 1);
  for (std::size_t b = 0; b < batch.size(); ++b)
    for (std::size_t l = 0; l < batch.n_max; ++l)
      mask[b * L + l] = trajectory_only ? 0 : batch.history_mask[b * batch.n_max + l];
  return mask;
}

// Builds the training objective for one batch: one diffusion step and one
// Gaussian draw per example, reconstruction of X_0 from X_t, and the
// listwise loss on scores of the trajectory slots of the estimate.
inline std::pair<Tensor, LossComponents> training_objective(const Batch& batch,
                                                            const Denoiser& model,
                                                            const NoiseSchedule& sched,
                                                            const TrainConfig& cfg, Rng& rng,
                                                            bool use_dropout = true) {
  const auto& mc = model.config();
  const std::size_t B = batch.size(), L = mc.seq_len(), d = mc.embed_dim;
  std::vector<std::size_t> steps(B);
  for (auto& t : steps) t = static_cast<std::size_t>(rng.uniform_int(1, static_cast<long>(sched.steps())));
  const auto noise = rng.normal_vector(B * L * d);

  const auto emb = model.embed(batch);
  const Tensor x0 = concat_seq(emb.history, emb.target);
  const Tensor xt = q_sample(x0, steps, noise, sched);
  const Tensor out =
      model.denoise(xt, steps, emb.history, batch.history_mask, use_dropout ? &rng : nullptr);

  const auto mask = latent_position_mask(batch, cfg.trajectory_only_reconstruction);
  const Tensor simple = simple_loss(out, x0, mask);
  const Tensor reg = reg_loss(out, mask);

  LossComponents c;
  c.simple = simple.item();
  c.reg = reg.item();
  std::vector<std::pair<Tensor, double>> terms;
  const auto& w = cfg.weights;
  if (!cfg.no_simple) terms.emplace_back(simple, w.lambda);
  if (!cfg.no_reg) terms.emplace_back(reg, w.reg_weight);
  if (cfg.no_listpref) {
    NoGradGuard no_grad;
    c.list_pref = list_pref_loss(model.score(model.trajectory_slots(out)), batch.targets, w.gamma).item();
  } else {
    const Tensor lp = list_pref_loss(model.score(model.trajectory_slots(out)), batch.targets, w.gamma);
    c.list_pref = lp.item();
    terms.emplace_back(lp, 1.0 - w.lambda);
  }
  Tensor total = terms.empty() ? Tensor::constant({1}, {0.0}) : weighted_sum(terms);
  c.total = total.item();
  return {total, c};
}

// One optimizer step on the LPDO objective.
inline LossComponents train_step(const Batch& batch, Denoiser& model, const NoiseSchedule& sched,
                                 const TrainConfig& cfg, Adam& optimizer, Rng& rng,
                                 const std::string& last_good_checkpoint = {}) {
  auto [total, c] = training_objective(batch, model, sched, cfg, rng);
  if (!std::isfinite(c.total))
    throw NumericError("non-finite training loss" +
                       (last_good_checkpoint.empty() ? std::string()
                                                     : "; last good checkpoint: " + last_good_checkpoint));
  model.zero_grad();
  total.backward();
  optimizer.step(model.parameters());
  return c;
}

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  std::size_t steps = 0;
  LossComponents mean;
  std::optional<double> valid_metric;
  std::optional<EvalReport> valid_report;
  bool improved = false;
};

struct StepRecord {
  std::size_t step = 0;
  LossComponents loss;
};

using ParameterSnapshot = std::vector<std::vector<double>>;

inline ParameterSnapshot snapshot(const Denoiser& model) {
  ParameterSnapshot s;
  for (const auto& [name, t] : model.parameters()) s.emplace_back(t.values().begin(), t.values().end());
  return s;
}

inline void restore(Denoiser& model, const ParameterSnapshot& s) {
  auto& params = model.parameters();
  if (s.size() != params.size()) throw ShapeError("snapshot does not match model parameters");
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto dst = params[i].second.mutable_values();
    if (dst.size() != s[i].size()) throw ShapeError("snapshot size mismatch for " + params[i].first);
    std::copy(s[i].begin(), s[i].end(), dst.begin());
  }
}

// Mutable progress of a training run; everything needed to resume.
struct TrainerState {
  std::size_t epoch = 0;        // completed epochs
  std::size_t global_step = 0;
  std::size_t evals_since_best = 0;
  double best_metric = -std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  ParameterSnapshot best_params;
  std::string rng_state;
  bool stopped_early = false;
};

struct FitCallbacks {
  std::function<void(const StepRecord&)> on_step;
  std::function<void(const EpochRecord&, const TrainerState&)> on_epoch;
};

// Training loop with validation-based early stopping. Owns the optimizer
// and random stream; the model is mutated in place and holds the best
// validation parameters when fit() returns.
class Trainer {
 public:
  Trainer(Denoiser& model, NoiseSchedule sched, TrainConfig cfg)
      : model_(model), sched_(std::move(sched)), cfg_(std::move(cfg)),
        optimizer_(model.parameters().size(), cfg_.learning_rate, cfg_.adam), rng_(cfg_.seed) {
    cfg_.validate();
    if (model.config().vocab_size < cfg_.select_k)
      cfg_.select_k = model.config().vocab_size;
  }

  const TrainConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return sched_; }
  TrainerState& state() { return state_; }
  const TrainerState& state() const { return state_; }
  Adam& optimizer() { return optimizer_; }
  const Adam& optimizer() const { return optimizer_; }
  Rng& rng() { return rng_; }
  std::string last_good_checkpoint;

  EpochRecord run_epoch(std::span<const TrajectoryExample> train, const FitCallbacks& cb = {}) {
    BatchIterator it(train, cfg_.batch_size, true, derive_seed(cfg_.seed, 0xba7c4));
    it.start_epoch(state_.epoch);
    EpochRecord rec;
    rec.epoch = state_.epoch + 1;
    while (auto batch = it.next()) {
      const auto c = train_step(*batch, model_, sched_, cfg_, optimizer_, rng_, last_good_checkpoint);
      ++state_.global_step;
      ++rec.steps;
      rec.mean.simple += c.simple;
      rec.mean.list_pref += c.list_pref;
      rec.mean.reg += c.reg;
      rec.mean.total += c.total;
      if (cb.on_step) cb.on_step({state_.global_step, c});
    }
    const double n = static_cast<double>(rec.steps);
    rec.mean.simple /= n;
    rec.mean.list_pref /= n;
    rec.mean.reg /= n;
    rec.mean.total /= n;
    ++state_.epoch;
    return rec;
  }

  EvalReport validate(std::span<const TrajectoryExample> valid) const {
    return evaluate(model_, sched_, valid, cfg_.eval_steps, {cfg_.select_k},
                    derive_seed(cfg_.seed, 0xe7a1), 256);
  }

  // Applies one validation result to the early-stopping state. Returns
  // true when training should stop.
  bool record_validation(double metric, EpochRecord& rec) {
    rec.valid_metric = metric;
    if (std::isfinite(metric) && metric > state_.best_metric) {
      state_.best_metric = metric;
      state_.best_epoch = rec.epoch;
      state_.best_params = snapshot(model_);
      state_.evals_since_best = 0;
      rec.improved = true;
    } else {
      ++state_.evals_since_best;
    }
    return state_.evals_since_best >= cfg_.patience;
  }

  // Runs until max_epochs or until `patience` consecutive validation events
  // fail to improve the best SeqNDCG@select_k.
  std::vector<EpochRecord> fit(std::span<const TrajectoryExample> train,
                               std::span<const TrajectoryExample> valid, const FitCallbacks& cb = {}) {
    if (valid.empty()) throw ArgumentError("fit: validation split is empty");
    if (train.empty()) throw ArgumentError("fit: training split is empty");
    std::vector<EpochRecord> log;
    while (state_.epoch < cfg_.max_epochs) {
      EpochRecord rec = run_epoch(train, cb);
      bool stop = false;
      if (rec.epoch % cfg_.eval_every == 0 || rec.epoch == cfg_.max_epochs) {
        EvalReport rep = validate(valid);
        const double metric = rep.seq_ndcg_at(cfg_.select_k);
        rec.valid_report = std::move(rep);
        stop = record_validation(metric, rec);
      }
      state_.rng_state = rng_.state();
      if (cb.on_epoch) cb.on_epoch(rec, state_);
      log.push_back(std::move(rec));
      if (stop) {
        state_.stopped_early = true;
        break;
      }
    }
    if (state_.best_params.empty())
      throw TrainingError("training finished without a finite validation metric");
    restore(model_, state_.best_params);
    return log;
  }

 private:
  Denoiser& model_;
  NoiseSchedule sched_;
  TrainConfig cfg_;
  Adam optimizer_;
  Rng rng_;
  TrainerState state_;
};

}  // namespace lpdo
