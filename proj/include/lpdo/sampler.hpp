#pragma once

#include <algorithm>
#include <chrono>
#include <numeric>
#include <ostream>
#include <span>
#include <vector>

#include "json.hpp"
#include "lpdo/dataset.hpp"
#include "lpdo/denoiser.hpp"
#include "lpdo/metrics.hpp"
#include "lpdo/random.hpp"
#include "lpdo/schedule.hpp"

namespace lpdo {

struct SamplerOptions {
  std::size_t n_steps = 1;
  std::size_t topk = 10;
  // Drop items already predicted at earlier positions from later lists.
  bool exclude_previous = false;
  std::uint64_t seed = 0;
  std::size_t batch_size = 256;
};

// Runs the reverse process for one batch and returns the final clean
// estimate (B, n_max + k, d). `denoise_fn(x_t, steps, clean_history, mask)`
// produces x0_hat. History slots are held at the clean history embeddings;
// trajectory slots start from standard Gaussian noise drawn from
// per-example streams in `rngs`. Exactly n_steps denoiser calls are made.
template <typename DenoiseFn>
Tensor reverse_process(DenoiseFn&& denoise_fn, const Tensor& clean_history,
                       std::span<const std::uint8_t> history_mask, std::size_t k,
                       const NoiseSchedule& sched, std::size_t n_steps, std::span<Rng> rngs) {
  NoGradGuard no_grad;
  const std::size_t B = clean_history.dim(0), n_max = clean_history.dim(1),
                    d = clean_history.dim(2), L = n_max + k;
  if (rngs.size() != B) throw ArgumentError("reverse_process: one random stream per example");
  const auto hist = clean_history.values();
  std::vector<double> x(B * L * d);
  auto restore_history = [&] {
    for (std::size_t b = 0; b < B; ++b)
      std::copy_n(hist.begin() + static_cast<long>(b * n_max * d), n_max * d,
                  x.begin() + static_cast<long>(b * L * d));
  };
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < k * d; ++i) x[(b * L + n_max) * d + i] = rngs[b].normal();
  restore_history();

  const auto steps = inference_steps(sched, n_steps);
  Tensor x0_hat;
  for (std::size_t s = 0; s < steps.size(); ++s) {
    const std::size_t t = steps[s];
    const std::vector<std::size_t> batch_steps(B, t);
    x0_hat = denoise_fn(Tensor::constant({B, L, d}, x), std::span<const std::size_t>(batch_steps),
                        clean_history, history_mask);
    if (x0_hat.shape() != Shape{B, L, d})
      throw ShapeError("reverse_process: denoiser returned " + shape_string(x0_hat.shape()));
    const std::size_t to = s + 1 < steps.size() ? steps[s + 1] : 0;
    std::vector<double> noise(x.size(), 0.0);
    if (to > 0)
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < L * d; ++i) noise[b * L * d + i] = rngs[b].normal();
    x = posterior_step(x, x0_hat.values(), t, sched, noise, to);
    restore_history();
  }
  return x0_hat;
}

// Descending-score order of the item ids 1..M (ties by smaller id),
// truncated to K, skipping ids flagged in `skip` (indexed by id).
inline std::vector<int> top_k_items(std::span<const double> scores, std::size_t K,
                                    std::span<const std::uint8_t> skip = {}) {
  const std::size_t M = scores.size();
  if (K > M) throw ConfigError("top-K of " + std::to_string(K) + " exceeds vocabulary " +
                               std::to_string(M));
  std::vector<int> ids;
  ids.reserve(M);
  for (std::size_t i = 1; i <= M; ++i)
    if (skip.empty() || !skip[i]) ids.push_back(static_cast<int>(i));
  const std::size_t take = std::min(K, ids.size());
  std::partial_sort(ids.begin(), ids.begin() + static_cast<long>(take), ids.end(),
                    [&](int a, int b) {
                      const double sa = scores[static_cast<std::size_t>(a) - 1];
                      const double sb = scores[static_cast<std::size_t>(b) - 1];
                      return sa != sb ? sa > sb : a < b;
                    });
  ids.resize(take);
  return ids;
}

struct RankedTrajectory {
  std::vector<std::vector<int>> items;      // (k, K)
  std::vector<std::vector<double>> scores;  // (k, K)
};

inline RankedTrajectory rank_trajectory(std::span<const double> scores, std::size_t k,
                                        std::size_t M, std::size_t K, bool exclude_previous) {
  RankedTrajectory out;
  std::vector<std::uint8_t> skip(M + 1, 0);
  for (std::size_t j = 0; j < k; ++j) {
    const auto row = scores.subspan(j * M, M);
    auto ids = top_k_items(row, K, exclude_previous ? std::span<const std::uint8_t>(skip)
                                                    : std::span<const std::uint8_t>());
    std::vector<double> vals;
    for (int id : ids) vals.push_back(row[static_cast<std::size_t>(id) - 1]);
    if (exclude_previous)
      for (int id : ids) skip[static_cast<std::size_t>(id)] = 1;
    out.items.push_back(std::move(ids));
    out.scores.push_back(std::move(vals));
  }
  return out;
}

// Full-vocabulary scores (B, k, M) for a batch after n_steps of reverse
// diffusion. Example e of the batch draws noise from derive_seed(seed, ids[e])
// so results do not depend on how examples are grouped into batches.
inline Tensor sample_scores(const Denoiser& model, const NoiseSchedule& sched, const Batch& batch,
                            std::size_t n_steps, std::uint64_t seed,
                            std::span<const std::size_t> stream_ids = {}) {
  NoGradGuard no_grad;
  const std::size_t B = batch.size();
  std::vector<Rng> rngs;
  rngs.reserve(B);
  for (std::size_t b = 0; b < B; ++b)
    rngs.emplace_back(derive_seed(seed, stream_ids.empty() ? batch.indices[b] : stream_ids[b]));
  const auto embedded = model.embed(batch);
  auto fn = [&](const Tensor& x, std::span<const std::size_t> steps, const Tensor& hist,
                std::span<const std::uint8_t> mask) {
    return model.denoise(x, steps, hist, mask, nullptr);
  };
  Tensor x0 = reverse_process(fn, embedded.history, batch.history_mask, model.config().k, sched,
                              n_steps, rngs);
  return model.score(model.trajectory_slots(x0));
}

// Ranked lists for a single user history (left-padded to n_max).
inline RankedTrajectory sample_trajectory(const Denoiser& model, const NoiseSchedule& sched,
                                          std::span<const int> history,
                                          const SamplerOptions& opts) {
  const auto& cfg = model.config();
  if (opts.topk > cfg.vocab_size)
    throw ConfigError("top-K of " + std::to_string(opts.topk) + " exceeds vocabulary " +
                      std::to_string(cfg.vocab_size));
  TrajectoryExample ex;
  ex.history = left_pad(history, cfg.n_max);
  ex.target.assign(cfg.k, 1);
  const std::vector<TrajectoryExample> one{ex};
  const std::size_t idx = 0;
  const Batch batch = make_batch(one, std::span<const std::size_t>(&idx, 1));
  const Tensor scores = sample_scores(model, sched, batch, opts.n_steps, opts.seed);
  return rank_trajectory(scores.values(), cfg.k, cfg.vocab_size, opts.topk, opts.exclude_previous);
}

struct PredictionRecord {
  std::string user;
  std::vector<int> target;
  RankedTrajectory ranked;
  double seconds = 0.0;  // share of the batch wall-clock
};

struct PredictionRun {
  std::vector<PredictionRecord> records;
  std::vector<double> scores;  // (N, k, M), kept for perplexity
  double wall_clock_seconds = 0.0;
  std::size_t k = 0, M = 0;
};

inline PredictionRun batch_predict(const Denoiser& model, const NoiseSchedule& sched,
                                   std::span<const TrajectoryExample> examples,
                                   const SamplerOptions& opts, bool keep_scores = true) {
  const auto& cfg = model.config();
  if (opts.topk > cfg.vocab_size)
    throw ConfigError("top-K of " + std::to_string(opts.topk) + " exceeds vocabulary " +
                      std::to_string(cfg.vocab_size));
  PredictionRun run;
  run.k = cfg.k;
  run.M = cfg.vocab_size;
  BatchIterator it(examples, std::max<std::size_t>(1, opts.batch_size), false, 0);
  while (auto batch = it.next()) {
    const auto start = std::chrono::steady_clock::now();
    const Tensor scores = sample_scores(model, sched, *batch, opts.n_steps, opts.seed);
    std::vector<PredictionRecord> recs;
    for (std::size_t b = 0; b < batch->size(); ++b) {
      const auto& ex = examples[batch->indices[b]];
      const auto row = scores.values().subspan(b * cfg.k * cfg.vocab_size, cfg.k * cfg.vocab_size);
      recs.push_back({ex.user, ex.target,
                      rank_trajectory(row, cfg.k, cfg.vocab_size, opts.topk, opts.exclude_previous),
                      0.0});
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    run.wall_clock_seconds += secs;
    for (auto& r : recs) {
      r.seconds = secs / static_cast<double>(recs.size());
      run.records.push_back(std::move(r));
    }
    if (keep_scores) run.scores.insert(run.scores.end(), scores.values().begin(), scores.values().end());
  }
  return run;
}

// Line-delimited prediction file: one record per (example, position).
inline void write_predictions(const PredictionRun& run, std::ostream& os) {
  for (const auto& rec : run.records) {
    for (std::size_t j = 0; j < rec.ranked.items.size(); ++j) {
      nlohmann::ordered_json line;
      line["user_id"] = rec.user;
      line["position"] = j + 1;
      line["items"] = rec.ranked.items[j];
      line["scores"] = rec.ranked.scores[j];
      if (j < rec.target.size()) line["target"] = rec.target[j];
      line["seconds"] = rec.seconds;
      os << line.dump() << '\n';
    }
  }
}

// Samples every example once and scores the predictions at each K.
inline EvalReport evaluate(const Denoiser& model, const NoiseSchedule& sched,
                           std::span<const TrajectoryExample> examples, std::size_t n_steps,
                           std::vector<std::size_t> ks, std::uint64_t seed,
                           std::size_t batch_size = 256) {
  if (examples.empty()) throw ArgumentError("evaluate: no examples");
  if (ks.empty()) throw ArgumentError("evaluate: no K values");
  SamplerOptions opts;
  opts.n_steps = n_steps;
  opts.topk = *std::max_element(ks.begin(), ks.end());
  opts.seed = seed;
  opts.batch_size = batch_size;
  const auto run = batch_predict(model, sched, examples, opts, true);
  std::vector<std::size_t> ranks;
  std::vector<int> targets;
  for (const auto& rec : run.records) {
    for (std::size_t j = 0; j < run.k; ++j) {
      ranks.push_back(target_rank(rec.target[j], rec.ranked.items[j]));
      targets.push_back(rec.target[j]);
    }
  }
  EvalReport rep = aggregate(ranks, run.k, std::move(ks));
  const auto p = perplexity(run.scores, targets, run.M);
  rep.ppl = p.ppl;
  rep.ln_ppl = p.ln_ppl;
  rep.n_steps = n_steps;
  rep.wall_clock_seconds = run.wall_clock_seconds;
  return rep;
}

}  // namespace lpdo
