#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lpdo/errors.hpp"

namespace lpdo {

// 1-based rank of target in ranked, or 0 when absent.
inline std::size_t target_rank(int target, std::span<const int> ranked) {
  const auto it = std::find(ranked.begin(), ranked.end(), target);
  return it == ranked.end() ? 0 : static_cast<std::size_t>(it - ranked.begin()) + 1;
}

inline int position_hit(int target, std::span<const int> ranked, std::size_t K) {
  const std::size_t r = target_rank(target, ranked);
  return r != 0 && r <= K ? 1 : 0;
}

inline double position_ndcg(int target, std::span<const int> ranked, std::size_t K) {
  const std::size_t r = target_rank(target, ranked);
  if (r == 0 || r > K) return 0.0;
  return 1.0 / std::log2(static_cast<double>(r) + 1.0);
}

// 1 iff every position's target is within the first K entries of that
// position's own list.
inline int seq_match(std::span<const int> targets, const std::vector<std::vector<int>>& lists,
                     std::size_t K) {
  if (targets.size() != lists.size())
    throw ArgumentError("seq_match: " + std::to_string(targets.size()) + " targets but " +
                        std::to_string(lists.size()) + " ranked lists");
  for (std::size_t j = 0; j < targets.size(); ++j)
    if (!position_hit(targets[j], lists[j], K)) return 0;
  return 1;
}

struct EvalReport {
  std::vector<std::size_t> ks;
  std::size_t k = 0;  // trajectory length
  std::size_t n_examples = 0;
  // Indexed [K index][position].
  std::vector<std::vector<double>> per_position_hr;
  std::vector<std::vector<double>> per_position_ndcg;
  std::vector<double> mean_hr, seq_hr, mean_ndcg, seq_ndcg, seq_match;
  double ppl = std::nan("");
  double ln_ppl = std::nan("");
  // Optional run context filled by the evaluator.
  std::size_t n_steps = 0;
  double wall_clock_seconds = 0.0;

  std::size_t k_index(std::size_t K) const {
    const auto it = std::find(ks.begin(), ks.end(), K);
    if (it == ks.end()) throw ArgumentError("report has no metrics at K=" + std::to_string(K));
    return static_cast<std::size_t>(it - ks.begin());
  }
  double seq_match_at(std::size_t K) const { return seq_match[k_index(K)]; }
  double seq_ndcg_at(std::size_t K) const { return seq_ndcg[k_index(K)]; }
  double seq_hr_at(std::size_t K) const { return seq_hr[k_index(K)]; }
};

inline double arithmetic_mean(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Zero if any entry is zero.
inline double geometric_mean(std::span<const double> v) {
  double log_sum = 0.0;
  for (double x : v) {
    if (x <= 0.0) return 0.0;
    log_sum += std::log(x);
  }
  return std::exp(log_sum / static_cast<double>(v.size()));
}

// Builds the rate fields of a report from the 1-based target ranks of every
// example and position (0 = not retrieved). ranks is (N, k) row-major.
inline EvalReport aggregate(std::span<const std::size_t> ranks, std::size_t k,
                            std::vector<std::size_t> ks) {
  if (k == 0 || ranks.empty() || ranks.size() % k != 0)
    throw ArgumentError("aggregate needs at least one example with k positions");
  EvalReport rep;
  rep.ks = std::move(ks);
  rep.k = k;
  rep.n_examples = ranks.size() / k;
  const double n = static_cast<double>(rep.n_examples);
  for (std::size_t K : rep.ks) {
    std::vector<double> hr(k, 0.0), ndcg(k, 0.0);
    std::size_t matches = 0;
    for (std::size_t e = 0; e < rep.n_examples; ++e) {
      bool all = true;
      for (std::size_t j = 0; j < k; ++j) {
        const std::size_t r = ranks[e * k + j];
        if (r != 0 && r <= K) {
          hr[j] += 1.0;
          ndcg[j] += 1.0 / std::log2(static_cast<double>(r) + 1.0);
        } else {
          all = false;
        }
      }
      matches += all ? 1 : 0;
    }
    for (std::size_t j = 0; j < k; ++j) {
      hr[j] /= n;
      ndcg[j] /= n;
    }
    rep.mean_hr.push_back(arithmetic_mean(hr));
    rep.seq_hr.push_back(geometric_mean(hr));
    rep.mean_ndcg.push_back(arithmetic_mean(ndcg));
    rep.seq_ndcg.push_back(geometric_mean(ndcg));
    rep.seq_match.push_back(static_cast<double>(matches) / n);
    rep.per_position_hr.push_back(std::move(hr));
    rep.per_position_ndcg.push_back(std::move(ndcg));
  }
  return rep;
}

struct Perplexity {
  double ppl;
  double ln_ppl;
};

// scores is (N, k, M) full-vocabulary logits with column i - 1 for item i;
// targets is (N, k).
inline Perplexity perplexity(std::span<const double> scores, std::span<const int> targets,
                             std::size_t M) {
  if (M == 0 || targets.empty() || scores.size() != targets.size() * M)
    throw ShapeError("perplexity: scores must hold M logits per target");
  double nll = 0.0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const auto row = scores.subspan(r * M, M);
    double mx = -INFINITY;
    for (double s : row) {
      if (!std::isfinite(s)) throw NumericError("perplexity: non-finite score");
      mx = std::max(mx, s);
    }
    double z = 0.0;
    for (double s : row) z += std::exp(s - mx);
    const int t = targets[r];
    if (t < 1 || static_cast<std::size_t>(t) > M) throw VocabularyError("perplexity: bad target");
    nll += std::log(z) - (row[static_cast<std::size_t>(t) - 1] - mx);
  }
  const double mean = nll / static_cast<double>(targets.size());
  return {std::exp(mean), mean};
}

inline nlohmann::ordered_json report_to_json(const EvalReport& rep) {
  nlohmann::ordered_json j;
  j["n_examples"] = rep.n_examples;
  j["k"] = rep.k;
  if (rep.n_steps) j["n_steps"] = rep.n_steps;
  j["wall_clock_seconds"] = rep.wall_clock_seconds;
  j["ks"] = rep.ks;
  j["mean_hr"] = rep.mean_hr;
  j["seq_hr"] = rep.seq_hr;
  j["mean_ndcg"] = rep.mean_ndcg;
  j["seq_ndcg"] = rep.seq_ndcg;
  j["seq_match"] = rep.seq_match;
  j["per_position_hr"] = rep.per_position_hr;
  j["per_position_ndcg"] = rep.per_position_ndcg;
  j["ppl"] = rep.ppl;
  j["ln_ppl"] = rep.ln_ppl;
  return j;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport rep;
  rep.n_examples = j.at("n_examples").get<std::size_t>();
  rep.k = j.at("k").get<std::size_t>();
  rep.n_steps = j.value("n_steps", std::size_t{0});
  rep.wall_clock_seconds = j.value("wall_clock_seconds", 0.0);
  rep.ks = j.at("ks").get<std::vector<std::size_t>>();
  rep.mean_hr = j.at("mean_hr").get<std::vector<double>>();
  rep.seq_hr = j.at("seq_hr").get<std::vector<double>>();
  rep.mean_ndcg = j.at("mean_ndcg").get<std::vector<double>>();
  rep.seq_ndcg = j.at("seq_ndcg").get<std::vector<double>>();
  rep.seq_match = j.at("seq_match").get<std::vector<double>>();
  rep.per_position_hr = j.at("per_position_hr").get<std::vector<std::vector<double>>>();
  rep.per_position_ndcg = j.at("per_position_ndcg").get<std::vector<std::vector<double>>>();
  rep.ppl = j.at("ppl").is_number() ? j.at("ppl").get<double>() : std::nan("");
  rep.ln_ppl = j.at("ln_ppl").is_number() ? j.at("ln_ppl").get<double>() : std::nan("");
  return rep;
}

inline void print_report(const EvalReport& rep, std::ostream& os) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "examples=%zu  k=%zu  steps=%zu  PPL=%.4f  lnPPL=%.4f  time=%.3fs\n",
                rep.n_examples, rep.k, rep.n_steps, rep.ppl, rep.ln_ppl, rep.wall_clock_seconds);
  os << buf;
  std::snprintf(buf, sizeof buf, "%6s %9s %9s %9s %9s %9s\n", "K", "MeanHR", "SeqHR", "MeanNDCG",
                "SeqNDCG", "SeqMatch");
  os << buf;
  for (std::size_t i = 0; i < rep.ks.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%6zu %9.4f %9.4f %9.4f %9.4f %9.4f\n", rep.ks[i],
                  rep.mean_hr[i], rep.seq_hr[i], rep.mean_ndcg[i], rep.seq_ndcg[i],
                  rep.seq_match[i]);
    os << buf;
  }
}

// Position-wise HR table: one row per K, one column per trajectory slot.
inline void write_position_hr_csv(const EvalReport& rep, std::ostream& os) {
  os << "K";
  for (std::size_t j = 0; j < rep.k; ++j) os << ",pos" << (j + 1);
  os << '\n';
  for (std::size_t i = 0; i < rep.ks.size(); ++i) {
    os << rep.ks[i];
    for (double v : rep.per_position_hr[i]) os << ',' << v;
    os << '\n';
  }
}

}  // namespace lpdo
