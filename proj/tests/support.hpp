#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "lpdo/dataset.hpp"
#include "lpdo/random.hpp"
#include "lpdo/synthetic.hpp"
#include "lpdo/tensor.hpp"

namespace lpdo::test {

// |a - n| / max(|a|, |n|, floor). The floor keeps near-zero entries from
// turning rounding noise into huge ratios.
inline double relative_error(double analytic, double numeric, double floor = 1e-4) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

struct GradCheck {
  double worst = 0.0;
  std::size_t checked = 0;
};

// Compares the tape gradient of f() w.r.t. every entry of each tensor in
// `wrt` (at most `max_entries` per tensor, spread evenly) with a central
// difference of step h.
inline GradCheck check_gradients(const std::function<Tensor()>& f, std::vector<Tensor> wrt,
                                 double h = 1e-5, std::size_t max_entries = 64) {
  for (auto& t : wrt) t.zero_grad();
  Tensor out = f();
  out.backward();
  std::vector<std::vector<double>> analytic;
  for (auto& t : wrt) analytic.emplace_back(t.grad().begin(), t.grad().end());

  GradCheck res;
  NoGradGuard no_grad;
  for (std::size_t p = 0; p < wrt.size(); ++p) {
    auto values = wrt[p].mutable_values();
    const std::size_t stride = std::max<std::size_t>(1, values.size() / max_entries);
    for (std::size_t i = 0; i < values.size(); i += stride) {
      const double orig = values[i];
      values[i] = orig + h;
      const double up = f().item();
      values[i] = orig - h;
      const double down = f().item();
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      res.worst = std::max(res.worst, relative_error(analytic[p][i], numeric));
      ++res.checked;
    }
  }
  return res;
}

// Sum of all entries weighted by fixed pseudo-random coefficients, so that
// every entry of x reaches the scalar with a distinct factor.
inline Tensor probe(const Tensor& x, std::uint64_t seed = 99) {
  Rng rng(seed);
  auto w = rng.normal_vector(x.size());
  const auto xv = x.values();
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) total += w[i] * xv[i];
  return Tensor::make({1}, {total}, {x}, [w](Node& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < w.size(); ++i) g[i] += n.grad[0] * w[i];
  });
}

inline Tensor random_parameter(Rng& rng, Shape shape, double scale = 1.0) {
  auto v = rng.normal_vector(numel(shape));
  for (auto& x : v) x *= scale;
  return Tensor::parameter(std::move(shape), std::move(v));
}

inline std::vector<double> random_values(Rng& rng, std::size_t n, double scale = 1.0) {
  auto v = rng.normal_vector(n);
  for (auto& x : v) x *= scale;
  return v;
}

inline InteractionCorpus corpus_from(const std::string& text, const LoadOptions& opts = {}) {
  std::istringstream in(text);
  return parse_interactions(in, opts);
}

// "u<user>\t<item>\t<ts>" rows for one user with the given raw item names.
inline std::string user_rows(const std::string& user, const std::vector<std::string>& items,
                             long start_ts = 100) {
  std::ostringstream os;
  for (std::size_t i = 0; i < items.size(); ++i)
    os << user << '\t' << items[i] << '\t' << start_ts + static_cast<long>(i) << '\n';
  return os.str();
}

inline std::vector<TrajectoryExample> motif_examples(const MotifCorpusSpec& spec, std::size_t k,
                                                     std::size_t n_max,
                                                     InteractionCorpus* corpus_out = nullptr) {
  std::ostringstream os;
  write_motif_corpus(spec, os);
  auto corpus = corpus_from(os.str());
  auto ex = filter_and_split(corpus, k, n_max);
  if (corpus_out) *corpus_out = std::move(corpus);
  return ex;
}

}  // namespace lpdo::test
