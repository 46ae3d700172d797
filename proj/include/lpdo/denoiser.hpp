#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lpdo/dataset.hpp"
#include "lpdo/errors.hpp"
#include "lpdo/random.hpp"
#include "lpdo/tensor.hpp"

namespace lpdo {

enum class MaskMode { causal, prefix, bidirectional };

inline const char* mask_mode_name(MaskMode m) {
  switch (m) {
    case MaskMode::causal: return "causal";
    case MaskMode::prefix: return "prefix";
    case MaskMode::bidirectional: return "bidirectional";
  }
  return "?";
}

inline MaskMode parse_mask_mode(const std::string& s) {
  if (s == "causal") return MaskMode::causal;
  if (s == "prefix") return MaskMode::prefix;
  if (s == "bidirectional") return MaskMode::bidirectional;
  throw ConfigError("unknown mask mode '" + s + "'");
}

struct DenoiserConfig {
  std::size_t vocab_size = 0;  // M; the table holds M + 1 rows
  std::size_t embed_dim = 128;
  std::size_t n_blocks = 4;
  std::size_t n_heads = 4;
  std::size_t ffn_mult = 4;
  double dropout = 0.1;
  MaskMode mask_mode = MaskMode::causal;
  std::size_t n_max = 50;
  std::size_t k = 1;
  bool cosine_scores = false;
  std::uint64_t init_seed = 0;

  std::size_t seq_len() const { return n_max + k; }

  void validate() const {
    if (vocab_size < 1) throw ConfigError("vocabulary must contain at least one item");
    if (embed_dim < 1 || n_blocks < 1 || n_heads < 1 || ffn_mult < 1)
      throw ConfigError("model dimensions must be positive");
    if (embed_dim % n_heads != 0)
      throw ConfigError("embed_dim " + std::to_string(embed_dim) + " not divisible by n_heads " +
                        std::to_string(n_heads));
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    if (k < 1) throw ConfigError("k must be >= 1");
    if (n_max < 1) throw ConfigError("n_max must be >= 1");
  }
};

// Transformer sinusoid: component 2i is sin(t / 10000^(2i/d)), 2i+1 the
// matching cos.
inline std::vector<double> sinusoidal_time_embedding(double t, std::size_t d) {
  std::vector<double> out(d);
  for (std::size_t i = 0; i < d; i += 2) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
    out[i] = std::sin(t * freq);
    if (i + 1 < d) out[i + 1] = std::cos(t * freq);
  }
  return out;
}

// Self-attention visibility over the concatenated [history | trajectory]
// sequence. A position may always see itself so fully padded prefixes stay
// well defined; padded history keys are hidden from every other query.
inline std::vector<std::uint8_t> self_attention_mask(MaskMode mode, std::size_t n_max,
                                                     std::size_t k,
                                                     std::span<const std::uint8_t> history_mask) {
  const std::size_t L = n_max + k;
  const std::size_t B = history_mask.size() / n_max;
  std::vector<std::uint8_t> mask(B * L * L, 0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t q = 0; q < L; ++q) {
      for (std::size_t key = 0; key < L; ++key) {
        bool visible = false;
        switch (mode) {
          case MaskMode::causal: visible = key <= q; break;
          case MaskMode::bidirectional: visible = true; break;
          case MaskMode::prefix: visible = q < n_max ? key < n_max : key <= q; break;
        }
        if (key < n_max && !history_mask[b * n_max + key]) visible = false;
        if (key == q) visible = true;
        mask[(b * L + q) * L + key] = visible ? 1 : 0;
      }
    }
  }
  return mask;
}

inline std::vector<std::uint8_t> cross_attention_mask(std::size_t seq_len, std::size_t n_max,
                                                      std::span<const std::uint8_t> history_mask) {
  const std::size_t B = history_mask.size() / n_max;
  std::vector<std::uint8_t> mask(B * seq_len * n_max);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t q = 0; q < seq_len; ++q)
      for (std::size_t m = 0; m < n_max; ++m)
        mask[(b * seq_len + q) * n_max + m] = history_mask[b * n_max + m];
  return mask;
}

// Inner products of each trajectory latent with every non-padding item row:
// latents (B, k, d), table (M + 1, d) -> scores (B, k, M) where column i - 1
// belongs to item i.
inline Tensor item_scores(const Tensor& latents, const Tensor& table) {
  if (latents.rank() != 3 || table.rank() != 2 || latents.dim(2) != table.dim(1))
    throw ShapeError("item_scores: latents " + shape_string(latents.shape()) + " table " +
                     shape_string(table.shape()));
  const std::size_t rows = latents.dim(0) * latents.dim(1), d = table.dim(1);
  const std::size_t M = table.dim(0) - 1;
  const auto lv = latents.values(), tv = table.values();
  std::vector<double> out(rows * M);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = lv.data() + r * d;
    for (std::size_t i = 0; i < M; ++i) {
      const double* e = tv.data() + (i + 1) * d;
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += x[c] * e[c];
      out[r * M + i] = s;
    }
  }
  const bool gl = latents.requires_grad(), gt = table.requires_grad();
  return Tensor::make({latents.dim(0), latents.dim(1), M}, std::move(out), {latents, table},
                      [=](Node& n) {
    const auto& lv = n.parents[0]->value;
    const auto& tv = n.parents[1]->value;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = n.grad.data() + r * M;
      if (gl) {
        double* dx = n.parents[0]->ensure_grad().data() + r * d;
        for (std::size_t i = 0; i < M; ++i) {
          if (g[i] == 0.0) continue;
          const double* e = tv.data() + (i + 1) * d;
          for (std::size_t c = 0; c < d; ++c) dx[c] += g[i] * e[c];
        }
      }
      if (gt) {
        auto& dt = n.parents[1]->ensure_grad();
        const double* x = lv.data() + r * d;
        for (std::size_t i = 0; i < M; ++i) {
          if (g[i] == 0.0) continue;
          double* de = dt.data() + (i + 1) * d;
          for (std::size_t c = 0; c < d; ++c) de[c] += g[i] * x[c];
        }
      }
    }
  });
}

// Scales every row of the last axis to unit L2 norm.
inline Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12) {
  const std::size_t d = x.shape().back(), rows = x.size() / d;
  std::vector<double> out(x.size()), norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += x[r * d + c] * x[r * d + c];
    norms[r] = std::sqrt(s) + eps;
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = x[r * d + c] / norms[r];
  }
  auto y = out;
  return Tensor::make(x.shape(), std::move(out), {x},
                      [=, y = std::move(y), norms = std::move(norms)](Node& n) {
    auto& pg = n.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += y[r * d + c] * n.grad[r * d + c];
      for (std::size_t c = 0; c < d; ++c)
        pg[r * d + c] += (n.grad[r * d + c] - y[r * d + c] * dot) / norms[r];
    }
  });
}

// Cosine-similarity variant of item_scores. The padding row is left as is.
inline Tensor cosine_item_scores(const Tensor& latents, const Tensor& table) {
  return item_scores(l2_normalize_rows(latents), l2_normalize_rows(table));
}

struct HistoryAndTarget {
  Tensor history;  // (B, n_max, d)
  Tensor target;   // (B, k, d)
};

inline HistoryAndTarget embed_examples(const Batch& batch, const Tensor& table) {
  const std::size_t B = batch.size();
  return {embedding(table, batch.histories, {B, batch.n_max}),
          embedding(table, batch.targets, {B, batch.k})};
}

// The denoiser f_theta: a pre-norm transformer over the concatenated
// [history | trajectory] latent with masked self-attention, cross-attention
// into the clean history embeddings, and a position-wise feed-forward layer
// per block. It predicts the clean latent X_0 directly.
class Denoiser {
 public:
  explicit Denoiser(DenoiserConfig config) : config_(std::move(config)) {
    config_.validate();
    Rng rng(config_.init_seed);
    const std::size_t d = config_.embed_dim, M = config_.vocab_size;
    const std::size_t hidden = d * config_.ffn_mult;

    std::vector<double> table = gaussian(rng, (M + 1) * d, 1.0 / std::sqrt(static_cast<double>(d)));
    std::fill_n(table.begin(), d, 0.0);
    item_table_ = add_param("item_table", {M + 1, d}, std::move(table));
    position_ = add_param("position", {config_.seq_len(), d}, gaussian(rng, config_.seq_len() * d, 0.1));
    memory_position_ = add_param("memory_position", {config_.n_max, d},
                                 gaussian(rng, config_.n_max * d, 0.1));
    time_proj_ = make_linear(rng, "time_proj", d, d);
    for (std::size_t i = 0; i < config_.n_blocks; ++i) {
      const std::string p = "block" + std::to_string(i) + ".";
      Block blk;
      blk.norm_self = make_norm(p + "norm_self", d);
      blk.q = make_linear(rng, p + "self_q", d, d);
      blk.k = make_linear(rng, p + "self_k", d, d);
      blk.v = make_linear(rng, p + "self_v", d, d);
      blk.o = make_linear(rng, p + "self_o", d, d);
      blk.norm_cross = make_norm(p + "norm_cross", d);
      blk.cq = make_linear(rng, p + "cross_q", d, d);
      blk.ck = make_linear(rng, p + "cross_k", d, d);
      blk.cv = make_linear(rng, p + "cross_v", d, d);
      blk.co = make_linear(rng, p + "cross_o", d, d);
      blk.norm_ffn = make_norm(p + "norm_ffn", d);
      blk.ffn_in = make_linear(rng, p + "ffn_in", d, hidden);
      blk.ffn_out = make_linear(rng, p + "ffn_out", hidden, d);
      blocks_.push_back(std::move(blk));
    }
    final_norm_ = make_norm("final_norm", d);
    output_ = make_linear(rng, "output", d, d);
  }

  const DenoiserConfig& config() const { return config_; }
  const Tensor& item_table() const { return item_table_; }

  std::vector<std::pair<std::string, Tensor>>& parameters() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  HistoryAndTarget embed(const Batch& batch) const { return embed_examples(batch, item_table_); }

  // x_t: (B, n_max + k, d); steps: one diffusion step per example;
  // clean_history: (B, n_max, d); history_mask: (B, n_max).
  // Pass a dropout source to run in training mode, nullptr for evaluation.
  Tensor denoise(const Tensor& x_t, std::span<const std::size_t> steps, const Tensor& clean_history,
                 std::span<const std::uint8_t> history_mask, Rng* dropout_rng = nullptr) const {
    const std::size_t d = config_.embed_dim, L = config_.seq_len(), n_max = config_.n_max;
    if (x_t.rank() != 3 || x_t.dim(1) != L || x_t.dim(2) != d)
      throw ShapeError("denoise: expected (B, " + std::to_string(L) + ", " + std::to_string(d) +
                       ") latent, got " + shape_string(x_t.shape()));
    const std::size_t B = x_t.dim(0);
    if (steps.size() != B || clean_history.shape() != Shape{B, n_max, d} ||
        history_mask.size() != B * n_max)
      throw ShapeError("denoise: steps, history or mask do not match batch of " + std::to_string(B));
    if (!all_finite(x_t.values()))
      throw NumericError("denoise: non-finite value in noised latent");
    if (!all_finite(clean_history.values()))
      throw NumericError("denoise: non-finite value in history latent");

    std::vector<double> temb(B * d);
    for (std::size_t b = 0; b < B; ++b) {
      const auto e = sinusoidal_time_embedding(static_cast<double>(steps[b]), d);
      std::copy(e.begin(), e.end(), temb.begin() + static_cast<long>(b * d));
    }
    Tensor time = time_proj_(Tensor::constant({B, d}, std::move(temb)));
    Tensor h = add_per_sequence(add_broadcast(x_t, position_), time);
    Tensor memory = add_broadcast(clean_history, memory_position_);

    const auto self_mask = self_attention_mask(config_.mask_mode, n_max, config_.k, history_mask);
    const auto cross_mask = cross_attention_mask(L, n_max, history_mask);
    const double p = dropout_rng ? config_.dropout : 0.0;
    auto drop = [&](const Tensor& t) { return p > 0.0 ? dropout(t, p, *dropout_rng) : t; };

    for (const auto& blk : blocks_) {
      Tensor a = blk.norm_self(h);
      Tensor sa = multi_head_attention(blk.q(a), blk.k(a), blk.v(a), config_.n_heads, self_mask);
      h = add(h, drop(blk.o(sa)));
      Tensor c = blk.norm_cross(h);
      Tensor ca = multi_head_attention(blk.cq(c), blk.ck(memory), blk.cv(memory), config_.n_heads,
                                       cross_mask);
      h = add(h, drop(blk.co(ca)));
      Tensor f = blk.norm_ffn(h);
      h = add(h, drop(blk.ffn_out(gelu(blk.ffn_in(f)))));
    }
    return output_(final_norm_(h));
  }

  // (B, k, M) scores from the trajectory slots of a denoised latent.
  Tensor score(const Tensor& trajectory_latents) const {
    return config_.cosine_scores ? cosine_item_scores(trajectory_latents, item_table_)
                                 : item_scores(trajectory_latents, item_table_);
  }

  Tensor trajectory_slots(const Tensor& latent) const {
    return slice_seq(latent, config_.n_max, config_.k);
  }

 private:
  struct LinearLayer {
    Tensor w, b;
    Tensor operator()(const Tensor& x) const { return linear(x, w, b); }
  };
  struct NormLayer {
    Tensor gamma, beta;
    Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }
  };
  struct Block {
    NormLayer norm_self, norm_cross, norm_ffn;
    LinearLayer q, k, v, o, cq, ck, cv, co, ffn_in, ffn_out;
  };

  static std::vector<double> gaussian(Rng& rng, std::size_t n, double stddev) {
    std::vector<double> v(n);
    for (auto& x : v) x = stddev * rng.normal();
    return v;
  }

  Tensor add_param(std::string name, Shape shape, std::vector<double> values) {
    Tensor t = Tensor::parameter(std::move(shape), std::move(values));
    params_.emplace_back(std::move(name), t);
    return t;
  }

  LinearLayer make_linear(Rng& rng, const std::string& name, std::size_t in, std::size_t out) {
    return {add_param(name + ".weight", {in, out},
                      gaussian(rng, in * out, 1.0 / std::sqrt(static_cast<double>(in)))),
            add_param(name + ".bias", {out}, std::vector<double>(out, 0.0))};
  }

  NormLayer make_norm(const std::string& name, std::size_t d) {
    return {add_param(name + ".gamma", {d}, std::vector<double>(d, 1.0)),
            add_param(name + ".beta", {d}, std::vector<double>(d, 0.0))};
  }

  DenoiserConfig config_;
  std::vector<std::pair<std::string, Tensor>> params_;
  Tensor item_table_, position_, memory_position_;
  LinearLayer time_proj_;
  std::vector<Block> blocks_;
  NormLayer final_norm_;
  LinearLayer output_;
};

}  // namespace lpdo
