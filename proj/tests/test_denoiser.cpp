#include <gtest/gtest.h>

#include <cmath>

#include "lpdo/denoiser.hpp"
#include "lpdo/errors.hpp"
#include "support.hpp"

using namespace lpdo;
using lpdo::test::check_gradients;
using lpdo::test::probe;
using lpdo::test::random_values;

namespace {

DenoiserConfig small_config(std::size_t M = 12, std::size_t d = 8, std::size_t blocks = 2,
                            std::size_t heads = 2, std::size_t n_max = 5, std::size_t k = 3) {
  DenoiserConfig c;
  c.vocab_size = M;
  c.embed_dim = d;
  c.n_blocks = blocks;
  c.n_heads = heads;
  c.n_max = n_max;
  c.k = k;
  c.dropout = 0.0;
  c.init_seed = 21;
  return c;
}

struct Inputs {
  Tensor x_t, history;
  std::vector<std::size_t> steps;
  std::vector<std::uint8_t> mask;
};

Inputs random_inputs(const DenoiserConfig& c, std::size_t B, std::uint64_t seed) {
  Rng rng(seed);
  Inputs in;
  in.x_t = Tensor::constant({B, c.seq_len(), c.embed_dim}, random_values(rng, B * c.seq_len() * c.embed_dim));
  in.history = Tensor::constant({B, c.n_max, c.embed_dim}, random_values(rng, B * c.n_max * c.embed_dim));
  for (std::size_t b = 0; b < B; ++b) in.steps.push_back(1 + b % 7);
  in.mask.assign(B * c.n_max, 1);
  in.mask[0] = 0;  // first example has one padded slot
  return in;
}

// Largest absolute change at positions < p when slot p of X_t is perturbed.
double leak_before(const Denoiser& model, const Inputs& in, std::size_t p) {
  const auto& c = model.config();
  const Tensor base = model.denoise(in.x_t, in.steps, in.history, in.mask);
  Tensor moved = Tensor::constant(in.x_t.shape(), std::vector<double>(in.x_t.values().begin(), in.x_t.values().end()));
  for (std::size_t b = 0; b < in.x_t.dim(0); ++b)
    for (std::size_t i = 0; i < c.embed_dim; ++i)
      moved.mutable_values()[(b * c.seq_len() + p) * c.embed_dim + i] += 3.0 * std::sin(1.0 + static_cast<double>(i));
  const Tensor out = model.denoise(moved, in.steps, in.history, in.mask);
  double worst = 0.0;
  for (std::size_t b = 0; b < in.x_t.dim(0); ++b)
    for (std::size_t l = 0; l < p; ++l)
      for (std::size_t i = 0; i < c.embed_dim; ++i) {
        const std::size_t idx = (b * c.seq_len() + l) * c.embed_dim + i;
        worst = std::max(worst, std::abs(out.values()[idx] - base.values()[idx]));
      }
  return worst;
}

}  // namespace

TEST(Denoiser, ConfigValidation) {
  auto c = small_config();
  c.n_heads = 3;
  EXPECT_THROW(Denoiser{c}, ConfigError);
  c = small_config();
  c.k = 0;
  EXPECT_THROW(Denoiser{c}, ConfigError);
  c = small_config();
  c.dropout = 1.0;
  EXPECT_THROW(Denoiser{c}, ConfigError);
}

TEST(Denoiser, TimeEmbedding) {
  const auto e0 = sinusoidal_time_embedding(0.0, 8);
  for (std::size_t i = 0; i < 8; i += 2) {
    EXPECT_EQ(e0[i], 0.0);
    EXPECT_EQ(e0[i + 1], 1.0);
  }
  EXPECT_EQ(sinusoidal_time_embedding(5.0, 16), sinusoidal_time_embedding(5.0, 16));
  for (std::size_t a = 1; a <= 50; ++a)
    for (std::size_t b = a + 1; b <= 50; ++b) {
      const auto ea = sinusoidal_time_embedding(static_cast<double>(a), 16);
      const auto eb = sinusoidal_time_embedding(static_cast<double>(b), 16);
      double diff = 0.0;
      for (std::size_t i = 0; i < 16; ++i) diff += (ea[i] - eb[i]) * (ea[i] - eb[i]);
      ASSERT_GT(diff, 0.0) << a << " vs " << b;
    }
}

TEST(Denoiser, EmbedExamplesLooksUpRows) {
  Denoiser model(small_config(12, 8, 1, 2, 3, 1));
  TrajectoryExample ex;
  ex.history = {0, 0, 0};
  ex.target = {7};
  const std::vector<TrajectoryExample> two{ex, ex};
  const std::vector<std::size_t> idx{0, 1};
  const auto batch = make_batch(two, idx);
  const auto e = model.embed(batch);
  EXPECT_EQ(e.history.shape(), (Shape{2, 3, 8}));
  EXPECT_EQ(e.target.shape(), (Shape{2, 1, 8}));
  const auto table = model.item_table().values();
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_EQ(e.target.values()[i], table[7 * 8 + i]);
    EXPECT_EQ(e.target.values()[8 + i], e.target.values()[i]);
  }
  for (double v : e.history.values()) EXPECT_EQ(v, 0.0);
  for (auto m : batch.history_mask) EXPECT_EQ(m, 0);
  ex.target = {13};
  const std::vector<TrajectoryExample> bad{ex};
  const std::vector<std::size_t> one{0};
  EXPECT_THROW(model.embed(make_batch(bad, one)), VocabularyError);
}

TEST(Denoiser, PaddingRowIsZeroAndUnscored) {
  Denoiser model(small_config());
  const auto table = model.item_table().values();
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(table[i], 0.0);
  Tensor lat = Tensor::constant({1, 1, 8}, std::vector<double>(8, 1.0));
  EXPECT_EQ(model.score(lat).shape(), (Shape{1, 1, 12}));
}

TEST(Denoiser, ScoresAreDotProducts) {
  Tensor table = Tensor::constant({4, 3}, {0, 0, 0, 1, 2, 3, -1, 0.5, 2, 0, -2, 1});
  Tensor lat = Tensor::constant({1, 1, 3}, {0.5, -1.0, 2.0});
  const Tensor scores = item_scores(lat, table);
  const auto s = scores.values();
  EXPECT_DOUBLE_EQ(s[0], 0.5 - 2.0 + 6.0);
  EXPECT_DOUBLE_EQ(s[1], -0.5 - 0.5 + 4.0);
  EXPECT_DOUBLE_EQ(s[2], 0.0 + 2.0 + 2.0);
  const Tensor zero = item_scores(Tensor::zeros({1, 2, 3}), table);
  for (double v : zero.values()) EXPECT_EQ(v, 0.0);
}

TEST(Denoiser, OrthonormalTableArgmax) {
  std::vector<double> t(7 * 6, 0.0);
  for (std::size_t i = 1; i <= 6; ++i) t[i * 6 + (i - 1)] = 1.0;
  Tensor table = Tensor::constant({7, 6}, t);
  Tensor lat = Tensor::constant({1, 1, 6}, std::vector<double>(t.begin() + 5 * 6, t.begin() + 6 * 6));
  const Tensor scores = item_scores(lat, table);
  const auto s = scores.values();
  EXPECT_EQ(std::max_element(s.begin(), s.end()) - s.begin(), 4);  // column 4 is item 5
}

TEST(Denoiser, CosineScoresAreBounded) {
  Rng rng(4);
  Tensor table = Tensor::constant({6, 4}, random_values(rng, 24, 5.0));
  Tensor lat = Tensor::constant({2, 2, 4}, random_values(rng, 16, 5.0));
  const Tensor scores = cosine_item_scores(lat, table);
  for (double v : scores.values()) {
    EXPECT_LE(v, 1.0 + 1e-12);
    EXPECT_GE(v, -1.0 - 1e-12);
  }
}

TEST(Denoiser, ShapeContract) {
  for (auto mode : {MaskMode::causal, MaskMode::prefix, MaskMode::bidirectional}) {
    auto c = small_config();
    c.mask_mode = mode;
    Denoiser model(c);
    const auto in = random_inputs(c, 3, 5);
    EXPECT_EQ(model.denoise(in.x_t, in.steps, in.history, in.mask).shape(), in.x_t.shape());
  }
}

TEST(Denoiser, DeterministicInEvaluationMode) {
  auto c = small_config();
  c.dropout = 0.3;
  Denoiser model(c);
  const auto in = random_inputs(c, 2, 6);
  const auto a = model.denoise(in.x_t, in.steps, in.history, in.mask);
  const auto b = model.denoise(in.x_t, in.steps, in.history, in.mask);
  EXPECT_TRUE(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
  Rng r1(1), r2(1);
  const auto d1 = model.denoise(in.x_t, in.steps, in.history, in.mask, &r1);
  const auto d2 = model.denoise(in.x_t, in.steps, in.history, in.mask, &r2);
  EXPECT_TRUE(std::equal(d1.values().begin(), d1.values().end(), d2.values().begin()));
  EXPECT_FALSE(std::equal(d1.values().begin(), d1.values().end(), a.values().begin()));
}

TEST(Denoiser, CausalMaskBlocksFutureForEveryDepth) {
  for (std::size_t blocks : {1u, 2u, 3u})
    for (std::size_t heads : {1u, 2u, 4u}) {
      auto c = small_config(10, 8, blocks, heads);
      Denoiser model(c);
      const auto in = random_inputs(c, 2, 7 + blocks);
      for (std::size_t p = 1; p < c.seq_len(); ++p) EXPECT_LT(leak_before(model, in, p), 1e-12);
    }
}

TEST(Denoiser, BidirectionalAndPrefixMasksLeak) {
  auto c = small_config();
  c.mask_mode = MaskMode::bidirectional;
  const auto in = random_inputs(c, 2, 8);
  EXPECT_GT(leak_before(Denoiser(c), in, c.seq_len() - 1), 1e-6);
  c.mask_mode = MaskMode::prefix;
  Denoiser prefix(c);
  // History slots see each other in both directions; trajectory slots are causal.
  EXPECT_GT(leak_before(prefix, in, c.n_max - 1), 1e-6);
  for (std::size_t p = c.n_max; p < c.seq_len(); ++p) EXPECT_LT(leak_before(prefix, in, p), 1e-12);
}

TEST(Denoiser, PaddedHistoryIsInvisible) {
  auto c = small_config();
  c.mask_mode = MaskMode::bidirectional;
  Denoiser model(c);
  auto in = random_inputs(c, 1, 9);
  // Slot 0 of the only example is padding: changing its noised latent or
  // its clean embedding must not affect any other slot.
  const auto base = model.denoise(in.x_t, in.steps, in.history, in.mask);
  auto xv = std::vector<double>(in.x_t.values().begin(), in.x_t.values().end());
  auto hv = std::vector<double>(in.history.values().begin(), in.history.values().end());
  for (std::size_t i = 0; i < c.embed_dim; ++i) {
    xv[i] += 4.0;
    hv[i] -= 4.0;
  }
  const auto moved = model.denoise(Tensor::constant(in.x_t.shape(), xv), in.steps,
                                   Tensor::constant(in.history.shape(), hv), in.mask);
  for (std::size_t i = c.embed_dim; i < base.size(); ++i) EXPECT_NEAR(moved.values()[i], base.values()[i], 1e-12);
}

TEST(Denoiser, RejectsNonFiniteInput) {
  auto c = small_config();
  Denoiser model(c);
  auto in = random_inputs(c, 1, 10);
  in.x_t.mutable_values()[3] = std::nan("");
  EXPECT_THROW(model.denoise(in.x_t, in.steps, in.history, in.mask), NumericError);
}

TEST(Denoiser, GradientThroughDenoiseAndScore) {
  auto c = small_config(6, 8, 2, 2, 3, 2);
  Denoiser model(c);
  const auto in = random_inputs(c, 2, 11);
  auto f = [&] {
    Tensor traj = model.trajectory_slots(model.denoise(in.x_t, in.steps, in.history, in.mask));
    return probe(model.score(traj));
  };
  std::vector<Tensor> wrt;
  for (auto& [name, t] : model.parameters()) wrt.push_back(t);
  const auto r = check_gradients(f, wrt, 1e-5, 24);
  EXPECT_LT(r.worst, 1e-3);
  EXPECT_GT(r.checked, 100u);
}
