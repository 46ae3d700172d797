#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "lpdo/errors.hpp"
#include "lpdo/losses.hpp"
#include "support.hpp"

using namespace lpdo;
using lpdo::test::check_gradients;
using lpdo::test::random_parameter;
using lpdo::test::random_values;

namespace {

double cross_entropy(std::span<const double> s, std::size_t target) {
  double z = 0.0;
  for (double v : s) z += std::exp(v);
  return std::log(z) - s[target];
}

// Direct transcription of the softened Plackett-Luce objective without any
// stabilisation: per position, the denominator blends the sum over items
// not yet used by earlier targets with the full sum.
double list_pref_oracle(const std::vector<double>& s, const std::vector<int>& targets, std::size_t B,
                        std::size_t k, std::size_t M, double gamma) {
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    std::set<int> used;
    for (std::size_t j = 0; j < k; ++j) {
      const double* row = s.data() + (b * k + j) * M;
      const int t = targets[b * k + j];
      double z_all = 0.0, z_rest = 0.0;
      for (std::size_t i = 0; i < M; ++i) {
        z_all += std::exp(row[i]);
        if (!used.count(static_cast<int>(i) + 1) || static_cast<int>(i) + 1 == t) z_rest += std::exp(row[i]);
      }
      total += -std::log(std::exp(row[t - 1]) / ((1 - gamma) * z_rest + gamma * z_all));
      used.insert(t);
    }
  }
  return total / static_cast<double>(B);
}

}  // namespace

TEST(Losses, SimpleLossExamples) {
  Tensor a = Tensor::constant({1, 1}, {1.0}), z = Tensor::constant({1, 1}, {0.0});
  EXPECT_DOUBLE_EQ(simple_loss(a, z).item(), 1.0);
  Tensor x = Tensor::constant({2, 2}, {1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(simple_loss(x, x).item(), 0.0);
  Tensor y = Tensor::constant({2, 2}, {0.5, 2.0, 1.0, 7.0});
  EXPECT_DOUBLE_EQ(simple_loss(x, y).item(), (0.25 + 0.0 + 4.0 + 9.0) / 4.0);
}

TEST(Losses, SimpleLossMask) {
  Tensor x = Tensor::constant({2, 2}, {1.0, 2.0, 3.0, 4.0});
  Tensor y = Tensor::constant({2, 2}, {0.0, 0.0, 0.0, 0.0});
  const std::vector<std::uint8_t> first{1, 0}, none{0, 0};
  EXPECT_DOUBLE_EQ(simple_loss(x, y, first).item(), (1.0 + 4.0) / 2.0);
  EXPECT_THROW(simple_loss(x, y, none), ArgumentError);
  EXPECT_THROW(simple_loss(x, Tensor::zeros({1, 2})), ShapeError);
}

TEST(Losses, RegLossExamples) {
  EXPECT_DOUBLE_EQ(reg_loss(Tensor::zeros({3, 4})).item(), 0.0);
  EXPECT_DOUBLE_EQ(reg_loss(Tensor::constant({1, 4}, {1.0, 0.0, 0.0, 0.0})).item(), 0.25);
  EXPECT_DOUBLE_EQ(reg_loss(Tensor::constant({2, 2}, {1.0, 0.0, 0.0, 1.0})).item(), 0.5);
}

TEST(Losses, SoftListMleHandValues) {
  const std::vector<double> s{1.0, 0.0};
  const std::vector<std::size_t> pi{0, 1};
  const double rank1 = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  EXPECT_NEAR(soft_listmle(s, pi, 0.0), rank1, 1e-12);
  EXPECT_NEAR(soft_listmle(s, pi, 0.0), 0.31326, 1e-5);
  const double rank2_full = -std::log(1.0 / (std::exp(1.0) + 1.0));
  EXPECT_NEAR(soft_listmle(s, pi, 1.0), rank1 + rank2_full, 1e-12);
  EXPECT_NEAR(soft_listmle(s, pi, 1.0), 1.62652, 1e-5);
  const std::vector<double> one{3.7};
  const std::vector<std::size_t> only{0};
  EXPECT_DOUBLE_EQ(soft_listmle(one, only, 0.0), 0.0);
}

TEST(Losses, SoftListMleRejectsBadRankings) {
  const std::vector<double> s{1.0, 0.0, 2.0};
  const std::vector<std::size_t> dup{0, 0}, outside{5}, too_long{0, 1, 2, 0};
  EXPECT_THROW(soft_listmle(s, dup, 0.0), ArgumentError);
  EXPECT_THROW(soft_listmle(s, outside, 0.0), ArgumentError);
  EXPECT_THROW(soft_listmle(s, too_long, 0.0), ArgumentError);
  const std::vector<std::size_t> ok{0};
  EXPECT_THROW(soft_listmle(s, ok, 1.5), ArgumentError);
}

TEST(Losses, SoftListMleStableForLargeScores) {
  const std::vector<double> s{50.0, -50.0, 49.0};
  const std::vector<std::size_t> pi{2, 0, 1};
  for (double g : {0.0, 0.4, 1.0}) EXPECT_TRUE(std::isfinite(soft_listmle(s, pi, g)));
}

TEST(Losses, SoftListMleShiftInvariance) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t M = static_cast<std::size_t>(rng.uniform_int(2, 12));
    auto s = random_values(rng, M, 3.0);
    std::vector<std::size_t> pi(M);
    std::iota(pi.begin(), pi.end(), 0);
    std::shuffle(pi.begin(), pi.end(), rng.engine());
    pi.resize(static_cast<std::size_t>(rng.uniform_int(1, static_cast<long>(M))));
    const double g = rng.uniform();
    const double c = rng.normal() * 20.0;
    auto shifted = s;
    for (auto& v : shifted) v += c;
    EXPECT_NEAR(soft_listmle(s, pi, g), soft_listmle(shifted, pi, g), 1e-9);
  }
}

TEST(Losses, SoftListMleDenominatorLinearInGamma) {
  Rng rng(6);
  const auto s = random_values(rng, 6);
  const std::vector<std::size_t> pi{3, 1, 4};
  // exp(-loss) at each rank is e^{s}/D(gamma) with D linear in gamma, so the
  // product of per-rank denominators interpolates rank by rank.
  for (std::size_t r = 0; r < pi.size(); ++r) {
    const std::vector<std::size_t> prefix(pi.begin(), pi.begin() + static_cast<long>(r));
    const std::vector<std::size_t> upto(pi.begin(), pi.begin() + static_cast<long>(r + 1));
    auto denom = [&](double g) {
      const double step = soft_listmle(s, upto, g) - (r ? soft_listmle(s, prefix, g) : 0.0);
      return std::exp(step + s[pi[r]]);
    };
    const double d0 = denom(0.0), d1 = denom(1.0);
    for (double g : {0.2, 0.5, 0.9}) EXPECT_NEAR(denom(g), (1 - g) * d0 + g * d1, 1e-9 * d1);
  }
}

TEST(Losses, SoftListMleGradient) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t M = 8;
    Tensor s = random_parameter(rng, {M});
    const std::vector<std::size_t> pi{static_cast<std::size_t>(trial % M), (trial + 3) % M, (trial + 5) % M};
    const double g = rng.uniform();
    auto f = [&] {
      std::vector<double> grad(M, 0.0);
      const double v = soft_listmle(s.values(), pi, g, grad);
      return Tensor::make({1}, {v}, {s}, [grad](Node& n) {
        auto& pg = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < grad.size(); ++i) pg[i] += n.grad[0] * grad[i];
      });
    };
    EXPECT_LT(check_gradients(f, {s}).worst, 1e-6);
  }
}

TEST(Losses, ListPrefSingleStepIsCrossEntropy) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t B = 3, M = static_cast<std::size_t>(rng.uniform_int(2, 30));
    auto s = random_values(rng, B * M, 2.0);
    std::vector<int> t(B);
    for (auto& v : t) v = static_cast<int>(rng.uniform_int(1, static_cast<long>(M)));
    double ce = 0.0;
    for (std::size_t b = 0; b < B; ++b)
      ce += cross_entropy(std::span<const double>(s).subspan(b * M, M), static_cast<std::size_t>(t[b] - 1));
    ce /= B;
    for (double g : {0.0, 0.3, 1.0})
      EXPECT_NEAR(list_pref_loss(Tensor::constant({B, 1, M}, s), t, g).item(), ce, 1e-9 * ce + 1e-12);
  }
}

TEST(Losses, ListPrefMatchesOracle) {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t B = 2, k = static_cast<std::size_t>(rng.uniform_int(1, 5)),
                      M = static_cast<std::size_t>(rng.uniform_int(k, 20));
    auto s = random_values(rng, B * k * M, 2.0);
    std::vector<int> t(B * k);
    for (auto& v : t) v = static_cast<int>(rng.uniform_int(1, static_cast<long>(M)));
    const double g = rng.uniform();
    const double oracle = list_pref_oracle(s, t, B, k, M, g);
    EXPECT_NEAR(list_pref_loss(Tensor::constant({B, k, M}, s), t, g).item(), oracle, 1e-9 * oracle + 1e-12);
  }
}

TEST(Losses, ListPrefHandPlackettLuce) {
  // k = 2, M = 3, one score vector shared by both positions: the gamma = 0
  // loss is -log of the Plackett-Luce probability of the ordered pair.
  const std::vector<double> row{0.5, -1.0, 2.0};
  std::vector<double> s(row);
  s.insert(s.end(), row.begin(), row.end());
  double z = 0.0;
  for (double v : row) z += std::exp(v);
  double total_prob = 0.0;
  for (int a = 1; a <= 3; ++a) {
    for (int b = 1; b <= 3; ++b) {
      if (a == b) continue;
      const double p = std::exp(row[a - 1]) / z * std::exp(row[b - 1]) / (z - std::exp(row[a - 1]));
      const std::vector<int> t{a, b};
      EXPECT_NEAR(list_pref_loss(Tensor::constant({1, 2, 3}, s), t, 0.0).item(), -std::log(p), 1e-12);
      total_prob += p;
    }
  }
  EXPECT_NEAR(total_prob, 1.0, 1e-12);
}

TEST(Losses, ListPrefRepeatedTargetIsNotExcludedFromItself) {
  const std::vector<double> s{0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4};
  const std::vector<int> t{2, 2, 3};
  const double v = list_pref_loss(Tensor::constant({1, 3, 4}, s), t, 0.0).item();
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v, list_pref_oracle(s, t, 1, 3, 4, 0.0), 1e-12);
}

TEST(Losses, ListPrefValidatesInputs) {
  const std::vector<double> s(6, 0.0);
  const std::vector<int> zero{0, 1}, big{4, 1}, ok{1, 2};
  EXPECT_THROW(list_pref_loss(Tensor::constant({1, 2, 3}, s), zero, 0.0), VocabularyError);
  EXPECT_THROW(list_pref_loss(Tensor::constant({1, 2, 3}, s), big, 0.0), VocabularyError);
  EXPECT_THROW(list_pref_loss(Tensor::constant({2, 3}, s), ok, 0.0), ShapeError);
  std::vector<double> bad(s);
  bad[0] = std::nan("");
  EXPECT_THROW(list_pref_loss(Tensor::constant({1, 2, 3}, bad), ok, 0.0), NumericError);
}

TEST(Losses, ListPrefGradient) {
  Rng rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor s = random_parameter(rng, {2, 3, 7});
    const std::vector<int> t{1, 4, 1, 7, 2, 6};
    const double g = trial / 9.0;
    EXPECT_LT(check_gradients([&] { return list_pref_loss(s, t, g); }, {s}).worst, 1e-6);
  }
}

TEST(Losses, LpdoCombination) {
  LossWeights w;
  w.lambda = 0.1;
  w.reg_weight = 1.0;
  EXPECT_NEAR(lpdo_loss(2.0, 5.0, 0.3, w), 5.0, 1e-12);
  w.lambda = 1.0;
  w.reg_weight = 0.0;
  EXPECT_DOUBLE_EQ(lpdo_loss(2.0, 5.0, 0.3, w), 2.0);
  w.lambda = 0.0;
  w.reg_weight = 1.0;
  EXPECT_DOUBLE_EQ(lpdo_loss(2.0, 5.0, 0.3, w), 5.3);
  w.lambda = 1.5;
  EXPECT_THROW(lpdo_loss(2.0, 5.0, 0.3, w), ConfigError);
}

TEST(Losses, LpdoTensorGradient) {
  Rng rng(11);
  Tensor pred = random_parameter(rng, {2, 3, 4});
  Tensor target = random_parameter(rng, {2, 3, 4});
  Tensor scores = random_parameter(rng, {2, 2, 5});
  const std::vector<int> t{1, 2, 5, 3};
  const std::vector<std::uint8_t> mask{0, 1, 1, 1, 1, 1};
  LossWeights w;
  w.gamma = 0.3;
  auto f = [&] {
    return lpdo_loss(simple_loss(pred, target, mask), list_pref_loss(scores, t, w.gamma),
                     reg_loss(pred, mask), w);
  };
  EXPECT_LT(check_gradients(f, {pred, target, scores}).worst, 1e-6);
  Tensor out = f();
  EXPECT_NEAR(out.item(),
              lpdo_loss(simple_loss(pred, target, mask).item(), list_pref_loss(scores, t, w.gamma).item(),
                        reg_loss(pred, mask).item(), w),
              1e-12);
}
