#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "miai/error.hpp"
#include "miai/gaussian.hpp"

using namespace miai;

namespace {

DiagGaussian random_gaussian(std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> s(-1.0, 0.7);
  DiagGaussian g;
  for (std::size_t i = 0; i < d; ++i) {
    g.mean.push_back(n(rng));
    g.log_std.push_back(s(rng));
  }
  return g;
}

double normal_pdf(double x, double mu, double sd) {
  const double u = (x - mu) / sd;
  return std::exp(-0.5 * u * u) / (sd * std::sqrt(2.0 * std::numbers::pi));
}

struct GridMoments {
  double mean = 0.0;
  double var = 0.0;
};

// Normalized product of 1-D densities on a fine grid.
GridMoments grid_product(const std::vector<std::pair<double, double>>& factors) {
  const double lo = -12.0, hi = 12.0;
  const int n = 240001;
  const double dx = (hi - lo) / (n - 1);
  double z = 0.0, m1 = 0.0, m2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = lo + i * dx;
    double p = 1.0;
    for (auto [mu, sd] : factors) p *= normal_pdf(x, mu, sd);
    z += p;
    m1 += p * x;
    m2 += p * x * x;
  }
  GridMoments g;
  g.mean = m1 / z;
  g.var = m2 / z - g.mean * g.mean;
  return g;
}

}  // namespace

TEST(KlDiag, IdenticalStandardNormalsGiveZero) {
  EXPECT_EQ(kl_diag(DiagGaussian::standard(1), DiagGaussian::standard(1)), 0.0);
}

TEST(KlDiag, UnitShiftGivesHalf) {
  EXPECT_DOUBLE_EQ(kl_diag(DiagGaussian({1.0}, {0.0}), DiagGaussian::standard(1)), 0.5);
}

TEST(KlDiag, DimensionMismatchThrows) {
  EXPECT_THROW(kl_diag(DiagGaussian::standard(2), DiagGaussian::standard(3)), ShapeError);
}

TEST(KlDiag, ZeroOnRandomEqualPairsAndNonNegativeOtherwise) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 200; ++t) {
    const auto q = random_gaussian(6, rng);
    EXPECT_NEAR(kl_diag(q, q), 0.0, 1e-12);
    EXPECT_GE(kl_diag(q, random_gaussian(6, rng)), 0.0);
  }
}

TEST(KlDiag, MatchesMonteCarloWithinThreeStandardErrors) {
  std::mt19937_64 rng(42);
  const auto q = random_gaussian(8, rng);
  const auto p = random_gaussian(8, rng);
  const int n = 100000;
  std::normal_distribution<double> normal(0.0, 1.0);
  double sum = 0.0, sum2 = 0.0;
  std::vector<double> eps(8);
  for (int i = 0; i < n; ++i) {
    for (auto& e : eps) e = normal(rng);
    const auto z = sample_reparam(q, eps);
    const double v = q.log_pdf(z) - p.log_pdf(z);
    sum += v;
    sum2 += v * v;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sum2 / n - mean * mean) / n);
  EXPECT_LT(std::abs(mean - kl_diag(q, p)), 3.0 * se);
}

TEST(KlDiag, GraphGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(4);
  auto mk = [&](double scale) {
    std::normal_distribution<double> n(0.0, scale);
    Tensor t({3, 5});
    for (auto& v : t.values()) v = n(rng);
    return t;
  };
  Graph g;
  GaussianVars q{g.variable(mk(1.0), "mq"), g.variable(mk(0.4), "sq")};
  GaussianVars p{g.variable(mk(1.0), "mp"), g.variable(mk(0.4), "sp")};
  auto loss = g.sum(kl_diag(g, q, p));
  const Var leaves[] = {q.mean, q.log_std, p.mean, p.log_std};
  EXPECT_LT(gradient_check(g, loss, leaves).max_rel_error(), 1e-4);
}

TEST(KlDiag, GraphFormAgreesWithPlainForm) {
  std::mt19937_64 rng(8);
  const auto q = random_gaussian(4, rng);
  const auto p = random_gaussian(4, rng);
  Graph g;
  GaussianVars qv{g.constant(Tensor::row(q.mean)), g.constant(Tensor::row(q.log_std))};
  GaussianVars pv{g.constant(Tensor::row(p.mean)), g.constant(Tensor::row(p.log_std))};
  EXPECT_NEAR(kl_diag(g, qv, pv).value()[0], kl_diag(q, p), 1e-12);
  EXPECT_NEAR(kl_standard(g, qv).value()[0], kl_diag(q, DiagGaussian::standard(4)), 1e-12);
}

TEST(SampleReparam, ZeroNoiseReturnsMean) {
  const DiagGaussian d({1.5, -2.0}, {0.3, -0.1});
  const std::vector<double> zero(2, 0.0);
  EXPECT_EQ(sample_reparam(d, zero), d.mean);
}

TEST(SampleReparam, UnitCase) {
  const std::vector<double> one{1.0};
  EXPECT_EQ(sample_reparam(DiagGaussian::standard(1), one), std::vector<double>{1.0});
}

TEST(SampleReparam, NoiseLengthMismatchThrows) {
  const std::vector<double> noise(3, 0.0);
  EXPECT_THROW(sample_reparam(DiagGaussian::standard(2), noise), ShapeError);
}

TEST(SampleReparam, EmpiricalMeanWithinThreeStandardErrors) {
  std::mt19937_64 rng(12);
  const DiagGaussian d({0.7, -1.3}, {0.2, -0.5});
  const int n = 100000;
  std::vector<double> sum(2, 0.0);
  const auto noise = standard_normal(n, 2, rng);
  for (int i = 0; i < n; ++i) {
    const double e[2] = {noise.at(i, 0), noise.at(i, 1)};
    const auto z = sample_reparam(d, e);
    sum[0] += z[0];
    sum[1] += z[1];
  }
  for (int k = 0; k < 2; ++k) {
    const double se = std::exp(d.log_std[k]) / std::sqrt(static_cast<double>(n));
    EXPECT_LT(std::abs(sum[k] / n - d.mean[k]), 3.0 * se);
  }
}

TEST(Poe, PriorAndUnitExpertMatchGridProduct) {
  const DiagGaussian expert({2.0}, {0.0});
  const auto fused = poe(std::span<const DiagGaussian>(&expert, 1), true);
  const auto grid = grid_product({{0.0, 1.0}, {2.0, 1.0}});
  EXPECT_NEAR(fused.mean[0], 1.0, 1e-12);
  EXPECT_NEAR(std::exp(2.0 * fused.log_std[0]), 0.5, 1e-12);
  EXPECT_NEAR(grid.mean, fused.mean[0], 1e-6);
  EXPECT_NEAR(grid.var, std::exp(2.0 * fused.log_std[0]), 1e-6);
}

TEST(Poe, RandomExpertsMatchGridProduct) {
  std::mt19937_64 rng(21);
  for (int t = 0; t < 5; ++t) {
    std::vector<DiagGaussian> experts;
    std::vector<std::pair<double, double>> factors = {{0.0, 1.0}};
    for (int k = 0; k < 3; ++k) {
      experts.push_back(random_gaussian(1, rng));
      factors.emplace_back(experts.back().mean[0], std::exp(experts.back().log_std[0]));
    }
    const auto fused = poe(experts, true);
    const auto grid = grid_product(factors);
    EXPECT_NEAR(grid.mean, fused.mean[0], 1e-6);
    EXPECT_NEAR(grid.var, std::exp(2.0 * fused.log_std[0]), 1e-6);
  }
}

TEST(Poe, FlatExpertLeavesPrior) {
  const DiagGaussian flat({5.0}, {10.0});
  const auto fused = poe(std::span<const DiagGaussian>(&flat, 1), true);
  EXPECT_LT(std::abs(fused.mean[0]), 1e-3);
  EXPECT_LT(std::abs(std::exp(2.0 * fused.log_std[0]) - 1.0), 1e-3);
}

TEST(Poe, SingleExpertWithoutPriorIsUnchanged) {
  const DiagGaussian e({0.25, -3.0}, {0.5, -1.0});
  const auto fused = poe(std::span<const DiagGaussian>(&e, 1), false);
  for (int i = 0; i < 2; ++i) {
    EXPECT_DOUBLE_EQ(fused.mean[i], e.mean[i]);
    EXPECT_DOUBLE_EQ(fused.log_std[i], e.log_std[i]);
  }
}

TEST(Poe, DimensionMismatchAndEmptyListThrow) {
  std::vector<DiagGaussian> bad = {DiagGaussian::standard(2), DiagGaussian::standard(3)};
  EXPECT_THROW(poe(bad, true), ShapeError);
  EXPECT_THROW(poe(std::span<const DiagGaussian>(), true), ShapeError);
}

TEST(Poe, PermutationInvariantBitwise) {
  std::mt19937_64 rng(30);
  std::vector<DiagGaussian> experts;
  for (int k = 0; k < 5; ++k) experts.push_back(random_gaussian(7, rng));
  const auto ref = poe(experts, true);
  for (int t = 0; t < 20; ++t) {
    std::shuffle(experts.begin(), experts.end(), rng);
    EXPECT_EQ(poe(experts, true), ref);
  }
}

TEST(Poe, FusionNeverWidens) {
  std::mt19937_64 rng(31);
  for (int t = 0; t < 100; ++t) {
    std::vector<DiagGaussian> experts;
    for (int k = 0; k < 3; ++k) experts.push_back(random_gaussian(4, rng));
    const auto fused = poe(experts, t % 2 == 0);
    for (std::size_t i = 0; i < 4; ++i) {
      for (const auto& e : experts) EXPECT_LE(fused.log_std[i], e.log_std[i] + 1e-15);
    }
  }
}

TEST(Poe, GraphFormMatchesPlainForm) {
  std::mt19937_64 rng(32);
  std::vector<DiagGaussian> experts;
  for (int k = 0; k < 3; ++k) experts.push_back(random_gaussian(4, rng));
  Graph g;
  std::vector<GaussianVars> vars;
  for (const auto& e : experts) vars.push_back({g.constant(Tensor::row(e.mean)), g.constant(Tensor::row(e.log_std))});
  const auto fused = poe(g, vars, true);
  const auto ref = poe(experts, true);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(fused.mean.value()[i], ref.mean[i], 1e-12);
    EXPECT_NEAR(fused.log_std.value()[i], ref.log_std[i], 1e-12);
  }
}

TEST(Subsets, IncreasingMaskOrderAndWeights) {
  EXPECT_EQ(nonempty_subsets(2), (std::vector<SubsetMask>{1, 2, 3}));
  const auto w = uniform_subset_weights(3);
  ASSERT_EQ(w.size(), 7u);
  for (double v : w) EXPECT_DOUBLE_EQ(v, 1.0 / 7.0);
  EXPECT_EQ(moe_subset_weights(2), (std::vector<double>{0.5, 0.5, 0.0}));
  const std::vector<double> bad = {0.5, 0.5, 0.5};
  EXPECT_THROW(validate_subset_weights(bad, 2), ConfigError);
  const std::vector<double> wrong_len = {1.0};
  EXPECT_THROW(validate_subset_weights(wrong_len, 2), ConfigError);
}

TEST(Mopoe, SingleModalityIsOnePoeComponent) {
  const DiagGaussian e({1.0, -0.5}, {0.2, 0.1});
  const std::vector<double> w = {1.0};
  const auto mix = mopoe(std::span<const DiagGaussian>(&e, 1), w);
  ASSERT_EQ(mix.components.size(), 1u);
  EXPECT_EQ(mix.components[0].dist, poe(std::span<const DiagGaussian>(&e, 1), true));
}

TEST(Mopoe, FullSubsetWeightCollapsesToJointPoe) {
  std::mt19937_64 rng(40);
  std::vector<DiagGaussian> experts = {random_gaussian(3, rng), random_gaussian(3, rng)};
  const std::vector<double> w = {0.0, 0.0, 1.0};
  const auto mix = mopoe(experts, w);
  ASSERT_EQ(mix.components.size(), 1u);
  EXPECT_EQ(mix.components[0].subset, 3u);
  EXPECT_EQ(mix.components[0].dist, poe(experts, true));
}

TEST(Mopoe, MixtureDensityMatchesGridSum) {
  const std::vector<DiagGaussian> experts = {DiagGaussian({1.2}, {-0.3}), DiagGaussian({-0.8}, {0.4})};
  const auto w = uniform_subset_weights(2);
  const auto mix = mopoe(experts, w);
  ASSERT_EQ(mix.components.size(), 3u);
  // independent per-subset products normalized on the grid
  const std::vector<std::vector<std::pair<double, double>>> subsets = {
      {{0.0, 1.0}, {1.2, std::exp(-0.3)}},
      {{0.0, 1.0}, {-0.8, std::exp(0.4)}},
      {{0.0, 1.0}, {1.2, std::exp(-0.3)}, {-0.8, std::exp(0.4)}}};
  std::vector<GridMoments> moments;
  for (const auto& f : subsets) moments.push_back(grid_product(f));
  double worst = 0.0;
  for (int i = -60; i <= 60; ++i) {
    const double x = 0.1 * i;
    double expect = 0.0;
    for (const auto& gm : moments) expect += (1.0 / 3.0) * normal_pdf(x, gm.mean, std::sqrt(gm.var));
    const double z[1] = {x};
    worst = std::max(worst, std::abs(mix.pdf(z) - expect));
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(MixtureSample, SingleComponentMatchesReparam) {
  MixturePosterior m;
  m.components.push_back({1.0, 1, DiagGaussian({0.5, -0.5}, {0.1, -0.2})});
  Rng a(5), b(5);
  const auto [z, idx] = mixture_sample(m, a);
  EXPECT_EQ(idx, 0u);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  (void)u(b);
  const auto noise = standard_normal(1, 2, b);
  EXPECT_EQ(z, sample_reparam(m.components[0].dist, noise.data()));
}

TEST(MixtureSample, DegenerateWeightsAlwaysPickFirst) {
  MixturePosterior m;
  m.components.push_back({1.0, 1, DiagGaussian::standard(1)});
  m.components.push_back({0.0, 2, DiagGaussian({5.0}, {0.0})});
  Rng rng(6);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(mixture_sample(m, rng).second, 0u);
}

TEST(MixtureSample, FrequenciesMatchWeights) {
  MixturePosterior m;
  const double w[3] = {0.2, 0.5, 0.3};
  for (int k = 0; k < 3; ++k) m.components.push_back({w[k], static_cast<SubsetMask>(k + 1), DiagGaussian::standard(1)});
  Rng rng(7);
  const int n = 100000;
  int counts[3] = {0, 0, 0};
  for (int i = 0; i < n; ++i) ++counts[mixture_sample(m, rng).second];
  for (int k = 0; k < 3; ++k) {
    const double se = std::sqrt(w[k] * (1 - w[k]) / n);
    EXPECT_LT(std::abs(counts[k] / static_cast<double>(n) - w[k]), 3.0 * se);
  }
}

TEST(MixtureSample, StratifiedDrawsFollowGridDensity) {
  const std::vector<DiagGaussian> experts = {DiagGaussian({1.5}, {-0.5}), DiagGaussian({-1.0}, {0.0})};
  const auto mix = mopoe(experts, uniform_subset_weights(2));
  Rng rng(8);
  const int n = 100000;
  const double lo = -4.0, hi = 4.0;
  const int bins = 20;
  std::vector<int> hist(bins + 2, 0);  // under/overflow at the ends
  for (int i = 0; i < n; ++i) {
    const double z = mixture_sample(mix, rng).first[0];
    if (z < lo) ++hist[0];
    else if (z >= hi) ++hist[bins + 1];
    else ++hist[1 + static_cast<int>((z - lo) / (hi - lo) * bins)];
  }
  // expected bin masses by fine-grid integration of the mixture density
  std::vector<double> expect(bins + 2, 0.0);
  const double dx = 1e-4;
  double total = 0.0;
  for (double x = -12.0; x < 12.0; x += dx) {
    const double zz[1] = {x + 0.5 * dx};
    const double p = mix.pdf(zz) * dx;
    total += p;
    if (x < lo) expect[0] += p;
    else if (x >= hi) expect[bins + 1] += p;
    else expect[1 + static_cast<int>((x - lo) / (hi - lo) * bins)] += p;
  }
  EXPECT_NEAR(total, 1.0, 1e-6);
  double chi2 = 0.0;
  int dof = -1;
  for (int b = 0; b < bins + 2; ++b) {
    const double e = expect[b] * n;
    if (e < 5.0) continue;
    chi2 += (hist[b] - e) * (hist[b] - e) / e;
    ++dof;
  }
  // 99.9% quantile of chi-square with ~21 dof is about 46.8
  EXPECT_LT(chi2, 46.8) << "dof " << dof;
}

TEST(MixturePosterior, ValidateRejectsBadWeights) {
  MixturePosterior m;
  EXPECT_THROW(m.validate(), Error);
  m.components.push_back({0.7, 1, DiagGaussian::standard(1)});
  EXPECT_THROW(m.validate(), Error);
}
