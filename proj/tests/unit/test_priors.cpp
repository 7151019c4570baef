#include <gtest/gtest.h>

#include <algorithm>

#include "checks.hpp"

using namespace ibpbnn;

namespace {

Var vec(std::initializer_list<double> v) { return Var::constant(Tensor::vector(v)); }

BetaParams beta_sticks(std::size_t K, double a, double b) {
  return {Var::constant(BetaParams::raw_for(Tensor({K}, a))), Var::constant(BetaParams::raw_for(Tensor({K}, b)))};
}

}  // namespace

TEST(StickProducts, Examples) {
  EXPECT_EQ(stick_products(vec({1, 1, 1})).value(), Tensor::vector({1, 1, 1}));
  const Tensor p = stick_products(vec({0.5, 0.5})).value();
  EXPECT_NEAR(p[0], 0.5, 1e-15);
  EXPECT_NEAR(p[1], 0.25, 1e-15);
}

TEST(StickProductsProperty, NonIncreasing) {
  RngStream r(1);
  for (int rep = 0; rep < 100; ++rep) {
    Tensor v({20});
    for (auto& x : v.values()) x = 0.01 + 0.99 * r.uniform();
    const Tensor p = stick_products(Var::constant(v)).value();
    for (std::size_t k = 1; k < 20; ++k) ASSERT_LE(p[k], p[k - 1]);
  }
}

TEST(StickProductsProperty, NonIncreasingForSampledSticks) {
  Sampler s{RngStream(2)};
  const BetaParams sticks = beta_sticks(30, 2.0, 1.0);
  for (int rep = 0; rep < 100; ++rep) {
    const Tensor p = stick_products(beta_rsample(sticks, s)).value();
    for (std::size_t k = 1; k < 30; ++k) ASSERT_LE(p[k], p[k - 1]);
  }
}

TEST(IbpMasks, PriorMeanActiveNearFive) {
  const double target = oracle::ibp_expected_active(5.0, 100);
  EXPECT_NEAR(target, 5.0, 1e-6);
  EXPECT_NEAR(checks::ibp_prior_mean_active(5.0, 100, 10000, 3), target, 0.05 * target);
}

TEST(IbpMaskProperty, TruncatedMeanForSeveralConcentrations) {
  for (double alpha : {1.0, 5.0, 10.0}) {
    const double target = oracle::ibp_expected_active(alpha, 100);
    EXPECT_NEAR(checks::ibp_prior_mean_active(alpha, 100, 10000, 11), target, 0.05 * target) << alpha;
  }
}

TEST(IbpMasks, DegenerateSticksGiveAllOnes) {
  // Beta(1e6, kBetaFloor) keeps every stick at the clamp ceiling.
  const BetaParams sticks = beta_sticks(8, 1e6, kBetaFloor + 1e-9);
  Sampler s{RngStream(4)};
  const MaskSample m = ibp_sample_masks({sticks, 1.0}, 16, s, MaskMode::hard);
  EXPECT_DOUBLE_EQ(sum_all(m.z.value()), 16.0 * 8.0);
}

TEST(IbpMasks, RelaxedAndHardShapesAndRanges) {
  const BetaParams sticks = beta_sticks(6, 5.0, 1.0);
  Sampler s{RngStream(5)};
  const MaskSample r = ibp_sample_masks({sticks, 0.7}, 9, s, MaskMode::relaxed, 3);
  EXPECT_EQ(r.z.shape(), (Shape{9, 6}));
  EXPECT_EQ(r.logits.shape(), (Shape{9, 6}));
  EXPECT_EQ(r.pis.shape(), (Shape{6}));
  for (double v : r.z.value().values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  const MaskSample h = ibp_sample_masks({sticks, 0.7}, 9, s, MaskMode::hard);
  for (double v : h.z.value().values()) EXPECT_TRUE(v == 0.0 || v == 1.0);
  EXPECT_THROW(ibp_sample_masks({sticks, 0.7}, 0, s, MaskMode::hard), std::invalid_argument);
}

TEST(IbpMasks, ZeroTemperatureMatchesHardAtMatchedNoise) {
  const BetaParams sticks = beta_sticks(10, 5.0, 1.0);
  const Sampler base{RngStream(6)};
  Sampler a = base.fork(1), b = base.fork(1);
  const Tensor relaxed = ibp_sample_masks({sticks, 1e-5}, 50, a, MaskMode::relaxed).z.value();
  const Tensor hard = ibp_sample_masks({sticks, 1e-5}, 50, b, MaskMode::hard).z.value();
  std::size_t agree = 0;
  for (std::size_t i = 0; i < hard.size(); ++i) agree += std::abs(relaxed[i] - hard[i]) < 1e-3;
  EXPECT_GE(static_cast<double>(agree) / hard.size(), 0.99);
}

TEST(IbpMasks, SticksSharedAcrossBatch) {
  const BetaParams sticks = beta_sticks(5, 2.0, 1.0);
  Sampler s{RngStream(7)};
  const MaskSample m = ibp_sample_masks({sticks, 1.0}, 4, s, MaskMode::hard);
  EXPECT_EQ(m.pis.shape(), (Shape{5}));
}

TEST(HibpMasks, SaturatedGlobalGivesAlwaysOn) {
  Sampler s{RngStream(8)};
  const Var pi0 = clamp_probability(vec({1.0, 1.0, 1.0}));
  const Tensor pis = hibp_child_probabilities(pi0, 4.0, s).value();
  for (double p : pis.values()) EXPECT_GT(p, 0.99);
  const auto [a, b] = child_beta_shapes(pi0, 4.0);
  for (double v : b.value().values()) EXPECT_GE(v, kChildShapeFloor);
  EXPECT_GT(a.value()[0], 3.9);
}

TEST(HibpMasks, LargeConcentrationConcentratesAtGlobal) {
  Sampler s{RngStream(9)};
  const Var pi0 = vec({0.5});
  for (int i = 0; i < 1000; ++i) EXPECT_NEAR(hibp_child_probabilities(pi0, 1e4, s).value()[0], 0.5, 0.02);
}

TEST(HibpMasks, AveragedChildDrawsShrinkVariance) {
  // The average of n draws keeps the mean pi0 and divides the variance
  // pi0 (1 - pi0) / (alpha + 1) by n.
  const double pi0 = 0.3, alpha = 4.0, want_var = pi0 * (1 - pi0) / (alpha + 1);
  for (std::size_t n : {1u, 10u}) {
    Sampler s{RngStream(12)};
    std::vector<double> xs(5000);
    for (auto& x : xs) x = hibp_child_probabilities(vec({pi0}), alpha, s, n).value()[0];
    const checks::McStat m = checks::mc_stat(xs);
    EXPECT_LT(std::abs(m.mean - pi0), 3 * m.se);
    const double var = m.se * m.se * static_cast<double>(xs.size());
    EXPECT_NEAR(var, want_var / static_cast<double>(n), 0.1 * want_var / static_cast<double>(n));
  }
  Sampler s{RngStream(13)};
  EXPECT_THROW(hibp_child_probabilities(vec({pi0}), alpha, s, 0), std::invalid_argument);
}

TEST(HibpMaskProperty, ChildMeanEqualsGlobal) {
  for (double alpha : {0.5, 4.0, 40.0}) {
    Sampler s{RngStream(10)};
    const Var pi0 = vec({0.3, 0.8});
    std::vector<double> a(10000), b(10000);
    for (std::size_t i = 0; i < a.size(); ++i) {
      const Tensor p = hibp_child_probabilities(pi0, alpha, s).value();
      a[i] = p[0];
      b[i] = p[1];
    }
    const auto sa = checks::mc_stat(a), sb = checks::mc_stat(b);
    EXPECT_LT(std::abs(sa.mean - 0.3), 3 * sa.se + 1e-6) << alpha;
    EXPECT_LT(std::abs(sb.mean - 0.8), 3 * sb.se + 1e-6) << alpha;
  }
}

TEST(HibpMasks, LayerOutOfRangeAndBadConcentration) {
  const HibpPosterior p{beta_sticks(4, 5, 1), {2.0, 3.0}, 1.0};
  Sampler s{RngStream(11)};
  EXPECT_NO_THROW(hibp_sample_masks(p, 1, 3, s, MaskMode::hard));
  EXPECT_THROW(hibp_sample_masks(p, 2, 3, s, MaskMode::hard), std::out_of_range);
  EXPECT_THROW(hibp_child_probabilities(vec({0.5}), 0.0, s), std::invalid_argument);
}

TEST(HibpMasks, GradientReachesGlobalSticksThroughChildAndMasks) {
  const Var ra = Var::leaf(BetaParams::raw_for(Tensor({4}, 3.0)));
  const Var rb = Var::leaf(BetaParams::raw_for(Tensor({4}, 1.0)));
  const HibpPosterior p{{ra, rb}, {4.0}, 0.7};
  Sampler s{RngStream(12)};
  const MaskSample m = hibp_sample_masks(p, 0, 5, s, MaskMode::relaxed);
  const Gradients g = backward(sum(m.z));
  double norm = 0;
  const Tensor grad = g.of(ra);
  for (double v : grad.values()) norm += std::abs(v);
  EXPECT_GT(norm, 0.0);
}

TEST(KlIbpSticks, Examples) {
  const IbpLayerPosterior prior{beta_sticks(100, 5, 1), 1.0};
  EXPECT_NEAR(kl_ibp_sticks(prior, prior).item(), 0.0, 1e-12);
  const IbpLayerPosterior q{beta_sticks(1, 2, 1), 1.0}, p{beta_sticks(1, 1, 1), 1.0};
  EXPECT_NEAR(kl_ibp_sticks(q, p).item(), std::log(2.0) - 0.5, 1e-9);
  EXPECT_NEAR(kl_ibp_sticks(q, p).item(), oracle::kl_beta(2, 1, 1, 1), 1e-8);
}

TEST(KlHibp, UnchangedConcentrationGivesZeroChildTerm) {
  const HibpPosterior q{beta_sticks(5, 3, 2), {4.0, 4.0}, 1.0};
  const HibpPosterior p{beta_sticks(5, 5, 1), {4.0, 4.0}, 1.0};
  const Var pi0 = vec({0.9, 0.7, 0.5, 0.3, 0.1});
  EXPECT_EQ(kl_hibp(q, p, pi0).item(), kl_beta(q.global_sticks, p.global_sticks).item());
  EXPECT_NEAR(kl_hibp(p, p, pi0).item(), 0.0, 1e-12);
}

TEST(KlHibp, ChangedConcentrationMatchesQuadrature) {
  const HibpPosterior q{beta_sticks(1, 5, 1), {8.0}, 1.0};
  const HibpPosterior p{beta_sticks(1, 5, 1), {4.0}, 1.0};
  const double got = kl_hibp(q, p, vec({0.5})).item();
  const double want = oracle::kl_beta(4.0, 4.0, 2.0, 2.0);
  EXPECT_GT(got, 0.0);
  EXPECT_NEAR(got, want, 1e-8);
}

TEST(KlHibp, LayerCountMismatchThrows) {
  const HibpPosterior q{beta_sticks(2, 5, 1), {8.0}, 1.0};
  const HibpPosterior p{beta_sticks(2, 5, 1), {4.0, 4.0}, 1.0};
  EXPECT_THROW(kl_hibp(q, p, vec({0.5, 0.5})), std::invalid_argument);
}

TEST(KlPriorsProperty, NonNegative) {
  RngStream r(13);
  for (int i = 0; i < 100; ++i) {
    const double aq = 0.2 + 8 * r.uniform(), bq = 0.2 + 8 * r.uniform();
    const double ap = 0.2 + 8 * r.uniform(), bp = 0.2 + 8 * r.uniform();
    EXPECT_GE(kl_ibp_sticks({beta_sticks(3, aq, bq), 1}, {beta_sticks(3, ap, bp), 1}).item(), -1e-10);
    const HibpPosterior q{beta_sticks(3, aq, bq), {0.5 + 10 * r.uniform()}, 1.0};
    const HibpPosterior p{beta_sticks(3, ap, bp), {0.5 + 10 * r.uniform()}, 1.0};
    const Var pi0 = vec({0.05 + 0.9 * r.uniform(), 0.05 + 0.9 * r.uniform(), 0.05 + 0.9 * r.uniform()});
    EXPECT_GE(kl_hibp(q, p, pi0).item(), -1e-10);
  }
}

TEST(KlMasks, IdenticalDistributionsHaveZeroMean) {
  const Var pis = vec({0.2, 0.5, 0.8});
  Sampler s{RngStream(14)};
  std::vector<double> xs(20000);
  for (auto& x : xs) x = kl_masks(sample_masks(pis, 0.7, 4, s, MaskMode::relaxed), pis, pis, 0.7, 0.7).item();
  const auto st = checks::mc_stat(xs);
  EXPECT_TRUE(st.consistent_with_zero()) << st.mean << " se " << st.se;
}

TEST(KlMasks, DistantProbabilitiesArePositiveAndScaleWithBatch) {
  const Var q = vec({0.9}), p = vec({0.1});
  auto mean_kl = [&](std::size_t batch, std::uint64_t seed) {
    Sampler s{RngStream(seed)};
    std::vector<double> xs(20000);
    for (auto& x : xs) x = kl_masks(sample_masks(q, 0.7, batch, s, MaskMode::relaxed), q, p, 0.7, 0.7).item();
    return checks::mc_stat(xs);
  };
  const auto one = mean_kl(1, 15), two = mean_kl(2, 16);
  EXPECT_GT(one.mean, 3 * one.se);
  EXPECT_LT(std::abs(two.mean - 2 * one.mean), 3 * std::hypot(two.se, 2 * one.se));
}

TEST(KlMasks, RequiresRelaxedSample) {
  const Var pis = vec({0.5});
  Sampler s{RngStream(17)};
  EXPECT_THROW(kl_masks(sample_masks(pis, 0.7, 2, s, MaskMode::hard), pis, pis, 0.7, 0.7), std::invalid_argument);
}

TEST(ActiveNeuronCount, Examples) {
  EXPECT_EQ(active_neuron_count(Tensor::matrix(1, 3, {0.5, 0.05, 0.2}))[0], 2u);
  EXPECT_EQ(active_neuron_count(Tensor({1, 7}, 0.0))[0], 0u);
  EXPECT_EQ(active_neuron_count(Tensor({1, 100}, 1.0))[0], 100u);
  EXPECT_THROW(active_neuron_count(Tensor::vector({1, 2})), ShapeError);
}

// Surrogate sum_k c_k pi_k with frozen noise; the analytic gradient through
// the implicit Beta reparameterization must match finite differences.
TEST(StickGradientProperty, MatchesFiniteDifferencesWithCommonNoise) {
  RngStream r(18);
  double total = 0.0;
  const int probes = 50;
  for (int probe = 0; probe < probes; ++probe) {
    const std::size_t K = 4;
    std::vector<double> x0(2 * K);
    for (auto& v : x0) v = -0.5 + 2.5 * r.uniform();
    const Var c = Var::constant(Tensor::vector({1.0, -0.7, 0.4, 1.3}));
    auto tensor_slice = [&](const std::vector<double>& x, std::size_t off) {
      return Tensor({K}, std::vector<double>(x.begin() + off, x.begin() + off + K));
    };
    const Var ra = Var::leaf(tensor_slice(x0, 0)), rb = Var::leaf(tensor_slice(x0, K));
    auto tape = std::make_shared<NoiseTape>();
    Sampler rec(r.derive(probe), tape);
    const Gradients g = backward(sum(stick_probabilities({ra, rb}, rec, 2) * c));
    auto f = [&](const std::vector<double>& x) {
      Sampler rep = Sampler::replay(tape);
      const BetaParams b{Var::constant(tensor_slice(x, 0)), Var::constant(tensor_slice(x, K))};
      return sum(stick_probabilities(b, rep, 2) * c).item();
    };
    const std::size_t i = r.below(2 * K);
    const double analytic = i < K ? g.of(ra)[i] : g.of(rb)[i - K];
    const double fd = oracle::central_difference(f, x0, i, 1e-5);
    total += std::abs(analytic - fd) / std::max({std::abs(fd), 1e-4});
  }
  EXPECT_LT(total / probes, 1e-2);
}
