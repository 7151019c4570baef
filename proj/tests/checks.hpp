#pragma once

// Measurements shared by the unit tests and the acceptance binary. Each
// returns the quantity a criterion thresholds, so both suites apply the
// same pinned tolerance to the same computation.

#include <algorithm>
#include <cmath>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "ibpbnn.hpp"
#include "oracles.hpp"

namespace checks {

using namespace ibpbnn;

struct McStat {
  double mean = 0.0;
  double se = 0.0;
  /// |mean| < 3 SE; an exactly zero mean (a degenerate estimator) also passes.
  bool consistent_with_zero() const { return mean == 0.0 || std::abs(mean) < 3.0 * se; }
};

inline McStat mc_stat(const std::vector<double>& xs) {
  McStat s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) ss += (x - s.mean) * (x - s.mean);
  s.se = std::sqrt(ss / static_cast<double>(xs.size() - 1) / static_cast<double>(xs.size()));
  return s;
}

/// Max relative error of the implicit Beta(a, 1) gradient against the
/// closed form -v ln v / a over a grid of shapes and sample values.
inline double beta_alpha_one_closed_form_error() {
  double worst = 0.0;
  for (double a : {0.5, 1.0, 2.0, 3.7, 5.0, 10.0})
    for (double v = 0.05; v < 0.96; v += 0.05) {
      const double want = -v * std::log(v) / a;
      worst = std::max(worst, oracle::rel_err(beta_implicit_grad(a, 1.0, v).first, want));
    }
  return worst;
}

/// Gradient of one Beta draw through the autodiff op, at the noise level
/// recorded when it was drawn.
struct BetaDraw {
  double v, u, da, db;
};

inline BetaDraw beta_draw_with_gradient(double a, double b, std::uint64_t seed) {
  auto tape = std::make_shared<NoiseTape>();
  Sampler s(RngStream(seed), tape);
  const Var va = Var::leaf(Tensor::vector({a}));
  const Var vb = Var::leaf(Tensor::vector({b}));
  const Var v = beta_rsample(va, vb, s);
  const Gradients g = backward(sum(v));
  return {v.value()[0], tape->values.at(0), g.of(va)[0], g.of(vb)[0]};
}

/// Max relative error of the implicit gradient against central differences
/// of the bisection inverse CDF at the draw's own uniform, over `n` random
/// shape pairs in [0.5, 10]^2.
inline double beta_inverse_cdf_fd_error(std::size_t n, std::uint64_t seed) {
  RngStream rng(seed);
  double worst = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; used < n && i < 10 * n; ++i) {
    const double a = 0.5 + 9.5 * rng.uniform();
    const double b = 0.5 + 9.5 * rng.uniform();
    const BetaDraw d = beta_draw_with_gradient(a, b, rng.next_u64());
    if (d.v <= kProbClamp || d.v >= 1.0 - kProbClamp) continue;  // clamped draws carry no gradient
    const double ha = 1e-5 * a, hb = 1e-5 * b;
    const double fa = (oracle::beta_quantile(d.u, a + ha, b) - oracle::beta_quantile(d.u, a - ha, b)) / (2 * ha);
    const double fb = (oracle::beta_quantile(d.u, a, b + hb) - oracle::beta_quantile(d.u, a, b - hb)) / (2 * hb);
    worst = std::max({worst, oracle::rel_err(d.da, fa, 1e-10), oracle::rel_err(d.db, fb, 1e-10)});
    ++used;
  }
  return worst;
}

inline double kl_gaussian_value(double mq, double vq, double mp, double vp) {
  return kl_gaussian({Var::constant(Tensor::vector({mq})), Var::constant(Tensor::vector({std::log(vq)}))},
                     {Var::constant(Tensor::vector({mp})), Var::constant(Tensor::vector({std::log(vp)}))})
      .item();
}

inline double kl_beta_value(double aq, double bq, double ap, double bp) {
  auto c = [](double x) { return Var::constant(Tensor::vector({x})); };
  return kl_beta(c(aq), c(bq), c(ap), c(bp)).item();
}

/// Max relative error of the closed-form Gaussian KL against quadrature.
inline double kl_gaussian_quadrature_error(std::size_t n, std::uint64_t seed) {
  RngStream rng(seed);
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double mq = -2 + 4 * rng.uniform(), mp = -2 + 4 * rng.uniform();
    const double vq = std::exp(-3 + 4 * rng.uniform()), vp = std::exp(-3 + 4 * rng.uniform());
    worst = std::max(worst, oracle::rel_err(kl_gaussian_value(mq, vq, mp, vp), oracle::kl_gaussian(mq, vq, mp, vp)));
  }
  return worst;
}

/// Max relative error of the closed-form Beta KL against quadrature.
inline double kl_beta_quadrature_error(std::size_t n, std::uint64_t seed) {
  RngStream rng(seed);
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double aq = 0.5 + 9.5 * rng.uniform(), bq = 0.5 + 9.5 * rng.uniform();
    const double ap = 0.5 + 9.5 * rng.uniform(), bp = 0.5 + 9.5 * rng.uniform();
    worst = std::max(worst, oracle::rel_err(kl_beta_value(aq, bq, ap, bp), oracle::kl_beta(aq, bq, ap, bp)));
  }
  return worst;
}

/// Largest |KL| over random identical parameter pairs (both families).
inline double kl_identical_max(std::size_t n, std::uint64_t seed) {
  RngStream rng(seed);
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double m = -2 + 4 * rng.uniform(), v = std::exp(-3 + 4 * rng.uniform());
    const double a = 0.5 + 9.5 * rng.uniform(), b = 0.5 + 9.5 * rng.uniform();
    worst = std::max({worst, std::abs(kl_gaussian_value(m, v, m, v)), std::abs(kl_beta_value(a, b, a, b))});
  }
  return worst;
}

/// Single-sample Concrete KL estimates with identical q and p.
inline McStat concrete_kl_identical(std::size_t n, double pi, double lambda, std::uint64_t seed) {
  const auto q = ConcreteParams::from_probability(Var::constant(Tensor::vector({pi})), lambda);
  Sampler s{RngStream(seed)};
  std::vector<double> xs(n);
  for (auto& x : xs) x = kl_concrete_mc(q, q, s, 1).item();
  return mc_stat(xs);
}

/// Mean hard-mask row sum under the Beta(alpha, 1) stick prior with
/// truncation K, over `draws` independent stick draws.
inline double ibp_prior_mean_active(double alpha, std::size_t K, std::size_t draws, std::uint64_t seed) {
  const BetaParams sticks{Var::constant(BetaParams::raw_for(Tensor({K}, alpha))),
                          Var::constant(BetaParams::raw_for(Tensor({K}, 1.0)))};
  Sampler s{RngStream(seed)};
  double total = 0.0;
  for (std::size_t d = 0; d < draws; ++d) {
    const MaskSample m = ibp_sample_masks({sticks, 1.0}, 1, s, MaskMode::hard, 1);
    total += sum_all(m.z.value());
  }
  return total / static_cast<double>(draws);
}

inline Dataset toy_blobs(std::size_t per_class, std::size_t dim, std::uint64_t seed) {
  return make_split_synthetic(1, per_class, dim, 4.0, seed, 1).tasks.front().train;
}

/// A small model whose posterior differs from its prior everywhere, so
/// every ELBO term is active.
inline ModelState perturbed_model(PriorFamily family, std::size_t dim, std::size_t K, std::uint64_t seed) {
  NetworkSpec spec{dim, {K}, {2}, HeadMode::multi_head, family, Activation::relu};
  PriorInit init;
  if (family == PriorFamily::hibp) init.child_alpha = {3.0};
  TrainConfig cfg;
  cfg.lambda_q = cfg.lambda_p = 0.7;
  cfg.n_stick_samples = 3;
  ModelState s = make_model(spec, init, cfg, seed);
  RngStream r = RngStream(seed).derive(77);
  for (auto& [name, t] : s.posterior) {
    for (auto& v : t.values()) {
      if (name.find("log_var") != std::string::npos) {
        v = -2.0 + 0.5 * r.normal();
      } else if (name.find(".mu") != std::string::npos) {
        v = 0.8 * r.normal();
      } else if (name.find("raw_") != std::string::npos) {
        v += 0.5 * r.normal();
      } else {
        v *= 2.0;  // child concentration differs from the prior's
      }
    }
  }
  return s;
}

/// Max relative error of the full negative-ELBO gradient against central
/// differences with every random number frozen, on `n_coords` random
/// trainable coordinates.
inline double elbo_gradient_check(PriorFamily family, std::uint64_t seed, std::size_t n_coords = 20) {
  const ModelState s = perturbed_model(family, 2, 5, seed);
  const Dataset data = toy_blobs(4, 2, seed + 1);
  const std::set<std::string> trainable = trainable_parameters(s, 0);
  const Binding p = Binding::constants(s.prior);

  auto tape = std::make_shared<NoiseTape>();
  const Binding q(s.posterior, trainable);
  Sampler rec(RngStream(seed).derive(5), tape);
  const ElboTerms t = negative_elbo(s, q, p, data.x, data.y, 40, 0, rec);
  const Gradients g = backward(t.loss);

  auto loss_at = [&](const ParamStore& post) {
    ModelState m = s;
    m.posterior = post;
    Sampler rep = Sampler::replay(tape);
    const double l = negative_elbo(m, Binding::constants(post), p, data.x, data.y, 40, 0, rep).loss.item();
    if (tape->cursor != tape->values.size()) throw std::logic_error("replay consumed a different amount of noise");
    return l;
  };
  if (std::abs(loss_at(s.posterior) - t.loss.item()) > 1e-9 * std::max(1.0, std::abs(t.loss.item()))) {
    throw std::logic_error("replayed loss differs from the recorded pass");
  }

  std::vector<std::pair<std::string, std::size_t>> coords;
  for (const auto& name : trainable)
    for (std::size_t i = 0; i < s.posterior.at(name).size(); ++i) coords.emplace_back(name, i);
  RngStream r = RngStream(seed).derive(9);
  r.shuffle(coords.begin(), coords.end());
  coords.resize(std::min(n_coords, coords.size()));

  double worst = 0.0;
  for (const auto& [name, i] : coords) {
    const double analytic = g.of(q.get(name))[i];
    ParamStore plus = s.posterior, minus = s.posterior;
    const double x0 = s.posterior.at(name)[i];
    const double h = 1e-5 * std::max(1.0, std::abs(x0));
    plus.at(name)[i] = x0 + h;
    minus.at(name)[i] = x0 - h;
    const double fd = (loss_at(plus) - loss_at(minus)) / (2 * h);
    worst = std::max(worst, std::abs(analytic - fd) / std::max({std::abs(fd), std::abs(analytic), 1e-6}));
  }
  return worst;
}

struct ZeroKl {
  double kl_structure = 0.0;  // largest |value| over repeats
  double kl_weights = 0.0;
  McStat concrete;
};

/// Trains one task briefly, transfers the posterior to the prior, and
/// evaluates the next task's initial ELBO terms over `repeats` noise draws.
/// Single-head, so every parameter of the next objective was transferred.
inline ZeroKl zero_kl_after_advance(PriorFamily family, std::uint64_t seed, std::size_t repeats = 200) {
  NetworkSpec spec{4, {10}, {2}, HeadMode::single_head, family, Activation::relu};
  PriorInit init;
  if (family == PriorFamily::hibp) init.child_alpha = {4.0};
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 32;
  cfg.ml_epochs = 5;
  cfg.lambda_q = cfg.lambda_p = 0.7;
  const auto seq = make_split_synthetic(2, 40, 4, 4.0, seed, 10);
  ModelState s = make_model(spec, init, cfg, seed);
  s = train_task(std::move(s), seq.tasks[0], cfg, seed).state;
  s = advance_prior(std::move(s), false, 1.0);

  ZeroKl out;
  const Binding q(s.posterior, trainable_parameters(s, 0));
  const Binding p = Binding::constants(s.prior);
  const Dataset& next = seq.tasks[1].train;
  std::vector<double> concrete;
  for (std::size_t r = 0; r < repeats; ++r) {
    Sampler smp(RngStream(seed).derive(1000 + r));
    const ElboTerms t = negative_elbo(s, q, p, next.x, next.y, next.size(), 0, smp);
    out.kl_structure = std::max(out.kl_structure, std::abs(t.kl_structure.item()));
    out.kl_weights = std::max(out.kl_weights, std::abs(t.kl_weights.item()));
    concrete.push_back(t.kl_masks.item());
  }
  out.concrete = mc_stat(concrete);
  return out;
}

/// Mean over seeds and tasks of |median active(layer 1) - median active(layer 2)|
/// for a two-layer network trained on the increasing-difficulty suite.
inline double layer_median_spread(const std::string& model, std::size_t n_seeds, double child_alpha) {
  ExperimentConfig c;
  c.task_suite = "increasing";
  c.model = model;
  c.K = 20;
  c.layers = 2;
  c.epochs = 10;
  c.ml_init_epochs = 20;
  c.batch_size = 32;
  c.lr_init = 0.01;
  c.n_tasks = 6;
  c.n_per_class = 100;
  c.boundary_multiplier = 2.0;
  c.child_alpha_default = child_alpha;
  c.lambda1 = c.lambda2 = 0.7;
  c.save_snapshots = false;
  double total = 0.0;
  std::size_t n = 0;
  for (std::uint64_t seed = 0; seed < n_seeds; ++seed) {
    const SeedRun r = run_seed(c, seed);
    for (std::size_t i = 0; i + 1 < r.structure.size(); i += 2, ++n)
      total += std::abs(r.structure[i].median_active - r.structure[i + 1].median_active);
  }
  return total / static_cast<double>(n);
}

}  // namespace checks
