#pragma once

// Reparameterizable variational families: diagonal Gaussian, Beta with
// implicit gradients, and the binary Concrete relaxation of a Bernoulli.

#include <boost/math/special_functions/beta.hpp>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>

#include <cmath>
#include <memory>
#include <utility>
#include <vector>

#include "ibpbnn/autodiff.hpp"
#include "ibpbnn/rng.hpp"

namespace ibpbnn {

namespace math_policy {
using namespace boost::math::policies;
using Lenient = policy<overflow_error<ignore_error>, underflow_error<ignore_error>,
                       denorm_error<ignore_error>, evaluation_error<ignore_error>>;
}  // namespace math_policy

/// Lower bound added after softplus so Beta shapes stay strictly positive.
inline constexpr double kBetaFloor = 0.01;
/// Beta samples and stick probabilities are kept in [kProbClamp, 1 - kProbClamp].
inline constexpr double kProbClamp = 1e-6;

inline double inverse_softplus(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

// ---------------------------------------------------------------------------
// Gaussian

struct GaussianParams {
  Var mu;
  Var log_var;  // sigma^2 = exp(log_var)
};

inline Var gaussian_rsample_with(const GaussianParams& p, const Tensor& eps) {
  return p.mu + exp(scale(p.log_var, 0.5)) * Var::constant(eps);
}

/// w = mu + sigma * eps with eps ~ N(0, I).
inline Var gaussian_rsample(const GaussianParams& p, Sampler& sampler) {
  Tensor eps(p.mu.shape());
  for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = sampler.normal();
  return gaussian_rsample_with(p, eps);
}

/// Closed-form KL between diagonal Gaussians, summed over elements.
inline Var kl_gaussian(const GaussianParams& q, const GaussianParams& p) {
  if (q.mu.shape() != p.mu.shape()) {
    throw ShapeError("kl_gaussian: shapes " + shape_str(q.mu.shape()) + " and " + shape_str(p.mu.shape()));
  }
  const Var diff = q.mu - p.mu;
  const Var inv_var_p = exp(-p.log_var);
  const Var terms = exp(q.log_var - p.log_var) + diff * diff * inv_var_p + (p.log_var - q.log_var) - 1.0;
  return scale(sum(terms), 0.5);
}

// ---------------------------------------------------------------------------
// Beta

/// Unconstrained Beta parameters; shapes are softplus(raw) + kBetaFloor.
struct BetaParams {
  Var raw_a;
  Var raw_b;

  Var alpha() const { return softplus(raw_a) + kBetaFloor; }
  Var beta() const { return softplus(raw_b) + kBetaFloor; }

  /// Raw values that map to the given shapes (each must exceed kBetaFloor).
  static Tensor raw_for(const Tensor& shape_values) {
    return map(shape_values, [](double s) { return inverse_softplus(s - kBetaFloor); });
  }
};

/// Regularized incomplete Beta function I_v(a, b).
inline double beta_cdf(double a, double b, double v) {
  if (v <= 0.0) return 0.0;
  if (v >= 1.0) return 1.0;
  return boost::math::ibeta(a, b, v, math_policy::Lenient());
}

inline double beta_pdf(double a, double b, double v) {
  return boost::math::ibeta_derivative(a, b, v, math_policy::Lenient());
}

inline double beta_quantile(double a, double b, double u) {
  return boost::math::ibeta_inv(a, b, u, math_policy::Lenient());
}

/// dv/da and dv/db of v = F^{-1}(u; a, b) at fixed u, from implicit
/// differentiation of the CDF: dv/dphi = -(dF/dphi) / pdf(v). The CDF
/// derivatives are central differences with step 1e-4 * max(1, phi).
inline std::pair<double, double> beta_implicit_grad(double a, double b, double v) {
  const double pdf = beta_pdf(a, b, v);
  if (!(pdf > 0.0) || !std::isfinite(pdf)) return {0.0, 0.0};
  const double ha = 1e-4 * std::max(1.0, a);
  const double hb = 1e-4 * std::max(1.0, b);
  const double dfa = (beta_cdf(a + ha, b, v) - beta_cdf(a - ha, b, v)) / (2.0 * ha);
  const double dfb = (beta_cdf(a, b + hb, v) - beta_cdf(a, b - hb, v)) / (2.0 * hb);
  return {-dfa / pdf, -dfb / pdf};
}

/// Elementwise Beta(alpha, beta) sample by inverting the CDF at one uniform
/// per element. One uniform per draw keeps noise streams aligned when the
/// same stream is reused under nearby parameters (rejection samplers would
/// drift out of step). The backward pass uses the implicit gradient. Samples are clamped
/// to [kProbClamp, 1 - kProbClamp]; clamped entries pass no gradient.
inline Var beta_rsample(const Var& alpha, const Var& beta, Sampler& sampler) {
  if (alpha.shape() != beta.shape()) {
    throw ShapeError("beta_rsample: shapes " + shape_str(alpha.shape()) + " and " + shape_str(beta.shape()));
  }
  auto clamped = std::make_shared<std::vector<bool>>();
  Sampler* s = &sampler;
  const CustomOp op = register_custom_gradient(
      [s, clamped](std::span<const Tensor> in) {
        const Tensor& a = in[0];
        const Tensor& b = in[1];
        Tensor v(a.shape());
        clamped->assign(a.size(), false);
        for (std::size_t i = 0; i < v.size(); ++i) {
          const double ai = a[i], bi = b[i];
          const double raw = s->beta_like([&](RngStream& r) { return beta_quantile(ai, bi, r.uniform()); },
                                          [&](double x) { return beta_cdf(ai, bi, x); },
                                          [&](double u) { return beta_quantile(ai, bi, u); });
          v[i] = std::clamp(raw, kProbClamp, 1.0 - kProbClamp);
          (*clamped)[i] = !(raw > kProbClamp && raw < 1.0 - kProbClamp);
        }
        return v;
      },
      [clamped](std::span<const Tensor> in, const Tensor& v, const Tensor& up) {
        Tensor ga = Tensor::zeros_like(in[0]);
        Tensor gb = Tensor::zeros_like(in[1]);
        for (std::size_t i = 0; i < v.size(); ++i) {
          if ((*clamped)[i] || up[i] == 0.0) continue;
          const auto [da, db] = beta_implicit_grad(in[0][i], in[1][i], v[i]);
          ga[i] = up[i] * da;
          gb[i] = up[i] * db;
        }
        return std::vector<Tensor>{ga, gb};
      });
  return op({alpha, beta});
}

inline Var beta_rsample(const BetaParams& p, Sampler& sampler) {
  return beta_rsample(p.alpha(), p.beta(), sampler);
}

inline double log_beta_fn(double a, double b) { return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b); }

/// KL(Beta(aq, bq) || Beta(ap, bp)) summed over elements, differentiable in
/// all four shape tensors (digamma / trigamma closed forms).
inline Var kl_beta(const Var& aq, const Var& bq, const Var& ap, const Var& bp) {
  const Shape& s = aq.shape();
  if (bq.shape() != s || ap.shape() != s || bp.shape() != s) {
    throw ShapeError("kl_beta: shape mismatch between " + shape_str(s) + " and " + shape_str(ap.shape()));
  }
  using boost::math::digamma;
  using boost::math::trigamma;
  const CustomOp op = register_custom_gradient(
      [](std::span<const Tensor> in) {
        double total = 0.0;
        for (std::size_t i = 0; i < in[0].size(); ++i) {
          const double a = in[0][i], b = in[1][i], a0 = in[2][i], b0 = in[3][i];
          const double dab = digamma(a + b);
          total += log_beta_fn(a0, b0) - log_beta_fn(a, b) + (a - a0) * digamma(a) +
                   (b - b0) * digamma(b) + (a0 - a + b0 - b) * dab;
        }
        return Tensor::scalar(total);
      },
      [](std::span<const Tensor> in, const Tensor&, const Tensor& up) {
        const double g = up.item();
        std::vector<Tensor> out(4, Tensor::zeros_like(in[0]));
        for (std::size_t i = 0; i < in[0].size(); ++i) {
          const double a = in[0][i], b = in[1][i], a0 = in[2][i], b0 = in[3][i];
          const double t_ab = trigamma(a + b);
          const double rest = a0 - a + b0 - b;
          out[0][i] = g * ((a - a0) * trigamma(a) + rest * t_ab);
          out[1][i] = g * ((b - b0) * trigamma(b) + rest * t_ab);
          const double d_ab = digamma(a + b), d_ab0 = digamma(a0 + b0);
          out[2][i] = g * (digamma(a0) - d_ab0 - digamma(a) + d_ab);
          out[3][i] = g * (digamma(b0) - d_ab0 - digamma(b) + d_ab);
        }
        return out;
      });
  return op({aq, bq, ap, bp});
}

inline Var kl_beta(const BetaParams& q, const BetaParams& p) {
  return kl_beta(q.alpha(), q.beta(), p.alpha(), p.beta());
}

// ---------------------------------------------------------------------------
// Binary Concrete

/// Binary Concrete with location log(alpha) and temperature lambda. The
/// relaxed variable sigmoid(y) concentrates on 1 with probability
/// alpha / (1 + alpha) as lambda -> 0, so a relaxation of Bern(pi) uses the
/// log-odds location log(pi) - log(1 - pi).
struct ConcreteParams {
  Var location;
  double temperature = 1.0;

  static ConcreteParams from_probability(const Var& pi, double temperature) {
    return {log(pi) - log1m(pi), temperature};
  }
};

/// Pre-sigmoid logits y = (location + log u - log(1 - u)) / lambda, with the
/// location broadcast to `shape`.
inline Var concrete_rsample_log(const ConcreteParams& p, Sampler& sampler, const Shape& shape) {
  if (!(p.temperature > 0)) throw std::invalid_argument("concrete temperature must be positive");
  Tensor logistic(shape);
  for (std::size_t i = 0; i < logistic.size(); ++i) {
    const double u = sampler.uniform();
    logistic[i] = std::log(u) - std::log1p(-u);
  }
  return scale(broadcast(p.location, shape) + Var::constant(logistic), 1.0 / p.temperature);
}

inline Var concrete_rsample_log(const ConcreteParams& p, Sampler& sampler) {
  return concrete_rsample_log(p, sampler, p.location.shape());
}

/// Elementwise log-density of the pre-sigmoid logit:
/// log lambda - lambda y + loc - 2 log(1 + exp(-lambda y + loc)).
inline Var concrete_log_density(const Var& y, const ConcreteParams& p) {
  const Var loc = broadcast(p.location, y.shape());
  const Var t = loc - scale(y, p.temperature);
  return t - scale(softplus(t), 2.0) + std::log(p.temperature);
}

/// Monte Carlo KL(q || p) between binary Concretes over logits drawn from q,
/// averaged over `n_samples` draws of `shape`.
inline Var kl_concrete_mc(const ConcreteParams& q, const ConcreteParams& p, Sampler& sampler,
                          std::size_t n_samples, const Shape& shape) {
  if (n_samples == 0) throw std::invalid_argument("kl_concrete_mc needs at least one sample");
  Var total;
  for (std::size_t s = 0; s < n_samples; ++s) {
    const Var y = concrete_rsample_log(q, sampler, shape);
    const Var term = sum(concrete_log_density(y, q) - concrete_log_density(y, p));
    total = s == 0 ? term : total + term;
  }
  return scale(total, 1.0 / static_cast<double>(n_samples));
}

inline Var kl_concrete_mc(const ConcreteParams& q, const ConcreteParams& p, Sampler& sampler,
                          std::size_t n_samples = 1) {
  return kl_concrete_mc(q, p, sampler, n_samples, q.location.shape());
}

/// Hard {0,1} draws, 1 with probability sigmoid(location). Uses the same
/// uniform as the relaxed sampler (z = [location + logit(u) > 0]), so the
/// zero-temperature relaxation coincides with this draw at matched noise.
inline Tensor bernoulli_hard_sample(const Tensor& location, Sampler& sampler, const Shape& shape) {
  const Tensor loc = broadcast_to(location, shape);
  Tensor z(shape);
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double u = sampler.uniform();
    z[i] = loc[i] + (std::log(u) - std::log1p(-u)) > 0.0 ? 1.0 : 0.0;
  }
  return z;
}

inline Tensor bernoulli_hard_sample(const ConcreteParams& p, Sampler& sampler) {
  return bernoulli_hard_sample(p.location.value(), sampler, p.location.shape());
}

}  // namespace ibpbnn
