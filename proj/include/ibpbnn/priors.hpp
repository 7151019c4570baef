#pragma once

// Truncated stick-breaking IBP and hierarchical IBP posteriors, plus the
// per-layer neuron masks they induce.

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "ibpbnn/distributions.hpp"

namespace ibpbnn {

enum class MaskMode { relaxed, hard };

/// Per-layer neuron selection for one forward pass.
struct MaskSample {
  Var z;       // batch x K, in (0,1) when relaxed and {0,1} when hard
  Var logits;  // pre-sigmoid Concrete logits (relaxed mode only)
  Var pis;     // length-K Bernoulli probabilities used for this draw
};

/// Independent IBP over one hidden layer.
struct IbpLayerPosterior {
  BetaParams sticks;
  double temperature = 1.0;  // lambda_1 of the relaxed masks
};

/// Shared global sticks plus per-layer child concentrations.
struct HibpPosterior {
  BetaParams global_sticks;
  std::vector<double> child_concentration;  // alpha_j, one per layer
  double temperature = 1.0;
};

/// Child Beta shapes are floored here when the global probability saturates.
inline constexpr double kChildShapeFloor = 0.01;

/// pi_k = prod_{i<=k} v_i, evaluated as exp(cumsum(log v)).
inline Var stick_products(const Var& v) { return exp(cumsum(log(v))); }

inline Var clamp_probability(const Var& pi) { return clamp(pi, kProbClamp, 1.0 - kProbClamp); }

/// Mean of the stick products over `n_samples` independent stick draws,
/// clamped away from {0, 1}.
inline Var stick_probabilities(const BetaParams& sticks, Sampler& sampler, std::size_t n_samples) {
  if (n_samples == 0) throw std::invalid_argument("need at least one stick sample");
  const Var a = sticks.alpha();
  const Var b = sticks.beta();
  Var acc;
  for (std::size_t s = 0; s < n_samples; ++s) {
    const Var pi = stick_products(beta_rsample(a, b, sampler));
    acc = s == 0 ? pi : acc + pi;
  }
  return clamp_probability(scale(acc, 1.0 / static_cast<double>(n_samples)));
}

/// Child shapes (alpha_j pi0, alpha_j (1 - pi0)), each floored at kChildShapeFloor.
inline std::pair<Var, Var> child_beta_shapes(const Var& pi0, double concentration) {
  return {clamp_min(scale(pi0, concentration), kChildShapeFloor),
          clamp_min(scale(1.0 - pi0, concentration), kChildShapeFloor)};
}

/// pi_jk ~ Beta(alpha_j pi0_k, alpha_j (1 - pi0_k)), clamped; with
/// n_samples > 1, the average of that many independent child draws.
inline Var hibp_child_probabilities(const Var& pi0, double concentration, Sampler& sampler,
                                    std::size_t n_samples = 1) {
  if (!(concentration > 0)) throw std::invalid_argument("child concentration must be positive");
  if (n_samples == 0) throw std::invalid_argument("need at least one child sample");
  const auto [a, b] = child_beta_shapes(pi0, concentration);
  Var acc;
  for (std::size_t s = 0; s < n_samples; ++s) {
    const Var pi = beta_rsample(a, b, sampler);
    acc = s == 0 ? pi : acc + pi;
  }
  return clamp_probability(scale(acc, 1.0 / static_cast<double>(n_samples)));
}

/// Draws a batch x K mask from per-neuron probabilities `pis`.
inline MaskSample sample_masks(const Var& pis, double temperature, std::size_t batch, Sampler& sampler,
                               MaskMode mode) {
  if (batch == 0) throw std::invalid_argument("mask batch must be at least 1");
  const Shape shape{batch, pis.size()};
  const auto concrete = ConcreteParams::from_probability(pis, temperature);
  MaskSample m;
  m.pis = pis;
  if (mode == MaskMode::relaxed) {
    m.logits = concrete_rsample_log(concrete, sampler, shape);
    m.z = sigmoid(m.logits);
  } else {
    m.z = Var::constant(bernoulli_hard_sample(concrete.location.value(), sampler, shape));
  }
  return m;
}

/// Stick sample(s) shared across the batch, then per-datum masks.
inline MaskSample ibp_sample_masks(const IbpLayerPosterior& p, std::size_t batch, Sampler& sampler,
                                   MaskMode mode, std::size_t n_stick_samples = 1) {
  const Var pis = stick_probabilities(p.sticks, sampler, n_stick_samples);
  return sample_masks(pis, p.temperature, batch, sampler, mode);
}

/// Global sticks, then the child probabilities of layer `layer` (0-based).
inline MaskSample hibp_sample_masks(const HibpPosterior& p, std::size_t layer, std::size_t batch,
                                    Sampler& sampler, MaskMode mode, std::size_t n_stick_samples = 1) {
  if (layer >= p.child_concentration.size()) {
    throw std::out_of_range("hibp layer " + std::to_string(layer) + " out of range");
  }
  const Var pi0 = stick_probabilities(p.global_sticks, sampler, n_stick_samples);
  const Var pis = hibp_child_probabilities(pi0, p.child_concentration[layer], sampler, n_stick_samples);
  return sample_masks(pis, p.temperature, batch, sampler, mode);
}

inline Var kl_ibp_sticks(const IbpLayerPosterior& q, const IbpLayerPosterior& prior) {
  return kl_beta(q.sticks, prior.sticks);
}

/// Global stick KL plus, for every layer, the KL between the child Betas
/// under the posterior and prior concentrations, both conditioned on the
/// same sampled global probabilities `pi0`.
inline Var kl_hibp(const HibpPosterior& q, const HibpPosterior& prior, const Var& pi0) {
  if (q.child_concentration.size() != prior.child_concentration.size()) {
    throw std::invalid_argument("kl_hibp: layer count differs between posterior and prior");
  }
  Var total = kl_beta(q.global_sticks, prior.global_sticks);
  for (std::size_t j = 0; j < q.child_concentration.size(); ++j) {
    if (q.child_concentration[j] == prior.child_concentration[j]) continue;
    const auto [aq, bq] = child_beta_shapes(pi0, q.child_concentration[j]);
    const auto [ap, bp] = child_beta_shapes(pi0, prior.child_concentration[j]);
    total = total + kl_beta(aq, bq, ap, bp);
  }
  return total;
}

/// Single-sample Concrete KL of a relaxed mask: the logits drawn under
/// (q_pis, lambda_q) scored by both densities, summed over batch and neurons.
inline Var kl_masks(const MaskSample& mask, const Var& q_pis, const Var& prior_pis, double lambda_q,
                    double lambda_p) {
  if (!mask.logits) throw std::invalid_argument("kl_masks requires a relaxed mask sample");
  const auto q = ConcreteParams::from_probability(q_pis, lambda_q);
  const auto p = ConcreteParams::from_probability(prior_pis, lambda_p);
  return sum(concrete_log_density(mask.logits, q) - concrete_log_density(mask.logits, p));
}

/// Per-row count of mask entries above `threshold`.
inline std::vector<std::size_t> active_neuron_count(const Tensor& z, double threshold = 0.1) {
  if (z.rank() != 2) throw ShapeError("active_neuron_count: expected batch x K, got " + shape_str(z.shape()));
  const std::size_t n = z.dim(0), k = z.dim(1);
  std::vector<std::size_t> counts(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j)
      if (z[i * k + j] > threshold) ++counts[i];
  return counts;
}

}  // namespace ibpbnn
