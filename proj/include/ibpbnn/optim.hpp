#pragma once

#include <cmath>
#include <map>
#include <string>

#include "ibpbnn/tensor.hpp"

namespace ibpbnn {

/// Exponential step decay: lr0 * rate^(step / every).
struct LearningRateSchedule {
  double initial = 1e-3;
  double decay_rate = 0.87;
  double decay_every = 1000.0;

  double at(std::size_t step) const {
    return initial * std::pow(decay_rate, static_cast<double>(step) / decay_every);
  }
};

/// Adam over named tensors.
class Adam {
 public:
  explicit Adam(LearningRateSchedule schedule, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : schedule_(schedule), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  std::size_t steps() const { return step_; }

  /// One update of every entry of `grads` applied to the matching entry of `params`.
  void step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads) {
    const double lr = schedule_.at(step_);
    ++step_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
    for (const auto& [name, g] : grads) {
      Tensor& p = params.at(name);
      auto [it, fresh] = moments_.try_emplace(name);
      if (fresh) {
        it->second.m = Tensor::zeros_like(p);
        it->second.v = Tensor::zeros_like(p);
      }
      Tensor& m = it->second.m;
      Tensor& v = it->second.v;
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
        p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    }
  }

 private:
  struct Moments {
    Tensor m, v;
  };
  LearningRateSchedule schedule_;
  double beta1_, beta2_, eps_;
  std::size_t step_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace ibpbnn
