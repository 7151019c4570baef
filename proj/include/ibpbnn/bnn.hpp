#pragma once

// Mean-field Gaussian dense layers, masked by per-layer neuron selections,
// assembled into multi-head or single-head classifiers.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "ibpbnn/distributions.hpp"
#include "ibpbnn/optim.hpp"

namespace ibpbnn {

enum class Activation { relu, identity };
enum class HeadMode { multi_head, single_head };
enum class PriorFamily { ibp, hibp, none };

inline const char* to_string(HeadMode m) { return m == HeadMode::multi_head ? "multi_head" : "single_head"; }
inline const char* to_string(PriorFamily f) {
  switch (f) {
    case PriorFamily::ibp: return "ibp";
    case PriorFamily::hibp: return "hibp";
    case PriorFamily::none: return "none";
  }
  return "none";
}
inline const char* to_string(Activation a) { return a == Activation::relu ? "relu" : "identity"; }

struct NetworkSpec {
  std::size_t input_dim = 0;
  std::vector<std::size_t> layer_truncations;  // K per hidden layer
  std::vector<std::size_t> head_dims;          // outputs per head
  HeadMode head_mode = HeadMode::multi_head;
  PriorFamily prior_family = PriorFamily::ibp;
  Activation activation = Activation::relu;

  std::size_t hidden_layers() const { return layer_truncations.size(); }
  std::size_t fan_in(std::size_t layer) const { return layer == 0 ? input_dim : layer_truncations[layer - 1]; }
  std::size_t last_width() const { return layer_truncations.empty() ? input_dim : layer_truncations.back(); }

  void validate() const {
    if (input_dim == 0) throw std::invalid_argument("network input_dim must be positive");
    if (layer_truncations.empty()) throw std::invalid_argument("network needs at least one hidden layer");
    if (head_dims.empty()) throw std::invalid_argument("network needs at least one head");
    for (auto k : layer_truncations)
      if (k == 0) throw std::invalid_argument("layer truncation K must be positive");
    for (auto c : head_dims)
      if (c == 0) throw std::invalid_argument("head output dimension must be positive");
    if (prior_family == PriorFamily::hibp &&
        std::adjacent_find(layer_truncations.begin(), layer_truncations.end(), std::not_equal_to<>()) !=
            layer_truncations.end()) {
      throw std::invalid_argument("hierarchical IBP requires the same truncation K in every layer");
    }
  }
};

using ParamStore = std::map<std::string, Tensor>;

namespace param {

inline std::string hidden(std::size_t j) { return "hidden" + std::to_string(j); }
inline std::string head(std::size_t h) { return "head" + std::to_string(h); }
inline std::string ibp(std::size_t j) { return "ibp" + std::to_string(j); }
inline const std::string hibp = "hibp";
inline const std::string hibp_child_alpha = "hibp.child_alpha";

inline std::string w_mu(const std::string& layer) { return layer + ".w.mu"; }
inline std::string w_log_var(const std::string& layer) { return layer + ".w.log_var"; }
inline std::string b_mu(const std::string& layer) { return layer + ".b.mu"; }
inline std::string b_log_var(const std::string& layer) { return layer + ".b.log_var"; }
inline std::string raw_a(const std::string& prior) { return prior + ".raw_a"; }
inline std::string raw_b(const std::string& prior) { return prior + ".raw_b"; }

inline std::vector<std::string> dense_keys(const std::string& layer) {
  return {w_mu(layer), w_log_var(layer), b_mu(layer), b_log_var(layer)};
}

}  // namespace param

/// Graph handles for one forward pass: trainable entries become leaves,
/// everything else enters as constants.
class Binding {
 public:
  Binding() = default;
  Binding(const ParamStore& store, const std::set<std::string>& trainable) {
    for (const auto& [name, t] : store) {
      vars_.emplace(name, trainable.count(name) ? Var::leaf(t) : Var::constant(t));
    }
  }
  static Binding constants(const ParamStore& store) { return Binding(store, {}); }

  const Var& get(const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return it->second;
  }
  bool has(const std::string& name) const { return vars_.count(name) != 0; }
  const std::map<std::string, Var>& all() const { return vars_; }

 private:
  std::map<std::string, Var> vars_;
};

struct VariationalDense {
  GaussianParams weights;  // fan_in x K
  GaussianParams biases;   // K
  Activation activation = Activation::relu;

  static VariationalDense bind(const Binding& b, const std::string& layer, Activation act) {
    return {{b.get(param::w_mu(layer)), b.get(param::w_log_var(layer))},
            {b.get(param::b_mu(layer)), b.get(param::b_log_var(layer))},
            act};
  }
};

/// Concrete weight values for one layer.
struct DenseSample {
  Var w;
  Var b;
  Activation activation = Activation::relu;
};

inline DenseSample sample_dense(const VariationalDense& layer, Sampler& sampler) {
  Var w = gaussian_rsample(layer.weights, sampler);
  Var b = gaussian_rsample(layer.biases, sampler);
  return {std::move(w), std::move(b), layer.activation};
}

inline DenseSample mean_dense(const VariationalDense& layer) {
  return {layer.weights.mu, layer.biases.mu, layer.activation};
}

inline Var apply_dense(const DenseSample& layer, const Var& x) {
  const Var pre = matmul(x, layer.w) + layer.b;
  return layer.activation == Activation::relu ? relu(pre) : pre;
}

/// h_j = f(h_{j-1} W_j + b_j) * z_j through the hidden layers, then the head.
/// An empty entry in `masks` (or an empty `masks`) leaves that layer unmasked.
inline Var forward(const std::vector<DenseSample>& hidden, const DenseSample& head, const Var& x,
                   const std::vector<Var>& masks) {
  if (!masks.empty() && masks.size() != hidden.size()) {
    throw std::invalid_argument("forward: " + std::to_string(masks.size()) + " masks for " +
                                std::to_string(hidden.size()) + " hidden layers");
  }
  Var h = x;
  for (std::size_t j = 0; j < hidden.size(); ++j) {
    if (h.value().rank() != 2 || h.shape()[1] != hidden[j].w.shape()[0]) {
      throw ShapeError("forward: layer " + std::to_string(j) + " expects input width " +
                       std::to_string(hidden[j].w.shape()[0]) + ", got " + shape_str(h.shape()));
    }
    h = apply_dense(hidden[j], h);
    if (!masks.empty() && masks[j]) h = h * masks[j];
  }
  if (h.shape()[1] != head.w.shape()[0]) {
    throw ShapeError("forward: head expects width " + std::to_string(head.w.shape()[0]) + ", got " +
                     shape_str(h.shape()));
  }
  return matmul(h, head.w) + head.b;
}

inline std::vector<VariationalDense> bind_hidden(const NetworkSpec& spec, const Binding& b) {
  std::vector<VariationalDense> out;
  for (std::size_t j = 0; j < spec.hidden_layers(); ++j)
    out.push_back(VariationalDense::bind(b, param::hidden(j), spec.activation));
  return out;
}

inline VariationalDense bind_head(const Binding& b, std::size_t head) {
  return VariationalDense::bind(b, param::head(head), Activation::identity);
}

/// Sum of Gaussian KLs over hidden layers and the listed heads.
inline Var kl_weights(const NetworkSpec& spec, const Binding& q, const Binding& prior,
                      const std::vector<std::size_t>& heads) {
  std::vector<std::string> layers;
  for (std::size_t j = 0; j < spec.hidden_layers(); ++j) layers.push_back(param::hidden(j));
  for (auto h : heads) layers.push_back(param::head(h));
  Var total = Var::constant(0.0);
  for (const auto& l : layers) {
    const auto lq = VariationalDense::bind(q, l, Activation::identity);
    const auto lp = VariationalDense::bind(prior, l, Activation::identity);
    total = total + kl_gaussian(lq.weights, lp.weights) + kl_gaussian(lq.biases, lp.biases);
  }
  return total;
}

/// Initial log-variance of every variational weight.
inline constexpr double kInitLogVar = -6.0;

namespace detail {

/// Normal(0, std) truncated at two standard deviations.
inline Tensor truncated_normal(const Shape& shape, double std, RngStream& rng) {
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) {
    double e;
    do {
      e = rng.normal();
    } while (std::abs(e) > 2.0);
    t[i] = std * e;
  }
  return t;
}

inline void init_dense(ParamStore& post, ParamStore& prior, const std::string& layer, std::size_t fan_in,
                       std::size_t width, double prior_var, RngStream& rng) {
  post[param::w_mu(layer)] = truncated_normal({fan_in, width}, 0.1, rng);
  post[param::w_log_var(layer)] = Tensor({fan_in, width}, kInitLogVar);
  post[param::b_mu(layer)] = truncated_normal({width}, 0.1, rng);
  post[param::b_log_var(layer)] = Tensor({width}, kInitLogVar);
  prior[param::w_mu(layer)] = Tensor({fan_in, width}, 0.0);
  prior[param::w_log_var(layer)] = Tensor({fan_in, width}, std::log(prior_var));
  prior[param::b_mu(layer)] = Tensor({width}, 0.0);
  prior[param::b_log_var(layer)] = Tensor({width}, std::log(prior_var));
}

}  // namespace detail

/// Structural hyperparameters of the first-task priors.
struct PriorInit {
  double gaussian_var = 1.0;       // N(0, var) on every weight
  double stick_alpha = 5.0;        // Beta(alpha, stick_beta) sticks
  double stick_beta = 1.0;
  std::vector<double> child_alpha; // H-IBP only; one per layer
};

/// Fresh posterior and first-task prior for `spec`. Only head 0 is created;
/// later heads are added by add_head.
inline std::pair<ParamStore, ParamStore> init_network(const NetworkSpec& spec, const PriorInit& init,
                                                      RngStream& rng) {
  spec.validate();
  ParamStore post, prior;
  for (std::size_t j = 0; j < spec.hidden_layers(); ++j)
    detail::init_dense(post, prior, param::hidden(j), spec.fan_in(j), spec.layer_truncations[j],
                       init.gaussian_var, rng);
  detail::init_dense(post, prior, param::head(0), spec.last_width(), spec.head_dims[0], init.gaussian_var, rng);

  auto add_sticks = [&](const std::string& name, std::size_t k) {
    const Tensor ra = BetaParams::raw_for(Tensor({k}, init.stick_alpha));
    const Tensor rb = BetaParams::raw_for(Tensor({k}, init.stick_beta));
    post[param::raw_a(name)] = ra;
    post[param::raw_b(name)] = rb;
    prior[param::raw_a(name)] = ra;
    prior[param::raw_b(name)] = rb;
  };
  if (spec.prior_family == PriorFamily::ibp) {
    for (std::size_t j = 0; j < spec.hidden_layers(); ++j) add_sticks(param::ibp(j), spec.layer_truncations[j]);
  } else if (spec.prior_family == PriorFamily::hibp) {
    add_sticks(param::hibp, spec.layer_truncations[0]);
    if (init.child_alpha.size() != spec.hidden_layers()) {
      throw std::invalid_argument("hierarchical IBP needs one child concentration per hidden layer");
    }
    post[param::hibp_child_alpha] = Tensor::vector(init.child_alpha);
    prior[param::hibp_child_alpha] = Tensor::vector(init.child_alpha);
  }
  return {std::move(post), std::move(prior)};
}

/// Adds head `h` with a small random posterior and an N(0, prior_var) prior.
inline void add_head(const NetworkSpec& spec, ParamStore& post, ParamStore& prior, std::size_t h,
                     double prior_var, RngStream& rng) {
  if (h >= spec.head_dims.size()) throw std::out_of_range("head " + std::to_string(h) + " not in spec");
  detail::init_dense(post, prior, param::head(h), spec.last_width(), spec.head_dims[h], prior_var, rng);
}

inline bool has_head(const ParamStore& store, std::size_t h) { return store.count(param::w_mu(param::head(h))) != 0; }

struct MlInitConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 128;
  double lr = 1e-3;
};

/// Point-estimate pre-training of the means of the hidden layers and head
/// `head` (softmax cross-entropy, masks off, Adam), followed by resetting
/// every affected log-variance to kInitLogVar. Returns final train accuracy.
inline double ml_initialize(const NetworkSpec& spec, ParamStore& post, const Tensor& x,
                            const std::vector<std::size_t>& y, std::size_t head, const MlInitConfig& cfg,
                            RngStream& rng) {
  std::vector<std::string> layers;
  for (std::size_t j = 0; j < spec.hidden_layers(); ++j) layers.push_back(param::hidden(j));
  layers.push_back(param::head(head));
  std::set<std::string> trainable;
  for (const auto& l : layers) {
    trainable.insert(param::w_mu(l));
    trainable.insert(param::b_mu(l));
  }
  const std::size_t n = x.dim(0), d = x.dim(1);
  Adam opt(LearningRateSchedule{cfg.lr, 1.0, 1.0});
  std::vector<std::size_t> order(n);
  auto logits_of = [&](const Binding& b, const Var& xb) {
    std::vector<DenseSample> hidden;
    for (const auto& l : bind_hidden(spec, b)) hidden.push_back(mean_dense(l));
    return forward(hidden, mean_dense(bind_head(b, head)), xb, {});
  };
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    RngStream er = rng.derive(epoch);
    er.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t m = std::min(cfg.batch_size, n - start);
      Tensor xb({m, d});
      std::vector<std::size_t> yb(m);
      for (std::size_t i = 0; i < m; ++i) {
        const std::size_t r = order[start + i];
        std::copy_n(x.data() + r * d, d, xb.data() + i * d);
        yb[i] = y[r];
      }
      const Binding b(post, trainable);
      const Var loss = scale(sum(pick(log_softmax(logits_of(b, Var::constant(xb))), yb)), -1.0 / m);
      const Gradients g = backward(loss);
      std::map<std::string, Tensor> grads;
      for (const auto& name : trainable) grads.emplace(name, g.of(b.get(name)));
      opt.step(post, grads);
    }
  }
  for (const auto& l : layers) {
    for (auto* key : {&param::w_log_var, &param::b_log_var}) {
      Tensor& lv = post.at((*key)(l));
      std::fill(lv.values().begin(), lv.values().end(), kInitLogVar);
    }
  }
  const Tensor logits = logits_of(Binding::constants(post), Var::constant(x)).value();
  std::size_t correct = 0;
  const std::size_t c = logits.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data() + i * c;
    if (static_cast<std::size_t>(std::max_element(row, row + c) - row) == y[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

}  // namespace ibpbnn
