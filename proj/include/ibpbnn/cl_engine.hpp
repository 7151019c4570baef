#pragma once

// Negative ELBOs, the per-task training loop, sequential posterior-to-prior
// transfer, prediction, head inference and scenario evaluation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ibpbnn/bnn.hpp"
#include "ibpbnn/optim.hpp"
#include "ibpbnn/priors.hpp"
#include "ibpbnn/tasks.hpp"

namespace ibpbnn {

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 128;
  LearningRateSchedule schedule{1e-3, 0.87, 1000.0};
  std::size_t n_stick_samples = 10;
  double lambda_q = 1.0;  // Concrete temperature of the posterior
  double lambda_p = 1.0;  // Concrete temperature of the prior
  std::size_t ml_epochs = 100;
  double ml_lr = 1e-3;
  double first_task_epoch_factor = 1.0;

  void validate() const {
    if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
    if (n_stick_samples == 0) throw std::invalid_argument("n_stick_samples must be positive");
    if (!(lambda_q > 0) || !(lambda_p > 0)) throw std::invalid_argument("Concrete temperatures must be positive");
    if (!(schedule.initial > 0) || !(schedule.decay_rate > 0) || !(schedule.decay_every > 0)) {
      throw std::invalid_argument("learning-rate schedule values must be positive");
    }
    if (!(first_task_epoch_factor > 0)) throw std::invalid_argument("first_task_epoch_factor must be positive");
  }
};

/// Everything needed to continue training or to predict: the variational
/// posterior, the prior it is regularized towards, and the hyperparameters
/// in force.
struct ModelState {
  NetworkSpec spec;
  ParamStore posterior;
  ParamStore prior;
  std::vector<std::size_t> heads;  // heads trained so far
  std::size_t tasks_trained = 0;
  double lambda_q = 1.0;
  double lambda_p = 1.0;
  std::size_t n_stick_samples = 10;
  double head_prior_var = 1.0;

  std::size_t head_for_task(std::size_t task) const {
    return spec.head_mode == HeadMode::multi_head ? task : 0;
  }
};

inline ModelState make_model(const NetworkSpec& spec, const PriorInit& init, const TrainConfig& cfg,
                             std::uint64_t seed) {
  RngStream rng = RngStream(seed).derive(0x1417);
  auto [post, prior] = init_network(spec, init, rng);
  ModelState s;
  s.spec = spec;
  s.posterior = std::move(post);
  s.prior = std::move(prior);
  s.lambda_q = cfg.lambda_q;
  s.lambda_p = cfg.lambda_p;
  s.n_stick_samples = cfg.n_stick_samples;
  s.head_prior_var = init.gaussian_var;
  return s;
}

/// Fork labels that fix the order in which a forward pass consumes noise.
namespace stream {
inline constexpr std::uint64_t sticks = 0x100;
inline constexpr std::uint64_t child = 0x200;
inline constexpr std::uint64_t masks = 0x300;
inline constexpr std::uint64_t weights = 0x400;
}  // namespace stream

/// Per-layer Bernoulli probabilities of one draw of the structure prior or
/// posterior held in `b`. Forks only from `parent`, so two calls with the
/// same parent share their random numbers.
struct LayerProbabilities {
  std::vector<Var> pis;
  Var global;  // pi0 (H-IBP only)
};

inline BetaParams bind_sticks(const Binding& b, const std::string& prefix) {
  return {b.get(param::raw_a(prefix)), b.get(param::raw_b(prefix))};
}

inline LayerProbabilities layer_probabilities(const NetworkSpec& spec, const Binding& b, const Sampler& parent,
                                              std::size_t n_stick_samples) {
  LayerProbabilities out;
  const std::size_t J = spec.hidden_layers();
  if (spec.prior_family == PriorFamily::ibp) {
    for (std::size_t j = 0; j < J; ++j) {
      Sampler s = parent.fork(stream::sticks + j);
      out.pis.push_back(stick_probabilities(bind_sticks(b, param::ibp(j)), s, n_stick_samples));
    }
  } else if (spec.prior_family == PriorFamily::hibp) {
    Sampler s = parent.fork(stream::sticks);
    out.global = stick_probabilities(bind_sticks(b, param::hibp), s, n_stick_samples);
    const Tensor& alpha = b.get(param::hibp_child_alpha).value();
    for (std::size_t j = 0; j < J; ++j) {
      Sampler c = parent.fork(stream::child + j);
      out.pis.push_back(hibp_child_probabilities(out.global, alpha[j], c, n_stick_samples));
    }
  }
  return out;
}

inline HibpPosterior bind_hibp(const Binding& b, double temperature) {
  const Tensor& a = b.get(param::hibp_child_alpha).value();
  return {bind_sticks(b, param::hibp), a.values(), temperature};
}

struct ElboOptions {
  bool unit_masks = false;  // masks fixed at 1 and structure/mask KLs dropped
};

/// Components of one negative-ELBO evaluation; `loss` is the objective.
struct ElboTerms {
  Var loss;
  Var kl_structure;
  Var kl_weights;
  Var nll;
  Var kl_masks;
};

inline std::vector<std::size_t> heads_in_objective(const ModelState& s, std::size_t head) {
  std::vector<std::size_t> heads = s.heads;
  if (std::find(heads.begin(), heads.end(), head) == heads.end()) heads.push_back(head);
  return heads;
}

/// Minibatch negative ELBO. Likelihood and mask-KL sums over the batch are
/// rescaled by n_total / batch; stick and weight KLs enter once.
inline ElboTerms negative_elbo(const ModelState& s, const Binding& q, const Binding& p, const Tensor& x,
                               const std::vector<std::size_t>& y, std::size_t n_total, std::size_t head,
                               Sampler& sampler, const ElboOptions& opt = {}) {
  const NetworkSpec& spec = s.spec;
  const std::size_t batch = x.dim(0);
  const std::size_t J = spec.hidden_layers();
  const double rescale = static_cast<double>(n_total) / static_cast<double>(batch);

  ElboTerms t;
  t.kl_structure = Var::constant(0.0);
  t.kl_masks = Var::constant(0.0);
  std::vector<Var> masks;
  if (spec.prior_family != PriorFamily::none && !opt.unit_masks) {
    const LayerProbabilities lq = layer_probabilities(spec, q, sampler, s.n_stick_samples);
    const LayerProbabilities lp = layer_probabilities(spec, p, sampler, s.n_stick_samples);
    if (spec.prior_family == PriorFamily::ibp) {
      for (std::size_t j = 0; j < J; ++j)
        t.kl_structure = t.kl_structure + kl_beta(bind_sticks(q, param::ibp(j)), bind_sticks(p, param::ibp(j)));
    } else {
      t.kl_structure = kl_hibp(bind_hibp(q, s.lambda_q), bind_hibp(p, s.lambda_p), lq.global);
    }
    for (std::size_t j = 0; j < J; ++j) {
      Sampler sm = sampler.fork(stream::masks + j);
      const MaskSample m = sample_masks(lq.pis[j], s.lambda_q, batch, sm, MaskMode::relaxed);
      masks.push_back(m.z);
      t.kl_masks = t.kl_masks + kl_masks(m, lq.pis[j], lp.pis[j], s.lambda_q, s.lambda_p);
    }
  }

  Sampler sw = sampler.fork(stream::weights);
  std::vector<DenseSample> hidden;
  for (const auto& l : bind_hidden(spec, q)) hidden.push_back(sample_dense(l, sw));
  const DenseSample out = sample_dense(bind_head(q, head), sw);
  const Var logits = forward(hidden, out, Var::constant(x), masks);

  t.nll = -sum(pick(log_softmax(logits), y));
  t.kl_weights = kl_weights(spec, q, p, heads_in_objective(s, head));
  t.loss = t.kl_structure + t.kl_weights + rescale * (t.nll + t.kl_masks);
  return t;
}

/// IBP-structured objective; `s.spec.prior_family` must be ibp.
inline ElboTerms elbo_ibnn(const ModelState& s, const Binding& q, const Binding& p, const Tensor& x,
                           const std::vector<std::size_t>& y, std::size_t n_total, std::size_t head,
                           Sampler& sampler) {
  if (s.spec.prior_family != PriorFamily::ibp) throw std::invalid_argument("elbo_ibnn needs an IBP network");
  return negative_elbo(s, q, p, x, y, n_total, head, sampler);
}

inline ElboTerms elbo_hibnn(const ModelState& s, const Binding& q, const Binding& p, const Tensor& x,
                            const std::vector<std::size_t>& y, std::size_t n_total, std::size_t head,
                            Sampler& sampler) {
  if (s.spec.prior_family != PriorFamily::hibp) throw std::invalid_argument("elbo_hibnn needs an H-IBP network");
  return negative_elbo(s, q, p, x, y, n_total, head, sampler);
}

/// Mean-field objective: weight KL and rescaled likelihood only.
inline ElboTerms elbo_vcl(const ModelState& s, const Binding& q, const Binding& p, const Tensor& x,
                          const std::vector<std::size_t>& y, std::size_t n_total, std::size_t head,
                          Sampler& sampler) {
  return negative_elbo(s, q, p, x, y, n_total, head, sampler, ElboOptions{true});
}

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t step, const std::string& what) : std::runtime_error(what), step_(step) {}
  /// Last step whose loss was finite (0 if none).
  std::size_t last_good_step() const { return step_; }

 private:
  std::size_t step_;
};

inline std::string parameter_extrema(const ParamStore& store) {
  std::ostringstream os;
  for (const auto& [name, t] : store) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (double v : t.values()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    os << "  " << name << ": min " << lo << " max " << hi << '\n';
  }
  return os.str();
}

/// Parameters optimized while training head `head`.
inline std::set<std::string> trainable_parameters(const ModelState& s, std::size_t head) {
  std::set<std::string> out;
  const std::string head_prefix = param::head(head) + ".";
  for (const auto& [name, t] : s.posterior) {
    if (name.rfind("hidden", 0) == 0 || name.rfind(head_prefix, 0) == 0 || name.rfind("ibp", 0) == 0 ||
        name.rfind("hibp.raw", 0) == 0) {
      out.insert(name);
    }
  }
  return out;
}

struct TrainResult {
  ModelState state;
  std::vector<double> epoch_losses;  // mean minibatch loss per epoch
  std::size_t steps = 0;
  double ml_train_accuracy = -1.0;   // set when the task ran ML initialization
};

/// Optimizes the task's negative ELBO with Adam and the step-decay
/// schedule (restarted for every task). The first task of a model may be
/// preceded by point-estimate initialization of the means.
inline TrainResult train_task(ModelState state, const Task& task, const TrainConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  task.train.validate();
  const std::size_t head = state.head_for_task(state.tasks_trained);
  const RngStream rng = RngStream(seed).derive(0x7a5c + state.tasks_trained);
  TrainResult result;
  if (!has_head(state.posterior, head)) {
    RngStream hr = rng.derive(1);
    add_head(state.spec, state.posterior, state.prior, head, state.head_prior_var, hr);
  }
  if (task.train.num_classes > state.spec.head_dims.at(head)) {
    throw std::invalid_argument("task has more classes than head " + std::to_string(head) + " outputs");
  }
  const bool first = state.tasks_trained == 0;
  if (first && cfg.ml_epochs > 0) {
    RngStream mr = rng.derive(2);
    result.ml_train_accuracy = ml_initialize(state.spec, state.posterior, task.train.x, task.train.y, head,
                                             MlInitConfig{cfg.ml_epochs, cfg.batch_size, cfg.ml_lr}, mr);
  }
  const std::size_t epochs =
      first ? static_cast<std::size_t>(std::llround(cfg.epochs * cfg.first_task_epoch_factor)) : cfg.epochs;

  const std::set<std::string> trainable = trainable_parameters(state, head);
  const Binding prior = Binding::constants(state.prior);
  const std::size_t n = task.train.size();
  const std::size_t d = task.train.dim();
  Adam opt(cfg.schedule);
  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    RngStream er = rng.derive(0x10000 + epoch);
    er.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t m = std::min(cfg.batch_size, n - start);
      Tensor xb({m, d});
      std::vector<std::size_t> yb(m);
      for (std::size_t i = 0; i < m; ++i) {
        const std::size_t r = order[start + i];
        std::copy_n(task.train.x.data() + r * d, d, xb.data() + i * d);
        yb[i] = task.train.y[r];
      }
      const Binding q(state.posterior, trainable);
      Sampler sampler(rng.derive((std::uint64_t{1} << 40) + step));
      const ElboTerms terms = negative_elbo(state, q, prior, xb, yb, n, head, sampler);
      const double loss = terms.loss.item();
      if (!std::isfinite(loss)) {
        throw DivergenceError(step == 0 ? 0 : step - 1, "negative ELBO is not finite at step " +
                                                            std::to_string(step) + "; parameter extrema:\n" +
                                                            parameter_extrema(state.posterior));
      }
      const Gradients g = backward(terms.loss);
      std::map<std::string, Tensor> grads;
      for (const auto& name : trainable) {
        Tensor gt = g.of(q.get(name));
        if (!gt.all_finite()) {
          throw DivergenceError(step, "non-finite gradient for '" + name + "' at step " + std::to_string(step) +
                                          "; parameter extrema:\n" + parameter_extrema(state.posterior));
        }
        grads.emplace(name, std::move(gt));
      }
      opt.step(state.posterior, grads);
      epoch_loss += loss;
      ++n_batches;
      ++step;
    }
    result.epoch_losses.push_back(n_batches ? epoch_loss / static_cast<double>(n_batches) : 0.0);
  }
  if (std::find(state.heads.begin(), state.heads.end(), head) == state.heads.end()) state.heads.push_back(head);
  ++state.tasks_trained;
  result.state = std::move(state);
  result.steps = step;
  return result;
}

/// The posterior becomes the next task's prior verbatim. At a declared
/// data-family boundary the H-IBP child concentrations of the new posterior
/// are multiplied by `child_alpha_factor`.
inline ModelState advance_prior(ModelState s, bool boundary = false, double child_alpha_factor = 1.0) {
  s.prior = s.posterior;
  if (boundary && s.spec.prior_family == PriorFamily::hibp) {
    for (auto& a : s.posterior.at(param::hibp_child_alpha).values()) a *= child_alpha_factor;
  }
  return s;
}

/// Class probabilities averaged over `n_mc` joint draws of weights and hard
/// masks; one row per input.
inline Tensor predict(const ModelState& s, const Tensor& x, std::size_t head, std::size_t n_mc, Sampler& sampler) {
  if (n_mc == 0) throw std::invalid_argument("predict needs n_mc >= 1");
  const Binding b = Binding::constants(s.posterior);
  const std::size_t n = x.dim(0);
  const Var xv = Var::constant(x);
  Tensor acc;
  for (std::size_t m = 0; m < n_mc; ++m) {
    Sampler sm = sampler.fork(m);
    std::vector<Var> masks;
    if (s.spec.prior_family != PriorFamily::none) {
      const LayerProbabilities lp = layer_probabilities(s.spec, b, sm, s.n_stick_samples);
      for (std::size_t j = 0; j < lp.pis.size(); ++j) {
        Sampler mk = sm.fork(stream::masks + j);
        masks.push_back(sample_masks(lp.pis[j], s.lambda_q, n, mk, MaskMode::hard).z);
      }
    }
    Sampler sw = sm.fork(stream::weights);
    std::vector<DenseSample> hidden;
    for (const auto& l : bind_hidden(s.spec, b)) hidden.push_back(sample_dense(l, sw));
    const DenseSample out = sample_dense(bind_head(b, head), sw);
    const Tensor probs = softmax(forward(hidden, out, xv, masks)).value();
    if (m == 0) {
      acc = probs;
    } else {
      acc += probs;
    }
  }
  const double inv = 1.0 / static_cast<double>(n_mc);
  for (auto& v : acc.values()) v *= inv;
  return acc;
}

inline double mean_entropy(const Tensor& probs) {
  const std::size_t n = probs.dim(0), c = probs.dim(1);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      const double p = probs[i * c + j];
      if (p > 0.0) total -= p * std::log(p);
    }
  return total / static_cast<double>(n);
}

/// Head with the lowest mean predictive entropy over `x`; ties go to the
/// lowest index.
inline std::size_t infer_head(const ModelState& s, const Tensor& x, std::size_t n_mc, Sampler& sampler) {
  if (s.heads.empty()) throw std::invalid_argument("infer_head: model has no trained heads");
  std::vector<std::size_t> heads = s.heads;
  std::sort(heads.begin(), heads.end());
  std::size_t best = heads.front();
  double best_h = std::numeric_limits<double>::infinity();
  for (auto h : heads) {
    const double e = mean_entropy(predict(s, x, h, n_mc, sampler));
    if (e < best_h) {
      best_h = e;
      best = h;
    }
  }
  return best;
}

enum class Scenario { CL1, CL2, CL3 };

inline const char* to_string(Scenario s) {
  switch (s) {
    case Scenario::CL1: return "CL1";
    case Scenario::CL2: return "CL2";
    case Scenario::CL3: return "CL3";
  }
  return "CL1";
}

/// Row t holds the test accuracy on tasks 0..t after training task t.
struct AccuracyMatrix {
  std::vector<std::vector<double>> rows;

  double average(std::size_t row) const {
    const auto& r = rows.at(row);
    double s = 0.0;
    for (double v : r) s += v;
    return r.empty() ? 0.0 : s / static_cast<double>(r.size());
  }
  double final_average() const { return rows.empty() ? 0.0 : average(rows.size() - 1); }
};

inline std::size_t argmax_row(const Tensor& probs, std::size_t row) {
  const std::size_t c = probs.dim(1);
  const double* p = probs.data() + row * c;
  return static_cast<std::size_t>(std::max_element(p, p + c) - p);
}

struct EvalConfig {
  std::size_t n_mc = 10;
  std::size_t inference_batch = 100;  // rows per head-inference decision (CL2/CL3)
  std::uint64_t seed = 0;
};

/// Accuracy of `s` on task `task_index` of `seq` under `scenario`.
/// CL1 uses the task's own head. CL2 and CL3 pick a head per test batch by
/// predictive entropy; CL2 scores the local label, CL3 the global class of
/// the chosen head's prediction. Single-head models have one output space,
/// so CL1 and CL2 coincide and CL3 is rejected.
inline double evaluate_task(const ModelState& s, const TaskSequence& seq, std::size_t task_index,
                            Scenario scenario, const EvalConfig& cfg, Sampler& sampler) {
  const Task& task = seq.tasks.at(task_index);
  const Dataset& test = task.test;
  const std::size_t n = test.size(), d = test.dim();
  if (n == 0) return 0.0;
  const bool single = s.spec.head_mode == HeadMode::single_head;
  if (single && scenario == Scenario::CL3) {
    throw std::invalid_argument("CL3 needs a multi-head network");
  }
  std::size_t correct = 0;
  if (scenario == Scenario::CL1 || single) {
    const std::size_t head = s.head_for_task(task_index);
    if (!has_head(s.posterior, head)) throw std::invalid_argument("head " + std::to_string(head) + " not trained");
    const Tensor probs = predict(s, test.x, head, cfg.n_mc, sampler);
    for (std::size_t i = 0; i < n; ++i) correct += argmax_row(probs, i) == test.y[i];
    return static_cast<double>(correct) / static_cast<double>(n);
  }
  const std::size_t bs = std::max<std::size_t>(1, cfg.inference_batch);
  for (std::size_t start = 0; start < n; start += bs) {
    const std::size_t m = std::min(bs, n - start);
    Tensor xb({m, d});
    std::copy_n(test.x.data() + start * d, m * d, xb.data());
    Sampler si = sampler.fork(start);
    const std::size_t h = infer_head(s, xb, cfg.n_mc, si);
    const Tensor probs = predict(s, xb, h, cfg.n_mc, si);
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t local = argmax_row(probs, i);
      const std::size_t truth = test.y[start + i];
      if (scenario == Scenario::CL2) {
        correct += local == truth;
      } else {
        const auto& head_map = seq.tasks.at(h).class_map;
        correct += local < head_map.size() && head_map[local] == task.class_map.at(truth);
      }
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

/// Row t of the result evaluates snapshots[t] (the model after task t) on
/// tasks 0..t.
inline AccuracyMatrix evaluate_scenario(const std::vector<ModelState>& snapshots, const TaskSequence& seq,
                                        Scenario scenario, const EvalConfig& cfg) {
  if (snapshots.size() > seq.tasks.size()) throw std::invalid_argument("more snapshots than tasks");
  AccuracyMatrix out;
  const RngStream root = RngStream(cfg.seed).derive(0xe7a1);
  for (std::size_t t = 0; t < snapshots.size(); ++t) {
    std::vector<double> row;
    for (std::size_t j = 0; j <= t; ++j) {
      Sampler sampler(root.derive(t * 4096 + j));
      row.push_back(evaluate_task(snapshots[t], seq, j, scenario, cfg, sampler));
    }
    out.rows.push_back(std::move(row));
  }
  return out;
}

}  // namespace ibpbnn
