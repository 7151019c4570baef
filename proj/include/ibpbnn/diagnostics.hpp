#pragma once

// Weight pruning curves, the sparsity index and active-neuron summaries,
// plus their CSV renderings.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "ibpbnn/cl_engine.hpp"

namespace ibpbnn {

enum class PruneCriterion { abs_mean, snr };

inline const char* to_string(PruneCriterion c) { return c == PruneCriterion::snr ? "snr" : "abs_mean"; }

inline PruneCriterion prune_criterion_from_string(const std::string& s) {
  if (s == "snr") return PruneCriterion::snr;
  if (s == "abs_mean") return PruneCriterion::abs_mean;
  throw std::invalid_argument("unknown pruning criterion '" + s + "' (expected snr or abs_mean)");
}

struct PruneCurve {
  std::vector<double> fractions;
  std::vector<double> accuracies;
  PruneCriterion criterion = PruneCriterion::abs_mean;
};

inline void validate_fractions(const std::vector<double>& fractions) {
  if (fractions.empty()) throw std::invalid_argument("pruning needs at least one fraction");
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    if (!(fractions[i] >= 0.0 && fractions[i] <= 1.0)) {
      throw std::invalid_argument("pruning fraction " + std::to_string(fractions[i]) + " outside [0, 1]");
    }
    if (i > 0 && !(fractions[i] > fractions[i - 1])) {
      throw std::invalid_argument("pruning fractions must be strictly ascending");
    }
  }
}

/// A hidden-layer weight or bias, identified by tensor name and flat index.
struct PruneEntry {
  std::string tensor;
  std::size_t index;
  double score;
};

/// Every hidden-layer weight and bias ranked ascending by the criterion.
/// Ties keep storage order, so the zero-sets of growing fractions nest.
inline std::vector<PruneEntry> prune_ranking(const ModelState& s, PruneCriterion criterion) {
  std::vector<PruneEntry> out;
  for (std::size_t j = 0; j < s.spec.hidden_layers(); ++j) {
    const std::string layer = param::hidden(j);
    for (const auto& [mu_key, lv_key] : {std::pair{param::w_mu(layer), param::w_log_var(layer)},
                                         std::pair{param::b_mu(layer), param::b_log_var(layer)}}) {
      const Tensor& mu = s.posterior.at(mu_key);
      const Tensor& lv = s.posterior.at(lv_key);
      for (std::size_t i = 0; i < mu.size(); ++i) {
        const double m = std::abs(mu[i]);
        const double score = criterion == PruneCriterion::abs_mean ? m : m / std::exp(0.5 * lv[i]);
        out.push_back({mu_key, i, score});
      }
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const PruneEntry& a, const PruneEntry& b) { return a.score < b.score; });
  return out;
}

inline std::size_t pruned_count(std::size_t total, double fraction) {
  return std::min(total, static_cast<std::size_t>(std::llround(fraction * static_cast<double>(total))));
}

/// Copy of `s` with the lowest-ranked `fraction` of hidden weights removed:
/// mean 0 and zero variance, so every draw of a removed weight is exactly 0.
inline ModelState prune_model(const ModelState& s, PruneCriterion criterion, double fraction) {
  validate_fractions({fraction});
  ModelState out = s;
  const auto ranking = prune_ranking(s, criterion);
  const std::size_t n = pruned_count(ranking.size(), fraction);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& e = ranking[i];
    const std::string lv_key = e.tensor.substr(0, e.tensor.size() - 2) + "log_var";  // "<x>.mu" -> "<x>.log_var"
    out.posterior.at(e.tensor)[e.index] = 0.0;
    out.posterior.at(lv_key)[e.index] = -std::numeric_limits<double>::infinity();
  }
  return out;
}

/// CL1 test accuracy averaged over the tasks `s` has been trained on. The
/// noise streams depend only on `cfg.seed`, so equal models score equally.
inline double trained_tasks_accuracy(const ModelState& s, const TaskSequence& seq, const EvalConfig& cfg) {
  if (s.tasks_trained == 0) throw std::invalid_argument("model has not been trained on any task");
  if (s.tasks_trained > seq.tasks.size()) throw std::invalid_argument("model trained on more tasks than supplied");
  const RngStream root = RngStream(cfg.seed).derive(0x9e0e);
  double total = 0.0;
  for (std::size_t j = 0; j < s.tasks_trained; ++j) {
    Sampler sampler(root.derive(j));
    total += evaluate_task(s, seq, j, Scenario::CL1, cfg, sampler);
  }
  return total / static_cast<double>(s.tasks_trained);
}

/// Accuracy after removing each fraction of hidden weights; `s` is not modified.
inline PruneCurve prune_and_score(const ModelState& s, const TaskSequence& seq, PruneCriterion criterion,
                                  const std::vector<double>& fractions, const EvalConfig& cfg) {
  validate_fractions(fractions);
  PruneCurve curve;
  curve.criterion = criterion;
  for (double f : fractions) {
    curve.fractions.push_back(f);
    curve.accuracies.push_back(trained_tasks_accuracy(prune_model(s, criterion, f), seq, cfg));
  }
  return curve;
}

/// Smallest sampled fraction whose accuracy is more than 0.10 below the
/// accuracy at fraction 0; 1.0 if no sampled point drops that far.
inline double sparsity_index(const PruneCurve& curve) {
  if (curve.fractions.size() != curve.accuracies.size()) {
    throw std::invalid_argument("prune curve has mismatched fraction and accuracy lists");
  }
  std::vector<std::size_t> order(curve.fractions.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return curve.fractions[a] < curve.fractions[b]; });
  if (order.empty() || curve.fractions[order.front()] != 0.0) {
    throw std::invalid_argument("sparsity index needs the accuracy at fraction 0");
  }
  const double base = curve.accuracies[order.front()];
  for (auto i : order)
    if (curve.accuracies[i] < base - 0.10) return curve.fractions[i];
  return 1.0;
}

/// Linear-interpolation quantile of sorted data (the usual "type 7").
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw std::invalid_argument("quantile of an empty sample");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

struct StructureRow {
  std::size_t task = 0;  // 0-based index of the snapshot's last trained task
  std::size_t layer = 0;
  double median_active = 0.0;
  double q25 = 0.0;
  double q75 = 0.0;
};

struct StructureConfig {
  double threshold = 0.1;
  std::uint64_t seed = 0;
};

/// Active-neuron counts per test point under hard posterior masks.
/// Snapshot t is probed with the test inputs of task t; every snapshot
/// sees the same noise, so differences reflect the posteriors alone.
inline std::vector<StructureRow> structure_report(const std::vector<ModelState>& snapshots, const TaskSequence& seq,
                                                  const StructureConfig& cfg = {}) {
  std::vector<StructureRow> rows;
  for (std::size_t t = 0; t < snapshots.size(); ++t) {
    const ModelState& s = snapshots[t];
    const std::size_t task = s.tasks_trained > 0 ? s.tasks_trained - 1 : t;
    const std::size_t n = seq.tasks.at(task).test.size();
    const std::size_t J = s.spec.hidden_layers();
    const Sampler root(RngStream(cfg.seed).derive(0x5770));
    std::vector<Tensor> masks;
    if (s.spec.prior_family == PriorFamily::none) {
      for (std::size_t j = 0; j < J; ++j) masks.emplace_back(Shape{n, s.spec.layer_truncations[j]}, 1.0);
    } else {
      const Binding b = Binding::constants(s.posterior);
      const LayerProbabilities lp = layer_probabilities(s.spec, b, root, s.n_stick_samples);
      for (std::size_t j = 0; j < J; ++j) {
        Sampler mk = root.fork(stream::masks + j);
        masks.push_back(sample_masks(lp.pis[j], s.lambda_q, n, mk, MaskMode::hard).z.value());
      }
    }
    for (std::size_t j = 0; j < J; ++j) {
      const auto counts = active_neuron_count(masks[j], cfg.threshold);
      std::vector<double> c(counts.begin(), counts.end());
      std::sort(c.begin(), c.end());
      rows.push_back({task, j, quantile_sorted(c, 0.5), quantile_sorted(c, 0.25), quantile_sorted(c, 0.75)});
    }
  }
  return rows;
}

/// Shortest decimal form that reads back to the same double.
inline std::string csv_number(double v) {
  char buf[32];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

/// Task indices in CSVs are 1-based.
inline std::string accuracy_csv(const AccuracyMatrix& m, std::uint64_t seed) {
  std::string out = "eval_after_task,task,accuracy,seed\n";
  for (std::size_t t = 0; t < m.rows.size(); ++t)
    for (std::size_t j = 0; j < m.rows[t].size(); ++j)
      out += std::to_string(t + 1) + "," + std::to_string(j + 1) + "," + csv_number(m.rows[t][j]) + "," +
             std::to_string(seed) + "\n";
  return out;
}

inline std::string structure_csv(const std::vector<StructureRow>& rows, std::uint64_t seed) {
  std::string out = "task,layer,median_active,q25,q75,seed\n";
  for (const auto& r : rows)
    out += std::to_string(r.task + 1) + "," + std::to_string(r.layer + 1) + "," + csv_number(r.median_active) + "," +
           csv_number(r.q25) + "," + csv_number(r.q75) + "," + std::to_string(seed) + "\n";
  return out;
}

inline std::string prune_csv(const PruneCurve& c, std::uint64_t seed) {
  std::string out = "fraction,accuracy,criterion,seed\n";
  for (std::size_t i = 0; i < c.fractions.size(); ++i)
    out += csv_number(c.fractions[i]) + "," + csv_number(c.accuracies[i]) + "," + to_string(c.criterion) + "," +
           std::to_string(seed) + "\n";
  return out;
}

}  // namespace ibpbnn
