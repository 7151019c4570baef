#pragma once

// Seeded task generators. Every generator is a pure function of its
// arguments; train and test sets are drawn from separate streams.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "ibpbnn/rng.hpp"
#include "ibpbnn/tensor.hpp"

namespace ibpbnn {

/// Rows of `x` with labels in [0, num_classes).
struct Dataset {
  Tensor x;
  std::vector<std::size_t> y;
  std::size_t num_classes = 0;

  std::size_t size() const { return y.size(); }
  std::size_t dim() const { return x.rank() == 2 ? x.dim(1) : 0; }

  void validate() const {
    if (x.rank() != 2 || x.dim(0) != y.size()) {
      throw std::invalid_argument("dataset has " + std::to_string(y.size()) + " labels for features " +
                                  shape_str(x.shape()));
    }
    for (auto label : y)
      if (label >= num_classes) throw std::invalid_argument("dataset label out of range");
    if (!x.all_finite()) throw std::invalid_argument("dataset features must be finite");
  }

  Dataset rows(const std::vector<std::size_t>& idx) const {
    const std::size_t d = dim();
    Dataset out{Tensor({idx.size(), d}), {}, num_classes};
    out.y.reserve(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::copy_n(x.data() + idx[i] * d, d, out.x.data() + i * d);
      out.y.push_back(y[idx[i]]);
    }
    return out;
  }
};

/// One continual-learning task. Labels are local (0..C-1); `class_map`
/// sends a local label to its global class id.
struct Task {
  Dataset train;
  Dataset test;
  std::vector<std::size_t> class_map;
  bool boundary = false;  // first task of a new data family
};

struct TaskSequence {
  std::vector<Task> tasks;
  bool shared_label_space = false;  // true for permuted suites (one head suffices)

  std::size_t input_dim() const { return tasks.empty() ? 0 : tasks.front().train.dim(); }
  std::size_t global_classes() const {
    std::size_t n = 0;
    for (const auto& t : tasks)
      for (auto c : t.class_map) n = std::max(n, c + 1);
    return n;
  }
};

/// Isotropic unit-variance blobs around `means`; each coordinate is clipped
/// to mean +/- kBlobClip so features stay bounded.
inline constexpr double kBlobClip = 6.0;

namespace detail {

inline Dataset sample_blobs(const std::vector<std::vector<double>>& means, std::size_t per_class,
                            RngStream rng) {
  const std::size_t c = means.size(), d = means.front().size();
  Dataset ds{Tensor({c * per_class, d}), {}, c};
  std::vector<std::size_t> order(c * per_class);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order.begin(), order.end());
  ds.y.assign(c * per_class, 0);
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t row = order[k * per_class + i];
      ds.y[row] = k;
      for (std::size_t j = 0; j < d; ++j) {
        const double e = std::clamp(rng.normal(), -kBlobClip, kBlobClip);
        ds.x[row * d + j] = means[k][j] + e;
      }
    }
  }
  return ds;
}

inline std::vector<double> random_unit(std::size_t d, RngStream& rng) {
  std::vector<double> u(d);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (auto& v : u) {
      v = rng.normal();
      norm += v * v;
    }
  } while (norm < 1e-12);
  norm = std::sqrt(norm);
  for (auto& v : u) v /= norm;
  return u;
}

/// Two classes whose means are `separation` apart, centered at a random
/// point of [-2, 2]^d.
inline Task two_blob_task(std::size_t dim, double separation, std::size_t n_train, std::size_t n_test,
                          RngStream rng) {
  std::vector<double> center(dim);
  for (auto& c : center) c = -2.0 + 4.0 * rng.uniform();
  const auto u = random_unit(dim, rng);
  std::vector<std::vector<double>> means(2, center);
  for (std::size_t j = 0; j < dim; ++j) {
    means[0][j] -= 0.5 * separation * u[j];
    means[1][j] += 0.5 * separation * u[j];
  }
  Task t;
  t.train = sample_blobs(means, n_train, rng.derive(1));
  t.test = sample_blobs(means, n_test, rng.derive(2));
  return t;
}

}  // namespace detail

/// Bayes-optimal accuracy of two unit-variance isotropic Gaussians whose
/// means are `separation` apart: Phi(separation / 2).
inline double two_blob_bayes_accuracy(double separation) {
  return 0.5 * std::erfc(-separation / (2.0 * std::sqrt(2.0)));
}

/// Binary tasks over disjoint global class pairs (0,1), (2,3), ...
inline TaskSequence make_split_synthetic(std::size_t n_tasks, std::size_t n_per_class, std::size_t dim,
                                         double separation, std::uint64_t seed,
                                         std::size_t n_test_per_class = 100) {
  if (n_tasks == 0 || n_per_class == 0 || dim == 0) {
    throw std::invalid_argument("split synthetic suite needs positive task count, class size and dim");
  }
  TaskSequence seq;
  const RngStream root(seed);
  for (std::size_t t = 0; t < n_tasks; ++t) {
    Task task = detail::two_blob_task(dim, separation, n_per_class, n_test_per_class, root.derive(t));
    task.class_map = {2 * t, 2 * t + 1};
    seq.tasks.push_back(std::move(task));
  }
  return seq;
}

/// Multi-class blob dataset used as the base of the permuted suite.
inline Task make_blob_classes(std::size_t n_classes, std::size_t n_per_class, std::size_t dim,
                              double separation, std::uint64_t seed, std::size_t n_test_per_class = 100) {
  RngStream rng(seed);
  std::vector<std::vector<double>> means;
  for (std::size_t k = 0; k < n_classes; ++k) {
    auto u = detail::random_unit(dim, rng);
    for (auto& v : u) v *= separation / std::sqrt(2.0);
    means.push_back(std::move(u));
  }
  Task t;
  t.train = detail::sample_blobs(means, n_per_class, rng.derive(1));
  t.test = detail::sample_blobs(means, n_test_per_class, rng.derive(2));
  t.class_map.resize(n_classes);
  std::iota(t.class_map.begin(), t.class_map.end(), std::size_t{0});
  return t;
}

inline Dataset permute_features(const Dataset& ds, const std::vector<std::size_t>& perm) {
  Dataset out = ds;
  const std::size_t d = ds.dim();
  for (std::size_t r = 0; r < ds.size(); ++r)
    for (std::size_t j = 0; j < d; ++j) out.x[r * d + j] = ds.x[r * d + perm[j]];
  return out;
}

/// Task t applies a fixed seeded permutation of the feature indices; the
/// first task keeps the identity.
inline TaskSequence make_permuted(const Task& base, std::size_t n_tasks, std::uint64_t seed) {
  TaskSequence seq;
  seq.shared_label_space = true;
  const std::size_t d = base.train.dim();
  const RngStream root(seed);
  for (std::size_t t = 0; t < n_tasks; ++t) {
    std::vector<std::size_t> perm(d);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    if (t > 0) {
      RngStream r = root.derive(t);
      r.shuffle(perm.begin(), perm.end());
    }
    Task task;
    task.train = permute_features(base.train, perm);
    task.test = permute_features(base.test, perm);
    task.class_map = base.class_map;
    seq.tasks.push_back(std::move(task));
  }
  return seq;
}

/// Separations of the three families of the increasing-difficulty suite.
inline constexpr double kIncreasingSeparations[3] = {6.0, 3.5, 2.0};

/// Six binary tasks in three families of two, class overlap growing from
/// family to family; `boundary` marks the first task of families 2 and 3.
inline TaskSequence make_increasing_difficulty(std::uint64_t seed, std::size_t n_per_class = 250,
                                               std::size_t dim = 10, std::size_t n_test_per_class = 100) {
  TaskSequence seq;
  const RngStream root(seed);
  for (std::size_t t = 0; t < 6; ++t) {
    const std::size_t family = t / 2;
    Task task = detail::two_blob_task(dim, kIncreasingSeparations[family], n_per_class, n_test_per_class,
                                      root.derive(t));
    task.class_map = {2 * t, 2 * t + 1};
    task.boundary = t > 0 && t % 2 == 0;
    seq.tasks.push_back(std::move(task));
  }
  return seq;
}

/// Seeded stratified subsample: up to `per_class` rows of each class, in
/// their original order.
inline Dataset subsample(const Dataset& ds, std::size_t per_class, std::uint64_t seed) {
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.y[i]].push_back(i);
  std::vector<std::size_t> keep;
  const RngStream root(seed);
  for (auto& [label, idx] : by_class) {
    if (idx.size() > per_class) {
      RngStream r = root.derive(label);
      r.shuffle(idx.begin(), idx.end());
      idx.resize(per_class);
    }
    keep.insert(keep.end(), idx.begin(), idx.end());
  }
  std::sort(keep.begin(), keep.end());
  return ds.rows(keep);
}

/// Binary tasks from a multi-class dataset: task t keeps classes
/// (2t, 2t+1) relabelled to (0, 1).
inline TaskSequence split_by_class_pairs(const Dataset& train, const Dataset& test, std::size_t n_tasks) {
  TaskSequence seq;
  auto pick = [](const Dataset& ds, std::size_t c0, std::size_t c1) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.size(); ++i)
      if (ds.y[i] == c0 || ds.y[i] == c1) idx.push_back(i);
    Dataset out = ds.rows(idx);
    for (auto& y : out.y) y = y == c0 ? 0 : 1;
    out.num_classes = 2;
    return out;
  };
  for (std::size_t t = 0; t < n_tasks; ++t) {
    Task task;
    task.train = pick(train, 2 * t, 2 * t + 1);
    task.test = pick(test, 2 * t, 2 * t + 1);
    task.class_map = {2 * t, 2 * t + 1};
    seq.tasks.push_back(std::move(task));
  }
  return seq;
}

}  // namespace ibpbnn
