#pragma once

// Orchestration behind the command-line tool: builds task suites and
// networks from an ExperimentConfig, runs seeds in a worker pool and writes
// CSV artifacts and snapshots.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "ibpbnn/cl_engine.hpp"
#include "ibpbnn/config.hpp"
#include "ibpbnn/diagnostics.hpp"
#include "ibpbnn/idx.hpp"
#include "ibpbnn/snapshot.hpp"
#include "ibpbnn/tasks.hpp"

namespace ibpbnn {

namespace fs = std::filesystem;

inline TaskSequence load_idx_suite(const ExperimentConfig& c, std::uint64_t seed) {
  const fs::path dir(c.idx_dir);
  const Dataset train = load_idx((dir / "train-images-idx3-ubyte").string(), (dir / "train-labels-idx1-ubyte").string())
                            .to_dataset();
  const Dataset test =
      load_idx((dir / "t10k-images-idx3-ubyte").string(), (dir / "t10k-labels-idx1-ubyte").string()).to_dataset();
  const Dataset sub = c.idx_per_class > 0 ? subsample(train, c.idx_per_class, seed) : train;
  if (c.task_suite == "split_idx") return split_by_class_pairs(sub, test, c.n_tasks);
  Task base{sub, test, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9}, false};
  return make_permuted(base, c.n_tasks, seed);
}

/// Task data for one seed. Synthetic suites are regenerated from the seed.
inline TaskSequence build_tasks(const ExperimentConfig& c, std::uint64_t seed) {
  const std::uint64_t data_seed = RngStream(seed).derive(0xda7a).next_u64();
  if (c.task_suite == "split_synth") {
    return make_split_synthetic(c.n_tasks, c.n_per_class, c.dim, c.separation, data_seed, c.n_test_per_class);
  }
  if (c.task_suite == "permuted_synth") {
    const Task base = make_blob_classes(c.n_classes, c.n_per_class, c.dim, c.separation, data_seed, c.n_test_per_class);
    return make_permuted(base, c.n_tasks, data_seed + 1);
  }
  if (c.task_suite == "increasing") {
    return make_increasing_difficulty(data_seed, c.n_per_class, c.dim, c.n_test_per_class);
  }
  return load_idx_suite(c, data_seed);
}

inline HeadMode resolved_head_mode(const ExperimentConfig& c) {
  if (c.head_mode == "single_head") return HeadMode::single_head;
  if (c.head_mode == "multi_head") return HeadMode::multi_head;
  return c.permuted() && c.scenario == "CL2" ? HeadMode::single_head : HeadMode::multi_head;
}

inline Scenario scenario_from_string(const std::string& s) {
  if (s == "CL1") return Scenario::CL1;
  if (s == "CL2") return Scenario::CL2;
  if (s == "CL3") return Scenario::CL3;
  throw std::invalid_argument("unknown scenario '" + s + "'");
}

inline NetworkSpec build_network(const ExperimentConfig& c, const TaskSequence& seq) {
  NetworkSpec spec;
  spec.input_dim = seq.input_dim();
  spec.layer_truncations.assign(c.layers, c.K);
  spec.head_mode = resolved_head_mode(c);
  if (spec.head_mode == HeadMode::multi_head) {
    for (const auto& t : seq.tasks) spec.head_dims.push_back(t.train.num_classes);
  } else {
    std::size_t classes = 0;
    for (const auto& t : seq.tasks) classes = std::max(classes, t.train.num_classes);
    spec.head_dims = {classes};
  }
  spec.prior_family = c.model == "ibnn" ? PriorFamily::ibp : c.model == "hibnn" ? PriorFamily::hibp : PriorFamily::none;
  return spec;
}

inline PriorInit build_prior_init(const ExperimentConfig& c) {
  PriorInit p;
  p.gaussian_var = c.gaussian_prior_var;
  p.stick_alpha = c.alpha_prior;
  p.stick_beta = c.beta_prior;
  if (c.model == "hibnn") {
    p.child_alpha = c.child_alpha.empty() ? std::vector<double>(c.layers, c.child_alpha_default) : c.child_alpha;
  }
  return p;
}

inline TrainConfig build_train_config(const ExperimentConfig& c) {
  TrainConfig t;
  t.epochs = c.epochs;
  t.batch_size = c.batch_size;
  t.schedule = {c.lr_init, c.lr_decay_rate, c.lr_decay_every};
  t.n_stick_samples = c.n_stick_samples;
  t.lambda_q = c.lambda1;
  t.lambda_p = c.lambda2;
  t.ml_epochs = c.ml_init_epochs;
  t.ml_lr = c.lr_init;
  t.first_task_epoch_factor = c.first_task_epoch_factor;
  return t;
}

inline EvalConfig build_eval_config(const ExperimentConfig& c, std::uint64_t seed) {
  return {c.n_mc, c.head_inference_batch, seed};
}

struct SeedRun {
  std::uint64_t seed = 0;
  TaskSequence tasks;
  std::vector<ModelState> snapshots;  // model after each completed task
  AccuracyMatrix accuracy;
  std::vector<StructureRow> structure;
  bool diverged = false;
  std::string error;
};

/// Sequential training over the suite, then evaluation of every stage.
/// Divergence stops the seed and is recorded rather than thrown.
inline SeedRun run_seed(const ExperimentConfig& c, std::uint64_t seed) {
  SeedRun run;
  run.seed = seed;
  run.tasks = build_tasks(c, seed);
  const NetworkSpec spec = build_network(c, run.tasks);
  const TrainConfig tcfg = build_train_config(c);
  ModelState state = make_model(spec, build_prior_init(c), tcfg, seed);
  try {
    for (std::size_t t = 0; t < run.tasks.tasks.size(); ++t) {
      if (t > 0) state = advance_prior(std::move(state), run.tasks.tasks[t].boundary, c.boundary_multiplier);
      state = train_task(std::move(state), run.tasks.tasks[t], tcfg, seed).state;
      run.snapshots.push_back(state);
    }
  } catch (const DivergenceError& e) {
    run.diverged = true;
    run.error = "diverged after step " + std::to_string(e.last_good_step()) + ": " + e.what();
  }
  run.accuracy = evaluate_scenario(run.snapshots, run.tasks, scenario_from_string(c.scenario), build_eval_config(c, seed));
  run.structure = structure_report(run.snapshots, run.tasks, {0.1, seed});
  return run;
}

inline fs::path seed_dir(const fs::path& out, std::uint64_t seed) { return out / ("seed_" + std::to_string(seed)); }

inline void write_seed_outputs(const ExperimentConfig& c, const SeedRun& run, const fs::path& out) {
  const fs::path dir = seed_dir(out, run.seed);
  write_file_atomic(dir / "accuracy.csv", accuracy_csv(run.accuracy, run.seed));
  write_file_atomic(dir / "structure.csv", structure_csv(run.structure, run.seed));
  if (run.diverged) write_file_atomic(dir / "error.txt", run.error + "\n");
  if (!c.save_snapshots) return;
  for (std::size_t t = 0; t < run.snapshots.size(); ++t) {
    Snapshot snap{run.snapshots[t], {{"seed", run.seed}, {"task_index", t}, {"config", config_to_json(c)}}};
    save_snapshot(dir / ("task_" + std::to_string(t + 1) + ".snap"), snap);
  }
}

/// Sample mean and standard error (sample standard deviation / sqrt(n)).
inline std::pair<double, double> mean_se(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()))};
}

/// One row per (eval_after_task, task) over the seeds that reached it.
inline std::string aggregate_csv(const std::vector<AccuracyMatrix>& runs) {
  std::map<std::pair<std::size_t, std::size_t>, std::vector<double>> cells;
  for (const auto& m : runs)
    for (std::size_t t = 0; t < m.rows.size(); ++t)
      for (std::size_t j = 0; j < m.rows[t].size(); ++j) cells[{t, j}].push_back(m.rows[t][j]);
  std::string out = "eval_after_task,task,mean_accuracy,se,n_seeds\n";
  for (const auto& [key, vals] : cells) {
    const auto [m, se] = mean_se(vals);
    out += std::to_string(key.first + 1) + "," + std::to_string(key.second + 1) + "," + csv_number(m) + "," +
           csv_number(se) + "," + std::to_string(vals.size()) + "\n";
  }
  return out;
}

/// Runs `fn(i)` for i in [0, n) on up to `workers` threads. The first
/// exception is rethrown after all workers finish.
template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn fn) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < std::min(workers, n); ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

struct ExperimentResult {
  std::vector<SeedRun> runs;
  int exit_status = 0;  // 0 iff every seed finished without divergence
};

inline ExperimentResult run_experiment(const ExperimentConfig& c, std::ostream* log = nullptr) {
  const fs::path out(c.output_dir);
  ExperimentResult result;
  result.runs.resize(c.seeds.size());
  std::mutex log_mu;
  parallel_for(c.seeds.size(), c.workers, [&](std::size_t i) {
    result.runs[i] = run_seed(c, c.seeds[i]);
    write_seed_outputs(c, result.runs[i], out);
    if (log) {
      std::lock_guard<std::mutex> lock(log_mu);
      const auto& r = result.runs[i];
      *log << "seed " << r.seed << ": "
           << (r.diverged ? r.error : "final average accuracy " + csv_number(r.accuracy.final_average())) << '\n';
    }
  });
  std::vector<AccuracyMatrix> mats;
  for (const auto& r : result.runs) {
    mats.push_back(r.accuracy);
    if (r.diverged) result.exit_status = 1;
  }
  write_file_atomic(out / "aggregate.csv", aggregate_csv(mats));
  write_file_atomic(out / "config.json", config_to_json(c).dump(2) + "\n");
  return result;
}

struct PruneRequest {
  std::vector<fs::path> snapshots;
  std::vector<PruneCriterion> criteria;
  std::vector<double> fractions;
  fs::path output_dir;  // empty: next to each snapshot
};

/// Pruning curves for every (snapshot, criterion); returns written paths.
/// With more than one snapshot a cross-seed summary is written too.
inline std::vector<fs::path> run_prune(const PruneRequest& req) {
  validate_fractions(req.fractions);
  if (req.snapshots.empty()) throw std::invalid_argument("prune needs at least one snapshot");
  if (req.criteria.empty()) throw std::invalid_argument("prune needs at least one criterion");
  std::vector<fs::path> written;
  std::map<std::pair<std::string, std::size_t>, std::vector<double>> summary;
  for (const auto& path : req.snapshots) {
    const Snapshot snap = load_snapshot(path);
    const ExperimentConfig c = parse_config(snap.metadata.at("config"));
    const std::uint64_t seed = snap.metadata.at("seed").get<std::uint64_t>();
    const TaskSequence seq = build_tasks(c, seed);
    const fs::path dir = req.output_dir.empty() ? path.parent_path() : req.output_dir;
    const std::string stem = path.stem().string();
    for (auto criterion : req.criteria) {
      const PruneCurve curve = prune_and_score(snap.state, seq, criterion, req.fractions, build_eval_config(c, seed));
      const fs::path file = dir / ("prune_" + std::string(to_string(criterion)) + "_seed" + std::to_string(seed) + "_" +
                                   stem + ".csv");
      write_file_atomic(file, prune_csv(curve, seed));
      written.push_back(file);
      for (std::size_t i = 0; i < curve.fractions.size(); ++i)
        summary[{to_string(criterion), i}].push_back(curve.accuracies[i]);
    }
  }
  if (req.snapshots.size() > 1) {
    std::string out = "fraction,criterion,mean_accuracy,se,n\n";
    for (const auto& [key, vals] : summary) {
      const auto [m, se] = mean_se(vals);
      out += csv_number(req.fractions[key.second]) + "," + key.first + "," + csv_number(m) + "," + csv_number(se) + "," +
             std::to_string(vals.size()) + "\n";
    }
    const fs::path dir = req.output_dir.empty() ? req.snapshots.front().parent_path() : req.output_dir;
    written.push_back(dir / "prune_summary.csv");
    write_file_atomic(written.back(), out);
  }
  return written;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
  return out;
}

/// Reads an accuracy CSV back into a matrix.
inline AccuracyMatrix read_accuracy_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FileNotFoundError("cannot open '" + path.string() + "'");
  std::string line;
  std::getline(in, line);
  if (line != "eval_after_task,task,accuracy,seed") throw std::runtime_error("'" + path.string() + "' is not an accuracy CSV");
  AccuracyMatrix m;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != 4) throw std::runtime_error("malformed row in '" + path.string() + "': " + line);
    const std::size_t t = std::stoul(cells[0]), j = std::stoul(cells[1]);
    if (t == 0 || j == 0 || j > t) throw std::runtime_error("bad task indices in '" + path.string() + "': " + line);
    if (m.rows.size() < t) m.rows.resize(t);
    if (m.rows[t - 1].size() < j) m.rows[t - 1].resize(j);
    m.rows[t - 1][j - 1] = std::stod(cells[2]);
  }
  return m;
}

/// Re-aggregates every seed_*/accuracy.csv under `dir`, rewrites
/// aggregate.csv and returns a short human-readable summary.
inline std::string report(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw FileNotFoundError("report input directory not found: '" + dir.string() + "'");
  std::vector<std::pair<std::string, fs::path>> found;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (e.is_directory() && name.rfind("seed_", 0) == 0 && fs::exists(e.path() / "accuracy.csv")) {
      found.emplace_back(name, e.path() / "accuracy.csv");
    }
  }
  if (found.empty()) throw std::runtime_error("no seed_*/accuracy.csv files under '" + dir.string() + "'");
  std::sort(found.begin(), found.end());
  std::vector<AccuracyMatrix> mats;
  std::vector<double> finals;
  std::ostringstream os;
  for (const auto& [name, path] : found) {
    mats.push_back(read_accuracy_csv(path));
    finals.push_back(mats.back().final_average());
    os << name << ": final average accuracy " << csv_number(finals.back()) << " over " << mats.back().rows.size()
       << " tasks\n";
  }
  const auto [m, se] = mean_se(finals);
  os << "mean over " << finals.size() << " seeds: " << csv_number(m) << " +/- " << csv_number(se) << " (SE)\n";
  write_file_atomic(dir / "aggregate.csv", aggregate_csv(mats));
  return os.str();
}

}  // namespace ibpbnn
