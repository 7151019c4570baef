#pragma once

// Experiment configuration: a flat JSON object with a fixed set of keys.
// Parsing never stops at the first problem; every bad or unknown key is
// reported in one ConfigError.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

namespace ibpbnn {

class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(std::vector<std::string> errors)
      : std::invalid_argument(join(errors)), errors_(std::move(errors)) {}
  const std::vector<std::string>& errors() const { return errors_; }

 private:
  static std::string join(const std::vector<std::string>& errors) {
    std::string s = "invalid configuration:";
    for (const auto& e : errors) s += "\n  - " + e;
    return s;
  }
  std::vector<std::string> errors_;
};

struct ExperimentConfig {
  std::string model = "ibnn";          // ibnn | hibnn | vcl
  std::string scenario = "CL1";        // CL1 | CL2 | CL3
  std::string task_suite = "split_synth";
  std::string head_mode = "auto";      // auto | multi_head | single_head

  // Network and priors.
  std::size_t K = 100;
  std::size_t layers = 1;
  double lambda1 = 0.0;  // left at 0 by the file: default_temperature()
  double lambda2 = 0.0;
  double alpha_prior = 5.0;
  double beta_prior = 1.0;
  double gaussian_prior_var = 1.0;
  std::vector<double> child_alpha;  // empty: child_alpha_default in every layer
  double child_alpha_default = 4.0;
  double boundary_multiplier = 1.0;

  // Optimization.
  std::size_t epochs = 50;
  std::size_t batch_size = 128;
  double lr_init = 1e-3;
  double lr_decay_rate = 0.87;
  double lr_decay_every = 1000.0;
  std::size_t n_stick_samples = 10;
  std::size_t ml_init_epochs = 100;
  double first_task_epoch_factor = 1.0;

  // Evaluation.
  std::size_t n_mc = 10;
  std::size_t head_inference_batch = 100;

  // Task suite.
  std::size_t n_tasks = 5;
  std::size_t n_per_class = 250;
  std::size_t n_test_per_class = 100;
  std::size_t dim = 10;
  double separation = 5.0;
  std::size_t n_classes = 10;  // permuted_synth base classes
  std::string idx_dir;         // directory with the four MNIST IDX files
  std::size_t idx_per_class = 0;  // 0 keeps every training example

  // Run control.
  std::vector<std::uint64_t> seeds{0};
  std::size_t workers = 1;
  std::string output_dir = "results";
  bool save_snapshots = true;

  bool synthetic() const { return task_suite == "split_synth" || task_suite == "permuted_synth" || task_suite == "increasing"; }
  bool permuted() const { return task_suite == "permuted_synth" || task_suite == "permuted_idx"; }
};

namespace detail {

struct FieldDef {
  std::string name;
  std::function<std::string(const nlohmann::json&, ExperimentConfig&)> set;  // "" on success
  std::function<nlohmann::json(const ExperimentConfig&)> get;
};

inline std::string kind_error(const std::string& name, const char* want) {
  return "'" + name + "' must be " + want;
}

template <class T>
std::string assign(const std::string& name, const nlohmann::json& v, T& out) {
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) return kind_error(name, "true or false");
    out = v.get<bool>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) return kind_error(name, "a string");
    out = v.get<std::string>();
  } else if constexpr (std::is_same_v<T, double>) {
    if (!v.is_number()) return kind_error(name, "a number");
    out = v.get<double>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer() || v.get<long long>() < 0) return kind_error(name, "a non-negative integer");
    out = v.get<T>();
  } else {
    using E = typename T::value_type;
    if (!v.is_array()) return kind_error(name, "a list");
    T tmp;
    for (const auto& e : v) {
      E x{};
      if (!assign(name + " entry", e, x).empty()) {
        return kind_error(name, std::is_same_v<E, double> ? "a list of numbers" : "a list of non-negative integers");
      }
      tmp.push_back(x);
    }
    out = std::move(tmp);
  }
  return {};
}

template <class T>
FieldDef field(std::string name, T ExperimentConfig::*member) {
  return {name,
          [name, member](const nlohmann::json& v, ExperimentConfig& c) { return assign(name, v, c.*member); },
          [member](const ExperimentConfig& c) { return nlohmann::json(c.*member); }};
}

inline const std::vector<FieldDef>& config_fields() {
  using C = ExperimentConfig;
  static const std::vector<FieldDef> fields = {
      field("model", &C::model),
      field("scenario", &C::scenario),
      field("task_suite", &C::task_suite),
      field("head_mode", &C::head_mode),
      field("K", &C::K),
      field("layers", &C::layers),
      field("lambda1", &C::lambda1),
      field("lambda2", &C::lambda2),
      field("alpha_prior", &C::alpha_prior),
      field("beta_prior", &C::beta_prior),
      field("gaussian_prior_var", &C::gaussian_prior_var),
      field("child_alpha", &C::child_alpha),
      field("child_alpha_default", &C::child_alpha_default),
      field("boundary_multiplier", &C::boundary_multiplier),
      field("epochs", &C::epochs),
      field("batch_size", &C::batch_size),
      field("lr_init", &C::lr_init),
      field("lr_decay_rate", &C::lr_decay_rate),
      field("lr_decay_every", &C::lr_decay_every),
      field("n_stick_samples", &C::n_stick_samples),
      field("ml_init_epochs", &C::ml_init_epochs),
      field("first_task_epoch_factor", &C::first_task_epoch_factor),
      field("n_mc", &C::n_mc),
      field("head_inference_batch", &C::head_inference_batch),
      field("n_tasks", &C::n_tasks),
      field("n_per_class", &C::n_per_class),
      field("n_test_per_class", &C::n_test_per_class),
      field("dim", &C::dim),
      field("separation", &C::separation),
      field("n_classes", &C::n_classes),
      field("idx_dir", &C::idx_dir),
      field("idx_per_class", &C::idx_per_class),
      field("seeds", &C::seeds),
      field("workers", &C::workers),
      field("output_dir", &C::output_dir),
      field("save_snapshots", &C::save_snapshots),
  };
  return fields;
}

inline void check_choice(std::vector<std::string>& errors, const std::string& name, const std::string& value,
                         const std::set<std::string>& allowed) {
  if (allowed.count(value)) return;
  std::string list;
  for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
  errors.push_back("'" + name + "' is '" + value + "', expected one of: " + list);
}

inline void check_positive(std::vector<std::string>& errors, const std::string& name, double v) {
  if (!(v > 0) || !std::isfinite(v)) errors.push_back("'" + name + "' must be positive (got " + std::to_string(v) + ")");
}

}  // namespace detail

/// Concrete temperatures default to 1 on permuted suites and 0.7 otherwise.
inline double default_temperature(const ExperimentConfig& c) { return c.permuted() ? 1.0 : 0.7; }

/// Every semantic problem with `c`, in field order.
inline std::vector<std::string> config_problems(const ExperimentConfig& c) {
  using detail::check_choice;
  using detail::check_positive;
  std::vector<std::string> e;
  check_choice(e, "model", c.model, {"ibnn", "hibnn", "vcl"});
  check_choice(e, "scenario", c.scenario, {"CL1", "CL2", "CL3"});
  check_choice(e, "task_suite", c.task_suite, {"split_synth", "permuted_synth", "increasing", "split_idx", "permuted_idx"});
  check_choice(e, "head_mode", c.head_mode, {"auto", "multi_head", "single_head"});
  if (c.K == 0) e.push_back("'K' must be a positive integer (got 0)");
  if (c.layers == 0) e.push_back("'layers' must be a positive integer (got 0)");
  check_positive(e, "lambda1", c.lambda1);
  check_positive(e, "lambda2", c.lambda2);
  check_positive(e, "alpha_prior", c.alpha_prior);
  check_positive(e, "beta_prior", c.beta_prior);
  check_positive(e, "gaussian_prior_var", c.gaussian_prior_var);
  if (!c.child_alpha.empty() && c.child_alpha.size() != c.layers) {
    e.push_back("'child_alpha' has " + std::to_string(c.child_alpha.size()) + " entries for " +
                std::to_string(c.layers) + " layers");
  }
  for (double a : c.child_alpha)
    if (!(a > 0)) e.push_back("'child_alpha' entries must be positive");
  check_positive(e, "child_alpha_default", c.child_alpha_default);
  check_positive(e, "boundary_multiplier", c.boundary_multiplier);
  if (c.batch_size == 0) e.push_back("'batch_size' must be a positive integer (got 0)");
  check_positive(e, "lr_init", c.lr_init);
  check_positive(e, "lr_decay_rate", c.lr_decay_rate);
  check_positive(e, "lr_decay_every", c.lr_decay_every);
  if (c.n_stick_samples == 0) e.push_back("'n_stick_samples' must be a positive integer (got 0)");
  check_positive(e, "first_task_epoch_factor", c.first_task_epoch_factor);
  if (c.n_mc == 0) e.push_back("'n_mc' must be a positive integer (got 0)");
  if (c.head_inference_batch == 0) e.push_back("'head_inference_batch' must be a positive integer (got 0)");
  if (c.n_tasks == 0) e.push_back("'n_tasks' must be a positive integer (got 0)");
  if (c.synthetic()) {
    if (c.n_per_class == 0) e.push_back("'n_per_class' must be a positive integer (got 0)");
    if (c.n_test_per_class == 0) e.push_back("'n_test_per_class' must be a positive integer (got 0)");
    if (c.dim == 0) e.push_back("'dim' must be a positive integer (got 0)");
    check_positive(e, "separation", c.separation);
  }
  if (c.task_suite == "increasing" && c.n_tasks != 6) e.push_back("'n_tasks' must be 6 for the increasing suite");
  if (c.task_suite == "permuted_synth" && c.n_classes < 2) e.push_back("'n_classes' must be at least 2");
  if ((c.task_suite == "split_idx" || c.task_suite == "permuted_idx") && c.idx_dir.empty()) {
    e.push_back("'idx_dir' is required for IDX task suites");
  }
  if (c.task_suite == "split_idx" && c.n_tasks > 5) e.push_back("'n_tasks' must be at most 5 for split_idx");
  if (c.seeds.empty()) e.push_back("'seeds' must list at least one seed");
  if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size()) {
    e.push_back("'seeds' must not repeat a seed");
  }
  if (c.workers == 0) e.push_back("'workers' must be a positive integer (got 0)");
  if (c.output_dir.empty()) e.push_back("'output_dir' must not be empty");
  const bool single = c.head_mode == "single_head" || (c.head_mode == "auto" && c.permuted() && c.scenario == "CL2");
  if (single && c.scenario == "CL3") e.push_back("'scenario' CL3 needs a multi-head network (head_mode)");
  return e;
}

/// Parses and validates a config object; `base` supplies values for keys
/// the object omits.
inline ExperimentConfig parse_config(const nlohmann::json& j, ExperimentConfig base = {}) {
  if (!j.is_object()) throw ConfigError({"configuration must be a JSON object"});
  std::vector<std::string> errors;
  const auto& fields = detail::config_fields();
  for (const auto& [key, value] : j.items()) {
    const auto it = std::find_if(fields.begin(), fields.end(), [&](const auto& f) { return f.name == key; });
    if (it == fields.end()) {
      errors.push_back("unknown key '" + key + "'");
      continue;
    }
    if (auto msg = it->set(value, base); !msg.empty()) errors.push_back(msg);
  }
  if (!j.contains("lambda1") && base.lambda1 == 0.0) base.lambda1 = default_temperature(base);
  if (!j.contains("lambda2") && base.lambda2 == 0.0) base.lambda2 = default_temperature(base);
  for (auto& msg : config_problems(base)) errors.push_back(std::move(msg));
  if (!errors.empty()) throw ConfigError(std::move(errors));
  return base;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& f : detail::config_fields()) j[f.name] = f.get(c);
  return j;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"cannot open config file '" + path.string() + "'"});
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError({"config file '" + path.string() + "' is not valid JSON: " + e.what()});
  }
  return parse_config(j);
}

}  // namespace ibpbnn
