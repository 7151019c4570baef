// Command-line front end: train, prune, report, validate.
//
// Precedence for every setting: command-line flag, then the config file,
// then the built-in default. IBPBNN_OUTPUT_DIR replaces the built-in
// default output directory.

#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ibpbnn/experiment.hpp"

namespace {

using namespace ibpbnn;

nlohmann::json read_config_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"cannot open config file '" + path + "'"});
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError({"config file '" + path + "' is not valid JSON: " + e.what()});
  }
}

ExperimentConfig defaults_from_env() {
  ExperimentConfig base;
  if (const char* dir = std::getenv("IBPBNN_OUTPUT_DIR"); dir && *dir) base.output_dir = dir;
  return base;
}

std::vector<double> parse_fractions(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw std::invalid_argument("bad pruning fraction '" + item + "'");
    }
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian neural networks with IBP-structured widths for continual learning"};
  app.require_subcommand(1);

  std::string config_path, output_dir;
  std::vector<std::uint64_t> seeds;
  auto* train = app.add_subcommand("train", "train every seed of an experiment and write CSVs and snapshots");
  train->add_option("--config", config_path, "experiment config (JSON)")->required();
  train->add_option("--seed", seeds, "seed(s) to run instead of the config's list");
  train->add_option("--output", output_dir, "output directory");

  std::vector<std::string> snapshots, criteria;
  std::string fractions = "0,0.5,0.9,0.95,0.99,1.0";
  std::string prune_out;
  auto* prune = app.add_subcommand("prune", "pruning curves for saved snapshots");
  prune->add_option("--snapshot", snapshots, "snapshot file(s)")->required();
  prune->add_option("--criterion", criteria, "snr and/or abs_mean")->required()->delimiter(',');
  prune->add_option("--fractions", fractions, "comma-separated ascending fractions in [0, 1]");
  prune->add_option("--output", prune_out, "output directory (default: next to each snapshot)");

  std::string report_dir;
  auto* rep = app.add_subcommand("report", "summarize the per-seed CSVs of a finished run");
  rep->add_option("--input", report_dir, "run output directory")->required();

  std::string validate_path;
  auto* val = app.add_subcommand("validate", "check a config and print it with defaults filled in");
  val->add_option("--config", validate_path, "experiment config (JSON)")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      nlohmann::json j = read_config_json(config_path);
      if (!seeds.empty()) j["seeds"] = seeds;
      if (!output_dir.empty()) j["output_dir"] = output_dir;
      const ExperimentConfig cfg = parse_config(j, defaults_from_env());
      const ExperimentResult res = run_experiment(cfg, &std::cerr);
      std::cout << report(cfg.output_dir);
      return res.exit_status;
    }
    if (*prune) {
      PruneRequest req;
      for (const auto& s : snapshots) req.snapshots.emplace_back(s);
      for (const auto& c : criteria) req.criteria.push_back(prune_criterion_from_string(c));
      req.fractions = parse_fractions(fractions);
      req.output_dir = prune_out;
      for (const auto& p : run_prune(req)) std::cout << p.string() << '\n';
      return 0;
    }
    if (*rep) {
      std::cout << report(report_dir);
      return 0;
    }
    if (*val) {
      const ExperimentConfig cfg = parse_config(read_config_json(validate_path), defaults_from_env());
      std::cout << config_to_json(cfg).dump(2) << '\n';
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
