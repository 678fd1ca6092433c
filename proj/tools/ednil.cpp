#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ednil/commands.hpp"
#include "ednil/errors.hpp"
#include "ednil/log.hpp"
#include "ednil/platform.hpp"

namespace {

struct Common {
  std::string config;
  std::string output_dir;
  std::vector<std::uint64_t> seeds;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("-o,--output-dir", c.output_dir, "override output_dir");
  cmd->add_option("-s,--seed", c.seeds, "override the seed list");
}

ednil::ExperimentConfig load(const Common& c) {
  ednil::Overrides o;
  if (!c.output_dir.empty()) o.output_dir = c.output_dir;
  o.seeds = c.seeds;
  return ednil::apply_overrides(ednil::load_config(c.config), o);
}

}  // namespace

int main(int argc, char** argv) {
  ednil::tune_allocator();
  CLI::App app{"Environment inference and invariant learning experiments"};
  app.require_subcommand(1);
  bool quiet = false;
  bool verbose = false;
  app.add_flag("-q,--quiet", quiet, "suppress warnings");
  app.add_flag("-v,--verbose", verbose, "log progress");

  Common gen_args, train_args, eval_args, sweep_args, diag_args;
  std::string eval_ckpt, diag_ckpt, axis;
  std::vector<double> values;

  auto* gen = app.add_subcommand("gen", "generate datasets and a provenance sidecar");
  add_common(gen, gen_args);
  auto* train = app.add_subcommand("train", "train one run per seed");
  add_common(train, train_args);
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the config's test environments");
  add_common(eval, eval_args);
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  auto* sweep = app.add_subcommand("sweep", "sweep one axis over values and seeds");
  add_common(sweep, sweep_args);
  sweep->add_option("--axis", axis, "color-noise, K or init-steps")->required();
  sweep->add_option("--values", values, "axis values")->required()->delimiter(',');
  auto* diag = app.add_subcommand("diag", "entropy diagnostics of a checkpoint's environments");
  add_common(diag, diag_args);
  diag->add_option("--checkpoint", diag_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);
  if (quiet) ednil::set_log_level(ednil::LogLevel::kQuiet);
  if (verbose) ednil::set_log_level(ednil::LogLevel::kInfo);

  try {
    if (gen->parsed()) return ednil::cmd_gen(load(gen_args), std::cout);
    if (train->parsed()) return ednil::cmd_train(load(train_args), std::cout);
    if (eval->parsed()) return ednil::cmd_eval(load(eval_args), eval_ckpt, std::cout);
    if (sweep->parsed()) {
      const auto parsed_axis = ednil::sweep_axis_from_string(axis);
      return ednil::cmd_sweep(load(sweep_args), parsed_axis, values, std::cout);
    }
    if (diag->parsed()) return ednil::cmd_diag(load(diag_args), diag_ckpt, std::cout);
  } catch (const ednil::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const ednil::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
