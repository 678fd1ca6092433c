#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ednil/config.hpp"

namespace ednil {

// Command-line overrides applied on top of the config file.
struct Overrides {
  std::optional<std::string> output_dir;
  std::vector<std::uint64_t> seeds;
};

ExperimentConfig apply_overrides(ExperimentConfig config, const Overrides& overrides);

// Per-environment summary of a generated dataset (label and color flip
// rates, subgroup positive rates, or regression correlations).
nlohmann::json dataset_summary(const LabeledDataset& data);

// Artifact names inside the output directory.
std::string run_stem(const std::string& method, std::uint64_t seed);

// Each command returns the process exit code: 0 iff every requested run
// finished without divergence. Human-readable progress goes to `out`.

// Writes <stem>-train.ds (plus -val.ds and -<test>.ds) and a provenance
// sidecar <stem>-dataset.json for the first seed.
int cmd_gen(const ExperimentConfig& config, std::ostream& out);

// One run per seed: <method>-seed<s>.report.json, .timing.json and .ckpt,
// plus one appended row in runs.csv.
int cmd_train(const ExperimentConfig& config, std::ostream& out);

// Evaluation-only report for a checkpoint against the config's tests.
int cmd_eval(const ExperimentConfig& config, const std::filesystem::path& checkpoint,
             std::ostream& out);

// sweep-<axis>.csv (mean and sd per value), sweep-<axis>.runs.csv and
// sweep-<axis>.json.
int cmd_sweep(const ExperimentConfig& config, SweepAxis axis, const std::vector<double>& values,
              std::ostream& out);

// Entropy diagnostics and oracle agreement of a checkpoint's inferred
// environments on its training data; writes diag-<checkpoint stem>.json.
int cmd_diag(const ExperimentConfig& config, const std::filesystem::path& checkpoint,
             std::ostream& out);

}  // namespace ednil
