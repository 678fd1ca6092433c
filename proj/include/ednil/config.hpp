#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ednil/datagen.hpp"
#include "ednil/engine.hpp"

namespace ednil {

struct RegressionTest {
  std::string name;
  std::vector<RegressionEnv> envs;
};

struct FileTest {
  std::string name;
  std::string path;
};

// Where training and test data come from. Generators: "cmnist-bits",
// "cmnist" (MNIST IDX files), "adult" (UCI CSV files), "regression", and
// "files" (containers written by `gen`).
struct DatasetConfig {
  std::string generator = "cmnist-bits";
  // Fixed data seed; when unset each run seed gets its own draw.
  std::optional<std::uint64_t> seed;
  double val_fraction = 0.0;

  ColorShift shift;
  std::vector<double> test_color_noise{0.1, 0.5, 0.9};
  BitsSpec bits;
  // Rows per test environment for cmnist-bits; 0 = bits.n.
  Index test_rows = 0;

  std::string mnist_train_images;
  std::string mnist_train_labels;
  std::string mnist_test_images;
  std::string mnist_test_labels;
  std::size_t max_rows = 0;  // 0 = all

  std::string adult_train;
  std::string adult_test;

  RegressionSemSpec regression;
  std::optional<std::uint64_t> structure_seed;
  std::vector<RegressionEnv> train_envs{std::begin(kRegressionTrain), std::end(kRegressionTrain)};
  std::vector<RegressionTest> regression_tests;

  std::string train_path;
  std::string val_path;
  std::vector<FileTest> test_paths;

  void validate() const;
};

// Default regression tests: iid (same as training), ood (r = -2.5) and six
// stability environments r = -2.9 ... -1.9, 1000 rows each.
std::vector<RegressionTest> default_regression_tests();

struct ExperimentConfig {
  DatasetConfig dataset;
  TrainPlan plan;
  std::string output_dir = "runs";
  std::vector<std::uint64_t> seeds{0};

  void validate() const;
};

// Strict: unknown keys anywhere raise ConfigError. Top-level "model", "ei"
// and "il" blocks are accepted as siblings of "plan".
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const ExperimentConfig& config);
nlohmann::json to_json(const DatasetConfig& dataset);

// Canonical form hashed into every artifact: all defaults filled in, keys
// sorted, output_dir, seeds and plan.seed removed.
nlohmann::json canonical_config(const ExperimentConfig& config);
// FNV-1a 64 of canonical_config(config).dump(), as 16 hex digits.
std::string config_hash(const ExperimentConfig& config);
std::uint64_t fnv1a64(std::string_view bytes);

std::uint64_t data_seed(const DatasetConfig& dataset, std::uint64_t run_seed);

// Builds train, optional validation and test sets for one run seed. The
// color-noise override replaces the training color noise with the pair
// (v - 0.05, v + 0.05).
ExperimentData make_experiment_data(const DatasetConfig& dataset, std::uint64_t run_seed,
                                    std::optional<double> color_noise = std::nullopt);

DataFactory data_factory(const DatasetConfig& dataset);

}  // namespace ednil
