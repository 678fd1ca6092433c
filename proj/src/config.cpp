#include "ednil/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

#include "ednil/errors.hpp"
#include "ednil/json_fields.hpp"
#include "ednil/random.hpp"

namespace ednil {

namespace {

const std::set<std::string> kGenerators{"cmnist-bits", "cmnist", "adult", "regression", "files"};

nlohmann::json envs_json(const std::vector<RegressionEnv>& envs) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& e : envs) out.push_back({{"r", e.r}, {"count", e.count}});
  return out;
}

std::vector<RegressionEnv> envs_from_json(const nlohmann::json& j, const std::string& where) {
  if (!j.is_array()) throw ConfigError(where + ": expected an array of {r, count}");
  std::vector<RegressionEnv> out;
  for (std::size_t i = 0; i < j.size(); ++i) {
    JsonFields f(j[i], where + "[" + std::to_string(i) + "]");
    RegressionEnv env;
    f.require("r", env.r);
    f.require("count", env.count);
    f.finish();
    out.push_back(env);
  }
  return out;
}

std::vector<RegressionTest> regression_tests_or_default(const DatasetConfig& d) {
  return d.regression_tests.empty() ? default_regression_tests() : d.regression_tests;
}

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) {
    throw ConfigError("external data required: set dataset." + what +
                      " (the file is not bundled with this repository)");
  }
  if (!std::filesystem::exists(path)) {
    throw ConfigError("external data required: dataset." + what + " = '" + path +
                      "' does not exist");
  }
}

}  // namespace

std::vector<RegressionTest> default_regression_tests() {
  std::vector<RegressionTest> out;
  out.push_back({"iid", {std::begin(kRegressionTrain), std::end(kRegressionTrain)}});
  out.push_back({"ood", {{-2.5, 1000}}});
  const double rs[] = {-2.9, -2.7, -2.5, -2.3, -2.1, -1.9};
  for (double r : rs) {
    char name[32];
    std::snprintf(name, sizeof(name), "stab%.1f", r);
    out.push_back({name, {{r, 1000}}});
  }
  return out;
}

void DatasetConfig::validate() const {
  if (!kGenerators.count(generator)) {
    throw ConfigError("dataset.generator '" + generator +
                      "' is not one of cmnist-bits, cmnist, adult, regression, files");
  }
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
    throw ConfigError("dataset.val_fraction must be in [0, 1)");
  }
  if (generator == "cmnist-bits" || generator == "cmnist") {
    shift.validate();
    for (double e : test_color_noise) {
      if (!(e >= 0.0 && e <= 1.0)) throw ConfigError("dataset.test_color_noise must be in [0, 1]");
    }
  }
  if (generator == "cmnist-bits") {
    if (bits.n <= 0 || bits.dim_c <= 0 || bits.dim_v <= 0) {
      throw ConfigError("dataset.bits: n, dim_c and dim_v must be positive");
    }
    if (!(bits.noise_sd >= 0.0)) throw ConfigError("dataset.bits.noise_sd must be >= 0");
    if (test_rows < 0) throw ConfigError("dataset.test_rows must be >= 0");
  }
  if (generator == "regression") {
    if (regression.d_c <= 0 || regression.d_v <= 0) {
      throw ConfigError("dataset.regression: d_c and d_v must be positive");
    }
    if (train_envs.empty()) throw ConfigError("dataset.train_envs must not be empty");
  }
  if (generator == "files" && train_path.empty()) {
    throw ConfigError("dataset.train_path is required for the files generator");
  }
}

void ExperimentConfig::validate() const {
  dataset.validate();
  plan.validate();
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

nlohmann::json to_json(const DatasetConfig& d) {
  nlohmann::json j = {{"generator", d.generator}, {"val_fraction", d.val_fraction}};
  j["seed"] = d.seed ? nlohmann::json(*d.seed) : nlohmann::json(nullptr);
  if (d.generator == "cmnist-bits" || d.generator == "cmnist") {
    j["label_noise"] = d.shift.label_noise;
    j["color_noise"] = d.shift.color_noise;
    j["test_color_noise"] = d.test_color_noise;
  }
  if (d.generator == "cmnist-bits") {
    j["bits"] = {{"n", d.bits.n},
                 {"dim_c", d.bits.dim_c},
                 {"dim_v", d.bits.dim_v},
                 {"noise_sd", d.bits.noise_sd}};
    j["test_rows"] = d.test_rows;
  }
  if (d.generator == "cmnist") {
    j["mnist_train_images"] = d.mnist_train_images;
    j["mnist_train_labels"] = d.mnist_train_labels;
    j["mnist_test_images"] = d.mnist_test_images;
    j["mnist_test_labels"] = d.mnist_test_labels;
    j["max_rows"] = d.max_rows;
  }
  if (d.generator == "adult") {
    j["adult_train"] = d.adult_train;
    j["adult_test"] = d.adult_test;
  }
  if (d.generator == "regression") {
    j["regression"] = {{"d_c", d.regression.d_c},
                       {"d_v", d.regression.d_v},
                       {"noise_sd", d.regression.noise_sd}};
    j["structure_seed"] =
        d.structure_seed ? nlohmann::json(*d.structure_seed) : nlohmann::json(nullptr);
    j["train_envs"] = envs_json(d.train_envs);
    nlohmann::json tests = nlohmann::json::array();
    for (const auto& t : regression_tests_or_default(d)) {
      tests.push_back({{"name", t.name}, {"envs", envs_json(t.envs)}});
    }
    j["tests"] = tests;
  }
  if (d.generator == "files") {
    j["train_path"] = d.train_path;
    j["val_path"] = d.val_path;
    nlohmann::json tests = nlohmann::json::array();
    for (const auto& t : d.test_paths) tests.push_back({{"name", t.name}, {"path", t.path}});
    j["tests"] = tests;
  }
  return j;
}

nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"dataset", to_json(c.dataset)},
          {"plan", to_json(c.plan)},
          {"output_dir", c.output_dir},
          {"seeds", c.seeds}};
}

namespace {

DatasetConfig dataset_from_json(const nlohmann::json& j) {
  DatasetConfig d;
  JsonFields f(j, "dataset");
  f.get("generator", d.generator);
  if (const auto* s = f.child("seed"); s && !s->is_null()) {
    if (!s->is_number_unsigned()) throw ConfigError("dataset.seed must be a nonnegative integer");
    d.seed = s->get<std::uint64_t>();
  }
  f.get("val_fraction", d.val_fraction);
  f.get("label_noise", d.shift.label_noise);
  f.get("color_noise", d.shift.color_noise);
  f.get("test_color_noise", d.test_color_noise);
  if (const auto* b = f.child("bits")) {
    JsonFields g(*b, f.path("bits"));
    g.get("n", d.bits.n);
    g.get("dim_c", d.bits.dim_c);
    g.get("dim_v", d.bits.dim_v);
    g.get("noise_sd", d.bits.noise_sd);
    g.finish();
  }
  f.get("test_rows", d.test_rows);
  f.get("mnist_train_images", d.mnist_train_images);
  f.get("mnist_train_labels", d.mnist_train_labels);
  f.get("mnist_test_images", d.mnist_test_images);
  f.get("mnist_test_labels", d.mnist_test_labels);
  f.get("max_rows", d.max_rows);
  f.get("adult_train", d.adult_train);
  f.get("adult_test", d.adult_test);
  if (const auto* r = f.child("regression")) {
    JsonFields g(*r, f.path("regression"));
    g.get("d_c", d.regression.d_c);
    g.get("d_v", d.regression.d_v);
    g.get("noise_sd", d.regression.noise_sd);
    g.finish();
  }
  if (const auto* s = f.child("structure_seed"); s && !s->is_null()) {
    if (!s->is_number_unsigned()) {
      throw ConfigError("dataset.structure_seed must be a nonnegative integer");
    }
    d.structure_seed = s->get<std::uint64_t>();
  }
  if (const auto* e = f.child("train_envs")) d.train_envs = envs_from_json(*e, f.path("train_envs"));
  f.get("train_path", d.train_path);
  f.get("val_path", d.val_path);
  if (const auto* t = f.child("tests")) {
    if (!t->is_array()) throw ConfigError("dataset.tests: expected an array");
    for (std::size_t i = 0; i < t->size(); ++i) {
      const std::string where = f.path("tests") + "[" + std::to_string(i) + "]";
      JsonFields g((*t)[i], where);
      std::string name;
      g.require("name", name);
      if (d.generator == "files") {
        std::string path;
        g.require("path", path);
        d.test_paths.push_back({name, path});
      } else if (d.generator == "regression") {
        const auto* envs = g.child("envs");
        if (!envs) throw ConfigError(where + ": missing required key 'envs'");
        d.regression_tests.push_back({name, envs_from_json(*envs, where + ".envs")});
      } else {
        throw ConfigError("dataset.tests is only used by the files and regression generators");
      }
      g.finish();
    }
  }
  f.finish();
  if (d.generator == "regression" && d.regression_tests.empty()) {
    d.regression_tests = default_regression_tests();
  }
  return d;
}

}  // namespace

ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  JsonFields f(j, "config");
  if (const auto* d = f.child("dataset")) c.dataset = dataset_from_json(*d);
  nlohmann::json plan = nlohmann::json::object();
  if (const auto* p = f.child("plan")) {
    if (!p->is_object()) throw ConfigError("config.plan: expected a JSON object");
    plan = *p;
  }
  for (const char* block : {"model", "ei", "il"}) {
    if (const auto* b = f.child(block)) {
      if (plan.contains(block)) {
        throw ConfigError(std::string("config: '") + block + "' given both at top level and in plan");
      }
      plan[block] = *b;
    }
  }
  c.plan = plan_from_json(plan);
  f.get("output_dir", c.output_dir);
  f.get("seeds", c.seeds);
  f.finish();
  if (c.dataset.generator == "regression" && c.dataset.regression_tests.empty()) {
    c.dataset.regression_tests = default_regression_tests();
  }
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file '" + path.string() + "': " + e.what());
  }
  return config_from_json(j);
}

nlohmann::json canonical_config(const ExperimentConfig& config) {
  nlohmann::json j = to_json(config);
  j.erase("output_dir");
  j.erase("seeds");
  j["plan"].erase("seed");
  return j;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const ExperimentConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(canonical_config(config).dump())));
  return buf;
}

std::uint64_t data_seed(const DatasetConfig& dataset, std::uint64_t run_seed) {
  return dataset.seed ? *dataset.seed : derive_seed(run_seed, 10);
}

namespace {

ExperimentData color_bits_data(const DatasetConfig& d, std::uint64_t seed, const ColorShift& shift) {
  ExperimentData out;
  out.train = make_cmnist_bits(d.bits, shift, seed);
  BitsSpec test_spec = d.bits;
  if (d.test_rows > 0) test_spec.n = d.test_rows;
  for (std::size_t k = 0; k < d.test_color_noise.size(); ++k) {
    const double e = d.test_color_noise[k];
    ColorShift test_shift{shift.label_noise, {e}};
    char name[32];
    std::snprintf(name, sizeof(name), "test%g", e);
    out.tests.push_back(
        NamedDataset{name, make_cmnist_bits(test_spec, test_shift, derive_seed(seed, 100 + k))});
  }
  return out;
}

ExperimentData color_mnist_data(const DatasetConfig& d, std::uint64_t seed, const ColorShift& shift) {
  require_file(d.mnist_train_images, "mnist_train_images");
  require_file(d.mnist_train_labels, "mnist_train_labels");
  require_file(d.mnist_test_images, "mnist_test_images");
  require_file(d.mnist_test_labels, "mnist_test_labels");
  ExperimentData out;
  const MnistDigits train = load_mnist_idx(d.mnist_train_images, d.mnist_train_labels, d.max_rows);
  const MnistDigits test = load_mnist_idx(d.mnist_test_images, d.mnist_test_labels);
  out.train = make_cmnist(train, shift, seed);
  for (std::size_t k = 0; k < d.test_color_noise.size(); ++k) {
    const double e = d.test_color_noise[k];
    char name[32];
    std::snprintf(name, sizeof(name), "test%g", e);
    out.tests.push_back(NamedDataset{
        name, make_cmnist(test, ColorShift{shift.label_noise, {e}}, derive_seed(seed, 100 + k))});
  }
  return out;
}

ExperimentData adult_data(const DatasetConfig& d, std::uint64_t seed) {
  require_file(d.adult_train, "adult_train");
  require_file(d.adult_test, "adult_test");
  const AdultRecords train = load_adult_csv(d.adult_train);
  const AdultRecords test = load_adult_csv(d.adult_test);
  const AdultEncoding encoding = AdultEncoding::fit(train);
  ExperimentData out;
  out.train = resample_adult_confounded(train, encoding, kAdultTrain, seed);
  out.tests.push_back(
      NamedDataset{"iid", resample_adult_confounded(test, encoding, kAdultIid, derive_seed(seed, 101))});
  out.tests.push_back(
      NamedDataset{"ind", resample_adult_confounded(test, encoding, kAdultInd, derive_seed(seed, 102))});
  out.tests.push_back(
      NamedDataset{"ood", resample_adult_confounded(test, encoding, kAdultOod, derive_seed(seed, 103))});
  return out;
}

ExperimentData regression_data(const DatasetConfig& d, std::uint64_t seed) {
  RegressionSemSpec spec = d.regression;
  spec.structure_seed = d.structure_seed ? *d.structure_seed : derive_seed(seed, 20);
  ExperimentData out;
  out.train = make_regression_sem(spec, d.train_envs, seed);
  const auto tests = regression_tests_or_default(d);
  for (std::size_t k = 0; k < tests.size(); ++k) {
    const auto& t = tests[k];
    out.tests.push_back(NamedDataset{t.name, make_regression_sem(spec, t.envs, derive_seed(seed, 100 + k))});
  }
  return out;
}

ExperimentData file_data(const DatasetConfig& d) {
  ExperimentData out;
  out.train = load_dataset(d.train_path);
  if (!d.val_path.empty()) out.val = load_dataset(d.val_path);
  for (const auto& t : d.test_paths) out.tests.push_back(NamedDataset{t.name, load_dataset(t.path)});
  return out;
}

}  // namespace

ExperimentData make_experiment_data(const DatasetConfig& d, std::uint64_t run_seed,
                                    std::optional<double> color_noise) {
  d.validate();
  const std::uint64_t seed = data_seed(d, run_seed);
  ColorShift shift = d.shift;
  if (color_noise) {
    if (d.generator != "cmnist-bits" && d.generator != "cmnist") {
      throw ConfigError("the color-noise axis needs a colored-digit generator, not '" + d.generator + "'");
    }
    shift.color_noise = {*color_noise - 0.05, *color_noise + 0.05};
    shift.validate();
  }
  ExperimentData out;
  if (d.generator == "cmnist-bits") out = color_bits_data(d, seed, shift);
  if (d.generator == "cmnist") out = color_mnist_data(d, seed, shift);
  if (d.generator == "adult") out = adult_data(d, seed);
  if (d.generator == "regression") out = regression_data(d, seed);
  if (d.generator == "files") out = file_data(d);
  if (d.val_fraction > 0.0) {
    if (out.val) throw ConfigError("dataset.val_fraction and dataset.val_path are exclusive");
    auto [train, val] = split_validation(out.train, d.val_fraction, derive_seed(seed, 30));
    out.train = std::move(train);
    out.val = std::move(val);
  }
  return out;
}

DataFactory data_factory(const DatasetConfig& dataset) {
  return [dataset](SweepAxis axis, double value, std::uint64_t seed) {
    return make_experiment_data(dataset, seed,
                                axis == SweepAxis::kColorNoise ? std::optional<double>(value)
                                                               : std::nullopt);
  };
}

}  // namespace ednil
