#include "ednil/commands.hpp"

#include <cmath>
#include <fstream>
#include <map>

#include "ednil/errors.hpp"
#include "ednil/log.hpp"
#include "ednil/nets.hpp"

namespace ednil {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw InputError("write failed for '" + path.string() + "'");
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

fs::path prepare_dir(const ExperimentConfig& config) {
  const fs::path dir(config.output_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw InputError("cannot create output directory '" + dir.string() + "': " + ec.message());
  return dir;
}

std::vector<std::string> test_names(const ExperimentData& data) {
  std::vector<std::string> names;
  for (const auto& t : data.tests) names.push_back(t.name);
  return names;
}

void append_csv(const fs::path& path, const std::vector<std::string>& names, const RunReport& report) {
  const bool fresh = !fs::exists(path);
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) throw InputError("cannot append to '" + path.string() + "'");
  if (fresh) out << csv_header(names) << "\n";
  out << csv_row(report) << "\n";
}

double correlation(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  if (n < 2) return 0.0;
  double ma = 0.0;
  double mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i] / n;
    mb += b[i] / n;
  }
  double sab = 0.0;
  double saa = 0.0;
  double sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return saa > 0 && sbb > 0 ? sab / std::sqrt(saa * sbb) : 0.0;
}

std::string summary_line(const std::string& name, const LabeledDataset& data) {
  return name + ": N=" + std::to_string(data.size()) + " d=" + std::to_string(data.dim());
}

Checkpoint read_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw InputError("checkpoint '" + path.string() + "' does not exist");
  return load_checkpoint(path);
}

std::uint64_t checkpoint_seed(const Checkpoint& ckpt, const ExperimentConfig& config) {
  if (ckpt.meta.contains("seed")) return ckpt.meta.at("seed").get<std::uint64_t>();
  return config.seeds.front();
}

}  // namespace

ExperimentConfig apply_overrides(ExperimentConfig config, const Overrides& overrides) {
  if (overrides.output_dir) config.output_dir = *overrides.output_dir;
  if (!overrides.seeds.empty()) config.seeds = overrides.seeds;
  config.validate();
  return config;
}

std::string run_stem(const std::string& method, std::uint64_t seed) {
  return method + "-seed" + std::to_string(seed);
}

nlohmann::json dataset_summary(const LabeledDataset& data) {
  nlohmann::json j = {{"name", data.name}, {"rows", data.size()}, {"dim", data.dim()}};
  if (!data.oracle || data.oracle->kind == OracleKind::kNone) return j;
  const OracleInfo& o = *data.oracle;
  const auto& y = data.targets;
  std::map<int, std::vector<std::size_t>> by_env;
  for (std::size_t i = 0; i < o.env_id.size(); ++i) by_env[o.env_id[i]].push_back(i);
  nlohmann::json envs = nlohmann::json::array();
  for (const auto& [e, rows] : by_env) {
    nlohmann::json row = {{"env", e}, {"rows", rows.size()}};
    if (static_cast<std::size_t>(e) < o.env_param.size()) row["param"] = o.env_param[e];
    const double n = static_cast<double>(rows.size());
    if (o.kind == OracleKind::kColor) {
      double label_flip = 0.0;
      double color_flip = 0.0;
      for (std::size_t i : rows) {
        label_flip += (y.labels[i] != o.clean_label[i]) / n;
        color_flip += (o.color[i] != y.labels[i]) / n;
      }
      row["label_flip_rate"] = label_flip;
      row["color_flip_rate"] = color_flip;
    }
    if (o.kind == OracleKind::kRegression) {
      std::vector<double> ys;
      std::vector<double> xv;
      for (std::size_t i : rows) {
        ys.push_back(y.values[i]);
        xv.push_back(o.variant(static_cast<Index>(i), 0));
      }
      row["corr_y_xv_star"] = correlation(ys, xv);
    }
    envs.push_back(row);
  }
  if (o.kind == OracleKind::kSubgroup) {
    double pos[4] = {0, 0, 0, 0};
    double cnt[4] = {0, 0, 0, 0};
    for (std::size_t i = 0; i < o.subgroup.size(); ++i) {
      cnt[o.subgroup[i]] += 1;
      pos[o.subgroup[i]] += y.labels[i];
    }
    nlohmann::json rates = nlohmann::json::array();
    for (int g = 0; g < 4; ++g) {
      rates.push_back({{"subgroup", g + 1},
                       {"rows", cnt[g]},
                       {"positive_rate", cnt[g] > 0 ? pos[g] / cnt[g] : 0.0}});
    }
    j["subgroups"] = rates;
  }
  j["envs"] = envs;
  return j;
}

int cmd_gen(const ExperimentConfig& config, std::ostream& out) {
  if (config.dataset.generator == "files") {
    throw ConfigError("gen needs a generator; the files generator only reads existing containers");
  }
  const fs::path dir = prepare_dir(config);
  const std::uint64_t seed = config.seeds.front();
  const ExperimentData data = make_experiment_data(config.dataset, seed);
  const std::string stem = config.dataset.generator + "-seed" + std::to_string(seed);
  const std::string hash = config_hash(config);
  nlohmann::json files = nlohmann::json::object();
  nlohmann::json summary = nlohmann::json::object();

  const auto emit = [&](const std::string& tag, const LabeledDataset& d) {
    const fs::path path = dir / (stem + "-" + tag + ".ds");
    save_dataset(path, d);
    files[tag] = path.filename().string();
    summary[tag] = dataset_summary(d);
    out << summary_line(tag, d) << " -> " << path.string() << "\n";
    if (summary[tag].contains("envs")) {
      for (const auto& e : summary[tag]["envs"]) out << "  " << e.dump() << "\n";
    }
    if (summary[tag].contains("subgroups")) {
      for (const auto& g : summary[tag]["subgroups"]) out << "  " << g.dump() << "\n";
    }
  };
  emit("train", data.train);
  if (data.val) emit("val", *data.val);
  for (const auto& t : data.tests) emit(t.name, t.data);

  write_json(dir / (stem + "-dataset.json"), {{"config_hash", hash},
                                               {"seed", seed},
                                               {"data_seed", data_seed(config.dataset, seed)},
                                               {"dataset", to_json(config.dataset)},
                                               {"files", files},
                                               {"summary", summary}});
  return 0;
}

int cmd_train(const ExperimentConfig& config, std::ostream& out) {
  const fs::path dir = prepare_dir(config);
  const std::string hash = config_hash(config);
  const nlohmann::json canonical = canonical_config(config);
  const std::string method(to_string(config.plan.method));
  int exit_code = 0;
  for (std::uint64_t seed : config.seeds) {
    const ExperimentData data = make_experiment_data(config.dataset, seed);
    TrainPlan plan = config.plan;
    plan.seed = seed;
    JointResult result = run_experiment(plan, data.train, data.val, data.tests);
    RunReport& report = result.report;
    report.config_hash = hash;
    report.config = canonical;

    const std::string stem = run_stem(method, seed);
    write_json(dir / (stem + ".report.json"), report.deterministic_json());
    write_json(dir / (stem + ".timing.json"),
               {{"config_hash", hash}, {"seed", seed}, {"wall_clock_seconds", report.wall_clock_seconds}});
    append_csv(dir / "runs.csv", test_names(data), report);

    if (report.status == "ok") {
      Checkpoint ckpt;
      ckpt.meta = {{"config_hash", hash},
                   {"seed", seed},
                   {"method", method},
                   {"input_dim", data.train.dim()}};
      ckpt.ei = result.ei;
      ckpt.il = result.il;
      save_checkpoint(dir / (stem + ".ckpt"), ckpt);
    } else {
      exit_code = 1;
    }
    out << method << " seed=" << seed << " status=" << report.status;
    if (report.evaluation) out << " worst_case=" << report.evaluation->worst_case;
    if (report.diagnostics && report.diagnostics->agreement) {
      out << " agreement=" << *report.diagnostics->agreement;
    }
    if (!report.error.empty()) out << " error=\"" << report.error << "\"";
    out << "\n";
  }
  return exit_code;
}

int cmd_eval(const ExperimentConfig& config, const fs::path& checkpoint, std::ostream& out) {
  const Checkpoint ckpt = read_checkpoint(checkpoint);
  if (!ckpt.il) throw ConfigError("checkpoint '" + checkpoint.string() + "' has no invariant predictor");
  const std::uint64_t seed = checkpoint_seed(ckpt, config);
  const ExperimentData data = make_experiment_data(config.dataset, seed);
  if (data.tests.empty()) throw UsageError("eval needs at least one test environment");
  const Index expected = ckpt.il->phi().spec().input_dim;
  for (const auto& t : data.tests) {
    if (t.data.dim() != expected) {
      throw DimensionError("test environment '" + t.name + "' has " + std::to_string(t.data.dim()) +
                           " features; the checkpoint expects " + std::to_string(expected));
    }
  }
  RunReport report;
  report.method = ckpt.meta.value("method", std::string("unknown"));
  report.seed = seed;
  report.config_hash = config_hash(config);
  report.config = canonical_config(config);
  report.evaluation = evaluate(*ckpt.il, data.tests);
  const fs::path dir = prepare_dir(config);
  write_json(dir / ("eval-" + checkpoint.stem().string() + ".report.json"), report.deterministic_json());
  for (const auto& e : report.evaluation->envs) {
    out << e.name << " " << report.evaluation->metric << "=" << e.metric << " (n=" << e.size << ")\n";
  }
  out << "worst_case=" << report.evaluation->worst_case << "\n";
  return 0;
}

int cmd_sweep(const ExperimentConfig& config, SweepAxis axis, const std::vector<double>& values,
              std::ostream& out) {
  if (values.empty()) throw UsageError("sweep needs at least one value");
  const fs::path dir = prepare_dir(config);
  const std::string hash = config_hash(config);
  const nlohmann::json canonical = canonical_config(config);
  SweepResult result = sweep(config.plan, axis, values, config.seeds, data_factory(config.dataset));
  const std::string name = "sweep-" + std::string(to_string(axis));
  write_text(dir / (name + ".csv"), result.csv());

  std::string runs;
  nlohmann::json reports = nlohmann::json::array();
  for (auto& r : result.reports) {
    r.config_hash = hash;
    r.config = canonical;
    if (runs.empty()) {
      std::vector<std::string> names;
      if (r.evaluation) {
        for (const auto& e : r.evaluation->envs) names.push_back(e.name);
      }
      runs = csv_header(names) + "\n";
    }
    runs += csv_row(r) + "\n";
    reports.push_back(r.deterministic_json());
  }
  write_text(dir / (name + ".runs.csv"), runs);
  write_json(dir / (name + ".json"), {{"axis", to_string(axis)},
                                      {"config_hash", hash},
                                      {"values", values},
                                      {"seeds", config.seeds},
                                      {"spread", result.spread()},
                                      {"failures", result.failures},
                                      {"reports", reports}});
  out << result.csv();
  out << "spread=" << result.spread() << "\n";
  for (const auto& f : result.failures) out << "failed: " << f << "\n";
  return result.failures.empty() ? 0 : 1;
}

int cmd_diag(const ExperimentConfig& config, const fs::path& checkpoint, std::ostream& out) {
  const Checkpoint ckpt = read_checkpoint(checkpoint);
  if (!ckpt.ei) {
    throw ConfigError("checkpoint '" + checkpoint.string() +
                      "' has no environment-inference model (trained with method " +
                      ckpt.meta.value("method", std::string("unknown")) + ")");
  }
  const std::uint64_t seed = checkpoint_seed(ckpt, config);
  const ExperimentData data = make_experiment_data(config.dataset, seed);
  const Index expected = ckpt.ei->trunk.spec().input_dim;
  if (data.train.dim() != expected) {
    throw DimensionError("training data has " + std::to_string(data.train.dim()) +
                         " features; the checkpoint expects " + std::to_string(expected));
  }
  const EnvPosterior p =
      posterior(*ckpt.ei, ad::Tensor::constant(data.train.features), data.train.targets);
  const DiagnosticResult d = entropy_diagnostics(p.assignment, data.train);
  nlohmann::json j = to_json(d);
  j["config_hash"] = config_hash(config);
  j["seed"] = seed;
  j["env_sizes"] = p.env_sizes;
  const fs::path dir = prepare_dir(config);
  write_json(dir / ("diag-" + checkpoint.stem().string() + ".json"), j);
  out << j.dump(2) << "\n";
  return 0;
}

}  // namespace ednil
