#include "ednil/engine.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>
#include <tuple>

#include <Eigen/QR>

#include "ednil/errors.hpp"
#include "ednil/json_fields.hpp"
#include "ednil/log.hpp"
#include "ednil/optim.hpp"
#include "ednil/random.hpp"

namespace ednil {

std::string_view to_string(Method method) {
  switch (method) {
    case Method::kEdnil: return "ednil";
    case Method::kErm: return "erm";
    case Method::kIrmOracle: return "irm-oracle";
  }
  return "ednil";
}

Method method_from_string(std::string_view name) {
  if (name == "ednil") return Method::kEdnil;
  if (name == "erm") return Method::kErm;
  if (name == "irm-oracle") return Method::kIrmOracle;
  throw ConfigError("unknown method '" + std::string(name) + "' (ednil, erm, irm-oracle)");
}

void ModelShape::validate() const {
  auto positive = [](const std::vector<Index>& widths) {
    return std::all_of(widths.begin(), widths.end(), [](Index w) { return w > 0; });
  };
  if (!positive(trunk_hidden) || !positive(head_hidden) || !positive(phi_hidden) ||
      trunk_output <= 0) {
    throw ConfigError("model widths must be positive");
  }
  if (!(fresh_head_scale >= 0.0)) throw ConfigError("model.fresh_head_scale must be >= 0");
}

void TrainPlan::validate() const {
  if (rounds < 1) throw ConfigError("plan.rounds must be >= 1");
  if (total_steps < 1 || total_steps > 100000) {
    throw ConfigError("plan.total_steps must be in [1, 100000]");
  }
  if (batch_size < 0) throw ConfigError("plan.batch_size must be >= 0 (0 = full batch)");
  if (target_bins < 2) throw ConfigError("plan.target_bins must be >= 2");
  ei.validate();
  il.validate();
  model.validate();
  if (ei_steps_per_round() < 1 || il_steps_per_round() < 1) {
    throw ConfigError("plan.total_steps too small for " + std::to_string(rounds) + " rounds");
  }
}

int TrainPlan::ei_steps_per_round() const {
  return ei.steps_per_round > 0 ? ei.steps_per_round : total_steps / (2 * rounds);
}

int TrainPlan::il_steps_per_round() const {
  return il.steps_per_round > 0 ? il.steps_per_round : total_steps / (2 * rounds);
}

nlohmann::json to_json(const TrainPlan& plan) {
  return {{"method", to_string(plan.method)},
          {"rounds", plan.rounds},
          {"total_steps", plan.total_steps},
          {"batch_size", plan.batch_size},
          {"seed", plan.seed},
          {"target_bins", plan.target_bins},
          {"ei",
           {{"num_envs", plan.ei.num_envs},
            {"temperature", plan.ei.temperature},
            {"beta", plan.ei.beta},
            {"gamma", plan.ei.gamma},
            {"w_thres", plan.ei.w_thres},
            {"pretrain_steps", plan.ei.pretrain_steps},
            {"steps_per_round", plan.ei.steps_per_round},
            {"learning_rate", plan.ei.learning_rate},
            {"hard_statistics", plan.ei.hard_statistics}}},
          {"il",
           {{"lambda", plan.il.lambda},
            {"anneal_fraction", plan.il.anneal_fraction},
            {"steps_per_round", plan.il.steps_per_round},
            {"learning_rate", plan.il.learning_rate},
            {"reset_each_round", plan.il.reset_each_round},
            {"min_env_fraction", plan.il.min_env_fraction}}},
          {"model",
           {{"trunk_hidden", plan.model.trunk_hidden},
            {"trunk_output", plan.model.trunk_output},
            {"head_hidden", plan.model.head_hidden},
            {"phi_hidden", plan.model.phi_hidden},
            {"fresh_head_scale", plan.model.fresh_head_scale}}}};
}

TrainPlan plan_from_json(const nlohmann::json& j) {
  TrainPlan plan;
  JsonFields f(j, "plan");
  std::string method = std::string(to_string(plan.method));
  f.get("method", method);
  plan.method = method_from_string(method);
  f.get("rounds", plan.rounds);
  f.get("total_steps", plan.total_steps);
  f.get("batch_size", plan.batch_size);
  f.get("seed", plan.seed);
  f.get("target_bins", plan.target_bins);
  if (const auto* ei = f.child("ei")) {
    JsonFields g(*ei, f.path("ei"));
    g.get("num_envs", plan.ei.num_envs);
    g.get("temperature", plan.ei.temperature);
    g.get("beta", plan.ei.beta);
    g.get("gamma", plan.ei.gamma);
    g.get("w_thres", plan.ei.w_thres);
    g.get("pretrain_steps", plan.ei.pretrain_steps);
    g.get("steps_per_round", plan.ei.steps_per_round);
    g.get("learning_rate", plan.ei.learning_rate);
    g.get("hard_statistics", plan.ei.hard_statistics);
    g.finish();
  }
  if (const auto* il = f.child("il")) {
    JsonFields g(*il, f.path("il"));
    g.get("lambda", plan.il.lambda);
    g.get("anneal_fraction", plan.il.anneal_fraction);
    g.get("steps_per_round", plan.il.steps_per_round);
    g.get("learning_rate", plan.il.learning_rate);
    g.get("reset_each_round", plan.il.reset_each_round);
    g.get("min_env_fraction", plan.il.min_env_fraction);
    g.finish();
  }
  if (const auto* model = f.child("model")) {
    JsonFields g(*model, f.path("model"));
    g.get("trunk_hidden", plan.model.trunk_hidden);
    g.get("trunk_output", plan.model.trunk_output);
    g.get("head_hidden", plan.model.head_hidden);
    g.get("phi_hidden", plan.model.phi_hidden);
    g.get("fresh_head_scale", plan.model.fresh_head_scale);
    g.finish();
  }
  f.finish();
  plan.validate();
  return plan;
}

EIModelSpec ei_model_spec(const TrainPlan& plan, Index input_dim, Index output_dim) {
  EIModelSpec spec;
  spec.trunk = {input_dim, plan.model.trunk_hidden, plan.model.trunk_output, true};
  spec.head = {plan.model.trunk_output, plan.model.head_hidden, output_dim, false};
  spec.num_envs = plan.ei.num_envs;
  spec.temperature = plan.ei.temperature;
  spec.fresh_head_scale = plan.model.fresh_head_scale;
  return spec;
}

MlpSpec il_model_spec(const TrainPlan& plan, Index input_dim, Index output_dim) {
  return {input_dim, plan.model.phi_hidden, output_dim, false};
}

// ---- evaluation ----------------------------------------------------------------

double metric_on(const ILModel& model, const Matrix& x, const Targets& y) {
  if (y.size() == 0) throw InputError("metric on an empty environment");
  const Matrix pred = il_forward(model, ad::Tensor::constant(x)).value();
  const auto n = static_cast<double>(y.size());
  if (y.is_classification()) {
    const auto guess = argmax_rows(pred);
    double correct = 0.0;
    for (std::size_t i = 0; i < guess.size(); ++i) correct += guess[i] == y.labels[i] ? 1.0 : 0.0;
    return correct / n;
  }
  double sq = 0.0;
  for (Index i = 0; i < pred.rows(); ++i) {
    const double d = pred(i, 0) - y.values[static_cast<std::size_t>(i)];
    sq += d * d;
  }
  return sq / n;
}

Evaluation evaluate(const ILModel& model, std::span<const NamedDataset> tests) {
  if (tests.empty()) throw UsageError("evaluate needs at least one test environment");
  Evaluation out;
  const bool classification = tests.front().data.targets.is_classification();
  out.metric = classification ? "accuracy" : "mse";
  bool any = false;
  for (const auto& test : tests) {
    if (test.data.size() == 0) {
      log_warning("test environment '" + test.name + "' is empty; skipped");
      continue;
    }
    const double m = metric_on(model, test.data.features, test.data.targets);
    out.envs.push_back({test.name, test.data.size(), m});
    out.worst_case = !any ? m : (classification ? std::min(out.worst_case, m)
                                                : std::max(out.worst_case, m));
    any = true;
  }
  if (!any) throw InputError("every test environment is empty");
  return out;
}

ValidationScore partition_score(const ILModel& il, const LabeledDataset& val,
                                std::span<const int> envs, int num_envs) {
  if (val.size() == 0) throw InputError("validation data is empty");
  std::vector<std::vector<Index>> parts(static_cast<std::size_t>(num_envs));
  for (std::size_t i = 0; i < envs.size(); ++i) {
    parts.at(static_cast<std::size_t>(envs[i])).push_back(static_cast<Index>(i));
  }
  ValidationScore out;
  const bool classification = val.targets.is_classification();
  int nonempty = 0;
  for (const auto& rows : parts) {
    out.env_sizes.push_back(static_cast<Index>(rows.size()));
    if (rows.empty()) continue;
    const LabeledDataset sub = val.subset(rows);
    const double m = metric_on(il, sub.features, sub.targets);
    out.score = nonempty == 0 ? m : (classification ? std::min(out.score, m) : std::max(out.score, m));
    ++nonempty;
  }
  out.single_env = nonempty == 1;
  if (out.single_env) log_warning("validation rows fall into a single environment");
  return out;
}

ValidationScore validation_score(const EIModel& ei, const ILModel& il, const LabeledDataset& val) {
  if (val.size() == 0) throw InputError("validation data is empty");
  const EnvPosterior p = posterior(ei, ad::Tensor::constant(val.features), val.targets);
  return partition_score(il, val, p.assignment, p.num_envs());
}

// ---- diagnostics ---------------------------------------------------------------

double conditional_mutual_information(std::span<const int> y, std::span<const int> e,
                                      std::span<const int> z) {
  if (y.size() != e.size() || y.size() != z.size()) {
    throw DimensionError("conditional MI: label, environment and condition lengths differ");
  }
  if (y.empty()) throw InputError("conditional MI on empty data");
  std::map<std::tuple<int, int, int>, double> zye;
  std::map<std::pair<int, int>, double> zy;
  std::map<std::pair<int, int>, double> ze;
  std::map<int, double> zc;
  for (std::size_t i = 0; i < y.size(); ++i) {
    zye[{z[i], y[i], e[i]}] += 1;
    zy[{z[i], y[i]}] += 1;
    ze[{z[i], e[i]}] += 1;
    zc[z[i]] += 1;
  }
  const double n = static_cast<double>(y.size());
  double mi = 0.0;
  for (const auto& [key, count] : zye) {
    const auto [zi, yi, ei] = key;
    mi += count / n * std::log(count * zc[zi] / (zy[{zi, yi}] * ze[{zi, ei}]));
  }
  return std::max(mi, 0.0);
}

namespace {

std::vector<int> quantile_bins(std::span<const double> values, int bins, int& used,
                               const char* what) {
  for (int b = bins; b >= 1; --b) {
    const auto edges = quantile_edges(values, b);
    auto z = discretize(values, edges);
    std::map<int, int> counts;
    for (int v : z) ++counts[v];
    const bool ok = std::all_of(counts.begin(), counts.end(), [](const auto& c) { return c.second >= 5; });
    if (ok || b == 1) {
      if (b < bins) {
        log_warning(std::string("diagnostics: widened ") + what + " bins from " +
                    std::to_string(bins) + " to " + std::to_string(b));
      }
      used = b;
      return z;
    }
  }
  used = 1;
  return std::vector<int>(values.size(), 0);
}

void warn_sparse(std::span<const int> z, const char* what) {
  std::map<int, int> counts;
  for (int v : z) ++counts[v];
  for (const auto& [v, c] : counts) {
    if (c < 5) {
      log_warning(std::string("diagnostics: ") + what + " cell " + std::to_string(v) + " has " +
                  std::to_string(c) + " rows");
    }
  }
}

int distinct(std::span<const int> z) {
  std::vector<int> v(z.begin(), z.end());
  std::sort(v.begin(), v.end());
  return static_cast<int>(std::unique(v.begin(), v.end()) - v.begin());
}

std::vector<double> column(const Matrix& m, Index c) {
  std::vector<double> out(static_cast<std::size_t>(m.rows()));
  for (Index i = 0; i < m.rows(); ++i) out[static_cast<std::size_t>(i)] = m(i, c);
  return out;
}

}  // namespace

double label_alignment(std::span<const int> envs, std::span<const int> labels) {
  std::map<int, std::map<int, double>> counts;
  for (std::size_t i = 0; i < envs.size(); ++i) counts[envs[i]][labels[i]] += 1;
  double worst = 1.0;
  for (const auto& [e, by_label] : counts) {
    double total = 0.0;
    double best = 0.0;
    for (const auto& [y, c] : by_label) {
      total += c;
      best = std::max(best, c);
    }
    worst = std::min(worst, best / total);
  }
  return worst;
}

DiagnosticResult entropy_diagnostics(std::span<const int> envs, const LabeledDataset& data,
                                     int bins) {
  if (static_cast<Index>(envs.size()) != data.size()) {
    throw DimensionError("diagnostics: " + std::to_string(envs.size()) + " environments for " +
                         std::to_string(data.size()) + " rows");
  }
  if (!data.oracle || data.oracle->kind == OracleKind::kNone) {
    throw ConfigError("diagnostics need oracle metadata on dataset '" + data.name + "'");
  }
  if (bins < 1) throw InputError("diagnostics need at least one bin");
  const OracleInfo& o = *data.oracle;
  DiagnosticResult d;
  std::vector<int> y;
  if (data.targets.is_classification()) {
    y = data.targets.labels;
  } else {
    y = discretize(data.targets.values, quantile_edges(data.targets.values, bins));
  }

  std::optional<std::vector<int>> z_c;
  std::optional<std::vector<int>> z_v;
  switch (o.kind) {
    case OracleKind::kColor:
      z_c = o.clean_label;
      z_v = o.color;
      warn_sparse(*z_c, "invariant");
      warn_sparse(*z_v, "variant");
      d.bins_invariant = distinct(*z_c);
      d.bins_variant = distinct(*z_v);
      break;
    case OracleKind::kSubgroup:
      z_v = o.subgroup;
      warn_sparse(*z_v, "variant");
      d.bins_variant = distinct(*z_v);
      break;
    case OracleKind::kRegression: {
      // Least-squares fit of Y on [1, X_c, X_c^2] summarizes the invariant
      // relationship in one coordinate.
      const Index n = data.size();
      const Index dc = o.invariant.cols();
      Eigen::MatrixXd design(n, 1 + 2 * dc);
      design.col(0).setOnes();
      design.middleCols(1, dc) = o.invariant;
      design.middleCols(1 + dc, dc) = o.invariant.cwiseProduct(o.invariant);
      const Eigen::VectorXd target = data.targets.value_column();
      const Eigen::VectorXd coef = design.colPivHouseholderQr().solve(target);
      const Eigen::VectorXd fitted = design * coef;
      const std::vector<double> fit(fitted.data(), fitted.data() + fitted.size());
      z_c = quantile_bins(fit, bins, d.bins_invariant, "invariant");
      z_v = quantile_bins(column(o.variant, 0), bins, d.bins_variant, "variant");
      break;
    }
    case OracleKind::kNone:
      break;
  }
  if (z_c) {
    d.cmi_invariant = conditional_mutual_information(y, envs, *z_c);
    d.invariant_pass = *d.cmi_invariant <= d.eps_invariant;
  }
  if (z_v) {
    d.cmi_variant = conditional_mutual_information(y, envs, *z_v);
    d.variant_pass = *d.cmi_variant >= d.eps_variant;
  }
  const auto oracle_envs = build_oracle_envs(data);
  int k = 0;
  for (int e : envs) k = std::max(k, e + 1);
  d.agreement = env_agreement(envs, oracle_envs, k);
  if (data.targets.is_classification()) d.label_alignment = label_alignment(envs, y);
  return d;
}

double env_agreement(std::span<const int> inferred, std::span<const int> oracle, int k) {
  if (inferred.size() != oracle.size()) {
    throw DimensionError("env_agreement: " + std::to_string(inferred.size()) + " vs " +
                         std::to_string(oracle.size()) + " labels");
  }
  if (inferred.empty()) throw InputError("env_agreement on empty data");
  int width = k;
  for (int e : inferred) width = std::max(width, e + 1);
  for (int e : oracle) width = std::max(width, e + 1);
  if (width > 8) throw InputError("env_agreement enumerates permutations only up to 8 labels");
  std::vector<std::vector<double>> confusion(static_cast<std::size_t>(width),
                                             std::vector<double>(static_cast<std::size_t>(width), 0.0));
  for (std::size_t i = 0; i < inferred.size(); ++i) {
    if (inferred[i] < 0 || oracle[i] < 0) throw InputError("env_agreement: negative label");
    confusion[static_cast<std::size_t>(inferred[i])][static_cast<std::size_t>(oracle[i])] += 1;
  }
  std::vector<int> perm(static_cast<std::size_t>(width));
  std::iota(perm.begin(), perm.end(), 0);
  double best = 0.0;
  do {
    double hits = 0.0;
    for (std::size_t a = 0; a < perm.size(); ++a) hits += confusion[a][static_cast<std::size_t>(perm[a])];
    best = std::max(best, hits);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / static_cast<double>(inferred.size());
}

nlohmann::json to_json(const DiagnosticResult& d) {
  nlohmann::json j = {{"eps_invariant", d.eps_invariant},
                      {"eps_variant", d.eps_variant},
                      {"bins_invariant", d.bins_invariant},
                      {"bins_variant", d.bins_variant}};
  auto put = [&j](const char* key, const auto& value) {
    j[key] = value ? nlohmann::json(*value) : nlohmann::json(nullptr);
  };
  put("cmi_invariant", d.cmi_invariant);
  put("cmi_variant", d.cmi_variant);
  put("invariant_pass", d.invariant_pass);
  put("variant_pass", d.variant_pass);
  put("agreement", d.agreement);
  put("label_alignment", d.label_alignment);
  return j;
}

// ---- reports -------------------------------------------------------------------

nlohmann::json RunReport::deterministic_json() const {
  nlohmann::json j = {{"method", method},
                      {"seed", seed},
                      {"config_hash", config_hash},
                      {"config", config},
                      {"status", status},
                      {"error", error},
                      {"environments", environments},
                      {"env_sizes", env_sizes},
                      {"env_confidence", env_confidence},
                      {"env_weights", env_weights}};
  if (evaluation) {
    nlohmann::json envs = nlohmann::json::array();
    for (const auto& e : evaluation->envs) {
      envs.push_back({{"name", e.name}, {"size", e.size}, {"metric", e.metric}});
    }
    j["evaluation"] = {{"metric", evaluation->metric},
                       {"worst_case", evaluation->worst_case},
                       {"envs", envs}};
  } else {
    j["evaluation"] = nullptr;
  }
  if (validation) {
    j["validation"] = {{"score", validation->score},
                       {"single_env", validation->single_env},
                       {"env_sizes", validation->env_sizes}};
  } else {
    j["validation"] = nullptr;
  }
  j["diagnostics"] = diagnostics ? ednil::to_json(*diagnostics) : nlohmann::json(nullptr);
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& r : rounds) {
    trace.push_back({{"round", r.round},
                     {"ei_loss", r.ei_loss},
                     {"il_loss", r.il_loss},
                     {"lambda", r.lambda},
                     {"env_sizes", r.env_sizes}});
  }
  j["rounds"] = trace;
  return j;
}

nlohmann::json RunReport::to_json() const {
  return {{"report", deterministic_json()}, {"timing", {{"wall_clock_seconds", wall_clock_seconds}}}};
}

namespace {

std::string fmt(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <typename T>
std::string fmt_opt(const std::optional<T>& v) {
  return v ? fmt(*v) : std::string();
}

}  // namespace

std::string csv_header(std::span<const std::string> test_names) {
  std::string out =
      "seed,config_hash,method,status,worst_case,validation,cmi_invariant,cmi_variant,agreement";
  for (const auto& name : test_names) out += ",metric_" + name;
  return out;
}

std::string csv_row(const RunReport& report) {
  std::string out = std::to_string(report.seed) + "," + report.config_hash + "," + report.method +
                    "," + report.status + ",";
  out += report.evaluation ? fmt(report.evaluation->worst_case) : "";
  out += ",";
  out += report.validation ? fmt(report.validation->score) : "";
  out += ",";
  if (report.diagnostics) {
    out += fmt_opt(report.diagnostics->cmi_invariant) + "," +
           fmt_opt(report.diagnostics->cmi_variant) + "," + fmt_opt(report.diagnostics->agreement);
  } else {
    out += ",,";
  }
  if (report.evaluation) {
    for (const auto& e : report.evaluation->envs) out += "," + fmt(e.metric);
  }
  return out;
}

// ---- training ------------------------------------------------------------------

namespace {

// Row subset for one step; empty means the whole training set.
class BatchSampler {
 public:
  BatchSampler(Index n, Index batch_size, std::uint64_t seed)
      : n_(n), batch_(batch_size > 0 && batch_size < n ? batch_size : 0), rng_(seed) {
    order_.resize(static_cast<std::size_t>(n));
    std::iota(order_.begin(), order_.end(), Index{0});
  }

  bool full() const { return batch_ == 0; }

  std::vector<Index> next() {
    if (full()) return {};
    std::vector<Index> rows(static_cast<std::size_t>(batch_));
    for (Index k = 0; k < batch_; ++k) {
      std::uniform_int_distribution<Index> pick(k, n_ - 1);
      std::swap(order_[static_cast<std::size_t>(k)], order_[static_cast<std::size_t>(pick(rng_))]);
      rows[static_cast<std::size_t>(k)] = order_[static_cast<std::size_t>(k)];
    }
    std::sort(rows.begin(), rows.end());
    return rows;
  }

 private:
  Index n_;
  Index batch_;
  Rng rng_;
  std::vector<Index> order_;
};

struct StepData {
  ad::Tensor x;
  Targets y;
  std::vector<int> discrete;
  Matrix frozen;
  std::vector<int> envs;
};

struct TrainSet {
  ad::Tensor x;
  Targets y;
  std::vector<int> discrete;  // labels, or binned regression targets
  int num_discrete = 2;

  StepData batch(std::span<const Index> rows, const Matrix& frozen,
                 const std::vector<int>& envs) const {
    if (rows.empty()) return {x, y, discrete, frozen, envs};
    StepData s;
    s.x = ad::Tensor::constant(ad::select_rows(x, rows).value());
    s.y = y.subset(rows);
    for (Index r : rows) {
      s.discrete.push_back(discrete[static_cast<std::size_t>(r)]);
      if (!envs.empty()) s.envs.push_back(envs[static_cast<std::size_t>(r)]);
    }
    if (frozen.size() > 0) {
      s.frozen.resize(static_cast<Index>(rows.size()), 1);
      for (std::size_t k = 0; k < rows.size(); ++k) s.frozen(static_cast<Index>(k), 0) = frozen(rows[k], 0);
    }
    return s;
  }
};

std::vector<std::vector<Index>> partition_of(const std::vector<int>& envs, int k) {
  std::vector<std::vector<Index>> parts(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < envs.size(); ++i) {
    parts[static_cast<std::size_t>(envs[i])].push_back(static_cast<Index>(i));
  }
  return parts;
}

void check_finite(double v, const std::string& what) {
  if (!std::isfinite(v)) throw DivergenceError(what + " became non-finite");
}

// Invariant-learning steps over a fixed environment assignment. Past the
// warm-up the loss is divided by lambda_t so the penalty does not blow up
// the step size, and Adam restarts when lambda_t first exceeds 1.
class ILTrainer {
 public:
  ILTrainer(ILModel& model, const TrainPlan& plan, long total_steps)
      : model_(model), plan_(plan), total_(total_steps) {
    reset_optimizer();
  }

  void reset_optimizer() {
    opt_.emplace(ad::OptimizerConfig{ad::OptimizerKind::kAdam, plan_.il.learning_rate},
                 model_.parameters());
  }

  // lambda_override < 0 uses the annealed schedule.
  double run(const TrainSet& data, BatchSampler& sampler, const std::vector<int>& envs, int k,
             std::span<const double> weights, int steps, double lambda_override = -1.0) {
    double last = 0.0;
    for (int s = 0; s < steps; ++s, ++step_) {
      const double lambda_t = lambda_override >= 0.0
                                  ? lambda_override
                                  : anneal_lambda(step_, total_, plan_.il.anneal_fraction,
                                                  plan_.il.lambda);
      if (lambda_t > 1.0 && !penalty_active_) {
        penalty_active_ = true;
        reset_optimizer();
      }
      const auto rows = sampler.next();
      const StepData b = data.batch(rows, Matrix(), envs);
      const ILLoss loss = loss_il(model_, b.x, b.y, partition_of(b.envs, k), weights, lambda_t);
      ad::Tensor total = loss.total;
      if (lambda_t > 1.0) total = total * (1.0 / lambda_t);
      check_finite(total.item(), "invariant learning loss");
      ad::backward(total);
      opt_->step();
      ad::Tensor w = model_.multiplier();
      w.zero_grad();
      last = loss.total.item();
      lambda_ = lambda_t;
    }
    return last;
  }

  double lambda() const { return lambda_; }

 private:
  ILModel& model_;
  const TrainPlan& plan_;
  long total_;
  long step_ = 0;
  bool penalty_active_ = false;
  double lambda_ = 1.0;
  std::optional<ad::Optimizer> opt_;
};

TrainSet make_train_set(const TrainPlan& plan, const LabeledDataset& train) {
  TrainSet t;
  t.x = ad::Tensor::constant(train.features);
  t.y = train.targets;
  if (train.targets.is_classification()) {
    t.discrete = train.targets.labels;
    t.num_discrete = train.targets.num_classes;
  } else {
    t.discrete = discretize(train.targets.values,
                            quantile_edges(train.targets.values, plan.target_bins));
    t.num_discrete = plan.target_bins;
  }
  return t;
}

Index output_dim(const LabeledDataset& data) {
  return data.targets.is_classification() ? data.targets.num_classes : 1;
}

}  // namespace

JointResult joint_train(const TrainPlan& plan, const LabeledDataset& train,
                        const std::optional<LabeledDataset>& val) {
  const auto start = std::chrono::steady_clock::now();
  plan.validate();
  train.validate();
  if (train.size() == 0) throw InputError("training data is empty");
  if (val && val->dim() != train.dim()) {
    throw DimensionError("validation data has " + std::to_string(val->dim()) +
                         " features, training data " + std::to_string(train.dim()));
  }
  const TrainSet data = make_train_set(plan, train);
  const Index d = train.dim();
  const Index out_dim = output_dim(train);
  const int rounds = plan.rounds;
  const int ei_steps = plan.ei_steps_per_round();
  const int il_steps = plan.il_steps_per_round();
  const long total_il = static_cast<long>(rounds) * il_steps;

  JointResult result{std::nullopt, ILModel(il_model_spec(plan, d, out_dim), derive_seed(plan.seed, 2)),
                     RunReport{}, {}};
  RunReport& report = result.report;
  report.method = std::string(to_string(plan.method));
  report.seed = plan.seed;
  report.config = to_json(plan);
  BatchSampler sampler(train.size(), plan.batch_size, derive_seed(plan.seed, 3));

  try {
    if (plan.method == Method::kErm) {
      report.environments = "pooled";
      result.train_envs.assign(static_cast<std::size_t>(train.size()), 0);
      ILTrainer trainer(result.il, plan, total_il);
      const std::vector<double> one{1.0};
      const double loss = trainer.run(data, sampler, result.train_envs, 1, one,
                                      static_cast<int>(total_il), 0.0);
      report.env_sizes = {train.size()};
      report.env_weights = one;
      report.rounds.push_back({0, 0.0, loss, 0.0, report.env_sizes});
    } else if (plan.method == Method::kIrmOracle) {
      report.environments = "oracle";
      result.train_envs = build_oracle_envs(train);
      int k = 0;
      for (int e : result.train_envs) k = std::max(k, e + 1);
      std::vector<Index> sizes(static_cast<std::size_t>(k), 0);
      for (int e : result.train_envs) ++sizes[static_cast<std::size_t>(e)];
      const auto nonempty = std::count_if(sizes.begin(), sizes.end(), [](Index s) { return s > 0; });
      std::vector<double> weights;
      for (Index s : sizes) weights.push_back(s > 0 ? 1.0 / static_cast<double>(nonempty) : 0.0);
      ILTrainer trainer(result.il, plan, total_il);
      const double loss = trainer.run(data, sampler, result.train_envs, k, weights,
                                      static_cast<int>(total_il));
      report.env_sizes = sizes;
      report.env_weights = weights;
      report.rounds.push_back({0, 0.0, loss, trainer.lambda(), sizes});
    } else {
      report.environments = "inferred";
      const EIModelSpec ei_spec = ei_model_spec(plan, d, out_dim);
      result.ei = EIModel::create(ei_spec, derive_seed(plan.seed, 1));
      EIModel& ei = *result.ei;
      pretrain_erm(ei, train.features, train.targets, plan.ei.pretrain_steps,
                   plan.ei.learning_rate);
      ad::Optimizer ei_opt({ad::OptimizerKind::kAdam, plan.ei.learning_rate}, ei.parameters());
      std::optional<ILTrainer> trainer;
      trainer.emplace(result.il, plan, total_il);
      for (int r = 0; r < rounds; ++r) {
        if (r > 0 && plan.il.reset_each_round) {
          result.il = ILModel(il_model_spec(plan, d, out_dim),
                              derive_seed(plan.seed, 100 + static_cast<std::uint64_t>(r)));
          trainer->reset_optimizer();
        }
        const bool use_ip = r > 0 && plan.ei.gamma != 0.0;
        Matrix frozen;
        if (use_ip) frozen = per_sample_loss(il_forward(result.il, data.x), data.y).value();
        double ei_loss = 0.0;
        for (int s = 0; s < ei_steps; ++s) {
          const auto rows = sampler.next();
          const StepData b = data.batch(rows, frozen, {});
          const EnvPosterior p = posterior(ei, b.x, b.y);
          const ad::Tensor ed = loss_ed(p, plan.ei.w_thres);
          const ad::Tensor li = plan.ei.beta != 0.0
                                    ? loss_li(p, b.discrete, data.num_discrete, plan.ei.hard_statistics)
                                    : ad::Tensor();
          const ad::Tensor ip = use_ip ? loss_ip(p, b.frozen, plan.ei.hard_statistics) : ad::Tensor();
          const ad::Tensor loss = loss_ei(ed, li, ip, plan.ei.beta, use_ip ? plan.ei.gamma : 0.0);
          ei_loss = loss.item();
          check_finite(ei_loss, "environment inference loss");
          ad::backward(loss);
          ei_opt.step();
        }
        const EnvPosterior p = posterior(ei, data.x, data.y);
        const EnvWeights weights =
            drop_small_environments(confidence_weights(p), p.env_sizes, plan.il.min_env_fraction);
        result.train_envs = p.assignment;
        const double il_loss = trainer->run(data, sampler, result.train_envs, p.num_envs(),
                                            weights.weights, il_steps);
        report.env_sizes = p.env_sizes;
        report.env_confidence = weights.confidence;
        report.env_weights = weights.weights;
        report.rounds.push_back({r, ei_loss, il_loss, trainer->lambda(), p.env_sizes});
      }
    }
  } catch (const DivergenceError& e) {
    report.status = "diverged";
    report.error = e.what();
    log_warning(std::string("run diverged: ") + e.what());
  }

  if (report.status == "ok" && val && val->size() > 0) {
    if (result.ei) {
      report.validation = validation_score(*result.ei, result.il, *val);
    } else if (plan.method == Method::kIrmOracle) {
      const auto envs = build_oracle_envs(*val);
      int k = 0;
      for (int e : envs) k = std::max(k, e + 1);
      report.validation = partition_score(result.il, *val, envs, k);
    } else {
      const std::vector<int> pooled(static_cast<std::size_t>(val->size()), 0);
      report.validation = partition_score(result.il, *val, pooled, 1);
    }
  }
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

JointResult run_experiment(const TrainPlan& plan, const LabeledDataset& train,
                           const std::optional<LabeledDataset>& val,
                           std::span<const NamedDataset> tests) {
  const auto start = std::chrono::steady_clock::now();
  for (const auto& t : tests) {
    if (t.data.dim() != train.dim()) {
      throw DimensionError("test environment '" + t.name + "' has " + std::to_string(t.data.dim()) +
                           " features, expected " + std::to_string(train.dim()));
    }
  }
  JointResult result = joint_train(plan, train, val);
  if (result.report.status == "ok") {
    if (!tests.empty()) result.report.evaluation = evaluate(result.il, tests);
    if (train.oracle && train.oracle->kind != OracleKind::kNone) {
      result.report.diagnostics = entropy_diagnostics(result.train_envs, train);
    }
  }
  result.report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

// ---- sweeps --------------------------------------------------------------------

std::string_view to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::kColorNoise: return "color-noise";
    case SweepAxis::kNumEnvs: return "K";
    case SweepAxis::kPretrainSteps: return "init-steps";
  }
  return "K";
}

SweepAxis sweep_axis_from_string(std::string_view name) {
  if (name == "color-noise") return SweepAxis::kColorNoise;
  if (name == "K") return SweepAxis::kNumEnvs;
  if (name == "init-steps") return SweepAxis::kPretrainSteps;
  throw UsageError("unknown sweep axis '" + std::string(name) + "' (color-noise, K, init-steps)");
}

double SweepResult::spread() const {
  bool any = false;
  double lo = 0.0;
  double hi = 0.0;
  for (const auto& r : rows) {
    if (r.runs == 0) continue;
    lo = any ? std::min(lo, r.mean) : r.mean;
    hi = any ? std::max(hi, r.mean) : r.mean;
    any = true;
  }
  return hi - lo;
}

std::string SweepResult::csv() const {
  std::string out = "axis,value,runs,failures,mean,sd\n";
  for (const auto& r : rows) {
    out += std::string(to_string(axis)) + "," + fmt(r.value) + "," + std::to_string(r.runs) + "," +
           std::to_string(r.failures) + "," + fmt(r.mean) + "," + fmt(r.sd) + "\n";
  }
  return out;
}

SweepResult sweep(const TrainPlan& base, SweepAxis axis, std::span<const double> values,
                  std::span<const std::uint64_t> seeds, const DataFactory& data) {
  if (values.empty()) throw UsageError("sweep needs at least one value");
  if (seeds.empty()) throw UsageError("sweep needs at least one seed");
  SweepResult out;
  out.axis = axis;
  for (double value : values) {
    SweepRow row;
    row.value = value;
    std::vector<double> metrics;
    for (std::uint64_t seed : seeds) {
      TrainPlan plan = base;
      plan.seed = seed;
      if (axis == SweepAxis::kNumEnvs) plan.ei.num_envs = static_cast<int>(std::lround(value));
      if (axis == SweepAxis::kPretrainSteps) plan.ei.pretrain_steps = static_cast<int>(std::lround(value));
      const std::string label = std::string(to_string(axis)) + "=" + fmt(value) + " seed=" +
                                std::to_string(seed);
      try {
        const ExperimentData d = data(axis, value, seed);
        JointResult r = run_experiment(plan, d.train, d.val, d.tests);
        if (r.report.status != "ok" || !r.report.evaluation) {
          ++row.failures;
          out.failures.push_back(label + ": " + r.report.error);
        } else {
          metrics.push_back(r.report.evaluation->worst_case);
        }
        out.reports.push_back(std::move(r.report));
      } catch (const std::exception& e) {
        ++row.failures;
        out.failures.push_back(label + ": " + e.what());
        log_warning("sweep run failed: " + label + ": " + e.what());
      }
    }
    row.runs = static_cast<int>(metrics.size());
    if (!metrics.empty()) {
      row.mean = std::accumulate(metrics.begin(), metrics.end(), 0.0) / metrics.size();
      double ss = 0.0;
      for (double m : metrics) ss += (m - row.mean) * (m - row.mean);
      row.sd = metrics.size() > 1 ? std::sqrt(ss / static_cast<double>(metrics.size() - 1)) : 0.0;
    }
    out.rows.push_back(row);
  }
  return out;
}

}  // namespace ednil
