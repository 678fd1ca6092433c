#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ednil/datagen.hpp"
#include "ednil/envinfer.hpp"
#include "ednil/invlearn.hpp"
#include "ednil/nets.hpp"

namespace ednil {

enum class Method { kEdnil, kErm, kIrmOracle };

std::string_view to_string(Method method);
Method method_from_string(std::string_view name);

// Hidden widths of the three networks; input and output widths come from
// the data. The trunk output uses ReLU so heads see nonnegative features.
struct ModelShape {
  std::vector<Index> trunk_hidden{32};
  Index trunk_output = 16;
  std::vector<Index> head_hidden;
  std::vector<Index> phi_hidden{32};
  double fresh_head_scale = 0.01;

  void validate() const;
};

struct TrainPlan {
  Method method = Method::kEdnil;
  EIConfig ei;
  ILConfig il;
  ModelShape model;
  int rounds = 5;
  int total_steps = 1000;
  // 0 = full batch.
  Index batch_size = 0;
  std::uint64_t seed = 0;
  // Quantile bins for discretizing regression targets in L_LI.
  int target_bins = 4;

  void validate() const;
  int ei_steps_per_round() const;
  int il_steps_per_round() const;
};

nlohmann::json to_json(const TrainPlan& plan);
TrainPlan plan_from_json(const nlohmann::json& j);

EIModelSpec ei_model_spec(const TrainPlan& plan, Index input_dim, Index output_dim);
MlpSpec il_model_spec(const TrainPlan& plan, Index input_dim, Index output_dim);

struct EnvMetric {
  std::string name;
  Index size = 0;
  double metric = 0.0;
};

struct Evaluation {
  std::string metric;  // "accuracy" or "mse"
  std::vector<EnvMetric> envs;
  double worst_case = 0.0;
};

struct NamedDataset {
  std::string name;
  LabeledDataset data;
};

// Accuracy (argmax) or mse per environment; worst-case is min accuracy or
// max mse. Empty environments are skipped with a warning.
Evaluation evaluate(const ILModel& model, std::span<const NamedDataset> tests);
double metric_on(const ILModel& model, const Matrix& x, const Targets& y);

struct ValidationScore {
  double score = 0.0;
  bool single_env = false;
  std::vector<Index> env_sizes;
};

// Worst per-environment metric of the IL model over the M_EI hard partition
// of the validation rows.
ValidationScore validation_score(const EIModel& ei, const ILModel& il, const LabeledDataset& val);
// Same, for an explicit partition (pooled or oracle).
ValidationScore partition_score(const ILModel& il, const LabeledDataset& val,
                                std::span<const int> envs, int num_envs);

inline constexpr double kEpsInvariant = 0.02;
inline constexpr double kEpsVariant = 0.05;

struct DiagnosticResult {
  std::optional<double> cmi_invariant;  // I(Y; E | X_c), nats
  std::optional<double> cmi_variant;    // I(Y; E | X_v), nats
  std::optional<bool> invariant_pass;   // cmi_invariant <= eps_inv
  std::optional<bool> variant_pass;     // cmi_variant >= eps_var
  double eps_invariant = kEpsInvariant;
  double eps_variant = kEpsVariant;
  int bins_invariant = 0;
  int bins_variant = 0;
  std::optional<double> agreement;
  // min over nonempty e of max_y P(y | e); classification only.
  std::optional<double> label_alignment;
};

nlohmann::json to_json(const DiagnosticResult& d);

// Plug-in I(Y; E | Z) in nats from empirical counts, clipped at 0.
double conditional_mutual_information(std::span<const int> y, std::span<const int> e,
                                      std::span<const int> z);

// Validity checks against oracle factors: colored digits condition on the
// clean label (X_c) and the color (X_v); regression on binned f-hat(X_c) and
// X_v*; income data on the subgroup (X_v only). Continuous factors start at
// `bins` quantile bins and are widened while any cell has fewer than 5 rows.
DiagnosticResult entropy_diagnostics(std::span<const int> envs, const LabeledDataset& data,
                                     int bins = 4);

// Best mean agreement over relabelings of inferred indices; both label sets
// are padded to max(K_inferred, K_oracle, k).
double env_agreement(std::span<const int> inferred, std::span<const int> oracle, int k);

double label_alignment(std::span<const int> envs, std::span<const int> labels);

struct RoundTrace {
  int round = 0;
  double ei_loss = 0.0;
  double il_loss = 0.0;
  double lambda = 0.0;
  std::vector<Index> env_sizes;
};

struct RunReport {
  std::string method;
  std::uint64_t seed = 0;
  std::string config_hash;
  nlohmann::json config = nlohmann::json::object();
  std::string status = "ok";  // "ok" or "diverged"
  std::string error;
  std::optional<Evaluation> evaluation;
  std::optional<ValidationScore> validation;
  // "pooled", "oracle" or "inferred"
  std::string environments;
  std::vector<Index> env_sizes;
  std::vector<double> env_confidence;
  std::vector<double> env_weights;
  std::optional<DiagnosticResult> diagnostics;
  std::vector<RoundTrace> rounds;
  double wall_clock_seconds = 0.0;

  // Deterministic part under "report"; wall clock under "timing".
  nlohmann::json to_json() const;
  nlohmann::json deterministic_json() const;
};

// Frozen CSV layout: seed, config_hash, method, status, worst_case,
// validation, cmi_invariant, cmi_variant, agreement, then one column per
// test environment metric in the given order.
std::string csv_header(std::span<const std::string> test_names);
std::string csv_row(const RunReport& report);

struct JointResult {
  std::optional<EIModel> ei;
  ILModel il;
  RunReport report;
  // Final training-set environment per row (pooled = all 0).
  std::vector<int> train_envs;
};

// Trains the method selected in the plan. Divergence is reported through
// report.status rather than thrown.
JointResult joint_train(const TrainPlan& plan, const LabeledDataset& train,
                        const std::optional<LabeledDataset>& val);

// joint_train, then evaluation, validation score and diagnostics.
JointResult run_experiment(const TrainPlan& plan, const LabeledDataset& train,
                           const std::optional<LabeledDataset>& val,
                           std::span<const NamedDataset> tests);

struct ExperimentData {
  LabeledDataset train;
  std::optional<LabeledDataset> val;
  std::vector<NamedDataset> tests;
};

enum class SweepAxis { kColorNoise, kNumEnvs, kPretrainSteps };

std::string_view to_string(SweepAxis axis);
SweepAxis sweep_axis_from_string(std::string_view name);

struct SweepRow {
  double value = 0.0;
  int runs = 0;
  int failures = 0;
  double mean = 0.0;
  double sd = 0.0;
};

struct SweepResult {
  SweepAxis axis = SweepAxis::kNumEnvs;
  std::vector<RunReport> reports;
  std::vector<SweepRow> rows;
  std::vector<std::string> failures;

  // max - min of row means over rows with at least one run
  double spread() const;
  std::string csv() const;
};

// Builds data for a sweep point; only the color-noise axis depends on value.
using DataFactory = std::function<ExperimentData(SweepAxis axis, double value, std::uint64_t seed)>;

// One run per (value, seed); failed runs are recorded and skipped.
SweepResult sweep(const TrainPlan& base, SweepAxis axis, std::span<const double> values,
                  std::span<const std::uint64_t> seeds, const DataFactory& data);

}  // namespace ednil
