#include <cmath>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "ednil/datagen.hpp"
#include "ednil/engine.hpp"
#include "ednil/errors.hpp"
#include "ednil/log.hpp"
#include "support.hpp"

namespace ednil {

namespace {

class QuietLog : public ::testing::Test {
 protected:
  void SetUp() override { set_log_level(LogLevel::kQuiet); }
  void TearDown() override { set_log_level(LogLevel::kWarning); }
};

// phi(x) = [0, x]: predicts class 1 exactly when x > 0.
ILModel sign_classifier() {
  ILModel m({1, {}, 2, false, 1.0}, 0);
  m.phi().layers()[0].weight.mutable_value() << 0.0, 1.0;
  m.phi().layers()[0].bias.mutable_value().setZero();
  return m;
}

LabeledDataset signed_rows(std::vector<double> x, std::vector<int> y) {
  LabeledDataset d;
  d.name = "toy";
  d.features.resize(static_cast<Index>(x.size()), 1);
  for (std::size_t i = 0; i < x.size(); ++i) d.features(static_cast<Index>(i), 0) = x[i];
  d.targets = Targets::classes(std::move(y), 2);
  return d;
}

TEST(Evaluate, Examples) {
  const ILModel m = sign_classifier();
  const std::vector<NamedDataset> tests{
      {"perfect", signed_rows({1, 2, -1, -3}, {1, 1, 0, 0})},
      {"half", signed_rows({1, 2, -1, -3}, {1, 0, 1, 0})},
  };
  const Evaluation e = evaluate(m, tests);
  EXPECT_EQ(e.metric, "accuracy");
  ASSERT_EQ(e.envs.size(), 2u);
  EXPECT_EQ(e.envs[0].metric, 1.0);
  EXPECT_EQ(e.envs[1].metric, 0.5);
  EXPECT_EQ(e.worst_case, 0.5);
}

TEST(Evaluate, ConstantPredictorOnBalancedLabels) {
  ILModel m({1, {}, 2, false, 1.0}, 0);
  m.phi().set_zero();
  const std::vector<NamedDataset> tests{{"t", signed_rows({1, 2, 3, 4}, {0, 1, 0, 1})}};
  EXPECT_EQ(evaluate(m, tests).worst_case, 0.5);
}

TEST(Evaluate, RegressionWorstIsLargestMse) {
  ILModel m({1, {}, 1, false, 1.0}, 0);
  m.phi().set_zero();
  LabeledDataset a;
  a.features = Matrix::Zero(2, 1);
  a.targets = Targets::reals({1.0, -1.0});
  LabeledDataset b = a;
  b.targets = Targets::reals({2.0, 0.0});
  const std::vector<NamedDataset> tests{{"a", a}, {"b", b}};
  const Evaluation e = evaluate(m, tests);
  EXPECT_EQ(e.metric, "mse");
  EXPECT_EQ(e.envs[0].metric, 1.0);
  EXPECT_EQ(e.envs[1].metric, 2.0);
  EXPECT_EQ(e.worst_case, 2.0);
}

TEST_F(QuietLog, EvaluateErrors) {
  const ILModel m = sign_classifier();
  EXPECT_THROW(evaluate(m, std::vector<NamedDataset>{}), UsageError);
  LabeledDataset empty = signed_rows({}, {});
  const std::vector<NamedDataset> only_empty{{"e", empty}};
  EXPECT_THROW(evaluate(m, only_empty), InputError);
  const std::vector<NamedDataset> mixed{{"e", empty}, {"t", signed_rows({1}, {1})}};
  const Evaluation e = evaluate(m, mixed);
  EXPECT_EQ(e.envs.size(), 1u);
  EXPECT_EQ(e.worst_case, 1.0);
}

TEST(WorstCase, BoundedByEveryEnvironment) {
  std::mt19937_64 rng(1);
  ILModel m({2, {4}, 2, false, 1.0}, 2);
  for (int t = 0; t < 10; ++t) {
    std::vector<NamedDataset> tests;
    for (int k = 0; k < 3; ++k) {
      LabeledDataset d;
      d.features = testing::random_matrix(20, 2, rng);
      std::vector<int> labels(20);
      for (auto& l : labels) l = static_cast<int>(rng() % 2);
      d.targets = Targets::classes(labels, 2);
      tests.push_back({"t" + std::to_string(k), d});
    }
    const Evaluation e = evaluate(m, tests);
    for (const auto& env : e.envs) EXPECT_LE(e.worst_case, env.metric);
  }
}

TEST_F(QuietLog, PartitionScore) {
  const ILModel m = sign_classifier();
  const LabeledDataset val = signed_rows({1, 2, -1, -3}, {1, 0, 0, 0});
  const std::vector<int> split{0, 1, 0, 1};
  const ValidationScore s = partition_score(m, val, split, 2);
  EXPECT_EQ(s.score, 0.5);
  EXPECT_FALSE(s.single_env);
  EXPECT_EQ(s.env_sizes, (std::vector<Index>{2, 2}));
  const std::vector<int> pooled(4, 0);
  const ValidationScore p = partition_score(m, val, pooled, 3);
  EXPECT_EQ(p.score, 0.75);
  EXPECT_TRUE(p.single_env);
  EXPECT_THROW(partition_score(m, signed_rows({}, {}), std::vector<int>{}, 2), InputError);
}

TEST(ValidationScore, UsesHardPosteriorPartition) {
  std::mt19937_64 rng(3);
  EIModelSpec spec;
  spec.trunk = {1, {4}, 3, true, 1.0};
  spec.head = {3, {}, 2, false, 1.0};
  spec.num_envs = 2;
  spec.fresh_head_scale = 1.0;
  const EIModel ei = EIModel::create(spec, 4);
  const ILModel il = sign_classifier();
  const LabeledDataset val = signed_rows({1, 2, -1, -3, 0.5, -0.5}, {1, 0, 0, 0, 1, 1});
  const EnvPosterior p = posterior(ei, ad::Tensor::constant(val.features), val.targets);
  const ValidationScore a = validation_score(ei, il, val);
  const ValidationScore b = partition_score(il, val, p.assignment, 2);
  EXPECT_EQ(a.score, b.score);
  EXPECT_EQ(a.env_sizes, b.env_sizes);
}

TEST(ConditionalMi, MatchesPluginOracle) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 1 + rng() % 200;
    std::vector<int> y(n), e(n), z(n);
    for (std::size_t i = 0; i < n; ++i) {
      z[i] = static_cast<int>(rng() % 3);
      y[i] = static_cast<int>((rng() % 4 == 0 ? 1 : 0) ^ (z[i] == 1 ? 1 : 0));
      e[i] = t % 2 == 0 ? static_cast<int>(rng() % 3) : (y[i] + z[i]) % 2;
    }
    const double got = conditional_mutual_information(y, e, z);
    EXPECT_NEAR(got, testing::plugin_conditional_mi(y, e, z), 1e-12);
    EXPECT_GE(got, 0.0);
  }
}

TEST(ConditionalMi, ConstantEnvironmentIsZero) {
  const std::vector<int> y{0, 1, 1, 0, 1};
  const std::vector<int> e(5, 2);
  const std::vector<int> z{0, 0, 1, 1, 1};
  EXPECT_EQ(conditional_mutual_information(y, e, z), 0.0);
  EXPECT_THROW(conditional_mutual_information(y, e, std::vector<int>{0}), DimensionError);
  EXPECT_THROW(conditional_mutual_information({}, {}, {}), InputError);
}

LabeledDataset noisy_bits(double noise_a, double noise_b, std::uint64_t seed) {
  BitsSpec spec;
  spec.n = 8000;
  ColorShift shift;
  shift.color_noise = {noise_a, noise_b};
  return make_cmnist_bits(spec, shift, seed);
}

TEST_F(QuietLog, DiagnosticsOnColoredBits) {
  const LabeledDataset d = noisy_bits(0.1, 0.2, 6);
  const std::vector<int> oracle = build_oracle_envs(d);
  const DiagnosticResult good = entropy_diagnostics(oracle, d);
  EXPECT_TRUE(*good.invariant_pass);
  EXPECT_TRUE(*good.variant_pass);
  EXPECT_EQ(*good.agreement, 1.0);

  std::mt19937_64 rng(7);
  std::vector<int> random(static_cast<std::size_t>(d.size()));
  for (auto& e : random) e = static_cast<int>(rng() % 2);
  const DiagnosticResult null = entropy_diagnostics(random, d);
  EXPECT_LE(*null.cmi_invariant, kEpsInvariant);
  EXPECT_LE(*null.cmi_variant, kEpsInvariant);
  EXPECT_NEAR(*null.agreement, 0.5, 0.03);

  const DiagnosticResult by_label = entropy_diagnostics(d.targets.labels, d);
  EXPECT_FALSE(*by_label.invariant_pass);
  EXPECT_EQ(*by_label.label_alignment, 1.0);

  const std::vector<int> constant(static_cast<std::size_t>(d.size()), 0);
  const DiagnosticResult flat = entropy_diagnostics(constant, d);
  EXPECT_EQ(*flat.cmi_invariant, 0.0);
  EXPECT_EQ(*flat.cmi_variant, 0.0);
  EXPECT_FALSE(*flat.variant_pass);
}

TEST_F(QuietLog, DiagnosticsOnRegression) {
  RegressionSemSpec spec;
  spec.noise_sd = 1.0;
  const std::vector<RegressionEnv> envs{{2.3, 2000}, {-1.1, 2000}};
  const LabeledDataset d = make_regression_sem(spec, envs, 8);
  const DiagnosticResult good = entropy_diagnostics(d.oracle->env_id, d);
  EXPECT_TRUE(*good.variant_pass);
  EXPECT_GT(*good.cmi_variant, *good.cmi_invariant);
  EXPECT_EQ(good.bins_invariant, 4);
  EXPECT_FALSE(good.label_alignment.has_value());
}

TEST(Diagnostics, Errors) {
  const LabeledDataset d = noisy_bits(0.1, 0.2, 9);
  EXPECT_THROW(entropy_diagnostics(std::vector<int>{0, 1}, d), DimensionError);
  LabeledDataset bare = signed_rows({1, 2}, {0, 1});
  EXPECT_THROW(entropy_diagnostics(std::vector<int>{0, 1}, bare), ConfigError);
}

TEST(EnvAgreement, Examples) {
  const std::vector<int> a{0, 0, 1, 1};
  EXPECT_EQ(env_agreement(a, a, 2), 1.0);
  EXPECT_EQ(env_agreement(std::vector<int>{1, 1, 0, 0}, a, 2), 1.0);
  EXPECT_EQ(env_agreement(std::vector<int>{0, 1, 0, 1}, a, 2), 0.5);
  EXPECT_EQ(env_agreement(std::vector<int>{0, 0, 0, 0}, a, 2), 0.5);
  EXPECT_EQ(env_agreement(std::vector<int>{2, 2, 0, 1}, a, 3), 0.75);
  EXPECT_THROW(env_agreement(a, std::vector<int>{0}, 2), DimensionError);
  EXPECT_THROW(env_agreement(std::vector<int>{9}, std::vector<int>{0}, 2), InputError);
}

TEST(EnvAgreement, InvariantUnderRelabeling) {
  std::mt19937_64 rng(10);
  for (int t = 0; t < 20; ++t) {
    std::vector<int> a(50), b(50);
    for (auto& v : a) v = static_cast<int>(rng() % 4);
    for (auto& v : b) v = static_cast<int>(rng() % 4);
    std::vector<int> perm{0, 1, 2, 3};
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<int> relabeled(50);
    for (std::size_t i = 0; i < 50; ++i) relabeled[i] = perm[static_cast<std::size_t>(a[i])];
    const double x = env_agreement(a, b, 4);
    EXPECT_EQ(x, env_agreement(relabeled, b, 4));
    EXPECT_GE(x, 0.25);
    EXPECT_LE(x, 1.0);
  }
}

TEST(LabelAlignment, Examples) {
  EXPECT_EQ(label_alignment(std::vector<int>{0, 0, 1, 1}, std::vector<int>{1, 1, 0, 0}), 1.0);
  EXPECT_EQ(label_alignment(std::vector<int>{0, 0, 1, 1}, std::vector<int>{1, 0, 0, 0}), 0.5);
}

TrainPlan small_plan(Method method) {
  TrainPlan plan;
  plan.method = method;
  plan.total_steps = 100;
  plan.rounds = 2;
  plan.ei.pretrain_steps = 20;
  plan.model.trunk_hidden = {8};
  plan.model.trunk_output = 4;
  plan.model.phi_hidden = {8};
  plan.seed = 11;
  return plan;
}

LabeledDataset small_bits(std::uint64_t seed) {
  BitsSpec spec;
  spec.n = 400;
  ColorShift shift;
  shift.color_noise = {0.1, 0.2};
  return make_cmnist_bits(spec, shift, seed);
}

TEST_F(QuietLog, JointTrainIsDeterministic) {
  const LabeledDataset train = small_bits(12);
  for (Method method : {Method::kEdnil, Method::kErm, Method::kIrmOracle}) {
    const TrainPlan plan = small_plan(method);
    const JointResult a = joint_train(plan, train, std::nullopt);
    const JointResult b = joint_train(plan, train, std::nullopt);
    EXPECT_EQ(a.report.deterministic_json().dump(), b.report.deterministic_json().dump());
    EXPECT_EQ(a.train_envs, b.train_envs);
    const auto pa = a.il.parameters();
    const auto pb = b.il.parameters();
    for (std::size_t k = 0; k < pa.size(); ++k) EXPECT_EQ(pa[k].value(), pb[k].value());
    EXPECT_EQ(a.report.status, "ok");
    EXPECT_EQ(static_cast<Index>(a.train_envs.size()), train.size());
  }
}

TEST_F(QuietLog, JointTrainEnvironmentKinds) {
  const LabeledDataset train = small_bits(13);
  const JointResult erm = joint_train(small_plan(Method::kErm), train, std::nullopt);
  EXPECT_EQ(erm.report.environments, "pooled");
  EXPECT_FALSE(erm.ei.has_value());
  for (int e : erm.train_envs) EXPECT_EQ(e, 0);
  const JointResult oracle = joint_train(small_plan(Method::kIrmOracle), train, std::nullopt);
  EXPECT_EQ(oracle.report.environments, "oracle");
  EXPECT_EQ(oracle.train_envs, build_oracle_envs(train));
  const JointResult ednil = joint_train(small_plan(Method::kEdnil), train, std::nullopt);
  EXPECT_EQ(ednil.report.environments, "inferred");
  ASSERT_TRUE(ednil.ei.has_value());
  EXPECT_EQ(ednil.report.rounds.size(), 2u);
  double total = 0.0;
  for (double w : ednil.report.env_weights) total += w;
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST_F(QuietLog, IrmOracleNeedsMetadata) {
  LabeledDataset train = small_bits(14);
  train.oracle.reset();
  EXPECT_THROW(joint_train(small_plan(Method::kIrmOracle), train, std::nullopt), ConfigError);
}

TEST_F(QuietLog, RunExperimentFillsReport) {
  const LabeledDataset train = small_bits(15);
  const auto [val, rest] = split_validation(small_bits(16), 0.5, 17);
  const std::vector<NamedDataset> tests{{"t1", rest}, {"t2", small_bits(18)}};
  const JointResult r = run_experiment(small_plan(Method::kEdnil), train, val, tests);
  ASSERT_TRUE(r.report.evaluation.has_value());
  EXPECT_EQ(r.report.evaluation->envs.size(), 2u);
  EXPECT_TRUE(r.report.validation.has_value());
  EXPECT_TRUE(r.report.diagnostics.has_value());
  const std::vector<std::string> names{"t1", "t2"};
  const std::string header = csv_header(names);
  const std::string row = csv_row(r.report);
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), std::count(row.begin(), row.end(), ','));
  EXPECT_EQ(header,
            "seed,config_hash,method,status,worst_case,validation,cmi_invariant,cmi_variant,"
            "agreement,metric_t1,metric_t2");
}

TEST_F(QuietLog, SweepRecordsFailures) {
  const TrainPlan base = small_plan(Method::kErm);
  const DataFactory data = [](SweepAxis, double value, std::uint64_t seed) {
    if (value > 2.5) throw InputError("no data here");
    ExperimentData d;
    d.train = small_bits(seed);
    d.tests = {{"t", small_bits(seed + 100)}};
    return d;
  };
  const std::vector<double> values{2.0, 3.0};
  const std::vector<std::uint64_t> seeds{1, 2};
  const SweepResult s = sweep(base, SweepAxis::kNumEnvs, values, seeds, data);
  ASSERT_EQ(s.rows.size(), 2u);
  EXPECT_EQ(s.rows[0].runs, 2);
  EXPECT_EQ(s.rows[0].failures, 0);
  EXPECT_EQ(s.rows[1].runs, 0);
  EXPECT_EQ(s.rows[1].failures, 2);
  EXPECT_EQ(s.failures.size(), 2u);
  EXPECT_EQ(s.reports.size(), 2u);
  EXPECT_THROW(sweep(base, SweepAxis::kNumEnvs, std::vector<double>{}, seeds, data), UsageError);
}

TEST(Method, Names) {
  EXPECT_EQ(method_from_string("irm-oracle"), Method::kIrmOracle);
  EXPECT_EQ(to_string(Method::kEdnil), "ednil");
  EXPECT_THROW(method_from_string("vrex"), ConfigError);
  EXPECT_EQ(sweep_axis_from_string(to_string(SweepAxis::kColorNoise)), SweepAxis::kColorNoise);
}

}  // namespace
}  // namespace ednil
