#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ednil/random.hpp"
#include "ednil/targets.hpp"
#include "ednil/tensor.hpp"

namespace ednil {

enum class OracleKind { kNone, kColor, kSubgroup, kRegression };

// Ground-truth factors a generator knows about each row.
struct OracleInfo {
  OracleKind kind = OracleKind::kNone;
  std::vector<int> clean_label;  // label before noise (colored digits)
  std::vector<int> color;        // color channel C (colored digits)
  std::vector<int> subgroup;     // 0..3 = SG1..SG4 (income data)
  Matrix invariant;              // X_c (regression)
  Matrix variant;                // X_v, column 0 is X_v* (regression)
  std::vector<int> env_id;       // generating environment per row
  std::vector<double> env_param; // color noise e or r per generating environment

  OracleInfo subset(std::span<const Index> rows) const;
};

struct LabeledDataset {
  std::string name;
  Matrix features;
  Targets targets;
  std::optional<OracleInfo> oracle;
  nlohmann::json provenance = nlohmann::json::object();

  Index size() const { return features.rows(); }
  Index dim() const { return features.cols(); }
  LabeledDataset subset(std::span<const Index> rows) const;
  void validate() const;
};

// ---- MNIST ---------------------------------------------------------------

struct MnistDigits {
  std::vector<std::array<double, 28 * 28>> images;  // grayscale in [0, 1]
  std::vector<int> labels;                          // 0..9
};

// Reads an IDX3 image file and its IDX1 label file (big-endian headers,
// magic 0x00000803 / 0x00000801). At most max_items rows when > 0.
MnistDigits load_mnist_idx(const std::filesystem::path& images,
                           const std::filesystem::path& labels, std::size_t max_items = 0);

// ---- colored digits --------------------------------------------------------

// Rows are split into equal consecutive chunks, one per color-noise value.
struct ColorShift {
  double label_noise = 0.2;
  std::vector<double> color_noise{0.1, 0.2};

  void validate() const;
};

// Y~ = 1{digit < 5}; Y = Y~ flipped w.p. label_noise (globally); C = Y
// flipped w.p. e. Images are 2x2 mean-pooled to 14x14 and written into
// channel C of a 2 x 14 x 14 tensor (d = 392).
LabeledDataset make_cmnist(const MnistDigits& digits, const ColorShift& shift, std::uint64_t seed);

struct BitsSpec {
  Index n = 10000;
  // Color is easier to read than shape, as with colored digits: X_c alone
  // recovers Y~ about 96% of the time, X_v recovers C almost always.
  Index dim_c = 2;
  Index dim_v = 6;
  double noise_sd = 0.8;
};

// Feature-vector surrogate with the same causal chain: Y~ ~ Bernoulli(1/2),
// Y and C as above, X_c = (2Y~ - 1) + N(0, sd^2) per coordinate,
// X_v = (2C - 1) + N(0, sd^2) per coordinate, X = [X_c, X_v].
LabeledDataset make_cmnist_bits(const BitsSpec& spec, const ColorShift& shift,
                                std::uint64_t seed);

// ---- income data -----------------------------------------------------------

struct AdultRecord {
  std::array<std::string, 14> fields;
  int income = 0;  // 1 when > 50K
};

struct AdultRecords {
  std::vector<AdultRecord> rows;
  std::size_t skipped = 0;
};

// Comma-separated UCI adult.data / adult.test layout. Malformed rows are
// skipped and counted; "?" is kept as its own category.
AdultRecords load_adult_csv(const std::filesystem::path& path);

// One-hot categories and z-score statistics fitted on a training table.
struct AdultEncoding {
  std::array<std::vector<std::string>, 14> categories;  // empty for continuous
  std::array<double, 14> mean{};
  std::array<double, 14> sd{};

  static AdultEncoding fit(const AdultRecords& records);
  Index dim() const;
  std::vector<double> encode(const AdultRecord& record) const;
};

// 0..3 = Non-black male, Non-black female, Black male, Black female.
int adult_subgroup(const AdultRecord& record);

// Target P(Y = 1 | SG) for SG1..SG4.
using SubgroupTargets = std::array<double, 4>;
inline constexpr SubgroupTargets kAdultTrain{0.9, 0.1, 0.9, 0.1};
inline constexpr SubgroupTargets kAdultIid{0.9, 0.1, 0.9, 0.1};
inline constexpr SubgroupTargets kAdultInd{0.5, 0.5, 0.5, 0.5};
inline constexpr SubgroupTargets kAdultOod{0.1, 0.9, 0.1, 0.9};

// Resamples each subgroup with replacement to hit its target positive rate
// while keeping the subgroup size.
LabeledDataset resample_adult_confounded(const AdultRecords& records,
                                         const AdultEncoding& encoding,
                                         const SubgroupTargets& targets, std::uint64_t seed);

// ---- regression SEM ---------------------------------------------------------

struct RegressionSemSpec {
  Index d_c = 5;
  Index d_v = 5;
  double noise_sd = 0.5;
  // Seeds the shared structure (f and the scrambling matrix H).
  std::uint64_t structure_seed = 0;
};

struct RegressionEnv {
  double r = 2.3;
  Index count = 1000;
};

inline constexpr RegressionEnv kRegressionTrain[] = {{2.3, 1000}, {-1.1, 100}};

struct RegressionStructure {
  Matrix rotation;       // H, orthogonal (d_c + d_v) square
  Matrix theta_linear;   // d_c x 1
  Matrix theta_square;   // d_c x 1

  static RegressionStructure create(const RegressionSemSpec& spec);
  // f(x_c) = theta_linear' x + theta_square' (x .* x), per row.
  Matrix invariant_signal(const Matrix& x_c) const;
};

// One draw from the density proportional to phi(x) exp(-rate |center - x|),
// phi the standard normal density.
double sample_tilted_normal(double center, double rate, Rng& rng);

// Y = f(X_c) + eps; X_v* given y is a standard normal draw accepted with
// probability |r|^(-5 |y - sign(r) X_v*|), sampled exactly through
// sample_tilted_normal; X = [X_c, X_v] H'.
LabeledDataset make_regression_sem(const RegressionSemSpec& spec,
                                   std::span<const RegressionEnv> envs, std::uint64_t seed);

// ---- splitting and persistence ----------------------------------------------

// Disjoint uniform split: floor(N f) validation rows, the rest training.
std::pair<LabeledDataset, LabeledDataset> split_validation(const LabeledDataset& data,
                                                           double fraction, std::uint64_t seed);

// Binary container: "EDNILDS1", u64 header length, JSON header (name,
// provenance, N, d, task, oracle columns), then row-major little-endian
// float64 features, targets, and oracle columns.
void save_dataset(const std::filesystem::path& path, const LabeledDataset& data);
LabeledDataset load_dataset(const std::filesystem::path& path);
void export_dataset_csv(const std::filesystem::path& path, const LabeledDataset& data);

}  // namespace ednil
