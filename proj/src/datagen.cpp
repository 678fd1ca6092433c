#include "ednil/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include <Eigen/QR>

#include "ednil/binary_io.hpp"
#include "ednil/errors.hpp"
#include "ednil/log.hpp"
#include "ednil/random.hpp"

namespace ednil {

namespace {

template <typename T>
std::vector<T> pick(const std::vector<T>& v, std::span<const Index> rows) {
  if (v.empty()) return {};
  std::vector<T> out;
  out.reserve(rows.size());
  for (Index r : rows) out.push_back(v.at(static_cast<std::size_t>(r)));
  return out;
}

Matrix pick_rows(const Matrix& m, std::span<const Index> rows) {
  if (m.size() == 0) return {};
  Matrix out(static_cast<Index>(rows.size()), m.cols());
  for (std::size_t k = 0; k < rows.size(); ++k) out.row(static_cast<Index>(k)) = m.row(rows[k]);
  return out;
}

std::string oracle_kind_name(OracleKind kind) {
  switch (kind) {
    case OracleKind::kColor: return "color";
    case OracleKind::kSubgroup: return "subgroup";
    case OracleKind::kRegression: return "regression";
    case OracleKind::kNone: break;
  }
  return "none";
}

OracleKind oracle_kind_from_name(const std::string& name) {
  if (name == "color") return OracleKind::kColor;
  if (name == "subgroup") return OracleKind::kSubgroup;
  if (name == "regression") return OracleKind::kRegression;
  return OracleKind::kNone;
}

// Equal consecutive chunks; the last chunk absorbs the remainder.
std::vector<int> chunk_ids(Index n, std::size_t chunks) {
  std::vector<int> ids(static_cast<std::size_t>(n));
  const Index per = n / static_cast<Index>(chunks);
  for (Index i = 0; i < n; ++i) {
    ids[static_cast<std::size_t>(i)] =
        static_cast<int>(std::min<Index>(per > 0 ? i / per : 0, static_cast<Index>(chunks) - 1));
  }
  return ids;
}

struct ColorLabels {
  std::vector<int> clean;
  std::vector<int> label;
  std::vector<int> color;
  std::vector<int> chunk;
};

// Label noise is applied to every row before any color is drawn.
ColorLabels draw_color_labels(std::vector<int> clean, const ColorShift& shift, Rng& rng) {
  const Index n = static_cast<Index>(clean.size());
  ColorLabels out;
  out.label.resize(clean.size());
  std::bernoulli_distribution label_flip(shift.label_noise);
  for (std::size_t i = 0; i < clean.size(); ++i) {
    out.label[i] = label_flip(rng) ? 1 - clean[i] : clean[i];
  }
  out.chunk = chunk_ids(n, shift.color_noise.size());
  out.color.resize(clean.size());
  for (std::size_t i = 0; i < clean.size(); ++i) {
    std::bernoulli_distribution color_flip(shift.color_noise[static_cast<std::size_t>(out.chunk[i])]);
    out.color[i] = color_flip(rng) ? 1 - out.label[i] : out.label[i];
  }
  out.clean = std::move(clean);
  return out;
}

nlohmann::json shift_json(const ColorShift& shift) {
  return {{"label_noise", shift.label_noise}, {"color_noise", shift.color_noise}};
}

}  // namespace

OracleInfo OracleInfo::subset(std::span<const Index> rows) const {
  OracleInfo out;
  out.kind = kind;
  out.clean_label = pick(clean_label, rows);
  out.color = pick(color, rows);
  out.subgroup = pick(subgroup, rows);
  out.invariant = pick_rows(invariant, rows);
  out.variant = pick_rows(variant, rows);
  out.env_id = pick(env_id, rows);
  out.env_param = env_param;
  return out;
}

LabeledDataset LabeledDataset::subset(std::span<const Index> rows) const {
  LabeledDataset out;
  out.name = name;
  out.features = pick_rows(features, rows);
  if (rows.empty()) out.features.resize(0, features.cols());
  out.targets = targets.subset(rows);
  if (oracle) out.oracle = oracle->subset(rows);
  out.provenance = provenance;
  return out;
}

void LabeledDataset::validate() const {
  if (targets.size() != features.rows()) {
    throw DimensionError("dataset '" + name + "': " + std::to_string(features.rows()) +
                         " feature rows but " + std::to_string(targets.size()) + " targets");
  }
  targets.validate();
  if (!oracle) return;
  const auto n = static_cast<std::size_t>(features.rows());
  auto check = [&](std::size_t got, const char* what) {
    if (got != 0 && got != n) {
      throw DimensionError("dataset '" + name + "': oracle column " + what + " has " +
                           std::to_string(got) + " rows, expected " + std::to_string(n));
    }
  };
  check(oracle->clean_label.size(), "clean_label");
  check(oracle->color.size(), "color");
  check(oracle->subgroup.size(), "subgroup");
  check(static_cast<std::size_t>(oracle->invariant.rows()), "invariant");
  check(static_cast<std::size_t>(oracle->variant.rows()), "variant");
  check(oracle->env_id.size(), "env_id");
}

// ---- MNIST -------------------------------------------------------------------

MnistDigits load_mnist_idx(const std::filesystem::path& images_path,
                           const std::filesystem::path& labels_path, std::size_t max_items) {
  std::ifstream images_file(images_path, std::ios::binary);
  if (!images_file) throw std::runtime_error("cannot open " + images_path.string());
  std::ifstream labels_file(labels_path, std::ios::binary);
  if (!labels_file) throw std::runtime_error("cannot open " + labels_path.string());

  io::Reader images(images_file);
  io::Reader labels(labels_file);
  unsigned char header[16];

  images.read_bytes(header, 16, "image header");
  if (io::decode_be32(header) != 0x00000803) {
    throw FormatError(images_path.string() + ": bad image magic", 0);
  }
  const std::uint32_t count = io::decode_be32(header + 4);
  const std::uint32_t rows = io::decode_be32(header + 8);
  const std::uint32_t cols = io::decode_be32(header + 12);
  if (rows != 28 || cols != 28) {
    throw FormatError(images_path.string() + ": expected 28x28 images, got " +
                          std::to_string(rows) + "x" + std::to_string(cols),
                      8);
  }

  labels.read_bytes(header, 8, "label header");
  if (io::decode_be32(header) != 0x00000801) {
    throw FormatError(labels_path.string() + ": bad label magic", 0);
  }
  const std::uint32_t label_count = io::decode_be32(header + 4);
  if (label_count != count) {
    throw FormatError(labels_path.string() + ": " + std::to_string(label_count) +
                          " labels for " + std::to_string(count) + " images",
                      4);
  }

  const std::size_t n = max_items > 0 ? std::min<std::size_t>(max_items, count) : count;
  MnistDigits digits;
  digits.images.resize(n);
  digits.labels.resize(n);
  std::vector<unsigned char> pixels(28 * 28);
  for (std::size_t k = 0; k < n; ++k) {
    images.read_bytes(pixels.data(), pixels.size(), "image pixels");
    for (std::size_t p = 0; p < pixels.size(); ++p) digits.images[k][p] = pixels[p] / 255.0;
    unsigned char label = 0;
    labels.read_bytes(&label, 1, "labels");
    if (label > 9) {
      throw FormatError(labels_path.string() + ": label " + std::to_string(label) + " > 9",
                        labels.offset() - 1);
    }
    digits.labels[k] = label;
  }
  return digits;
}

// ---- colored digits ----------------------------------------------------------

void ColorShift::validate() const {
  if (!(label_noise >= 0.0 && label_noise <= 1.0)) {
    throw ConfigError("label noise must be a probability");
  }
  if (color_noise.empty()) throw ConfigError("color noise list is empty");
  for (double e : color_noise) {
    if (!(e >= 0.0 && e <= 1.0)) throw ConfigError("color noise must be a probability");
  }
}

LabeledDataset make_cmnist(const MnistDigits& digits, const ColorShift& shift,
                           std::uint64_t seed) {
  shift.validate();
  const auto n = static_cast<Index>(digits.images.size());
  std::vector<int> clean(digits.labels.size());
  for (std::size_t i = 0; i < clean.size(); ++i) clean[i] = digits.labels[i] < 5 ? 1 : 0;
  Rng rng(seed);
  ColorLabels labels = draw_color_labels(std::move(clean), shift, rng);

  constexpr Index kPooled = 14 * 14;
  LabeledDataset data;
  data.name = "cmnist";
  data.features = Matrix::Zero(n, 2 * kPooled);
  for (Index i = 0; i < n; ++i) {
    const auto& img = digits.images[static_cast<std::size_t>(i)];
    const Index channel = labels.color[static_cast<std::size_t>(i)];
    for (int r = 0; r < 14; ++r) {
      for (int c = 0; c < 14; ++c) {
        const double v = (img[(2 * r) * 28 + 2 * c] + img[(2 * r) * 28 + 2 * c + 1] +
                          img[(2 * r + 1) * 28 + 2 * c] + img[(2 * r + 1) * 28 + 2 * c + 1]) /
                         4.0;
        data.features(i, channel * kPooled + r * 14 + c) = v;
      }
    }
  }
  data.targets = Targets::classes(labels.label, 2);
  OracleInfo oracle;
  oracle.kind = OracleKind::kColor;
  oracle.clean_label = std::move(labels.clean);
  oracle.color = std::move(labels.color);
  oracle.env_id = std::move(labels.chunk);
  oracle.env_param = shift.color_noise;
  data.oracle = std::move(oracle);
  data.provenance = {{"generator", "cmnist"}, {"seed", seed}, {"rows", n}, {"shift", shift_json(shift)}};
  return data;
}

LabeledDataset make_cmnist_bits(const BitsSpec& spec, const ColorShift& shift,
                                std::uint64_t seed) {
  shift.validate();
  if (spec.n < 0 || spec.dim_c < 1 || spec.dim_v < 1) {
    throw ConfigError("cmnist-bits needs n >= 0 and dims >= 1");
  }
  if (!(spec.noise_sd >= 0.0)) throw ConfigError("cmnist-bits noise_sd must be >= 0");
  Rng rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::vector<int> clean(static_cast<std::size_t>(spec.n));
  for (auto& c : clean) c = coin(rng) ? 1 : 0;
  ColorLabels labels = draw_color_labels(std::move(clean), shift, rng);

  std::normal_distribution<double> noise(0.0, 1.0);
  LabeledDataset data;
  data.name = "cmnist-bits";
  data.features.resize(spec.n, spec.dim_c + spec.dim_v);
  for (Index i = 0; i < spec.n; ++i) {
    const double shape_mean = 2.0 * labels.clean[static_cast<std::size_t>(i)] - 1.0;
    const double color_mean = 2.0 * labels.color[static_cast<std::size_t>(i)] - 1.0;
    for (Index j = 0; j < spec.dim_c; ++j) {
      data.features(i, j) = shape_mean + spec.noise_sd * noise(rng);
    }
    for (Index j = 0; j < spec.dim_v; ++j) {
      data.features(i, spec.dim_c + j) = color_mean + spec.noise_sd * noise(rng);
    }
  }
  data.targets = Targets::classes(labels.label, 2);
  OracleInfo oracle;
  oracle.kind = OracleKind::kColor;
  oracle.clean_label = std::move(labels.clean);
  oracle.color = std::move(labels.color);
  oracle.env_id = std::move(labels.chunk);
  oracle.env_param = shift.color_noise;
  data.oracle = std::move(oracle);
  data.provenance = {{"generator", "cmnist-bits"},
                     {"seed", seed},
                     {"rows", spec.n},
                     {"dim_c", spec.dim_c},
                     {"dim_v", spec.dim_v},
                     {"noise_sd", spec.noise_sd},
                     {"shift", shift_json(shift)}};
  return data;
}

// ---- income data -------------------------------------------------------------

namespace {

constexpr std::array<bool, 14> kAdultContinuous = {true,  false, true,  false, true,
                                                   false, false, false, false, false,
                                                   true,  true,  true,  false};
constexpr int kRaceField = 8;
constexpr int kSexField = 9;

std::string trim(std::string s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return {};
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

bool parse_double(const std::string& s, double& out) {
  try {
    std::size_t used = 0;
    out = std::stod(s, &used);
    return used == s.size();
  } catch (const std::exception&) {
    return false;
  }
}

}  // namespace

AdultRecords load_adult_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  AdultRecords records;
  std::string line;
  while (std::getline(in, line)) {
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped.front() == '|') continue;
    std::vector<std::string> parts;
    std::stringstream ss(stripped);
    std::string field;
    while (std::getline(ss, field, ',')) parts.push_back(trim(field));
    if (parts.size() != 15) {
      ++records.skipped;
      continue;
    }
    AdultRecord rec;
    bool ok = true;
    for (int f = 0; f < 14; ++f) {
      rec.fields[static_cast<std::size_t>(f)] = parts[static_cast<std::size_t>(f)];
      double v = 0.0;
      if (kAdultContinuous[static_cast<std::size_t>(f)] &&
          !parse_double(parts[static_cast<std::size_t>(f)], v)) {
        ok = false;
      }
    }
    std::string label = parts[14];
    if (!label.empty() && label.back() == '.') label.pop_back();
    if (label == ">50K") {
      rec.income = 1;
    } else if (label == "<=50K") {
      rec.income = 0;
    } else {
      ok = false;
    }
    if (!ok) {
      ++records.skipped;
      continue;
    }
    records.rows.push_back(std::move(rec));
  }
  if (records.skipped > 0) {
    log_warning(path.string() + ": skipped " + std::to_string(records.skipped) +
                " malformed rows");
  }
  return records;
}

int adult_subgroup(const AdultRecord& record) {
  const bool black = record.fields[kRaceField] == "Black";
  const bool female = record.fields[kSexField] == "Female";
  return 2 * (black ? 1 : 0) + (female ? 1 : 0);
}

AdultEncoding AdultEncoding::fit(const AdultRecords& records) {
  if (records.rows.empty()) throw InputError("cannot fit an encoding on an empty table");
  AdultEncoding enc;
  for (int f = 0; f < 14; ++f) {
    const auto fu = static_cast<std::size_t>(f);
    if (kAdultContinuous[fu]) {
      double sum = 0.0;
      double sq = 0.0;
      for (const auto& r : records.rows) {
        const double v = std::stod(r.fields[fu]);
        sum += v;
        sq += v * v;
      }
      const double n = static_cast<double>(records.rows.size());
      enc.mean[fu] = sum / n;
      const double var = std::max(0.0, sq / n - enc.mean[fu] * enc.mean[fu]);
      enc.sd[fu] = var > 0.0 ? std::sqrt(var) : 1.0;
    } else if (f == kRaceField) {
      enc.categories[fu] = {"Black"};
    } else if (f == kSexField) {
      enc.categories[fu] = {"Male"};
    } else {
      std::set<std::string> seen;
      for (const auto& r : records.rows) seen.insert(r.fields[fu]);
      enc.categories[fu].assign(seen.begin(), seen.end());
    }
  }
  return enc;
}

Index AdultEncoding::dim() const {
  Index d = 0;
  for (std::size_t f = 0; f < 14; ++f) {
    d += kAdultContinuous[f] ? 1 : static_cast<Index>(categories[f].size());
  }
  return d;
}

std::vector<double> AdultEncoding::encode(const AdultRecord& record) const {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(dim()));
  for (std::size_t f = 0; f < 14; ++f) {
    if (kAdultContinuous[f]) {
      out.push_back((std::stod(record.fields[f]) - mean[f]) / sd[f]);
    } else {
      for (const auto& cat : categories[f]) out.push_back(record.fields[f] == cat ? 1.0 : 0.0);
    }
  }
  return out;
}

LabeledDataset resample_adult_confounded(const AdultRecords& records,
                                         const AdultEncoding& encoding,
                                         const SubgroupTargets& targets, std::uint64_t seed) {
  std::array<std::vector<std::size_t>, 4> pos;
  std::array<std::vector<std::size_t>, 4> neg;
  for (std::size_t i = 0; i < records.rows.size(); ++i) {
    const auto sg = static_cast<std::size_t>(adult_subgroup(records.rows[i]));
    (records.rows[i].income == 1 ? pos : neg)[sg].push_back(i);
  }
  Rng rng(seed);
  std::vector<std::size_t> chosen;
  std::vector<int> subgroup;
  for (std::size_t sg = 0; sg < 4; ++sg) {
    if (!(targets[sg] >= 0.0 && targets[sg] <= 1.0)) {
      throw ConfigError("subgroup target rates must be probabilities");
    }
    const std::size_t size = pos[sg].size() + neg[sg].size();
    const auto n_pos = static_cast<std::size_t>(std::llround(targets[sg] * static_cast<double>(size)));
    const std::size_t n_neg = size - n_pos;
    if ((n_pos > 0 && pos[sg].empty()) || (n_neg > 0 && neg[sg].empty())) {
      throw InputError("subgroup SG" + std::to_string(sg + 1) +
                       " lacks positive or negative examples to resample");
    }
    auto draw = [&](const std::vector<std::size_t>& pool, std::size_t count) {
      if (count == 0) return;
      std::uniform_int_distribution<std::size_t> idx(0, pool.size() - 1);
      for (std::size_t k = 0; k < count; ++k) {
        chosen.push_back(pool[idx(rng)]);
        subgroup.push_back(static_cast<int>(sg));
      }
    };
    draw(pos[sg], n_pos);
    draw(neg[sg], n_neg);
  }
  std::vector<std::size_t> order(chosen.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  LabeledDataset data;
  data.name = "adult-confounded";
  data.features.resize(static_cast<Index>(chosen.size()), encoding.dim());
  std::vector<int> labels(chosen.size());
  OracleInfo oracle;
  oracle.kind = OracleKind::kSubgroup;
  oracle.subgroup.resize(chosen.size());
  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto& rec = records.rows[chosen[order[k]]];
    const auto row = encoding.encode(rec);
    for (std::size_t j = 0; j < row.size(); ++j) {
      data.features(static_cast<Index>(k), static_cast<Index>(j)) = row[j];
    }
    labels[k] = rec.income;
    oracle.subgroup[k] = subgroup[order[k]];
  }
  oracle.env_id = oracle.subgroup;
  oracle.env_param.assign(targets.begin(), targets.end());
  data.targets = Targets::classes(std::move(labels), 2);
  data.oracle = std::move(oracle);
  data.provenance = {{"generator", "adult-confounded"},
                     {"seed", seed},
                     {"rows", chosen.size()},
                     {"targets", targets}};
  return data;
}

// ---- regression SEM ----------------------------------------------------------

RegressionStructure RegressionStructure::create(const RegressionSemSpec& spec) {
  if (spec.d_c < 1 || spec.d_v < 1) throw ConfigError("regression dims must be >= 1");
  Rng rng(spec.structure_seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  RegressionStructure s;
  // Scaled so Var f(X_c) is about 1 for standard normal X_c.
  const double lin_sd = std::sqrt(1.0 / (2.0 * static_cast<double>(spec.d_c)));
  const double sq_sd = std::sqrt(1.0 / (4.0 * static_cast<double>(spec.d_c)));
  s.theta_linear.resize(spec.d_c, 1);
  s.theta_square.resize(spec.d_c, 1);
  for (Index j = 0; j < spec.d_c; ++j) s.theta_linear(j, 0) = lin_sd * normal(rng);
  for (Index j = 0; j < spec.d_c; ++j) s.theta_square(j, 0) = sq_sd * normal(rng);
  const Index d = spec.d_c + spec.d_v;
  Eigen::MatrixXd gaussian(d, d);
  for (Index i = 0; i < d; ++i) {
    for (Index j = 0; j < d; ++j) gaussian(i, j) = normal(rng);
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(gaussian);
  s.rotation = qr.householderQ() * Eigen::MatrixXd::Identity(d, d);
  return s;
}

namespace {

// log P(Z > t) for standard normal Z.
double log_upper_tail(double t) {
  if (t < 30.0) return std::log(0.5 * std::erfc(t / std::sqrt(2.0)));
  return -0.5 * t * t - std::log(t * std::sqrt(2.0 * std::numbers::pi));
}

// Standard normal conditioned on Z > c; exponential proposal for c > 0.
double truncated_normal_above(double c, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (c <= 0.0) {
    while (true) {
      const double z = normal(rng);
      if (z > c) return z;
    }
  }
  const double rate = 0.5 * (c + std::sqrt(c * c + 4.0));
  std::exponential_distribution<double> expo(rate);
  while (true) {
    const double z = c + expo(rng);
    if (unit(rng) <= std::exp(-0.5 * (z - rate) * (z - rate))) return z;
  }
}

}  // namespace

double sample_tilted_normal(double center, double rate, Rng& rng) {
  if (!(rate >= 0.0)) throw InputError("sample_tilted_normal: rate must be >= 0");
  // Above the center the density is N(-rate, 1), below it N(rate, 1), each
  // truncated at the center and weighted by its mass.
  const double log_right = rate * center + log_upper_tail(center + rate);
  const double log_left = -rate * center + log_upper_tail(rate - center);
  const double p_right = 1.0 / (1.0 + std::exp(log_left - log_right));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (unit(rng) < p_right) return -rate + truncated_normal_above(center + rate, rng);
  return rate - truncated_normal_above(rate - center, rng);
}

Matrix RegressionStructure::invariant_signal(const Matrix& x_c) const {
  return x_c * theta_linear + x_c.cwiseProduct(x_c) * theta_square;
}

LabeledDataset make_regression_sem(const RegressionSemSpec& spec,
                                   std::span<const RegressionEnv> envs, std::uint64_t seed) {
  if (envs.empty()) throw ConfigError("regression SEM needs at least one environment");
  for (const auto& env : envs) {
    if (!(std::abs(env.r) > 1.0)) throw ConfigError("regression environments need |r| > 1");
    if (env.count < 0) throw ConfigError("regression environment counts must be >= 0");
  }
  if (!(spec.noise_sd >= 0.0)) throw ConfigError("regression noise_sd must be >= 0");
  const RegressionStructure structure = RegressionStructure::create(spec);
  Index n = 0;
  for (const auto& env : envs) n += env.count;

  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix x_c(n, spec.d_c);
  Matrix x_v(n, spec.d_v);
  std::vector<double> y(static_cast<std::size_t>(n));
  std::vector<int> env_id(static_cast<std::size_t>(n));
  Index row = 0;
  for (std::size_t e = 0; e < envs.size(); ++e) {
    const double r = envs[e].r;
    const double rate = 5.0 * std::log(std::abs(r));
    const double sign = r > 0 ? 1.0 : -1.0;
    for (Index k = 0; k < envs[e].count; ++k, ++row) {
      for (Index j = 0; j < spec.d_c; ++j) x_c(row, j) = normal(rng);
      for (Index j = 1; j < spec.d_v; ++j) x_v(row, j) = normal(rng);
      const double signal = structure.invariant_signal(x_c.row(row))(0, 0);
      const double target = signal + spec.noise_sd * normal(rng);
      // Accepting a N(0, 1) candidate with probability |r|^(-5 |y - s x|)
      // leaves x distributed as this tilted density; draw from it directly.
      x_v(row, 0) = sign * sample_tilted_normal(target, rate, rng);
      y[static_cast<std::size_t>(row)] = target;
      env_id[static_cast<std::size_t>(row)] = static_cast<int>(e);
    }
  }

  Matrix latent(n, spec.d_c + spec.d_v);
  latent.leftCols(spec.d_c) = x_c;
  latent.rightCols(spec.d_v) = x_v;

  LabeledDataset data;
  data.name = "regression";
  data.features = latent * structure.rotation.transpose();
  data.targets = Targets::reals(std::move(y));
  OracleInfo oracle;
  oracle.kind = OracleKind::kRegression;
  oracle.invariant = std::move(x_c);
  oracle.variant = std::move(x_v);
  oracle.env_id = std::move(env_id);
  for (const auto& env : envs) oracle.env_param.push_back(env.r);
  data.oracle = std::move(oracle);
  nlohmann::json env_json = nlohmann::json::array();
  for (const auto& env : envs) env_json.push_back({{"r", env.r}, {"count", env.count}});
  data.provenance = {{"generator", "regression"},
                     {"seed", seed},
                     {"structure_seed", spec.structure_seed},
                     {"d_c", spec.d_c},
                     {"d_v", spec.d_v},
                     {"noise_sd", spec.noise_sd},
                     {"envs", env_json}};
  return data;
}

// ---- splitting and persistence -----------------------------------------------

std::pair<LabeledDataset, LabeledDataset> split_validation(const LabeledDataset& data,
                                                           double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("split fraction must be in (0, 1)");
  const Index n = data.size();
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * fraction));
  std::vector<Index> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<Index> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  return {data.subset(train), data.subset(val)};
}

namespace {

constexpr char kDatasetMagic[8] = {'E', 'D', 'N', 'I', 'L', 'D', 'S', '1'};

void write_ints(std::ostream& out, const std::vector<int>& v) {
  for (int x : v) io::write_f64(out, static_cast<double>(x));
}

std::vector<int> read_ints(io::Reader& in, std::size_t n, const char* what) {
  std::vector<int> v(n);
  for (auto& x : v) x = static_cast<int>(in.f64(what));
  return v;
}

void write_matrix(std::ostream& out, const Matrix& m) {
  for (Index i = 0; i < m.size(); ++i) io::write_f64(out, m.data()[i]);
}

Matrix read_matrix(io::Reader& in, Index rows, Index cols, const char* what) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = in.f64(what);
  return m;
}

}  // namespace

void save_dataset(const std::filesystem::path& path, const LabeledDataset& data) {
  data.validate();
  nlohmann::json header = {{"name", data.name},
                           {"provenance", data.provenance},
                           {"rows", data.size()},
                           {"dim", data.dim()},
                           {"task", data.targets.is_classification() ? "classification"
                                                                     : "regression"},
                           {"num_classes", data.targets.num_classes}};
  if (data.oracle) {
    const auto& o = *data.oracle;
    nlohmann::json columns = nlohmann::json::array();
    if (!o.clean_label.empty()) columns.push_back("clean_label");
    if (!o.color.empty()) columns.push_back("color");
    if (!o.subgroup.empty()) columns.push_back("subgroup");
    if (!o.env_id.empty()) columns.push_back("env_id");
    header["oracle"] = {{"kind", oracle_kind_name(o.kind)},
                        {"columns", columns},
                        {"invariant_dim", o.invariant.cols()},
                        {"variant_dim", o.variant.cols()},
                        {"env_param", o.env_param}};
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write dataset " + path.string());
  out.write(kDatasetMagic, sizeof(kDatasetMagic));
  io::write_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  write_matrix(out, data.features);
  if (data.targets.is_classification()) {
    write_ints(out, data.targets.labels);
  } else {
    for (double v : data.targets.values) io::write_f64(out, v);
  }
  if (data.oracle) {
    const auto& o = *data.oracle;
    write_ints(out, o.clean_label);
    write_ints(out, o.color);
    write_ints(out, o.subgroup);
    write_ints(out, o.env_id);
    write_matrix(out, o.invariant);
    write_matrix(out, o.variant);
  }
  if (!out) throw std::runtime_error("failed writing dataset " + path.string());
}

LabeledDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("cannot open dataset " + path.string());
  io::Reader in(file);
  if (in.string(sizeof(kDatasetMagic), "magic") !=
      std::string(kDatasetMagic, sizeof(kDatasetMagic))) {
    throw FormatError(path.string() + ": not an EDNIL dataset container", 0);
  }
  const auto header_len = in.u64("header length");
  const auto header_offset = in.offset();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.string(header_len, "header"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad header: " + e.what(), header_offset);
  }
  LabeledDataset data;
  data.name = header.at("name").get<std::string>();
  data.provenance = header.at("provenance");
  const auto rows = header.at("rows").get<Index>();
  const auto dim = header.at("dim").get<Index>();
  const auto n = static_cast<std::size_t>(rows);
  data.features = read_matrix(in, rows, dim, "features");
  if (header.at("task").get<std::string>() == "classification") {
    data.targets = Targets::classes(read_ints(in, n, "targets"), header.at("num_classes").get<int>());
  } else {
    std::vector<double> values(n);
    for (auto& v : values) v = in.f64("targets");
    data.targets = Targets::reals(std::move(values));
  }
  if (header.contains("oracle")) {
    const auto& oh = header["oracle"];
    OracleInfo o;
    o.kind = oracle_kind_from_name(oh.at("kind").get<std::string>());
    const auto columns = oh.at("columns").get<std::vector<std::string>>();
    auto has = [&](const char* c) {
      return std::find(columns.begin(), columns.end(), c) != columns.end();
    };
    if (has("clean_label")) o.clean_label = read_ints(in, n, "oracle clean_label");
    if (has("color")) o.color = read_ints(in, n, "oracle color");
    if (has("subgroup")) o.subgroup = read_ints(in, n, "oracle subgroup");
    if (has("env_id")) o.env_id = read_ints(in, n, "oracle env_id");
    const auto inv_dim = oh.at("invariant_dim").get<Index>();
    const auto var_dim = oh.at("variant_dim").get<Index>();
    if (inv_dim > 0) o.invariant = read_matrix(in, rows, inv_dim, "oracle invariant");
    if (var_dim > 0) o.variant = read_matrix(in, rows, var_dim, "oracle variant");
    o.env_param = oh.at("env_param").get<std::vector<double>>();
    data.oracle = std::move(o);
  }
  data.validate();
  return data;
}

void export_dataset_csv(const std::filesystem::path& path, const LabeledDataset& data) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  for (Index j = 0; j < data.dim(); ++j) out << 'x' << j << ',';
  out << 'y';
  const OracleInfo* o = data.oracle ? &*data.oracle : nullptr;
  if (o) {
    if (!o->clean_label.empty()) out << ",clean_label";
    if (!o->color.empty()) out << ",color";
    if (!o->subgroup.empty()) out << ",subgroup";
    if (!o->env_id.empty()) out << ",env_id";
  }
  out << '\n';
  for (Index i = 0; i < data.size(); ++i) {
    const auto iu = static_cast<std::size_t>(i);
    for (Index j = 0; j < data.dim(); ++j) out << data.features(i, j) << ',';
    if (data.targets.is_classification()) {
      out << data.targets.labels[iu];
    } else {
      out << data.targets.values[iu];
    }
    if (o) {
      if (!o->clean_label.empty()) out << ',' << o->clean_label[iu];
      if (!o->color.empty()) out << ',' << o->color[iu];
      if (!o->subgroup.empty()) out << ',' << o->subgroup[iu];
      if (!o->env_id.empty()) out << ',' << o->env_id[iu];
    }
    out << '\n';
  }
}

}  // namespace ednil
