#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "ednil/datagen.hpp"
#include "ednil/errors.hpp"
#include "ednil/log.hpp"

namespace ednil {
namespace {

namespace fs = std::filesystem;

fs::path temp_path(const std::string& name) { return fs::temp_directory_path() / name; }

void put_be32(std::ofstream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

// Image k has every pixel equal to k * 10; its label is k % 10.
void write_idx(const fs::path& images, const fs::path& labels, std::uint32_t count,
               std::uint32_t image_magic = 0x803) {
  std::ofstream img(images, std::ios::binary);
  put_be32(img, image_magic);
  put_be32(img, count);
  put_be32(img, 28);
  put_be32(img, 28);
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::string px(28 * 28, static_cast<char>(k * 10));
    img.write(px.data(), static_cast<std::streamsize>(px.size()));
  }
  std::ofstream lab(labels, std::ios::binary);
  put_be32(lab, 0x801);
  put_be32(lab, count);
  for (std::uint32_t k = 0; k < count; ++k) lab.put(static_cast<char>(k % 10));
}

TEST(MnistIdx, ReadsHeaderCountAndPixels) {
  const auto img = temp_path("ednil_idx_images");
  const auto lab = temp_path("ednil_idx_labels");
  write_idx(img, lab, 12);
  const MnistDigits d = load_mnist_idx(img, lab);
  ASSERT_EQ(d.images.size(), 12u);
  EXPECT_EQ(d.labels[11], 1);
  EXPECT_DOUBLE_EQ(d.images[3][500], 30.0 / 255.0);
  for (int l : d.labels) EXPECT_TRUE(l >= 0 && l <= 9);
  EXPECT_EQ(load_mnist_idx(img, lab, 5).images.size(), 5u);
}

TEST(MnistIdx, BadMagicAndTruncation) {
  const auto img = temp_path("ednil_idx_bad_images");
  const auto lab = temp_path("ednil_idx_bad_labels");
  write_idx(img, lab, 3, 0x802);
  EXPECT_THROW(load_mnist_idx(img, lab), FormatError);
  write_idx(img, lab, 3);
  fs::resize_file(img, 16 + 28 * 28 + 100);
  try {
    load_mnist_idx(img, lab);
    FAIL() << "truncated file accepted";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 16u + 28 * 28 + 100);
  }
}

MnistDigits synthetic_digits(std::size_t n, std::uint64_t seed) {
  MnistDigits d;
  std::mt19937_64 rng(seed);
  d.images.resize(n);
  d.labels.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    d.labels[k] = static_cast<int>(rng() % 10);
    for (auto& p : d.images[k]) p = (rng() % 256) / 255.0;
  }
  return d;
}

TEST(Cmnist, ZeroColorNoiseColorsEveryRowByLabel) {
  ColorShift shift;
  shift.color_noise = {0.0};
  const LabeledDataset d = make_cmnist(synthetic_digits(200, 1), shift, 2);
  EXPECT_EQ(d.dim(), 392);
  for (Index i = 0; i < d.size(); ++i) {
    EXPECT_EQ(d.oracle->color[i], d.targets.labels[i]);
    const Index off = d.oracle->color[i] == 1 ? 0 : 196;
    EXPECT_EQ(d.features.row(i).segment(off, 196).cwiseAbs().sum(), 0.0);
  }
}

TEST(Cmnist, PoolsTwoByTwoIntoTheColorChannel) {
  MnistDigits digits = synthetic_digits(1, 3);
  digits.labels[0] = 7;
  ColorShift shift;
  shift.label_noise = 0.0;
  shift.color_noise = {0.0};
  const LabeledDataset d = make_cmnist(digits, shift, 4);
  const auto& img = digits.images[0];
  EXPECT_EQ(d.targets.labels[0], 0);
  const double expected = (img[2 * 28 * 3 + 2 * 5] + img[2 * 28 * 3 + 2 * 5 + 1] +
                           img[(2 * 3 + 1) * 28 + 2 * 5] + img[(2 * 3 + 1) * 28 + 2 * 5 + 1]) /
                          4.0;
  EXPECT_DOUBLE_EQ(d.features(0, 3 * 14 + 5), expected);
}

TEST(Cmnist, FlipRatesMatchNominal) {
  ColorShift shift;
  shift.color_noise = {0.1, 0.2};
  const LabeledDataset d = make_cmnist(synthetic_digits(50000, 5), shift, 6);
  double label_flips = 0;
  double color_flips = 0;
  for (Index i = 0; i < d.size(); ++i) {
    label_flips += d.targets.labels[i] != d.oracle->clean_label[i];
    color_flips += d.oracle->color[i] != d.targets.labels[i];
  }
  EXPECT_NEAR(label_flips / 50000.0, 0.2, 0.01);
  EXPECT_NEAR(color_flips / 50000.0, 0.15, 0.01);
}

TEST(CmnistBits, NoiselessCeilings) {
  BitsSpec spec;
  spec.noise_sd = 0.0;
  ColorShift train_shift;
  train_shift.color_noise = {0.9};
  const LabeledDataset d = make_cmnist_bits(spec, train_shift, 7);
  double shape_correct = 0;
  double color_correct = 0;
  for (Index i = 0; i < d.size(); ++i) {
    shape_correct += (d.features(i, 0) > 0 ? 1 : 0) == d.targets.labels[i];
    color_correct += (d.features(i, spec.dim_c) > 0 ? 1 : 0) == d.targets.labels[i];
  }
  EXPECT_NEAR(shape_correct / 10000.0, 0.8, 0.01);
  EXPECT_NEAR(color_correct / 10000.0, 0.1, 0.01);
}

TEST(CmnistBits, ChunksFollowColorNoiseList) {
  BitsSpec spec;
  spec.n = 20000;
  ColorShift shift;
  shift.color_noise = {0.05, 0.35};
  const LabeledDataset d = make_cmnist_bits(spec, shift, 8);
  double flips[2] = {0, 0};
  double counts[2] = {0, 0};
  for (Index i = 0; i < d.size(); ++i) {
    const int e = d.oracle->env_id[i];
    counts[e] += 1;
    flips[e] += d.oracle->color[i] != d.targets.labels[i];
  }
  EXPECT_EQ(counts[0], 10000);
  EXPECT_NEAR(flips[0] / counts[0], 0.05, 0.01);
  EXPECT_NEAR(flips[1] / counts[1], 0.35, 0.015);
}

TEST(Generators, AreDeterministic) {
  BitsSpec spec;
  spec.n = 500;
  const ColorShift shift;
  const LabeledDataset a = make_cmnist_bits(spec, shift, 9);
  const LabeledDataset b = make_cmnist_bits(spec, shift, 9);
  const LabeledDataset c = make_cmnist_bits(spec, shift, 10);
  EXPECT_EQ(std::memcmp(a.features.data(), b.features.data(), sizeof(double) * a.features.size()), 0);
  EXPECT_EQ(a.targets.labels, b.targets.labels);
  EXPECT_NE(a.features, c.features);
  const RegressionSemSpec rs;
  const LabeledDataset r1 = make_regression_sem(rs, kRegressionTrain, 11);
  const LabeledDataset r2 = make_regression_sem(rs, kRegressionTrain, 11);
  EXPECT_EQ(r1.features, r2.features);
  EXPECT_EQ(r1.targets.values, r2.targets.values);
  EXPECT_EQ(a.provenance, b.provenance);
}

// Income rows: age, workclass, fnlwgt, education, education-num,
// marital-status, occupation, relationship, race, sex, capital-gain,
// capital-loss, hours-per-week, native-country, income.
std::string adult_row(const std::string& race, const std::string& sex, bool rich, int age = 30,
                      const std::string& workclass = "Private") {
  return std::to_string(age) + ", " + workclass +
         ", 77516, Bachelors, 13, Never-married, Adm-clerical, Not-in-family, " + race + ", " +
         sex + ", 2174, 0, 40, United-States, " + (rich ? ">50K" : "<=50K");
}

fs::path write_adult(const std::string& name, int per_cell) {
  const auto path = temp_path(name);
  std::ofstream out(path);
  int age = 20;
  for (const std::string race : {"White", "Black"}) {
    for (const std::string sex : {"Male", "Female"}) {
      for (int k = 0; k < per_cell; ++k) {
        out << adult_row(race, sex, k % 3 == 0, age++ % 60 + 18, k % 7 == 0 ? "?" : "Private")
            << "\n";
      }
    }
  }
  return path;
}

TEST(Adult, ParsesRowsAndSkipsMalformed) {
  const auto path = temp_path("ednil_adult_small.csv");
  {
    std::ofstream out(path);
    out << adult_row("Black", "Male", true) << "\n";
    out << adult_row("White", "Female", false, 41, "?") << ".\n";
    out << "|1x3 Cross validator\n";
    out << "39, State-gov, 77516\n";
    out << adult_row("Black", "Female", false).substr(0, 2) + "x" +
               adult_row("Black", "Female", false).substr(2)
        << "\n";
  }
  set_log_level(LogLevel::kQuiet);
  const AdultRecords r = load_adult_csv(path);
  set_log_level(LogLevel::kWarning);
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_EQ(r.skipped, 2u);
  EXPECT_EQ(r.rows[0].income, 1);
  EXPECT_EQ(adult_subgroup(r.rows[0]), 2);
  EXPECT_EQ(r.rows[1].fields[1], "?");
  EXPECT_EQ(adult_subgroup(r.rows[1]), 1);
}

TEST(Adult, EncodingOneHotsAndStandardizes) {
  const AdultRecords r = load_adult_csv(write_adult("ednil_adult_enc.csv", 30));
  const AdultEncoding enc = AdultEncoding::fit(r);
  // 6 continuous, workclass {?, Private}, one category each for the other
  // five categorical fields, and one column each for binarized race and sex.
  EXPECT_EQ(enc.dim(), 6 + 2 + 5 + 1 + 1);
  double mean_age = 0;
  for (const auto& row : r.rows) mean_age += enc.encode(row)[0] / static_cast<double>(r.rows.size());
  EXPECT_NEAR(mean_age, 0.0, 1e-12);
}

TEST(Adult, ResamplingHitsTargetsAndKeepsSizes) {
  const AdultRecords r = load_adult_csv(write_adult("ednil_adult_resample.csv", 500));
  const AdultEncoding enc = AdultEncoding::fit(r);
  for (const auto& targets : {kAdultTrain, kAdultInd, kAdultOod}) {
    const LabeledDataset d = resample_adult_confounded(r, enc, targets, 12);
    double pos[4] = {0, 0, 0, 0};
    double cnt[4] = {0, 0, 0, 0};
    for (Index i = 0; i < d.size(); ++i) {
      cnt[d.oracle->subgroup[i]] += 1;
      pos[d.oracle->subgroup[i]] += d.targets.labels[i];
    }
    for (int g = 0; g < 4; ++g) {
      EXPECT_EQ(cnt[g], 500);
      EXPECT_NEAR(pos[g] / cnt[g], targets[g], 0.01);
    }
  }
}

TEST(Adult, SubgroupWithoutPositivesIsAnError) {
  const auto path = temp_path("ednil_adult_nopos.csv");
  {
    std::ofstream out(path);
    for (const std::string race : {"White", "Black"}) {
      for (const std::string sex : {"Male", "Female"}) {
        for (int k = 0; k < 4; ++k) out << adult_row(race, sex, race == "White" && k == 0) << "\n";
      }
    }
  }
  const AdultRecords r = load_adult_csv(path);
  EXPECT_THROW(resample_adult_confounded(r, AdultEncoding::fit(r), kAdultTrain, 1), InputError);
}

// Brute-force definition: a N(0, 1) candidate accepted with probability
// exp(-rate |center - x|).
std::vector<double> rejection_draws(double center, double rate, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> out;
  while (static_cast<int>(out.size()) < n) {
    const double x = normal(rng);
    if (unit(rng) < std::exp(-rate * std::abs(center - x))) out.push_back(x);
  }
  return out;
}

std::pair<double, double> moments(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m += x / static_cast<double>(v.size());
  double s = 0;
  for (double x : v) s += (x - m) * (x - m) / static_cast<double>(v.size() - 1);
  return {m, s};
}

TEST(TiltedNormal, MatchesRejectionSampling) {
  const int n = 40000;
  for (const auto& [center, r] : std::vector<std::pair<double, double>>{
           {0.0, 2.3}, {1.5, 2.3}, {-2.0, 1.1}, {2.5, 2.9}, {0.7, 1.9}}) {
    const double rate = 5.0 * std::log(r);
    Rng rng(13);
    std::vector<double> exact(n);
    for (auto& x : exact) x = sample_tilted_normal(center, rate, rng);
    const auto [m1, v1] = moments(exact);
    const auto [m2, v2] = moments(rejection_draws(center, rate, n, 14));
    const double se = std::sqrt((v1 + v2) / n);
    EXPECT_NEAR(m1, m2, 5 * se) << center << " " << r;
    EXPECT_NEAR(v1 / v2, 1.0, 0.05) << center << " " << r;
  }
}

TEST(TiltedNormal, FarCentersStayFinite) {
  Rng rng(15);
  for (double c : {-12.0, 12.0, 40.0}) {
    const double x = sample_tilted_normal(c, 5.0 * std::log(2.9), rng);
    EXPECT_TRUE(std::isfinite(x));
    EXPECT_GT(x * c, 0.0);
  }
  EXPECT_THROW(sample_tilted_normal(0.0, -1.0, rng), InputError);
}

double correlation(const std::vector<double>& a, const Matrix& b) {
  const Index n = b.rows();
  double ma = 0, mb = 0;
  for (Index i = 0; i < n; ++i) {
    ma += a[i] / n;
    mb += b(i, 0) / n;
  }
  double sab = 0, saa = 0, sbb = 0;
  for (Index i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b(i, 0) - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b(i, 0) - mb) * (b(i, 0) - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

TEST(RegressionSem, CorrelationFollowsR) {
  RegressionSemSpec spec;
  const RegressionEnv strong[] = {{2.3, 3000}};
  const RegressionEnv weak[] = {{-1.1, 3000}};
  const LabeledDataset a = make_regression_sem(spec, strong, 16);
  const LabeledDataset b = make_regression_sem(spec, weak, 17);
  const double ca = correlation(a.targets.values, a.oracle->variant.col(0));
  const double cb = correlation(b.targets.values, b.oracle->variant.col(0));
  EXPECT_GT(ca, 0.5);
  EXPECT_LT(cb, 0.0);
  EXPECT_LT(std::abs(cb), ca);
}

TEST(RegressionSem, RotationIsOrthogonalAndFeaturesAreRotatedLatents) {
  RegressionSemSpec spec;
  const RegressionStructure s = RegressionStructure::create(spec);
  EXPECT_LE((s.rotation.transpose() * s.rotation - Matrix::Identity(10, 10)).cwiseAbs().maxCoeff(),
            1e-10);
  const LabeledDataset d = make_regression_sem(spec, kRegressionTrain, 18);
  Matrix latent(d.size(), 10);
  latent << d.oracle->invariant, d.oracle->variant;
  EXPECT_LE((d.features - latent * s.rotation.transpose()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(d.size(), 1100);
}

TEST(RegressionSem, InvariantMechanismIsSharedAcrossEnvironments) {
  // Least squares of Y on [1, X_c, X_c^2] fit separately per environment.
  RegressionSemSpec spec;
  spec.noise_sd = 0.5;
  const RegressionEnv envs[] = {{2.3, 4000}, {-1.1, 4000}, {-2.9, 4000}};
  const LabeledDataset d = make_regression_sem(spec, envs, 19);
  const RegressionStructure s = RegressionStructure::create(spec);
  std::vector<Eigen::VectorXd> fits;
  for (int e = 0; e < 3; ++e) {
    Eigen::MatrixXd a(4000, 11);
    Eigen::VectorXd b(4000);
    for (Index k = 0; k < 4000; ++k) {
      const Index i = e * 4000 + k;
      a(k, 0) = 1.0;
      for (Index j = 0; j < 5; ++j) {
        a(k, 1 + j) = d.oracle->invariant(i, j);
        a(k, 6 + j) = d.oracle->invariant(i, j) * d.oracle->invariant(i, j);
      }
      b(k) = d.targets.values[i];
    }
    fits.push_back(a.colPivHouseholderQr().solve(b));
  }
  Eigen::VectorXd truth(10);
  truth << s.theta_linear.col(0), s.theta_square.col(0);
  for (const auto& f : fits) {
    EXPECT_LE((f.tail(10) - truth).norm() / truth.norm(), 0.1);
    EXPECT_LE((f.tail(10) - fits[0].tail(10)).norm() / fits[0].tail(10).norm(), 0.1);
  }
}

TEST(RegressionSem, RejectsWeakR) {
  const RegressionEnv bad[] = {{0.5, 10}};
  EXPECT_THROW(make_regression_sem(RegressionSemSpec{}, bad, 1), ConfigError);
}

TEST(SplitValidation, SizesDisjointDeterministic) {
  BitsSpec spec;
  spec.n = 1000;
  LabeledDataset d = make_cmnist_bits(spec, ColorShift{}, 20);
  for (Index i = 0; i < d.size(); ++i) d.features(i, 0) = static_cast<double>(i);
  const auto [train, val] = split_validation(d, 0.1, 21);
  EXPECT_EQ(val.size(), 100);
  EXPECT_EQ(train.size(), 900);
  std::vector<int> seen(1000, 0);
  for (Index i = 0; i < train.size(); ++i) ++seen[static_cast<int>(train.features(i, 0))];
  for (Index i = 0; i < val.size(); ++i) ++seen[static_cast<int>(val.features(i, 0))];
  EXPECT_EQ(seen, std::vector<int>(1000, 1));
  const auto again = split_validation(d, 0.1, 21);
  EXPECT_EQ(again.second.features, val.features);
  EXPECT_THROW(split_validation(d, 1.0, 1), ConfigError);
}

TEST(Container, RoundTripPreservesEverything) {
  const LabeledDataset d = make_regression_sem(RegressionSemSpec{}, kRegressionTrain, 22);
  const auto path = temp_path("ednil_container.ds");
  save_dataset(path, d);
  const LabeledDataset e = load_dataset(path);
  EXPECT_EQ(e.name, d.name);
  EXPECT_EQ(e.features, d.features);
  EXPECT_EQ(e.targets.values, d.targets.values);
  EXPECT_EQ(e.provenance, d.provenance);
  ASSERT_TRUE(e.oracle);
  EXPECT_EQ(e.oracle->variant, d.oracle->variant);
  EXPECT_EQ(e.oracle->env_id, d.oracle->env_id);

  BitsSpec spec;
  spec.n = 50;
  const LabeledDataset b = make_cmnist_bits(spec, ColorShift{}, 23);
  save_dataset(path, b);
  const LabeledDataset c = load_dataset(path);
  EXPECT_EQ(c.targets.labels, b.targets.labels);
  EXPECT_EQ(c.oracle->color, b.oracle->color);

  fs::resize_file(path, fs::file_size(path) - 8);
  EXPECT_THROW(load_dataset(path), FormatError);
}

TEST(LabeledDataset, ValidateCatchesRowMismatch) {
  LabeledDataset d;
  d.name = "bad";
  d.features = Matrix::Zero(3, 2);
  d.targets = Targets::classes({0, 1}, 2);
  EXPECT_THROW(d.validate(), DimensionError);
}

}  // namespace
}  // namespace ednil
