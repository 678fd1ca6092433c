#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <json.hpp>

#include "ednil/tensor.hpp"

namespace ednil {

// Layer sizes of a rectifier MLP. Hidden layers use ReLU; the output layer
// is affine unless activate_output is set (used for encoders).
struct MlpSpec {
  Index input_dim = 1;
  std::vector<Index> hidden;
  Index output_dim = 1;
  bool activate_output = false;
  // Weights start uniform in +-init_scale * sqrt(6 / fan_in).
  double init_scale = 1.0;

  void validate() const;
  // sum over layers of (fan_in + 1) * fan_out
  Index parameter_count() const;
  // input, hidden..., output
  std::vector<Index> layer_dims() const;
  double init_bound(Index fan_in) const;
};

void to_json(nlohmann::json& j, const MlpSpec& spec);
void from_json(const nlohmann::json& j, MlpSpec& spec);

struct Linear {
  ad::Tensor weight;  // fan_in x fan_out
  ad::Tensor bias;    // 1 x fan_out
};

// Copies are deep: each copy owns its parameters.
class Mlp {
 public:
  Mlp() = default;
  Mlp(MlpSpec spec, std::uint64_t seed);

  Mlp(const Mlp& other);
  Mlp& operator=(const Mlp& other);
  Mlp(Mlp&&) noexcept = default;
  Mlp& operator=(Mlp&&) noexcept = default;

  ad::Tensor forward(const ad::Tensor& x) const;
  std::vector<ad::Tensor> parameters() const;
  const MlpSpec& spec() const noexcept { return spec_; }
  std::vector<Linear>& layers() noexcept { return layers_; }
  const std::vector<Linear>& layers() const noexcept { return layers_; }
  void set_zero();

 private:
  MlpSpec spec_;
  std::vector<Linear> layers_;
};

// Fresh parameters for spec, deterministic in seed.
Mlp init_params(const MlpSpec& spec, std::uint64_t seed);

struct EIModelSpec {
  MlpSpec trunk;      // Psi; typically activate_output = true
  MlpSpec head;       // input_dim must equal trunk.output_dim
  int num_envs = 2;
  double temperature = 0.1;
  // Init scale for heads 1..K-1. Near zero, they predict close to uniform,
  // so after pre-training head 0 the first partition follows its errors.
  double fresh_head_scale = 0.01;

  void validate() const;
};

// Environment-inference network: shared trunk Psi and one head per
// environment.
struct EIModel {
  Mlp trunk;
  std::vector<Mlp> heads;
  double temperature = 0.1;

  static EIModel create(const EIModelSpec& spec, std::uint64_t seed);

  int num_envs() const noexcept { return static_cast<int>(heads.size()); }
  std::vector<ad::Tensor> parameters() const;
  void validate() const;
};

// Psi evaluated once, then every head on its output.
std::vector<ad::Tensor> ei_forward(const EIModel& model, const ad::Tensor& x);

// Invariant predictor Phi composed with the dummy multiplier w. w is a
// gradient-tracking 1 x 1 leaf held at 1.0; it is never handed to an
// optimizer.
class ILModel {
 public:
  ILModel() = default;
  ILModel(MlpSpec spec, std::uint64_t seed);

  ILModel(const ILModel& other);
  ILModel& operator=(const ILModel& other);
  ILModel(ILModel&&) noexcept = default;
  ILModel& operator=(ILModel&&) noexcept = default;

  Mlp& phi() noexcept { return phi_; }
  const Mlp& phi() const noexcept { return phi_; }
  const ad::Tensor& multiplier() const noexcept { return multiplier_; }
  // Parameters of Phi only.
  std::vector<ad::Tensor> parameters() const { return phi_.parameters(); }

 private:
  Mlp phi_;
  ad::Tensor multiplier_ = ad::Tensor::parameter(Matrix::Ones(1, 1));
};

// w * Phi(x)
ad::Tensor il_forward(const ILModel& model, const ad::Tensor& x);

// ---- checkpoints ---------------------------------------------------------

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::optional<EIModel> ei;
  std::optional<ILModel> il;
};

// Binary layout: "EDNILCKP", u32 version, u64 header length, JSON header
// (specs + meta), then every parameter as little-endian float64, models in
// header order, layers in order, weight (row-major) before bias.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace ednil
