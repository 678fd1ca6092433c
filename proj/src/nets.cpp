#include "ednil/nets.hpp"

#include <cmath>
#include <fstream>
#include <string>

#include "ednil/binary_io.hpp"
#include "ednil/errors.hpp"
#include "ednil/random.hpp"

namespace ednil {

namespace {

constexpr char kCheckpointMagic[8] = {'E', 'D', 'N', 'I', 'L', 'C', 'K', 'P'};
constexpr std::uint32_t kCheckpointVersion = 1;

Linear copy_layer(const Linear& layer) {
  return {ad::Tensor::parameter(layer.weight.value()), ad::Tensor::parameter(layer.bias.value())};
}

}  // namespace

void MlpSpec::validate() const {
  if (input_dim <= 0 || output_dim <= 0) throw ConfigError("MLP dimensions must be positive");
  for (Index h : hidden) {
    if (h <= 0) throw ConfigError("MLP hidden widths must be positive");
  }
  if (!(init_scale >= 0.0)) throw ConfigError("init_scale must be non-negative");
}

std::vector<Index> MlpSpec::layer_dims() const {
  std::vector<Index> dims{input_dim};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(output_dim);
  return dims;
}

Index MlpSpec::parameter_count() const {
  const auto dims = layer_dims();
  Index total = 0;
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) total += (dims[k] + 1) * dims[k + 1];
  return total;
}

double MlpSpec::init_bound(Index fan_in) const {
  return init_scale * std::sqrt(6.0 / static_cast<double>(fan_in));
}

void to_json(nlohmann::json& j, const MlpSpec& spec) {
  j = nlohmann::json{{"input_dim", spec.input_dim},
                     {"hidden", spec.hidden},
                     {"output_dim", spec.output_dim},
                     {"activate_output", spec.activate_output},
                     {"init_scale", spec.init_scale}};
}

void from_json(const nlohmann::json& j, MlpSpec& spec) {
  spec.input_dim = j.at("input_dim").get<Index>();
  spec.hidden = j.at("hidden").get<std::vector<Index>>();
  spec.output_dim = j.at("output_dim").get<Index>();
  spec.activate_output = j.at("activate_output").get<bool>();
  spec.init_scale = j.at("init_scale").get<double>();
}

Mlp::Mlp(MlpSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  Rng rng(seed);
  const auto dims = spec_.layer_dims();
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    const double bound = spec_.init_bound(dims[k]);
    std::uniform_real_distribution<double> uniform(-bound, bound);
    Matrix w(dims[k], dims[k + 1]);
    for (Index i = 0; i < w.rows(); ++i) {
      for (Index j = 0; j < w.cols(); ++j) w(i, j) = bound > 0.0 ? uniform(rng) : 0.0;
    }
    layers_.push_back(
        {ad::Tensor::parameter(std::move(w)), ad::Tensor::parameter(Matrix::Zero(1, dims[k + 1]))});
  }
}

Mlp::Mlp(const Mlp& other) : spec_(other.spec_) {
  for (const auto& layer : other.layers_) layers_.push_back(copy_layer(layer));
}

Mlp& Mlp::operator=(const Mlp& other) {
  if (this != &other) {
    Mlp copy(other);
    *this = std::move(copy);
  }
  return *this;
}

ad::Tensor Mlp::forward(const ad::Tensor& x) const {
  if (x.cols() != spec_.input_dim) {
    throw DimensionError("MLP expects " + std::to_string(spec_.input_dim) +
                         " input features, got " + std::to_string(x.cols()));
  }
  ad::Tensor h = x;
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    h = ad::matmul(h, layers_[k].weight) + layers_[k].bias;
    const bool last = k + 1 == layers_.size();
    if (!last || spec_.activate_output) h = ad::relu(h);
  }
  return h;
}

std::vector<ad::Tensor> Mlp::parameters() const {
  std::vector<ad::Tensor> params;
  for (const auto& layer : layers_) {
    params.push_back(layer.weight);
    params.push_back(layer.bias);
  }
  return params;
}

void Mlp::set_zero() {
  for (auto& layer : layers_) {
    layer.weight.mutable_value().setZero();
    layer.bias.mutable_value().setZero();
  }
}

Mlp init_params(const MlpSpec& spec, std::uint64_t seed) { return Mlp(spec, seed); }

void EIModelSpec::validate() const {
  trunk.validate();
  head.validate();
  if (head.input_dim != trunk.output_dim) {
    throw ConfigError("head input width " + std::to_string(head.input_dim) +
                      " differs from trunk output width " + std::to_string(trunk.output_dim));
  }
  if (num_envs < 2) throw ConfigError("environment inference needs at least 2 environments");
  if (!(temperature > 0.0)) throw ConfigError("posterior temperature must be positive");
  if (!(fresh_head_scale >= 0.0)) throw ConfigError("fresh_head_scale must be non-negative");
}

EIModel EIModel::create(const EIModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  EIModel model;
  model.trunk = Mlp(spec.trunk, derive_seed(seed, 0));
  MlpSpec fresh = spec.head;
  fresh.init_scale = spec.fresh_head_scale;
  for (int e = 0; e < spec.num_envs; ++e) {
    model.heads.emplace_back(e == 0 ? spec.head : fresh,
                             derive_seed(seed, 1 + static_cast<std::uint64_t>(e)));
  }
  model.temperature = spec.temperature;
  return model;
}

std::vector<ad::Tensor> EIModel::parameters() const {
  auto params = trunk.parameters();
  for (const auto& head : heads) {
    auto hp = head.parameters();
    params.insert(params.end(), hp.begin(), hp.end());
  }
  return params;
}

void EIModel::validate() const {
  if (heads.size() < 2) throw ConfigError("environment inference needs at least 2 heads");
  if (!(temperature > 0.0)) throw ConfigError("posterior temperature must be positive");
  for (const auto& head : heads) {
    if (head.spec().input_dim != trunk.spec().output_dim) {
      throw ConfigError("every head must read the trunk output");
    }
  }
}

std::vector<ad::Tensor> ei_forward(const EIModel& model, const ad::Tensor& x) {
  const ad::Tensor features = model.trunk.forward(x);
  std::vector<ad::Tensor> outputs;
  outputs.reserve(model.heads.size());
  for (const auto& head : model.heads) outputs.push_back(head.forward(features));
  return outputs;
}

ILModel::ILModel(MlpSpec spec, std::uint64_t seed) : phi_(std::move(spec), seed) {}

ILModel::ILModel(const ILModel& other)
    : phi_(other.phi_), multiplier_(ad::Tensor::parameter(Matrix::Ones(1, 1))) {}

ILModel& ILModel::operator=(const ILModel& other) {
  if (this != &other) {
    phi_ = other.phi_;
    multiplier_ = ad::Tensor::parameter(Matrix::Ones(1, 1));
  }
  return *this;
}

ad::Tensor il_forward(const ILModel& model, const ad::Tensor& x) {
  return model.phi().forward(x) * model.multiplier();
}

// ---- checkpoints ---------------------------------------------------------

namespace {

void write_mlp(std::ostream& out, const Mlp& mlp) {
  for (const auto& layer : mlp.layers()) {
    const Matrix& w = layer.weight.value();
    for (Index i = 0; i < w.size(); ++i) io::write_f64(out, w.data()[i]);
    const Matrix& b = layer.bias.value();
    for (Index i = 0; i < b.size(); ++i) io::write_f64(out, b.data()[i]);
  }
}

void read_mlp(io::Reader& in, Mlp& mlp) {
  for (auto& layer : mlp.layers()) {
    Matrix& w = layer.weight.mutable_value();
    for (Index i = 0; i < w.size(); ++i) w.data()[i] = in.f64("weights");
    Matrix& b = layer.bias.mutable_value();
    for (Index i = 0; i < b.size(); ++i) b.data()[i] = in.f64("biases");
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  nlohmann::json header;
  header["meta"] = checkpoint.meta;
  if (checkpoint.ei) {
    header["ei"] = {{"trunk", checkpoint.ei->trunk.spec()},
                    {"head", checkpoint.ei->heads.front().spec()},
                    {"num_envs", checkpoint.ei->num_envs()},
                    {"temperature", checkpoint.ei->temperature}};
  }
  if (checkpoint.il) header["il"] = {{"phi", checkpoint.il->phi().spec()}};
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  io::write_u32(out, kCheckpointVersion);
  io::write_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (checkpoint.ei) {
    write_mlp(out, checkpoint.ei->trunk);
    for (const auto& head : checkpoint.ei->heads) write_mlp(out, head);
  }
  if (checkpoint.il) write_mlp(out, checkpoint.il->phi());
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("cannot open checkpoint " + path.string());
  io::Reader in(file);
  const std::string magic = in.string(sizeof(kCheckpointMagic), "magic");
  if (magic != std::string(kCheckpointMagic, sizeof(kCheckpointMagic))) {
    throw FormatError("not an EDNIL checkpoint", 0);
  }
  if (const auto version = in.u32("version"); version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 8);
  }
  const auto header_len = in.u64("header length");
  const auto header_offset = in.offset();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.string(header_len, "header"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint header: ") + e.what(), header_offset);
  }

  Checkpoint checkpoint;
  checkpoint.meta = header.value("meta", nlohmann::json::object());
  if (header.contains("ei")) {
    const auto& ei = header["ei"];
    EIModelSpec spec;
    spec.trunk = ei.at("trunk").get<MlpSpec>();
    spec.head = ei.at("head").get<MlpSpec>();
    spec.num_envs = ei.at("num_envs").get<int>();
    spec.temperature = ei.at("temperature").get<double>();
    checkpoint.ei = EIModel::create(spec, 0);
    read_mlp(in, checkpoint.ei->trunk);
    for (auto& head : checkpoint.ei->heads) read_mlp(in, head);
  }
  if (header.contains("il")) {
    checkpoint.il = ILModel(header["il"].at("phi").get<MlpSpec>(), 0);
    read_mlp(in, checkpoint.il->phi());
  }
  return checkpoint;
}

}  // namespace ednil
