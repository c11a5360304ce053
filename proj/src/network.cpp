// Copyright 2026 The wpod-edge Authors
// SPDX-License-Identifier: Apache-2.0

#include "wpod/network.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>

#include "wpod/edge_layer.hpp"

namespace wpod::net {
namespace {

constexpr char kMagic[4] = {'W', 'P', 'L', 'T'};

std::string_view edge_channels_name(EdgeChannels e) {
  return e == EdgeChannels::kAll ? "all" : "magnitude";
}

}  // namespace

std::string_view to_string(Variant v) {
  return v == Variant::kBaseline ? "baseline" : "edge_augmented";
}

Variant parse_variant(std::string_view s) {
  if (s == "baseline") return Variant::kBaseline;
  if (s == "edge_augmented" || s == "edge") return Variant::kEdgeAugmented;
  throw ConfigError("unknown network variant '" + std::string(s) + "'");
}

void NetworkConfig::validate() const {
  if (input_height == 0 || input_width == 0 || input_height % kStride != 0 ||
      input_width % kStride != 0) {
    throw ConfigError("input size " + std::to_string(input_height) + "x" +
                      std::to_string(input_width) + " must be positive multiples of " +
                      std::to_string(kStride));
  }
  if (base_channels == 0) throw ConfigError("base_channels must be positive");
  if (blocks_per_stage == 0) throw ConfigError("blocks_per_stage must be positive");
  if (!(detection_threshold > 0.0 && detection_threshold < 1.0)) {
    throw ConfigError("detection_threshold must lie in (0, 1)");
  }
  if (!(nms_threshold >= 0.0 && nms_threshold <= 1.0)) {
    throw ConfigError("nms_threshold must lie in [0, 1]");
  }
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be positive");
}

std::size_t NetworkConfig::input_channels() const {
  if (variant == Variant::kBaseline) return 3;
  return edge_channels == EdgeChannels::kAll ? 6 : 4;
}

KeyValueConfig NetworkConfig::to_config() const {
  KeyValueConfig c;
  c.set("net.variant", std::string(to_string(variant)));
  c.set("net.input_height", static_cast<std::int64_t>(input_height));
  c.set("net.input_width", static_cast<std::int64_t>(input_width));
  c.set("net.stride", static_cast<std::int64_t>(kStride));
  c.set("net.base_channels", static_cast<std::int64_t>(base_channels));
  c.set("net.blocks_per_stage", static_cast<std::int64_t>(blocks_per_stage));
  c.set("net.head_convs", static_cast<std::int64_t>(head_convs));
  c.set("net.use_batchnorm", use_batchnorm);
  c.set("net.detection_threshold", detection_threshold);
  c.set("net.nms_threshold", nms_threshold);
  c.set("net.alpha", alpha);
  c.set("net.presmooth", presmooth);
  c.set("net.edge_channels", std::string(edge_channels_name(edge_channels)));
  return c;
}

NetworkConfig NetworkConfig::from_config(const KeyValueConfig& c) {
  auto positive = [&](const char* key, std::size_t fallback) {
    const auto v = c.get_int(key, static_cast<std::int64_t>(fallback));
    if (v < 0) throw ConfigError(std::string(key) + " must be non-negative");
    return static_cast<std::size_t>(v);
  };
  NetworkConfig n;
  n.variant = parse_variant(c.get_string("net.variant", std::string(to_string(n.variant))));
  n.input_height = positive("net.input_height", n.input_height);
  n.input_width = positive("net.input_width", n.input_width);
  if (c.get_int("net.stride", kStride) != static_cast<std::int64_t>(kStride)) {
    throw ConfigError("net.stride is fixed at 16 (four 2x2 max-pool stages)");
  }
  n.base_channels = positive("net.base_channels", n.base_channels);
  n.blocks_per_stage = positive("net.blocks_per_stage", n.blocks_per_stage);
  n.head_convs = positive("net.head_convs", n.head_convs);
  n.use_batchnorm = c.get_bool("net.use_batchnorm", n.use_batchnorm);
  n.detection_threshold = c.get_double("net.detection_threshold", n.detection_threshold);
  n.nms_threshold = c.get_double("net.nms_threshold", n.nms_threshold);
  n.alpha = c.get_double("net.alpha", n.alpha);
  n.presmooth = c.get_bool("net.presmooth", n.presmooth);
  const auto edges = c.get_string("net.edge_channels", "all");
  if (edges == "all") {
    n.edge_channels = EdgeChannels::kAll;
  } else if (edges == "magnitude") {
    n.edge_channels = EdgeChannels::kMagnitudeOnly;
  } else {
    throw ConfigError("net.edge_channels must be 'all' or 'magnitude'");
  }
  n.validate();
  return n;
}

Model::Model(const NetworkConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  if (config_.variant == Variant::kEdgeAugmented) {
    sobel_x_ = add_param("edge.sobel_x", edge::SobelKernels::gx_tensor(), false);
    sobel_y_ = add_param("edge.sobel_y", edge::SobelKernels::gy_tensor(), false);
  }
  std::size_t in_c = config_.input_channels();
  std::size_t out_c = config_.base_channels;
  for (std::size_t s = 0; s < 4; ++s) {
    std::vector<ConvBlock> stage;
    for (std::size_t b = 0; b < config_.blocks_per_stage; ++b) {
      const std::string prefix =
          "stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
      stage.push_back(add_conv_block(prefix, 3, in_c, out_c, config_.use_batchnorm, rng));
      in_c = out_c;
    }
    stages_.push_back(std::move(stage));
    if (s < 3) out_c *= 2;
  }
  for (std::size_t h = 0; h < config_.head_convs; ++h) {
    head_.push_back(add_conv_block("head.block" + std::to_string(h + 1), 3, in_c, in_c,
                                   config_.use_batchnorm, rng));
  }
  out_ = add_conv_block("head.out", 1, in_c, kGridChannels, false, rng);
}

std::size_t Model::add_param(std::string name, nn::Tensor value, bool trainable) {
  params_.emplace_back(std::move(name), std::move(value), trainable);
  return params_.size() - 1;
}

Model::ConvBlock Model::add_conv_block(const std::string& prefix, std::size_t k,
                                       std::size_t in_c, std::size_t out_c, bool batchnorm,
                                       std::mt19937_64& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(k * k * in_c));
  std::normal_distribution<double> normal(0.0, stddev);
  std::vector<double> w(k * k * in_c * out_c);
  for (auto& v : w) v = normal(rng);

  ConvBlock block{};
  block.kernel = add_param(prefix + ".kernel", nn::Tensor({k, k, in_c, out_c}, std::move(w)), true);
  block.has_bn = batchnorm;
  // A bias ahead of batch norm would be cancelled by the mean subtraction.
  block.has_bias = !batchnorm;
  if (block.has_bias) block.bias = add_param(prefix + ".bias", nn::Tensor({out_c}, 0.0), true);
  if (batchnorm) {
    block.gamma = add_param(prefix + ".bn.gamma", nn::Tensor({out_c}, 1.0), true);
    block.beta = add_param(prefix + ".bn.beta", nn::Tensor({out_c}, 0.0), true);
    block.running_mean = add_param(prefix + ".bn.running_mean", nn::Tensor({out_c}, 0.0), false);
    block.running_var = add_param(prefix + ".bn.running_var", nn::Tensor({out_c}, 1.0), false);
  }
  return block;
}

nn::Tensor Model::apply_block(const ConvBlock& block, const nn::Tensor& x, nn::Mode mode,
                              bool activate) {
  auto y = nn::conv2d(x, params_[block.kernel].value,
                      block.has_bias ? params_[block.bias].value : nn::Tensor(), 1,
                      nn::Padding::kSame);
  if (block.has_bn) {
    y = nn::batchnorm(y, params_[block.gamma].value, params_[block.beta].value,
                      params_[block.running_mean].value, params_[block.running_var].value, mode);
  }
  return activate ? nn::relu(y) : y;
}

nn::Tensor Model::edge_input(const nn::Tensor& images) {
  auto gray = edge::gaussian_presmooth(edge::rgb_to_gray(images), config_.presmooth);
  auto edges = edge::sobel_features(gray, params_[sobel_x_].value, params_[sobel_y_].value);
  if (config_.edge_channels == EdgeChannels::kMagnitudeOnly) {
    // Keep channel 2 only: a fixed 1x1 selection.
    static const nn::Tensor pick({1, 1, 3, 1}, std::vector<double>{0.0, 0.0, 1.0});
    edges = nn::conv2d(edges, pick, nn::Tensor(), 1, nn::Padding::kValid);
  }
  return nn::concat_channels(images, edges);
}

FeatureGrid Model::infer(const nn::Tensor& images) const {
  // Infer mode neither records a graph nor touches running statistics.
  return const_cast<Model*>(this)->forward(images, nn::Mode::kInfer);
}

FeatureGrid Model::forward(const nn::Tensor& images, nn::Mode mode) {
  if (images.rank() != 4 || images.dim(1) != config_.input_height ||
      images.dim(2) != config_.input_width || images.dim(3) != 3) {
    throw nn::ShapeError("model expects B x " + std::to_string(config_.input_height) + " x " +
                         std::to_string(config_.input_width) + " x 3 images, got " +
                         nn::to_string(images.shape()));
  }
  std::optional<nn::NoGradGuard> no_grad;
  if (mode == nn::Mode::kInfer) no_grad.emplace();

  nn::Tensor x = config_.variant == Variant::kEdgeAugmented ? edge_input(images) : images;
  for (const auto& stage : stages_) {
    for (const auto& block : stage) x = apply_block(block, x, mode, true);
    x = nn::maxpool2d(x);
  }
  for (const auto& block : head_) x = apply_block(block, x, mode, true);
  return FeatureGrid{apply_block(out_, x, mode, false)};
}

nn::Parameter* Model::find(std::string_view name) {
  for (auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

const nn::Parameter* Model::find(std::string_view name) const {
  return const_cast<Model*>(this)->find(name);
}

ParameterCounts Model::count_parameters() const {
  ParameterCounts c;
  for (const auto& p : params_) (p.trainable ? c.trainable : c.frozen) += p.value.size();
  return c;
}

// --- checkpoint I/O ---------------------------------------------------------

namespace {

template <typename T>
void put(std::ostream& out, T v) {
  if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
    auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    out.write(bytes.data(), bytes.size());
  } else {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
}

void put_f64(std::ostream& out, double v) { put(out, std::bit_cast<std::uint64_t>(v)); }

void put_string(std::ostream& out, const std::string& s) {
  put(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  template <typename T>
  T get() {
    std::array<char, sizeof(T)> bytes;
    read(bytes.data(), bytes.size());
    if constexpr (std::endian::native == std::endian::big && sizeof(T) > 1) {
      std::reverse(bytes.begin(), bytes.end());
    }
    return std::bit_cast<T>(bytes);
  }
  double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
  std::string get_string(std::size_t limit) {
    const auto n = get<std::uint32_t>();
    if (n > limit) throw CheckpointError(CheckpointError::Kind::kFormat, "oversized string field");
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  void read(char* dst, std::size_t n) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw CheckpointError(CheckpointError::Kind::kTruncated, "checkpoint file is truncated");
    }
  }

 private:
  std::istream& in_;
};

struct Record {
  bool trainable = false;
  nn::Shape shape;
  std::vector<double> data;
  std::vector<double> adam_m, adam_v;
};

struct CheckpointContents {
  NetworkConfig config;
  std::uint64_t step = 0;
  std::vector<std::string> order;
  std::map<std::string, Record> records;
  bool has_adam = false;
};

CheckpointContents read_contents(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::kIo, "cannot open " + path.string());
  Reader r(in);
  char magic[4];
  r.read(magic, 4);
  if (!std::equal(magic, magic + 4, kMagic)) {
    throw CheckpointError(CheckpointError::Kind::kFormat, path.string() + " is not a checkpoint");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointError::Kind::kVersion,
                          "checkpoint version " + std::to_string(version) + ", expected " +
                              std::to_string(kCheckpointVersion));
  }
  CheckpointContents c;
  try {
    c.config = NetworkConfig::from_config(KeyValueConfig::parse(r.get_string(1 << 20)));
  } catch (const ConfigError& e) {
    throw CheckpointError(CheckpointError::Kind::kFormat,
                          std::string("embedded config invalid: ") + e.what());
  }
  c.step = r.get<std::uint64_t>();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.get_string(4096);
    Record rec;
    rec.trainable = r.get<std::uint8_t>() != 0;
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw CheckpointError(CheckpointError::Kind::kFormat, "implausible rank");
    for (std::uint32_t d = 0; d < rank; ++d) rec.shape.push_back(r.get<std::uint32_t>());
    const std::size_t n = nn::num_elements(rec.shape);
    if (n > (std::size_t{1} << 32)) {
      throw CheckpointError(CheckpointError::Kind::kFormat, "implausible parameter size");
    }
    rec.data.resize(n);
    for (auto& v : rec.data) v = r.get_f64();
    if (!c.records.emplace(name, std::move(rec)).second) {
      throw CheckpointError(CheckpointError::Kind::kShape, "duplicate parameter " + name);
    }
    c.order.push_back(std::move(name));
  }
  c.has_adam = r.get<std::uint8_t>() != 0;
  if (c.has_adam) {
    for (const auto& name : c.order) {
      auto& rec = c.records[name];
      rec.adam_m.resize(rec.data.size());
      rec.adam_v.resize(rec.data.size());
      for (auto& v : rec.adam_m) v = r.get_f64();
      for (auto& v : rec.adam_v) v = r.get_f64();
    }
  }
  return c;
}

Model restore(const CheckpointContents& c, const NetworkConfig& config) {
  Model model(config, 0);
  std::set<std::string> used;
  for (auto& p : model.parameters()) {
    const auto it = c.records.find(p.name);
    if (it == c.records.end()) {
      throw CheckpointError(CheckpointError::Kind::kShape, "checkpoint lacks parameter " + p.name);
    }
    const Record& rec = it->second;
    if (rec.shape != p.value.shape()) {
      throw CheckpointError(CheckpointError::Kind::kShape,
                            "parameter " + p.name + " has shape " + nn::to_string(rec.shape) +
                                " in checkpoint, model expects " +
                                nn::to_string(p.value.shape()));
    }
    std::copy(rec.data.begin(), rec.data.end(), p.value.mutable_data().begin());
    if (c.has_adam) {
      std::copy(rec.adam_m.begin(), rec.adam_m.end(), p.adam_m.mutable_data().begin());
      std::copy(rec.adam_v.begin(), rec.adam_v.end(), p.adam_v.mutable_data().begin());
    }
    used.insert(p.name);
  }
  for (const auto& name : c.order) {
    if (!used.count(name)) {
      throw CheckpointError(CheckpointError::Kind::kShape,
                            "checkpoint parameter " + name + " does not exist in this model");
    }
  }
  model.set_training_step(c.step);
  return model;
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path,
                     bool include_adam_state) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(CheckpointError::Kind::kIo, "cannot write " + path.string());
  out.write(kMagic, 4);
  put(out, kCheckpointVersion);
  put_string(out, model.config().to_config().to_text());
  put(out, model.training_step());
  const auto params = model.parameters();
  put(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_string(out, p.name);
    put(out, static_cast<std::uint8_t>(p.trainable ? 1 : 0));
    put(out, static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape()) put(out, static_cast<std::uint32_t>(d));
    for (double v : p.value.data()) put_f64(out, v);
  }
  put(out, static_cast<std::uint8_t>(include_adam_state ? 1 : 0));
  if (include_adam_state) {
    for (const auto& p : params) {
      for (double v : p.adam_m.data()) put_f64(out, v);
      for (double v : p.adam_v.data()) put_f64(out, v);
    }
  }
  if (!out) throw CheckpointError(CheckpointError::Kind::kIo, "write failed for " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  const auto contents = read_contents(path);
  return restore(contents, contents.config);
}

Model load_checkpoint(const std::filesystem::path& path, const NetworkConfig& expected) {
  return restore(read_contents(path), expected);
}

}  // namespace wpod::net
