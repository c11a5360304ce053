// Copyright 2026 The wpod-edge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "wpod/config.hpp"
#include "wpod/ops.hpp"
#include "wpod/optim.hpp"
#include "wpod/tensor.hpp"

namespace wpod::net {

enum class Variant { kBaseline, kEdgeAugmented };

/// Which Sobel channels are fused with the RGB input.
enum class EdgeChannels { kAll, kMagnitudeOnly };

inline constexpr std::size_t kStride = 16;
inline constexpr std::size_t kGridChannels = 8;

struct NetworkConfig {
  Variant variant = Variant::kEdgeAugmented;
  std::size_t input_height = 128;
  std::size_t input_width = 128;
  std::size_t base_channels = 16;
  std::size_t blocks_per_stage = 2;
  std::size_t head_convs = 1;
  bool use_batchnorm = true;
  double detection_threshold = 0.5;
  double nms_threshold = 0.1;
  double alpha = 7.75;
  bool presmooth = false;
  EdgeChannels edge_channels = EdgeChannels::kAll;

  /// Throws ConfigError.
  void validate() const;

  std::size_t grid_rows() const { return input_height / kStride; }
  std::size_t grid_cols() const { return input_width / kStride; }
  std::size_t input_channels() const;

  /// Keys under the `net.` prefix.
  KeyValueConfig to_config() const;
  static NetworkConfig from_config(const KeyValueConfig& cfg);

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view s);

/// B x M x N x 8 raw network output. Channels 0-1 are object / non-object
/// logits, channels 2-7 are the affine parameters v3..v8.
struct FeatureGrid {
  nn::Tensor values;

  std::size_t batch() const { return values.dim(0); }
  std::size_t rows() const { return values.dim(1); }
  std::size_t cols() const { return values.dim(2); }
  std::span<const double> cell(std::size_t b, std::size_t m, std::size_t n) const {
    return values.data().subspan(((b * rows() + m) * cols() + n) * kGridChannels, kGridChannels);
  }
};

struct ParameterCounts {
  std::size_t trainable = 0;
  std::size_t frozen = 0;
};

class Model {
 public:
  /// Deterministic fan-in scaled normal initialization from seed.
  Model(const NetworkConfig& config, std::uint64_t seed);

  Model(Model&&) = default;
  Model& operator=(Model&&) = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const NetworkConfig& config() const { return config_; }

  /// images: B x H x W x 3. Train mode updates batch-norm running statistics
  /// and records the graph; infer mode does neither.
  FeatureGrid forward(const nn::Tensor& images, nn::Mode mode);
  /// forward(images, kInfer); reads parameters only, so concurrent calls on
  /// one model are safe.
  FeatureGrid infer(const nn::Tensor& images) const;

  std::span<nn::Parameter> parameters() { return params_; }
  std::span<const nn::Parameter> parameters() const { return params_; }
  nn::Parameter* find(std::string_view name);
  const nn::Parameter* find(std::string_view name) const;

  ParameterCounts count_parameters() const;

  std::uint64_t training_step() const { return training_step_; }
  void set_training_step(std::uint64_t s) { training_step_ = s; }

 private:
  struct ConvBlock {
    std::size_t kernel, bias, gamma, beta, running_mean, running_var;  // indices into params_
    bool has_bias, has_bn;
  };

  std::size_t add_param(std::string name, nn::Tensor value, bool trainable);
  ConvBlock add_conv_block(const std::string& prefix, std::size_t k, std::size_t in_c,
                           std::size_t out_c, bool batchnorm, std::mt19937_64& rng);
  nn::Tensor apply_block(const ConvBlock& block, const nn::Tensor& x, nn::Mode mode, bool activate);
  nn::Tensor edge_input(const nn::Tensor& images);

  NetworkConfig config_;
  std::vector<nn::Parameter> params_;
  std::vector<std::vector<ConvBlock>> stages_;
  std::vector<ConvBlock> head_;
  ConvBlock out_{};
  std::size_t sobel_x_ = 0, sobel_y_ = 0;
  std::uint64_t training_step_ = 0;
};

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { kIo, kFormat, kVersion, kShape, kTruncated };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Model& model, const std::filesystem::path& path,
                     bool include_adam_state = true);

/// Rebuilds the model from the embedded config.
Model load_checkpoint(const std::filesystem::path& path);

/// Loads into a model built from `expected`; any name or shape disagreement
/// raises CheckpointError::Kind::kShape.
Model load_checkpoint(const std::filesystem::path& path, const NetworkConfig& expected);

}  // namespace wpod::net
