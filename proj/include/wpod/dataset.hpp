// Copyright 2026 The wpod-edge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Image files, annotation files, synthetic scenes, augmentation and batching.
//
// Annotation format, one plate per line:
//
//   # comment
//   <image_path> x1 y1 x2 y2 x3 y3 x4 y4
//
// Corners may appear in any order and are stored canonically. An image with
// several plates has several lines.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "wpod/config.hpp"
#include "wpod/geometry.hpp"
#include "wpod/loss_head.hpp"
#include "wpod/tensor.hpp"

namespace wpod::data {

using geometry::Quad;

class ImageIoError : public std::runtime_error {
 public:
  enum class Kind { kIo, kFormat, kUnsupported, kTruncated };
  ImageIoError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Binary P6 or P5 with maxval 255; gray is replicated to three channels.
/// Returns H x W x 3 in [0, 1].
nn::Tensor read_image(const std::filesystem::path& path);

/// Writes P6, rounding to nearest after clamping to [0, 1].
void write_image(const std::filesystem::path& path, const nn::Tensor& image);

/// Writes P5 from an H x W (or H x W x 1) tensor in [0, 1].
void write_gray_image(const std::filesystem::path& path, const nn::Tensor& gray);

class AnnotationError : public std::runtime_error {
 public:
  AnnotationError(std::size_t line, const std::string& what)
      : std::runtime_error("annotation line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct AnnotatedImage {
  std::string image_path;
  std::vector<Quad> quads;

  friend bool operator==(const AnnotatedImage&, const AnnotatedImage&) = default;
};

/// Groups lines by image path in order of first appearance.
std::vector<AnnotatedImage> parse_annotations(std::string_view text);
std::vector<AnnotatedImage> load_annotations(const std::filesystem::path& path);
std::string format_annotations(std::span<const AnnotatedImage> entries);
void write_annotations(const std::filesystem::path& path, std::span<const AnnotatedImage> entries);

struct Sample {
  nn::Tensor image;  // H x W x 3
  std::vector<Quad> quads;
  std::string id;
};

/// Reads every image named in the annotation file, resolving relative paths
/// against the file's directory. Unreadable images are skipped and counted.
struct LoadedDataset {
  std::vector<Sample> samples;
  std::vector<std::string> skipped;
};
LoadedDataset load_dataset(const std::filesystem::path& annotation_file);

struct SynthConfig {
  std::size_t image_height = 256;
  std::size_t image_width = 256;
  std::size_t min_plates = 0;
  std::size_t max_plates = 2;
  double min_aspect = 2.0;
  double max_aspect = 5.0;
  double min_plate_width = 40.0;
  double max_plate_width = 160.0;
  double max_rotation_deg = 30.0;
  double max_shear = 0.3;
  double noise_stddev = 0.02;

  void validate() const;
  /// Keys under `synth.`.
  KeyValueConfig to_config() const;
  static SynthConfig from_config(const KeyValueConfig& cfg);
};

/// Deterministic in (cfg, seed). Plates are light rectangles with a dark
/// border and dark bar glyphs, warped by a random rotation, shear and scale.
Sample synth_scene(const SynthConfig& cfg, std::uint64_t seed);

/// The plate quads synth_scene(cfg, seed) would draw, without rendering.
std::vector<Quad> synth_layout(const SynthConfig& cfg, std::uint64_t seed);

struct AugmentConfig {
  bool rectification = true;
  double rectification_prob = 0.1;
  bool aspect = true;
  double aspect_min = 0.9, aspect_max = 1.1;
  bool centering = true;
  double centering_prob = 0.3;
  bool scale = true;
  double scale_min = 0.75, scale_max = 1.25;
  bool rotation = true;
  double rotation_deg = 20.0;
  bool mirror = true;
  double mirror_prob = 0.5;
  bool translate = true;
  double translate_frac = 0.15;
  bool crop = true;
  double crop_frac = 0.1;
  bool colorspace = true;
  double gain_min = 0.8, gain_max = 1.2;
  double bias_min = -0.1, bias_max = 0.1;

  /// Every transform switched off.
  static AugmentConfig none();

  void validate() const;
  /// Keys under `augment.`.
  KeyValueConfig to_config() const;
  static AugmentConfig from_config(const KeyValueConfig& cfg);
};

inline constexpr double kFillValue = 0.5;
inline constexpr int kAugmentRetries = 8;

/// Geometric transforms compose into one affine map applied to the image
/// (single bilinear warp, fill 0.5) and to the quads, followed by the color
/// transform. When every plate leaves the frame the draw is repeated with the
/// next seed up to kAugmentRetries times, after which the sample is returned
/// without plates.
Sample augment(const Sample& sample, const AugmentConfig& cfg, std::uint64_t seed);

/// The affine map augment() would apply for this seed, without the retry.
geometry::AffineMap augment_transform(const Sample& sample, const AugmentConfig& cfg,
                                      std::uint64_t seed);

/// Source-to-destination map used by letterbox(): uniform scale, then an
/// integer offset that centers the image.
geometry::AffineMap letterbox_transform(std::size_t src_height, std::size_t src_width,
                                        std::size_t height, std::size_t width);

/// Aspect-preserving resize into height x width, padded with 0.5; quads are
/// scaled and shifted identically.
Sample letterbox(const Sample& sample, std::size_t height, std::size_t width);

struct Batch {
  nn::Tensor images;  // B x H x W x 3
  std::vector<std::vector<Quad>> quads;
  std::vector<loss::TargetGrid> targets;
};

/// Letterboxes the first batch_size samples. Throws std::invalid_argument
/// when batch_size is 0 or exceeds the sample count.
Batch make_batch(std::span<const Sample> samples, std::size_t batch_size, std::size_t height,
                 std::size_t width, double alpha);

}  // namespace wpod::data
