// Copyright 2026 The wpod-edge Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the `wpod` tool. Every command writes its
// human-readable output to `out`, diagnostics to `err`, and returns a process
// exit code.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wpod/config.hpp"
#include "wpod/dataset.hpp"
#include "wpod/network.hpp"
#include "wpod/optim.hpp"

namespace wpod::app {

namespace fs = std::filesystem;
using geometry::Quad;

enum ExitCode : int { kExitOk = 0, kExitValidation = 1, kExitIo = 2 };

/// Raises glibc's mmap and trim thresholds so the large per-layer buffers of
/// a training step are recycled instead of being returned to the kernel.
void tune_allocator();

/// splitmix64 finalizer over (seed, a, b).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

struct TrainConfig {
  std::size_t batch_size = 8;
  std::size_t iterations = 2000;
  std::size_t checkpoint_every = 500;
  double learning_rate = 1e-3;
  bool augment = true;
  /// Train on the first batch_size samples every iteration, unaugmented.
  bool fixed_batch = false;

  void validate() const;
  /// Keys under `train.`.
  KeyValueConfig to_config() const;
  static TrainConfig from_config(const KeyValueConfig& cfg);
};

/// Where training or evaluation samples come from: an annotation file, or
/// `synth_count` synthetic scenes with seeds synth_first_seed, +1, ...
struct DataSource {
  std::optional<fs::path> annotations;
  std::size_t synth_count = 200;
  std::uint64_t synth_first_seed = 0;

  /// Keys under `data.`; `data.annotations` selects a file.
  KeyValueConfig to_config() const;
  static DataSource from_config(const KeyValueConfig& cfg);
};

/// Everything a config file can set.
struct RunConfig {
  net::NetworkConfig net;
  TrainConfig train;
  data::SynthConfig synth;
  data::AugmentConfig augment;
  DataSource data;

  void validate() const;
  KeyValueConfig to_config() const;
  /// Unknown keys raise ConfigError.
  static RunConfig from_config(const KeyValueConfig& cfg);
  static RunConfig load(const fs::path& path);
};

/// Throws data::ImageIoError or data::AnnotationError when the annotation
/// file itself is unusable; missing images are skipped, listed, and reported
/// on err.
data::LoadedDataset load_samples(const DataSource& source, const data::SynthConfig& synth,
                                 std::ostream& err);

struct LossRow {
  std::uint64_t iteration = 0;
  double location = 0.0;
  double confidence = 0.0;
  double total = 0.0;
};

inline constexpr const char* kLossLogHeader = "iter,location_loss,confidence_loss,total_loss";
std::string format_loss_row(const LossRow& row);

/// Called after every iteration with the row just logged.
using TrainObserver = std::function<void(const LossRow&, const net::Model&)>;

/// Runs `cfg.iterations` Adam steps on `model`, continuing from its training
/// step. Batches and augmentation draws derive from (seed, iteration), so
/// the run is a pure function of its inputs. Each row holds the loss before
/// that iteration's update.
std::vector<LossRow> train(net::Model& model, std::span<const data::Sample> samples,
                           const TrainConfig& cfg, const data::AugmentConfig& augment,
                           std::uint64_t seed, const TrainObserver& observer = {});

struct TrainRequest {
  RunConfig config;
  fs::path out_checkpoint;
  /// Defaults to `<out_checkpoint>.csv`.
  std::optional<fs::path> log_path;
  std::uint64_t seed = 0;
};

/// Builds a model from the config (seeded init), trains it, writes the CSV
/// loss log, and saves the checkpoint every checkpoint_every iterations and
/// at the end.
int cmd_train(const TrainRequest& request, std::ostream& out, std::ostream& err);

struct ImageEval {
  std::string id;
  /// Per ground-truth quad: qIoU of its matched detection, 0 when unmatched.
  std::vector<double> best_qiou;
  /// Per ground-truth quad: index of the matched detection.
  std::vector<std::optional<std::size_t>> matched;
  std::size_t detections = 0;
  std::size_t false_positives = 0;
};

inline constexpr double kFalsePositiveQiou = 0.5;

struct EvalReport {
  std::vector<ImageEval> per_image;
  std::vector<std::string> skipped;
  double mean_qiou = 0.0;
  std::size_t ground_truth = 0;
  std::size_t detections = 0;
  std::size_t false_positives = 0;

  /// One row per ground-truth quad plus one per image without plates:
  /// id,gt_index,qiou,matched_detection,detections,false_positives
  std::string to_csv() const;
};

/// Greedy matching: pairs are taken in descending qIoU order, each ground
/// truth and each detection at most once. A detection is a false positive
/// when its qIoU with every ground-truth quad is below 0.5.
ImageEval match_detections(std::string id, std::span<const Quad> ground_truth,
                           std::span<const Quad> detections);

/// Quads for sample `index`, in the sample's own pixel coordinates.
using DetectionProvider = std::function<std::vector<Quad>(const data::Sample&, std::size_t index)>;

/// Runs the provider over every sample. With threads > 1 images are split
/// across workers; the report keeps input order.
EvalReport evaluate(std::span<const data::Sample> samples, const DetectionProvider& provider,
                    std::size_t threads = 1);

/// Letterboxes each image to the model input, decodes, and maps the quads
/// back to image coordinates. Infer mode only, so safe to share across
/// threads.
std::vector<Quad> detect_quads(const net::Model& model, const nn::Tensor& image, double tau,
                               double nms_threshold);
DetectionProvider model_provider(const net::Model& model, double tau, double nms_threshold);

struct NamedReport {
  std::string name;
  EvalReport report;
};

/// Fixed-width table: model, mean qIoU (%), ground truth, detections, false
/// positives, and the qIoU delta in points against the first row.
std::string comparison_table(std::span<const NamedReport> rows);

struct EvalRequest {
  std::vector<fs::path> checkpoints;
  DataSource data;
  data::SynthConfig synth;
  std::optional<double> tau;  // defaults to each checkpoint's detection threshold
  std::optional<double> nms_threshold;
  std::optional<fs::path> csv_dir;  // writes <checkpoint stem>.eval.csv
  std::size_t threads = 1;
};

int cmd_eval(const EvalRequest& request, std::ostream& out, std::ostream& err);

inline constexpr std::size_t kCropWidth = 128;
inline constexpr std::size_t kCropHeight = 64;

/// Draws closed 1-px red polylines along each quad.
nn::Tensor draw_quads(const nn::Tensor& image, std::span<const Quad> quads);

struct DetectRequest {
  fs::path checkpoint;
  fs::path image;
  fs::path out_dir;
  std::optional<double> tau;
  std::optional<double> nms_threshold;
};

/// Writes <name>.quads.txt, <name>.overlay.ppm and <name>.plate<k>.ppm.
int cmd_detect(const DetectRequest& request, std::ostream& out, std::ostream& err);

struct GradCheckRequest {
  net::NetworkConfig net;  // input size forced to 32 x 32
  std::uint64_t seed = 0;
  double perturbation = 1e-5;
  std::size_t samples_per_tensor = 4;
  double tolerance = 1e-3;
  /// Scales every convolution kernel gradient; 1 leaves backward intact.
  double corrupt_kernel_grad = 1.0;
};

struct GradCheckReport {
  std::vector<std::pair<std::string, double>> trainable;
  /// Frozen edge kernels, checked as differentiable inputs with a tenth of
  /// the perturbation.
  std::vector<std::pair<std::string, double>> frozen_inputs;
  double max_relative_error = 0.0;
  bool passed = false;
};

/// total_loss of a 2-sample synthetic batch, differentiated through the
/// whole model by central differences.
GradCheckReport run_gradcheck(const GradCheckRequest& request);
int cmd_gradcheck(const GradCheckRequest& request, std::ostream& out, std::ostream& err);

struct EdgesRequest {
  fs::path image;
  fs::path out_dir;
  bool presmooth = false;
  bool dump_raw = false;
};

/// Writes <name>.sobel_x.pgm, .sobel_y.pgm and .sobel_xy.pgm, each min-max
/// normalized; a channel whose range is below 1e-9 of its magnitude maps to 0. With dump_raw also writes the
/// unnormalized values as <name>.sobel_*.txt, one image row per line.
int cmd_edges(const EdgesRequest& request, std::ostream& out, std::ostream& err);

struct SynthRequest {
  data::SynthConfig synth;
  std::size_t count = 200;
  std::uint64_t first_seed = 0;
  fs::path out_dir;
};

/// Writes scene_<seed>.ppm files plus annotations.txt listing every plate.
int cmd_synth(const SynthRequest& request, std::ostream& out, std::ostream& err);

}  // namespace wpod::app
