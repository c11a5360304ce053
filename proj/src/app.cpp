// Copyright 2026 The wpod-edge Authors
// SPDX-License-Identifier: Apache-2.0

#include "wpod/app.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <ostream>
#include <random>
#include <sstream>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "wpod/edge_layer.hpp"
#include "wpod/image.hpp"
#include "wpod/loss_head.hpp"
#include "wpod/ops.hpp"

namespace wpod::app {
namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

std::size_t get_count(const KeyValueConfig& c, const std::string& key, std::size_t fallback) {
  const auto v = c.get_int(key, static_cast<std::int64_t>(fallback));
  require(v >= 0, key + " must be non-negative");
  return static_cast<std::size_t>(v);
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

nn::Tensor with_batch_dim(const nn::Tensor& image) {
  const auto& s = image.shape();
  return nn::Tensor({1, s[0], s[1], s[2]}, std::vector<double>(image.data().begin(), image.data().end()));
}

data::Batch draw_batch(std::span<const data::Sample> samples, const TrainConfig& cfg,
                       const data::AugmentConfig& augment, std::uint64_t seed, std::uint64_t step,
                       const net::NetworkConfig& nc) {
  std::mt19937_64 rng(derive_seed(seed, step));
  std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);
  std::vector<data::Sample> chosen;
  chosen.reserve(cfg.batch_size);
  for (std::size_t k = 0; k < cfg.batch_size; ++k) {
    const auto& s = samples[pick(rng)];
    chosen.push_back(cfg.augment ? data::augment(s, augment, derive_seed(seed, step, k + 1)) : s);
  }
  return data::make_batch(chosen, cfg.batch_size, nc.input_height, nc.input_width, nc.alpha);
}

// Index of the matched detection per ground truth and its qIoU.
struct Match {
  std::size_t gt, det;
  double qiou;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw data::ImageIoError(data::ImageIoError::Kind::kIo, "cannot write " + path.string());
  out << text;
  if (!out) throw data::ImageIoError(data::ImageIoError::Kind::kIo, "cannot write " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw data::ImageIoError(data::ImageIoError::Kind::kIo, "cannot create directory " + dir.string());
  }
}

// Flips requires_grad on frozen tensors for the lifetime of the guard.
class ScopedDifferentiable {
 public:
  explicit ScopedDifferentiable(std::vector<nn::Tensor> tensors) : tensors_(std::move(tensors)) {
    for (auto& t : tensors_) t.node().requires_grad = true;
  }
  ~ScopedDifferentiable() {
    for (auto& t : tensors_) {
      t.node().requires_grad = false;
      t.zero_grad();
    }
  }
  ScopedDifferentiable(const ScopedDifferentiable&) = delete;
  ScopedDifferentiable& operator=(const ScopedDifferentiable&) = delete;
  std::vector<nn::Tensor>& tensors() { return tensors_; }

 private:
  std::vector<nn::Tensor> tensors_;
};

std::string format_fixed(double v, int precision) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

}  // namespace

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  auto mix = [](std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ a) ^ b);
}

void TrainConfig::validate() const {
  require(batch_size > 0, "train.batch_size must be positive");
  require(checkpoint_every > 0, "train.checkpoint_every must be positive");
  require(learning_rate > 0.0 && std::isfinite(learning_rate), "train.learning_rate must be positive");
}

KeyValueConfig TrainConfig::to_config() const {
  KeyValueConfig c;
  c.set("train.batch_size", static_cast<std::int64_t>(batch_size));
  c.set("train.iterations", static_cast<std::int64_t>(iterations));
  c.set("train.checkpoint_every", static_cast<std::int64_t>(checkpoint_every));
  c.set("train.learning_rate", learning_rate);
  c.set("train.augment", augment);
  c.set("train.fixed_batch", fixed_batch);
  return c;
}

TrainConfig TrainConfig::from_config(const KeyValueConfig& c) {
  TrainConfig t;
  t.batch_size = get_count(c, "train.batch_size", t.batch_size);
  t.iterations = get_count(c, "train.iterations", t.iterations);
  t.checkpoint_every = get_count(c, "train.checkpoint_every", t.checkpoint_every);
  t.learning_rate = c.get_double("train.learning_rate", t.learning_rate);
  t.augment = c.get_bool("train.augment", t.augment);
  t.fixed_batch = c.get_bool("train.fixed_batch", t.fixed_batch);
  t.validate();
  return t;
}

KeyValueConfig DataSource::to_config() const {
  KeyValueConfig c;
  if (annotations) c.set("data.annotations", annotations->string());
  c.set("data.synth_count", static_cast<std::int64_t>(synth_count));
  c.set("data.synth_first_seed", static_cast<std::int64_t>(synth_first_seed));
  return c;
}

DataSource DataSource::from_config(const KeyValueConfig& c) {
  DataSource d;
  if (c.contains("data.annotations")) d.annotations = c.get_string("data.annotations", "");
  d.synth_count = get_count(c, "data.synth_count", d.synth_count);
  d.synth_first_seed = get_count(c, "data.synth_first_seed", d.synth_first_seed);
  return d;
}

void RunConfig::validate() const {
  net.validate();
  train.validate();
  synth.validate();
  augment.validate();
}

KeyValueConfig RunConfig::to_config() const {
  KeyValueConfig c = net.to_config();
  c.merge(train.to_config());
  c.merge(synth.to_config());
  c.merge(augment.to_config());
  c.merge(data.to_config());
  return c;
}

RunConfig RunConfig::from_config(const KeyValueConfig& c) {
  const KeyValueConfig known = RunConfig{}.to_config();
  for (const auto& [key, value] : c.entries()) {
    if (!known.contains(key) && key != "data.annotations") throw ConfigError("unknown key " + key);
  }
  RunConfig r;
  r.net = net::NetworkConfig::from_config(c);
  r.train = TrainConfig::from_config(c);
  r.synth = data::SynthConfig::from_config(c);
  r.augment = data::AugmentConfig::from_config(c);
  r.data = DataSource::from_config(c);
  r.validate();
  return r;
}

RunConfig RunConfig::load(const fs::path& path) {
  RunConfig r = from_config(KeyValueConfig::load(path));
  // Relative annotation paths are relative to the config file.
  if (r.data.annotations && r.data.annotations->is_relative()) {
    r.data.annotations = path.parent_path() / *r.data.annotations;
  }
  return r;
}

data::LoadedDataset load_samples(const DataSource& source, const data::SynthConfig& synth,
                                 std::ostream& err) {
  if (source.annotations) {
    auto loaded = data::load_dataset(*source.annotations);
    if (!loaded.skipped.empty()) {
      err << "warning: skipped " << loaded.skipped.size() << " unreadable image(s)\n";
      for (const auto& s : loaded.skipped) err << "  " << s << '\n';
    }
    return loaded;
  }
  data::LoadedDataset d;
  d.samples.reserve(source.synth_count);
  for (std::size_t i = 0; i < source.synth_count; ++i) {
    d.samples.push_back(data::synth_scene(synth, source.synth_first_seed + i));
  }
  return d;
}

std::string format_loss_row(const LossRow& row) {
  return std::to_string(row.iteration) + ',' + format_double(row.location) + ',' +
         format_double(row.confidence) + ',' + format_double(row.total);
}

std::vector<LossRow> train(net::Model& model, std::span<const data::Sample> samples,
                           const TrainConfig& cfg, const data::AugmentConfig& augment,
                           std::uint64_t seed, const TrainObserver& observer) {
  cfg.validate();
  augment.validate();
  if (samples.empty()) throw std::invalid_argument("training needs at least one sample");
  const auto& nc = model.config();

  nn::AdamConfig adam;
  adam.learning_rate = cfg.learning_rate;
  adam.step_count = model.training_step();

  std::optional<data::Batch> fixed;
  if (cfg.fixed_batch) {
    fixed = data::make_batch(samples, cfg.batch_size, nc.input_height, nc.input_width, nc.alpha);
  }

  std::vector<LossRow> rows;
  rows.reserve(cfg.iterations);
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const std::uint64_t step = model.training_step();
    const data::Batch batch = fixed ? *fixed : draw_batch(samples, cfg, augment, seed, step, nc);
    LossRow row;
    {
      const auto grid = model.forward(batch.images, nn::Mode::kTrain);
      const auto loss = loss::total_loss(grid, batch.targets);
      row = {step, loss.parts.location, loss.parts.confidence, loss.parts.total};
      loss.total.backward();
    }
    nn::adam_step(model.parameters(), adam);
    nn::zero_grad(model.parameters());
    model.set_training_step(step + 1);
    rows.push_back(row);
    if (observer) observer(row, model);
  }
  return rows;
}

int cmd_train(const TrainRequest& request, std::ostream& out, std::ostream& err) {
  const RunConfig& cfg = request.config;
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  }

  data::LoadedDataset loaded;
  try {
    loaded = load_samples(cfg.data, cfg.synth, err);
  } catch (const std::exception& e) {
    err << "error: cannot read training data: " << e.what() << '\n';
    return kExitIo;
  }
  if (loaded.samples.empty()) {
    err << "error: no training samples\n";
    return kExitIo;
  }
  if (cfg.train.fixed_batch && loaded.samples.size() < cfg.train.batch_size) {
    err << "error: fixed batch needs " << cfg.train.batch_size << " samples, have "
        << loaded.samples.size() << '\n';
    return kExitIo;
  }

  const fs::path log_path = request.log_path.value_or(fs::path(request.out_checkpoint.string() + ".csv"));
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) {
    err << "error: cannot write " << log_path.string() << '\n';
    return kExitIo;
  }
  log << kLossLogHeader << '\n';

  net::Model model(cfg.net, request.seed);
  out << "training " << net::to_string(cfg.net.variant) << " model, "
      << model.count_parameters().trainable << " trainable parameters, " << loaded.samples.size()
      << " samples, " << cfg.train.iterations << " iterations\n";

  const std::size_t report_every = std::max<std::size_t>(1, cfg.train.iterations / 20);
  try {
    train(model, loaded.samples, cfg.train, cfg.augment, request.seed,
          [&](const LossRow& row, const net::Model& m) {
            log << format_loss_row(row) << '\n';
            const std::uint64_t done = row.iteration + 1;
            if ((row.iteration % report_every) == 0 || done == cfg.train.iterations) {
              out << "iter " << row.iteration << " loss " << format_fixed(row.total, 6) << " (location "
                  << format_fixed(row.location, 6) << ", confidence "
                  << format_fixed(row.confidence, 6) << ")\n";
            }
            if (done % cfg.train.checkpoint_every == 0) net::save_checkpoint(m, request.out_checkpoint);
          });
    net::save_checkpoint(model, request.out_checkpoint);
  } catch (const net::CheckpointError& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  }
  log.flush();
  if (!log) {
    err << "error: cannot write " << log_path.string() << '\n';
    return kExitIo;
  }
  out << "wrote " << request.out_checkpoint.string() << " and " << log_path.string() << '\n';
  return kExitOk;
}

ImageEval match_detections(std::string id, std::span<const Quad> ground_truth,
                           std::span<const Quad> detections) {
  ImageEval e;
  e.id = std::move(id);
  e.best_qiou.assign(ground_truth.size(), 0.0);
  e.matched.assign(ground_truth.size(), std::nullopt);
  e.detections = detections.size();

  std::vector<Match> pairs;
  std::vector<double> best_for_det(detections.size(), 0.0);
  for (std::size_t g = 0; g < ground_truth.size(); ++g) {
    for (std::size_t d = 0; d < detections.size(); ++d) {
      const double q = geometry::qiou(ground_truth[g], detections[d]);
      best_for_det[d] = std::max(best_for_det[d], q);
      if (q > 0.0) pairs.push_back({g, d, q});
    }
  }
  std::stable_sort(pairs.begin(), pairs.end(),
                   [](const Match& a, const Match& b) { return a.qiou > b.qiou; });
  std::vector<bool> det_used(detections.size(), false);
  for (const auto& p : pairs) {
    if (e.matched[p.gt] || det_used[p.det]) continue;
    e.matched[p.gt] = p.det;
    e.best_qiou[p.gt] = p.qiou;
    det_used[p.det] = true;
  }
  e.false_positives = static_cast<std::size_t>(std::count_if(
      best_for_det.begin(), best_for_det.end(), [](double q) { return q < kFalsePositiveQiou; }));
  return e;
}

EvalReport evaluate(std::span<const data::Sample> samples, const DetectionProvider& provider,
                    std::size_t threads) {
  EvalReport report;
  report.per_image.resize(samples.size());
  auto run_one = [&](std::size_t i) {
    const auto dets = provider(samples[i], i);
    report.per_image[i] = match_detections(samples[i].id, samples[i].quads, dets);
  };
  const std::size_t workers = std::min(std::max<std::size_t>(threads, 1), samples.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < samples.size(); ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < samples.size(); i = next++) {
          try {
            run_one(i);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }

  double sum = 0.0;
  for (const auto& img : report.per_image) {
    for (double q : img.best_qiou) sum += q;
    report.ground_truth += img.best_qiou.size();
    report.detections += img.detections;
    report.false_positives += img.false_positives;
  }
  report.mean_qiou = report.ground_truth == 0 ? 0.0 : sum / static_cast<double>(report.ground_truth);
  return report;
}

std::string EvalReport::to_csv() const {
  std::string out = "id,gt_index,qiou,matched_detection,detections,false_positives\n";
  for (const auto& img : per_image) {
    const std::string tail =
        ',' + std::to_string(img.detections) + ',' + std::to_string(img.false_positives) + '\n';
    if (img.best_qiou.empty()) {
      out += csv_field(img.id) + ",,," + tail;
      continue;
    }
    for (std::size_t g = 0; g < img.best_qiou.size(); ++g) {
      out += csv_field(img.id) + ',' + std::to_string(g) + ',' + format_double(img.best_qiou[g]) +
             ',' + (img.matched[g] ? std::to_string(*img.matched[g]) : std::string()) + tail;
    }
  }
  return out;
}

std::vector<Quad> detect_quads(const net::Model& model, const nn::Tensor& image, double tau,
                               double nms_threshold) {
  image::require_rgb(image);
  const auto& nc = model.config();
  const auto to_net = data::letterbox_transform(image::height(image), image::width(image),
                                                nc.input_height, nc.input_width);
  const auto fitted = data::letterbox(data::Sample{image, {}, ""}, nc.input_height, nc.input_width);
  const auto grid = model.infer(with_batch_dim(fitted.image));
  const auto back = *geometry::invert_affine(to_net);
  std::vector<Quad> quads;
  for (const auto& d : loss::decode_detections(grid, 0, tau, nms_threshold, nc.alpha)) {
    quads.push_back(geometry::apply_affine(back, d.quad));
  }
  return quads;
}

DetectionProvider model_provider(const net::Model& model, double tau, double nms_threshold) {
  return [&model, tau, nms_threshold](const data::Sample& s, std::size_t) {
    return detect_quads(model, s.image, tau, nms_threshold);
  };
}

std::string comparison_table(std::span<const NamedReport> rows) {
  std::size_t name_w = 5;
  for (const auto& r : rows) name_w = std::max(name_w, r.name.size());
  std::ostringstream s;
  s << std::left << std::setw(static_cast<int>(name_w)) << "model" << std::right << std::setw(12)
    << "mean qIoU" << std::setw(8) << "plates" << std::setw(12) << "detections" << std::setw(8)
    << "FP" << std::setw(10) << "delta" << '\n';
  for (const auto& r : rows) {
    const double pct = 100.0 * r.report.mean_qiou;
    const double delta = pct - 100.0 * rows.front().report.mean_qiou;
    s << std::left << std::setw(static_cast<int>(name_w)) << r.name << std::right << std::setw(11)
      << format_fixed(pct, 2) << '%' << std::setw(8) << r.report.ground_truth << std::setw(12)
      << r.report.detections << std::setw(8) << r.report.false_positives << std::setw(10)
      << ((delta >= 0 ? "+" : "") + format_fixed(delta, 2)) << '\n';
  }
  return s.str();
}

int cmd_eval(const EvalRequest& request, std::ostream& out, std::ostream& err) {
  if (request.checkpoints.empty()) {
    err << "error: eval needs at least one checkpoint\n";
    return kExitIo;
  }
  data::LoadedDataset loaded;
  try {
    loaded = load_samples(request.data, request.synth, err);
  } catch (const std::exception& e) {
    err << "error: cannot read evaluation data: " << e.what() << '\n';
    return kExitIo;
  }

  std::vector<NamedReport> rows;
  try {
    if (request.csv_dir) ensure_dir(*request.csv_dir);
    for (const auto& path : request.checkpoints) {
      const net::Model model = net::load_checkpoint(path);
      const double tau = request.tau.value_or(model.config().detection_threshold);
      const double nms = request.nms_threshold.value_or(model.config().nms_threshold);
      NamedReport row{path.stem().string(),
                      evaluate(loaded.samples, model_provider(model, tau, nms), request.threads)};
      row.report.skipped = loaded.skipped;
      out << row.name << ": mean qIoU " << format_fixed(100.0 * row.report.mean_qiou, 2) << "% over "
          << row.report.ground_truth << " plates in " << row.report.per_image.size() << " images, "
          << row.report.detections << " detections, " << row.report.false_positives
          << " false positives\n";
      if (request.csv_dir) write_text(*request.csv_dir / (row.name + ".eval.csv"), row.report.to_csv());
      rows.push_back(std::move(row));
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  }
  if (!loaded.skipped.empty()) out << "skipped " << loaded.skipped.size() << " image(s)\n";
  out << '\n' << comparison_table(rows);
  return kExitOk;
}

nn::Tensor draw_quads(const nn::Tensor& image, std::span<const Quad> quads) {
  image::require_rgb(image);
  nn::Tensor canvas = image.clone();
  auto px = canvas.mutable_data();
  const auto h = static_cast<long>(image::height(image));
  const auto w = static_cast<long>(image::width(image));
  auto plot = [&](double x, double y) {
    const auto j = static_cast<long>(std::floor(x));
    const auto i = static_cast<long>(std::floor(y));
    if (i < 0 || j < 0 || i >= h || j >= w) return;
    double* p = px.data() + (static_cast<std::size_t>(i * w + j)) * 3;
    p[0] = 1.0;
    p[1] = 0.0;
    p[2] = 0.0;
  };
  for (const auto& q : quads) {
    for (std::size_t k = 0; k < 4; ++k) {
      const auto& a = q.corners[k];
      const auto& b = q.corners[(k + 1) % 4];
      const double steps = std::ceil(std::max(std::abs(b.x - a.x), std::abs(b.y - a.y)));
      const auto n = static_cast<long>(std::min(steps, 1e6));
      for (long t = 0; t <= n; ++t) {
        const double f = n == 0 ? 0.0 : static_cast<double>(t) / static_cast<double>(n);
        plot(a.x + f * (b.x - a.x), a.y + f * (b.y - a.y));
      }
    }
  }
  return canvas;
}

int cmd_detect(const DetectRequest& request, std::ostream& out, std::ostream& err) {
  nn::Tensor image;
  try {
    image = data::read_image(request.image);
  } catch (const data::ImageIoError& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  }
  try {
    const net::Model model = net::load_checkpoint(request.checkpoint);
    const double tau = request.tau.value_or(model.config().detection_threshold);
    const double nms = request.nms_threshold.value_or(model.config().nms_threshold);
    const auto quads = detect_quads(model, image, tau, nms);

    ensure_dir(request.out_dir);
    const std::string name = request.image.stem().string();
    const data::AnnotatedImage entry{request.image.filename().string(), quads};
    data::write_annotations(request.out_dir / (name + ".quads.txt"), std::span(&entry, 1));
    data::write_image(request.out_dir / (name + ".overlay.ppm"), draw_quads(image, quads));
    std::size_t written = 0;
    for (std::size_t k = 0; k < quads.size(); ++k) {
      try {
        const auto crop = loss::rectify_plate(image, quads[k], kCropWidth, kCropHeight);
        data::write_image(request.out_dir / (name + ".plate" + std::to_string(k) + ".ppm"), crop);
        ++written;
      } catch (const std::invalid_argument& e) {
        err << "warning: plate " << k << " not rectified: " << e.what() << '\n';
      }
    }
    out << quads.size() << " plate(s) detected, " << written << " crop(s) written to "
        << request.out_dir.string() << '\n';
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  }
  return kExitOk;
}

GradCheckReport run_gradcheck(const GradCheckRequest& request) {
  net::NetworkConfig cfg = request.net;
  cfg.input_height = cfg.input_width = 32;
  net::Model model(cfg, request.seed);

  // Smooth random scenes; one plate per image covering two cell centers.
  std::mt19937_64 rng(derive_seed(request.seed, 0x6772616463686bull));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> px(2 * 32 * 32 * 3);
  for (std::size_t b = 0; b < 2; ++b) {
    const double fx = 0.2 + 0.4 * u(rng), fy = 0.2 + 0.4 * u(rng);
    for (std::size_t i = 0; i < 32; ++i)
      for (std::size_t j = 0; j < 32; ++j)
        for (std::size_t c = 0; c < 3; ++c)
          px[((b * 32 + i) * 32 + j) * 3 + c] =
              0.5 + 0.25 * std::sin(fx * j + fy * i + c) + 0.2 * (u(rng) - 0.5);
  }
  const nn::Tensor images({2, 32, 32, 3}, std::move(px));
  auto plate = [&](double y0) {
    const double x0 = 2 + 2 * u(rng), x1 = 28 + 2 * u(rng), y1 = y0 + 10 + 2 * u(rng);
    return Quad::canonical({geometry::Point2{x0, y0}, geometry::Point2{x1, y0 + u(rng)},
                            geometry::Point2{x1, y1}, geometry::Point2{x0, y1 - u(rng)}});
  };
  const std::vector<Quad> top{plate(2 + 2 * u(rng))}, bottom{plate(18 + 2 * u(rng))};
  const std::vector<loss::TargetGrid> targets{loss::build_target_grid(top, 32, 32, cfg.alpha),
                                              loss::build_target_grid(bottom, 32, 32, cfg.alpha)};
  auto objective = [&] { return loss::total_loss(model.forward(images, nn::Mode::kTrain), targets).total; };

  nn::GradCheckOptions opts;
  opts.perturbation = request.perturbation;
  opts.samples_per_tensor = request.samples_per_tensor;
  opts.seed = request.seed;

  std::optional<nn::debug::ScopedKernelGradCorruption> corrupt;
  if (request.corrupt_kernel_grad != 1.0) corrupt.emplace(request.corrupt_kernel_grad);

  GradCheckReport report;
  std::vector<nn::Tensor> leaves;
  std::vector<std::string> names, frozen_names;
  std::vector<nn::Tensor> frozen;
  for (const auto& p : model.parameters()) {
    if (p.trainable) {
      leaves.push_back(p.value);
      names.push_back(p.name);
    } else if (p.name.rfind("edge.", 0) == 0) {
      frozen.push_back(p.value);
      frozen_names.push_back(p.name);
    }
  }
  const auto r = nn::grad_check(objective, leaves, opts);
  for (std::size_t i = 0; i < names.size(); ++i) report.trainable.emplace_back(names[i], r.per_tensor[i]);
  report.max_relative_error = r.max_relative_error;

  if (!frozen.empty()) {
    // A Sobel tap moves every pixel's features at once, so the full step
    // crosses ReLU and max-pool kinks; a tenth of it stays on one branch.
    ScopedDifferentiable scope(frozen);
    auto frozen_opts = opts;
    frozen_opts.perturbation = opts.perturbation / 10;
    const auto f = nn::grad_check(objective, scope.tensors(), frozen_opts);
    for (std::size_t i = 0; i < frozen_names.size(); ++i) {
      report.frozen_inputs.emplace_back(frozen_names[i], f.per_tensor[i]);
    }
    report.max_relative_error = std::max(report.max_relative_error, f.max_relative_error);
  }
  report.passed = report.max_relative_error < request.tolerance;
  return report;
}

int cmd_gradcheck(const GradCheckRequest& request, std::ostream& out, std::ostream& err) {
  GradCheckReport report;
  try {
    report = run_gradcheck(request);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  }
  std::size_t name_w = 9;
  for (const auto& [name, e] : report.trainable) name_w = std::max(name_w, name.size());
  auto line = [&](const std::string& name, double e, const char* note) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3e", e);
    out << std::left << std::setw(static_cast<int>(name_w + 2)) << name << buf << "  "
        << (e < request.tolerance ? "ok" : "FAIL") << note << '\n';
  };
  out << std::left << std::setw(static_cast<int>(name_w + 2)) << "parameter" << "max rel error\n";
  for (const auto& [name, e] : report.trainable) line(name, e, "");
  for (const auto& [name, e] : report.frozen_inputs) line(name, e, "  (frozen, checked as input)");
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", report.max_relative_error);
  out << "max relative error " << buf << (report.passed ? " < " : " >= ") << request.tolerance
      << ": " << (report.passed ? "PASS" : "FAIL") << '\n';
  return report.passed ? kExitOk : kExitValidation;
}

int cmd_edges(const EdgesRequest& request, std::ostream& out, std::ostream& err) {
  nn::Tensor image;
  try {
    image = data::read_image(request.image);
  } catch (const data::ImageIoError& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  }
  const std::size_t h = image::height(image), w = image::width(image);
  nn::Tensor features;
  {
    nn::NoGradGuard no_grad;
    const auto gray = edge::gaussian_presmooth(edge::rgb_to_gray(with_batch_dim(image)), request.presmooth);
    features = edge::sobel_features(gray);
  }
  static constexpr const char* kNames[] = {"sobel_x", "sobel_y", "sobel_xy"};
  try {
    ensure_dir(request.out_dir);
    const std::string stem = request.image.stem().string();
    const auto f = features.data();
    for (std::size_t c = 0; c < 3; ++c) {
      std::vector<double> channel(h * w);
      for (std::size_t p = 0; p < h * w; ++p) channel[p] = f[p * 3 + c];
      const auto [lo, hi] = std::minmax_element(channel.begin(), channel.end());
      const double min = *lo, range = *hi - *lo;
      // Rounding noise on a flat channel must not be stretched to full scale.
      const bool flat = range <= 1e-9 * std::max({1.0, std::abs(*lo), std::abs(*hi)});
      std::vector<double> scaled(channel.size());
      for (std::size_t p = 0; p < channel.size(); ++p) {
        scaled[p] = flat ? 0.0 : (channel[p] - min) / range;
      }
      const fs::path base = request.out_dir / (stem + '.' + kNames[c]);
      data::write_gray_image(base.string() + ".pgm", nn::Tensor({h, w}, std::move(scaled)));
      if (request.dump_raw) {
        std::string text;
        for (std::size_t i = 0; i < h; ++i) {
          for (std::size_t j = 0; j < w; ++j) {
            if (j) text += ' ';
            text += format_double(channel[i * w + j]);
          }
          text += '\n';
        }
        write_text(base.string() + ".txt", text);
      }
    }
    out << "wrote " << (request.dump_raw ? 6 : 3) << " file(s) to " << request.out_dir.string() << '\n';
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  }
  return kExitOk;
}

int cmd_synth(const SynthRequest& request, std::ostream& out, std::ostream& err) {
  try {
    request.synth.validate();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  }
  try {
    ensure_dir(request.out_dir);
    std::vector<data::AnnotatedImage> entries;
    std::size_t plates = 0;
    for (std::size_t i = 0; i < request.count; ++i) {
      const std::uint64_t seed = request.first_seed + i;
      const auto scene = data::synth_scene(request.synth, seed);
      char name[48];
      std::snprintf(name, sizeof name, "scene_%06llu.ppm", static_cast<unsigned long long>(seed));
      data::write_image(request.out_dir / name, scene.image);
      entries.push_back({name, scene.quads});
      plates += scene.quads.size();
    }
    data::write_annotations(request.out_dir / "annotations.txt", entries);
    out << "wrote " << request.count << " scene(s) with " << plates << " plate(s) to "
        << request.out_dir.string() << '\n';
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitIo;
  }
  return kExitOk;
}

}  // namespace wpod::app
