// Copyright 2026 The wpod-edge Authors
// SPDX-License-Identifier: Apache-2.0

#include "wpod/app.hpp"

#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include <unistd.h>

#include "wpod/loss_head.hpp"

namespace wpod::app {
namespace {

using geometry::Point2;
using nn::Tensor;

class TempDir {
 public:
  TempDir()
      : path_(fs::temp_directory_path() /
              ("wpod_app_" + std::to_string(counter_++) + "_" + std::to_string(::getpid()))) {
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& name) const { return path_ / name; }
  const fs::path& path() const { return path_; }

 private:
  static inline int counter_ = 0;
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Quad box(double x0, double y0, double x1, double y1) {
  return Quad{{Point2{x0, y0}, Point2{x1, y0}, Point2{x1, y1}, Point2{x0, y1}}};
}

RunConfig tiny_run() {
  RunConfig r;
  r.net.input_height = r.net.input_width = 32;
  r.net.base_channels = 4;
  r.net.blocks_per_stage = 1;
  r.synth.image_height = r.synth.image_width = 64;
  r.synth.min_plate_width = 20;
  r.synth.max_plate_width = 40;
  r.synth.max_aspect = 2.5;
  r.train.batch_size = 2;
  r.train.iterations = 5;
  r.train.checkpoint_every = 2;
  r.data.synth_count = 4;
  return r;
}

Tensor constant_image(std::size_t h, std::size_t w, double v) { return Tensor({h, w, 3}, v); }

TEST(Config, RunConfigRoundTripAndUnknownKeys) {
  RunConfig r = tiny_run();
  r.train.fixed_batch = true;
  r.data.annotations = "set/a.txt";
  r.augment.rotation_deg = 12.5;
  const auto back = RunConfig::from_config(KeyValueConfig::parse(r.to_config().to_text()));
  EXPECT_EQ(back.to_config().to_text(), r.to_config().to_text());
  EXPECT_TRUE(back.train.fixed_batch);
  EXPECT_EQ(back.data.annotations, fs::path("set/a.txt"));

  auto kv = r.to_config();
  kv.set("train.batchsize", std::int64_t{3});
  EXPECT_THROW(RunConfig::from_config(kv), ConfigError);
  kv = r.to_config();
  kv.set("train.batch_size", std::int64_t{0});
  EXPECT_THROW(RunConfig::from_config(kv), ConfigError);
}

TEST(Config, DefaultsAreDeskScale) {
  const TrainConfig t;
  EXPECT_EQ(t.batch_size, 8u);
  EXPECT_EQ(t.iterations, 2000u);
  EXPECT_EQ(t.checkpoint_every, 500u);
  EXPECT_EQ(t.learning_rate, 1e-3);
}

TEST(Seeds, DeriveSeedSeparatesStreams) {
  EXPECT_EQ(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
  EXPECT_NE(derive_seed(1, 2, 3), derive_seed(1, 3, 2));
  EXPECT_NE(derive_seed(1, 2), derive_seed(2, 2));
  EXPECT_NE(derive_seed(0, 0), 0u);
}

TEST(Train, ZeroIterationsSavesInitialization) {
  TempDir dir;
  auto r = tiny_run();
  r.train.iterations = 0;
  std::ostringstream out, err;
  ASSERT_EQ(cmd_train({r, dir / "m.ckpt", std::nullopt, 11}, out, err), kExitOk) << err.str();
  EXPECT_EQ(slurp(dir / "m.ckpt.csv"), std::string(kLossLogHeader) + "\n");

  const auto loaded = net::load_checkpoint(dir / "m.ckpt");
  const net::Model fresh(r.net, 11);
  EXPECT_EQ(loaded.training_step(), 0u);
  ASSERT_EQ(loaded.parameters().size(), fresh.parameters().size());
  for (std::size_t i = 0; i < fresh.parameters().size(); ++i) {
    const auto a = loaded.parameters()[i].value.data();
    const auto b = fresh.parameters()[i].value.data();
    ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin(), b.end())) << fresh.parameters()[i].name;
  }
}

TEST(Train, SameSeedIsBitwiseReproducible) {
  TempDir dir;
  const auto r = tiny_run();
  std::ostringstream out, err;
  ASSERT_EQ(cmd_train({r, dir / "a.ckpt", std::nullopt, 5}, out, err), kExitOk) << err.str();
  ASSERT_EQ(cmd_train({r, dir / "b.ckpt", std::nullopt, 5}, out, err), kExitOk) << err.str();
  ASSERT_EQ(cmd_train({r, dir / "c.ckpt", dir / "c.log", 6}, out, err), kExitOk) << err.str();

  const auto log = slurp(dir / "a.ckpt.csv");
  EXPECT_EQ(log, slurp(dir / "b.ckpt.csv"));
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
  EXPECT_NE(log, slurp(dir / "c.log"));

  std::istringstream lines(log);
  std::string line;
  std::getline(lines, line);
  EXPECT_EQ(line, kLossLogHeader);
  std::size_t rows = 0;
  while (std::getline(lines, line)) {
    EXPECT_EQ(line.rfind(std::to_string(rows) + ",", 0), 0u) << line;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 3);
    ++rows;
  }
  EXPECT_EQ(rows, 5u);
  EXPECT_EQ(net::load_checkpoint(dir / "a.ckpt").training_step(), 5u);
}

TEST(Train, LibraryRunMatchesCommandAndCheckpointsPeriodically) {
  const auto r = tiny_run();
  std::ostringstream sink;
  const auto samples = load_samples(r.data, r.synth, sink).samples;
  net::Model model(r.net, 5);
  std::vector<std::uint64_t> seen;
  const auto rows = train(model, samples, r.train, r.augment, 5,
                          [&](const LossRow& row, const net::Model& m) {
                            seen.push_back(row.iteration);
                            EXPECT_EQ(m.training_step(), row.iteration + 1);
                          });
  EXPECT_EQ(seen, (std::vector<std::uint64_t>{0, 1, 2, 3, 4}));
  for (const auto& row : rows) {
    EXPECT_NEAR(row.total, row.location + row.confidence, 1e-12 * std::max(1.0, row.total));
    EXPECT_TRUE(std::isfinite(row.total));
  }

  TempDir dir;
  std::ostringstream out, err;
  ASSERT_EQ(cmd_train({r, dir / "m.ckpt", std::nullopt, 5}, out, err), kExitOk);
  std::string expect = std::string(kLossLogHeader) + "\n";
  for (const auto& row : rows) expect += format_loss_row(row) + "\n";
  EXPECT_EQ(slurp(dir / "m.ckpt.csv"), expect);
}

TEST(Train, FixedBatchLossFalls) {
  auto r = tiny_run();
  r.train.fixed_batch = true;
  r.train.iterations = 40;
  std::ostringstream sink;
  const auto samples = load_samples(r.data, r.synth, sink).samples;
  net::Model model(r.net, 3);
  const auto rows = train(model, samples, r.train, r.augment, 3);
  EXPECT_LT(rows.back().total, 0.5 * rows.front().total);
}

TEST(Train, UnreadableDataExitsTwo) {
  TempDir dir;
  auto r = tiny_run();
  r.data.annotations = dir / "missing.txt";
  std::ostringstream out, err;
  EXPECT_EQ(cmd_train({r, dir / "m.ckpt", std::nullopt, 0}, out, err), kExitIo);
  EXPECT_NE(err.str().find("cannot read training data"), std::string::npos);

  std::ofstream(dir / "bad.txt") << "img.ppm 1 2 3\n";
  r.data.annotations = dir / "bad.txt";
  EXPECT_EQ(cmd_train({r, dir / "m.ckpt", std::nullopt, 0}, out, err), kExitIo);

  std::ofstream(dir / "gone.txt") << "gone.ppm 1 1 20 1 20 10 1 10\n";
  r.data.annotations = dir / "gone.txt";
  EXPECT_EQ(cmd_train({r, dir / "m.ckpt", std::nullopt, 0}, out, err), kExitIo);
  EXPECT_NE(err.str().find("no training samples"), std::string::npos);
}

TEST(Matching, GreedyWithoutReuse) {
  const std::vector<Quad> gt{box(0, 0, 10, 10), box(2, 0, 12, 10)};
  const std::vector<Quad> one{box(1, 0, 11, 10)};
  auto e = match_detections("x", gt, one);
  ASSERT_TRUE(e.matched[0] || e.matched[1]);
  EXPECT_FALSE(e.matched[0] && e.matched[1]);
  EXPECT_EQ(std::count(e.best_qiou.begin(), e.best_qiou.end(), 0.0), 1);
  EXPECT_EQ(e.false_positives, 0u);

  // The globally best pair is taken first: gt1 keeps its exact twin even
  // though gt0 also overlaps it.
  const std::vector<Quad> two{box(2, 0, 12, 10), box(0, 0, 9, 10)};
  e = match_detections("y", gt, two);
  EXPECT_EQ(e.matched[1], std::optional<std::size_t>(0));
  EXPECT_EQ(e.matched[0], std::optional<std::size_t>(1));
  EXPECT_NEAR(e.best_qiou[1], 1.0, 1e-12);
  EXPECT_NEAR(e.best_qiou[0], 0.9, 1e-12);
}

TEST(Matching, FalsePositivesUseHalfQiou) {
  const std::vector<Quad> gt{box(0, 0, 10, 10)};
  // qIoU 0.5 exactly is not a false positive; 0.4 is; a far box is.
  const std::vector<Quad> dets{box(0, 0, 5, 10), box(0, 0, 4, 10), box(50, 50, 60, 60)};
  const auto e = match_detections("z", gt, dets);
  EXPECT_EQ(e.detections, 3u);
  EXPECT_EQ(e.false_positives, 2u);
  EXPECT_NEAR(e.best_qiou[0], 0.5, 1e-12);
  EXPECT_EQ(match_detections("n", {}, dets).false_positives, 3u);
}

std::vector<data::Sample> eval_samples() {
  data::SynthConfig sc;
  sc.image_height = sc.image_width = 96;
  sc.min_plates = 0;
  sc.max_plates = 3;
  sc.max_plate_width = 60;
  std::vector<data::Sample> s;
  for (std::uint64_t i = 0; i < 12; ++i) s.push_back(data::synth_scene(sc, 40 + i));
  return s;
}

TEST(Evaluate, OracleAndEmptyProviders) {
  const auto samples = eval_samples();
  const auto perfect = evaluate(samples, [](const data::Sample& s, std::size_t) { return s.quads; });
  ASSERT_GT(perfect.ground_truth, 0u);
  EXPECT_NEAR(perfect.mean_qiou, 1.0, 1e-12);
  EXPECT_EQ(perfect.false_positives, 0u);
  EXPECT_EQ(perfect.detections, perfect.ground_truth);

  const auto nothing = evaluate(samples, [](const data::Sample&, std::size_t) { return std::vector<Quad>{}; });
  EXPECT_EQ(nothing.mean_qiou, 0.0);
  EXPECT_EQ(nothing.detections, 0u);
  EXPECT_EQ(nothing.ground_truth, perfect.ground_truth);
}

TEST(Evaluate, ThreadedKeepsInputOrder) {
  const auto samples = eval_samples();
  // Shrinks every plate by an index-dependent amount; early images finish last.
  auto provider = [&](const data::Sample& s, std::size_t i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(2 * (samples.size() - i)));
    std::vector<Quad> out;
    for (const auto& q : s.quads) {
      const auto c = q.centroid();
      const double f = 0.5 + 0.04 * static_cast<double>(i);
      const geometry::AffineMap m{f, 0, 0, f, c.x * (1 - f), c.y * (1 - f)};
      out.push_back(geometry::apply_affine(m, q));
    }
    return out;
  };
  const auto serial = evaluate(samples, provider, 1);
  const auto threaded = evaluate(samples, provider, 4);
  ASSERT_EQ(serial.per_image.size(), threaded.per_image.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    EXPECT_EQ(threaded.per_image[i].id, samples[i].id);
    EXPECT_EQ(threaded.per_image[i].best_qiou, serial.per_image[i].best_qiou);
  }
  EXPECT_EQ(threaded.mean_qiou, serial.mean_qiou);
  EXPECT_EQ(threaded.to_csv(), serial.to_csv());
}

TEST(Evaluate, CsvAggregatesToReportedMean) {
  const auto samples = eval_samples();
  const auto report = evaluate(samples, [](const data::Sample& s, std::size_t i) {
    std::vector<Quad> out;
    for (std::size_t k = 0; k < s.quads.size(); ++k) {
      if ((i + k) % 3 == 0) continue;
      const auto& q = s.quads[k];
      out.push_back(geometry::apply_affine(geometry::AffineMap::translation(1.5 * k, 0.0), q));
    }
    return out;
  });
  std::istringstream csv(report.to_csv());
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "id,gt_index,qiou,matched_detection,detections,false_positives");
  double sum = 0.0;
  std::size_t n = 0, images_without_plates = 0;
  while (std::getline(csv, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    while (f.size() < 6) f.emplace_back();
    if (f[1].empty()) {
      ++images_without_plates;
      continue;
    }
    sum += std::stod(f[2]);
    ++n;
  }
  EXPECT_EQ(n, report.ground_truth);
  EXPECT_GT(images_without_plates, 0u);
  EXPECT_NEAR(sum / static_cast<double>(n), report.mean_qiou, 1e-15);
}

TEST(Evaluate, ComparisonTableHasDeltaColumn) {
  EvalReport a, b;
  a.mean_qiou = 0.8481;
  b.mean_qiou = 0.8581;
  a.ground_truth = b.ground_truth = 175;
  const std::vector<NamedReport> rows{{"baseline", a}, {"edge_augmented", b}};
  const auto table = comparison_table(rows);
  std::istringstream s(table);
  std::string header, r1, r2, extra;
  std::getline(s, header);
  std::getline(s, r1);
  std::getline(s, r2);
  EXPECT_FALSE(std::getline(s, extra));
  EXPECT_NE(header.find("delta"), std::string::npos);
  EXPECT_NE(r1.find("84.81%"), std::string::npos);
  EXPECT_NE(r1.find("+0.00"), std::string::npos);
  EXPECT_NE(r2.find("85.81%"), std::string::npos);
  EXPECT_NE(r2.find("+1.00"), std::string::npos);
}

// 16x16 input gives a single grid cell whose output is fixed by the head
// bias, so detections are known exactly.
net::Model single_cell_model(double object_logit) {
  net::NetworkConfig c;
  c.input_height = c.input_width = 16;
  c.base_channels = 2;
  c.blocks_per_stage = 1;
  net::Model m(c, 1);
  auto k = m.find("head.out.kernel")->value.mutable_data();
  std::fill(k.begin(), k.end(), 0.0);
  auto b = m.find("head.out.bias")->value.mutable_data();
  // Translation of half a cell puts the plate on the cell center (8, 8).
  const double t = 0.5 / c.alpha;
  const std::array<double, 8> v{object_logit, 0.0, 0.05, 0.0, 0.0, 0.03, t, t};
  std::copy(v.begin(), v.end(), b.begin());
  return m;
}

TEST(Detect, SingleCellModelMapsBackToImage) {
  const auto m = single_cell_model(5.0);
  const auto quads = detect_quads(m, constant_image(64, 64, 0.3), 0.5, 0.1);
  ASSERT_EQ(quads.size(), 1u);
  // Cell center (8, 8) scaled by 4; half extents 4 * 16 * 7.75 * 0.05 / 2 and 0.03.
  const double hx = 4 * 16 * 7.75 * 0.025, hy = 4 * 16 * 7.75 * 0.015;
  EXPECT_NEAR(geometry::qiou(quads[0], box(32 - hx, 32 - hy, 32 + hx, 32 + hy)), 1.0, 1e-9);
  EXPECT_TRUE(detect_quads(single_cell_model(-5.0), constant_image(64, 64, 0.3), 0.5, 0.1).empty());
}

TEST(Detect, WritesQuadsOverlayAndCrops) {
  TempDir dir;
  net::save_checkpoint(single_cell_model(5.0), dir / "one.ckpt");
  net::save_checkpoint(single_cell_model(-5.0), dir / "none.ckpt");
  data::write_image(dir / "scene.ppm", constant_image(48, 96, 0.6));

  std::ostringstream out, err;
  ASSERT_EQ(cmd_detect({dir / "one.ckpt", dir / "scene.ppm", dir / "out", {}, {}}, out, err), kExitOk)
      << err.str();
  const auto parsed = data::load_annotations(dir / "out" / "scene.quads.txt");
  ASSERT_EQ(parsed.size(), 1u);
  EXPECT_EQ(parsed[0].image_path, "scene.ppm");
  ASSERT_EQ(parsed[0].quads.size(), 1u);
  const auto crop = data::read_image(dir / "out" / "scene.plate0.ppm");
  EXPECT_EQ(crop.shape(), (nn::Shape{kCropHeight, kCropWidth, 3}));
  EXPECT_FALSE(fs::exists(dir / "out" / "scene.plate1.ppm"));
  const auto overlay = data::read_image(dir / "out" / "scene.overlay.ppm");
  EXPECT_EQ(overlay.shape(), (nn::Shape{48, 96, 3}));

  ASSERT_EQ(cmd_detect({dir / "none.ckpt", dir / "scene.ppm", dir / "blank", {}, {}}, out, err), kExitOk);
  EXPECT_EQ(slurp(dir / "blank" / "scene.quads.txt"), "");
  EXPECT_FALSE(fs::exists(dir / "blank" / "scene.plate0.ppm"));

  EXPECT_EQ(cmd_detect({dir / "one.ckpt", dir / "nope.ppm", dir / "x", {}, {}}, out, err), kExitIo);
  EXPECT_EQ(cmd_detect({dir / "nope.ckpt", dir / "scene.ppm", dir / "x", {}, {}}, out, err), kExitIo);
}

TEST(Detect, OverlayDrawsOnePixelRedOutline) {
  const auto img = constant_image(20, 30, 0.5);
  const std::vector<Quad> q{box(4.5, 5.5, 20.5, 12.5)};
  const auto drawn = draw_quads(img, q);
  std::size_t red = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    for (std::size_t j = 0; j < 30; ++j) {
      const double* p = drawn.data().data() + (i * 30 + j) * 3;
      const bool on_outline = (j >= 4 && j <= 20 && (i == 5 || i == 12)) ||
                              (i >= 5 && i <= 12 && (j == 4 || j == 20));
      if (on_outline) {
        EXPECT_EQ(p[0], 1.0) << i << "," << j;
        EXPECT_EQ(p[1], 0.0);
        ++red;
      } else {
        EXPECT_EQ(p[0], 0.5) << i << "," << j;
      }
    }
  }
  EXPECT_EQ(red, 2u * 17 + 2u * 6);
  EXPECT_EQ(img.data()[0], 0.5);
}

TEST(Eval, CommandComparesCheckpointsAndSkipsMissingImages) {
  TempDir dir;
  net::save_checkpoint(single_cell_model(5.0), dir / "base.ckpt");
  net::save_checkpoint(single_cell_model(-5.0), dir / "edge.ckpt");
  data::write_image(dir / "a.ppm", constant_image(32, 32, 0.2));
  std::ofstream(dir / "ann.txt") << "a.ppm 10 13 22 13 22 19 10 19\nlost.ppm 1 1 9 1 9 5 1 5\n";

  EvalRequest req;
  req.checkpoints = {dir / "base.ckpt", dir / "edge.ckpt"};
  req.data.annotations = dir / "ann.txt";
  req.csv_dir = dir / "csv";
  std::ostringstream out, err;
  ASSERT_EQ(cmd_eval(req, out, err), kExitOk) << err.str();
  EXPECT_NE(err.str().find("lost.ppm"), std::string::npos);
  EXPECT_NE(out.str().find("skipped 1"), std::string::npos);
  EXPECT_NE(out.str().find("delta"), std::string::npos);
  EXPECT_NE(out.str().find("edge "), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "csv" / "base.eval.csv"));
  EXPECT_NE(slurp(dir / "csv" / "edge.eval.csv").find("a.ppm,0,0,,0,0"), std::string::npos);

  req.checkpoints = {dir / "missing.ckpt"};
  EXPECT_EQ(cmd_eval(req, out, err), kExitIo);
}

TEST(GradCheck, FreshModelPassesAndCorruptionFails) {
  GradCheckRequest req;
  req.samples_per_tensor = 3;
  std::ostringstream out, err;
  EXPECT_EQ(cmd_gradcheck(req, out, err), kExitOk) << out.str();
  const auto report = run_gradcheck(req);
  EXPECT_TRUE(report.passed);
  for (const auto& [name, e] : report.trainable) EXPECT_EQ(name.rfind("edge.", 0), std::string::npos);
  ASSERT_EQ(report.frozen_inputs.size(), 2u);
  EXPECT_EQ(report.frozen_inputs[0].first, "edge.sobel_x");

  req.corrupt_kernel_grad = 1.01;
  std::ostringstream bad;
  EXPECT_EQ(cmd_gradcheck(req, bad, err), kExitValidation);
  EXPECT_NE(bad.str().find("FAIL"), std::string::npos);
}

TEST(GradCheck, BaselineHasNoFrozenInputs) {
  GradCheckRequest req;
  req.net.variant = net::Variant::kBaseline;
  req.samples_per_tensor = 2;
  const auto report = run_gradcheck(req);
  EXPECT_TRUE(report.passed);
  EXPECT_TRUE(report.frozen_inputs.empty());
}

std::vector<std::vector<double>> read_raw(const fs::path& p) {
  std::vector<std::vector<double>> rows;
  std::istringstream in(slurp(p));
  for (std::string line; std::getline(in, line);) {
    std::istringstream ls(line);
    rows.emplace_back();
    for (double v; ls >> v;) rows.back().push_back(v);
  }
  return rows;
}

TEST(Edges, ConstantImageGivesUniformMaps) {
  TempDir dir;
  data::write_image(dir / "c.ppm", constant_image(12, 10, 0.4));
  std::ostringstream out, err;
  ASSERT_EQ(cmd_edges({dir / "c.ppm", dir / "e", false, false}, out, err), kExitOk);
  for (const char* n : {"sobel_x", "sobel_y", "sobel_xy"}) {
    const auto img = data::read_image(dir / "e" / (std::string("c.") + n + ".pgm"));
    EXPECT_EQ(img.shape(), (nn::Shape{12, 10, 3}));
    for (double v : img.data()) ASSERT_EQ(v, img.data()[0]) << n;
  }
  EXPECT_FALSE(fs::exists(dir / "e" / "c.sobel_x.txt"));
}

TEST(Edges, VerticalEdgeLightsUpSobelX) {
  TempDir dir;
  Tensor card({16, 16, 3}, 0.0);
  auto d = card.mutable_data();
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 8; j < 16; ++j)
      for (std::size_t c = 0; c < 3; ++c) d[(i * 16 + j) * 3 + c] = 1.0;
  data::write_image(dir / "card.ppm", card);
  std::ostringstream out, err;
  ASSERT_EQ(cmd_edges({dir / "card.ppm", dir / "e", false, true}, out, err), kExitOk);

  const auto gx = data::read_image(dir / "e" / "card.sobel_x.pgm");
  for (std::size_t i = 0; i < 16; ++i) {
    for (std::size_t j = 0; j < 16; ++j) {
      const double v = gx.data()[(i * 16 + j) * 3];
      EXPECT_EQ(v, (j == 7 || j == 8) ? 1.0 : 0.0) << i << "," << j;
    }
  }
  const auto gy = data::read_image(dir / "e" / "card.sobel_y.pgm");
  for (double v : gy.data()) ASSERT_EQ(v, gy.data()[0]);

  // Hand Sobel: 1 + 2 + 1 across the step.
  const auto raw = read_raw(dir / "e" / "card.sobel_x.txt");
  ASSERT_EQ(raw.size(), 16u);
  ASSERT_EQ(raw[5].size(), 16u);
  EXPECT_NEAR(raw[5][7], 4.0, 1e-12);
  EXPECT_NEAR(raw[5][8], 4.0, 1e-12);
  EXPECT_NEAR(raw[5][3], 0.0, 1e-12);
}

TEST(Edges, PresmoothReducesMagnitudeVariance) {
  TempDir dir;
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor noisy({32, 32, 3});
  for (auto& v : noisy.mutable_data()) v = u(rng);
  data::write_image(dir / "n.ppm", noisy);
  std::ostringstream out, err;
  ASSERT_EQ(cmd_edges({dir / "n.ppm", dir / "raw", false, true}, out, err), kExitOk);
  ASSERT_EQ(cmd_edges({dir / "n.ppm", dir / "smooth", true, true}, out, err), kExitOk);
  auto variance = [](const std::vector<std::vector<double>>& rows) {
    double s = 0, s2 = 0, n = 0;
    for (const auto& r : rows)
      for (double v : r) s += v, s2 += v * v, ++n;
    return s2 / n - (s / n) * (s / n);
  };
  const double v_raw = variance(read_raw(dir / "raw" / "n.sobel_xy.txt"));
  const double v_smooth = variance(read_raw(dir / "smooth" / "n.sobel_xy.txt"));
  EXPECT_LT(v_smooth, 0.5 * v_raw);
  EXPECT_NE(slurp(dir / "raw" / "n.sobel_xy.pgm"), slurp(dir / "smooth" / "n.sobel_xy.pgm"));
}

TEST(Edges, UnreadableImageExitsTwo) {
  TempDir dir;
  std::ostringstream out, err;
  EXPECT_EQ(cmd_edges({dir / "none.ppm", dir / "e", false, false}, out, err), kExitIo);
}

TEST(Synth, WritesParsableDataset) {
  TempDir dir;
  SynthRequest req;
  req.synth.image_height = req.synth.image_width = 96;
  req.synth.max_plate_width = 60;
  req.count = 5;
  req.first_seed = 20;
  req.out_dir = dir / "syn";
  std::ostringstream out, err;
  ASSERT_EQ(cmd_synth(req, out, err), kExitOk);

  const auto loaded = data::load_dataset(dir / "syn" / "annotations.txt");
  EXPECT_TRUE(loaded.skipped.empty());
  std::size_t expected_plates = 0;
  for (std::uint64_t s = 20; s < 25; ++s) expected_plates += data::synth_scene(req.synth, s).quads.size();
  std::size_t plates = 0;
  for (const auto& s : loaded.samples) {
    plates += s.quads.size();
    const auto seed = std::stoull(s.id.substr(6, 6));
    EXPECT_EQ(s.quads, data::synth_scene(req.synth, seed).quads);
  }
  EXPECT_EQ(plates, expected_plates);
  EXPECT_TRUE(fs::exists(dir / "syn" / "scene_000024.ppm"));

  req.synth.max_plate_width = 500;
  EXPECT_EQ(cmd_synth(req, out, err), kExitIo);
}

}  // namespace
}  // namespace wpod::app
