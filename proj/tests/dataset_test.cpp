// Copyright 2026 The wpod-edge Authors
// SPDX-License-Identifier: Apache-2.0

#include "wpod/dataset.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include <unistd.h>

#include "wpod/image.hpp"

namespace wpod::data {
namespace {

using geometry::AffineMap;
using geometry::Point2;
using nn::Tensor;

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() : path_(fs::temp_directory_path() / ("wpod_data_" + std::to_string(counter_++) + "_" +
                                                 std::to_string(::getpid()))) {
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& name) const { return path_ / name; }
  const fs::path& path() const { return path_; }

 private:
  static inline int counter_ = 0;
  fs::path path_;
};

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ImageIoError::Kind read_error(const fs::path& p) {
  try {
    read_image(p);
  } catch (const ImageIoError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "read_image succeeded on " << p;
  return ImageIoError::Kind::kIo;
}

Quad box(double x0, double y0, double x1, double y1) {
  return Quad{{Point2{x0, y0}, Point2{x1, y0}, Point2{x1, y1}, Point2{x0, y1}}};
}

Tensor random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(h * w * 3);
  for (auto& x : v) x = u(rng);
  return Tensor({h, w, 3}, std::move(v));
}

TEST(ImageIo, WhitePixel) {
  TempDir dir;
  write_bytes(dir / "w.ppm", std::string("P6\n1 1\n255\n") + "\xff\xff\xff");
  const auto img = read_image(dir / "w.ppm");
  ASSERT_EQ(img.shape(), (nn::Shape{1, 1, 3}));
  for (double v : img.data()) EXPECT_EQ(v, 1.0);
}

TEST(ImageIo, GrayIsReplicatedAndCommentsSkipped) {
  TempDir dir;
  write_bytes(dir / "g.pgm", std::string("P5\n# made by hand\n2 1\n# max\n255\n") + std::string("\x00\x80", 2));
  const auto img = read_image(dir / "g.pgm");
  ASSERT_EQ(img.shape(), (nn::Shape{1, 2, 3}));
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_EQ(img.data()[c], 0.0);
    EXPECT_EQ(img.data()[3 + c], 128 / 255.0);
  }
}

TEST(ImageIo, RoundTripWithinQuantization) {
  TempDir dir;
  const auto img = random_image(17, 23, 1);
  write_image(dir / "r.ppm", img);
  const auto back = read_image(dir / "r.ppm");
  ASSERT_EQ(back.shape(), img.shape());
  double worst = 0.0;
  for (std::size_t i = 0; i < img.size(); ++i) {
    worst = std::max(worst, std::abs(back.data()[i] - img.data()[i]));
  }
  EXPECT_LE(worst, 1.0 / 510.0 + 1e-15);
}

TEST(ImageIo, GrayWriterRoundTrip) {
  TempDir dir;
  Tensor g({2, 3}, std::vector<double>{0, 0.25, 0.5, 0.75, 1.0, 1.2});
  write_gray_image(dir / "g.pgm", g);
  const auto back = read_image(dir / "g.pgm");
  EXPECT_EQ(back.shape(), (nn::Shape{2, 3, 3}));
  EXPECT_NEAR(back.data()[3 * 3], 0.75, 1.0 / 510);
  EXPECT_EQ(back.data()[5 * 3], 1.0);
}

TEST(ImageIo, Errors) {
  TempDir dir;
  write_bytes(dir / "ascii.ppm", "P3\n1 1\n255\n255 255 255\n");
  EXPECT_EQ(read_error(dir / "ascii.ppm"), ImageIoError::Kind::kUnsupported);
  write_bytes(dir / "magic.ppm", "JFIF....");
  EXPECT_EQ(read_error(dir / "magic.ppm"), ImageIoError::Kind::kFormat);
  write_bytes(dir / "short.ppm", std::string("P6\n2 2\n255\n") + "\x01\x02\x03");
  EXPECT_EQ(read_error(dir / "short.ppm"), ImageIoError::Kind::kTruncated);
  write_bytes(dir / "header.ppm", "P6\n2 ");
  EXPECT_EQ(read_error(dir / "header.ppm"), ImageIoError::Kind::kTruncated);
  write_bytes(dir / "deep.ppm", "P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00");
  EXPECT_EQ(read_error(dir / "deep.ppm"), ImageIoError::Kind::kUnsupported);
  EXPECT_EQ(read_error(dir / "missing.ppm"), ImageIoError::Kind::kIo);
}

TEST(Annotations, ExampleLineIsCanonicalized) {
  const auto a = parse_annotations("img1.ppm 10 10 110 12 108 60 8 58\n");
  ASSERT_EQ(a.size(), 1u);
  EXPECT_EQ(a[0].image_path, "img1.ppm");
  ASSERT_EQ(a[0].quads.size(), 1u);
  const Quad expect{{Point2{10, 10}, Point2{110, 12}, Point2{108, 60}, Point2{8, 58}}};
  EXPECT_EQ(a[0].quads[0], expect);

  // Same corners listed counter-clockwise from the bottom right.
  const auto b = parse_annotations("img1.ppm 108 60 110 12 10 10 8 58\n");
  EXPECT_EQ(b[0].quads[0], expect);
}

TEST(Annotations, Errors) {
  try {
    parse_annotations("# header\nimg.ppm 1 2 3 4 5 6 7\n");
    FAIL();
  } catch (const AnnotationError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  EXPECT_THROW(parse_annotations("img.ppm 0 0 10 0 10 x 0 10\n"), AnnotationError);
  // (5, 2) lies inside the triangle of the other three corners.
  EXPECT_THROW(parse_annotations("img.ppm 0 0 10 0 5 2 5 10\n"), AnnotationError);
  EXPECT_THROW(parse_annotations("img.ppm 0 0 1 1 2 2 3 3\n"), AnnotationError);
  EXPECT_TRUE(parse_annotations("").empty());
  EXPECT_TRUE(parse_annotations("# only a comment\n\n   \n").empty());
}

TEST(Annotations, GroupingAndRoundTrip) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<AnnotatedImage> entries;
  for (int i = 0; i < 20; ++i) {
    AnnotatedImage e{"dir/img" + std::to_string(i) + ".ppm", {}};
    for (int k = 0; k < i % 3 + 1; ++k) {
      const double x = 500 * u(rng), y = 500 * u(rng), w = 20 + 100 * u(rng);
      e.quads.push_back(Quad::canonical(box(x, y, x + w, y + w / 3 + 0.1 * u(rng)).corners));
    }
    entries.push_back(e);
  }
  const auto text = format_annotations(entries);
  EXPECT_EQ(parse_annotations(text), entries);

  TempDir dir;
  write_annotations(dir / "a.txt", entries);
  EXPECT_EQ(load_annotations(dir / "a.txt"), entries);

  const auto g = parse_annotations("a.ppm 0 0 4 0 4 4 0 4\nb.ppm 0 0 4 0 4 4 0 4\na.ppm 5 5 9 5 9 9 5 9\n");
  ASSERT_EQ(g.size(), 2u);
  EXPECT_EQ(g[0].quads.size(), 2u);
  EXPECT_EQ(g[1].image_path, "b.ppm");
}

TEST(Annotations, LoadDatasetSkipsMissingImages) {
  TempDir dir;
  write_image(dir / "one.ppm", random_image(8, 8, 1));
  write_bytes(dir / "a.txt", "one.ppm 1 1 6 1 6 4 1 4\nnone.ppm 1 1 6 1 6 4 1 4\n");
  const auto d = load_dataset(dir / "a.txt");
  ASSERT_EQ(d.samples.size(), 1u);
  EXPECT_EQ(d.samples[0].id, "one.ppm");
  EXPECT_EQ(d.samples[0].quads.size(), 1u);
  ASSERT_EQ(d.skipped.size(), 1u);
  EXPECT_EQ(d.skipped[0], "none.ppm");
}

TEST(Synth, NoPlatesAndDeterminism) {
  SynthConfig cfg;
  cfg.min_plates = cfg.max_plates = 0;
  EXPECT_TRUE(synth_scene(cfg, 5).quads.empty());

  cfg = SynthConfig{};
  const auto a = synth_scene(cfg, 77);
  const auto b = synth_scene(cfg, 77);
  ASSERT_EQ(a.quads, b.quads);
  for (std::size_t i = 0; i < a.image.size(); ++i) ASSERT_EQ(a.image.data()[i], b.image.data()[i]);
  for (double v : a.image.data()) {
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
  }
}

TEST(Synth, QuadsConvexInBoundsAndLargeEnough) {
  SynthConfig cfg;
  cfg.image_height = cfg.image_width = 192;
  cfg.max_plate_width = 150;
  cfg.noise_stddev = 0.0;
  std::size_t plates = 0;
  for (std::uint64_t seed = 0; seed < 10000; ++seed) {
    const auto quads = synth_layout(cfg, seed);
    if (seed % 500 == 0) ASSERT_EQ(synth_scene(cfg, seed).quads, quads);
    for (const auto& q : quads) {
      ++plates;
      ASSERT_TRUE(geometry::is_valid_quad(q)) << seed;
      ASSERT_GT(geometry::signed_area(q.corners), 0.0) << seed;
      ASSERT_EQ(Quad::canonical(q.corners), q);
      for (int i = 0; i < 4; ++i) {
        const auto& p = q.corners[i];
        const auto& n = q.corners[(i + 1) % 4];
        ASSERT_GE(std::hypot(n.x - p.x, n.y - p.y), 8.0 - 1e-9) << seed;
        ASSERT_TRUE(p.x >= 0 && p.y >= 0 && p.x <= 192 && p.y <= 192) << seed;
      }
    }
    for (std::size_t i = 0; i < quads.size(); ++i)
      for (std::size_t j = i + 1; j < quads.size(); ++j)
        ASSERT_EQ(geometry::qiou(quads[i], quads[j]), 0.0) << seed;
  }
  EXPECT_GT(plates, 8000u);
}

TEST(Synth, PlateInteriorHasEdges) {
  SynthConfig cfg;
  cfg.min_plates = cfg.max_plates = 1;
  cfg.noise_stddev = 0.0;
  const auto s = synth_scene(cfg, 11);
  ASSERT_EQ(s.quads.size(), 1u);
  const auto g = s.quads[0].centroid();
  // Horizontal scan through the plate center crosses several dark bars.
  int transitions = 0;
  const auto row = static_cast<std::size_t>(g.y);
  const std::size_t w = cfg.image_width;
  double prev = s.image.data()[(row * w + static_cast<std::size_t>(g.x) - 30) * 3];
  for (auto x = static_cast<std::size_t>(g.x) - 30; x < static_cast<std::size_t>(g.x) + 30; ++x) {
    const double v = s.image.data()[(row * w + x) * 3];
    if (std::abs(v - prev) > 0.3) ++transitions;
    prev = v;
  }
  EXPECT_GE(transitions, 2);
}

TEST(Synth, ConfigValidationAndRoundTrip) {
  SynthConfig cfg;
  cfg.max_aspect = 6.0;  // 40 px / 6 < 8 px tall
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = SynthConfig{};
  cfg.max_plate_width = 300;
  EXPECT_THROW(cfg.validate(), ConfigError);

  cfg = SynthConfig{};
  cfg.image_height = 128;
  cfg.max_plate_width = 100;
  cfg.noise_stddev = 0.01;
  const auto back = SynthConfig::from_config(KeyValueConfig::parse(cfg.to_config().to_text()));
  EXPECT_EQ(back.image_height, 128u);
  EXPECT_EQ(back.max_plate_width, 100.0);
  EXPECT_EQ(back.noise_stddev, 0.01);
}

TEST(Augment, DisabledIsIdentity) {
  const Sample s{random_image(32, 48, 2), {box(4, 4, 30, 14)}, "x"};
  const auto a = augment(s, AugmentConfig::none(), 9);
  EXPECT_EQ(a.quads, s.quads);
  EXPECT_EQ(a.id, "x");
  for (std::size_t i = 0; i < s.image.size(); ++i) ASSERT_EQ(a.image.data()[i], s.image.data()[i]);
  EXPECT_FALSE(a.image.same_storage(s.image));
}

TEST(Augment, MirrorReflectsAndRecanonicalizes) {
  auto cfg = AugmentConfig::none();
  cfg.mirror = true;
  cfg.mirror_prob = 1.0;
  const Quad q{{Point2{10, 10}, Point2{40, 12}, Point2{38, 24}, Point2{9, 22}}};
  const Sample s{random_image(32, 64, 3), {q}, "m"};
  const auto a = augment(s, cfg, 1);
  ASSERT_EQ(a.quads.size(), 1u);
  const Quad expect{{Point2{64 - 40, 12}, Point2{64 - 10, 10}, Point2{64 - 9, 22}, Point2{64 - 38, 24}}};
  EXPECT_EQ(a.quads[0], expect);
  for (std::size_t i = 0; i < 32; ++i)
    for (std::size_t j = 0; j < 64; ++j)
      for (std::size_t c = 0; c < 3; ++c)
        ASSERT_NEAR(a.image.data()[(i * 64 + j) * 3 + c], s.image.data()[(i * 64 + 63 - j) * 3 + c],
                    1e-12);
}

TEST(Augment, RotationIsRigidAboutCenter) {
  auto cfg = AugmentConfig::none();
  cfg.rotation = true;
  cfg.rotation_deg = 90.0;
  const Sample s{random_image(64, 64, 4), {box(22, 27, 42, 37)}, "r"};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto m = augment_transform(s, cfg, seed);
    EXPECT_NEAR(m.determinant(), 1.0, 1e-12);
    EXPECT_NEAR(m.a11, m.a22, 1e-12);
    EXPECT_NEAR(m.a12, -m.a21, 1e-12);
    const auto c = geometry::apply_affine(m, Point2{32, 32});
    EXPECT_NEAR(c.x, 32, 1e-9);
    EXPECT_NEAR(c.y, 32, 1e-9);
    const auto a = augment(s, cfg, seed);
    ASSERT_EQ(a.quads.size(), 1u);
    EXPECT_NEAR(geometry::polygon_area(a.quads[0].corners), 200.0, 1e-9);
  }
  // A quarter turn keeps a centered square and changes a centered rectangle.
  const auto quarter = geometry::compose(
      AffineMap::translation(32, 32),
      geometry::compose(AffineMap::rotation(std::acos(-1.0) / 2), AffineMap::translation(-32, -32)));
  const Quad sq = box(22, 22, 42, 42), rect = box(22, 27, 42, 37);
  EXPECT_NEAR(geometry::qiou(sq, Quad::canonical(geometry::apply_affine(quarter, sq).corners)), 1.0,
              1e-12);
  EXPECT_NEAR(geometry::qiou(rect, Quad::canonical(geometry::apply_affine(quarter, rect).corners)),
              1.0 / 3.0, 1e-12);
}

TEST(Augment, DeterministicPerSeed) {
  SynthConfig sc;
  sc.image_height = sc.image_width = 96;
  sc.max_plate_width = 80;
  const auto s = synth_scene(sc, 3);
  const AugmentConfig cfg;
  const auto a = augment(s, cfg, 42);
  const auto b = augment(s, cfg, 42);
  EXPECT_EQ(a.quads, b.quads);
  for (std::size_t i = 0; i < a.image.size(); ++i) ASSERT_EQ(a.image.data()[i], b.image.data()[i]);
  const auto c = augment(s, cfg, 43);
  bool differs = false;
  for (std::size_t i = 0; i < a.image.size(); ++i) differs |= a.image.data()[i] != c.image.data()[i];
  EXPECT_TRUE(differs);
}

TEST(Augment, KeptPlatesAreVisible) {
  AugmentConfig cfg;
  cfg.translate_frac = 0.45;
  const Sample s{random_image(64, 64, 5), {box(0, 0, 6, 3)}, "corner"};
  int empty = 0;
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    const auto a = augment(s, cfg, seed);
    empty += a.quads.empty();
    for (const auto& q : a.quads) {
      const std::array<Point2, 4> frame{Point2{0, 0}, Point2{64, 0}, Point2{64, 64}, Point2{0, 64}};
      EXPECT_GT(geometry::polygon_area(geometry::clip_convex(q.corners, frame)), 0.0);
    }
  }
  EXPECT_LT(empty, 300);
}

// Places a Gaussian dot at every quad corner, applies geometric augmentation
// to the pixels, and locates the dots again by intensity centroid.
TEST(Augment, LabelsFollowPixels) {
  const std::size_t n = 128;
  const Quad q = Quad::canonical(std::array<Point2, 4>{Point2{40, 50}, Point2{90, 45}, Point2{95, 80},
                                                       Point2{45, 85}});
  Tensor img({n, n, 3}, 0.0);
  auto d = img.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double v = 0.0;
      for (const auto& p : q.corners) {
        const double dx = j + 0.5 - p.x, dy = i + 0.5 - p.y;
        v += std::exp(-(dx * dx + dy * dy) / (2 * 1.5 * 1.5));
      }
      for (std::size_t c = 0; c < 3; ++c) d[(i * n + j) * 3 + c] = v;
    }
  }
  const Sample s{img, {q}, "dots"};

  std::vector<AugmentConfig> configs;
  auto base = AugmentConfig::none();
  for (int k = 0; k < 8; ++k) {
    auto c = base;
    switch (k) {
      case 0: c.rectification = true, c.rectification_prob = 1.0; break;
      case 1: c.aspect = true; break;
      case 2: c.centering = true, c.centering_prob = 1.0; break;
      case 3: c.scale = true; break;
      case 4: c.rotation = true; break;
      case 5: c.mirror = true, c.mirror_prob = 1.0; break;
      case 6: c.translate = true; break;
      case 7: c.crop = true; break;
    }
    configs.push_back(c);
  }
  AugmentConfig all;
  all.colorspace = false;
  all.rectification_prob = all.centering_prob = 0.5;
  configs.push_back(all);

  int checked = 0;
  for (const auto& cfg : configs) {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
      const auto a = augment(s, cfg, seed);
      if (a.quads.size() != 1) continue;
      for (const auto& p : a.quads[0].corners) {
        if (p.x < 12 || p.y < 12 || p.x > n - 12 || p.y > n - 12) continue;
        double sw = 0, sx = 0, sy = 0;
        for (auto i = static_cast<std::size_t>(p.y) - 8; i <= static_cast<std::size_t>(p.y) + 8; ++i) {
          for (auto j = static_cast<std::size_t>(p.x) - 8; j <= static_cast<std::size_t>(p.x) + 8; ++j) {
            const double v = a.image.data()[(i * n + j) * 3];
            sw += v;
            sx += v * (j + 0.5);
            sy += v * (i + 0.5);
          }
        }
        EXPECT_LT(std::hypot(sx / sw - p.x, sy / sw - p.y), 0.5) << "seed " << seed;
        ++checked;
      }
    }
  }
  EXPECT_GT(checked, 150);
}

TEST(Augment, ConfigRoundTripAndValidation) {
  AugmentConfig c;
  c.rotation_deg = 7.5;
  c.mirror = false;
  const auto back = AugmentConfig::from_config(KeyValueConfig::parse(c.to_config().to_text()));
  EXPECT_EQ(back.rotation_deg, 7.5);
  EXPECT_FALSE(back.mirror);
  EXPECT_TRUE(back.crop);
  c.mirror_prob = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = AugmentConfig{};
  c.scale_min = 2.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Letterbox, WideImagePadsVertically) {
  const Sample s{random_image(32, 64, 6), {box(10, 4, 50, 20)}, "wide"};
  const auto lb = letterbox(s, 64, 64);
  ASSERT_EQ(lb.image.shape(), (nn::Shape{64, 64, 3}));
  EXPECT_EQ(lb.quads[0], box(10, 20, 50, 36));
  for (std::size_t i = 0; i < 64; ++i) {
    for (std::size_t j = 0; j < 64; ++j) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = lb.image.data()[(i * 64 + j) * 3 + c];
        if (i < 16 || i >= 48) {
          ASSERT_EQ(v, kFillValue);
        } else {
          ASSERT_NEAR(v, s.image.data()[((i - 16) * 64 + j) * 3 + c], 1e-12);
        }
      }
    }
  }
}

TEST(Letterbox, HalvingScalesQuads) {
  const Sample s{random_image(128, 128, 7), {box(10, 20, 70, 44)}, "big"};
  const auto lb = letterbox(s, 64, 64);
  EXPECT_EQ(lb.quads[0], box(5, 10, 35, 22));
}

TEST(MakeBatch, ShapesTargetsAndErrors) {
  SynthConfig sc;
  sc.image_height = sc.image_width = 64;
  sc.min_plate_width = 24;
  sc.max_plate_width = 48;
  sc.max_aspect = 3.0;
  std::vector<Sample> samples{synth_scene(sc, 1), synth_scene(sc, 2), synth_scene(sc, 3)};
  const auto one = make_batch(samples, 1, 64, 64, 7.75);
  EXPECT_EQ(one.images.shape(), (nn::Shape{1, 64, 64, 3}));
  EXPECT_EQ(one.targets.size(), 1u);

  const auto b = make_batch(samples, 3, 128, 128, 7.75);
  EXPECT_EQ(b.images.shape(), (nn::Shape{3, 128, 128, 3}));
  for (std::size_t i = 0; i < 3; ++i) {
    const auto expect = loss::build_target_grid(b.quads[i], 128, 128, 7.75);
    ASSERT_EQ(b.quads[i].size(), samples[i].quads.size());
    EXPECT_EQ(b.targets[i].positive_count(), expect.positive_count());
    for (std::size_t k = 0; k < b.quads[i].size(); ++k) {
      EXPECT_NEAR(b.quads[i][k].corners[0].x, 2 * samples[i].quads[k].corners[0].x, 1e-12);
    }
  }
  EXPECT_THROW(make_batch(samples, 0, 64, 64, 7.75), std::invalid_argument);
  EXPECT_THROW(make_batch(samples, 4, 64, 64, 7.75), std::invalid_argument);
}

}  // namespace
}  // namespace wpod::data
