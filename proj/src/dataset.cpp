// Copyright 2026 The wpod-edge Authors
// SPDX-License-Identifier: Apache-2.0

#include "wpod/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <type_traits>

#include "wpod/image.hpp"

namespace wpod::data {
namespace {

using geometry::AffineMap;
using geometry::Point2;

// --- netpbm -----------------------------------------------------------------

class HeaderReader {
 public:
  HeaderReader(std::istream& in, const std::filesystem::path& path) : in_(in), path_(path) {}

  std::size_t next_number() {
    skip_space_and_comments();
    std::size_t v = 0;
    int digits = 0;
    while (std::isdigit(in_.peek())) {
      v = v * 10 + static_cast<std::size_t>(in_.get() - '0');
      if (++digits > 9) fail(ImageIoError::Kind::kFormat, "header number too large");
    }
    if (digits == 0) {
      fail(in_.eof() ? ImageIoError::Kind::kTruncated : ImageIoError::Kind::kFormat,
           "malformed header");
    }
    return v;
  }

  [[noreturn]] void fail(ImageIoError::Kind kind, const std::string& what) const {
    throw ImageIoError(kind, path_.string() + ": " + what);
  }

 private:
  void skip_space_and_comments() {
    for (;;) {
      const int c = in_.peek();
      if (c == '#') {
        std::string ignored;
        std::getline(in_, ignored);
      } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
        in_.get();
      } else {
        return;
      }
    }
  }

  std::istream& in_;
  const std::filesystem::path& path_;
};

unsigned char quantize(double v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

void write_pnm(const std::filesystem::path& path, const char* magic, std::size_t w, std::size_t h,
               const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ImageIoError(ImageIoError::Kind::kIo, "cannot write " + path.string());
  out << magic << '\n' << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ImageIoError(ImageIoError::Kind::kIo, "write failed for " + path.string());
}

// --- annotations ------------------------------------------------------------

bool parse_number(std::string_view token, double& out) {
  const auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), out);
  return ec == std::errc() && ptr == token.data() + token.size() && std::isfinite(out);
}

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

// --- randomness -------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform(double lo, double hi) {
    return lo + (hi - lo) * std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
  }
  bool chance(double p) { return uniform(0.0, 1.0) < p; }
  std::size_t index(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(engine_);
  }
  double normal(double stddev) { return std::normal_distribution<double>(0.0, stddev)(engine_); }

 private:
  std::mt19937_64 engine_;
};

// Decorrelates the color draws from the geometric ones for the same seed.
constexpr std::uint64_t kColorStream = 0x9E3779B97F4A7C15ull;

double radians(double deg) { return deg * std::numbers::pi / 180.0; }

AffineMap about(const AffineMap& linear, Point2 c) {
  return geometry::compose(AffineMap::translation(c.x, c.y),
                           geometry::compose(linear, AffineMap::translation(-c.x, -c.y)));
}

double distance(Point2 a, Point2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

bool visible_in_frame(const Quad& q, double w, double h) {
  const std::array<Point2, 4> frame{Point2{0, 0}, Point2{w, 0}, Point2{w, h}, Point2{0, h}};
  return geometry::polygon_area(geometry::clip_convex(q.corners, frame)) > 0.0;
}

// --- synthetic scenes -------------------------------------------------------

struct PlateStyle {
  std::array<double, 3> paper;
  std::array<double, 3> ink;
  double border;                                // fraction of plate height
  std::vector<std::pair<double, double>> bars;  // glyph x-extents as fractions of width
  double glyph_top, glyph_bottom;               // fractions of height
};

PlateStyle random_style(Rng& rng) {
  PlateStyle s;
  const double level = rng.uniform(0.82, 1.0);
  const bool yellow = rng.chance(0.3);
  s.paper = {level, level * rng.uniform(0.95, 1.0), yellow ? level * 0.55 : level};
  const double ink = rng.uniform(0.0, 0.2);
  s.ink = {ink, ink, ink};
  s.border = rng.uniform(0.05, 0.1);
  const std::size_t glyphs = rng.index(4, 8);
  const double left = 0.1, right = 0.9;
  const double pitch = (right - left) / static_cast<double>(glyphs);
  for (std::size_t g = 0; g < glyphs; ++g) {
    const double x0 = left + pitch * static_cast<double>(g);
    const double width = pitch * rng.uniform(0.35, 0.7);
    const double offset = rng.uniform(0.0, pitch - width);
    s.bars.emplace_back(x0 + offset, x0 + offset + width);
  }
  s.glyph_top = rng.uniform(0.2, 0.3);
  s.glyph_bottom = rng.uniform(0.7, 0.8);
  return s;
}

// Color at plate-frame coordinates (u, v) in [0, 1]^2.
const std::array<double, 3>& plate_color(const PlateStyle& s, double u, double v, double aspect) {
  const double bu = s.border / aspect;
  if (u < bu || u > 1.0 - bu || v < s.border || v > 1.0 - s.border) return s.ink;
  if (v >= s.glyph_top && v <= s.glyph_bottom) {
    for (const auto& [a, b] : s.bars) {
      if (u >= a && u <= b) return s.ink;
    }
  }
  return s.paper;
}

struct PlacedPlate {
  AffineMap frame_to_image;  // maps [0, w] x [0, h] plate coordinates to pixels
  double width, height;
  Quad quad;
};

std::optional<PlacedPlate> place_plate(const SynthConfig& cfg, Rng& rng,
                                       std::span<const PlacedPlate> existing) {
  const auto W = static_cast<double>(cfg.image_width);
  const auto H = static_cast<double>(cfg.image_height);
  constexpr double kMargin = 2.0;
  for (int attempt = 0; attempt < 64; ++attempt) {
    const double w = rng.uniform(cfg.min_plate_width, cfg.max_plate_width);
    const double h = w / rng.uniform(cfg.min_aspect, cfg.max_aspect);
    const double theta = radians(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg));
    const double shear = rng.uniform(-cfg.max_shear, cfg.max_shear);
    const AffineMap linear = geometry::compose(
        AffineMap::rotation(theta),
        geometry::compose(AffineMap{1, shear, 0, 1, 0, 0}, AffineMap::translation(-w / 2, -h / 2)));
    std::array<Point2, 4> c{Point2{0, 0}, Point2{w, 0}, Point2{w, h}, Point2{0, h}};
    double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
    for (auto& p : c) {
      p = geometry::apply_affine(linear, p);
      x0 = std::min(x0, p.x);
      x1 = std::max(x1, p.x);
      y0 = std::min(y0, p.y);
      y1 = std::max(y1, p.y);
    }
    if (x1 - x0 > W - 2 * kMargin || y1 - y0 > H - 2 * kMargin) continue;
    const double tx = rng.uniform(kMargin - x0, W - kMargin - x1);
    const double ty = rng.uniform(kMargin - y0, H - kMargin - y1);
    PlacedPlate plate{geometry::compose(AffineMap::translation(tx, ty), linear), w, h, {}};
    for (auto& p : c) p = {p.x + tx, p.y + ty};
    plate.quad = Quad::canonical(c);
    const bool overlaps = std::any_of(existing.begin(), existing.end(), [&](const PlacedPlate& o) {
      return geometry::qiou(o.quad, plate.quad) > 0.0;
    });
    if (!overlaps) return plate;
  }
  return std::nullopt;
}

void fill_background(const SynthConfig& cfg, Rng& rng, std::span<double> px) {
  const std::size_t W = cfg.image_width, H = cfg.image_height;
  std::array<double, 3> c0, c1;
  for (auto& v : c0) v = rng.uniform(0.15, 0.85);
  for (auto& v : c1) v = rng.uniform(0.15, 0.85);
  const double phi = rng.uniform(0.0, 2 * std::numbers::pi);
  const double dx = std::cos(phi), dy = std::sin(phi);
  const double span = std::abs(dx) * W + std::abs(dy) * H;
  struct Wave {
    double kx, ky, phase, amp;
  };
  std::array<Wave, 3> waves;
  for (auto& wv : waves) {
    wv = {rng.uniform(-0.08, 0.08), rng.uniform(-0.08, 0.08), rng.uniform(0.0, 6.3),
          rng.uniform(0.0, 0.06)};
  }
  for (std::size_t i = 0; i < H; ++i) {
    for (std::size_t j = 0; j < W; ++j) {
      const double x = j + 0.5, y = i + 0.5;
      const double t = std::clamp(
          (dx * (x - W / 2.0) + dy * (y - H / 2.0)) / std::max(span, 1.0) + 0.5, 0.0, 1.0);
      double wave = 0.0;
      for (const auto& wv : waves) wave += wv.amp * std::sin(wv.kx * x + wv.ky * y + wv.phase);
      for (std::size_t c = 0; c < 3; ++c) {
        px[(i * W + j) * 3 + c] = (1 - t) * c0[c] + t * c1[c] + wave;
      }
    }
  }
  // Plain rectangles without glyphs, so edges alone do not identify a plate.
  const std::size_t clutter = rng.index(0, 3);
  for (std::size_t k = 0; k < clutter; ++k) {
    const double rw = rng.uniform(8.0, W / 3.0), rh = rng.uniform(8.0, H / 3.0);
    const double rx = rng.uniform(0.0, W - rw), ry = rng.uniform(0.0, H - rh);
    std::array<double, 3> col;
    for (auto& v : col) v = rng.uniform(0.05, 0.95);
    const auto i1 = std::min(H, static_cast<std::size_t>(ry + rh));
    const auto j1 = std::min(W, static_cast<std::size_t>(rx + rw));
    for (auto i = static_cast<std::size_t>(ry); i < i1; ++i) {
      for (auto j = static_cast<std::size_t>(rx); j < j1; ++j) {
        for (std::size_t c = 0; c < 3; ++c) px[(i * W + j) * 3 + c] = col[c];
      }
    }
  }
}

void render_plate(const SynthConfig& cfg, const PlacedPlate& plate, const PlateStyle& style,
                  std::span<double> px) {
  const std::size_t W = cfg.image_width, H = cfg.image_height;
  const auto inv = *geometry::invert_affine(plate.frame_to_image);
  double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
  for (const auto& p : plate.quad.corners) {
    x0 = std::min(x0, p.x);
    x1 = std::max(x1, p.x);
    y0 = std::min(y0, p.y);
    y1 = std::max(y1, p.y);
  }
  const auto j0 = static_cast<std::size_t>(std::max(0.0, std::floor(x0)));
  const auto i0 = static_cast<std::size_t>(std::max(0.0, std::floor(y0)));
  const auto j1 = std::min(W, static_cast<std::size_t>(std::ceil(x1)) + 1);
  const auto i1 = std::min(H, static_cast<std::size_t>(std::ceil(y1)) + 1);
  const double aspect = plate.width / plate.height;
  constexpr double kSub[2] = {0.25, 0.75};  // 2 x 2 supersampling
  for (std::size_t i = i0; i < i1; ++i) {
    for (std::size_t j = j0; j < j1; ++j) {
      double* out = &px[(i * W + j) * 3];
      std::array<double, 3> acc{0, 0, 0};
      for (double sy : kSub) {
        for (double sx : kSub) {
          const auto q = geometry::apply_affine(inv, Point2{j + sx, i + sy});
          const double u = q.x / plate.width, v = q.y / plate.height;
          const bool inside = u >= 0 && u <= 1 && v >= 0 && v <= 1;
          const auto& col = inside ? plate_color(style, u, v, aspect) : std::array<double, 3>{};
          for (std::size_t c = 0; c < 3; ++c) acc[c] += inside ? col[c] : out[c];
        }
      }
      for (std::size_t c = 0; c < 3; ++c) out[c] = acc[c] / 4.0;
    }
  }
}

// --- config plumbing --------------------------------------------------------

template <typename Config, typename Visitor>
void visit_fields(Config& c, Visitor&& v) {
  v("rectification", c.rectification);
  v("rectification_prob", c.rectification_prob);
  v("aspect", c.aspect);
  v("aspect_min", c.aspect_min);
  v("aspect_max", c.aspect_max);
  v("centering", c.centering);
  v("centering_prob", c.centering_prob);
  v("scale", c.scale);
  v("scale_min", c.scale_min);
  v("scale_max", c.scale_max);
  v("rotation", c.rotation);
  v("rotation_deg", c.rotation_deg);
  v("mirror", c.mirror);
  v("mirror_prob", c.mirror_prob);
  v("translate", c.translate);
  v("translate_frac", c.translate_frac);
  v("crop", c.crop);
  v("crop_frac", c.crop_frac);
  v("colorspace", c.colorspace);
  v("gain_min", c.gain_min);
  v("gain_max", c.gain_max);
  v("bias_min", c.bias_min);
  v("bias_max", c.bias_max);
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

}  // namespace

nn::Tensor read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageIoError(ImageIoError::Kind::kIo, "cannot open " + path.string());
  HeaderReader header(in, path);
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (in.gcount() < 2) header.fail(ImageIoError::Kind::kTruncated, "file too short");
  if (magic[0] != 'P' || magic[1] < '1' || magic[1] > '7') {
    header.fail(ImageIoError::Kind::kFormat, "not a netpbm file");
  }
  if (magic[1] != '5' && magic[1] != '6') {
    header.fail(ImageIoError::Kind::kUnsupported,
                std::string("netpbm variant P") + magic[1] + " is not supported (need P5 or P6)");
  }
  const std::size_t channels = magic[1] == '6' ? 3 : 1;
  const std::size_t w = header.next_number();
  const std::size_t h = header.next_number();
  const std::size_t maxval = header.next_number();
  if (w == 0 || h == 0) header.fail(ImageIoError::Kind::kFormat, "zero image dimension");
  if (maxval != 255) {
    header.fail(ImageIoError::Kind::kUnsupported, "maxval " + std::to_string(maxval) +
                                                      " is not supported (need 255)");
  }
  if (!std::isspace(in.get())) header.fail(ImageIoError::Kind::kFormat, "malformed header");

  std::vector<unsigned char> bytes(w * h * channels);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) {
    header.fail(ImageIoError::Kind::kTruncated, "pixel data truncated");
  }
  nn::Tensor img({h, w, 3});
  auto d = img.mutable_data();
  for (std::size_t p = 0; p < w * h; ++p) {
    for (std::size_t c = 0; c < 3; ++c) {
      d[p * 3 + c] = bytes[p * channels + (channels == 3 ? c : 0)] / 255.0;
    }
  }
  return img;
}

void write_image(const std::filesystem::path& path, const nn::Tensor& image) {
  image::require_rgb(image);
  std::vector<unsigned char> bytes(image.size());
  std::transform(image.data().begin(), image.data().end(), bytes.begin(), quantize);
  write_pnm(path, "P6", image::width(image), image::height(image), bytes);
}

void write_gray_image(const std::filesystem::path& path, const nn::Tensor& gray) {
  const bool ok = gray.rank() == 2 || (gray.rank() == 3 && gray.dim(2) == 1);
  if (!ok) throw nn::ShapeError("expected H x W gray image, got " + nn::to_string(gray.shape()));
  std::vector<unsigned char> bytes(gray.size());
  std::transform(gray.data().begin(), gray.data().end(), bytes.begin(), quantize);
  write_pnm(path, "P5", gray.dim(1), gray.dim(0), bytes);
}

std::vector<AnnotatedImage> parse_annotations(std::string_view text) {
  std::vector<AnnotatedImage> out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    const std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    const auto tokens = split_ws(line);
    if (tokens.empty() || tokens.front().front() == '#') continue;
    if (tokens.size() != 9) {
      throw AnnotationError(line_no, "expected an image path and 8 coordinates, got " +
                                         std::to_string(tokens.size()) + " fields");
    }
    std::array<Point2, 4> pts;
    for (std::size_t k = 0; k < 4; ++k) {
      if (!parse_number(tokens[1 + 2 * k], pts[k].x) || !parse_number(tokens[2 + 2 * k], pts[k].y)) {
        throw AnnotationError(line_no, "non-numeric coordinate");
      }
    }
    const Quad quad = Quad::canonical(pts);
    if (!geometry::is_valid_quad(quad)) {
      throw AnnotationError(line_no, "quad is concave or degenerate");
    }
    const std::string path(tokens.front());
    auto it = std::find_if(out.begin(), out.end(),
                           [&](const AnnotatedImage& a) { return a.image_path == path; });
    if (it == out.end()) {
      out.push_back({path, {}});
      it = out.end() - 1;
    }
    it->quads.push_back(quad);
  }
  return out;
}

std::vector<AnnotatedImage> load_annotations(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ImageIoError(ImageIoError::Kind::kIo, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_annotations(ss.str());
}

std::string format_annotations(std::span<const AnnotatedImage> entries) {
  std::string out;
  for (const auto& e : entries) {
    for (const auto& q : e.quads) {
      out += e.image_path;
      for (const auto& p : q.corners) out += ' ' + format_double(p.x) + ' ' + format_double(p.y);
      out += '\n';
    }
  }
  return out;
}

void write_annotations(const std::filesystem::path& path, std::span<const AnnotatedImage> entries) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ImageIoError(ImageIoError::Kind::kIo, "cannot write " + path.string());
  out << format_annotations(entries);
}

LoadedDataset load_dataset(const std::filesystem::path& annotation_file) {
  LoadedDataset out;
  const auto base = annotation_file.parent_path();
  for (auto& entry : load_annotations(annotation_file)) {
    const std::filesystem::path p(entry.image_path);
    try {
      out.samples.push_back({read_image(p.is_absolute() ? p : base / p), std::move(entry.quads),
                             entry.image_path});
    } catch (const ImageIoError&) {
      out.skipped.push_back(entry.image_path);
    }
  }
  return out;
}

void SynthConfig::validate() const {
  require(image_height >= 16 && image_width >= 16, "synth image must be at least 16x16");
  require(min_plates <= max_plates && max_plates <= 4, "synth plate count must satisfy 0 <= min <= max <= 4");
  require(min_aspect >= 1.0 && min_aspect <= max_aspect, "synth aspect range invalid");
  require(min_plate_width <= max_plate_width, "synth plate width range invalid");
  require(min_plate_width / max_aspect >= 8.0, "synth plates must be at least 8 px on each side");
  require(max_plate_width + 4.0 < static_cast<double>(std::min(image_width, image_height)) ||
              max_plates == 0,
          "synth plates must fit inside the image");
  require(max_rotation_deg >= 0.0 && max_rotation_deg < 90.0, "synth rotation must be in [0, 90)");
  require(max_shear >= 0.0 && max_shear < 1.0, "synth shear must be in [0, 1)");
  require(noise_stddev >= 0.0, "synth noise must be non-negative");
}

KeyValueConfig SynthConfig::to_config() const {
  KeyValueConfig c;
  c.set("synth.image_height", static_cast<std::int64_t>(image_height));
  c.set("synth.image_width", static_cast<std::int64_t>(image_width));
  c.set("synth.min_plates", static_cast<std::int64_t>(min_plates));
  c.set("synth.max_plates", static_cast<std::int64_t>(max_plates));
  c.set("synth.min_aspect", min_aspect);
  c.set("synth.max_aspect", max_aspect);
  c.set("synth.min_plate_width", min_plate_width);
  c.set("synth.max_plate_width", max_plate_width);
  c.set("synth.max_rotation_deg", max_rotation_deg);
  c.set("synth.max_shear", max_shear);
  c.set("synth.noise_stddev", noise_stddev);
  return c;
}

SynthConfig SynthConfig::from_config(const KeyValueConfig& c) {
  auto count = [&](const char* key, std::size_t fallback) {
    const auto v = c.get_int(key, static_cast<std::int64_t>(fallback));
    require(v >= 0, std::string(key) + " must be non-negative");
    return static_cast<std::size_t>(v);
  };
  SynthConfig s;
  s.image_height = count("synth.image_height", s.image_height);
  s.image_width = count("synth.image_width", s.image_width);
  s.min_plates = count("synth.min_plates", s.min_plates);
  s.max_plates = count("synth.max_plates", s.max_plates);
  s.min_aspect = c.get_double("synth.min_aspect", s.min_aspect);
  s.max_aspect = c.get_double("synth.max_aspect", s.max_aspect);
  s.min_plate_width = c.get_double("synth.min_plate_width", s.min_plate_width);
  s.max_plate_width = c.get_double("synth.max_plate_width", s.max_plate_width);
  s.max_rotation_deg = c.get_double("synth.max_rotation_deg", s.max_rotation_deg);
  s.max_shear = c.get_double("synth.max_shear", s.max_shear);
  s.noise_stddev = c.get_double("synth.noise_stddev", s.noise_stddev);
  s.validate();
  return s;
}

namespace {

// Plate geometry and appearance draw from separate streams so the layout can
// be computed without rendering.
std::vector<PlacedPlate> layout_plates(const SynthConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t count = rng.index(cfg.min_plates, cfg.max_plates);
  std::vector<PlacedPlate> plates;
  for (std::size_t k = 0; k < count; ++k) {
    if (auto p = place_plate(cfg, rng, plates)) plates.push_back(*p);
  }
  return plates;
}

}  // namespace

std::vector<Quad> synth_layout(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::vector<Quad> quads;
  for (const auto& p : layout_plates(cfg, seed)) quads.push_back(p.quad);
  return quads;
}

Sample synth_scene(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed ^ kColorStream);
  Sample s;
  s.id = "synth_" + std::to_string(seed);
  s.image = nn::Tensor({cfg.image_height, cfg.image_width, 3});
  auto px = s.image.mutable_data();
  fill_background(cfg, rng, px);
  for (const auto& p : layout_plates(cfg, seed)) {
    render_plate(cfg, p, random_style(rng), px);
    s.quads.push_back(p.quad);
  }
  if (cfg.noise_stddev > 0) {
    for (auto& v : px) v += rng.normal(cfg.noise_stddev);
  }
  for (auto& v : px) v = std::clamp(v, 0.0, 1.0);
  return s;
}

AugmentConfig AugmentConfig::none() {
  AugmentConfig c;
  visit_fields(c, [](const char*, auto& field) {
    if constexpr (std::is_same_v<std::decay_t<decltype(field)>, bool>) field = false;
  });
  return c;
}

void AugmentConfig::validate() const {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  require(prob(rectification_prob) && prob(centering_prob) && prob(mirror_prob),
          "augment probabilities must lie in [0, 1]");
  require(aspect_min > 0.0 && aspect_min <= aspect_max, "augment aspect range invalid");
  require(scale_min > 0.0 && scale_min <= scale_max, "augment scale range invalid");
  require(rotation_deg >= 0.0 && rotation_deg <= 180.0, "augment rotation must be in [0, 180]");
  require(translate_frac >= 0.0 && translate_frac < 0.5, "augment translate must be in [0, 0.5)");
  require(crop_frac >= 0.0 && crop_frac < 0.5, "augment crop must be in [0, 0.5)");
  require(gain_min > 0.0 && gain_min <= gain_max, "augment gain range invalid");
  require(bias_min <= bias_max, "augment bias range invalid");
}

KeyValueConfig AugmentConfig::to_config() const {
  KeyValueConfig c;
  visit_fields(*this, [&](const char* name, const auto& field) {
    c.set(std::string("augment.") + name, field);
  });
  return c;
}

AugmentConfig AugmentConfig::from_config(const KeyValueConfig& c) {
  AugmentConfig a;
  visit_fields(a, [&](const char* name, auto& field) {
    const std::string key = std::string("augment.") + name;
    if constexpr (std::is_same_v<std::decay_t<decltype(field)>, bool>) {
      field = c.get_bool(key, field);
    } else {
      field = c.get_double(key, field);
    }
  });
  a.validate();
  return a;
}

AffineMap augment_transform(const Sample& sample, const AugmentConfig& cfg, std::uint64_t seed) {
  image::require_rgb(sample.image);
  Rng rng(seed);
  const auto W = static_cast<double>(image::width(sample.image));
  const auto H = static_cast<double>(image::height(sample.image));
  const Point2 center{W / 2, H / 2};
  AffineMap m = AffineMap::identity();
  auto then = [&](const AffineMap& step) { m = geometry::compose(step, m); };

  if (cfg.rectification && !sample.quads.empty() && rng.chance(cfg.rectification_prob)) {
    // Map the first plate onto an upright rectangle of its own mean size.
    const auto& c = sample.quads.front().corners;
    const double w = (distance(c[0], c[1]) + distance(c[3], c[2])) / 2;
    const double h = (distance(c[0], c[3]) + distance(c[1], c[2])) / 2;
    const Point2 g = sample.quads.front().centroid();
    const std::array<Point2, 4> rect{Point2{g.x - w / 2, g.y - h / 2}, Point2{g.x + w / 2, g.y - h / 2},
                                     Point2{g.x + w / 2, g.y + h / 2}, Point2{g.x - w / 2, g.y + h / 2}};
    if (auto fit = geometry::fit_affine(c, rect)) then(*fit);
  }
  if (cfg.aspect) then(about(AffineMap::scaling(rng.uniform(cfg.aspect_min, cfg.aspect_max), 1.0), center));
  if (cfg.centering && !sample.quads.empty() && rng.chance(cfg.centering_prob)) {
    const Point2 g = geometry::apply_affine(m, sample.quads.front().centroid());
    then(AffineMap::translation(center.x - g.x, center.y - g.y));
  }
  if (cfg.scale) {
    const double s = rng.uniform(cfg.scale_min, cfg.scale_max);
    then(about(AffineMap::scaling(s, s), center));
  }
  if (cfg.rotation) {
    then(about(AffineMap::rotation(radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))), center));
  }
  if (cfg.mirror && rng.chance(cfg.mirror_prob)) then(AffineMap{-1, 0, 0, 1, W, 0});
  if (cfg.translate) {
    then(AffineMap::translation(rng.uniform(-cfg.translate_frac, cfg.translate_frac) * W,
                                rng.uniform(-cfg.translate_frac, cfg.translate_frac) * H));
  }
  if (cfg.crop) {
    const double l = rng.uniform(0, cfg.crop_frac), r = rng.uniform(0, cfg.crop_frac);
    const double t = rng.uniform(0, cfg.crop_frac), b = rng.uniform(0, cfg.crop_frac);
    const double sx = 1.0 / (1.0 - l - r), sy = 1.0 / (1.0 - t - b);
    then(AffineMap{sx, 0, 0, sy, -l * W * sx, -t * H * sy});
  }
  return m;
}

Sample augment(const Sample& sample, const AugmentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  image::require_rgb(sample.image);
  const std::size_t h = image::height(sample.image), w = image::width(sample.image);

  AffineMap m;
  std::vector<Quad> quads;
  std::uint64_t used_seed = seed;
  for (int attempt = 0; attempt <= kAugmentRetries; ++attempt) {
    used_seed = seed + static_cast<std::uint64_t>(attempt);
    m = augment_transform(sample, cfg, used_seed);
    quads.clear();
    for (const auto& q : sample.quads) {
      const Quad mapped = m == AffineMap::identity() ? q : Quad::canonical(geometry::apply_affine(m, q).corners);
      if (visible_in_frame(mapped, static_cast<double>(w), static_cast<double>(h))) {
        quads.push_back(mapped);
      }
    }
    if (sample.quads.empty() || !quads.empty()) break;
  }

  Sample out;
  out.id = sample.id;
  out.quads = std::move(quads);
  if (m == AffineMap::identity()) {
    out.image = sample.image.clone();
  } else {
    const auto inverse = geometry::invert_affine(m);
    out.image = inverse ? image::warp_affine(sample.image, *inverse, h, w, kFillValue)
                        : nn::Tensor({h, w, 3}, kFillValue);
  }
  if (cfg.colorspace) {
    Rng rng(used_seed ^ kColorStream);
    std::array<double, 3> gain, bias;
    for (auto& g : gain) g = rng.uniform(cfg.gain_min, cfg.gain_max);
    for (auto& b : bias) b = rng.uniform(cfg.bias_min, cfg.bias_max);
    auto d = out.image.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      d[i] = std::clamp(d[i] * gain[i % 3] + bias[i % 3], 0.0, 1.0);
    }
  }
  return out;
}

AffineMap letterbox_transform(std::size_t src_height, std::size_t src_width, std::size_t height,
                              std::size_t width) {
  if (src_height == 0 || src_width == 0) throw std::invalid_argument("letterbox of an empty image");
  const auto h = static_cast<double>(src_height);
  const auto w = static_cast<double>(src_width);
  const double s = std::min(static_cast<double>(height) / h, static_cast<double>(width) / w);
  const double ox = std::floor((static_cast<double>(width) - s * w) / 2);
  const double oy = std::floor((static_cast<double>(height) - s * h) / 2);
  return {s, 0, 0, s, ox, oy};
}

Sample letterbox(const Sample& sample, std::size_t height, std::size_t width) {
  image::require_rgb(sample.image);
  const AffineMap m = letterbox_transform(image::height(sample.image), image::width(sample.image),
                                          height, width);

  Sample out;
  out.id = sample.id;
  if (m == AffineMap::identity() && image::height(sample.image) == height &&
      image::width(sample.image) == width) {
    out.image = sample.image;
    out.quads = sample.quads;
    return out;
  }
  out.image = image::warp_affine(sample.image, *geometry::invert_affine(m), height, width, kFillValue);
  for (const auto& q : sample.quads) out.quads.push_back(geometry::apply_affine(m, q));
  return out;
}

Batch make_batch(std::span<const Sample> samples, std::size_t batch_size, std::size_t height,
                 std::size_t width, double alpha) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be at least 1");
  if (batch_size > samples.size()) {
    throw std::invalid_argument("batch size " + std::to_string(batch_size) + " exceeds " +
                                std::to_string(samples.size()) + " samples");
  }
  Batch batch;
  batch.images = nn::Tensor({batch_size, height, width, 3});
  auto dst = batch.images.mutable_data();
  const std::size_t stride = height * width * 3;
  for (std::size_t b = 0; b < batch_size; ++b) {
    const Sample fitted = letterbox(samples[b], height, width);
    std::copy(fitted.image.data().begin(), fitted.image.data().end(), dst.begin() + b * stride);
    batch.targets.push_back(loss::build_target_grid(fitted.quads, height, width, alpha));
    batch.quads.push_back(fitted.quads);
  }
  return batch;
}

}  // namespace wpod::data
