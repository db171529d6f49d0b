#include "neco/synth.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "neco/rng.hpp"

namespace neco {

namespace {

constexpr const char* kMagic = "neco-synth-v1";

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double hh = h * 6.0;
  const int sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

struct Blob {
  int cls;
  int kind;  // 0 disk, 1 rectangle, 2 triangle
  double cx, cy, r, hw, hh, rot;
  std::array<double, 3> rgb;
  double stripe_angle, stripe_phase;
};

bool inside(const Blob& s, double x, double y) {
  const double dx = x - s.cx, dy = y - s.cy;
  switch (s.kind) {
    case 0: return dx * dx + dy * dy <= s.r * s.r;
    case 1: return std::abs(dx) <= s.hw && std::abs(dy) <= s.hh;
    default: {
      // Equilateral triangle with circumradius r, rotated by rot: inside iff
      // on the inner side of all three edges (inradius r / 2).
      for (int k = 0; k < 3; ++k) {
        const double a = s.rot + 2.0 * std::numbers::pi * k / 3.0;
        if (dx * std::cos(a) + dy * std::sin(a) < -s.r / 2.0) return false;
      }
      return true;
    }
  }
}

double as_float(double x) { return static_cast<double>(static_cast<float>(x)); }

}  // namespace

void DatasetManifest::validate() const {
  if (num_classes < 2 || num_classes > 256) throw std::invalid_argument("manifest: num_classes must lie in [2, 256]");
  if (height == 0 || width == 0) throw std::invalid_argument("manifest: image size must be positive");
  if (min_shapes > max_shapes) throw std::invalid_argument("manifest: min_shapes exceeds max_shapes");
}

std::uint64_t scene_seed(const DatasetManifest& m, std::size_t index) {
  return derive_seed(m.seed, m.split == Split::train ? "scene/train" : "scene/val", index);
}

SyntheticScene generate_scene(const DatasetManifest& m, std::size_t index) {
  m.validate();
  if (index >= m.num_scenes) throw std::out_of_range("generate_scene: index beyond num_scenes");
  SyntheticScene scene;
  scene.seed = scene_seed(m, index);
  Rng rng(scene.seed);
  const std::size_t H = m.height, W = m.width;
  const double unit = static_cast<double>(std::min(H, W)) / 64.0;
  const std::size_t shape_classes = m.num_classes - 1;

  // Background: a desaturated tint with a linear gradient and speckle.
  const double grey = rng.uniform(0.3, 0.7);
  std::array<double, 3> tint;
  for (auto& t : tint) t = grey + rng.uniform(-0.06, 0.06);
  const double gx = rng.uniform(-0.15, 0.15), gy = rng.uniform(-0.15, 0.15);

  std::vector<Blob> shapes;
  const std::size_t count = m.min_shapes + rng.below(m.max_shapes - m.min_shapes + 1);
  for (std::size_t s = 0; s < count; ++s) {
    Blob sh{};
    sh.cls = 1 + static_cast<int>(rng.below(shape_classes));
    sh.kind = (sh.cls - 1) % 3;
    sh.cx = rng.uniform(0, static_cast<double>(W));
    sh.cy = rng.uniform(0, static_cast<double>(H));
    sh.r = rng.uniform(7, 16) * unit;
    sh.hw = sh.r * rng.uniform(0.7, 1.0);
    sh.hh = sh.r * rng.uniform(0.7, 1.0);
    sh.rot = rng.uniform(0, 2 * std::numbers::pi);
    const double hue = static_cast<double>(sh.cls - 1) / static_cast<double>(shape_classes) + rng.uniform(-0.04, 0.04);
    sh.rgb = hsv_to_rgb(hue, rng.uniform(0.65, 0.95), rng.uniform(0.6, 0.95));
    sh.stripe_angle = std::numbers::pi * static_cast<double>(sh.cls - 1) / static_cast<double>(shape_classes);
    sh.stripe_phase = rng.uniform(0, 2 * std::numbers::pi);
    shapes.push_back(sh);
  }

  scene.image = Image{3, H, W, std::vector<double>(3 * H * W)};
  scene.mask.assign(H * W, 0);
  const double period = 5.0 * unit;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      std::array<double, 3> rgb;
      const double shade = gx * (px / static_cast<double>(W) - 0.5) + gy * (py / static_cast<double>(H) - 0.5);
      const double speckle = rng.uniform(-0.04, 0.04);
      for (int c = 0; c < 3; ++c) rgb[c] = tint[c] + shade + speckle;
      for (const auto& sh : shapes) {
        if (!inside(sh, px, py)) continue;
        const double u = px * std::cos(sh.stripe_angle) + py * std::sin(sh.stripe_angle);
        const double stripe = 1.0 + 0.18 * std::sin(2 * std::numbers::pi * u / period + sh.stripe_phase);
        for (int c = 0; c < 3; ++c) rgb[c] = sh.rgb[c] * stripe;
        scene.mask[y * W + x] = static_cast<std::uint8_t>(sh.cls);
      }
      for (std::size_t c = 0; c < 3; ++c) scene.image.at(c, y, x) = as_float(std::clamp(rgb[c], 0.0, 1.0));
    }
  }
  return scene;
}

std::vector<SyntheticScene> generate_dataset(const DatasetManifest& m) {
  std::vector<SyntheticScene> out;
  out.reserve(m.num_scenes);
  for (std::size_t i = 0; i < m.num_scenes; ++i) out.push_back(generate_scene(m, i));
  return out;
}

std::vector<int> patch_labels(const std::vector<std::uint8_t>& mask, std::size_t height, std::size_t width,
                              std::size_t patch, std::size_t rows, std::size_t cols, std::size_t num_classes) {
  if (mask.size() != height * width) throw ShapeError("patch_labels: mask size does not match dimensions");
  if (patch == 0 || height < patch * rows || width < patch * cols) {
    throw ShapeError("patch_labels: mask " + std::to_string(height) + "x" + std::to_string(width) +
                     " too small for a " + std::to_string(rows) + "x" + std::to_string(cols) + " grid of " +
                     std::to_string(patch) + "px patches");
  }
  std::vector<int> labels(rows * cols);
  std::vector<std::size_t> counts(num_classes);
  for (std::size_t gy = 0; gy < rows; ++gy) {
    for (std::size_t gx = 0; gx < cols; ++gx) {
      std::fill(counts.begin(), counts.end(), 0);
      for (std::size_t y = gy * patch; y < (gy + 1) * patch; ++y) {
        for (std::size_t x = gx * patch; x < (gx + 1) * patch; ++x) {
          const std::size_t l = mask[y * width + x];
          if (l >= num_classes) throw std::out_of_range("patch_labels: label " + std::to_string(l) + " out of range");
          ++counts[l];
        }
      }
      labels[gy * cols + gx] = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    }
  }
  return labels;
}

void write_dataset(const std::filesystem::path& path, const Dataset& data) {
  const auto& m = data.manifest;
  m.validate();
  if (data.scenes.size() != m.num_scenes) throw std::invalid_argument("write_dataset: scene count differs from manifest");
  nlohmann::json header{{"magic", kMagic},          {"num_scenes", m.num_scenes}, {"num_classes", m.num_classes},
                        {"height", m.height},       {"width", m.width},           {"split", to_string(m.split)},
                        {"seed", m.seed},           {"min_shapes", m.min_shapes}, {"max_shapes", m.max_shapes},
                        {"image", "float32-le"},    {"mask", "uint8"}};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_dataset: cannot open " + path.string());
  out << header.dump() << '\n';
  std::vector<char> buf;
  for (const auto& s : data.scenes) {
    if (s.image.pixels.size() != 3 * m.height * m.width || s.mask.size() != m.height * m.width) {
      throw ShapeError("write_dataset: scene dimensions differ from manifest");
    }
    buf.resize(s.image.pixels.size() * 4);
    for (std::size_t i = 0; i < s.image.pixels.size(); ++i) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(s.image.pixels[i]));
      for (int b = 0; b < 4; ++b) buf[i * 4 + b] = static_cast<char>((bits >> (8 * b)) & 0xff);
    }
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    out.write(reinterpret_cast<const char*>(s.mask.data()), static_cast<std::streamsize>(s.mask.size()));
  }
  if (!out) throw std::runtime_error("write_dataset: write failed for " + path.string());
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_dataset: cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception&) {
    throw FormatError("read_dataset: " + path.string() + " has no JSON header");
  }
  if (!header.is_object() || header.value("magic", "") != kMagic) {
    throw FormatError("read_dataset: bad magic in " + path.string());
  }
  Dataset data;
  auto& m = data.manifest;
  try {
    m.num_scenes = header.at("num_scenes").get<std::size_t>();
    m.num_classes = header.at("num_classes").get<std::size_t>();
    m.height = header.at("height").get<std::size_t>();
    m.width = header.at("width").get<std::size_t>();
    m.split = split_from_string(header.at("split").get<std::string>());
    m.seed = header.at("seed").get<std::uint64_t>();
    m.min_shapes = header.at("min_shapes").get<std::size_t>();
    m.max_shapes = header.at("max_shapes").get<std::size_t>();
  } catch (const std::exception& e) {
    throw FormatError("read_dataset: malformed header in " + path.string() + ": " + e.what());
  }
  m.validate();
  const std::size_t hw = m.height * m.width;
  std::vector<char> buf(hw * 3 * 4);
  data.scenes.reserve(m.num_scenes);
  for (std::size_t i = 0; i < m.num_scenes; ++i) {
    SyntheticScene s;
    s.seed = scene_seed(m, i);
    s.image = Image{3, m.height, m.width, std::vector<double>(3 * hw)};
    s.mask.resize(hw);
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    in.read(reinterpret_cast<char*>(s.mask.data()), static_cast<std::streamsize>(hw));
    if (!in) throw FormatError("read_dataset: " + path.string() + " truncated at scene " + std::to_string(i));
    for (std::size_t k = 0; k < 3 * hw; ++k) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[k * 4 + b])) << (8 * b);
      s.image.pixels[k] = static_cast<double>(std::bit_cast<float>(bits));
    }
    for (auto l : s.mask) {
      if (l >= m.num_classes) throw FormatError("read_dataset: label out of range in scene " + std::to_string(i));
    }
    data.scenes.push_back(std::move(s));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("read_dataset: trailing bytes in " + path.string());
  return data;
}

Dataset read_dataset(const std::filesystem::path& path, const DatasetManifest& expected) {
  Dataset data = read_dataset(path);
  const auto& m = data.manifest;
  auto check = [&](const char* what, std::size_t got, std::size_t want) {
    if (got != want) {
      throw ShapeError("read_dataset: " + std::string(what) + " is " + std::to_string(got) + ", expected " +
                       std::to_string(want));
    }
  };
  check("height", m.height, expected.height);
  check("width", m.width, expected.width);
  check("num_classes", m.num_classes, expected.num_classes);
  check("num_scenes", m.num_scenes, expected.num_scenes);
  if (m.split != expected.split || m.seed != expected.seed) {
    throw FormatError("read_dataset: split or seed in " + path.string() + " differs from the expected manifest");
  }
  return data;
}

std::filesystem::path split_path(const std::filesystem::path& root, Split split) {
  return root / (to_string(split) + ".bin");
}

std::string to_string(Split s) { return s == Split::train ? "train" : "val"; }

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  throw std::invalid_argument("unknown split '" + s + "' (train, val)");
}

}  // namespace neco
