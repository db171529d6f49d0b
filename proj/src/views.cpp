#include "neco/views.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace neco {

double overlap_fraction(const Box& a, const Box& b) {
  const double w = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double h = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  if (w <= 0 || h <= 0) return 0.0;
  return w * h;
}

bool crops_compatible(const CropParams& a, const CropParams& b, double min_overlap) {
  return overlap_fraction(a.box, b.box) >= min_overlap;
}

CropParams sample_crop(const CropSpec& spec, bool allow_flip, Rng& rng) {
  const double scale = rng.uniform(spec.scale_min, spec.scale_max);
  const double log_ratio = rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0));
  const double ratio = std::exp(log_ratio);
  const double w = std::min(1.0, std::sqrt(scale * ratio));
  const double h = std::min(1.0, std::sqrt(scale / ratio));
  CropParams c;
  c.box.x0 = rng.uniform() * (1.0 - w);
  c.box.y0 = rng.uniform() * (1.0 - h);
  c.box.x1 = c.box.x0 + w;
  c.box.y1 = c.box.y0 + h;
  c.flip = allow_flip && rng.bernoulli(0.5);
  c.color_jitter_seed = rng.next();
  return c;
}

std::pair<View, View> sample_views(const Image& image, const ViewConfig& cfg, Rng& rng) {
  if (image.height < 1 || image.width < 1) throw std::invalid_argument("sample_views: empty image");
  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    CropParams c1 = sample_crop(cfg.global, cfg.flip, rng);
    CropParams c2 = sample_crop(cfg.local, cfg.flip, rng);
    if (!crops_compatible(c1, c2, cfg.min_overlap)) continue;
    View v1{photometric_jitter(crop_resize(image, c1.box, cfg.global.size, c1.flip), cfg.jitter, c1.color_jitter_seed),
            c1};
    View v2{photometric_jitter(crop_resize(image, c2.box, cfg.local.size, c2.flip), cfg.jitter, c2.color_jitter_seed),
            c2};
    return {std::move(v1), std::move(v2)};
  }
  throw CropError("sample_views: no crop pair with overlap >= " + std::to_string(cfg.min_overlap) + " after " +
                  std::to_string(cfg.max_attempts) + " attempts");
}

Image crop_resize(const Image& image, const Box& box, std::size_t size, bool flip) {
  if (!box.valid()) throw std::invalid_argument("crop_resize: invalid box");
  Image out{image.channels, size, size, std::vector<double>(image.channels * size * size)};
  const double H = static_cast<double>(image.height), W = static_cast<double>(image.width);
  for (std::size_t oy = 0; oy < size; ++oy) {
    const double ty = box.y0 + (static_cast<double>(oy) + 0.5) / static_cast<double>(size) * box.height();
    const double sy = std::clamp(ty * H - 0.5, 0.0, H - 1);
    const auto y0 = static_cast<std::size_t>(sy);
    const std::size_t y1 = std::min(y0 + 1, image.height - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t ox = 0; ox < size; ++ox) {
      const std::size_t src_x = flip ? size - 1 - ox : ox;
      const double tx = box.x0 + (static_cast<double>(src_x) + 0.5) / static_cast<double>(size) * box.width();
      const double sx = std::clamp(tx * W - 0.5, 0.0, W - 1);
      const auto x0 = static_cast<std::size_t>(sx);
      const std::size_t x1 = std::min(x0 + 1, image.width - 1);
      const double fx = sx - static_cast<double>(x0);
      for (std::size_t c = 0; c < image.channels; ++c) {
        out.at(c, oy, ox) = (1 - fy) * ((1 - fx) * image.at(c, y0, x0) + fx * image.at(c, y0, x1)) +
                            fy * ((1 - fx) * image.at(c, y1, x0) + fx * image.at(c, y1, x1));
      }
    }
  }
  return out;
}

namespace {

void gaussian_blur(Image& img, double sigma) {
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i) k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  const double s = std::accumulate(k.begin(), k.end(), 0.0);
  for (auto& v : k) v /= s;
  const auto H = static_cast<int>(img.height), W = static_cast<int>(img.width);
  std::vector<double> tmp(img.pixels.size());
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) {
          acc += k[i + radius] * img.at(c, y, std::clamp(x + i, 0, W - 1));
        }
        tmp[(c * img.height + y) * img.width + x] = acc;
      }
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double acc = 0;
        for (int i = -radius; i <= radius; ++i) {
          acc += k[i + radius] * tmp[(c * img.height + std::clamp(y + i, 0, H - 1)) * img.width + x];
        }
        img.at(c, y, x) = acc;
      }
  }
}

}  // namespace

Image photometric_jitter(const Image& image, const JitterConfig& cfg, std::uint64_t seed) {
  if (!cfg.enabled) return image;
  Rng rng(seed);
  Image out = image;
  const double brightness = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness);
  const double contrast = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast);
  const double sigma = rng.uniform(0, cfg.blur_sigma_max);
  const bool gray = rng.bernoulli(cfg.grayscale_p);
  const double mean = std::accumulate(out.pixels.begin(), out.pixels.end(), 0.0) / static_cast<double>(out.pixels.size());
  for (auto& p : out.pixels) p = std::clamp(((p * brightness) - mean * brightness) * contrast + mean * brightness, 0.0, 1.0);
  if (gray && out.channels == 3) {
    const std::size_t hw = out.height * out.width;
    for (std::size_t i = 0; i < hw; ++i) {
      const double l = 0.299 * out.pixels[i] + 0.587 * out.pixels[hw + i] + 0.114 * out.pixels[2 * hw + i];
      out.pixels[i] = out.pixels[hw + i] = out.pixels[2 * hw + i] = l;
    }
  }
  if (sigma >= 0.1) gaussian_blur(out, sigma);
  return out;
}

std::pair<Box, Box> intersection_boxes(const CropParams& c1, const CropParams& c2) {
  const Box inter{std::max(c1.box.x0, c2.box.x0), std::max(c1.box.y0, c2.box.y0), std::min(c1.box.x1, c2.box.x1),
                  std::min(c1.box.y1, c2.box.y1)};
  if (!(inter.x0 < inter.x1 && inter.y0 < inter.y1)) {
    throw CropError("intersection_boxes: crops do not intersect");
  }
  auto to_view = [&](const CropParams& c) {
    Box b{(inter.x0 - c.box.x0) / c.box.width(), (inter.y0 - c.box.y0) / c.box.height(),
          (inter.x1 - c.box.x0) / c.box.width(), (inter.y1 - c.box.y0) / c.box.height()};
    b.x0 = std::clamp(b.x0, 0.0, 1.0);
    b.y0 = std::clamp(b.y0, 0.0, 1.0);
    b.x1 = std::clamp(b.x1, 0.0, 1.0);
    b.y1 = std::clamp(b.y1, 0.0, 1.0);
    if (c.flip) b = Box{1.0 - b.x1, b.y0, 1.0 - b.x0, b.y1};
    return b;
  };
  return {to_view(c1), to_view(c2)};
}

Tensor roi_align(const FeatureGrid& grid, const Box& box, std::size_t g, bool mirrored) {
  if (!box.valid()) {
    throw std::invalid_argument("roi_align: invalid box (" + std::to_string(box.x0) + "," + std::to_string(box.y0) +
                                "," + std::to_string(box.x1) + "," + std::to_string(box.y1) + ")");
  }
  if (g == 0) throw std::invalid_argument("roi_align: output grid must be non-empty");
  if (grid.tokens.rank() != 2 || grid.tokens.rows() != grid.size()) {
    throw ShapeError("roi_align: tokens " + shape_str(grid.tokens.shape()) + " do not match a " +
                     std::to_string(grid.rows) + "x" + std::to_string(grid.cols) + " grid");
  }
  return ops::matmul(bilinear_resample_matrix(grid.rows, grid.cols, box, g, g, mirrored), grid.tokens);
}

}  // namespace neco
