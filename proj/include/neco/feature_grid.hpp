#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <vector>

#include "neco/tensor.hpp"

namespace neco {

// Channel-major raster, values nominally in [0, 1].
struct Image {
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;  // channels * height * width

  double& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  double at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(c * height + y) * width + x]; }
};

// Normalized (x0, y0, x1, y1); x0 < x1 and y0 < y1 within [0, 1].
struct Box {
  double x0 = 0, y0 = 0, x1 = 1, y1 = 1;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }
  bool valid() const;
};

// Dense per-patch features of one view. Row-major over the patch grid.
struct FeatureGrid {
  Tensor tokens;                   // N x d
  std::vector<double> attention;   // N, sums to 1; empty when unavailable
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
};

// Weights W (out_rows*out_cols x src_rows*src_cols) such that W * tokens is the
// bilinear resample of a src grid at the centres of an out grid laid over
// `box`. Source cell centres sit at (i + 0.5) / src; samples outside clamp to
// the edge. `mirrored` reverses the horizontal sampling direction.
Tensor bilinear_resample_matrix(std::size_t src_rows, std::size_t src_cols, const Box& box, std::size_t out_rows,
                                std::size_t out_cols, bool mirrored = false);

}  // namespace neco
