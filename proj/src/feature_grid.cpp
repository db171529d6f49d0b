#include "neco/feature_grid.hpp"

#include <algorithm>
#include <cmath>

namespace neco {

bool Box::valid() const {
  return x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0 && x0 < x1 && y0 < y1;
}

Tensor bilinear_resample_matrix(std::size_t src_rows, std::size_t src_cols, const Box& box, std::size_t out_rows,
                                std::size_t out_cols, bool mirrored) {
  if (src_rows == 0 || src_cols == 0 || out_rows == 0 || out_cols == 0) {
    throw std::invalid_argument("bilinear_resample_matrix: empty grid");
  }
  const std::size_t n_src = src_rows * src_cols;
  std::vector<double> w(out_rows * out_cols * n_src, 0.0);
  // Fractional source coordinate of one axis, clamped to [0, n-1].
  auto source_coord = [](double t, std::size_t n) {
    return std::clamp(t * static_cast<double>(n) - 0.5, 0.0, static_cast<double>(n - 1));
  };
  for (std::size_t r = 0; r < out_rows; ++r) {
    const double ty = box.y0 + (static_cast<double>(r) + 0.5) / static_cast<double>(out_rows) * box.height();
    const double v = source_coord(ty, src_rows);
    const auto y0 = static_cast<std::size_t>(std::floor(v));
    const std::size_t y1 = std::min(y0 + 1, src_rows - 1);
    const double fy = v - static_cast<double>(y0);
    for (std::size_t c = 0; c < out_cols; ++c) {
      const double frac = (static_cast<double>(c) + 0.5) / static_cast<double>(out_cols);
      const double tx = mirrored ? box.x1 - frac * box.width() : box.x0 + frac * box.width();
      const double u = source_coord(tx, src_cols);
      const auto x0 = static_cast<std::size_t>(std::floor(u));
      const std::size_t x1 = std::min(x0 + 1, src_cols - 1);
      const double fx = u - static_cast<double>(x0);
      double* row = &w[(r * out_cols + c) * n_src];
      row[y0 * src_cols + x0] += (1 - fy) * (1 - fx);
      row[y0 * src_cols + x1] += (1 - fy) * fx;
      row[y1 * src_cols + x0] += fy * (1 - fx);
      row[y1 * src_cols + x1] += fy * fx;
    }
  }
  return Tensor({out_rows * out_cols, n_src}, std::move(w));
}

}  // namespace neco
