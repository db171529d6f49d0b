#pragma once

// Two-view augmentation with crop bookkeeping, and ROI alignment of the two
// views' feature grids onto a shared g x g grid over their intersection.

#include <cstdint>
#include <utility>

#include "neco/feature_grid.hpp"
#include "neco/rng.hpp"
#include "neco/tensor.hpp"

namespace neco {

struct CropParams {
  Box box;  // in source-image coordinates
  bool flip = false;
  std::uint64_t color_jitter_seed = 0;
};

struct CropSpec {
  double scale_min = 0.5;  // fraction of source area
  double scale_max = 1.0;
  std::size_t size = 64;   // output side in pixels
};

struct JitterConfig {
  bool enabled = true;
  double brightness = 0.2;  // multiplicative, +-
  double contrast = 0.2;
  double blur_sigma_max = 1.0;
  double grayscale_p = 0.2;
};

struct ViewConfig {
  CropSpec global{0.5, 1.0, 64};
  CropSpec local{0.25, 0.75, 32};
  double min_overlap = 0.01;  // intersection area over source area
  int max_attempts = 100;
  bool flip = true;
  JitterConfig jitter;
};

struct View {
  Image image;
  CropParams crop;
};

class CropError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Intersection area of two boxes (source coordinates, unit source area).
double overlap_fraction(const Box& a, const Box& b);
bool crops_compatible(const CropParams& a, const CropParams& b, double min_overlap);

CropParams sample_crop(const CropSpec& spec, bool allow_flip, Rng& rng);

// View 1 is the global crop, view 2 the local crop.
std::pair<View, View> sample_views(const Image& image, const ViewConfig& cfg, Rng& rng);

Image crop_resize(const Image& image, const Box& box, std::size_t size, bool flip);
Image photometric_jitter(const Image& image, const JitterConfig& cfg, std::uint64_t seed);

// Shared source region in each view's normalized coordinates; the x-interval
// is mirrored for a flipped view.
std::pair<Box, Box> intersection_boxes(const CropParams& c1, const CropParams& c2);

// Bilinear samples at the centres of a g x g grid over `box`; rows of the
// result are row-major over that grid. Pass mirrored = true for a box taken
// from a flipped view so that output columns run left to right in source
// coordinates.
Tensor roi_align(const FeatureGrid& grid, const Box& box, std::size_t g, bool mirrored = false);

}  // namespace neco
