#pragma once

// Labeled synthetic scenes: coloured, textured shapes on a smooth background.
// Class k >= 1 fixes the shape, a hue band and a stripe orientation, so a
// patch's class is readable from local appearance alone.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "neco/feature_grid.hpp"

namespace neco {

enum class Split { train, val };

struct DatasetManifest {
  std::size_t num_scenes = 512;
  std::size_t num_classes = 4;  // background + shape classes
  std::size_t height = 64;
  std::size_t width = 64;
  Split split = Split::train;
  std::uint64_t seed = 0;
  std::size_t min_shapes = 1;
  std::size_t max_shapes = 4;

  void validate() const;
  bool operator==(const DatasetManifest&) const = default;
};

struct SyntheticScene {
  Image image;                      // 3 x H x W, float32-representable values in [0, 1]
  std::vector<std::uint8_t> mask;   // H x W
  std::uint64_t seed = 0;
};

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::uint64_t scene_seed(const DatasetManifest& m, std::size_t index);
SyntheticScene generate_scene(const DatasetManifest& m, std::size_t index);
std::vector<SyntheticScene> generate_dataset(const DatasetManifest& m);

// Majority label of each P x P cell, ties to the lower label.
std::vector<int> patch_labels(const std::vector<std::uint8_t>& mask, std::size_t height, std::size_t width,
                              std::size_t patch, std::size_t rows, std::size_t cols, std::size_t num_classes);

struct Dataset {
  DatasetManifest manifest;
  std::vector<SyntheticScene> scenes;
};

void write_dataset(const std::filesystem::path& path, const Dataset& data);
// Reads whatever the header declares.
Dataset read_dataset(const std::filesystem::path& path);
// Also checks the header against `expected`; mismatched sizes raise ShapeError.
Dataset read_dataset(const std::filesystem::path& path, const DatasetManifest& expected);

std::filesystem::path split_path(const std::filesystem::path& root, Split split);
std::string to_string(Split s);
Split split_from_string(const std::string& s);

}  // namespace neco
