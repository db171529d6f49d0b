#pragma once

// Toy ViT patch encoder and projection head.
//
// Encoder: linear patch embedding, learned CLS token and positional table
// (resampled bilinearly for grids other than the base grid), pre-norm
// transformer blocks, final layer norm. The CLS->patch attention of the last
// block, averaged over heads, is exposed on the FeatureGrid.

#include <cstddef>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "neco/feature_grid.hpp"
#include "neco/rng.hpp"
#include "neco/tensor.hpp"

namespace neco {

// Ordered, named parameter tensors.
class ParamSet {
 public:
  void add(std::string name, Tensor value);
  const Tensor& get(std::string_view name) const;
  Tensor& get(std::string_view name);
  bool contains(std::string_view name) const;

  std::size_t size() const { return values_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Tensor>& values() const { return values_; }
  std::vector<Tensor>& values() { return values_; }
  std::size_t numel() const;

  // Copy whose tensors are gradient leaves on `tape`.
  ParamSet watched(Tape& tape) const;
  // Copy without gradient tracking.
  ParamSet detached() const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

bool same_layout(const ParamSet& a, const ParamSet& b);

struct EncoderConfig {
  std::size_t channels = 3;
  std::size_t patch = 8;
  std::size_t base_grid = 8;  // positional table covers base_grid x base_grid
  std::size_t dim = 64;
  std::size_t depth = 2;
  std::size_t heads = 4;
  std::size_t mlp_hidden = 256;

  std::size_t patch_width() const { return channels * patch * patch; }
  void validate() const;
};

struct HeadConfig {
  std::size_t in = 64;
  std::size_t hidden = 256;
  std::size_t out = 32;

  void validate() const;
};

struct Patches {
  Tensor data;  // N x (C*P*P), row-major over the grid
  std::size_t rows = 0;
  std::size_t cols = 0;
};

// N = floor(H/P) * floor(W/P); trailing pixels are dropped. Each row holds
// channel-major P x P pixels.
Patches patchify(const Image& image, std::size_t patch);

ParamSet init_encoder(const EncoderConfig& cfg, Rng& rng);
ParamSet init_head(const HeadConfig& cfg, Rng& rng);

FeatureGrid encode(const EncoderConfig& cfg, const ParamSet& params, const Patches& patches);

// Three linear layers with GELU in between. Tokens: N x in -> N x out.
Tensor project(const ParamSet& head, const Tensor& tokens);

// teacher <- m * teacher + (1 - m) * student, every tensor.
void ema_update(ParamSet& teacher, const ParamSet& student, double m);

// 1 - (1 - m0) * (cos(pi t / T) + 1) / 2: m0 at t = 0, 1 at t = T.
double momentum_schedule(std::size_t step, std::size_t total, double m0);

}  // namespace neco
