#include "neco/model.hpp"

#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace neco {

void ParamSet::add(std::string name, Tensor value) {
  if (index_.count(name)) throw std::invalid_argument("ParamSet: duplicate parameter '" + name + "'");
  index_.emplace(name, values_.size());
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
}

const Tensor& ParamSet::get(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("ParamSet: no parameter '" + std::string(name) + "'");
  return values_[it->second];
}

Tensor& ParamSet::get(std::string_view name) {
  return const_cast<Tensor&>(static_cast<const ParamSet&>(*this).get(name));
}

bool ParamSet::contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }

std::size_t ParamSet::numel() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += v.numel();
  return n;
}

ParamSet ParamSet::watched(Tape& tape) const {
  ParamSet out;
  for (std::size_t i = 0; i < values_.size(); ++i) out.add(names_[i], tape.watch(values_[i]));
  return out;
}

ParamSet ParamSet::detached() const {
  ParamSet out;
  for (std::size_t i = 0; i < values_.size(); ++i) out.add(names_[i], values_[i].detach());
  return out;
}

bool same_layout(const ParamSet& a, const ParamSet& b) {
  if (a.names() != b.names()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.values()[i].shape() != b.values()[i].shape()) return false;
  }
  return true;
}

void EncoderConfig::validate() const {
  if (channels == 0 || patch == 0 || base_grid == 0 || dim == 0 || depth == 0 || heads == 0 || mlp_hidden == 0) {
    throw std::invalid_argument("encoder config: all sizes must be positive");
  }
  if (dim % heads != 0) throw std::invalid_argument("encoder config: dim must be divisible by heads");
}

void HeadConfig::validate() const {
  if (in == 0 || hidden == 0) throw std::invalid_argument("head config: widths must be positive");
  if (out < 2) throw std::invalid_argument("head config: output width must be at least 2");
}

Patches patchify(const Image& image, std::size_t patch) {
  if (patch == 0) throw std::invalid_argument("patchify: patch size must be positive");
  if (image.height < patch || image.width < patch) {
    throw ShapeError("patchify: image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                     " smaller than patch " + std::to_string(patch));
  }
  const std::size_t rows = image.height / patch;
  const std::size_t cols = image.width / patch;
  const std::size_t width = image.channels * patch * patch;
  std::vector<double> out(rows * cols * width);
  for (std::size_t gy = 0; gy < rows; ++gy) {
    for (std::size_t gx = 0; gx < cols; ++gx) {
      double* dst = &out[(gy * cols + gx) * width];
      for (std::size_t c = 0; c < image.channels; ++c)
        for (std::size_t py = 0; py < patch; ++py)
          for (std::size_t px = 0; px < patch; ++px) *dst++ = image.at(c, gy * patch + py, gx * patch + px);
    }
  }
  return {Tensor({rows * cols, width}, std::move(out)), rows, cols};
}

namespace {

Tensor trunc_normal(Shape shape, Rng& rng, double std) {
  std::vector<double> d(shape_numel(shape));
  for (auto& x : d) x = rng.truncated_normal(std);
  return Tensor(std::move(shape), std::move(d));
}

constexpr double kInitStd = 0.02;

void add_linear(ParamSet& p, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  p.add(name + ".w", trunc_normal({in, out}, rng, kInitStd));
  p.add(name + ".b", Tensor::zeros({out}));
}

void add_norm(ParamSet& p, const std::string& name, std::size_t d) {
  p.add(name + ".g", Tensor::full({d}, 1.0));
  p.add(name + ".b", Tensor::zeros({d}));
}

Tensor linear(const ParamSet& p, const std::string& name, const Tensor& x) {
  return ops::add_rowvec(ops::matmul(x, p.get(name + ".w")), p.get(name + ".b"));
}

Tensor norm(const ParamSet& p, const std::string& name, const Tensor& x) {
  return ops::add_rowvec(ops::mul_rowvec(ops::layer_norm_rows(x), p.get(name + ".g")), p.get(name + ".b"));
}

std::vector<std::size_t> range(std::size_t begin, std::size_t end) {
  std::vector<std::size_t> v(end - begin);
  std::iota(v.begin(), v.end(), begin);
  return v;
}

}  // namespace

ParamSet init_encoder(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamSet p;
  const std::size_t d = cfg.dim;
  add_linear(p, "embed", cfg.patch_width(), d, rng);
  p.add("cls", trunc_normal({d}, rng, kInitStd));
  p.add("pos", trunc_normal({cfg.base_grid * cfg.base_grid + 1, d}, rng, kInitStd));
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    const std::string pre = "block" + std::to_string(b);
    add_norm(p, pre + ".norm1", d);
    add_linear(p, pre + ".qkv", d, 3 * d, rng);
    add_linear(p, pre + ".proj", d, d, rng);
    add_norm(p, pre + ".norm2", d);
    add_linear(p, pre + ".fc1", d, cfg.mlp_hidden, rng);
    add_linear(p, pre + ".fc2", cfg.mlp_hidden, d, rng);
  }
  add_norm(p, "norm", d);
  return p;
}

ParamSet init_head(const HeadConfig& cfg, Rng& rng) {
  cfg.validate();
  ParamSet p;
  add_linear(p, "head.l1", cfg.in, cfg.hidden, rng);
  add_linear(p, "head.l2", cfg.hidden, cfg.hidden, rng);
  add_linear(p, "head.l3", cfg.hidden, cfg.out, rng);
  return p;
}

FeatureGrid encode(const EncoderConfig& cfg, const ParamSet& params, const Patches& patches) {
  cfg.validate();
  if (patches.data.rank() != 2 || patches.data.cols() != cfg.patch_width()) {
    throw ShapeError("encode: patch width " + shape_str(patches.data.shape()) + " does not match embedding input " +
                     std::to_string(cfg.patch_width()));
  }
  const std::size_t n = patches.rows * patches.cols;
  if (patches.data.rows() != n) throw ShapeError("encode: patch count does not match grid shape");
  const std::size_t d = cfg.dim;
  const std::size_t dh = d / cfg.heads;
  const std::size_t base = cfg.base_grid * cfg.base_grid;

  Tensor x = linear(params, "embed", patches.data);
  const Tensor& pos = params.get("pos");
  std::vector<std::size_t> cls_idx{0};
  auto patch_idx = range(1, base + 1);
  Tensor patch_pos = ops::gather_rows(pos, patch_idx);
  if (patches.rows != cfg.base_grid || patches.cols != cfg.base_grid) {
    Tensor resample = bilinear_resample_matrix(cfg.base_grid, cfg.base_grid, Box{}, patches.rows, patches.cols);
    patch_pos = ops::matmul(resample, patch_pos);
  }
  x = ops::add(x, patch_pos);
  Tensor cls = ops::add(params.get("cls").reshape({1, d}), ops::gather_rows(pos, cls_idx));
  std::vector<Tensor> seq{cls, x};
  Tensor h = ops::concat_rows(seq);

  std::vector<double> cls_attention(n, 0.0);
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    const std::string pre = "block" + std::to_string(b);
    const bool last = b + 1 == cfg.depth;
    Tensor qkv = linear(params, pre + ".qkv", norm(params, pre + ".norm1", h));
    std::vector<Tensor> heads;
    heads.reserve(cfg.heads);
    for (std::size_t k = 0; k < cfg.heads; ++k) {
      Tensor q = ops::slice_cols(qkv, k * dh, (k + 1) * dh);
      Tensor kk = ops::slice_cols(qkv, d + k * dh, d + (k + 1) * dh);
      Tensor v = ops::slice_cols(qkv, 2 * d + k * dh, 2 * d + (k + 1) * dh);
      Tensor attn = ops::softmax_rows(ops::scale(ops::matmul(q, ops::transpose(kk)), inv_sqrt_dh));
      if (last) {
        for (std::size_t j = 0; j < n; ++j) cls_attention[j] += attn.at(0, j + 1);
      }
      heads.push_back(ops::matmul(attn, v));
    }
    h = ops::add(h, linear(params, pre + ".proj", ops::concat_cols(heads)));
    Tensor m = linear(params, pre + ".fc2", ops::gelu(linear(params, pre + ".fc1", norm(params, pre + ".norm2", h))));
    h = ops::add(h, m);
  }
  h = norm(params, "norm", h);

  FeatureGrid grid;
  grid.tokens = ops::gather_rows(h, range(1, n + 1));
  grid.rows = patches.rows;
  grid.cols = patches.cols;
  const double total = std::accumulate(cls_attention.begin(), cls_attention.end(), 0.0);
  for (auto& a : cls_attention) a /= total;
  grid.attention = std::move(cls_attention);
  return grid;
}

Tensor project(const ParamSet& head, const Tensor& tokens) {
  Tensor h = ops::gelu(linear(head, "head.l1", tokens));
  h = ops::gelu(linear(head, "head.l2", h));
  return linear(head, "head.l3", h);
}

void ema_update(ParamSet& teacher, const ParamSet& student, double m) {
  if (!(m >= 0.0 && m <= 1.0)) throw std::invalid_argument("ema_update: momentum must lie in [0, 1]");
  if (!same_layout(teacher, student)) throw ShapeError("ema_update: teacher and student layouts differ");
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    auto t = teacher.values()[i].mutable_data();
    auto s = student.values()[i].data();
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = m * t[k] + (1.0 - m) * s[k];
  }
}

double momentum_schedule(std::size_t step, std::size_t total, double m0) {
  if (step > total) throw std::invalid_argument("momentum_schedule: step beyond total");
  const double ratio = total == 0 ? 0.0 : static_cast<double>(step) / static_cast<double>(total);
  return 1.0 - (1.0 - m0) * (std::cos(std::numbers::pi * ratio) + 1.0) / 2.0;
}

}  // namespace neco
