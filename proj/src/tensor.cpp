#include "neco/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace neco {

namespace {

thread_local Tape* g_active = nullptr;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

[[noreturn]] void shape_fail(std::string_view prim, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(prim) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void require_rank(std::string_view prim, const Tensor& t, std::size_t r) {
  if (t.rank() != r) {
    throw ShapeError(std::string(prim) + ": expected rank " + std::to_string(r) + ", got " +
                     shape_str(t.shape()));
  }
}

bool is_scalar(const Tensor& t) { return t.rank() == 0; }

template <class F, class D>
Tensor unary(const Tensor& a, F f, D df) {
  std::vector<double> out(a.numel());
  auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  Tensor res(a.shape(), std::move(out));
  std::vector<Tensor> ins{a};
  return make_result(std::move(res), ins, [a, df](std::span<const double> g, auto gin) {
    auto x = a.data();
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * df(x[i]);
  });
}

enum class BinOp { add, sub, mul, div };

Tensor binary(std::string_view name, const Tensor& a, const Tensor& b, BinOp op) {
  const bool sa = is_scalar(a) && !is_scalar(b);
  const bool sb = is_scalar(b) && !is_scalar(a);
  if (!sa && !sb && a.shape() != b.shape()) shape_fail(name, a.shape(), b.shape());
  const Shape& out_shape = sa ? b.shape() : a.shape();
  const std::size_t n = shape_numel(out_shape);
  auto x = a.data();
  auto y = b.data();
  auto xa = [&](std::size_t i) { return sa ? x[0] : x[i]; };
  auto yb = [&](std::size_t i) { return sb ? y[0] : y[i]; };
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = xa(i), v = yb(i);
    switch (op) {
      case BinOp::add: out[i] = u + v; break;
      case BinOp::sub: out[i] = u - v; break;
      case BinOp::mul: out[i] = u * v; break;
      case BinOp::div:
        if (v == 0.0) throw DomainError(std::string(name) + ": division by zero");
        out[i] = u / v;
        break;
    }
  }
  std::vector<Tensor> ins{a, b};
  return make_result(Tensor(out_shape, std::move(out)), ins,
                     [a, b, sa, sb, op](std::span<const double> g, auto gin) {
                       auto x = a.data();
                       auto y = b.data();
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         const double u = sa ? x[0] : x[i];
                         const double v = sb ? y[0] : y[i];
                         double du = 0, dv = 0;
                         switch (op) {
                           case BinOp::add: du = 1; dv = 1; break;
                           case BinOp::sub: du = 1; dv = -1; break;
                           case BinOp::mul: du = v; dv = u; break;
                           case BinOp::div: du = 1 / v; dv = -u / (v * v); break;
                         }
                         if (!gin[0].empty()) gin[0][sa ? 0 : i] += g[i] * du;
                         if (!gin[1].empty()) gin[1][sb ? 0 : i] += g[i] * dv;
                       }
                     });
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

Tensor::Tensor() : data_(std::make_shared<std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor: zero-length dimension in " + shape_str(shape_));
  }
  if (shape_numel(shape_) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  data_ = std::make_shared<std::vector<double>>(std::move(data));
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }
Tensor Tensor::vector(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}
Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
  return Tensor({rows, cols}, std::move(v));
}
Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::full(Shape shape, double v) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, v));
}
Tensor Tensor::identity(std::size_t n) {
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) d[i * n + i] = 1.0;
  return Tensor({n, n}, std::move(d));
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw ShapeError("rows: expected rank 2, got " + shape_str(shape_));
  return shape_[0];
}
std::size_t Tensor::cols() const {
  if (rank() != 2) throw ShapeError("cols: expected rank 2, got " + shape_str(shape_));
  return shape_[1];
}

std::span<double> Tensor::mutable_data() {
  if (data_.use_count() > 1) data_ = std::make_shared<std::vector<double>>(*data_);
  return {data_->data(), data_->size()};
}

double Tensor::at(std::size_t r, std::size_t c) const { return (*data_)[r * cols() + c]; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " values");
  return (*data_)[0];
}

Tensor Tensor::detach() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  return t;
}

Tensor Tensor::reshape(Shape shape) const {
  if (shape_numel(shape) != numel()) shape_fail("reshape", shape_, shape);
  Tensor out = detach();
  out.shape_ = std::move(shape);
  std::vector<Tensor> ins{*this};
  return make_result(std::move(out), ins, [](std::span<const double> g, auto gin) {
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
  });
}

// ---- tape -----------------------------------------------------------------

const Tensor& Gradients::of(const Tensor& leaf) const { return of(leaf.node()); }

const Tensor& Gradients::of(NodeId id) const {
  auto it = grads_.find(id);
  if (it == grads_.end()) throw std::out_of_range("gradients: no entry for node " + std::to_string(id));
  return it->second;
}

Tensor Tape::watch(const Tensor& t) {
  Tensor out = t.detach();
  out.node_ = static_cast<NodeId>(nodes_.size());
  nodes_.push_back(Node{t.shape(), {}, {}});
  return out;
}

Tensor Tape::record(Tensor value, std::span<const Tensor> inputs, Vjp vjp) {
  Node n;
  n.shape = value.shape();
  n.inputs.reserve(inputs.size());
  for (const auto& in : inputs) n.inputs.push_back(in.node_);
  n.vjp = std::move(vjp);
  value.node_ = static_cast<NodeId>(nodes_.size());
  nodes_.push_back(std::move(n));
  return value;
}

Gradients Tape::backward(const Tensor& loss) const {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  Gradients out;
  std::vector<std::vector<double>> grads(nodes_.size());
  if (loss.node_ != kNoNode) {
    if (loss.node_ >= static_cast<NodeId>(nodes_.size())) {
      throw std::logic_error("backward: loss was not recorded on this tape");
    }
    grads[loss.node_].assign(1, 1.0);
    std::vector<std::span<double>> gin;
    for (NodeId id = loss.node_; id >= 0; --id) {
      const Node& n = nodes_[id];
      if (!n.vjp || grads[id].empty()) continue;
      gin.assign(n.inputs.size(), {});
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const NodeId src = n.inputs[k];
        if (src == kNoNode) continue;
        auto& g = grads[src];
        if (g.empty()) g.assign(shape_numel(nodes_[src].shape), 0.0);
        gin[k] = {g.data(), g.size()};
      }
      n.vjp(grads[id], gin);
      // Interior gradients are dead once propagated.
      std::vector<double>().swap(grads[id]);
    }
  }
  for (NodeId id = 0; id < static_cast<NodeId>(nodes_.size()); ++id) {
    if (nodes_[id].vjp) continue;
    const Shape& s = nodes_[id].shape;
    if (grads[id].empty() && id == loss.node_) grads[id].assign(1, 1.0);
    if (grads[id].empty()) grads[id].assign(shape_numel(s), 0.0);
    out.grads_.emplace(id, Tensor(s, std::move(grads[id])));
  }
  return out;
}

Tape* active_tape() { return g_active; }

TapeScope::TapeScope(Tape& tape) : prev_(g_active) { g_active = &tape; }
TapeScope::~TapeScope() { g_active = prev_; }
NoGradScope::NoGradScope() : prev_(g_active) { g_active = nullptr; }
NoGradScope::~NoGradScope() { g_active = prev_; }

Tensor make_result(Tensor value, std::span<const Tensor> inputs, Vjp vjp) {
  Tape* tape = g_active;
  if (tape == nullptr) return value;
  const bool tracked = std::any_of(inputs.begin(), inputs.end(),
                                   [](const Tensor& t) { return t.requires_grad(); });
  if (!tracked) return value;
  return tape->record(std::move(value), inputs, std::move(vjp));
}

Gradients backward(const Tensor& loss) {
  if (g_active == nullptr) throw std::logic_error("backward: no active tape");
  return g_active->backward(loss);
}

// ---- primitives -----------------------------------------------------------

namespace ops {

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", a, b, BinOp::add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", a, b, BinOp::sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", a, b, BinOp::mul); }
Tensor div(const Tensor& a, const Tensor& b) { return binary("div", a, b, BinOp::div); }

Tensor neg(const Tensor& a) {
  return unary(a, [](double x) { return -x; }, [](double) { return -1.0; });
}

Tensor scale(const Tensor& a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.cols() != b.rows()) shape_fail("matmul", a.shape(), b.shape());
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  std::vector<double> out(n * m);
  Map(out.data(), n, m).noalias() = MapC(a.data().data(), n, k) * MapC(b.data().data(), k, m);
  std::vector<Tensor> ins{a, b};
  return make_result(Tensor({n, m}, std::move(out)), ins,
                     [a, b, n, k, m](std::span<const double> g, auto gin) {
                       MapC G(g.data(), n, m);
                       if (!gin[0].empty()) {
                         Map(gin[0].data(), n, k).noalias() += G * MapC(b.data().data(), k, m).transpose();
                       }
                       if (!gin[1].empty()) {
                         Map(gin[1].data(), k, m).noalias() += MapC(a.data().data(), n, k).transpose() * G;
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  require_rank("transpose", a, 2);
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(n * m);
  Map(out.data(), m, n) = MapC(a.data().data(), n, m).transpose();
  std::vector<Tensor> ins{a};
  return make_result(Tensor({m, n}, std::move(out)), ins, [n, m](std::span<const double> g, auto gin) {
    Map(gin[0].data(), n, m) += MapC(g.data(), m, n).transpose();
  });
}

Tensor sum(const Tensor& a) {
  double s = 0;
  for (double x : a.data()) s += x;
  std::vector<Tensor> ins{a};
  return make_result(Tensor::scalar(s), ins, [](std::span<const double> g, auto gin) {
    for (auto& x : gin[0]) x += g[0];
  });
}

Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.numel());
  double s = 0;
  for (double x : a.data()) s += x;
  std::vector<Tensor> ins{a};
  return make_result(Tensor::scalar(s * inv), ins, [inv](std::span<const double> g, auto gin) {
    for (auto& x : gin[0]) x += g[0] * inv;
  });
}

Tensor arctan(const Tensor& a) {
  return unary(a, [](double x) { return std::atan(x); }, [](double x) { return 1.0 / (1.0 + x * x); });
}

Tensor log(const Tensor& a) {
  for (double x : a.data()) {
    if (x < 0.0 || std::isnan(x)) throw DomainError("log: argument " + std::to_string(x) + " is negative");
  }
  return unary(
      a, [](double x) { return std::log(std::max(x, kLogFloor)); },
      [](double x) { return x > kLogFloor ? 1.0 / x : 0.0; });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Tensor sigmoid(const Tensor& a) {
  auto s = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  return unary(a, s, [s](double x) {
    const double v = s(x);
    return v * (1.0 - v);
  });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [inv_sqrt_2pi](double x) {
        return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
      });
}

Tensor max_const(const Tensor& a, double c) {
  return unary(a, [c](double x) { return std::max(x, c); }, [c](double x) { return x > c ? 1.0 : 0.0; });
}

Tensor row_normalize(const Tensor& a) {
  require_rank("row_normalize", a, 2);
  const std::size_t n = a.rows(), d = a.cols();
  auto x = a.data();
  std::vector<double> out(n * d), norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += x[i * d + j] * x[i * d + j];
    norms[i] = std::sqrt(s);
    if (norms[i] == 0.0) throw DomainError("row_normalize: row " + std::to_string(i) + " has zero norm");
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x[i * d + j] / norms[i];
  }
  Tensor res({n, d}, out);
  std::vector<Tensor> ins{a};
  return make_result(std::move(res), ins,
                     [y = std::move(out), norms = std::move(norms), n, d](std::span<const double> g, auto gin) {
                       for (std::size_t i = 0; i < n; ++i) {
                         double dot = 0;
                         for (std::size_t j = 0; j < d; ++j) dot += g[i * d + j] * y[i * d + j];
                         for (std::size_t j = 0; j < d; ++j) {
                           gin[0][i * d + j] += (g[i * d + j] - dot * y[i * d + j]) / norms[i];
                         }
                       }
                     });
}

Tensor softmax_rows(const Tensor& a) {
  require_rank("softmax_rows", a, 2);
  const std::size_t n = a.rows(), d = a.cols();
  auto x = a.data();
  std::vector<double> out(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    double mx = x[i * d];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, x[i * d + j]);
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) s += (out[i * d + j] = std::exp(x[i * d + j] - mx));
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] /= s;
  }
  Tensor res({n, d}, out);
  std::vector<Tensor> ins{a};
  return make_result(std::move(res), ins, [y = std::move(out), n, d](std::span<const double> g, auto gin) {
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += g[i * d + j] * y[i * d + j];
      for (std::size_t j = 0; j < d; ++j) gin[0][i * d + j] += y[i * d + j] * (g[i * d + j] - dot);
    }
  });
}

Tensor layer_norm_rows(const Tensor& a, double eps) {
  require_rank("layer_norm_rows", a, 2);
  const std::size_t n = a.rows(), d = a.cols();
  auto x = a.data();
  std::vector<double> out(n * d), inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += x[i * d + j];
    mu /= static_cast<double>(d);
    double var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (x[i * d + j] - mu) * (x[i * d + j] - mu);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = (x[i * d + j] - mu) * inv_std[i];
  }
  Tensor res({n, d}, out);
  std::vector<Tensor> ins{a};
  return make_result(std::move(res), ins,
                     [y = std::move(out), inv_std = std::move(inv_std), n, d](std::span<const double> g, auto gin) {
                       const double dd = static_cast<double>(d);
                       for (std::size_t i = 0; i < n; ++i) {
                         double gs = 0, gy = 0;
                         for (std::size_t j = 0; j < d; ++j) {
                           gs += g[i * d + j];
                           gy += g[i * d + j] * y[i * d + j];
                         }
                         for (std::size_t j = 0; j < d; ++j) {
                           gin[0][i * d + j] += inv_std[i] * (g[i * d + j] - gs / dd - y[i * d + j] * gy / dd);
                         }
                       }
                     });
}

Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  require_rank("add_rowvec", a, 2);
  require_rank("add_rowvec", v, 1);
  const std::size_t n = a.rows(), d = a.cols();
  if (v.numel() != d) shape_fail("add_rowvec", a.shape(), v.shape());
  std::vector<double> out(a.data().begin(), a.data().end());
  auto b = v.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] += b[j];
  std::vector<Tensor> ins{a, v};
  return make_result(Tensor({n, d}, std::move(out)), ins, [n, d](std::span<const double> g, auto gin) {
    if (!gin[0].empty())
      for (std::size_t i = 0; i < n * d; ++i) gin[0][i] += g[i];
    if (!gin[1].empty())
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) gin[1][j] += g[i * d + j];
  });
}

Tensor mul_rowvec(const Tensor& a, const Tensor& v) {
  require_rank("mul_rowvec", a, 2);
  require_rank("mul_rowvec", v, 1);
  const std::size_t n = a.rows(), d = a.cols();
  if (v.numel() != d) shape_fail("mul_rowvec", a.shape(), v.shape());
  std::vector<double> out(a.data().begin(), a.data().end());
  auto b = v.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] *= b[j];
  std::vector<Tensor> ins{a, v};
  return make_result(Tensor({n, d}, std::move(out)), ins, [a, v, n, d](std::span<const double> g, auto gin) {
    auto x = a.data();
    auto b = v.data();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        if (!gin[0].empty()) gin[0][i * d + j] += g[i * d + j] * b[j];
        if (!gin[1].empty()) gin[1][j] += g[i * d + j] * x[i * d + j];
      }
    }
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> idx) {
  require_rank("gather_rows", a, 2);
  const std::size_t n = a.rows(), d = a.cols();
  if (idx.empty()) throw ShapeError("gather_rows: empty index list");
  std::vector<double> out(idx.size() * d);
  auto x = a.data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n) {
      throw std::out_of_range("gather_rows: index " + std::to_string(idx[r]) + " out of range for " +
                              shape_str(a.shape()));
    }
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(idx[r] * d), d, out.begin() + static_cast<std::ptrdiff_t>(r * d));
  }
  std::vector<Tensor> ins{a};
  return make_result(Tensor({idx.size(), d}, std::move(out)), ins,
                     [ix = std::vector<std::size_t>(idx.begin(), idx.end()), d](std::span<const double> g, auto gin) {
                       for (std::size_t r = 0; r < ix.size(); ++r)
                         for (std::size_t j = 0; j < d; ++j) gin[0][ix[r] * d + j] += g[r * d + j];
                     });
}

Tensor gather(const Tensor& v, std::span<const std::size_t> idx) {
  require_rank("gather", v, 1);
  if (idx.empty()) throw ShapeError("gather: empty index list");
  std::vector<double> out(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= v.numel()) throw std::out_of_range("gather: index " + std::to_string(idx[r]) + " out of range");
    out[r] = v[idx[r]];
  }
  std::vector<Tensor> ins{v};
  return make_result(Tensor::vector(std::move(out)), ins,
                     [ix = std::vector<std::size_t>(idx.begin(), idx.end())](std::span<const double> g, auto gin) {
                       for (std::size_t r = 0; r < ix.size(); ++r) gin[0][ix[r]] += g[r];
                     });
}

Tensor row(const Tensor& a, std::size_t i) {
  const std::size_t idx[] = {i};
  return gather_rows(a, idx).reshape({a.cols()});
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t d = parts[0].cols();
  std::size_t n = 0;
  for (const auto& p : parts) {
    require_rank("concat_rows", p, 2);
    if (p.cols() != d) shape_fail("concat_rows", parts[0].shape(), p.shape());
    n += p.rows();
  }
  std::vector<double> out;
  out.reserve(n * d);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return make_result(Tensor({n, d}, std::move(out)), parts,
                     [offsets = std::move(offsets)](std::span<const double> g, auto gin) {
                       for (std::size_t k = 0; k < gin.size(); ++k) {
                         for (std::size_t i = 0; i < gin[k].size(); ++i) gin[k][i] += g[offsets[k] + i];
                       }
                     });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank("slice_cols", a, 2);
  const std::size_t n = a.rows(), d = a.cols();
  if (begin >= end || end > d) {
    throw ShapeError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for " + shape_str(a.shape()));
  }
  const std::size_t w = end - begin;
  std::vector<double> out(n * w);
  auto x = a.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x[i * d + begin + j];
  std::vector<Tensor> ins{a};
  return make_result(Tensor({n, w}, std::move(out)), ins, [n, d, w, begin](std::span<const double> g, auto gin) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < w; ++j) gin[0][i * d + begin + j] += g[i * w + j];
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t n = parts[0].rows();
  std::size_t d = 0;
  std::vector<std::size_t> offsets, widths;
  for (const auto& p : parts) {
    require_rank("concat_cols", p, 2);
    if (p.rows() != n) shape_fail("concat_cols", parts[0].shape(), p.shape());
    offsets.push_back(d);
    widths.push_back(p.cols());
    d += p.cols();
  }
  std::vector<double> out(n * d);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto x = parts[k].data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * d + offsets[k] + j] = x[i * widths[k] + j];
  }
  return make_result(Tensor({n, d}, std::move(out)), parts,
                     [offsets = std::move(offsets), widths = std::move(widths), n, d](std::span<const double> g,
                                                                                      auto gin) {
                       for (std::size_t k = 0; k < gin.size(); ++k) {
                         if (gin[k].empty()) continue;
                         for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < widths[k]; ++j)
                             gin[k][i * widths[k] + j] += g[i * d + offsets[k] + j];
                       }
                     });
}

Tensor pairwise_sq_dist(const Tensor& a, const Tensor& b) {
  require_rank("pairwise_sq_dist", a, 2);
  require_rank("pairwise_sq_dist", b, 2);
  if (a.cols() != b.cols()) shape_fail("pairwise_sq_dist", a.shape(), b.shape());
  const std::size_t n = a.rows(), m = b.rows(), d = a.cols();
  auto x = a.data();
  auto y = b.data();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < d; ++k) {
        const double t = x[i * d + k] - y[j * d + k];
        s += t * t;
      }
      out[i * m + j] = s;
    }
  }
  std::vector<Tensor> ins{a, b};
  return make_result(Tensor({n, m}, std::move(out)), ins, [a, b, n, m, d](std::span<const double> g, auto gin) {
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) {
        const double gij = 2.0 * g[i * m + j];
        for (std::size_t k = 0; k < d; ++k) {
          const double t = gij * (x[i * d + k] - y[j * d + k]);
          if (!gin[0].empty()) gin[0][i * d + k] += t;
          if (!gin[1].empty()) gin[1][j * d + k] -= t;
        }
      }
    }
  });
}

}  // namespace ops

Tensor apply_primitive(std::string_view name, std::span<const Tensor> in) {
  auto need = [&](std::size_t k) {
    if (in.size() != k) {
      throw std::invalid_argument(std::string(name) + ": expected " + std::to_string(k) + " inputs, got " +
                                  std::to_string(in.size()));
    }
  };
  using Unary = Tensor (*)(const Tensor&);
  using Binary = Tensor (*)(const Tensor&, const Tensor&);
  static const std::unordered_map<std::string_view, Unary> unaries = {
      {"neg", ops::neg},         {"transpose", ops::transpose},
      {"sum", ops::sum},         {"mean", ops::mean},
      {"arctan", ops::arctan},   {"log", ops::log},
      {"exp", ops::exp},         {"sigmoid", ops::sigmoid},
      {"gelu", ops::gelu},       {"row_normalize", ops::row_normalize},
      {"softmax_rows", ops::softmax_rows},
  };
  static const std::unordered_map<std::string_view, Binary> binaries = {
      {"add", ops::add},       {"sub", ops::sub},
      {"mul", ops::mul},       {"div", ops::div},
      {"matmul", ops::matmul}, {"add_rowvec", ops::add_rowvec},
      {"mul_rowvec", ops::mul_rowvec}, {"pairwise_sq_dist", ops::pairwise_sq_dist},
  };
  if (auto it = unaries.find(name); it != unaries.end()) {
    need(1);
    return it->second(in[0]);
  }
  if (auto it = binaries.find(name); it != binaries.end()) {
    need(2);
    return it->second(in[0], in[1]);
  }
  if (name == "layer_norm_rows") {
    need(1);
    return ops::layer_norm_rows(in[0]);
  }
  if (name == "concat_rows") return ops::concat_rows(in);
  if (name == "concat_cols") return ops::concat_cols(in);
  if (name == "max_const") {
    need(2);
    return ops::max_const(in[0], in[1].item());
  }
  throw std::invalid_argument("apply_primitive: unknown primitive '" + std::string(name) + "'");
}

double finite_difference_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& point, double eps) {
  if (!(eps > 0)) throw std::invalid_argument("finite_difference_check: eps must be positive");
  Tape tape;
  std::vector<double> analytic;
  {
    TapeScope scope(tape);
    Tensor x = tape.watch(point);
    Tensor y = fn(x);
    auto g = tape.backward(y);
    auto gd = g.of(x).data();
    analytic.assign(gd.begin(), gd.end());
  }
  NoGradScope off;
  double worst = 0;
  Tensor probe = point.detach();
  for (std::size_t i = 0; i < point.numel(); ++i) {
    const double x0 = point[i];
    const double xp = x0 + eps;
    const double xm = x0 - eps;
    probe.mutable_data()[i] = xp;
    const double fp = fn(probe).item();
    probe.mutable_data()[i] = xm;
    const double fm = fn(probe).item();
    probe.mutable_data()[i] = x0;
    // Divide by the representable step, not the nominal one.
    const double numeric = (fp - fm) / (xp - xm);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
  }
  return worst;
}

}  // namespace neco
