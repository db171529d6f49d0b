#pragma once

// Dense tensors with a flat reverse-mode tape.
//
// A Tensor owns (shares) a contiguous buffer of doubles plus a shape. When a
// Tape is active on the current thread and some input of a primitive is being
// tracked, the primitive records a node holding its vector-Jacobian product.
// Tapes are rebuilt every step; nothing persists between backward passes.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace neco {

using Shape = std::vector<std::size_t>;
using NodeId = std::int64_t;
inline constexpr NodeId kNoNode = -1;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v);
  static Tensor vector(std::vector<double> v);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor identity(std::size_t n);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_->size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  // Rank-2 helpers.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return {data_->data(), data_->size()}; }
  // Copy-on-write access. Only meaningful on untracked tensors.
  std::span<double> mutable_data();

  double operator[](std::size_t i) const { return (*data_)[i]; }
  double at(std::size_t r, std::size_t c) const;
  double item() const;

  bool requires_grad() const { return node_ != kNoNode; }
  NodeId node() const { return node_; }

  // Same values, no gradient tracking.
  Tensor detach() const;
  Tensor reshape(Shape shape) const;  // differentiable

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  NodeId node_ = kNoNode;
};

// Accumulates into grad_in[k] (empty span when input k is not tracked).
using Vjp = std::function<void(std::span<const double> grad_out,
                               std::span<const std::span<double>> grad_in)>;

class Gradients {
 public:
  const Tensor& of(const Tensor& leaf) const;
  const Tensor& of(NodeId id) const;
  bool contains(NodeId id) const { return grads_.count(id) != 0; }
  std::size_t size() const { return grads_.size(); }
  const std::unordered_map<NodeId, Tensor>& table() const { return grads_; }

 private:
  friend class Tape;
  std::unordered_map<NodeId, Tensor> grads_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers t as a gradient leaf; returns a tracked handle sharing its data.
  Tensor watch(const Tensor& t);

  // Records a primitive output. Inputs without a node are treated as constants.
  Tensor record(Tensor value, std::span<const Tensor> inputs, Vjp vjp);

  // Reverse sweep from a scalar loss. Every watched leaf gets an entry.
  Gradients backward(const Tensor& loss) const;

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Shape shape;
    std::vector<NodeId> inputs;
    Vjp vjp;  // empty for leaves
  };
  std::vector<Node> nodes_;
};

// Tape the primitives on this thread record into, or nullptr.
Tape* active_tape();

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// Disables recording for its lifetime.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* prev_;
};

// Records `value` on the active tape if any input is tracked; otherwise
// returns it untouched.
Tensor make_result(Tensor value, std::span<const Tensor> inputs, Vjp vjp);

inline constexpr double kLogFloor = 1e-12;

namespace ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor arctan(const Tensor& a);
Tensor log(const Tensor& a);  // log(max(x, kLogFloor)); throws on x <= 0 when strict
Tensor exp(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor max_const(const Tensor& a, double c);

Tensor row_normalize(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
Tensor layer_norm_rows(const Tensor& a, double eps = 1e-6);
Tensor add_rowvec(const Tensor& a, const Tensor& v);  // a: n x d, v: d
Tensor mul_rowvec(const Tensor& a, const Tensor& v);

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> idx);
Tensor gather(const Tensor& v, std::span<const std::size_t> idx);  // rank-1
Tensor row(const Tensor& a, std::size_t i);                           // -> rank-1
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor concat_cols(std::span<const Tensor> parts);

Tensor pairwise_sq_dist(const Tensor& a, const Tensor& b);

}  // namespace ops

// Name-dispatched entry point over the primitive table.
Tensor apply_primitive(std::string_view name, std::span<const Tensor> inputs);

Gradients backward(const Tensor& loss);

// max over coordinates of |analytic - central difference| / max(1, |analytic|)
double finite_difference_check(const std::function<Tensor(const Tensor&)>& fn,
                               const Tensor& point, double eps);

}  // namespace neco
