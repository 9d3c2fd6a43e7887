#pragma once

// Minimal reverse-mode automatic differentiation over dense 64-bit tensors.
//
// A Tensor is a shared handle: copies alias the same buffers, the same way a
// parameter is referenced by the layer that owns it and by the optimizer that
// updates it. Use clone() for an independent copy.
//
// Primitives record onto the tape that is active on the calling thread (see
// TapeScope) whenever one of their inputs requires a gradient. Without an
// active tape they evaluate eagerly and record nothing.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace ruq::ad {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty unless requires_grad
  bool requires_grad = false;
};
}  // namespace detail

class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  bool is_scalar() const { return size() == 1; }

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  double item() const;
  double operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);

  /// Gradient buffer; all zeros until a backward pass reaches this tensor.
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad; }
  void zero_grad();

  /// Deep copy with the same requires_grad flag and a zeroed gradient.
  Tensor clone() const;
  /// Copy of the values that is not connected to any graph.
  Tensor detach() const;

  /// True when both handles refer to the same buffers.
  bool aliases(const Tensor& other) const { return node_ == other.node_; }

  /// True when every value (and gradient entry) is finite.
  bool all_finite() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
  friend class Tape;
  friend Tensor make_result(Shape shape, std::vector<double> values);
};

enum class Op {
  matmul,
  add,
  sub,
  mul,
  div,
  exp,
  log,
  square,
  sqrt,
  softplus,
  relu,
  sum,
  mean,
  broadcast,
};

const char* op_name(Op op);

/// One primitive application. Inputs always precede the output in tape order.
struct Record {
  Op op;
  std::vector<std::shared_ptr<detail::Node>> inputs;
  std::shared_ptr<detail::Node> output;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }
  void clear() { records_.clear(); }

  void push(Record record) { records_.push_back(std::move(record)); }

  /// Accumulates d(output)/d(leaf) into every requires_grad leaf reachable
  /// from `output`. Intermediate gradients are reset first, so a second call
  /// without zeroing leaves doubles the leaf gradients.
  void backward(const Tensor& output);

 private:
  std::vector<Record> records_;
};

/// Makes `tape` the active tape of the calling thread for the scope lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

/// Generic entry point; the named helpers below forward here.
Tensor apply(Op op, std::span<const Tensor> inputs, const Shape& target = {});

/// Backward pass on the active tape.
void backward(const Tensor& output);

// Binary operators accept equal shapes, a size-1 operand on either side, or
// an [n, m] lhs with an [m] rhs (bias-style row broadcast).
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Expands a size-1 tensor, or an [m] row onto [n, m].
Tensor broadcast_to(const Tensor& a, const Shape& shape);

Tensor add(const Tensor& a, double b);
Tensor mul(const Tensor& a, double b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, b); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, b); }
inline Tensor operator*(double a, const Tensor& b) { return mul(b, a); }

/// Numerically stable log(1 + exp(x)).
double softplus(double x);
/// Inverse of softplus for y > 0.
double softplus_inverse(double y);
double sigmoid(double x);

/// Max over coordinates of |analytic - central difference| / (|central difference| + 1e-8).
/// Analytic gradients come from one backward pass of `f`; `f` must be a
/// deterministic scalar function of the listed tensors.
double grad_check(const std::function<Tensor()>& f, std::span<Tensor> wrt, double step = 1e-5);
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double step = 1e-5);

}  // namespace ruq::ad
