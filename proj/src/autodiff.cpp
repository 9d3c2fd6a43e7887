#include "ruq/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "ruq/error.hpp"

namespace ruq::ad {

namespace {

thread_local Tape* g_active_tape = nullptr;

using NodePtr = std::shared_ptr<detail::Node>;

enum class Broadcast { same, rhs_scalar, lhs_scalar, rhs_row };

Broadcast classify(Op op, const Shape& a, const Shape& b) {
  const std::size_t na = element_count(a);
  const std::size_t nb = element_count(b);
  if (a == b) return Broadcast::same;
  if (nb == 1) return Broadcast::rhs_scalar;
  if (na == 1) return Broadcast::lhs_scalar;
  if (a.size() == 2 && b.size() == 1 && b[0] == a[1]) return Broadcast::rhs_row;
  throw ShapeError(std::string("shape mismatch in ") + op_name(op) + ": " + to_string(a) + " vs " +
                   to_string(b));
}

struct BinaryIndex {
  Broadcast mode;
  std::size_t row_width;
  std::size_t lhs(std::size_t k) const {
    return mode == Broadcast::lhs_scalar ? 0 : k;
  }
  std::size_t rhs(std::size_t k) const {
    switch (mode) {
      case Broadcast::same: return k;
      case Broadcast::rhs_scalar: return 0;
      case Broadcast::lhs_scalar: return k;
      case Broadcast::rhs_row: return k % row_width;
    }
    return k;
  }
};

BinaryIndex binary_index(Op op, const detail::Node& a, const detail::Node& b) {
  const Broadcast mode = classify(op, a.shape, b.shape);
  return {mode, mode == Broadcast::rhs_row ? a.shape[1] : 1};
}

bool is_binary(Op op) {
  return op == Op::add || op == Op::sub || op == Op::mul || op == Op::div;
}

std::size_t arity(Op op) {
  return (op == Op::matmul || is_binary(op)) ? 2 : 1;
}

// C[n x m] += A[n x k] * B[k x m]
void gemm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
             std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = c + i * m;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

std::vector<double> forward_value(Op op, std::span<const NodePtr> in, const Shape& target,
                                  Shape& out_shape) {
  const detail::Node& a = *in[0];
  std::vector<double> out;
  switch (op) {
    case Op::matmul: {
      const detail::Node& b = *in[1];
      if (a.shape.size() != 2 || b.shape.size() != 2 || a.shape[1] != b.shape[0]) {
        throw ShapeError("shape mismatch in matmul: " + to_string(a.shape) + " vs " +
                         to_string(b.shape));
      }
      const std::size_t n = a.shape[0], k = a.shape[1], m = b.shape[1];
      out.assign(n * m, 0.0);
      gemm_nn(a.value.data(), b.value.data(), out.data(), n, k, m);
      out_shape = {n, m};
      return out;
    }
    case Op::add:
    case Op::sub:
    case Op::mul:
    case Op::div: {
      const detail::Node& b = *in[1];
      const BinaryIndex ix = binary_index(op, a, b);
      out_shape = ix.mode == Broadcast::lhs_scalar ? b.shape : a.shape;
      const std::size_t n = element_count(out_shape);
      out.resize(n);
      const double* av = a.value.data();
      const double* bv = b.value.data();
      for (std::size_t k = 0; k < n; ++k) {
        const double x = av[ix.lhs(k)];
        const double y = bv[ix.rhs(k)];
        switch (op) {
          case Op::add: out[k] = x + y; break;
          case Op::sub: out[k] = x - y; break;
          case Op::mul: out[k] = x * y; break;
          default: out[k] = x / y; break;
        }
      }
      return out;
    }
    case Op::exp:
      out_shape = a.shape;
      out.resize(a.value.size());
      std::transform(a.value.begin(), a.value.end(), out.begin(), [](double x) { return std::exp(x); });
      return out;
    case Op::log:
      for (double x : a.value) {
        if (!(x > 0.0)) {
          std::ostringstream msg;
          msg << "domain error in log: input " << x << " is not positive";
          throw DomainError(msg.str());
        }
      }
      out_shape = a.shape;
      out.resize(a.value.size());
      std::transform(a.value.begin(), a.value.end(), out.begin(), [](double x) { return std::log(x); });
      return out;
    case Op::square:
      out_shape = a.shape;
      out.resize(a.value.size());
      std::transform(a.value.begin(), a.value.end(), out.begin(), [](double x) { return x * x; });
      return out;
    case Op::sqrt:
      for (double x : a.value) {
        if (!(x >= 0.0)) {
          std::ostringstream msg;
          msg << "domain error in sqrt: input " << x << " is negative";
          throw DomainError(msg.str());
        }
      }
      out_shape = a.shape;
      out.resize(a.value.size());
      std::transform(a.value.begin(), a.value.end(), out.begin(), [](double x) { return std::sqrt(x); });
      return out;
    case Op::softplus:
      out_shape = a.shape;
      out.resize(a.value.size());
      std::transform(a.value.begin(), a.value.end(), out.begin(),
                     [](double x) { return ruq::ad::softplus(x); });
      return out;
    case Op::relu:
      out_shape = a.shape;
      out.resize(a.value.size());
      std::transform(a.value.begin(), a.value.end(), out.begin(),
                     [](double x) { return x > 0.0 ? x : 0.0; });
      return out;
    case Op::sum:
    case Op::mean: {
      if (a.value.empty()) throw ShapeError(std::string("empty input to ") + op_name(op));
      const double s = std::accumulate(a.value.begin(), a.value.end(), 0.0);
      out_shape = {};
      out = {op == Op::sum ? s : s / static_cast<double>(a.value.size())};
      return out;
    }
    case Op::broadcast: {
      const std::size_t n = element_count(target);
      if (a.value.size() == 1) {
        out.assign(n, a.value[0]);
      } else if (target.size() == 2 && a.shape.size() == 1 && a.shape[0] == target[1]) {
        out.resize(n);
        for (std::size_t i = 0; i < target[0]; ++i) {
          std::copy(a.value.begin(), a.value.end(), out.begin() + static_cast<std::ptrdiff_t>(i * target[1]));
        }
      } else {
        throw ShapeError("shape mismatch in broadcast: " + to_string(a.shape) + " vs " +
                         to_string(target));
      }
      out_shape = target;
      return out;
    }
  }
  throw ShapeError("unknown primitive");
}

void backprop(const Record& rec) {
  const detail::Node& out = *rec.output;
  const std::vector<double>& g = out.grad;
  detail::Node& a = *rec.inputs[0];
  switch (rec.op) {
    case Op::matmul: {
      detail::Node& b = *rec.inputs[1];
      const std::size_t n = a.shape[0], k = a.shape[1], m = b.shape[1];
      if (a.requires_grad) {
        // dA[n x k] = dC[n x m] * B^T, computed as axpys over a transposed B.
        std::vector<double> bt(m * k);
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t j = 0; j < m; ++j) bt[j * k + p] = b.value[p * m + j];
        gemm_nn(g.data(), bt.data(), a.grad.data(), n, m, k);
      }
      if (b.requires_grad) {
        // dB[k x m] = A^T * dC
        for (std::size_t i = 0; i < n; ++i) {
          const double* arow = a.value.data() + i * k;
          const double* grow = g.data() + i * m;
          for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            double* brow = b.grad.data() + p * m;
            for (std::size_t j = 0; j < m; ++j) brow[j] += av * grow[j];
          }
        }
      }
      return;
    }
    case Op::add:
    case Op::sub:
    case Op::mul:
    case Op::div: {
      detail::Node& b = *rec.inputs[1];
      const BinaryIndex ix = binary_index(rec.op, a, b);
      const std::size_t n = g.size();
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t ia = ix.lhs(k), ib = ix.rhs(k);
        const double gk = g[k];
        switch (rec.op) {
          case Op::add:
            if (a.requires_grad) a.grad[ia] += gk;
            if (b.requires_grad) b.grad[ib] += gk;
            break;
          case Op::sub:
            if (a.requires_grad) a.grad[ia] += gk;
            if (b.requires_grad) b.grad[ib] -= gk;
            break;
          case Op::mul:
            if (a.requires_grad) a.grad[ia] += gk * b.value[ib];
            if (b.requires_grad) b.grad[ib] += gk * a.value[ia];
            break;
          default: {
            const double y = b.value[ib];
            if (a.requires_grad) a.grad[ia] += gk / y;
            if (b.requires_grad) b.grad[ib] -= gk * a.value[ia] / (y * y);
            break;
          }
        }
      }
      return;
    }
    default: break;
  }

  if (!a.requires_grad) return;
  const std::size_t n = a.value.size();
  switch (rec.op) {
    case Op::exp:
      for (std::size_t k = 0; k < n; ++k) a.grad[k] += g[k] * out.value[k];
      return;
    case Op::log:
      for (std::size_t k = 0; k < n; ++k) a.grad[k] += g[k] / a.value[k];
      return;
    case Op::square:
      for (std::size_t k = 0; k < n; ++k) a.grad[k] += 2.0 * g[k] * a.value[k];
      return;
    case Op::sqrt:
      // sqrt'(0) is taken as 0 so exact zeros do not poison the graph.
      for (std::size_t k = 0; k < n; ++k) {
        if (out.value[k] > 0.0) a.grad[k] += 0.5 * g[k] / out.value[k];
      }
      return;
    case Op::softplus:
      for (std::size_t k = 0; k < n; ++k) a.grad[k] += g[k] * sigmoid(a.value[k]);
      return;
    case Op::relu:
      for (std::size_t k = 0; k < n; ++k) {
        if (a.value[k] > 0.0) a.grad[k] += g[k];
      }
      return;
    case Op::sum:
      for (std::size_t k = 0; k < n; ++k) a.grad[k] += g[0];
      return;
    case Op::mean: {
      const double share = g[0] / static_cast<double>(n);
      for (std::size_t k = 0; k < n; ++k) a.grad[k] += share;
      return;
    }
    case Op::broadcast: {
      if (n == 1) {
        a.grad[0] += std::accumulate(g.begin(), g.end(), 0.0);
      } else {
        const std::size_t rows = g.size() / n;
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < n; ++j) a.grad[j] += g[i * n + j];
      }
      return;
    }
    default: return;
  }
}

}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

const char* op_name(Op op) {
  switch (op) {
    case Op::matmul: return "matmul";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::square: return "square";
    case Op::sqrt: return "sqrt";
    case Op::softplus: return "softplus";
    case Op::relu: return "relu";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::broadcast: return "broadcast";
  }
  return "unknown";
}

double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double softplus_inverse(double y) {
  if (!(y > 0.0)) throw DomainError("softplus_inverse requires a positive argument");
  return y > 20.0 ? y + std::log(-std::expm1(-y)) : std::log(std::expm1(y));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : node_(std::make_shared<detail::Node>()) {}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(std::make_shared<detail::Node>()) {
  if (element_count(shape) != values.size()) {
    throw ShapeError("tensor data length " + std::to_string(values.size()) +
                     " does not match shape " + to_string(shape));
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  set_requires_grad(requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return filled(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
  const std::size_t n = element_count(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, {value}, requires_grad);
}

std::size_t Tensor::rows() const {
  return rank() == 0 ? 1 : node_->shape[0];
}

std::size_t Tensor::cols() const {
  return rank() == 2 ? node_->shape[1] : 1;
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on non-scalar tensor of shape " + to_string(shape()));
  return node_->value[0];
}

void Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  if (on) {
    if (node_->grad.size() != node_->value.size()) node_->grad.assign(node_->value.size(), 0.0);
  } else {
    node_->grad.clear();
  }
}

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  return Tensor(node_->shape, node_->value, node_->requires_grad);
}

Tensor Tensor::detach() const {
  return Tensor(node_->shape, node_->value, false);
}

bool Tensor::all_finite() const {
  auto finite = [](double v) { return std::isfinite(v); };
  return std::all_of(node_->value.begin(), node_->value.end(), finite) &&
         std::all_of(node_->grad.begin(), node_->grad.end(), finite);
}

// ---------------------------------------------------------------------------
// Tape

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

void Tape::backward(const Tensor& output) {
  if (!output.is_scalar()) {
    throw ShapeError("backward requires a scalar output, got shape " + to_string(output.shape()));
  }
  if (!output.requires_grad()) return;
  for (Record& rec : records_) {
    std::fill(rec.output->grad.begin(), rec.output->grad.end(), 0.0);
  }
  output.node()->grad[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) backprop(*it);
}

void backward(const Tensor& output) {
  Tape* tape = active_tape();
  if (!tape) throw NumericError("backward called without an active tape");
  tape->backward(output);
}

// ---------------------------------------------------------------------------
// Primitive dispatch

Tensor make_result(Shape shape, std::vector<double> values) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  return Tensor(std::move(node));
}

Tensor apply(Op op, std::span<const Tensor> inputs, const Shape& target) {
  if (inputs.size() != arity(op)) {
    throw ShapeError(std::string("wrong number of inputs for ") + op_name(op));
  }
  std::vector<NodePtr> nodes;
  nodes.reserve(inputs.size());
  bool needs_grad = false;
  for (const Tensor& t : inputs) {
    nodes.push_back(t.node());
    needs_grad = needs_grad || t.requires_grad();
  }
  Shape out_shape;
  std::vector<double> values = forward_value(op, nodes, target, out_shape);
  Tensor out = make_result(std::move(out_shape), std::move(values));
  Tape* tape = active_tape();
  if (tape && needs_grad) {
    out.set_requires_grad(true);
    tape->push(Record{op, std::move(nodes), out.node()});
  }
  return out;
}

namespace {
Tensor unary(Op op, const Tensor& a) {
  const Tensor in[] = {a};
  return apply(op, in);
}
Tensor binary(Op op, const Tensor& a, const Tensor& b) {
  const Tensor in[] = {a, b};
  return apply(op, in);
}
}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) { return binary(Op::matmul, a, b); }
Tensor add(const Tensor& a, const Tensor& b) { return binary(Op::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(Op::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(Op::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(Op::div, a, b); }
Tensor exp(const Tensor& a) { return unary(Op::exp, a); }
Tensor log(const Tensor& a) { return unary(Op::log, a); }
Tensor square(const Tensor& a) { return unary(Op::square, a); }
Tensor sqrt(const Tensor& a) { return unary(Op::sqrt, a); }
Tensor softplus(const Tensor& a) { return unary(Op::softplus, a); }
Tensor relu(const Tensor& a) { return unary(Op::relu, a); }
Tensor sum(const Tensor& a) { return unary(Op::sum, a); }
Tensor mean(const Tensor& a) { return unary(Op::mean, a); }

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  const Tensor in[] = {a};
  return apply(Op::broadcast, in, shape);
}

Tensor add(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
Tensor mul(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }

// ---------------------------------------------------------------------------
// Finite-difference check

double grad_check(const std::function<Tensor()>& f, std::span<Tensor> wrt, double step) {
  if (!(step > 0.0)) throw ConfigError("grad_check step must be positive");
  std::vector<bool> had_grad;
  for (Tensor& t : wrt) {
    had_grad.push_back(t.requires_grad());
    t.set_requires_grad(true);
  }
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor out = f();
    if (!out.is_scalar()) throw ShapeError("grad_check requires a scalar function");
    if (!std::isfinite(out.item())) throw NumericError("grad_check: non-finite function value");
    tape.backward(out);
  }
  std::vector<std::vector<double>> analytic;
  for (const Tensor& t : wrt) analytic.emplace_back(t.grad().begin(), t.grad().end());

  double worst = 0.0;
  for (std::size_t w = 0; w < wrt.size(); ++w) {
    std::span<double> x = wrt[w].mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double saved = x[i];
      x[i] = saved + step;
      const double up = f().item();
      x[i] = saved - step;
      const double down = f().item();
      x[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(analytic[w][i])) {
        throw NumericError("grad_check: non-finite intermediate at coordinate " + std::to_string(i));
      }
      const double fd = (up - down) / (2.0 * step);
      worst = std::max(worst, std::abs(analytic[w][i] - fd) / (std::abs(fd) + 1e-8));
    }
  }
  for (std::size_t w = 0; w < wrt.size(); ++w) {
    if (!had_grad[w]) wrt[w].set_requires_grad(false);
  }
  return worst;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step) {
  Tensor probe = x.clone();
  Tensor params[] = {probe};
  return grad_check([&] { return f(probe); }, params, step);
}

}  // namespace ruq::ad
