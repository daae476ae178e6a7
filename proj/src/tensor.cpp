#include "sermoe/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>
#include <utility>

namespace sermoe {

namespace {

std::atomic<std::uint64_t> g_next_node_id{1};

thread_local bool g_grad_enabled = true;

constexpr double kNormEps = 1e-12;

[[noreturn]] void shape_error(const std::string& op, const Shape& a,
                              const Shape& b) {
  throw std::invalid_argument(op + ": shape mismatch " + shape_str(a) +
                              " vs " + shape_str(b));
}

void check_defined(const char* op, const Tensor& t) {
  if (!t.defined()) {
    throw std::invalid_argument(std::string(op) + ": undefined tensor input");
  }
}

double stable_softplus(double x) {
  // ln(1 + e^x) without overflow for large |x|
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double sigmoid_scalar(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) {
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) {
      out << 'x';
    }
    out << shape[i];
  }
  out << ']';
  return out.str();
}

void TensorNode::ensure_grad() {
  if (grad.size() != values.size()) {
    grad.assign(values.size(), 0.0);
  }
}

void TensorNode::add_grad(std::size_t index, double g) {
  grad[index] += g;
}

// ---------------------------------------------------------------------------
// Tensor handle
// ---------------------------------------------------------------------------

Tensor Tensor::from_values(Shape shape, std::vector<double> values,
                           bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument(
        "tensor: value count " + std::to_string(values.size()) +
        " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  node->node_id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from_values(std::move(shape), std::vector<double>(n, 0.0),
                     requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from_values(std::move(shape), std::vector<double>(n, value),
                     requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_values(Shape{}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->values.size(); }
std::size_t Tensor::rank() const { return node_->shape.size(); }
bool Tensor::requires_grad() const { return node_->requires_grad; }
std::uint64_t Tensor::node_id() const { return node_->node_id; }
const std::string& Tensor::op() const { return node_->op; }

const std::vector<double>& Tensor::values() const { return node_->values; }

std::vector<double>& Tensor::mutable_values() {
  if (!node_->parents.empty()) {
    throw std::logic_error("tensor: only leaf tensors may be mutated");
  }
  return node_->values;
}

double Tensor::value() const {
  if (numel() != 1) {
    throw std::invalid_argument("tensor: value() needs a single element, got " +
                                shape_str(shape()));
  }
  return node_->values[0];
}

double Tensor::at(std::size_t i) const { return node_->values.at(i); }

double Tensor::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) {
    throw std::invalid_argument("tensor: 2-index access on " +
                                shape_str(shape()));
  }
  return node_->values.at(row * node_->shape[1] + col);
}

bool Tensor::has_grad() const { return node_->has_grad(); }

const std::vector<double>& Tensor::grad() const {
  if (!node_->has_grad()) {
    throw std::logic_error("tensor: no gradient available");
  }
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

// ---------------------------------------------------------------------------
// Graph recording
// ---------------------------------------------------------------------------

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool enabled) { g_grad_enabled = enabled; }

NoGradGuard::NoGradGuard() : prev_(GradMode::enabled()) {
  GradMode::set_enabled(false);
}

NoGradGuard::~NoGradGuard() { GradMode::set_enabled(prev_); }

Tensor make_op_tensor(std::string op, Shape shape, std::vector<double> values,
                      std::vector<Tensor> parents,
                      std::function<void(TensorNode&)> backprop) {
  if (shape_numel(shape) != values.size()) {
    throw std::logic_error(op + ": output value count does not match shape");
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->node_id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
  node->op = std::move(op);

  bool needs_grad = false;
  for (const Tensor& p : parents) {
    if (p.requires_grad()) {
      needs_grad = true;
      break;
    }
  }
  if (needs_grad && GradMode::enabled()) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (const Tensor& p : parents) {
      node->parents.push_back(p.node());
    }
    node->backprop = std::move(backprop);
  }
  return Tensor(std::move(node));
}

void backward(const Tensor& loss) {
  check_defined("backward", loss);
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " +
                                shape_str(loss.shape()));
  }

  // Iterative post-order DFS; the reversed finish order is a reverse
  // topological order of the recorded DAG.
  std::vector<TensorNode*> order;
  std::unordered_set<const TensorNode*> visited;
  struct Frame {
    TensorNode* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.node().get(), 0});
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    Frame& top = stack.back();
    if (top.next_parent < top.node->parents.size()) {
      TensorNode* parent = top.node->parents[top.next_parent].get();
      ++top.next_parent;
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.push_back({parent, 0});
      }
    } else {
      order.push_back(top.node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* node = *it;
    if (node->backprop && node->has_grad()) {
      for (auto& parent : node->parents) {
        if (parent->requires_grad) {
          parent->ensure_grad();
        }
      }
      node->backprop(*node);
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise machinery
// ---------------------------------------------------------------------------

namespace {

enum class Broadcast { Equal, AScalar, BScalar, BRow, ARow };

Broadcast classify_broadcast(const std::string& op, const Shape& a,
                             const Shape& b) {
  if (a == b) {
    return Broadcast::Equal;
  }
  if (shape_numel(a) == 1) {
    return Broadcast::AScalar;
  }
  if (shape_numel(b) == 1) {
    return Broadcast::BScalar;
  }
  if (a.size() == 2 && b.size() == 1 && a[1] == b[0]) {
    return Broadcast::BRow;
  }
  if (b.size() == 2 && a.size() == 1 && b[1] == a[0]) {
    return Broadcast::ARow;
  }
  shape_error(op, a, b);
}

// Maps output index -> operand index under the chosen broadcast.
struct IndexMap {
  Broadcast mode;
  std::size_t cols = 0;
  std::size_t a_index(std::size_t i) const {
    switch (mode) {
      case Broadcast::AScalar:
        return 0;
      case Broadcast::ARow:
        return i % cols;
      default:
        return i;
    }
  }
  std::size_t b_index(std::size_t i) const {
    switch (mode) {
      case Broadcast::BScalar:
        return 0;
      case Broadcast::BRow:
        return i % cols;
      default:
        return i;
    }
  }
};

Tensor binary_elementwise(const std::string& op, const Tensor& a,
                          const Tensor& b,
                          const std::function<double(double, double)>& fwd,
                          // d out / d a and d out / d b at (va, vb)
                          const std::function<double(double, double)>& da,
                          const std::function<double(double, double)>& db) {
  check_defined(op.c_str(), a);
  check_defined(op.c_str(), b);
  const Broadcast mode = classify_broadcast(op, a.shape(), b.shape());
  const Shape& out_shape = (mode == Broadcast::AScalar || mode == Broadcast::ARow)
                               ? b.shape()
                               : a.shape();
  IndexMap map{mode, out_shape.size() == 2 ? out_shape[1] : 0};
  if (mode == Broadcast::ARow || mode == Broadcast::BRow) {
    map.cols = out_shape[1];
  }

  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(shape_numel(out_shape));
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = fwd(av[map.a_index(i)], bv[map.b_index(i)]);
  }

  return make_op_tensor(op, out_shape, std::move(out), {a, b},
                        [map, da, db](TensorNode& node) {
                          auto& pa = *node.parents[0];
                          auto& pb = *node.parents[1];
                          for (std::size_t i = 0; i < node.grad.size(); ++i) {
                            const double g = node.grad[i];
                            const std::size_t ia = map.a_index(i);
                            const std::size_t ib = map.b_index(i);
                            const double va = pa.values[ia];
                            const double vb = pb.values[ib];
                            if (pa.requires_grad) {
                              pa.add_grad(ia, g * da(va, vb));
                            }
                            if (pb.requires_grad) {
                              pb.add_grad(ib, g * db(va, vb));
                            }
                          }
                        });
}

Tensor unary_elementwise(const std::string& op, const Tensor& x,
                         const std::function<double(double)>& fwd,
                         // derivative given (input, output)
                         const std::function<double(double, double)>& dx) {
  check_defined(op.c_str(), x);
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = fwd(xv[i]);
  }
  return make_op_tensor(op, x.shape(), std::move(out), {x},
                        [dx](TensorNode& node) {
                          auto& p = *node.parents[0];
                          if (!p.requires_grad) {
                            return;
                          }
                          for (std::size_t i = 0; i < node.grad.size(); ++i) {
                            p.add_grad(i, node.grad[i] *
                                              dx(p.values[i], node.values[i]));
                          }
                        });
}

}  // namespace

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined("matmul", a);
  check_defined("matmul", b);
  if (a.rank() < 1 || a.rank() > 2 || b.rank() < 1 || b.rank() > 2) {
    shape_error("matmul", a.shape(), b.shape());
  }
  const std::size_t n = a.rank() == 2 ? a.shape()[0] : 1;
  const std::size_t ka = a.rank() == 2 ? a.shape()[1] : a.shape()[0];
  const std::size_t kb = b.rank() == 2 ? b.shape()[0] : b.shape()[0];
  const std::size_t m = b.rank() == 2 ? b.shape()[1] : 1;
  if (ka != kb) {
    shape_error("matmul", a.shape(), b.shape());
  }
  const std::size_t k = ka;

  Shape out_shape;
  if (a.rank() == 2 && b.rank() == 2) {
    out_shape = {n, m};
  } else if (a.rank() == 1 && b.rank() == 2) {
    out_shape = {m};
  } else if (a.rank() == 2 && b.rank() == 1) {
    out_shape = {n};
  }  // both rank 1 -> scalar, empty shape

  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(n * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av_ip = av[i * k + p];
      if (av_ip == 0.0) {
        continue;
      }
      const std::size_t brow = p * m;
      const std::size_t orow = i * m;
      for (std::size_t j = 0; j < m; ++j) {
        out[orow + j] += av_ip * bv[brow + j];
      }
    }
  }

  return make_op_tensor(
      "matmul", std::move(out_shape), std::move(out), {a, b},
      [n, k, m](TensorNode& node) {
        auto& pa = *node.parents[0];
        auto& pb = *node.parents[1];
        const auto& g = node.grad;
        if (pa.requires_grad) {
          // dA = G * B^T
          for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              double acc = 0.0;
              for (std::size_t j = 0; j < m; ++j) {
                acc += g[i * m + j] * pb.values[p * m + j];
              }
              pa.add_grad(i * k + p, acc);
            }
          }
        }
        if (pb.requires_grad) {
          // dB = A^T * G
          for (std::size_t p = 0; p < k; ++p) {
            for (std::size_t j = 0; j < m; ++j) {
              double acc = 0.0;
              for (std::size_t i = 0; i < n; ++i) {
                acc += pa.values[i * k + p] * g[i * m + j];
              }
              pb.add_grad(p * m + j, acc);
            }
          }
        }
      });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) {
    throw std::invalid_argument("concat: no inputs");
  }
  for (const Tensor& p : parts) {
    check_defined("concat", p);
  }
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) {
    throw std::invalid_argument("concat: axis " + std::to_string(axis) +
                                " out of range for " + shape_str(first));
  }
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) {
      shape_error("concat", first, s);
    }
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) {
        shape_error("concat", first, s);
      }
    }
    out_shape[axis] += s[axis];
  }

  // outer = product of dims before axis, inner = product after
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) {
    outer *= first[d];
  }
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < first.size(); ++d) {
    inner *= first[d];
  }

  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> part_axis_sizes;
  part_axis_sizes.reserve(parts.size());
  const std::size_t out_stride = out_shape[axis] * inner;
  std::size_t axis_offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t p_axis = p.shape()[axis];
    part_axis_sizes.push_back(p_axis);
    const auto& pv = p.values();
    for (std::size_t o = 0; o < outer; ++o) {
      const std::size_t src = o * p_axis * inner;
      const std::size_t dst = o * out_stride + axis_offset * inner;
      std::copy(pv.begin() + src, pv.begin() + src + p_axis * inner,
                out.begin() + dst);
    }
    axis_offset += p_axis;
  }

  return make_op_tensor(
      "concat", std::move(out_shape), std::move(out), parts,
      [outer, inner, part_axis_sizes, out_stride](TensorNode& node) {
        std::size_t offset = 0;
        for (std::size_t pi = 0; pi < node.parents.size(); ++pi) {
          auto& p = *node.parents[pi];
          const std::size_t p_axis = part_axis_sizes[pi];
          if (p.requires_grad) {
            for (std::size_t o = 0; o < outer; ++o) {
              const std::size_t dst = o * p_axis * inner;
              const std::size_t src = o * out_stride + offset * inner;
              for (std::size_t i = 0; i < p_axis * inner; ++i) {
                p.add_grad(dst + i, node.grad[src + i]);
              }
            }
          }
          offset += p_axis;
        }
      });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t length) {
  check_defined("slice", x);
  const Shape& s = x.shape();
  if (axis >= s.size()) {
    throw std::invalid_argument("slice: axis " + std::to_string(axis) +
                                " out of range for " + shape_str(s));
  }
  if (start + length > s[axis] || length == 0) {
    throw std::invalid_argument(
        "slice: range [" + std::to_string(start) + ", " +
        std::to_string(start + length) + ") invalid for " + shape_str(s));
  }
  Shape out_shape = s;
  out_shape[axis] = length;

  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) {
    outer *= s[d];
  }
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < s.size(); ++d) {
    inner *= s[d];
  }
  const std::size_t in_stride = s[axis] * inner;
  const std::size_t out_stride = length * inner;

  const auto& xv = x.values();
  std::vector<double> out(shape_numel(out_shape));
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy(xv.begin() + o * in_stride + start * inner,
              xv.begin() + o * in_stride + (start + length) * inner,
              out.begin() + o * out_stride);
  }

  return make_op_tensor(
      "slice", std::move(out_shape), std::move(out), {x},
      [outer, inner, in_stride, out_stride, start](TensorNode& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) {
          return;
        }
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < out_stride; ++i) {
            p.add_grad(o * in_stride + start * inner + i,
                       node.grad[o * out_stride + i]);
          }
        }
      });
}

Tensor reshape(const Tensor& x, Shape shape) {
  check_defined("reshape", x);
  if (shape_numel(shape) != x.numel()) {
    shape_error("reshape", x.shape(), shape);
  }
  return make_op_tensor("reshape", std::move(shape),
                        std::vector<double>(x.values()), {x},
                        [](TensorNode& node) {
                          auto& p = *node.parents[0];
                          if (!p.requires_grad) {
                            return;
                          }
                          for (std::size_t i = 0; i < node.grad.size(); ++i) {
                            p.add_grad(i, node.grad[i]);
                          }
                        });
}

Tensor transpose(const Tensor& x) {
  check_defined("transpose", x);
  if (x.rank() != 2) {
    throw std::invalid_argument("transpose: expected rank 2, got " +
                                shape_str(x.shape()));
  }
  const std::size_t r = x.shape()[0];
  const std::size_t c = x.shape()[1];
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      out[j * r + i] = xv[i * c + j];
    }
  }
  return make_op_tensor("transpose", {c, r}, std::move(out), {x},
                        [r, c](TensorNode& node) {
                          auto& p = *node.parents[0];
                          if (!p.requires_grad) {
                            return;
                          }
                          for (std::size_t i = 0; i < r; ++i) {
                            for (std::size_t j = 0; j < c; ++j) {
                              p.add_grad(i * c + j, node.grad[j * r + i]);
                            }
                          }
                        });
}

Tensor sum(const Tensor& x) {
  check_defined("sum", x);
  double acc = 0.0;
  for (double v : x.values()) {
    acc += v;
  }
  return make_op_tensor("sum", Shape{}, {acc}, {x}, [](TensorNode& node) {
    auto& p = *node.parents[0];
    if (!p.requires_grad) {
      return;
    }
    for (std::size_t i = 0; i < p.values.size(); ++i) {
      p.add_grad(i, node.grad[0]);
    }
  });
}

Tensor mean(const Tensor& x) {
  check_defined("mean", x);
  if (x.numel() == 0) {
    throw std::invalid_argument("mean: empty tensor");
  }
  double acc = 0.0;
  for (double v : x.values()) {
    acc += v;
  }
  const double inv_n = 1.0 / static_cast<double>(x.numel());
  return make_op_tensor("mean", Shape{}, {acc * inv_n}, {x},
                        [inv_n](TensorNode& node) {
                          auto& p = *node.parents[0];
                          if (!p.requires_grad) {
                            return;
                          }
                          for (std::size_t i = 0; i < p.values.size(); ++i) {
                            p.add_grad(i, node.grad[0] * inv_n);
                          }
                        });
}

Tensor exp(const Tensor& x) {
  return unary_elementwise(
      "exp", x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_elementwise(
      "log", x, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_elementwise(
      "sigmoid", x, [](double v) { return sigmoid_scalar(v); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary_elementwise(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& x) {
  return unary_elementwise(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  // 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  return unary_elementwise(
      "gelu", x,
      [](double v) {
        const double t = std::tanh(kC * (v + kA * v * v * v));
        return 0.5 * v * (1.0 + t);
      },
      [](double v, double) {
        const double inner = kC * (v + kA * v * v * v);
        const double t = std::tanh(inner);
        const double dinner = kC * (1.0 + 3.0 * kA * v * v);
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner;
      });
}

Tensor mish(const Tensor& x) {
  return unary_elementwise(
      "mish", x,
      [](double v) { return v * std::tanh(stable_softplus(v)); },
      [](double v, double) {
        const double t = std::tanh(stable_softplus(v));
        return t + v * (1.0 - t * t) * sigmoid_scalar(v);
      });
}

Tensor softmax(const Tensor& x) {
  check_defined("softmax", x);
  if (x.rank() == 0) {
    throw std::invalid_argument("softmax: rank-0 input");
  }
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.numel() / cols;
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * cols;
    double mx = xv[base];
    for (std::size_t j = 1; j < cols; ++j) {
      mx = std::max(mx, xv[base + j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      out[base + j] = std::exp(xv[base + j] - mx);
      z += out[base + j];
    }
    for (std::size_t j = 0; j < cols; ++j) {
      out[base + j] /= z;
    }
  }
  return make_op_tensor(
      "softmax", x.shape(), std::move(out), {x},
      [rows, cols](TensorNode& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) {
          return;
        }
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t base = r * cols;
          double dot = 0.0;
          for (std::size_t j = 0; j < cols; ++j) {
            dot += node.grad[base + j] * node.values[base + j];
          }
          for (std::size_t j = 0; j < cols; ++j) {
            p.add_grad(base + j, node.values[base + j] *
                                     (node.grad[base + j] - dot));
          }
        }
      });
}

Tensor sqrt(const Tensor& x) {
  return unary_elementwise(
      "sqrt", x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return 0.5 / y; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (lo > hi) {
    throw std::invalid_argument("clamp: min " + std::to_string(lo) +
                                " above max " + std::to_string(hi));
  }
  return unary_elementwise(
      "clamp", x,
      [lo, hi](double v) { return std::min(hi, std::max(lo, v)); },
      [lo, hi](double v, double) {
        return (v >= lo && v <= hi) ? 1.0 : 0.0;
      });
}

Tensor l2_normalize(const Tensor& x) {
  check_defined("l2_normalize", x);
  if (x.rank() == 0) {
    throw std::invalid_argument("l2_normalize: rank-0 input");
  }
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.numel() / cols;
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * cols;
    double sq = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      sq += xv[base + j] * xv[base + j];
    }
    const double norm = std::sqrt(sq);
    norms[r] = norm;
    if (norm < kNormEps) {
      // degenerate row passes through unscaled
      for (std::size_t j = 0; j < cols; ++j) {
        out[base + j] = xv[base + j];
      }
    } else {
      for (std::size_t j = 0; j < cols; ++j) {
        out[base + j] = xv[base + j] / norm;
      }
    }
  }
  return make_op_tensor(
      "l2_normalize", x.shape(), std::move(out), {x},
      [rows, cols, norms](TensorNode& node) {
        auto& p = *node.parents[0];
        if (!p.requires_grad) {
          return;
        }
        for (std::size_t r = 0; r < rows; ++r) {
          if (norms[r] < kNormEps) {
            continue;  // degenerate rows get zero gradient
          }
          const std::size_t base = r * cols;
          double dot = 0.0;
          for (std::size_t j = 0; j < cols; ++j) {
            dot += node.grad[base + j] * node.values[base + j];
          }
          for (std::size_t j = 0; j < cols; ++j) {
            p.add_grad(base + j, (node.grad[base + j] -
                                  node.values[base + j] * dot) /
                                     norms[r]);
          }
        }
      });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  check_defined("cosine_similarity", a);
  check_defined("cosine_similarity", b);
  if (a.rank() != 1 || b.rank() != 1 || a.shape() != b.shape()) {
    shape_error("cosine_similarity", a.shape(), b.shape());
  }
  const auto& av = a.values();
  const auto& bv = b.values();
  double dot = 0.0, na2 = 0.0, nb2 = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    dot += av[i] * bv[i];
    na2 += av[i] * av[i];
    nb2 += bv[i] * bv[i];
  }
  const double na = std::sqrt(na2);
  const double nb = std::sqrt(nb2);
  const bool degenerate = na < kNormEps || nb < kNormEps;
  const double cosv = degenerate ? 0.0 : dot / (na * nb);

  return make_op_tensor(
      "cosine_similarity", Shape{}, {cosv}, {a, b},
      [na, nb, cosv, degenerate](TensorNode& node) {
        if (degenerate) {
          return;
        }
        auto& pa = *node.parents[0];
        auto& pb = *node.parents[1];
        const double g = node.grad[0];
        for (std::size_t i = 0; i < pa.values.size(); ++i) {
          const double va = pa.values[i];
          const double vb = pb.values[i];
          if (pa.requires_grad) {
            pa.add_grad(i, g * (vb / (na * nb) - cosv * va / (na * na)));
          }
          if (pb.requires_grad) {
            pb.add_grad(i, g * (va / (na * nb) - cosv * vb / (nb * nb)));
          }
        }
      });
}

Tensor conv1d(const Tensor& x, const Tensor& kernel) {
  check_defined("conv1d", x);
  check_defined("conv1d", kernel);
  if (x.rank() != 2 || kernel.rank() != 3) {
    shape_error("conv1d", x.shape(), kernel.shape());
  }
  const std::size_t len = x.shape()[0];
  const std::size_t d_in = x.shape()[1];
  const std::size_t width = kernel.shape()[0];
  const std::size_t filters = kernel.shape()[2];
  if (kernel.shape()[1] != d_in) {
    shape_error("conv1d", x.shape(), kernel.shape());
  }
  if (width % 2 == 0) {
    throw std::invalid_argument("conv1d: kernel width must be odd, got " +
                                std::to_string(width));
  }
  if (len == 0) {
    throw std::invalid_argument("conv1d: empty sequence");
  }
  const std::size_t half = width / 2;

  const auto& xv = x.values();
  const auto& kv = kernel.values();
  std::vector<double> out(len * filters, 0.0);
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t dt = 0; dt < width; ++dt) {
      const std::ptrdiff_t s =
          static_cast<std::ptrdiff_t>(t + dt) - static_cast<std::ptrdiff_t>(half);
      if (s < 0 || s >= static_cast<std::ptrdiff_t>(len)) {
        continue;  // zero padding
      }
      const std::size_t xbase = static_cast<std::size_t>(s) * d_in;
      const std::size_t kbase = dt * d_in * filters;
      for (std::size_t c = 0; c < d_in; ++c) {
        const double xval = xv[xbase + c];
        if (xval == 0.0) {
          continue;
        }
        const std::size_t krow = kbase + c * filters;
        const std::size_t orow = t * filters;
        for (std::size_t o = 0; o < filters; ++o) {
          out[orow + o] += xval * kv[krow + o];
        }
      }
    }
  }

  return make_op_tensor(
      "conv1d", {len, filters}, std::move(out), {x, kernel},
      [len, d_in, width, filters, half](TensorNode& node) {
        auto& px = *node.parents[0];
        auto& pk = *node.parents[1];
        for (std::size_t t = 0; t < len; ++t) {
          for (std::size_t dt = 0; dt < width; ++dt) {
            const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + dt) -
                                     static_cast<std::ptrdiff_t>(half);
            if (s < 0 || s >= static_cast<std::ptrdiff_t>(len)) {
              continue;
            }
            const std::size_t xbase = static_cast<std::size_t>(s) * d_in;
            const std::size_t kbase = dt * d_in * filters;
            for (std::size_t c = 0; c < d_in; ++c) {
              const std::size_t krow = kbase + c * filters;
              const std::size_t orow = t * filters;
              if (px.requires_grad) {
                double acc = 0.0;
                for (std::size_t o = 0; o < filters; ++o) {
                  acc += node.grad[orow + o] * pk.values[krow + o];
                }
                px.add_grad(xbase + c, acc);
              }
              if (pk.requires_grad) {
                const double xval = px.values[xbase + c];
                for (std::size_t o = 0; o < filters; ++o) {
                  pk.add_grad(krow + o, node.grad[orow + o] * xval);
                }
              }
            }
          }
        }
      });
}

Tensor constant(Shape shape, std::vector<double> values) {
  Tensor t = Tensor::from_values(std::move(shape), std::move(values), false);
  t.node()->op = "constant";
  return t;
}

Tensor apply_primitive(const std::string& op_tag,
                       const std::vector<Tensor>& inputs,
                       const OpAttrs& attrs) {
  auto need = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw std::invalid_argument(op_tag + ": expected " + std::to_string(n) +
                                  " inputs, got " +
                                  std::to_string(inputs.size()));
    }
  };
  if (op_tag == "matmul") { need(2); return matmul(inputs[0], inputs[1]); }
  if (op_tag == "add") { need(2); return add(inputs[0], inputs[1]); }
  if (op_tag == "sub") { need(2); return sub(inputs[0], inputs[1]); }
  if (op_tag == "mul") { need(2); return mul(inputs[0], inputs[1]); }
  if (op_tag == "div") { need(2); return div(inputs[0], inputs[1]); }
  if (op_tag == "concat") { return concat(inputs, attrs.axis); }
  if (op_tag == "slice") {
    need(1);
    return slice(inputs[0], attrs.axis, attrs.start, attrs.length);
  }
  if (op_tag == "reshape") { need(1); return reshape(inputs[0], attrs.shape); }
  if (op_tag == "transpose") { need(1); return transpose(inputs[0]); }
  if (op_tag == "sum") { need(1); return sum(inputs[0]); }
  if (op_tag == "mean") { need(1); return mean(inputs[0]); }
  if (op_tag == "exp") { need(1); return exp(inputs[0]); }
  if (op_tag == "log") { need(1); return log(inputs[0]); }
  if (op_tag == "sigmoid") { need(1); return sigmoid(inputs[0]); }
  if (op_tag == "tanh") { need(1); return tanh(inputs[0]); }
  if (op_tag == "relu") { need(1); return relu(inputs[0]); }
  if (op_tag == "gelu") { need(1); return gelu(inputs[0]); }
  if (op_tag == "mish") { need(1); return mish(inputs[0]); }
  if (op_tag == "softmax") { need(1); return softmax(inputs[0]); }
  if (op_tag == "sqrt") { need(1); return sqrt(inputs[0]); }
  if (op_tag == "clamp") {
    need(1);
    return clamp(inputs[0], attrs.min_value, attrs.max_value);
  }
  if (op_tag == "l2_normalize") { need(1); return l2_normalize(inputs[0]); }
  if (op_tag == "cosine_similarity") {
    need(2);
    return cosine_similarity(inputs[0], inputs[1]);
  }
  if (op_tag == "conv1d") { need(2); return conv1d(inputs[0], inputs[1]); }
  if (op_tag == "constant") {
    need(0);
    return constant(attrs.shape, attrs.values);
  }
  throw std::invalid_argument("apply_primitive: unknown op tag '" + op_tag +
                              "'");
}

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& x, double eps) {
  if (eps <= 0.0) {
    throw std::invalid_argument("finite_diff_check: eps must be positive");
  }
  Tensor probe = Tensor::from_values(x.shape(), x.values(), true);
  Tensor loss = f(probe);
  if (loss.numel() != 1) {
    throw std::invalid_argument("finite_diff_check: f must return a scalar");
  }
  backward(loss);
  std::vector<double> analytic(x.numel(), 0.0);
  if (probe.has_grad()) {
    analytic = probe.grad();
  }

  NoGradGuard no_grad;
  std::vector<double> base = x.values();
  double worst = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    std::vector<double> hi = base;
    std::vector<double> lo = base;
    hi[i] += eps;
    lo[i] -= eps;
    const double fp = f(Tensor::from_values(x.shape(), std::move(hi))).value();
    const double fm = f(Tensor::from_values(x.shape(), std::move(lo))).value();
    const double central = (fp - fm) / (2.0 * eps);
    const double rel =
        std::abs(analytic[i] - central) / (std::abs(central) + 1e-12);
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace sermoe
