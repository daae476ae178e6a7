#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace sermoe {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// One node of the per-batch computation graph. Graphs are define-by-run:
// every forward pass appends fresh nodes and the whole structure is dropped
// once the gradients have been read back. A graph and its nodes belong to a
// single thread; distinct graphs may live on distinct threads.
struct TensorNode {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;  // allocated lazily during backward
  std::uint64_t node_id = 0;
  std::string op;  // primitive tag, empty for leaves
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;  // scatters grad into parents

  bool has_grad() const { return !grad.empty(); }
  void ensure_grad();
  void add_grad(std::size_t index, double g);
};

// Value-semantics handle onto a graph node. Copying a Tensor aliases the
// node; parameter tensors stay alive across batches while op outputs die
// with their graph.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_values(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t numel() const;
  std::size_t rank() const;
  bool requires_grad() const;
  std::uint64_t node_id() const;
  const std::string& op() const;

  const std::vector<double>& values() const;
  // In-place mutation is reserved for leaves (optimizer updates). Mutating
  // an op output would desynchronize it from its recorded parents.
  std::vector<double>& mutable_values();
  double value() const;  // single-element tensors
  double at(std::size_t i) const;
  double at(std::size_t row, std::size_t col) const;

  bool has_grad() const;
  const std::vector<double>& grad() const;
  void zero_grad();

  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<TensorNode> node_;

  friend Tensor make_op_tensor(std::string op, Shape shape,
                               std::vector<double> values,
                               std::vector<Tensor> parents,
                               std::function<void(TensorNode&)> backprop);
};

// Builds an op node, recording parents/backprop only when some parent needs
// gradients and grad mode is on. Modules outside tensor-core may use this to
// register fused ops with hand-written backward rules.
Tensor make_op_tensor(std::string op, Shape shape, std::vector<double> values,
                      std::vector<Tensor> parents,
                      std::function<void(TensorNode&)> backprop);

// Thread-local switch: while disabled, ops compute values but record no
// graph. Evaluation passes run under NoGradGuard.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool enabled);
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// ---------------------------------------------------------------------------
// Primitives. Shape rules:
//   - binary elementwise (add/sub/mul/div): equal shapes, either side a
//     single-element scalar, or [r x c] against a length-c vector (row
//     broadcast). Gradients are reduced over broadcast positions.
//   - matmul contracts the last axis of `a` with the first axis of `b` for
//     ranks 1 and 2: [n x k]*[k x m] -> [n x m], [k]*[k x m] -> [m],
//     [n x k]*[k] -> [n], [k]*[k] -> scalar.
//   - conv1d: x [L x d_in], kernel [w x d_in x f] with odd w; zero padded so
//     the output keeps length L.
//   - softmax / l2_normalize act along the last axis, row by row.
//   - sum / mean reduce the whole tensor to a scalar.
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start,
             std::size_t length);
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh approximation
Tensor mish(const Tensor& x);  // x * tanh(softplus(x))
Tensor softmax(const Tensor& x);
Tensor sqrt(const Tensor& x);
// Subgradient convention: boundary points (x == lo or x == hi) pass gradient
// through; strictly outside the band the gradient is zero.
Tensor clamp(const Tensor& x, double lo, double hi);
// Rows with norm < 1e-12 are returned as-is (the zero vector maps to the
// zero vector) and receive zero gradient.
Tensor l2_normalize(const Tensor& x);
// 1-D inputs of equal length; defined as 0 (with zero gradient) when either
// norm is < 1e-12.
Tensor cosine_similarity(const Tensor& a, const Tensor& b);
Tensor conv1d(const Tensor& x, const Tensor& kernel);
// Stochastic draws enter the graph through here: a leaf that never takes
// gradients, so the reparameterized noise is treated as a constant.
Tensor constant(Shape shape, std::vector<double> values);

struct OpAttrs {
  std::size_t axis = 0;
  std::size_t start = 0;
  std::size_t length = 0;
  double min_value = 0.0;
  double max_value = 0.0;
  Shape shape;  // reshape target / constant shape
  std::vector<double> values;  // constant payload
};

// String-dispatched entry over the primitive set above. Unknown tags and
// arity mismatches throw.
Tensor apply_primitive(const std::string& op_tag,
                       const std::vector<Tensor>& inputs,
                       const OpAttrs& attrs = {});

// Reverse pass from a scalar loss: seeds d(loss)/d(loss) = 1 and walks the
// recorded nodes in reverse topological order. Every reachable leaf with
// requires_grad accumulates its gradient buffer.
void backward(const Tensor& loss);

// Max over coordinates of |analytic - central| / (|central| + 1e-12), with
// central differences of step eps. `f` must map x to a scalar and be
// deterministic.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& x, double eps);

}  // namespace sermoe
