#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pldet/errors.hpp"

namespace pldet::ag {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Dense 64-bit tensor handle; a node in a reverse-mode graph. Value semantics
// on the handle, shared state underneath. Immutable after forward construction
// except for gradient accumulation; raw_data() is for leaf initialization and
// optimizer updates between steps.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const;
  int size() const;
  int ndim() const;
  bool requires_grad() const;

  std::span<const double> data() const;
  std::span<double> raw_data();
  double item() const;
  double at(int i) const;
  double at(int i, int j) const;

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> raw_grad();
  void zero_grad();

  Node* node() const { return node_.get(); }
  const NodePtr& node_ptr() const { return node_; }
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

 private:
  NodePtr node_;
};

struct Node {
  std::string kind;
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily, same length as data
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  // Reads this->grad, accumulates into parents' grad (additive).
  std::function<void(Node&)> backward_fn;

  int size() const { return static_cast<int>(data.size()); }
  void ensure_grad();
};

int numel(const std::vector<int>& shape);

// ---- forward ops ------------------------------------------------------
// Every op validates shapes, checks the output for NaN/Inf (NumericError),
// and records a graph edge when any input requires grad.

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// y = x W^T + b; x is [in] or [M, in], w is [out, in], b is [out] or undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = Tensor());
// x [Cin, H, W], w [Cout, Cin, kh, kw], b [Cout] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softmax(const Tensor& x, int axis);
// log with inputs clamped below at 1e-12 (zero gradient in the clamped region)
Tensor log(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// x / ||x||_2 over all elements; norms below 1e-12 fall back to ||x|| + 1e-12
// and bump l2_eps_hits().
Tensor l2_normalize(const Tensor& x);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int start, int len);
// Flattens each input tensor into one row of an [M, flat] matrix.
Tensor stack_rows(const std::vector<Tensor>& xs);
// Size-preserving shape change (copying view).
Tensor reshape(const Tensor& x, std::vector<int> new_shape);
// Row i of a 2-d tensor as a 1-d vector.
Tensor row(const Tensor& x, int i);

// Gradient wall: value-identical constant; gradient never flows through.
Tensor detach(const Tensor& x);

// Bilinear interpolation of map [C, H, W] at continuous (x, y); coordinates
// clamped to the border. Returns a C-vector, differentiable w.r.t. map values.
Tensor bilinear_sample(const Tensor& map, double x, double y);

// ---- composites (built from the ops above) ----------------------------
Tensor scale(const Tensor& x, double c);
Tensor neg(const Tensor& x);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor square(const Tensor& x);
// elementwise 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise
Tensor smooth_l1(const Tensor& d);

// Escape hatch for fused module-level ops (RoIAlign, noise masks).
Tensor make_op(std::string kind, std::vector<Tensor> inputs, std::vector<int> out_shape,
               std::vector<double> out_data, std::function<void(Node&)> backward_fn);

// Accumulates d root / d param into every reachable parameter's grad.
// root must be scalar; caller zeroes grads between steps.
void backward(const Tensor& root);

// ---- finite-difference checking ----------------------------------------
struct GradReport {
  std::vector<double> max_rel_err;  // per parameter
  double worst = 0.0;
  double epsilon = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

// Compares backward() gradients against central differences
// (f(p+eps) - f(p-eps)) / (2 eps) per coordinate. f must rebuild its graph
// from the given parameter tensors on every call and be deterministic.
GradReport grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                      double eps = 1e-5, double tol = 1e-4);

// thread-local count of l2_normalize epsilon fallbacks
long l2_eps_hits();
void reset_l2_eps_hits();

}  // namespace pldet::ag
