#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace talkrf {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Thrown when operand shapes are incompatible with an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// One vertex of the reverse-mode tape.
///
/// `grad` stays empty until something accumulates into it. The backward
/// closure reads `grad` of the node it belongs to and accumulates into the
/// parents; it never captures the owning node, so dropping the last handle to
/// a loss frees the whole graph.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer();
};

/// Handle to a differentiable n-dimensional array of 64-bit floats.
///
/// Copies share storage (like a reference-counted view); use `clone()` for an
/// independent copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  double item() const;
  double operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient accumulated by the last backward pass; zeros when untouched.
  std::vector<double> grad() const;
  void zero_grad() { node_->grad.clear(); }

  /// Detached deep copy of the values.
  Tensor clone() const;
  /// Same values, no graph history.
  Tensor detach() const;

  /// Reverse-mode pass from a scalar. Gradients accumulate into every
  /// ancestor that requires them.
  void backward() const;

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

/// Disables graph recording for its lifetime (inference, evaluation).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Builds the result of an operation. When recording is on and any parent
/// requires a gradient, the node keeps its parents and backward closure.
Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::vector<Tensor> parents, std::function<void(Node&)> backward);

}  // namespace talkrf
