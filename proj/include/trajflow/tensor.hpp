#pragma once

// Dense float64 tensors with define-by-run reverse-mode differentiation.
//
// A Tensor is a shared handle to an immutable value. Tensors created through
// Tensor::variable() while a Tape is active are differentiable leaves; every
// primitive op whose inputs include a differentiable tensor records itself on
// the active tape. Tensors with no tape handle are plain constants and may be
// shared freely across threads. A tape is confined to the thread that made it.

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace trajflow {

using Shape = std::vector<std::size_t>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Keeps large tensor buffers on the heap instead of fresh mmap pages (glibc
/// only; a no-op elsewhere). Call once at program start.
void tune_allocator();

class Tape;

namespace detail {

struct Node {
  Shape shape;
  Eigen::VectorXd value;
  Eigen::VectorXd grad;  // allocated lazily during backward
  Tape* tape = nullptr;  // null for constants
  std::function<void(Node&)> backward;

  void accumulate(const Eigen::Ref<const Eigen::VectorXd>& g);
  void accumulate_move(Eigen::VectorXd&& g);
  bool tracked() const { return tape != nullptr; }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, Eigen::VectorXd values);
  static Tensor constant(Shape shape, double fill);
  static Tensor scalar(double v);
  /// Copies a matrix (any storage order) into a row-major [rows, cols] tensor.
  static Tensor from_matrix(const Eigen::Ref<const RowMatrix>& m);
  /// Differentiable leaf on the active tape. Throws std::logic_error when no
  /// tape is active.
  static Tensor variable(Shape shape, Eigen::VectorXd values);
  static Tensor variable_like(const Tensor& t) { return variable(t.shape(), t.vector()); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t extent(std::size_t axis) const { return shape().at(axis); }
  std::size_t size() const;
  /// Leading extents collapsed: [prod(shape[:-1]), shape[-1]].
  std::size_t rows() const;
  std::size_t cols() const;

  const Eigen::VectorXd& vector() const;
  std::span<const double> values() const;
  Eigen::Map<const RowMatrix> matrix() const;
  RowMatrix to_matrix() const { return matrix(); }
  double item() const;
  double operator[](std::size_t i) const { return vector()[static_cast<Eigen::Index>(i)]; }

  bool requires_grad() const;
  /// Same values, detached from any tape.
  Tensor detach() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& handle() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_result(Shape, Eigen::VectorXd, std::initializer_list<const Tensor*>,
                            std::function<void(detail::Node&)>);
};

/// Builds an op result. The backward closure is attached (and the node
/// recorded on the active tape) only when some input is tracked.
Tensor make_result(Shape shape, Eigen::VectorXd value, std::initializer_list<const Tensor*> inputs,
                   std::function<void(detail::Node&)> backward);

/// Ordered record of differentiable operations. Constructing a Tape makes it
/// the active tape for this thread until it is destroyed; tapes nest.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  void record(std::shared_ptr<detail::Node> node);
  std::size_t node_count() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Seeds d(output)/d(output) = 1 and runs every recorded backward closure
  /// in reverse recording order. May run once per tape.
  void backward(const Tensor& output);

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
  Tape* previous_ = nullptr;
  bool consumed_ = false;
};

/// Gradients of a one-element output with respect to each leaf. Leaves that
/// the output does not depend on receive zeros.
std::vector<Tensor> grad(const Tensor& scalar_output, const std::vector<Tensor>& leaves);

}  // namespace trajflow
