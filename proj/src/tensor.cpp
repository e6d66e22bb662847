#include "trajflow/tensor.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <sstream>
#include <stdexcept>

namespace trajflow {

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

namespace {
thread_local Tape* g_active_tape = nullptr;
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

void detail::Node::accumulate(const Eigen::Ref<const Eigen::VectorXd>& g) {
  if (grad.size() == 0)
    grad = g;
  else
    grad += g;
}

void detail::Node::accumulate_move(Eigen::VectorXd&& g) {
  if (grad.size() == 0)
    grad = std::move(g);
  else
    grad += g;
}

Tensor Tensor::constant(Shape shape, Eigen::VectorXd values) {
  if (shape_size(shape) != static_cast<std::size_t>(values.size()))
    throw std::invalid_argument("tensor: shape " + shape_string(shape) + " does not match " +
                                std::to_string(values.size()) + " values");
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  return Tensor(std::move(n));
}

Tensor Tensor::constant(Shape shape, double fill) {
  const auto n = static_cast<Eigen::Index>(shape_size(shape));
  return constant(std::move(shape), Eigen::VectorXd::Constant(n, fill));
}

Tensor Tensor::scalar(double v) { return constant(Shape{}, Eigen::VectorXd::Constant(1, v)); }

Tensor Tensor::from_matrix(const Eigen::Ref<const RowMatrix>& m) {
  Eigen::VectorXd v(m.size());
  Eigen::Map<RowMatrix>(v.data(), m.rows(), m.cols()) = m;
  return constant({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                  std::move(v));
}

Tensor Tensor::variable(Shape shape, Eigen::VectorXd values) {
  Tape* tape = Tape::active();
  if (!tape) throw std::logic_error("tensor: variable() requires an active tape");
  Tensor t = constant(std::move(shape), std::move(values));
  tape->record(t.node_);
  return t;
}

const Shape& Tensor::shape() const {
  if (!node_) throw std::logic_error("tensor: undefined");
  return node_->shape;
}

std::size_t Tensor::size() const { return static_cast<std::size_t>(vector().size()); }

std::size_t Tensor::cols() const {
  const auto& s = shape();
  return s.empty() ? 1 : s.back();
}

std::size_t Tensor::rows() const {
  const auto c = cols();
  return c == 0 ? 0 : size() / c;
}

const Eigen::VectorXd& Tensor::vector() const {
  if (!node_) throw std::logic_error("tensor: undefined");
  return node_->value;
}

std::span<const double> Tensor::values() const {
  const auto& v = vector();
  return {v.data(), static_cast<std::size_t>(v.size())};
}

Eigen::Map<const RowMatrix> Tensor::matrix() const {
  const auto& v = vector();
  return {v.data(), static_cast<Eigen::Index>(rows()), static_cast<Eigen::Index>(cols())};
}

double Tensor::item() const {
  if (size() != 1)
    throw std::invalid_argument("tensor: item() on shape " + shape_string(shape()));
  return vector()[0];
}

bool Tensor::requires_grad() const { return node_ && node_->tracked(); }

Tensor Tensor::detach() const { return constant(shape(), vector()); }

Tensor make_result(Shape shape, Eigen::VectorXd value, std::initializer_list<const Tensor*> inputs,
                   std::function<void(detail::Node&)> backward) {
  Tensor out = Tensor::constant(std::move(shape), std::move(value));
  Tape* tape = nullptr;
  for (const Tensor* in : inputs) {
    if (!in->requires_grad()) continue;
    if (in->node()->tape != Tape::active())
      throw std::logic_error("tensor: input belongs to a tape that is not active");
    tape = in->node()->tape;
  }
  if (tape) {
    out.node_->backward = std::move(backward);
    tape->record(out.node_);
  }
  return out;
}

Tape::Tape() : previous_(g_active_tape) { g_active_tape = this; }

Tape::~Tape() {
  for (auto& n : nodes_) {
    n->tape = nullptr;
    n->backward = nullptr;
  }
  g_active_tape = previous_;
}

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::shared_ptr<detail::Node> node) {
  if (consumed_) throw std::logic_error("tape: recording after backward");
  node->tape = this;
  nodes_.push_back(std::move(node));
}

void Tape::backward(const Tensor& output) {
  if (consumed_) throw std::logic_error("tape: backward called twice on the same recording");
  if (output.size() != 1)
    throw std::invalid_argument("tape: backward needs a one-element output, got " +
                                shape_string(output.shape()));
  consumed_ = true;
  if (!output.requires_grad() || output.node()->tape != this) return;
  output.node()->grad = Eigen::VectorXd::Ones(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    detail::Node& n = **it;
    if (n.backward && n.grad.size() != 0) n.backward(n);
  }
}

std::vector<Tensor> grad(const Tensor& scalar_output, const std::vector<Tensor>& leaves) {
  if (scalar_output.size() != 1)
    throw std::invalid_argument("grad: output must have exactly one element, got " +
                                shape_string(scalar_output.shape()));
  Tape* tape = Tape::active();
  if (!tape) throw std::logic_error("grad: no active tape");
  tape->backward(scalar_output);
  std::vector<Tensor> out;
  out.reserve(leaves.size());
  for (const auto& leaf : leaves) {
    const auto* n = leaf.node();
    if (n && n->grad.size() == static_cast<Eigen::Index>(leaf.size()))
      out.push_back(Tensor::constant(leaf.shape(), n->grad));
    else
      out.push_back(Tensor::constant(leaf.shape(), 0.0));
  }
  return out;
}

}  // namespace trajflow
