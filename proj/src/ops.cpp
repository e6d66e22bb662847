#include "trajflow/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <type_traits>

namespace trajflow {

using Vec = Eigen::VectorXd;
using detail::Node;

namespace {

enum class Pattern { same, suffix, trailing };

// How `small` maps onto `big`.
struct Broadcast {
  Pattern pattern = Pattern::same;
  std::size_t inner = 1;  // suffix: small size; trailing: big's last extent
};

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

bool is_trailing_scalar(const Shape& small, const Shape& big) {
  if (small.size() != big.size() || big.empty() || small.back() != 1) return false;
  return std::equal(small.begin(), small.end() - 1, big.begin());
}

// Resolves the result shape and the broadcast of each operand.
Shape resolve(const Tensor& a, const Tensor& b, Broadcast& ba, Broadcast& bb, const char* op) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa == sb) return sa;
  auto classify = [&](const Tensor& small, const Tensor& big, Broadcast& out) {
    if (small.size() == 1 || is_suffix(small.shape(), big.shape())) {
      out = {Pattern::suffix, small.size()};
      return true;
    }
    if (is_trailing_scalar(small.shape(), big.shape())) {
      out = {Pattern::trailing, big.cols()};
      return true;
    }
    return false;
  };
  if (a.size() <= b.size() && classify(a, b, ba)) return sb;
  if (b.size() <= a.size() && classify(b, a, bb)) return sa;
  throw std::invalid_argument(std::string(op) + ": cannot broadcast " + shape_string(sa) +
                              " with " + shape_string(sb));
}

Vec expand(const Vec& v, const Broadcast& b, std::size_t n) {
  switch (b.pattern) {
    case Pattern::same:
      return v;
    case Pattern::suffix: {
      Vec out(static_cast<Eigen::Index>(n));
      const auto m = static_cast<Eigen::Index>(b.inner);
      if (m == 0) return out;
      Eigen::Map<RowMatrix>(out.data(), out.size() / m, m).rowwise() = v.transpose();
      return out;
    }
    case Pattern::trailing: {
      Vec out(static_cast<Eigen::Index>(n));
      const auto c = static_cast<Eigen::Index>(b.inner);
      if (c == 0) return out;
      Eigen::Map<RowMatrix>(out.data(), out.size() / c, c).colwise() = v;
      return out;
    }
  }
  return v;
}

Vec reduce(Vec g, const Broadcast& b, std::size_t small_size) {
  switch (b.pattern) {
    case Pattern::same:
      return g;
    case Pattern::suffix: {
      const auto m = static_cast<Eigen::Index>(b.inner);
      if (m == 0) return Vec(0);
      Eigen::Map<const RowMatrix> gm(g.data(), g.size() / m, m);
      return gm.colwise().sum().transpose();
    }
    case Pattern::trailing: {
      const auto c = static_cast<Eigen::Index>(b.inner);
      if (c == 0) return Vec::Zero(static_cast<Eigen::Index>(small_size));
      Eigen::Map<const RowMatrix> gm(g.data(), g.size() / c, c);
      return gm.rowwise().sum();
    }
  }
  return g;
}

// Operand values laid out at the result shape; no copy when shapes agree.
const Vec& operand(const Tensor& t, const Broadcast& b, std::size_t n, Vec& storage) {
  if (b.pattern == Pattern::same) return t.vector();
  storage = expand(t.vector(), b, n);
  return storage;
}

// Gradient rules either take (g) alone or (g, a, b) at the result shape.
template <class Grad>
Vec apply_grad(const Grad& grad, const Vec& g, const Tensor& a, const Broadcast& ba, const Tensor& b,
               const Broadcast& bb, std::size_t n) {
  if constexpr (std::is_invocable_v<Grad, const Vec&>) {
    return grad(g);
  } else {
    Vec as, bs;
    return grad(g, operand(a, ba, n, as), operand(b, bb, n, bs));
  }
}

template <class Forward, class GradA, class GradB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, Forward fwd, GradA grad_a,
              GradB grad_b) {
  Broadcast ba, bb;
  Shape shape = resolve(a, b, ba, bb, name);
  const std::size_t n = shape_size(shape);
  Vec as, bs;
  Vec out = fwd(operand(a, ba, n, as), operand(b, bb, n, bs));
  return make_result(std::move(shape), std::move(out), {&a, &b},
                     [a, b, ba, bb, n, grad_a, grad_b](Node& self) {
                       if (a.requires_grad())
                         a.node()->accumulate_move(reduce(apply_grad(grad_a, self.grad, a, ba, b, bb, n), ba, a.size()));
                       if (b.requires_grad())
                         b.node()->accumulate_move(reduce(apply_grad(grad_b, self.grad, a, ba, b, bb, n), bb, b.size()));
                     });
}

// The derivative rule sees (g, x, y) with y the op's own output.
template <class Forward, class Derivative>
Tensor unary(const Tensor& a, Forward fwd, Derivative deriv) {
  return make_result(a.shape(), fwd(a.vector()), {&a}, [a, deriv](Node& self) {
    a.node()->accumulate_move(deriv(self.grad, a.vector(), self.value));
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "add", [](const Vec& x, const Vec& y) -> Vec { return x + y; },
      [](const Vec& g) -> Vec { return g; }, [](const Vec& g) -> Vec { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "sub", [](const Vec& x, const Vec& y) -> Vec { return x - y; },
      [](const Vec& g) -> Vec { return g; }, [](const Vec& g) -> Vec { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "mul", [](const Vec& x, const Vec& y) -> Vec { return x.cwiseProduct(y); },
      [](const Vec& g, const Vec&, const Vec& y) -> Vec { return g.cwiseProduct(y); },
      [](const Vec& g, const Vec& x, const Vec&) -> Vec { return g.cwiseProduct(x); });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      a, b, "div", [](const Vec& x, const Vec& y) -> Vec { return x.cwiseQuotient(y); },
      [](const Vec& g, const Vec&, const Vec& y) -> Vec { return g.cwiseQuotient(y); },
      [](const Vec& g, const Vec& x, const Vec& y) -> Vec {
        return -(g.array() * x.array() / (y.array() * y.array())).matrix();
      });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double k) {
  return make_result(a.shape(), a.vector() * k, {&a},
                     [a, k](Node& self) { a.node()->accumulate(self.grad * k); });
}

Tensor add_scalar(const Tensor& a, double k) {
  return make_result(a.shape(), (a.vector().array() + k).matrix(), {&a},
                     [a](Node& self) { a.node()->accumulate(self.grad); });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, [](const Vec& x) -> Vec { return x.array().exp().matrix(); },
      [](const Vec& g, const Vec&, const Vec& y) -> Vec { return g.cwiseProduct(y); });
}

Tensor log(const Tensor& a) {
  return unary(
      a, [](const Vec& x) -> Vec { return x.array().log().matrix(); },
      [](const Vec& g, const Vec& x, const Vec&) -> Vec { return g.cwiseQuotient(x); });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, [](const Vec& x) -> Vec { return x.array().tanh().matrix(); },
      [](const Vec& g, const Vec&, const Vec& y) -> Vec {
        return (g.array() * (1.0 - y.array().square())).matrix();
      });
}

// Tanh form of GELU, written as x * sigmoid(k (x + c x^3)) so it vectorizes.
Tensor gelu(const Tensor& a) {
  static constexpr double k = 1.5957691216057307;  // 2 sqrt(2 / pi)
  static constexpr double c = 0.044715;
  auto gate = [](const Vec& x) {
    Eigen::ArrayXd z = k * (x.array() + c * x.array().cube());
    return Eigen::ArrayXd(1.0 / (1.0 + (-z).exp()));
  };
  return unary(
      a, [gate](const Vec& x) -> Vec { return (x.array() * gate(x)).matrix(); },
      [gate](const Vec& g, const Vec& x, const Vec&) -> Vec {
        Eigen::ArrayXd s = gate(x), xa = x.array();
        return (g.array() * (s + xa * s * (1.0 - s) * k * (1.0 + 3.0 * c * xa.square()))).matrix();
      });
}

Tensor square(const Tensor& a) {
  return unary(
      a, [](const Vec& x) -> Vec { return x.array().square().matrix(); },
      [](const Vec& g, const Vec& x, const Vec&) -> Vec { return 2.0 * g.cwiseProduct(x); });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary(
      a, [lo, hi](const Vec& x) -> Vec { return x.cwiseMax(lo).cwiseMin(hi); },
      [lo, hi](const Vec& g, const Vec& x, const Vec&) -> Vec {
        return (x.array() >= lo && x.array() <= hi).select(g, 0.0);
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.extent(1) != b.extent(0))
    throw std::invalid_argument("matmul: incompatible shapes " + shape_string(a.shape()) + " x " +
                                shape_string(b.shape()));
  const auto m = static_cast<Eigen::Index>(a.extent(0));
  const auto n = static_cast<Eigen::Index>(b.extent(1));
  Vec out(m * n);
  Eigen::Map<RowMatrix>(out.data(), m, n).noalias() = a.matrix() * b.matrix();
  return make_result({a.extent(0), b.extent(1)}, std::move(out), {&a, &b}, [a, b](Node& self) {
    Eigen::Map<const RowMatrix> g(self.grad.data(), static_cast<Eigen::Index>(a.extent(0)),
                                  static_cast<Eigen::Index>(b.extent(1)));
    if (a.requires_grad()) {
      Vec ga(static_cast<Eigen::Index>(a.size()));
      Eigen::Map<RowMatrix>(ga.data(), a.matrix().rows(), a.matrix().cols()).noalias() =
          g * b.matrix().transpose();
      a.node()->accumulate_move(std::move(ga));
    }
    if (b.requires_grad()) {
      Vec gb(static_cast<Eigen::Index>(b.size()));
      Eigen::Map<RowMatrix>(gb.data(), b.matrix().rows(), b.matrix().cols()).noalias() =
          a.matrix().transpose() * g;
      b.node()->accumulate_move(std::move(gb));
    }
  });
}

Tensor batch_matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() != 3 || b.dim() != 3 || a.extent(0) != b.extent(0) || a.extent(2) != b.extent(1))
    throw std::invalid_argument("batch_matmul: incompatible shapes " + shape_string(a.shape()) +
                                " x " + shape_string(b.shape()));
  const auto batch = static_cast<Eigen::Index>(a.extent(0));
  const auto m = static_cast<Eigen::Index>(a.extent(1));
  const auto k = static_cast<Eigen::Index>(a.extent(2));
  const auto n = static_cast<Eigen::Index>(b.extent(2));
  Vec out(batch * m * n);
  for (Eigen::Index i = 0; i < batch; ++i) {
    Eigen::Map<const RowMatrix> am(a.vector().data() + i * m * k, m, k);
    Eigen::Map<const RowMatrix> bm(b.vector().data() + i * k * n, k, n);
    Eigen::Map<RowMatrix>(out.data() + i * m * n, m, n).noalias() = am * bm;
  }
  return make_result(
      {a.extent(0), a.extent(1), b.extent(2)}, std::move(out), {&a, &b},
      [a, b, batch, m, k, n](Node& self) {
        Vec ga = a.requires_grad() ? Vec(batch * m * k) : Vec();
        Vec gb = b.requires_grad() ? Vec(batch * k * n) : Vec();
        for (Eigen::Index i = 0; i < batch; ++i) {
          Eigen::Map<const RowMatrix> g(self.grad.data() + i * m * n, m, n);
          Eigen::Map<const RowMatrix> am(a.vector().data() + i * m * k, m, k);
          Eigen::Map<const RowMatrix> bm(b.vector().data() + i * k * n, k, n);
          if (ga.size()) Eigen::Map<RowMatrix>(ga.data() + i * m * k, m, k).noalias() = g * bm.transpose();
          if (gb.size()) Eigen::Map<RowMatrix>(gb.data() + i * k * n, k, n).noalias() = am.transpose() * g;
        }
        if (ga.size()) a.node()->accumulate(ga);
        if (gb.size()) b.node()->accumulate(gb);
      });
}

Tensor transpose_last(const Tensor& a) {
  if (a.dim() < 2) throw std::invalid_argument("transpose_last: needs at least 2 axes");
  Shape shape = a.shape();
  const auto r = static_cast<Eigen::Index>(shape[shape.size() - 2]);
  const auto c = static_cast<Eigen::Index>(shape.back());
  std::swap(shape[shape.size() - 2], shape.back());
  const Eigen::Index batch = static_cast<Eigen::Index>(a.size()) / std::max<Eigen::Index>(r * c, 1);
  auto flip = [batch](const Vec& v, Eigen::Index rows, Eigen::Index cols) {
    Vec out(v.size());
    for (Eigen::Index i = 0; i < batch; ++i)
      Eigen::Map<RowMatrix>(out.data() + i * rows * cols, cols, rows) =
          Eigen::Map<const RowMatrix>(v.data() + i * rows * cols, rows, cols).transpose();
    return out;
  };
  return make_result(std::move(shape), flip(a.vector(), r, c), {&a},
                     [a, r, c, flip](Node& self) { a.node()->accumulate(flip(self.grad, c, r)); });
}

Tensor sum(const Tensor& a) {
  Vec out = Vec::Constant(1, a.vector().sum());
  return make_result({}, std::move(out), {&a}, [a](Node& self) {
    a.node()->accumulate(Vec::Constant(static_cast<Eigen::Index>(a.size()), self.grad[0]));
  });
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Tensor sum_last(const Tensor& a) {
  Shape shape = a.shape();
  if (!shape.empty()) shape.pop_back();
  Vec out = a.matrix().rowwise().sum();
  return make_result(std::move(shape), std::move(out), {&a}, [a](Node& self) {
    Vec g(static_cast<Eigen::Index>(a.size()));
    Eigen::Map<RowMatrix>(g.data(), static_cast<Eigen::Index>(a.rows()),
                          static_cast<Eigen::Index>(a.cols()))
        .colwise() = self.grad;
    a.node()->accumulate(g);
  });
}

Tensor sum_rows(const Tensor& a) {
  if (a.dim() != 2) throw std::invalid_argument("sum_rows: expects a 2D tensor");
  Vec out = a.matrix().colwise().sum().transpose();
  return make_result({a.extent(1)}, std::move(out), {&a}, [a](Node& self) {
    Vec g(static_cast<Eigen::Index>(a.size()));
    Eigen::Map<RowMatrix>(g.data(), static_cast<Eigen::Index>(a.rows()),
                          static_cast<Eigen::Index>(a.cols()))
        .rowwise() = self.grad.transpose();
    a.node()->accumulate(g);
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_size(shape) != a.size())
    throw std::invalid_argument("reshape: " + shape_string(a.shape()) + " -> " +
                                shape_string(shape));
  return make_result(std::move(shape), a.vector(), {&a},
                     [a](Node& self) { a.node()->accumulate(self.grad); });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.cols())
    throw std::invalid_argument("slice_cols: range exceeds " + shape_string(a.shape()));
  Shape shape = a.shape();
  if (shape.empty()) shape.push_back(1);
  shape.back() = count;
  const auto r = static_cast<Eigen::Index>(a.rows());
  const auto b0 = static_cast<Eigen::Index>(begin);
  const auto nc = static_cast<Eigen::Index>(count);
  Vec out(r * nc);
  Eigen::Map<RowMatrix>(out.data(), r, nc) = a.matrix().middleCols(b0, nc);
  return make_result(std::move(shape), std::move(out), {&a}, [a, r, b0, nc](Node& self) {
    Vec g = Vec::Zero(static_cast<Eigen::Index>(a.size()));
    Eigen::Map<RowMatrix>(g.data(), r, static_cast<Eigen::Index>(a.cols())).middleCols(b0, nc) =
        Eigen::Map<const RowMatrix>(self.grad.data(), r, nc);
    a.node()->accumulate(g);
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t count) {
  if (a.dim() == 0 || begin + count > a.extent(0))
    throw std::invalid_argument("slice_rows: range exceeds " + shape_string(a.shape()));
  Shape shape = a.shape();
  const std::size_t stride = a.size() / shape[0];
  shape[0] = count;
  const auto off = static_cast<Eigen::Index>(begin * stride);
  const auto len = static_cast<Eigen::Index>(count * stride);
  return make_result(std::move(shape), a.vector().segment(off, len), {&a},
                     [a, off, len](Node& self) {
                       Vec g = Vec::Zero(static_cast<Eigen::Index>(a.size()));
                       g.segment(off, len) = self.grad;
                       a.node()->accumulate(g);
                     });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t r = parts[0].rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != r || p.dim() != parts[0].dim())
      throw std::invalid_argument("concat_cols: row mismatch");
    total += p.cols();
  }
  Shape shape = parts[0].shape();
  if (shape.empty()) shape.push_back(1);
  shape.back() = total;
  const auto rr = static_cast<Eigen::Index>(r);
  Vec out(rr * static_cast<Eigen::Index>(total));
  Eigen::Map<RowMatrix> om(out.data(), rr, static_cast<Eigen::Index>(total));
  Eigen::Index c0 = 0;
  for (const auto& p : parts) {
    om.middleCols(c0, static_cast<Eigen::Index>(p.cols())) = p.matrix();
    c0 += static_cast<Eigen::Index>(p.cols());
  }
  Tensor result = Tensor::constant(shape, out);
  bool any = std::any_of(parts.begin(), parts.end(), [](const Tensor& p) { return p.requires_grad(); });
  if (!any) return result;
  // make_result takes a fixed input list; record the fan-out node directly.
  Tape* tape = Tape::active();
  for (const auto& p : parts)
    if (p.requires_grad() && p.node()->tape != tape)
      throw std::logic_error("concat_cols: input belongs to a tape that is not active");
  result.node()->backward = [parts, rr, total](Node& self) {
    Eigen::Map<const RowMatrix> g(self.grad.data(), rr, static_cast<Eigen::Index>(total));
    Eigen::Index c = 0;
    for (const auto& p : parts) {
      const auto pc = static_cast<Eigen::Index>(p.cols());
      if (p.requires_grad()) {
        Vec gp(rr * pc);
        Eigen::Map<RowMatrix>(gp.data(), rr, pc) = g.middleCols(c, pc);
        p.node()->accumulate(gp);
      }
      c += pc;
    }
  };
  tape->record(result.handle());
  return result;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Shape shape = parts[0].shape();
  if (shape.empty()) throw std::invalid_argument("concat_rows: scalar input");
  std::size_t lead = 0, total = 0;
  for (const auto& p : parts) {
    if (p.dim() != shape.size() || !std::equal(shape.begin() + 1, shape.end(), p.shape().begin() + 1))
      throw std::invalid_argument("concat_rows: trailing shape mismatch");
    lead += p.extent(0);
    total += p.size();
  }
  shape[0] = lead;
  Vec out(static_cast<Eigen::Index>(total));
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.segment(off, static_cast<Eigen::Index>(p.size())) = p.vector();
    off += static_cast<Eigen::Index>(p.size());
  }
  Tensor result = Tensor::constant(shape, std::move(out));
  bool any = std::any_of(parts.begin(), parts.end(), [](const Tensor& p) { return p.requires_grad(); });
  if (!any) return result;
  Tape* tape = Tape::active();
  for (const auto& p : parts)
    if (p.requires_grad() && p.node()->tape != tape)
      throw std::logic_error("concat_rows: input belongs to a tape that is not active");
  result.node()->backward = [parts](Node& self) {
    Eigen::Index o = 0;
    for (const auto& p : parts) {
      const auto n = static_cast<Eigen::Index>(p.size());
      if (p.requires_grad()) p.node()->accumulate(self.grad.segment(o, n));
      o += n;
    }
  };
  tape->record(result.handle());
  return result;
}

Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& index) {
  const auto r = static_cast<Eigen::Index>(a.rows());
  const auto c = static_cast<Eigen::Index>(a.cols());
  const auto n = static_cast<Eigen::Index>(index.size());
  Vec out(n * c);
  Eigen::Map<RowMatrix> om(out.data(), n, c);
  auto am = a.matrix();
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto src = static_cast<Eigen::Index>(index[static_cast<std::size_t>(i)]);
    if (src >= r) throw std::invalid_argument("gather_rows: index out of range");
    om.row(i) = am.row(src);
  }
  return make_result({index.size(), a.cols()}, std::move(out), {&a}, [a, index, r, c](Node& self) {
    Vec g = Vec::Zero(r * c);
    Eigen::Map<RowMatrix> gm(g.data(), r, c);
    Eigen::Map<const RowMatrix> sg(self.grad.data(), static_cast<Eigen::Index>(index.size()), c);
    for (std::size_t i = 0; i < index.size(); ++i)
      gm.row(static_cast<Eigen::Index>(index[i])) += sg.row(static_cast<Eigen::Index>(i));
    a.node()->accumulate(g);
  });
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  Tensor zeros = Tensor::constant(shape, 0.0);
  Broadcast ba, bz;
  Shape out = resolve(a, zeros, ba, bz, "broadcast_to");
  if (out != shape)
    throw std::invalid_argument("broadcast_to: cannot expand " + shape_string(a.shape()) + " to " +
                                shape_string(shape));
  return add(a, zeros);
}

namespace {

Vec softmax_rows(const Vec& x, Eigen::Index r, Eigen::Index c, const RowMatrix* mask) {
  Vec out(x.size());
  Eigen::Map<const RowMatrix> xm(x.data(), r, c);
  Eigen::Map<RowMatrix> om(out.data(), r, c);
  for (Eigen::Index i = 0; i < r; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < c; ++j)
      if (!mask || (*mask)(i, j) != 0.0) mx = std::max(mx, xm(i, j));
    if (!std::isfinite(mx)) {
      om.row(i).setZero();
      continue;
    }
    double z = 0.0;
    for (Eigen::Index j = 0; j < c; ++j) {
      const double e = (!mask || (*mask)(i, j) != 0.0) ? std::exp(xm(i, j) - mx) : 0.0;
      om(i, j) = e;
      z += e;
    }
    om.row(i) /= z;
  }
  return out;
}

Tensor softmax_impl(const Tensor& a, const RowMatrix* mask) {
  const auto r = static_cast<Eigen::Index>(a.rows());
  const auto c = static_cast<Eigen::Index>(a.cols());
  Vec y = softmax_rows(a.vector(), r, c, mask);
  Vec saved = y;
  return make_result(a.shape(), std::move(y), {&a}, [a, saved, r, c](Node& self) {
    // dx = y * (g - <g, y>) per row; masked entries have y = 0.
    Eigen::Map<const RowMatrix> ym(saved.data(), r, c);
    Eigen::Map<const RowMatrix> gm(self.grad.data(), r, c);
    Vec g(r * c);
    Eigen::Map<RowMatrix> dm(g.data(), r, c);
    Eigen::VectorXd dot = ym.cwiseProduct(gm).rowwise().sum();
    dm = ym.cwiseProduct(gm - dot.replicate(1, c));
    a.node()->accumulate(g);
  });
}

}  // namespace

Tensor softmax(const Tensor& a) { return softmax_impl(a, nullptr); }

Tensor masked_softmax(const Tensor& a, const RowMatrix& mask) {
  if (static_cast<std::size_t>(mask.cols()) != a.cols())
    throw std::invalid_argument("masked_softmax: mask width mismatch");
  const auto r = static_cast<Eigen::Index>(a.rows());
  if (mask.rows() == r) return softmax_impl(a, &mask);
  if (r % mask.rows() != 0) throw std::invalid_argument("masked_softmax: mask rows mismatch");
  RowMatrix tiled = mask.replicate(r / mask.rows(), 1);
  return softmax_impl(a, &tiled);
}

}  // namespace trajflow
