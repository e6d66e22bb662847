#include "trajflow/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace trajflow {

RowMatrix standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  RowMatrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

std::size_t ParamStore::add(std::string name, Shape shape, Eigen::VectorXd init) {
  if (shape_size(shape) != static_cast<std::size_t>(init.size()))
    throw std::invalid_argument("param " + name + ": init size mismatch");
  for (const auto& n : names_)
    if (n == name) throw std::invalid_argument("param " + name + ": duplicate name");
  names_.push_back(std::move(name));
  shapes_.push_back(std::move(shape));
  values_.push_back(std::move(init));
  return names_.size() - 1;
}

std::size_t ParamStore::find(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return i;
  throw std::out_of_range("no parameter named " + name);
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

Binder::Binder(const ParamStore& store, bool track)
    : store_(store), track_(track), bound_(store.size()) {}

Tensor Binder::operator()(std::size_t index) {
  Tensor& t = bound_.at(index);
  if (!t.defined()) {
    t = track_ ? Tensor::variable(store_.shape(index), store_.value(index))
               : Tensor::constant(store_.shape(index), store_.value(index));
  }
  return t;
}

std::vector<Eigen::VectorXd> Binder::gradients(const Tensor& loss) {
  if (!track_) throw std::logic_error("binder: gradients requested without tracking");
  std::vector<Tensor> leaves;
  std::vector<std::size_t> which;
  for (std::size_t i = 0; i < bound_.size(); ++i)
    if (bound_[i].defined()) {
      leaves.push_back(bound_[i]);
      which.push_back(i);
    }
  auto g = grad(loss, leaves);
  std::vector<Eigen::VectorXd> out(store_.size());
  for (std::size_t i = 0; i < store_.size(); ++i)
    out[i] = Eigen::VectorXd::Zero(store_.value(i).size());
  for (std::size_t k = 0; k < which.size(); ++k) out[which[k]] = g[k].vector();
  return out;
}

Linear Linear::make(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                    Rng& rng, bool zero_init) {
  Linear l;
  l.in = in;
  l.out = out;
  Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(in * out));
  if (!zero_init) {
    const double s = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(in, 1)));
    RowMatrix r = standard_normal(static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(out), rng);
    w = Eigen::Map<Eigen::VectorXd>(r.data(), r.size()) * s;
  }
  l.weight = store.add(name + ".weight", {in, out}, std::move(w));
  l.bias = store.add(name + ".bias", {out}, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(out)));
  return l;
}

Tensor Linear::operator()(Binder& p, const Tensor& x) const {
  return add(matmul(x, p(weight)), p(bias));
}

Tensor MaskedLinear::operator()(Binder& p, const Tensor& x) const {
  Tensor w = mul(p(linear.weight), Tensor::from_matrix(mask));
  return add(matmul(x, w), p(linear.bias));
}

RowMatrix sinusoidal_embedding(const Eigen::VectorXd& values, std::size_t width, double scale) {
  const auto half = static_cast<Eigen::Index>(width / 2);
  RowMatrix e(values.size(), static_cast<Eigen::Index>(width));
  e.setZero();
  for (Eigen::Index k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
    for (Eigen::Index i = 0; i < values.size(); ++i) {
      const double a = scale * values[i] * freq;
      e(i, k) = std::sin(a);
      e(i, half + k) = std::cos(a);
    }
  }
  return e;
}

ConditionedMlp ConditionedMlp::make(ParamStore& store, const std::string& name, std::size_t in,
                                    std::size_t width, std::size_t layers, std::size_t out, Rng& rng,
                                    bool zero_head) {
  if (layers < 1) throw std::invalid_argument(name + ": needs at least one hidden layer");
  ConditionedMlp m;
  m.input = Linear::make(store, name + ".in", in, width, rng);
  for (std::size_t i = 1; i < layers; ++i)
    m.hidden.push_back(Linear::make(store, name + ".h" + std::to_string(i), width, width, rng));
  m.head = Linear::make(store, name + ".head", width, out, rng, zero_head);
  return m;
}

ConditionedMlp::Output ConditionedMlp::operator()(Binder& p, const Tensor& x, const Tensor& cond) const {
  Tensor h = input(p, x);
  if (cond.defined()) h = add(h, cond);
  h = gelu(h);
  for (const auto& l : hidden) h = gelu(l(p, h));
  return {head(p, h), h};
}

Condition Condition::none(std::size_t rows) {
  Condition c;
  c.labels.assign(rows, -1);
  return c;
}

Condition Condition::from_labels(std::vector<int> labels) {
  Condition c;
  c.labels = std::move(labels);
  return c;
}

std::size_t Condition::rows() const {
  if (!labels.empty()) return labels.size();
  if (vectors.rows() > 0) return static_cast<std::size_t>(vectors.rows());
  return null_rows.size();
}

bool Condition::is_null(std::size_t row) const {
  if (row < null_rows.size() && null_rows[row]) return true;
  return !labels.empty() && labels[row] < 0;
}

Condition Condition::select(const std::vector<std::size_t>& rows) const {
  Condition out;
  for (auto r : rows) {
    if (!labels.empty()) out.labels.push_back(labels.at(r));
    if (!null_rows.empty()) out.null_rows.push_back(null_rows.at(r));
  }
  if (vectors.rows() > 0) {
    out.vectors.resize(static_cast<Eigen::Index>(rows.size()), vectors.cols());
    for (std::size_t i = 0; i < rows.size(); ++i)
      out.vectors.row(static_cast<Eigen::Index>(i)) = vectors.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

Condition Condition::nulled() const {
  Condition out = *this;
  out.null_rows.assign(rows(), 1);
  for (auto& l : out.labels) l = -1;
  return out;
}

ConditionEmbedding ConditionEmbedding::make(ParamStore& store, const std::string& name,
                                            ConditionSpec spec, std::size_t width, Rng& rng) {
  ConditionEmbedding e;
  e.spec = spec;
  e.width = width;
  const auto w = static_cast<Eigen::Index>(width);
  switch (spec.kind) {
    case ConditionKind::none:
      break;
    case ConditionKind::label: {
      RowMatrix t = standard_normal(static_cast<Eigen::Index>(spec.classes + 1), w, rng) * 0.1;
      e.table = store.add(name + ".table", {spec.classes + 1, width},
                          Eigen::Map<Eigen::VectorXd>(t.data(), t.size()));
      break;
    }
    case ConditionKind::vector: {
      e.project = Linear::make(store, name + ".project", spec.dim, width, rng);
      RowMatrix t = standard_normal(1, w, rng) * 0.1;
      e.null_vec = store.add(name + ".null", {width}, Eigen::Map<Eigen::VectorXd>(t.data(), t.size()));
      break;
    }
  }
  return e;
}

Tensor ConditionEmbedding::operator()(Binder& p, const Condition& c) const {
  const std::size_t rows = c.rows();
  switch (spec.kind) {
    case ConditionKind::none:
      return {};
    case ConditionKind::label: {
      std::vector<std::size_t> idx(rows);
      for (std::size_t i = 0; i < rows; ++i) {
        const int l = c.labels.empty() ? -1 : c.labels[i];
        if (l >= static_cast<int>(spec.classes))
          throw std::invalid_argument("condition label out of range");
        idx[i] = c.is_null(i) ? spec.classes : static_cast<std::size_t>(l);
      }
      return gather_rows(p(table), idx);
    }
    case ConditionKind::vector: {
      if (static_cast<std::size_t>(c.vectors.cols()) != spec.dim)
        throw std::invalid_argument("condition vector width mismatch");
      Tensor proj = project(p, Tensor::from_matrix(c.vectors));
      // Rows flagged null take the learned null vector instead.
      RowMatrix keep(static_cast<Eigen::Index>(rows), 1);
      for (std::size_t i = 0; i < rows; ++i) keep(static_cast<Eigen::Index>(i), 0) = c.is_null(i) ? 0.0 : 1.0;
      Tensor k = Tensor::from_matrix(keep);
      Tensor drop = Tensor::from_matrix((1.0 - keep.array()).matrix());
      return add(mul(proj, k), mul(broadcast_to(p(null_vec), proj.shape()), drop));
    }
  }
  return {};
}

}  // namespace trajflow
