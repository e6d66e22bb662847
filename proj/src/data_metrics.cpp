#include "trajflow/data_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace trajflow {

Condition Batch::condition() const {
  if (labels.empty()) return Condition::none(static_cast<std::size_t>(x.rows()));
  return Condition::from_labels(labels);
}

namespace {

constexpr std::size_t kReferenceDraw = 100000;
constexpr std::size_t kRings = 4;

double default_noise(const std::string& name) {
  if (name == "two_moons") return 0.04;
  if (name == "gauss_mixture_2d") return 0.5;
  if (name == "rings") return 0.08;
  return 0.0;
}

}  // namespace

Dataset make_dataset(const DatasetSpec& spec, Rng& rng) {
  Dataset d;
  d.spec_ = spec;
  if (d.spec_.noise < 0.0) d.spec_.noise = default_noise(spec.name);
  if (spec.name == "gauss1d") {
    if (!(spec.stddev > 0.0)) throw std::invalid_argument("gauss1d: stddev must be positive");
    d.dim_ = 1;
  } else if (spec.name == "gauss_mixture_2d") {
    if (spec.components < 1) throw std::invalid_argument("gauss_mixture_2d: needs at least one component");
    d.dim_ = 2;
    d.classes_ = spec.components;
  } else if (spec.name == "two_moons") {
    d.dim_ = 2;
    d.classes_ = 2;
  } else if (spec.name == "checkerboard") {
    d.dim_ = 2;
  } else if (spec.name == "rings") {
    d.dim_ = 2;
    d.classes_ = kRings;
  } else {
    throw std::invalid_argument("unknown dataset '" + spec.name + "'");
  }

  const auto dim = static_cast<Eigen::Index>(d.dim_);
  d.offset_ = Eigen::RowVectorXd::Zero(dim);
  d.scale_ = Eigen::RowVectorXd::Ones(dim);
  if (spec.standardize) {
    if (spec.name == "gauss1d") {
      d.offset_[0] = spec.mean;
      d.scale_[0] = spec.stddev;
    } else {
      RowMatrix ref = d.raw(kReferenceDraw, rng).x;
      d.offset_ = ref.colwise().mean();
      d.scale_ = ((ref.rowwise() - d.offset_).array().square().colwise().mean()).sqrt();
    }
  }
  return d;
}

Batch Dataset::raw(std::size_t n, Rng& rng) const {
  Batch b;
  const auto rows = static_cast<Eigen::Index>(n);
  b.x.resize(rows, static_cast<Eigen::Index>(dim_));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double pi = std::numbers::pi;
  const double noise = spec_.noise;
  if (spec_.name == "gauss1d") {
    for (Eigen::Index i = 0; i < rows; ++i) b.x(i, 0) = spec_.mean + spec_.stddev * normal(rng);
  } else if (spec_.name == "gauss_mixture_2d") {
    std::uniform_int_distribution<int> comp(0, static_cast<int>(spec_.components) - 1);
    for (Eigen::Index i = 0; i < rows; ++i) {
      const int k = comp(rng);
      const double a = 2.0 * pi * k / static_cast<double>(spec_.components);
      b.x(i, 0) = 4.0 * std::cos(a) + noise * normal(rng);
      b.x(i, 1) = 4.0 * std::sin(a) + noise * normal(rng);
      b.labels.push_back(k);
    }
  } else if (spec_.name == "two_moons") {
    std::bernoulli_distribution which(0.5);
    for (Eigen::Index i = 0; i < rows; ++i) {
      const int k = which(rng) ? 1 : 0;
      const double a = pi * unit(rng);
      const double x = k == 0 ? std::cos(a) : 1.0 - std::cos(a);
      const double y = k == 0 ? std::sin(a) : 0.5 - std::sin(a);
      b.x(i, 0) = x + noise * normal(rng);
      b.x(i, 1) = y + noise * normal(rng);
      b.labels.push_back(k);
    }
  } else if (spec_.name == "checkerboard") {
    std::bernoulli_distribution lower(0.5);
    for (Eigen::Index i = 0; i < rows; ++i) {
      const double x1 = 4.0 * unit(rng) - 2.0;
      const double x2 = unit(rng) - (lower(rng) ? 2.0 : 0.0);
      const double cell = std::fmod(std::floor(x1) + 4.0, 2.0);
      b.x(i, 0) = x1;
      b.x(i, 1) = x2 + cell;
    }
  } else if (spec_.name == "rings") {
    std::uniform_int_distribution<int> ring(0, static_cast<int>(kRings) - 1);
    for (Eigen::Index i = 0; i < rows; ++i) {
      const int k = ring(rng);
      const double a = 2.0 * pi * unit(rng);
      const double r = static_cast<double>(k + 1);
      b.x(i, 0) = r * std::cos(a) + noise * normal(rng);
      b.x(i, 1) = r * std::sin(a) + noise * normal(rng);
      b.labels.push_back(k);
    }
  }
  return b;
}

Batch Dataset::sample(std::size_t n, Rng& rng) const {
  Batch b = raw(n, rng);
  b.x = ((b.x.rowwise() - offset_).array().rowwise() / scale_.array()).matrix();
  return b;
}

std::optional<GaussianParams> Dataset::gaussian() const {
  if (spec_.name != "gauss1d") return std::nullopt;
  if (spec_.standardize) return GaussianParams{0.0, 1.0};
  return GaussianParams{spec_.mean, spec_.stddev * spec_.stddev};
}

double two_moons_arc_distance(double x, double y) {
  auto arc = [](double qx, double qy, bool upper, double ex0, double ex1, double ey) {
    if ((upper && qy >= 0.0) || (!upper && qy <= 0.0)) return std::abs(std::hypot(qx, qy) - 1.0);
    return std::min(std::hypot(qx - ex0, qy - ey), std::hypot(qx - ex1, qy - ey));
  };
  const double d0 = arc(x, y, true, -1.0, 1.0, 0.0);
  const double d1 = arc(x - 1.0, y - 0.5, false, -1.0, 1.0, 0.0);
  return std::min(d0, d1);
}

namespace {

double mean_pair_distance(const RowMatrix& a, const RowMatrix& b, bool same) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = same ? i + 1 : 0; j < b.rows(); ++j) total += (a.row(i) - b.row(j)).norm();
  if (same) return 2.0 * total / (static_cast<double>(a.rows()) * static_cast<double>(a.rows() - 1));
  return total / (static_cast<double>(a.rows()) * static_cast<double>(b.rows()));
}

}  // namespace

double energy_distance(const RowMatrix& a, const RowMatrix& b) {
  if (a.rows() < 2 || b.rows() < 2) throw std::invalid_argument("energy_distance: each set needs at least two points");
  if (a.cols() != b.cols()) throw std::invalid_argument("energy_distance: dimension mismatch");
  const double e = 2.0 * mean_pair_distance(a, b, false) - mean_pair_distance(a, a, true) - mean_pair_distance(b, b, true);
  return std::max(e, 0.0);
}

double mmd_rbf(const RowMatrix& a, const RowMatrix& b) {
  if (a.rows() < 2 || b.rows() < 2) throw std::invalid_argument("mmd_rbf: each set needs at least two points");
  if (a.cols() != b.cols()) throw std::invalid_argument("mmd_rbf: dimension mismatch");
  RowMatrix pooled(a.rows() + b.rows(), a.cols());
  pooled << a, b;
  // Median heuristic on at most 1000 pooled points.
  const Eigen::Index m = std::min<Eigen::Index>(pooled.rows(), 1000);
  const Eigen::Index stride = std::max<Eigen::Index>(pooled.rows() / m, 1);
  std::vector<double> d;
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = i + 1; j < m; ++j) d.push_back((pooled.row(i * stride) - pooled.row(j * stride)).norm());
  std::nth_element(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2), d.end());
  const double h = std::max(d[d.size() / 2], 1e-12);
  auto k = [h](const auto& x, const auto& y) { return std::exp(-(x - y).squaredNorm() / (2.0 * h * h)); };
  double kaa = 0.0, kbb = 0.0, kab = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.rows(); ++j)
      if (i != j) kaa += k(a.row(i), a.row(j));
  for (Eigen::Index i = 0; i < b.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j)
      if (i != j) kbb += k(b.row(i), b.row(j));
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) kab += k(a.row(i), b.row(j));
  const double na = static_cast<double>(a.rows()), nb = static_cast<double>(b.rows());
  return kaa / (na * (na - 1)) + kbb / (nb * (nb - 1)) - 2.0 * kab / (na * nb);
}

GaussianTrajectoryOracle::GaussianTrajectoryOracle(GaussianParams data, TimeSchedule schedule)
    : data_(data), schedule_(std::move(schedule)) {
  if (!(data.variance > 0.0)) throw std::invalid_argument("oracle: variance must be positive");
  const auto L = static_cast<Eigen::Index>(schedule_.levels());
  mean_.resize(L + 1);
  cov_.resize(L + 1, L + 1);
  mean_[0] = data.mean;
  cov_(0, 0) = data.variance;
  Eigen::MatrixXd S = trajectory_covariance(schedule_);
  for (Eigen::Index k = 0; k < L; ++k) {
    const double tk = schedule_[static_cast<std::size_t>(k)];
    mean_[k + 1] = (1.0 - tk) * data.mean;
    cov_(0, k + 1) = cov_(k + 1, 0) = (1.0 - tk) * data.variance;
    for (Eigen::Index l = 0; l < L; ++l) {
      const double tl = schedule_[static_cast<std::size_t>(l)];
      cov_(k + 1, l + 1) = (1.0 - tk) * (1.0 - tl) * data.variance + S(k, l);
    }
  }
  traj_llt_.compute(trajectory_cov());
  if (traj_llt_.info() != Eigen::Success) throw std::runtime_error("oracle: trajectory covariance is singular");
  x0_weights_ = traj_llt_.solve(Eigen::VectorXd(cov_.row(0).tail(L).transpose())).transpose();
}

namespace {

void check_times(const Trajectory& tr, const TimeSchedule& s) {
  if (static_cast<std::size_t>(tr.times.cols()) != s.levels())
    throw std::invalid_argument("oracle: trajectory does not match the schedule");
  for (Eigen::Index b = 0; b < tr.times.rows(); ++b)
    for (Eigen::Index k = 0; k < tr.times.cols(); ++k)
      if (tr.times(b, k) != s[static_cast<std::size_t>(k)])
        throw std::invalid_argument("oracle: trajectory does not match the schedule");
}

}  // namespace

RowMatrix GaussianTrajectoryOracle::conditional_mean(const Trajectory& tr) const {
  check_times(tr, schedule_);
  const Eigen::VectorXd mu = trajectory_mean();
  RowMatrix out = RowMatrix::Constant(static_cast<Eigen::Index>(tr.batch()), static_cast<Eigen::Index>(tr.dim()), data_.mean);
  for (std::size_t k = 0; k < tr.levels.size(); ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    out.array() += x0_weights_[kk] * (tr.levels[k].array() - mu[kk]);
  }
  return out;
}

Eigen::VectorXd GaussianTrajectoryOracle::nll(const Trajectory& tr) const {
  check_times(tr, schedule_);
  const Eigen::VectorXd mu = trajectory_mean();
  const auto L = mu.size();
  const double logdet = 2.0 * traj_llt_.matrixL().toDenseMatrix().diagonal().array().log().sum();
  const double per_coord_const = 0.5 * logdet + 0.5 * static_cast<double>(L) * std::log(2.0 * std::numbers::pi);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(tr.batch()));
  Eigen::VectorXd r(L);
  for (Eigen::Index b = 0; b < out.size(); ++b)
    for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(tr.dim()); ++j) {
      for (Eigen::Index k = 0; k < L; ++k) r[k] = tr.levels[static_cast<std::size_t>(k)](b, j) - mu[k];
      out[b] += 0.5 * r.dot(traj_llt_.solve(r)) + per_coord_const;
    }
  return out;
}

GaussianTrajectoryOracle gaussian_trajectory_oracle(const Dataset& data, const TimeSchedule& schedule) {
  auto g = data.gaussian();
  if (!g) throw std::invalid_argument("oracle: dataset '" + data.name() + "' is not Gaussian");
  return GaussianTrajectoryOracle(*g, schedule);
}

}  // namespace trajflow
