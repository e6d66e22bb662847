#pragma once

// Timestep schedules, the Markov forward process x_t = alpha x_s + sigma eps,
// its Gaussian reverse posterior q(x_s | x_t, x_0), and the per-coordinate
// covariance of a trajectory given x_0.
//
// Closed forms are templated on the scalar type; the double instantiations
// are what the rest of the library uses.

#include "trajflow/nn.hpp"
#include "trajflow/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace trajflow {

/// Ascending times t_0 < t_1 < ... < t_T = 1.
class TimeSchedule {
 public:
  TimeSchedule() = default;
  /// Validates: at least two entries, strictly increasing, last == 1,
  /// first in [0, 1).
  explicit TimeSchedule(std::vector<double> times);

  const std::vector<double>& times() const { return times_; }
  std::size_t step_count() const { return times_.size() - 1; }
  std::size_t levels() const { return times_.size(); }
  double operator[](std::size_t k) const { return times_.at(k); }
  double t_min() const { return times_.front(); }
  /// Same interior and terminal entries with the first replaced.
  TimeSchedule with_t_min(double t_min) const;

  std::string to_string() const;
  static TimeSchedule parse(const std::string& line);

  bool operator==(const TimeSchedule&) const = default;

 private:
  std::vector<double> times_;
};

template <class Scalar>
struct ForwardCoeffs {
  Scalar alpha;
  Scalar sigma;
};

template <class Scalar>
struct PosteriorCoeffs {
  Scalar a;  // weight on x_t
  Scalar b;  // weight on x_0
  Scalar c;  // posterior standard deviation
};

/// alpha = (1 - t)/(1 - s), sigma = sqrt(t^2 - alpha^2 s^2) for 0 <= s < t <= 1.
template <class Scalar = double>
ForwardCoeffs<Scalar> forward_coeffs(Scalar s, Scalar t) {
  if (!(s >= Scalar(0)) || !(t <= Scalar(1)) || !(s < t))
    throw std::invalid_argument("forward_coeffs: need 0 <= s < t <= 1");
  const Scalar alpha = (Scalar(1) - t) / (Scalar(1) - s);
  // t^2 - alpha^2 s^2 = (t - s)(t + s - 2ts)/(1 - s)^2, which stays
  // nonnegative in floating point.
  const Scalar d = (t - s) * (t + s - Scalar(2) * t * s);
  using std::sqrt;
  return {alpha, sqrt(d) / (Scalar(1) - s)};
}

/// Coefficients of q(x_s | x_t, x_0) = N(a x_t + b x_0, c^2). At s = 0 the
/// posterior collapses onto x_0 (a = 0, b = 1, c = 0).
template <class Scalar = double>
PosteriorCoeffs<Scalar> posterior_coeffs(Scalar t, Scalar s) {
  if (!(t > Scalar(0)) || !(t <= Scalar(1)))
    throw std::invalid_argument("posterior_coeffs: need 0 < t <= 1");
  if (!(s >= Scalar(0)) || !(s < t))
    throw std::invalid_argument("posterior_coeffs: need 0 <= s < t");
  if (s == Scalar(0)) return {Scalar(0), Scalar(1), Scalar(0)};
  const Scalar one = Scalar(1);
  const Scalar d = (t - s) * (t + s - Scalar(2) * t * s);
  const Scalar t2 = t * t;
  const Scalar a = s * s * (one - t) / (t2 * (one - s));
  const Scalar b = d / (t2 * (one - s));
  using std::sqrt;
  const Scalar c = s * sqrt(d) / (t * (one - s));
  return {a, b, c};
}

/// Cov(x_{t_i}, x_{t_j} | x_0) per coordinate.
template <class Scalar = double>
Scalar trajectory_cov_entry(Scalar ti, Scalar tj) {
  using std::max;
  using std::min;
  const Scalar lo = min(ti, tj), hi = max(ti, tj);
  if (lo == hi) return lo * lo;  // diagonal limit, also covers t = 1
  return lo * lo * (Scalar(1) - hi) / (Scalar(1) - lo);
}

template <class Scalar = double>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> trajectory_covariance(
    const std::vector<Scalar>& times) {
  const auto n = static_cast<Eigen::Index>(times.size());
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> s(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      s(i, j) = trajectory_cov_entry(times[static_cast<std::size_t>(i)], times[static_cast<std::size_t>(j)]);
  return s;
}

inline Eigen::MatrixXd trajectory_covariance(const TimeSchedule& schedule) {
  return trajectory_covariance<double>(schedule.times());
}

/// Base grid (t_min, 1/T, 2/T, ..., 1).
TimeSchedule build_schedule(std::size_t step_count, double t_min);

/// Shift parameter mu = 0.5 + 0.65 (seq_len - 256)/(4096 - 256).
double shift_mu(std::size_t seq_len);
/// sigma -> e^mu / (e^mu + 1/sigma - 1); fixes 1 and maps (0, 1] into (0, 1].
double shift_time(double sigma, double mu);
/// Shifts every entry except t_min; t_T = 1 is preserved by the map.
TimeSchedule apply_shift(const TimeSchedule& schedule, std::size_t seq_len);

/// A noisy state: alpha x_s + sigma noise.
Tensor forward_transition(const Tensor& x_s, double s, double t, const Tensor& noise);

/// Trajectory states x_{t_0}, ..., x_{t_T}, each [batch, dim]. Row b of level
/// k sits at time times(b, k), so every batch element may carry its own
/// schedule (all with the same step count).
struct Trajectory {
  std::vector<RowMatrix> levels;
  Eigen::MatrixXd times;  // [batch, T + 1]

  std::size_t step_count() const { return levels.empty() ? 0 : levels.size() - 1; }
  std::size_t batch() const { return levels.empty() ? 0 : static_cast<std::size_t>(levels[0].rows()); }
  std::size_t dim() const { return levels.empty() ? 0 : static_cast<std::size_t>(levels[0].cols()); }
  /// Per-row schedule of element b.
  TimeSchedule schedule(std::size_t b) const;
};

/// Broadcasts one schedule over `batch` rows.
Eigen::MatrixXd schedule_rows(const TimeSchedule& schedule, std::size_t batch);

/// Runs the Markov chain from `anchor` (already at level t_0) through every
/// level of each row's schedule.
Trajectory sample_trajectory_from_anchor(const RowMatrix& anchor, const Eigen::MatrixXd& times,
                                         Rng& rng);

/// Builds a trajectory from clean data: the anchor is the marginal
/// (1 - t_0) x_0 + t_0 eps, then the Markov chain runs through the rest.
Trajectory sample_trajectory(const RowMatrix& x0, const Eigen::MatrixXd& times, Rng& rng);
Trajectory sample_trajectory(const RowMatrix& x0, const TimeSchedule& schedule, Rng& rng);

}  // namespace trajflow
