#pragma once

// Synthetic datasets, two-sample metrics and the closed-form Gaussian
// trajectory oracle used by the exactness tests.

#include "trajflow/nn.hpp"
#include "trajflow/schedule.hpp"

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

namespace trajflow {

struct DatasetSpec {
  std::string name = "two_moons";  // gauss1d | gauss_mixture_2d | two_moons | checkerboard | rings
  double mean = 0.0;    // gauss1d
  double stddev = 1.0;  // gauss1d
  std::size_t components = 8;  // gauss_mixture_2d, rings
  double noise = -1.0;  // negative selects the per-dataset default
  bool standardize = true;
};

struct Batch {
  RowMatrix x;
  std::vector<int> labels;  // empty for unlabeled datasets

  Condition condition() const;
};

struct GaussianParams {
  double mean = 0.0;
  double variance = 1.0;
};

class Dataset {
 public:
  const std::string& name() const { return spec_.name; }
  std::size_t dim() const { return dim_; }
  /// Number of condition classes, 0 when unlabeled.
  std::size_t classes() const { return classes_; }
  const Eigen::RowVectorXd& offset() const { return offset_; }
  const Eigen::RowVectorXd& scale() const { return scale_; }

  Batch sample(std::size_t n, Rng& rng) const;
  /// Exact law of the (standardized) samples, for gauss1d only.
  std::optional<GaussianParams> gaussian() const;

  friend Dataset make_dataset(const DatasetSpec& spec, Rng& rng);

 private:
  Batch raw(std::size_t n, Rng& rng) const;

  DatasetSpec spec_;
  std::size_t dim_ = 0;
  std::size_t classes_ = 0;
  Eigen::RowVectorXd offset_, scale_;
};

/// Throws std::invalid_argument for unknown names. Standardization statistics
/// come from a 1e5-point reference draw taken from `rng` (gauss1d uses its
/// exact mean and standard deviation instead).
Dataset make_dataset(const DatasetSpec& spec, Rng& rng);

/// Two-moons arcs in raw coordinates: distance of a raw point to the nearer arc.
double two_moons_arc_distance(double x, double y);

/// U-statistic estimate of 2 E|A - B| - E|A - A'| - E|B - B'|, floored at 0.
double energy_distance(const RowMatrix& a, const RowMatrix& b);
/// Unbiased RBF-kernel MMD^2 with the median pairwise distance as bandwidth.
double mmd_rbf(const RowMatrix& a, const RowMatrix& b);

/// Joint Gaussian law of (x_0, x_{t_0}, ..., x_{t_T}) per coordinate for
/// x_0 ~ N(mean, variance) pushed through the forward process.
class GaussianTrajectoryOracle {
 public:
  GaussianTrajectoryOracle(GaussianParams data, TimeSchedule schedule);

  const TimeSchedule& schedule() const { return schedule_; }
  /// Index 0 is x_0, index k + 1 is level k.
  const Eigen::VectorXd& joint_mean() const { return mean_; }
  const Eigen::MatrixXd& joint_cov() const { return cov_; }
  Eigen::VectorXd trajectory_mean() const { return mean_.tail(mean_.size() - 1); }
  Eigen::MatrixXd trajectory_cov() const { return cov_.bottomRightCorner(cov_.rows() - 1, cov_.cols() - 1); }

  /// E[x_0 | trajectory] for each row and coordinate.
  RowMatrix conditional_mean(const Trajectory& tr) const;
  /// Exact NLL of each trajectory row, summed over coordinates.
  Eigen::VectorXd nll(const Trajectory& tr) const;

 private:
  GaussianParams data_;
  TimeSchedule schedule_;
  Eigen::VectorXd mean_;
  Eigen::MatrixXd cov_;
  Eigen::RowVectorXd x0_weights_;  // regression of x_0 on the levels
  Eigen::LLT<Eigen::MatrixXd> traj_llt_;
};

/// Guards against oracles built for non-Gaussian data.
GaussianTrajectoryOracle gaussian_trajectory_oracle(const Dataset& data, const TimeSchedule& schedule);

}  // namespace trajflow
