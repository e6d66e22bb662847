#include <doctest.h>

#include "trajflow/data_metrics.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <numbers>

using namespace trajflow;

namespace {

Dataset dataset(const std::string& name, std::uint64_t seed = 1) {
  DatasetSpec spec;
  spec.name = name;
  Rng rng(seed);
  return make_dataset(spec, rng);
}

// E|N(mu, s^2)|.
double folded_mean(double mu, double s) {
  const double phi = 0.5 * std::erfc(mu / (s * std::sqrt(2.0)));
  return s * std::sqrt(2.0 / std::numbers::pi) * std::exp(-mu * mu / (2 * s * s)) + mu * (1.0 - 2.0 * phi);
}

}  // namespace

TEST_CASE("unknown dataset") {
  DatasetSpec spec;
  spec.name = "spirals";
  Rng rng(0);
  CHECK_THROWS_AS(make_dataset(spec, rng), std::invalid_argument);
}

TEST_CASE("gauss1d sample mean") {
  auto d = dataset("gauss1d");
  Rng rng(2);
  auto b = d.sample(100000, rng);
  CHECK(std::abs(b.x.mean()) < 0.01);
  CHECK(d.classes() == 0);
  CHECK(d.gaussian()->variance == 1.0);
}

TEST_CASE("mixture component frequencies") {
  auto d = dataset("gauss_mixture_2d");
  Rng rng(3);
  auto b = d.sample(100000, rng);
  REQUIRE(d.classes() == 8);
  std::vector<double> freq(8, 0.0);
  for (int l : b.labels) freq[static_cast<std::size_t>(l)] += 1.0 / 100000.0;
  for (double f : freq) CHECK(std::abs(f - 0.125) < 0.01);
}

TEST_CASE("two moons lie near the arcs after standardization") {
  auto d = dataset("two_moons");
  Rng rng(4);
  auto b = d.sample(5000, rng);
  // Arcs mapped into standardized coordinates, checked against a dense polyline.
  std::vector<Eigen::RowVector2d> arc;
  for (int i = 0; i <= 4000; ++i) {
    const double a = std::numbers::pi * i / 4000.0;
    for (auto raw : {Eigen::RowVector2d(std::cos(a), std::sin(a)), Eigen::RowVector2d(1 - std::cos(a), 0.5 - std::sin(a))})
      arc.push_back((raw - d.offset()).cwiseQuotient(d.scale()));
  }
  double worst = 0.0;
  for (Eigen::Index i = 0; i < b.x.rows(); ++i) {
    double best = 1e9;
    for (const auto& p : arc) best = std::min(best, (b.x.row(i) - p).norm());
    worst = std::max(worst, best);
  }
  CHECK(worst < 0.35);
  CHECK(two_moons_arc_distance(0.0, 1.0) == doctest::Approx(0.0));
  CHECK(two_moons_arc_distance(1.0, -0.5) == doctest::Approx(0.0));
}

TEST_CASE("standardization and determinism") {
  for (const char* name : {"gauss_mixture_2d", "two_moons", "checkerboard", "rings"}) {
    CAPTURE(name);
    auto d = dataset(name, 7);
    Rng rng(8);
    auto b = d.sample(100000, rng);
    Eigen::RowVectorXd m = b.x.colwise().mean();
    Eigen::RowVectorXd v = (b.x.rowwise() - m).array().square().colwise().mean();
    CHECK(m.cwiseAbs().maxCoeff() < 0.02);
    CHECK((v.array() - 1.0).abs().maxCoeff() < 0.03);
    auto d2 = dataset(name, 7);
    Rng r1(9), r2(9);
    CHECK(d.sample(50, r1).x == d2.sample(50, r2).x);
  }
}

TEST_CASE("energy distance") {
  Rng rng(10);
  RowMatrix a = standard_normal(300, 2, rng);
  CHECK(energy_distance(a, a) == 0.0);
  CHECK_THROWS_AS(energy_distance(RowMatrix(0, 2), a), std::invalid_argument);
  CHECK_THROWS_AS(energy_distance(a, RowMatrix::Zero(5, 3)), std::invalid_argument);

  RowMatrix x = standard_normal(10000, 1, rng), y = standard_normal(10000, 1, rng);
  CHECK(energy_distance(x, y) < 0.01);
  RowMatrix z = (standard_normal(10000, 1, rng).array() + 3.0).matrix();
  const double population = 2.0 * folded_mean(3.0, std::sqrt(2.0)) - 2.0 * folded_mean(0.0, std::sqrt(2.0));
  CHECK(energy_distance(x, z) == doctest::Approx(population).epsilon(0.05));
}

TEST_CASE("rbf mmd separates shifted samples") {
  Rng rng(11);
  RowMatrix a = standard_normal(400, 2, rng), b = standard_normal(400, 2, rng);
  RowMatrix c = (standard_normal(400, 2, rng).array() + 1.0).matrix();
  CHECK(std::abs(mmd_rbf(a, b)) < 0.01);
  CHECK(mmd_rbf(a, c) > 0.1);
}

TEST_CASE("gaussian trajectory oracle") {
  GaussianTrajectoryOracle o({0.0, 1.0}, TimeSchedule({0.0, 1.0}));
  CHECK(o.joint_cov().topLeftCorner(2, 1).isApprox(Eigen::Vector2d(1.0, 1.0)));
  CHECK(o.joint_cov()(0, 2) == 0.0);
  CHECK(o.joint_cov()(2, 2) == 1.0);

  const std::vector<double> times{0.02, 0.25, 0.5, 0.75, 1.0};
  const double v = 0.6;
  GaussianTrajectoryOracle g({0.3, v}, TimeSchedule(times));
  Eigen::MatrixXd S = trajectory_covariance(times);
  for (int i = 0; i < 5; ++i) {
    CHECK(g.joint_mean()[i + 1] == doctest::Approx((1 - times[i]) * 0.3));
    for (int j = 0; j < 5; ++j)
      CHECK(g.trajectory_cov()(i, j) == doctest::Approx((1 - times[i]) * (1 - times[j]) * v + S(i, j)).epsilon(1e-14));
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(g.joint_cov());
  CHECK(es.eigenvalues().minCoeff() > -1e-12);

  // Marginal variance and E[x0 | x_t] on a one-step schedule with unit data.
  const double t = 0.4;
  GaussianTrajectoryOracle m({0.0, 1.0}, TimeSchedule({t, 1.0}));
  CHECK(m.trajectory_cov()(0, 0) == doctest::Approx((1 - t) * (1 - t) + t * t));
  Trajectory tr;
  tr.levels = {RowMatrix::Constant(1, 1, 0.9), RowMatrix::Constant(1, 1, -0.2)};
  tr.times = schedule_rows(TimeSchedule({t, 1.0}), 1);
  CHECK(m.conditional_mean(tr)(0, 0) == doctest::Approx((1 - t) * 0.9 / ((1 - t) * (1 - t) + t * t)).epsilon(1e-14));

  DatasetSpec spec;
  Rng rng(1);
  CHECK_THROWS_AS(gaussian_trajectory_oracle(make_dataset(spec, rng), TimeSchedule({0.0, 1.0})), std::invalid_argument);
}

TEST_CASE("oracle conditional mean agrees with regression on simulated pairs") {
  const double t = 0.6;
  Rng rng(12);
  const int n = 1000000;
  RowMatrix x0 = standard_normal(n, 1, rng), e = standard_normal(n, 1, rng);
  Eigen::ArrayXd xt = (1 - t) * x0.col(0).array() + t * e.col(0).array();
  const double slope = (xt * x0.col(0).array()).mean() / xt.square().mean();
  CHECK(slope == doctest::Approx((1 - t) / ((1 - t) * (1 - t) + t * t)).epsilon(0.01));
}
