#include <doctest.h>

#include "support.hpp"
#include "trajflow/data_metrics.hpp"
#include "trajflow/flow.hpp"

#include <cmath>
#include <numbers>

using namespace trajflow;

namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

// Noise scaled by fan-in, so zero-initialized heads become generic random layers.
void perturb(ParamStore& store, Rng& rng, double scale) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& shape = store.shape(i);
    const double sd = shape.size() == 2 ? scale / std::sqrt(static_cast<double>(shape[0])) : scale;
    std::normal_distribution<double> n(0.0, sd);
    for (auto& v : store.value(i)) v += n(rng);
  }
}

RowTimes times_for(std::size_t rows, double t, double s = 0.0, double steps = 4.0) {
  RowTimes rt;
  rt.t = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(rows), t);
  rt.s = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(rows), s);
  rt.steps = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(rows), steps);
  return rt;
}

struct Fixture {
  ParamStore store;
  Transporter tr;
  Predictor pred;
};

Fixture random_model(std::size_t positions, std::size_t channels, TransporterArch arch, std::uint64_t seed,
                     double scale = 0.5) {
  Fixture f;
  Rng rng(seed);
  TransporterConfig tc;
  tc.positions = positions;
  tc.channels = channels;
  tc.hidden = 16;
  tc.embed = 8;
  tc.arch = arch;
  f.tr = Transporter::make(f.store, "transporter", tc, rng);
  PredictorConfig pc;
  pc.dim = tc.dim();
  pc.hidden = 16;
  pc.layers = 2;
  pc.embed = 8;
  f.pred = MlpPredictor::make(f.store, "predictor", pc, rng);
  perturb(f.store, rng, scale);
  return f;
}

}  // namespace

TEST_CASE("affine coupling") {
  auto x = Tensor::constant({1, 1}, 2.0);
  CouplingParams p{Tensor::constant({1, 1}, 1.0), Tensor::constant({1, 1}, 2.0)};
  auto f = affine_forward(x, p);
  CHECK(f.z[0] == 0.5);
  CHECK(f.logdet[0] == doctest::Approx(-std::log(2.0)).epsilon(1e-15));
  CHECK(affine_inverse(f.z, p)[0] == 2.0);
  CHECK(affine_inverse(Tensor::constant({1, 1}, 0.0), p)[0] == 1.0);

  CouplingParams id{Tensor::constant({2, 3}, 0.0), Tensor::constant({2, 3}, 1.0)};
  Rng rng(1);
  auto xr = Tensor::from_matrix(standard_normal(2, 3, rng));
  auto fi = affine_forward(xr, id);
  CHECK(fi.z.vector() == xr.vector());
  CHECK(fi.logdet.vector().isZero());

  CouplingParams r{Tensor::from_matrix(standard_normal(2, 3, rng)),
                   Tensor::from_matrix(standard_normal(2, 3, rng).array().exp().matrix())};
  auto back = affine_inverse(affine_forward(xr, r).z, r);
  CHECK((back.vector() - xr.vector()).cwiseAbs().maxCoeff() < 1e-10);

  CouplingParams bad{Tensor::constant({1, 1}, 0.0), Tensor::constant({1, 1}, 0.0)};
  CHECK_THROWS_AS(affine_forward(x, bad), std::logic_error);
  CHECK_THROWS_AS(affine_forward(Tensor::constant({1, 2}, 0.0), p), std::invalid_argument);
}

TEST_CASE("fresh transporter is the identity") {
  for (auto arch : {TransporterArch::made, TransporterArch::attention}) {
    ParamStore store;
    Rng rng(2);
    TransporterConfig tc;
    tc.positions = 4;
    tc.channels = 2;
    tc.hidden = 16;
    tc.arch = arch;
    auto tr = Transporter::make(store, "t", tc, rng);
    Binder p(store, false);
    auto x = Tensor::from_matrix(standard_normal(5, 8, rng));
    auto out = tr.forward(p, x, times_for(5, 0.3));
    CHECK(out.u.vector() == x.vector());
    CHECK(out.logdet.vector().isZero());
    CHECK(tr.inverse(p, x.to_matrix(), times_for(5, 0.3)) == x.to_matrix());
  }
}

TEST_CASE("transporter causality, round trip and decode cost") {
  for (auto arch : {TransporterArch::made, TransporterArch::attention}) {
    CAPTURE(static_cast<int>(arch));
    auto f = random_model(4, 2, arch, 3);
    Binder p(f.store, false);
    Rng rng(4);
    const std::size_t n = 6, P = 4, C = 2;
    RowMatrix x = standard_normal(n, P * C, rng);
    auto rt = times_for(n, 0.4);

    for (std::size_t b = 0; b < f.tr.block_count(); ++b) {
      const bool fwd = f.tr.block(b).order == ScanOrder::forward;
      RowMatrix u0 = f.tr.block_forward(p, b, Tensor::from_matrix(x), rt).u.to_matrix();
      bool causal = true, self_only = true;
      for (std::size_t pos = 0; pos < P; ++pos) {
        RowMatrix xp = x;
        xp.col(static_cast<Eigen::Index>(pos * C)).array() += 0.37;
        RowMatrix u1 = f.tr.block_forward(p, b, Tensor::from_matrix(xp), rt).u.to_matrix();
        for (std::size_t q = 0; q < P; ++q) {
          const double diff = (u1.middleCols(static_cast<Eigen::Index>(q * C), C) - u0.middleCols(static_cast<Eigen::Index>(q * C), C)).cwiseAbs().maxCoeff();
          const bool earlier = fwd ? q < pos : q > pos;
          if (earlier && diff != 0.0) causal = false;
          if (q != pos && !earlier && diff == 0.0) self_only = false;
        }
      }
      CHECK(causal);
      // Random weights make every later position depend on the perturbed one.
      CHECK(self_only);

      std::size_t evals = 0;
      RowMatrix xb = f.tr.block_inverse(p, b, u0, rt, &evals);
      CHECK(evals == P);
      CHECK((xb - x).cwiseAbs().maxCoeff() < 1e-10);
    }

    auto out = f.tr.forward(p, Tensor::from_matrix(x), rt);
    std::size_t evals = 0;
    RowMatrix back = f.tr.inverse(p, out.u.to_matrix(), rt, &evals);
    CHECK(evals == P * f.tr.block_count());
    CHECK((back - x).cwiseAbs().maxCoeff() < 1e-8);
  }
}

TEST_CASE("transporter logdet matches the Jacobian determinant") {
  auto f = random_model(3, 1, TransporterArch::made, 5);
  Binder p(f.store, false);
  Rng rng(6);
  RowMatrix x = standard_normal(1, 3, rng);
  auto rt = times_for(1, 0.5);
  auto out = f.tr.forward(p, Tensor::from_matrix(x), rt);
  Eigen::Matrix3d J;
  const double h = 1e-6;
  for (int j = 0; j < 3; ++j) {
    RowMatrix xp = x, xm = x;
    xp(0, j) += h;
    xm(0, j) -= h;
    J.col(j) = ((f.tr.forward(p, Tensor::from_matrix(xp), rt).u.to_matrix() - f.tr.forward(p, Tensor::from_matrix(xm), rt).u.to_matrix()) / (2 * h)).transpose();
  }
  CHECK(out.logdet[0] == doctest::Approx(std::log(std::abs(J.determinant()))).epsilon(1e-7));
}

TEST_CASE("skipped rows pass through unchanged") {
  auto f = random_model(4, 1, TransporterArch::made, 7);
  Binder p(f.store, false);
  Rng rng(8);
  RowMatrix x = standard_normal(4, 4, rng);
  RowTimes rt = times_for(4, 0.5);
  rt.t[1] = 1.0;
  rt.t[3] = 1.0;
  auto out = f.tr.forward(p, Tensor::from_matrix(x), rt);
  auto u = out.u.to_matrix();
  CHECK(u.row(1) == x.row(1));
  CHECK(u.row(3) == x.row(3));
  CHECK(out.logdet[1] == 0.0);
  CHECK(u.row(0) != x.row(0));
}

TEST_CASE("predictor initialization and shapes") {
  ParamStore store;
  Rng rng(9);
  PredictorConfig pc;
  pc.dim = 3;
  pc.hidden = 16;
  pc.layers = 2;
  Predictor pred = MlpPredictor::make(store, "p", pc, rng);
  Binder p(store, false);
  auto u = Tensor::from_matrix(standard_normal(5, 3, rng));
  auto cp = predictor_params(pred, p, u, times_for(5, 0.5, 0.25), Condition::none(5));
  CHECK(cp.mu.shape() == u.shape());
  CHECK(cp.sigma.shape() == u.shape());
  CHECK(cp.mu.vector().isZero());
  CHECK((cp.sigma.vector().array() == 1.0).all());
  CHECK_THROWS_AS(predictor_params(pred, p, u, times_for(5, 0.25, 0.5), Condition::none(5)), std::invalid_argument);
}

TEST_CASE("predictor depends on u_t and conditions only") {
  auto f = random_model(2, 1, TransporterArch::made, 10);
  Binder p(f.store, false);
  Rng rng(11);
  RowMatrix x_s = standard_normal(3, 2, rng), x_t = standard_normal(3, 2, rng);
  auto rt = times_for(3, 0.5, 0.25);
  auto a = factor_terms(f.tr, f.pred, p, Tensor::from_matrix(x_s), Tensor::from_matrix(x_t), rt, Condition::none(3));
  RowMatrix x_s2 = x_s.array() + 0.5;
  auto b = factor_terms(f.tr, f.pred, p, Tensor::from_matrix(x_s2), Tensor::from_matrix(x_t), rt, Condition::none(3));
  CHECK(a.params.mu.vector() == b.params.mu.vector());
  CHECK(a.params.sigma.vector() == b.params.sigma.vector());
}

TEST_CASE("standard Gaussian factor at its mode") {
  ParamStore store;
  Rng rng(12);
  TransporterConfig tc;
  tc.positions = 3;
  auto tr = Transporter::make(store, "t", tc, rng);
  PredictorConfig pc;
  pc.dim = 3;
  Predictor pred = MlpPredictor::make(store, "p", pc, rng);
  Binder p(store, false);
  auto f = factor_terms(tr, pred, p, Tensor::constant({2, 3}, 0.0), Tensor::from_matrix(standard_normal(2, 3, rng)),
                        times_for(2, 0.5, 0.25), Condition::none(2));
  CHECK(f.nll[0] == doctest::Approx(1.5 * kLog2Pi).epsilon(1e-14));
  CHECK(f.nll[1] == doctest::Approx(1.5 * kLog2Pi).epsilon(1e-14));
}

TEST_CASE("conditional density integrates to one") {
  // 1-D data, 3 positions: integrate exp(-nll) over x_s on a grid per fixed x_t.
  auto f = random_model(3, 1, TransporterArch::made, 13, 0.3);
  Binder p(f.store, false);
  Rng rng(14);
  const int g = 100;
  const double lo = -12.0, hi = 12.0, h = (hi - lo) / (g - 1);
  const std::size_t rows = static_cast<std::size_t>(g) * g * g;
  RowMatrix grid(static_cast<Eigen::Index>(rows), 3);
  for (int i = 0, r = 0; i < g; ++i)
    for (int j = 0; j < g; ++j)
      for (int k = 0; k < g; ++k, ++r) grid.row(r) << lo + i * h, lo + j * h, lo + k * h;
  for (int trial = 0; trial < 2; ++trial) {
    RowMatrix x_t = standard_normal(1, 3, rng);
    double mass = 0.0;
    const std::size_t chunk = 60000;
    for (std::size_t b = 0; b < rows; b += chunk) {
      const std::size_t n = std::min(chunk, rows - b);
      RowMatrix xt = x_t.replicate(static_cast<Eigen::Index>(n), 1);
      auto terms = factor_terms(f.tr, f.pred, p, Tensor::from_matrix(grid.middleRows(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(n))),
                                Tensor::from_matrix(xt), times_for(n, 0.6, 0.3), Condition::none(n));
      mass += (-terms.nll.vector().array()).exp().sum();
    }
    mass *= h * h * h;
    CHECK(mass == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("identity transporter reduces to the heteroscedastic Gaussian NLL") {
  ParamStore store;
  Rng rng(15);
  TransporterConfig tc;
  tc.positions = 2;
  auto tr = Transporter::make(store, "t", tc, rng);
  PredictorConfig pc;
  pc.dim = 2;
  pc.hidden = 16;
  pc.layers = 2;
  Predictor pred = MlpPredictor::make(store, "p", pc, rng);
  // Perturb only the predictor.
  std::normal_distribution<double> n(0.0, 0.3);
  for (std::size_t i = 0; i < store.size(); ++i)
    if (store.name(i).rfind("p.", 0) == 0)
      for (auto& v : store.value(i)) v += n(rng);
  Binder p(store, false);
  RowMatrix x_s = standard_normal(4, 2, rng), x_t = standard_normal(4, 2, rng);
  auto rt = times_for(4, 0.5, 0.25);
  auto f = factor_terms(tr, pred, p, Tensor::from_matrix(x_s), Tensor::from_matrix(x_t), rt, Condition::none(4));
  auto cp = predictor_params(pred, p, Tensor::from_matrix(x_t), rt, Condition::none(4));
  RowMatrix mu = cp.mu.to_matrix(), sg = cp.sigma.to_matrix();
  for (Eigen::Index i = 0; i < 4; ++i) {
    double want = 0.0;
    for (Eigen::Index j = 0; j < 2; ++j) {
      const double z = (x_s(i, j) - mu(i, j)) / sg(i, j);
      want += 0.5 * z * z + std::log(sg(i, j)) + 0.5 * kLog2Pi;
    }
    CHECK(std::abs(f.nll[static_cast<std::size_t>(i)] - want) < 1e-10);
  }
}

TEST_CASE("full model round trip") {
  auto f = random_model(4, 1, TransporterArch::made, 16);
  Binder p(f.store, false);
  Rng rng(17);
  const std::size_t n = 1000;
  RowMatrix x_s = standard_normal(n, 4, rng), x_t = standard_normal(n, 4, rng);
  auto rt = times_for(n, 0.5, 0.25);
  auto terms = factor_terms(f.tr, f.pred, p, Tensor::from_matrix(x_s), Tensor::from_matrix(x_t), rt, Condition::none(n));
  auto z = affine_forward(terms.u_s, terms.params).z;
  RowMatrix u_s = affine_inverse(z, terms.params).to_matrix();
  RowTimes rs = times_for(n, 0.25);
  RowMatrix back = f.tr.inverse(p, u_s, rs);
  CHECK((back - x_s).cwiseAbs().maxCoeff() < 1e-7);
}

TEST_CASE("trajectory NLL factorizes and its gradients match finite differences") {
  auto f = random_model(2, 1, TransporterArch::made, 18);
  Rng rng(19);
  auto sched = TimeSchedule({0.02, 0.3, 0.6, 1.0});
  RowMatrix x0 = standard_normal(3, 2, rng);
  Trajectory tr = sample_trajectory(x0, sched, rng);
  std::vector<Tensor> levels;
  for (const auto& l : tr.levels) levels.push_back(Tensor::from_matrix(l));
  Condition y = Condition::none(3);
  Binder p(f.store, false);
  auto tn = trajectory_nll(f.tr, f.pred, p, levels, tr.times, y);
  for (std::size_t b = 0; b < 3; ++b) {
    double sum = 0.0;
    for (std::size_t k = 1; k <= 3; ++k) {
      RowTimes rt = times_for(1, sched[k], sched[k - 1], 3);
      auto ft = factor_terms(f.tr, f.pred, p, Tensor::from_matrix(tr.levels[k - 1].row(static_cast<Eigen::Index>(b))),
                             Tensor::from_matrix(tr.levels[k].row(static_cast<Eigen::Index>(b))), rt, Condition::none(1));
      sum += ft.nll[0];
      CHECK(std::abs(ft.nll[0] - tn.factor_nll(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(k - 1))) < 1e-10);
    }
    const double prior = 0.5 * tr.levels[3].row(static_cast<Eigen::Index>(b)).squaredNorm() + kLog2Pi;
    CHECK(std::abs(tn.per_element[b] - (sum + prior)) < 1e-9);
  }

  auto fn = [&](const std::vector<Tensor>& x) {
    Binder q(f.store, false);
    return trajectory_nll(f.tr, f.pred, q, x, tr.times, y).total;
  };
  auto res = testing::check_gradients(fn, levels);
  CHECK(res.max_rel < 1e-5);

  CHECK_THROWS_AS(trajectory_nll(f.tr, f.pred, p, {levels[0], levels[1]}, tr.times, y), std::invalid_argument);
}

TEST_CASE("linear Gaussian predictor reproduces the closed-form trajectory NLL") {
  ParamStore store;
  Rng rng(20);
  TransporterConfig tc;
  tc.positions = 1;
  auto tr = Transporter::make(store, "t", tc, rng);
  const GaussianParams data{0.4, 0.7};
  Predictor pred = LinearGaussianPredictor{data.mean, data.variance};
  auto sched = TimeSchedule({0.02, 0.25, 0.5, 0.75, 1.0});
  RowMatrix x0 = (standard_normal(50, 1, rng).array() * std::sqrt(data.variance) + data.mean).matrix();
  Trajectory traj = sample_trajectory(x0, sched, rng);
  std::vector<Tensor> levels;
  for (const auto& l : traj.levels) levels.push_back(Tensor::from_matrix(l));
  Binder p(store, false);
  auto tn = trajectory_nll(tr, pred, p, levels, traj.times, Condition::none(50));
  GaussianTrajectoryOracle oracle(data, sched);
  Eigen::VectorXd want = oracle.nll(traj);
  CHECK((tn.per_element.vector() - want).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("each factor of a two-step 1-D model integrates to one") {
  auto f = random_model(1, 1, TransporterArch::made, 21, 0.3);
  Binder p(f.store, false);
  const auto sched = TimeSchedule({0.05, 0.5, 1.0});
  const int g = 16001;
  const double lo = -40.0, hi = 40.0, h = (hi - lo) / (g - 1);
  RowMatrix grid(g, 1);
  for (int i = 0; i < g; ++i) grid(i, 0) = lo + i * h;
  for (std::size_t k = 1; k <= 2; ++k)
    for (double xt : {-1.3, 0.2, 2.1}) {
      auto terms = factor_terms(f.tr, f.pred, p, Tensor::from_matrix(grid), Tensor::constant({g, 1}, xt),
                                times_for(g, sched[k], sched[k - 1], 2), Condition::none(g));
      const double mass = (-terms.nll.vector().array()).exp().sum() * h;
      CAPTURE(terms.params.sigma[0]);
      CHECK(mass == doctest::Approx(1.0).epsilon(1e-6));
    }
}
