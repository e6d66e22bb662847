#include "trajflow/verify.hpp"

#include "trajflow/data_metrics.hpp"
#include "trajflow/flow.hpp"
#include "trajflow/model.hpp"
#include "trajflow/ops.hpp"
#include "trajflow/sampling.hpp"
#include "trajflow/schedule.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace trajflow {

GradCheck check_gradients(const GradFn& f, const std::vector<Tensor>& inputs, double h) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Tensor> leaves;
    for (const auto& x : inputs) leaves.push_back(Tensor::variable_like(x));
    analytic = grad(f(leaves), leaves);
  }
  GradCheck out;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      auto eval = [&](double delta) {
        std::vector<Tensor> xs = inputs;
        Eigen::VectorXd v = inputs[i].vector();
        v[static_cast<Eigen::Index>(j)] += delta;
        xs[i] = Tensor::constant(inputs[i].shape(), v);
        return f(xs).item();
      };
      const double fd = (eval(h) - eval(-h)) / (2.0 * h);
      const double a = analytic[i][j];
      const double abs_err = std::abs(a - fd);
      out.max_abs = std::max(out.max_abs, abs_err);
      out.max_rel = std::max(out.max_rel, abs_err / std::max({std::abs(a), std::abs(fd), 1.0}));
    }
  }
  return out;
}

namespace {

Check at_most(std::string suite, std::string name, double value, double threshold) {
  return {std::move(suite), std::move(name), value, threshold, false, value <= threshold};
}

Check at_least(std::string suite, std::string name, double value, double threshold) {
  return {std::move(suite), std::move(name), value, threshold, true, value >= threshold};
}

Tensor randn(Shape shape, Rng& rng, double s = 1.0) {
  std::normal_distribution<double> n(0.0, s);
  Eigen::VectorXd v(static_cast<Eigen::Index>(shape_size(shape)));
  for (auto& x : v) x = n(rng);
  return Tensor::constant(std::move(shape), v);
}

// Noise scaled by fan-in, so zero-initialized heads become generic layers.
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

struct RandomModel {
  ParamStore store;
  Transporter tr;
  Predictor pred;
};

RandomModel random_model(std::size_t positions, std::size_t channels, TransporterArch arch, std::uint64_t seed,
                         double scale, std::size_t hidden = 16) {
  RandomModel f;
  Rng rng(seed);
  TransporterConfig tc;
  tc.positions = positions;
  tc.channels = channels;
  tc.hidden = hidden;
  tc.embed = 8;
  tc.arch = arch;
  f.tr = Transporter::make(f.store, "transporter", tc, rng);
  PredictorConfig pc;
  pc.dim = tc.dim();
  pc.hidden = hidden;
  pc.layers = 2;
  pc.embed = 8;
  f.pred = MlpPredictor::make(f.store, "predictor", pc, rng);
  perturb(f.store, rng, scale);
  return f;
}

const char* arch_name(TransporterArch a) { return a == TransporterArch::made ? "made" : "attention"; }

// Largest relative error of Binder gradients against central differences in
// every parameter scalar.
double param_gradient_error(const ParamStore& store, const std::function<Tensor(Binder&)>& loss, double h = 1e-5) {
  std::vector<Eigen::VectorXd> g;
  {
    Tape tape;
    Binder p(store, true);
    g = p.gradients(loss(p));
  }
  ParamStore local = store;
  double worst = 0.0;
  for (std::size_t i = 0; i < local.size(); ++i)
    for (Eigen::Index j = 0; j < local.value(i).size(); ++j) {
      const double keep = local.value(i)[j];
      auto eval = [&](double d) {
        local.value(i)[j] = keep + d;
        Binder q(local, false);
        return loss(q).item();
      };
      const double fd = (eval(h) - eval(-h)) / (2 * h);
      local.value(i)[j] = keep;
      const double a = g[i][j];
      worst = std::max(worst, std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1.0}));
    }
  return worst;
}

}  // namespace

// ---------------------------------------------------------------------------

Report verify_schedule() {
  const std::string S = "schedule";
  Report r;
  Rng rng(101);

  // Level marginals from a fixed x_0: mean (1 - t) x_0, variance t^2.
  for (std::size_t T : {2, 4, 8}) {
    const double x0 = 0.7;
    const Eigen::Index n = 100000;
    const auto sched = build_schedule(T, 0.02);
    auto tr = sample_trajectory(RowMatrix::Constant(n, 1, x0), sched, rng);
    double worst = 0.0;
    for (std::size_t k = 0; k <= T; ++k) {
      const double t = sched[k];
      Eigen::ArrayXd x = tr.levels[k].col(0).array();
      const double m = x.mean(), v = (x - m).square().sum() / static_cast<double>(n - 1);
      worst = std::max(worst, std::abs(m - (1 - t) * x0) / (t / std::sqrt(static_cast<double>(n))));
      worst = std::max(worst, std::abs(v - t * t) / (t * t * std::sqrt(2.0 / static_cast<double>(n - 1))));
    }
    r.push_back(at_most(S, "marginal mean/variance, max standard errors, T=" + std::to_string(T), worst, 3.0));
  }

  // Posterior coefficients recovered by least squares of x_s on (x_t, x_0).
  {
    std::uniform_real_distribution<double> ut(0.1, 1.0), frac(0.05, 0.95);
    std::normal_distribution<double> nd;
    double ea = 0, eb = 0, ec = 0;
    for (int pair = 0; pair < 10; ++pair) {
      const double t = ut(rng), s = t * frac(rng);
      const auto f = forward_coeffs(s, t);
      Eigen::Matrix2d gram = Eigen::Matrix2d::Zero();
      Eigen::Vector2d rhs = Eigen::Vector2d::Zero();
      double ss = 0.0;
      const int n = 1000000;
      for (int i = 0; i < n; ++i) {
        const double x0 = nd(rng), xs = (1 - s) * x0 + s * nd(rng), xt = f.alpha * xs + f.sigma * nd(rng);
        const Eigen::Vector2d z(xt, x0);
        gram.noalias() += z * z.transpose();
        rhs += z * xs;
        ss += xs * xs;
      }
      const Eigen::Vector2d beta = gram.ldlt().solve(rhs);
      const double resid = (ss - beta.dot(rhs)) / (n - 2);
      const auto q = posterior_coeffs(t, s);
      ea = std::max(ea, std::abs(beta[0] - q.a));
      eb = std::max(eb, std::abs(beta[1] - q.b));
      ec = std::max(ec, std::abs(std::sqrt(std::max(resid, 0.0)) - q.c));
    }
    r.push_back(at_most(S, "posterior A by regression, 10 pairs x 1e6", ea, 1e-2));
    r.push_back(at_most(S, "posterior B by regression, 10 pairs x 1e6", eb, 1e-2));
    r.push_back(at_most(S, "posterior C by regression, 10 pairs x 1e6", ec, 1e-2));
  }
  {
    double e1 = 0, e2 = 0;
    for (int i = 1; i <= 10; ++i)
      for (int j = 0; j < 10; ++j) {
        const double t = i / 10.0, s = t * (j + 0.5) / 10.0;
        const auto q = posterior_coeffs(t, s);
        e1 = std::max(e1, std::abs(q.a * (1 - t) + q.b - (1 - s)));
        e2 = std::max(e2, std::abs(q.c * t - s * forward_coeffs(s, t).sigma));
      }
    r.push_back(at_most(S, "identity A(1-t) + B = 1 - s on 100 points", e1, 1e-12));
    r.push_back(at_most(S, "identity C t = s sigma(s,t) on 100 points", e2, 1e-12));
  }

  // Trajectory covariance against simulation from x_0 = 0.
  {
    const auto sched = build_schedule(4, 0.02);
    const Eigen::Index n = 1000000;
    auto tr = sample_trajectory(RowMatrix::Zero(n, 1), sched, rng);
    Eigen::MatrixXd X(n, static_cast<Eigen::Index>(sched.levels()));
    for (std::size_t k = 0; k < sched.levels(); ++k) X.col(static_cast<Eigen::Index>(k)) = tr.levels[k].col(0);
    Eigen::MatrixXd centered = X.rowwise() - X.colwise().mean();
    Eigen::MatrixXd mc = (centered.transpose() * centered) / static_cast<double>(n - 1);
    Eigen::MatrixXd S_an = trajectory_covariance(sched);
    r.push_back(at_most(S, "trajectory covariance vs simulation, max entry error", (mc - S_an).cwiseAbs().maxCoeff(), 0.01));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S_an);
    r.push_back(at_least(S, "trajectory covariance minimum eigenvalue", es.eigenvalues().minCoeff(), 0.0));
  }
  return r;
}

// ---------------------------------------------------------------------------

Report verify_flow() {
  const std::string S = "flow";
  Report r;

  for (auto arch : {TransporterArch::made, TransporterArch::attention}) {
    auto f = random_model(4, 2, arch, 3, 0.5);
    Binder p(f.store, false);
    Rng rng(4);
    const std::size_t n = 6, P = 4, C = 2;
    RowMatrix x = standard_normal(n, P * C, rng);
    auto rt = times_for(n, 0.4);
    double leak = 0.0, block_err = 0.0;
    std::size_t eval_mismatch = 0;
    for (std::size_t b = 0; b < f.tr.block_count(); ++b) {
      const bool fwd = f.tr.block(b).order == ScanOrder::forward;
      RowMatrix u0 = f.tr.block_forward(p, b, Tensor::from_matrix(x), rt).u.to_matrix();
      for (std::size_t pos = 0; pos < P; ++pos) {
        RowMatrix xp = x;
        xp.col(static_cast<Eigen::Index>(pos * C)).array() += 0.37;
        RowMatrix u1 = f.tr.block_forward(p, b, Tensor::from_matrix(xp), rt).u.to_matrix();
        for (std::size_t q = 0; q < P; ++q) {
          const bool earlier = fwd ? q < pos : q > pos;
          if (!earlier) continue;
          const auto cols = static_cast<Eigen::Index>(q * C);
          leak = std::max(leak, (u1.middleCols(cols, C) - u0.middleCols(cols, C)).cwiseAbs().maxCoeff());
        }
      }
      std::size_t evals = 0;
      RowMatrix xb = f.tr.block_inverse(p, b, u0, rt, &evals);
      if (evals != P) ++eval_mismatch;
      block_err = std::max(block_err, (xb - x).cwiseAbs().maxCoeff());
    }
    const std::string a = arch_name(arch);
    r.push_back(at_most(S, "causality (" + a + "): change at earlier positions", leak, 0.0));
    r.push_back(at_most(S, "per-block inverse (" + a + "): blocks not using P evaluations", static_cast<double>(eval_mismatch), 0.0));
    r.push_back(at_most(S, "per-block round trip (" + a + ")", block_err, 1e-10));
    auto out = f.tr.forward(p, Tensor::from_matrix(x), rt);
    RowMatrix back = f.tr.inverse(p, out.u.to_matrix(), rt);
    r.push_back(at_most(S, "transporter round trip (" + a + ")", (back - x).cwiseAbs().maxCoeff(), 1e-8));
  }

  {
    // x_s -> z through transporter and predictor, then back.
    auto f = random_model(4, 1, TransporterArch::made, 16, 0.5);
    Binder p(f.store, false);
    Rng rng(17);
    const std::size_t n = 1000;
    RowMatrix x_s = standard_normal(n, 4, rng), x_t = standard_normal(n, 4, rng);
    auto terms = factor_terms(f.tr, f.pred, p, Tensor::from_matrix(x_s), Tensor::from_matrix(x_t),
                              times_for(n, 0.5, 0.25), Condition::none(n));
    auto z = affine_forward(terms.u_s, terms.params).z;
    RowMatrix back = f.tr.inverse(p, affine_inverse(z, terms.params).to_matrix(), times_for(n, 0.25));
    r.push_back(at_most(S, "full model round trip, 1000 rows", (back - x_s).cwiseAbs().maxCoeff(), 1e-7));
  }

  {
    // 1-D data, 3 positions: integrate exp(-nll) over x_s on a grid.
    auto f = random_model(3, 1, TransporterArch::made, 13, 0.3);
    Binder p(f.store, false);
    Rng rng(14);
    const int g = 160;
    const double lo = -20.0, hi = 20.0, h = (hi - lo) / (g - 1);
    const std::size_t rows = static_cast<std::size_t>(g) * g * g, chunk = 64000;
    auto grid_chunk = [&](std::size_t begin, std::size_t m) {
      RowMatrix out(static_cast<Eigen::Index>(m), 3);
      for (std::size_t q = 0; q < m; ++q) {
        const std::size_t idx = begin + q, G = static_cast<std::size_t>(g);
        out.row(static_cast<Eigen::Index>(q)) << lo + static_cast<double>(idx / (G * G)) * h,
            lo + static_cast<double>((idx / G) % G) * h, lo + static_cast<double>(idx % G) * h;
      }
      return out;
    };
    double worst = 0.0;
    for (auto [t, s] : {std::pair{0.6, 0.3}, std::pair{0.9, 0.5}}) {
      RowMatrix x_t = standard_normal(1, 3, rng);
      double mass = 0.0;
      for (std::size_t b = 0; b < rows; b += chunk) {
        const std::size_t m = std::min(chunk, rows - b);
        auto terms = factor_terms(f.tr, f.pred, p, Tensor::from_matrix(grid_chunk(b, m)),
                                  Tensor::from_matrix(x_t.replicate(static_cast<Eigen::Index>(m), 1)), times_for(m, t, s),
                                  Condition::none(m));
        mass += (-terms.nll.vector().array()).exp().sum();
      }
      worst = std::max(worst, std::abs(mass * h * h * h - 1.0));
    }
    r.push_back(at_most(S, "factor density integrates to 1 (1-D, 3 positions), |mass - 1|", worst, 1e-3));
  }
  return r;
}

// ---------------------------------------------------------------------------

Report verify_gradients() {
  const std::string S = "gradients";
  Report r;
  Rng rng(11);
  auto a = randn({3, 4}, rng), b = randn({3, 4}, rng), w = randn({4, 2}, rng);
  auto pos = Tensor::constant({3, 4}, (randn({3, 4}, rng).vector().array().abs() + 0.5).matrix());
  auto col = randn({3, 1}, rng), row = randn({4}, rng);
  auto q = randn({2, 3, 4}, rng), k = randn({2, 4, 3}, rng);
  RowMatrix mask = RowMatrix::Ones(3, 3).triangularView<Eigen::Lower>();

  using V = std::vector<Tensor>;
  const std::vector<std::pair<GradFn, V>> battery = {
      {[](const V& x) { return sum(square(add(x[0], x[1]))); }, {a, b}},
      {[](const V& x) { return sum(square(sub(x[0], x[1]))); }, {a, b}},
      {[](const V& x) { return sum(mul(x[0], x[1])); }, {a, b}},
      {[](const V& x) { return sum(div(x[0], x[1])); }, {a, pos}},
      {[](const V& x) { return sum(square(add(x[0], x[1]))); }, {a, row}},
      {[](const V& x) { return sum(square(mul(x[0], x[1]))); }, {a, col}},
      {[](const V& x) { return sum(div(x[1], add_scalar(square(x[0]), 1.0))); }, {col, a}},
      {[](const V& x) { return sum(square(scale(neg(x[0]), 1.7))); }, {a}},
      {[](const V& x) { return sum(exp(x[0])); }, {a}},
      {[](const V& x) { return sum(log(x[0])); }, {pos}},
      {[](const V& x) { return sum(tanh(x[0])); }, {a}},
      {[](const V& x) { return sum(gelu(x[0])); }, {a}},
      {[](const V& x) { return sum(square(clamp(x[0], -0.7, 0.9))); }, {a}},
      {[](const V& x) { return sum(square(matmul(x[0], x[1]))); }, {a, w}},
      {[](const V& x) { return sum(square(batch_matmul(x[0], x[1]))); }, {q, k}},
      {[](const V& x) { return sum(mul(transpose_last(x[0]), x[1])); }, {q, k}},
      {[](const V& x) { return mean(square(x[0])); }, {a}},
      {[](const V& x) { return sum(square(sum_last(x[0]))); }, {q}},
      {[](const V& x) { return sum(square(sum_rows(x[0]))); }, {a}},
      {[](const V& x) { return sum(square(matmul(reshape(x[0], {2, 6}), reshape(x[1], {6, 2})))); }, {a, b}},
      {[](const V& x) { return sum(square(add(slice_cols(x[0], 1, 2), slice_rows(x[1], 1, 2)))); },
       {randn({2, 4}, rng), randn({3, 2}, rng)}},
      {[](const V& x) { return add(sum(square(concat_cols({x[0], x[1]}))), sum(mul(concat_rows({x[0], x[1]}), concat_rows({x[1], x[0]})))); },
       {randn({2, 2}, rng), randn({2, 2}, rng)}},
      {[](const V& x) { return sum(square(gather_rows(x[0], {2, 0, 2, 1}))); }, {a}},
      {[](const V& x) { return sum(square(mul(broadcast_to(x[0], {3, 4}), x[1]))); }, {row, a}},
      {[](const V& x) { return sum(mul(softmax(x[0]), x[1])); }, {a, b}},
      {[mask](const V& x) { return sum(mul(masked_softmax(x[0], mask), x[1])); }, {randn({2, 3, 3}, rng), randn({2, 3, 3}, rng)}},
  };
  double worst = 0.0;
  for (const auto& [f, in] : battery) worst = std::max(worst, check_gradients(f, in).max_rel);
  r.push_back(at_most(S, "primitive battery, max relative error", worst, 1e-6));

  // Random compositions of primitives.
  std::uniform_int_distribution<int> dim(1, 8), depth(1, 6), opi(0, 9);
  double worst_graph = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t nr = static_cast<std::size_t>(dim(rng)), nc = static_cast<std::size_t>(dim(rng));
    std::vector<int> ops(static_cast<std::size_t>(depth(rng)));
    for (auto& o : ops) o = opi(rng);
    GradFn f = [ops](const V& x) {
      Tensor h = x[0];
      for (int o : ops) {
        switch (o) {
          case 0: h = tanh(add(h, x[1])); break;
          case 1: h = mul(h, x[1]); break;
          case 2: h = gelu(matmul(h, x[2])); break;
          case 3: h = div(h, add_scalar(square(x[1]), 1.0)); break;
          case 4: h = softmax(h); break;
          case 5: h = log(add_scalar(square(h), 1.0)); break;
          case 6: h = exp(scale(tanh(h), 0.5)); break;
          case 7: h = sub(h, broadcast_to(sum_rows(x[1]), h.shape())); break;
          case 8: h = mul(h, reshape(sum_last(x[1]), {h.extent(0), 1})); break;
          default:
            if (h.extent(1) < 2) { h = add(square(h), x[1]); break; }
            h = add(square(h), concat_cols({slice_cols(x[1], 0, 1), slice_cols(h, 1, h.extent(1) - 1)}));
            break;
        }
      }
      return mean(mul(h, x[0]));
    };
    worst_graph = std::max(worst_graph, check_gradients(f, {randn({nr, nc}, rng, 0.7), randn({nr, nc}, rng, 0.7), randn({nc, nc}, rng, 0.5)}).max_rel);
  }
  r.push_back(at_most(S, "100 random graphs, max relative error", worst_graph, 1e-6));

  // Through the trajectory NLL, with respect to the levels and to every parameter.
  for (auto arch : {TransporterArch::made, TransporterArch::attention}) {
    auto f = random_model(2, 1, arch, 18, 0.5, 8);
    const auto sched = TimeSchedule({0.02, 0.3, 0.6, 1.0});
    RowMatrix x0 = standard_normal(3, 2, rng);
    Trajectory tr = sample_trajectory(x0, sched, rng);
    std::vector<Tensor> levels;
    for (const auto& l : tr.levels) levels.push_back(Tensor::from_matrix(l));
    const Condition y = Condition::none(3);
    auto wrt_levels = check_gradients(
        [&](const V& x) {
          Binder p(f.store, false);
          return trajectory_nll(f.tr, f.pred, p, x, tr.times, y).total;
        },
        levels);

    auto nll = [&](Binder& p) {
      return trajectory_nll(f.tr, f.pred, p, levels, tr.times, y).total;
    };
    const double wrt_params = param_gradient_error(f.store, nll);
    const double worst_nll = std::max(wrt_levels.max_rel, wrt_params);
    r.push_back(at_most(S, std::string("trajectory NLL (") + arch_name(arch) + "), levels and parameters", worst_nll, 1e-5));
  }
  return r;
}

// ---------------------------------------------------------------------------

Report verify_oracle() {
  const std::string S = "oracle";
  Report r;
  Rng rng(31);

  // Exact model for i.i.d. Gaussian data against the closed-form joint law.
  const GaussianParams data{0.4, 0.7};
  NtmConfig gc;
  gc.transporter.positions = 1;
  gc.predictor.dim = 1;
  gc.predictor_kind = PredictorKind::linear_gaussian;
  gc.gaussian_mean = data.mean;
  gc.gaussian_variance = data.variance;
  auto gm = NtmModel::make(gc, 1);
  const auto sched = gm.sampling_schedule(4);
  GaussianTrajectoryOracle oracle(data, sched);
  {
    const Eigen::Index n = 2000;
    RowMatrix x0 = (standard_normal(n, 1, rng).array() * std::sqrt(data.variance) + data.mean).matrix();
    Trajectory traj = sample_trajectory(x0, sched, rng);
    auto tn = gm.nll(traj, Condition::none(static_cast<std::size_t>(n)));
    const double err = (tn.per_element.vector() - oracle.nll(traj)).cwiseAbs().maxCoeff();
    r.push_back(at_most(S, "exact Gaussian model NLL vs closed form, nats/dim", err, 1e-3));
  }
  {
    const Eigen::Index n = 1000;
    RowMatrix x0 = (standard_normal(n, 1, rng).array() * std::sqrt(data.variance) + data.mean).matrix();
    Trajectory traj = sample_trajectory(x0, sched, rng);
    const auto y = Condition::none(static_cast<std::size_t>(n));
    DenoiseOptions opts;
    opts.clip_percentile = 100.0;
    auto joint = score_denoise(gm, traj, y, opts);
    opts.covariance = CovarianceMode::diagonal;
    auto diag = score_denoise(gm, traj, y, opts);
    const RowMatrix want = oracle.conditional_mean(traj);
    r.push_back(at_most(S, "score denoising vs E[x0 | trajectory]", (joint.x0 - want).cwiseAbs().maxCoeff(), 1e-3));
    const double dj = (joint.x0 - want).squaredNorm() / static_cast<double>(n);
    const double dd = (diag.x0 - want).squaredNorm() / static_cast<double>(n);
    r.push_back(at_most(S, "joint minus diagonal covariance, mean squared distance to E[x0 | trajectory]", dj - dd, 0.0));
  }

  // Guidance on coupling parameters.
  {
    double e0 = 0, e1 = 0, elim = 0;
    std::uniform_real_distribution<double> wd(0.1, 5.0);
    auto T = [](const RowMatrix& m) { return Tensor::from_matrix(m); };
    for (int trial = 0; trial < 100; ++trial) {
      RowMatrix mc = standard_normal(4, 3, rng), mu = standard_normal(4, 3, rng);
      RowMatrix sc = standard_normal(4, 3, rng).array().exp().matrix(), su = standard_normal(4, 3, rng).array().exp().matrix();
      const double w = wd(rng);
      auto zero = cfg_combine(T(mc), T(sc), T(mu), T(su), 0.0);
      e0 = std::max({e0, (zero.mu.to_matrix() - mc).cwiseAbs().maxCoeff(), (zero.sigma.to_matrix() - sc).cwiseAbs().maxCoeff()});
      auto lin = cfg_combine(T(mc), T(sc), T(mu), T(sc), w);
      e1 = std::max({e1, (lin.mu.to_matrix() - ((1 + w) * mc - w * mu)).cwiseAbs().maxCoeff(),
                     (lin.sigma.to_matrix() - sc).cwiseAbs().maxCoeff()});
      RowMatrix tiny = sc * 1e-8;
      auto lim = cfg_combine(T(mc), T(tiny), T(mu), T(sc), w);
      elim = std::max({elim, (lim.mu.to_matrix() - mc).cwiseAbs().maxCoeff(),
                       (lim.sigma.to_matrix() - tiny / std::sqrt(1 + w)).cwiseAbs().maxCoeff()});
    }
    r.push_back(at_most(S, "guidance w = 0 is the identity", e0, 1e-12));
    r.push_back(at_most(S, "guidance with equal scales is linear guidance", e1, 1e-12));
    r.push_back(at_most(S, "guidance limit as sigma_c / sigma_u -> 0", elim, 1e-12));
  }

  // Finetune initialization reproduces the flow-matching posterior sampler.
  {
    FlowMatchConfig fc;
    fc.hidden = 32;
    fc.layers = 2;
    fc.embed = 16;
    auto fm = FlowMatchModel::make(fc, 2);
    perturb(fm.params(), rng, 0.5);
    NtmConfig nc;
    nc.transporter.hidden = 16;
    nc.transporter.embed = 8;
    auto m = finetune_init(fm, nc, 3);
    std::vector<RowMatrix> z;
    for (int k = 0; k <= 4; ++k) z.push_back(standard_normal(256, 2, rng));
    SampleRequest req;
    req.y = Condition::none(256);
    RowMatrix a = sample_with_noise(m, req, z).x;
    RowMatrix b = fm_posterior_sample(fm, m.sampling_schedule(4), req.y, z);
    r.push_back(at_most(S, "finetune init sample vs flow-matching posterior sample", (a - b).cwiseAbs().maxCoeff(), 0.0));
  }
  return r;
}

// ---------------------------------------------------------------------------

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names{"schedule", "flow", "gradients", "oracle"};
  return names;
}

Report run_suite(std::string_view name) {
  if (name == "schedule") return verify_schedule();
  if (name == "flow") return verify_flow();
  if (name == "gradients") return verify_gradients();
  if (name == "oracle") return verify_oracle();
  if (name == "all") {
    Report all;
    for (const auto& n : suite_names()) {
      auto part = run_suite(n);
      all.insert(all.end(), part.begin(), part.end());
    }
    return all;
  }
  throw std::invalid_argument("unknown suite '" + std::string(name) + "'");
}

bool all_passed(const Report& r) {
  return std::all_of(r.begin(), r.end(), [](const Check& c) { return c.pass; });
}

std::string format_report(const Report& r) {
  std::size_t ws = 5, wn = 5;
  for (const auto& c : r) {
    ws = std::max(ws, c.suite.size());
    wn = std::max(wn, c.name.size());
  }
  std::ostringstream out;
  char line[512];
  std::snprintf(line, sizeof line, "%-*s  %-*s  %12s  %15s  %s\n", static_cast<int>(ws), "suite", static_cast<int>(wn),
                "check", "measured", "threshold", "result");
  out << line;
  for (const auto& c : r) {
    char bound[32];
    std::snprintf(bound, sizeof bound, "%s %.3e", c.at_least ? ">=" : "<=", c.threshold);
    std::snprintf(line, sizeof line, "%-*s  %-*s  %12.4e  %15s  %s\n", static_cast<int>(ws), c.suite.c_str(),
                  static_cast<int>(wn), c.name.c_str(), c.value, bound, c.pass ? "PASS" : "FAIL");
    out << line;
  }
  return out.str();
}

}  // namespace trajflow
