#include <doctest.h>

#include "trajflow/data_metrics.hpp"
#include "trajflow/sampling.hpp"

#include <algorithm>
#include <cmath>

using namespace trajflow;

namespace {

void perturb(ParamStore& store, Rng& rng, double scale) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& shape = store.shape(i);
    const double sd = shape.size() == 2 ? scale / std::sqrt(static_cast<double>(shape[0])) : scale;
    std::normal_distribution<double> n(0.0, sd);
    for (auto& v : store.value(i)) v += n(rng);
  }
}

NtmConfig labeled_config() {
  NtmConfig c;
  c.transporter.positions = 2;
  c.transporter.hidden = 16;
  c.transporter.embed = 8;
  c.predictor.dim = 2;
  c.predictor.hidden = 16;
  c.predictor.layers = 2;
  c.predictor.embed = 8;
  c.predictor.condition = {ConditionKind::label, 3};
  return c;
}

NtmConfig gaussian_config(double mean, double variance, std::vector<std::size_t> steps = {4}) {
  NtmConfig c;
  c.transporter.positions = 1;
  c.predictor.dim = 1;
  c.predictor_kind = PredictorKind::linear_gaussian;
  c.gaussian_mean = mean;
  c.gaussian_variance = variance;
  c.steps = std::move(steps);
  return c;
}

std::vector<RowMatrix> draw_noises(std::size_t T, Eigen::Index n, Eigen::Index d, Rng& rng) {
  std::vector<RowMatrix> out;
  for (std::size_t k = 0; k <= T; ++k) out.push_back(standard_normal(n, d, rng));
  return out;
}

Condition labels(std::size_t n) {
  std::vector<int> l;
  for (std::size_t i = 0; i < n; ++i) l.push_back(static_cast<int>(i % 3));
  return Condition::from_labels(l);
}

// The chain written out with the public pieces.
RowMatrix manual_chain(const NtmModel& m, const Condition& y, double w, const std::vector<RowMatrix>& z) {
  const std::size_t T = z.size() - 1;
  const auto sched = m.sampling_schedule(T);
  const std::size_t n = y.rows();
  Binder p(m.params(), false);
  RowMatrix u = z[0];
  for (std::size_t k = T; k >= 1; --k) {
    RowTimes rt;
    rt.t = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n), sched[k]);
    rt.s = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n), sched[k - 1]);
    rt.steps = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n), static_cast<double>(T));
    auto c = predictor_params(m.predictor(), p, Tensor::from_matrix(u), rt, y);
    RowMatrix mu = c.mu.to_matrix(), sg = c.sigma.to_matrix();
    if (w > 0) {
      auto un = predictor_params(m.predictor(), p, Tensor::from_matrix(u), rt, y.nulled());
      RowMatrix mu_u = un.mu.to_matrix(), sg_u = un.sigma.to_matrix();
      for (Eigen::Index i = 0; i < mu.rows(); ++i)
        for (Eigen::Index j = 0; j < mu.cols(); ++j) {
          const double s = std::clamp(std::pow(sg(i, j) / sg_u(i, j), 2), 0.0, 1.0);
          const double den = 1 + w - w * s;
          mu(i, j) = ((1 + w) * mu(i, j) - w * s * mu_u(i, j)) / den;
          sg(i, j) = sg(i, j) / std::sqrt(den);
        }
    }
    u = (z[T - k + 1].array() * sg.array() + mu.array()).matrix();
  }
  RowTimes r0;
  r0.t = r0.s = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n), sched[0]);
  r0.steps = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n), static_cast<double>(T));
  return m.transporter().inverse(p, u, r0);
}

}  // namespace

TEST_CASE("cfg_combine closed form") {
  Rng rng(1);
  std::uniform_real_distribution<double> w_dist(0.1, 5.0);
  for (int trial = 0; trial < 50; ++trial) {
    RowMatrix mu_c = standard_normal(4, 3, rng), mu_u = standard_normal(4, 3, rng);
    RowMatrix sc = standard_normal(4, 3, rng).array().exp().matrix();
    RowMatrix su = standard_normal(4, 3, rng).array().exp().matrix();
    const double w = w_dist(rng);
    auto T = [](const RowMatrix& m) { return Tensor::from_matrix(m); };

    auto zero = cfg_combine(T(mu_c), T(sc), T(mu_u), T(su), 0.0);
    CHECK(zero.mu.to_matrix() == mu_c);
    CHECK(zero.sigma.to_matrix() == sc);

    // s = 1: standard linear guidance.
    auto lin = cfg_combine(T(mu_c), T(sc), T(mu_u), T(sc), w);
    CHECK((lin.mu.to_matrix() - ((1 + w) * mu_c - w * mu_u)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((lin.sigma.to_matrix() - sc).cwiseAbs().maxCoeff() < 1e-12);

    // s -> 0.
    RowMatrix tiny = sc * 1e-8;
    auto lim = cfg_combine(T(mu_c), T(tiny), T(mu_u), T(sc), w);
    CHECK((lim.mu.to_matrix() - mu_c).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((lim.sigma.to_matrix() - tiny / std::sqrt(1 + w)).cwiseAbs().maxCoeff() < 1e-12);

    // sigma_c > sigma_u clips s to 1.
    auto clipped = cfg_combine(T(mu_c), T(su * 2.0), T(mu_u), T(su), w);
    CHECK((clipped.sigma.to_matrix() - su * 2.0).cwiseAbs().maxCoeff() < 1e-12);
  }
  auto one = cfg_combine(Tensor::constant({1}, 1.0), Tensor::constant({1}, 0.7), Tensor::constant({1}, 0.0),
                         Tensor::constant({1}, 0.7), 2.0);
  CHECK(one.mu[0] == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(one.sigma[0] == 0.7);
}

TEST_CASE("fresh model samples are the last noise draw") {
  NtmConfig c = labeled_config();
  auto m = NtmModel::make(c, 2);
  Rng rng(3);
  auto z = draw_noises(4, 6, 2, rng);
  SampleRequest req;
  req.y = labels(6);
  req.full_trajectory = true;
  auto r = sample_with_noise(m, req, z);
  CHECK(r.x == z[4]);
  REQUIRE(r.trajectory.levels.size() == 5);
  for (std::size_t k = 0; k <= 4; ++k) CHECK(r.trajectory.levels[k] == z[4 - k]);
}

TEST_CASE("sampler matches the explicit chain with and without guidance") {
  auto m = NtmModel::make(labeled_config(), 4);
  Rng rng(5);
  perturb(m.params(), rng, 0.4);
  auto z = draw_noises(4, 12, 2, rng);
  SampleRequest req;
  req.y = labels(12);
  CHECK((sample_with_noise(m, req, z).x - manual_chain(m, req.y, 0.0, z)).cwiseAbs().maxCoeff() < 1e-12);
  req.guidance = 1.5;
  auto guided = sample_with_noise(m, req, z).x;
  CHECK((guided - manual_chain(m, req.y, 1.5, z)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(guided != manual_chain(m, req.y, 0.0, z));

  Rng r1(6), r2(6);
  req.guidance = 0.0;
  CHECK(sample(m, req, r1).x == sample(m, req, r2).x);
  req.steps = 3;
  CHECK_THROWS_AS(sample(m, req, r1), std::invalid_argument);
}

TEST_CASE("undecoded sampling keeps the latents and skips x") {
  auto m = NtmModel::make(labeled_config(), 7);
  Rng rng(8);
  perturb(m.params(), rng, 0.4);
  auto z = draw_noises(4, 5, 2, rng);
  SampleRequest req;
  req.y = labels(5);
  const auto full = sample_with_noise(m, req, z);
  req.decode = false;
  const auto lean = sample_with_noise(m, req, z);
  CHECK(lean.x.size() == 0);
  REQUIRE(lean.u_levels.size() == 5);
  for (std::size_t k = 0; k <= 4; ++k) CHECK(lean.u_levels[k] == full.u_levels[k]);
}

TEST_CASE("generated trajectories factorize and recover their noises") {
  auto m = NtmModel::make(labeled_config(), 7);
  Rng rng(8);
  perturb(m.params(), rng, 0.4);
  auto z = draw_noises(4, 5, 2, rng);
  SampleRequest req;
  req.y = labels(5);
  req.full_trajectory = true;
  auto r = sample_with_noise(m, req, z);
  auto tn = m.nll(r.trajectory, req.y);
  for (Eigen::Index b = 0; b < 5; ++b) {
    double sum = tn.prior[static_cast<std::size_t>(b)];
    for (Eigen::Index k = 0; k < 4; ++k) {
      sum += tn.factor_nll(b, k);
      // Factor k pairs level k+1 with level k, generated with noise z[T - k].
      CHECK(std::abs(tn.half_sq_norm(b, k) - 0.5 * z[static_cast<std::size_t>(4 - k)].row(b).squaredNorm()) < 1e-9);
    }
    CHECK(std::abs(tn.per_element[static_cast<std::size_t>(b)] - sum) < 1e-9);
  }
}

TEST_CASE("exact Gaussian model reproduces the analytic level marginals") {
  const double mean = 0.4, var = 0.7;
  auto m = NtmModel::make(gaussian_config(mean, var), 9);
  Rng rng(10);
  SampleRequest req;
  const std::size_t n = 100000;
  req.y = Condition::none(n);
  req.full_trajectory = true;
  auto r = sample(m, req, rng);
  const auto sched = m.sampling_schedule(4);
  for (std::size_t k = 0; k <= 4; ++k) {
    CAPTURE(k);
    const double t = sched[k];
    const double want_m = (1 - t) * mean, want_v = (1 - t) * (1 - t) * var + t * t;
    Eigen::ArrayXd u = r.u_levels[k].col(0).array();
    const double m_hat = u.mean(), v_hat = (u - m_hat).square().sum() / (n - 1);
    CHECK(std::abs(m_hat - want_m) < 4 * std::sqrt(want_v / n));
    CHECK(std::abs(v_hat - want_v) < 4 * want_v * std::sqrt(2.0 / (n - 1)));
  }
}

TEST_CASE("score denoising with the exact model is the posterior mean") {
  const double mean = 0.4, var = 0.7;
  auto m = NtmModel::make(gaussian_config(mean, var), 11);
  const auto sched = m.sampling_schedule(4);
  GaussianTrajectoryOracle oracle({mean, var}, sched);
  Rng rng(12);
  const Eigen::Index n = 1000;
  RowMatrix x0 = (standard_normal(n, 1, rng).array() * std::sqrt(var) + mean).matrix();
  Trajectory traj = sample_trajectory(x0, sched, rng);
  DenoiseOptions exact;
  exact.clip_percentile = 100.0;
  auto joint = score_denoise(m, traj, Condition::none(n), exact);
  RowMatrix want = oracle.conditional_mean(traj);
  CHECK((joint.x0 - want).cwiseAbs().maxCoeff() < 1e-3);
  // Every level below the top carries the same posterior mean.
  for (std::size_t k = 1; k < 4; ++k) CHECK((joint.levels[k] - want).cwiseAbs().maxCoeff() < 1e-6);

  DenoiseOptions diag = exact;
  diag.covariance = CovarianceMode::diagonal;
  auto per_level = score_denoise(m, traj, Condition::none(n), diag);
  const double d_joint = (joint.x0 - x0).squaredNorm() / n;
  const double d_diag = (per_level.x0 - x0).squaredNorm() / n;
  const double d_raw = ((traj.levels[0] / (1 - sched[0])) - x0).squaredNorm() / n;
  CHECK(d_joint <= d_diag);
  CHECK(d_joint < d_raw);

  auto clipped = score_denoise(m, traj, Condition::none(n));
  CHECK(clipped.x0.allFinite());
}

TEST_CASE("zero gradient leaves x / (1 - t)") {
  const double mean = 0.4, var = 0.7;
  auto m = NtmModel::make(gaussian_config(mean, var), 13);
  const auto sched = m.sampling_schedule(4);
  Trajectory mode;
  mode.times = schedule_rows(sched, 1);
  for (std::size_t k = 0; k <= 4; ++k) mode.levels.push_back(RowMatrix::Constant(1, 1, (1 - sched[k]) * mean));
  auto d = score_denoise(m, mode, Condition::none(1));
  for (const auto& g : d.gradient) CHECK(std::abs(g(0, 0)) < 1e-12);
  for (std::size_t k = 0; k < 4; ++k) CHECK(d.levels[k](0, 0) == doctest::Approx(mean).epsilon(1e-12));
}

TEST_CASE("denoiser starts as copy-through and is deterministic") {
  DenoiserConfig dc;
  dc.condition = {ConditionKind::label, 3};
  auto d = Denoiser::make(dc, 14);
  Rng rng(15);
  RowMatrix u = standard_normal(7, 2, rng);
  auto y = labels(7);
  CHECK(d.apply(u, y) == u);
  CHECK(denoiser_apply(u, y, d) == u);

  auto m = NtmModel::make(labeled_config(), 16);
  perturb(m.params(), rng, 0.3);
  RowMatrix x0 = standard_normal(32, 2, rng);
  auto batch = make_denoiser_batch(m, x0, labels(32), 4, {}, rng);
  CHECK(batch.u_t0.rows() == 32);
  CHECK(batch.target.cols() == 2);
  DenoiserState st{AdamW(d.params(), OptimConfig{}), 0};
  const double first = denoiser_train_step(d, st, batch, 0.0);
  CHECK(first == doctest::Approx((batch.u_t0 - batch.target).squaredNorm() / static_cast<double>(batch.target.size())));

  perturb(d.params(), rng, 0.3);
  RowMatrix out = d.apply(u, y);
  CHECK(out.rows() == 7);
  CHECK(out.cols() == 2);
  CHECK(out == d.apply(u, y));
  CHECK(out != u);
}

TEST_CASE("denoiser distillation loss decreases") {
  const double mean = 0.4, var = 0.7;
  auto m = NtmModel::make(gaussian_config(mean, var), 17);
  DenoiserConfig dc;
  dc.positions = 1;
  dc.hidden = 32;
  auto d = Denoiser::make(dc, 18);
  OptimConfig oc;
  oc.lr = 1e-3;
  DenoiserState st{AdamW(d.params(), oc), 0};
  Rng rng(19);
  DenoiseOptions exact;
  exact.clip_percentile = 100.0;
  std::vector<double> loss;
  for (int i = 0; i < 2000; ++i) {
    RowMatrix x0 = (standard_normal(128, 1, rng).array() * std::sqrt(var) + mean).matrix();
    auto batch = make_denoiser_batch(m, x0, Condition::none(128), 4, exact, rng);
    loss.push_back(denoiser_train_step(d, st, batch, learning_rate(oc, static_cast<std::size_t>(i), 2000)));
  }
  auto window = [&](std::size_t end) {
    Eigen::Map<const Eigen::VectorXd> w(loss.data() + end - 100, 100);
    const double m = w.mean();
    return std::pair{m, std::sqrt((w.array() - m).square().sum() / 99.0 / 100.0)};
  };
  auto prev = window(100);
  for (std::size_t end = 200; end <= 2000; end += 100) {
    CAPTURE(end);
    const auto now = window(end);
    CHECK(now.first <= prev.first + 2.0 * std::hypot(now.second, prev.second));
    prev = now;
  }
  CHECK(window(2000).first < window(100).first);
}
