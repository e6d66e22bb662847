#include "trajflow/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace trajflow {

CouplingParams cfg_combine(const Tensor& mu_c, const Tensor& sigma_c, const Tensor& mu_u, const Tensor& sigma_u,
                           double w) {
  if (mu_c.shape() != sigma_c.shape() || mu_u.shape() != mu_c.shape() || sigma_u.shape() != mu_c.shape())
    throw std::invalid_argument("cfg_combine: shape mismatch");
  if (!(w >= 0.0)) throw std::invalid_argument("cfg_combine: guidance scale must be >= 0");
  const auto mc = mu_c.vector().array(), sc = sigma_c.vector().array();
  const auto mu = mu_u.vector().array(), su = sigma_u.vector().array();
  Eigen::ArrayXd r = (sc / su).square().min(1.0).max(0.0);
  Eigen::ArrayXd den = 1.0 + w - w * r;
  Eigen::VectorXd sigma = sc / den.sqrt();
  Eigen::VectorXd mean = ((1.0 + w) * mc - w * r * mu) / den;
  return {Tensor::constant(mu_c.shape(), mean), Tensor::constant(mu_c.shape(), sigma)};
}

namespace {

RowTimes level_times(std::size_t rows, double t, double s, std::size_t steps) {
  RowTimes rt;
  rt.t = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(rows), t);
  rt.s = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(rows), s);
  rt.steps = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(rows), static_cast<double>(steps));
  return rt;
}

}  // namespace

SampleResult sample(const NtmModel& model, const SampleRequest& req, Rng& rng) {
  const auto n = static_cast<Eigen::Index>(req.y.rows());
  const auto d = static_cast<Eigen::Index>(model.config().dim());
  std::vector<RowMatrix> noises;
  for (std::size_t k = 0; k <= req.steps; ++k) noises.push_back(standard_normal(n, d, rng));
  return sample_with_noise(model, req, noises);
}

SampleResult sample_with_noise(const NtmModel& model, const SampleRequest& req,
                               const std::vector<RowMatrix>& noises) {
  const std::size_t T = req.steps;
  if (!model.allows(T)) throw std::invalid_argument("sample: " + std::to_string(T) + " steps not in the model's step set");
  if (noises.size() != T + 1) throw std::invalid_argument("sample: need T + 1 noise draws");
  const std::size_t n = req.y.rows();
  const auto d = static_cast<Eigen::Index>(model.config().dim());
  const TimeSchedule sched = model.sampling_schedule(T);

  SampleResult out;
  out.u_levels.assign(T + 1, RowMatrix(static_cast<Eigen::Index>(n), d));
  out.trajectory.times = schedule_rows(sched, n);
  if (n == 0) {
    out.x = RowMatrix(0, d);
    if (req.full_trajectory) out.trajectory.levels = out.u_levels;
    return out;
  }
  Binder p(model.params(), false);
  out.u_levels[T] = noises[0];
  for (std::size_t k = T; k >= 1; --k) {
    RowTimes rt = level_times(n, sched[k], sched[k - 1], T);
    Tensor ut = Tensor::from_matrix(out.u_levels[k]);
    CouplingParams cp = predictor_params(model.predictor(), p, ut, rt, req.y);
    if (req.guidance > 0.0) {
      CouplingParams cu = predictor_params(model.predictor(), p, ut, rt, req.y.nulled());
      cp = cfg_combine(cp.mu, cp.sigma, cu.mu, cu.sigma, req.guidance);
    }
    out.u_levels[k - 1] = affine_inverse(Tensor::from_matrix(noises[T - k + 1]), cp).to_matrix();
  }
  auto to_x = [&](std::size_t k) {
    RowTimes rt = level_times(n, sched[k], sched[k], T);
    return model.transporter().inverse(p, out.u_levels[k], rt);
  };
  if (req.decode || req.full_trajectory) out.x = to_x(0);
  if (req.full_trajectory) {
    out.trajectory.levels.push_back(out.x);
    for (std::size_t k = 1; k <= T; ++k) out.trajectory.levels.push_back(to_x(k));
  }
  return out;
}

namespace {

double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

}  // namespace

DenoisedTrajectory score_denoise(const NtmModel& model, const Trajectory& trajectory, const Condition& y,
                                 const DenoiseOptions& opts) {
  const std::size_t T = trajectory.step_count();
  const auto B = static_cast<Eigen::Index>(trajectory.batch());
  const auto D = static_cast<Eigen::Index>(trajectory.dim());
  if (!model.allows(T)) throw std::invalid_argument("score_denoise: trajectory step count not in the model's step set");

  std::vector<RowMatrix> g;
  {
    Tape tape;
    Binder p(model.params(), false);
    std::vector<Tensor> levels;
    for (const auto& l : trajectory.levels) levels.push_back(Tensor::variable_like(Tensor::from_matrix(l)));
    auto tn = trajectory_nll(model.transporter(), model.predictor(), p, levels, trajectory.times, y);
    for (const auto& gk : grad(tn.total, levels)) g.push_back(gk.to_matrix());
  }

  if (opts.clip_percentile < 100.0) {
    for (Eigen::Index b = 0; b < B; ++b) {
      std::vector<double> mags;
      for (const auto& gk : g)
        for (Eigen::Index j = 0; j < D; ++j) mags.push_back(std::abs(gk(b, j)));
      const double thr = percentile(std::move(mags), opts.clip_percentile);
      for (auto& gk : g) gk.row(b) = gk.row(b).cwiseMax(-thr).cwiseMin(thr);
    }
  }

  DenoisedTrajectory out;
  out.levels.assign(T, RowMatrix(B, D));
  for (Eigen::Index b = 0; b < B; ++b) {
    std::vector<double> times(T + 1);
    for (std::size_t k = 0; k <= T; ++k) times[k] = trajectory.times(b, static_cast<Eigen::Index>(k));
    Eigen::MatrixXd S = trajectory_covariance(times);
    if (opts.covariance == CovarianceMode::diagonal) S = Eigen::MatrixXd(S.diagonal().asDiagonal());
    for (std::size_t k = 0; k < T; ++k) {
      Eigen::RowVectorXd corr = Eigen::RowVectorXd::Zero(D);
      for (std::size_t l = 0; l <= T; ++l)
        corr += S(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(l)) * g[l].row(b);
      out.levels[k].row(b) = (trajectory.levels[k].row(b) - corr) / (1.0 - times[k]);
    }
  }
  out.x0 = out.levels[0];
  out.gradient = std::move(g);
  return out;
}

Denoiser Denoiser::make(const DenoiserConfig& cfg, std::uint64_t seed) {
  if (cfg.positions < 1 || cfg.channels < 1 || cfg.layers < 1) throw std::invalid_argument("denoiser: empty geometry");
  Denoiser d;
  d.cfg_ = cfg;
  Rng rng(seed);
  d.token_in = Linear::make(d.params_, "denoiser.token_in", cfg.channels, cfg.hidden, rng);
  RowMatrix pe = standard_normal(static_cast<Eigen::Index>(cfg.positions), static_cast<Eigen::Index>(cfg.hidden), rng) * 0.1;
  d.pos_embed_ = d.params_.add("denoiser.pos", {cfg.positions, cfg.hidden}, Eigen::Map<Eigen::VectorXd>(pe.data(), pe.size()));
  d.cond_ = ConditionEmbedding::make(d.params_, "denoiser.cond", cfg.condition, cfg.hidden, rng);
  d.mix = Linear::make(d.params_, "denoiser.mix", cfg.hidden, cfg.hidden, rng);
  for (std::size_t l = 1; l < cfg.layers; ++l)
    d.hidden_.push_back(Linear::make(d.params_, "denoiser.h" + std::to_string(l), cfg.hidden, cfg.hidden, rng));
  d.head = Linear::make(d.params_, "denoiser.head", cfg.hidden, cfg.channels, rng, /*zero_init=*/true);
  return d;
}

Tensor Denoiser::forward(Binder& p, const Tensor& u, const Condition& y) const {
  const std::size_t rows = u.rows(), P = cfg_.positions, C = cfg_.channels, H = cfg_.hidden;
  if (u.cols() != cfg_.dim()) throw std::invalid_argument("denoiser: input width mismatch");
  std::vector<std::size_t> owner(rows * P);
  for (std::size_t i = 0; i < owner.size(); ++i) owner[i] = i / P;

  Tensor tok = token_in(p, reshape(u, {rows * P, C}));
  tok = reshape(add(reshape(tok, {rows, P, H}), p(pos_embed_)), {rows * P, H});
  if (Tensor c = cond_(p, y); c.defined()) tok = add(tok, gather_rows(c, owner));
  Tensor h = gelu(tok);
  // Mean over positions, mixed and broadcast back to every token.
  RowMatrix avg(static_cast<Eigen::Index>(P * H), static_cast<Eigen::Index>(H));
  avg.setZero();
  for (std::size_t q = 0; q < P; ++q)
    avg.middleRows(static_cast<Eigen::Index>(q * H), static_cast<Eigen::Index>(H)).diagonal().setConstant(1.0 / static_cast<double>(P));
  Tensor pooled = matmul(reshape(h, {rows, P * H}), Tensor::from_matrix(avg));
  h = gelu(add(h, gather_rows(mix(p, pooled), owner)));
  for (const auto& l : hidden_) h = gelu(l(p, h));
  return add(u, reshape(head(p, h), {rows, P * C}));
}

RowMatrix Denoiser::apply(const RowMatrix& u_t0, const Condition& y) const {
  Binder p(params_, false);
  return forward(p, Tensor::from_matrix(u_t0), y).to_matrix();
}

DenoiserBatch make_denoiser_batch(const NtmModel& model, const RowMatrix& x0, const Condition& y, std::size_t steps,
                                  const DenoiseOptions& opts, Rng& rng) {
  const TimeSchedule sched = model.sampling_schedule(steps);
  Trajectory traj = sample_trajectory(x0, sched, rng);
  DenoiserBatch batch;
  batch.target = score_denoise(model, traj, y, opts).x0;
  Binder p(model.params(), false);
  RowTimes rt;
  rt.t = Eigen::VectorXd::Constant(x0.rows(), sched[0]);
  rt.steps = Eigen::VectorXd::Constant(x0.rows(), static_cast<double>(steps));
  batch.u_t0 = model.transporter().forward(p, Tensor::from_matrix(traj.levels[0]), rt).u.to_matrix();
  batch.y = y;
  return batch;
}

double denoiser_train_step(Denoiser& d, DenoiserState& state, const DenoiserBatch& batch, double lr) {
  Tape tape;
  Binder p(d.params(), true);
  Tensor out = d.forward(p, Tensor::from_matrix(batch.u_t0), batch.y);
  Tensor loss = mean(square(sub(out, Tensor::from_matrix(batch.target))));
  const double value = loss.item();
  if (!std::isfinite(value)) throw std::runtime_error("denoiser: non-finite loss");
  state.optimizer.step(d.params(), p.gradients(loss), lr);
  ++state.step;
  return value;
}

}  // namespace trajflow
