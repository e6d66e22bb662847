#include "trajflow/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <sstream>

namespace trajflow {

namespace {

double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

std::vector<std::size_t> rows_where(const std::vector<std::size_t>& values, std::size_t v) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < values.size(); ++i)
    if (values[i] == v) out.push_back(i);
  return out;
}

RowMatrix take_rows(const RowMatrix& m, const std::vector<std::size_t>& rows) {
  RowMatrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

bool finite(double v) { return std::isfinite(v); }

}  // namespace

// ---------------------------------------------------------------------------
// Flow matching

FlowMatchModel FlowMatchModel::make(const FlowMatchConfig& cfg, std::uint64_t seed) {
  if (cfg.dim < 1) throw std::invalid_argument("flow matching: dim must be >= 1");
  FlowMatchModel m;
  m.cfg_ = cfg;
  Rng rng(seed);
  m.net_ = VelocityNet::make(m.params_, "velocity", cfg.dim, cfg.hidden, cfg.layers, cfg.embed, cfg.condition,
                             rng);
  return m;
}

RowMatrix FlowMatchModel::velocity(const RowMatrix& x, const Eigen::VectorXd& t, const Condition& y) const {
  Binder p(params_, false);
  return net_(p, Tensor::from_matrix(x), t, y).out.to_matrix();
}

RowMatrix FlowMatchModel::guided_velocity(const RowMatrix& x, const Eigen::VectorXd& t, const Condition& y,
                                          double w) const {
  RowMatrix vc = velocity(x, t, y);
  if (w == 0.0) return vc;
  RowMatrix vu = velocity(x, t, y.nulled());
  return (1.0 + w) * vc - w * vu;
}

// ---------------------------------------------------------------------------
// Optimizer

double learning_rate(const OptimConfig& cfg, std::size_t step, std::size_t total) {
  if (step < cfg.warmup) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup);
  const double span = static_cast<double>(std::max<std::size_t>(total > cfg.warmup ? total - cfg.warmup : 1, 1));
  const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup) / span);
  return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(const ParamStore& store, OptimConfig cfg) : cfg_(cfg), frozen_(store.size(), 0) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    m_.push_back(Eigen::VectorXd::Zero(store.value(i).size()));
    v_.push_back(Eigen::VectorXd::Zero(store.value(i).size()));
  }
}

double AdamW::step(ParamStore& store, std::vector<Eigen::VectorXd> grads, double lr) {
  if (grads.size() != m_.size()) throw std::invalid_argument("adamw: gradient count mismatch");
  double sq = 0.0;
  for (std::size_t i = 0; i < grads.size(); ++i)
    if (!frozen_[i]) sq += grads[i].squaredNorm();
  const double norm = std::sqrt(sq);
  const double k = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (frozen_[i]) continue;
    Eigen::VectorXd g = grads[i] * k;
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    Eigen::VectorXd& w = store.value(i);
    w *= 1.0 - lr * cfg_.weight_decay;
    w.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + cfg_.eps);
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Trajectory model

void NtmConfig::validate() const {
  if (steps.empty()) throw std::invalid_argument("model: the allowed step set is empty");
  for (auto T : steps) {
    if (T < 1) throw std::invalid_argument("model: step counts must be >= 1");
    if (!(sample_t_min < 1.0 / static_cast<double>(T)))
      throw std::invalid_argument("model: sample_t_min must be below 1/T for T = " + std::to_string(T));
  }
  if (predictor.dim != transporter.dim())
    throw std::invalid_argument("model: predictor dim " + std::to_string(predictor.dim) +
                                " != transporter dim " + std::to_string(transporter.dim()));
  if (!(gaussian_variance > 0.0)) throw std::invalid_argument("model: gaussian_variance must be positive");
}

NtmModel NtmModel::make(const NtmConfig& cfg_in, std::uint64_t seed) {
  NtmConfig cfg = cfg_in;
  const bool multi = cfg.steps.size() > 1;
  cfg.transporter.condition_on_steps = multi;
  cfg.predictor.condition_on_steps = multi;
  cfg.validate();
  NtmModel m;
  m.cfg_ = cfg;
  Rng rng(seed);
  m.transporter_ = Transporter::make(m.params_, "transporter", cfg.transporter, rng);
  switch (cfg.predictor_kind) {
    case PredictorKind::mlp:
      m.predictor_ = MlpPredictor::make(m.params_, "predictor", cfg.predictor, rng);
      break;
    case PredictorKind::posterior: {
      PosteriorPredictor pp;
      const auto& pc = cfg.predictor;
      pp.backbone = VelocityNet::make(m.params_, "predictor.velocity", pc.dim, pc.hidden, pc.layers, pc.embed,
                                      pc.condition, rng);
      pp.proj_out = Linear::make(m.params_, "predictor.proj_out", pc.hidden, pc.dim, rng, /*zero_init=*/true);
      m.predictor_ = std::move(pp);
      break;
    }
    case PredictorKind::linear_gaussian:
      m.predictor_ = LinearGaussianPredictor{cfg.gaussian_mean, cfg.gaussian_variance};
      break;
  }
  return m;
}

bool NtmModel::allows(std::size_t steps) const {
  return std::find(cfg_.steps.begin(), cfg_.steps.end(), steps) != cfg_.steps.end();
}

TimeSchedule NtmModel::schedule(std::size_t steps, double t_min) const {
  TimeSchedule s = build_schedule(steps, t_min);
  if (!cfg_.shift || steps < 2) return s;
  return apply_shift(s, cfg_.shift_seq_len ? cfg_.shift_seq_len : cfg_.transporter.positions);
}

TrajectoryNll NtmModel::nll(const Trajectory& trajectory, const Condition& y) const {
  if (!allows(trajectory.step_count()))
    throw std::invalid_argument("nll: trajectory has " + std::to_string(trajectory.step_count()) +
                                " steps, not in the model's step set");
  Binder p(params_, false);
  std::vector<Tensor> levels;
  for (const auto& l : trajectory.levels) levels.push_back(Tensor::from_matrix(l));
  return trajectory_nll(transporter_, predictor_, p, levels, trajectory.times, y);
}

NtmModel finetune_init(const FlowMatchModel& fm, NtmConfig cfg, std::uint64_t seed) {
  const auto& fc = fm.config();
  cfg.predictor_kind = PredictorKind::posterior;
  cfg.predictor.dim = fc.dim;
  cfg.predictor.hidden = fc.hidden;
  cfg.predictor.layers = fc.layers;
  cfg.predictor.embed = fc.embed;
  cfg.predictor.condition = fc.condition;
  NtmModel m = NtmModel::make(cfg, seed);
  const ParamStore& src = fm.params();
  for (std::size_t i = 0; i < src.size(); ++i) m.params_.value(m.params_.find("predictor." + src.name(i))) = src.value(i);
  m.reference_ = fm;
  return m;
}

RowMatrix reference_posterior_mean(const FlowMatchModel& fm, const RowMatrix& x_t, const RowTimes& times,
                                   const Condition& y) {
  RowMatrix v = fm.velocity(x_t, times.t, y);
  return posterior_mean(Tensor::from_matrix(x_t), Tensor::from_matrix(v), row_posterior(times)).to_matrix();
}

RowMatrix fm_posterior_sample(const FlowMatchModel& fm, const TimeSchedule& schedule, const Condition& y,
                              const std::vector<RowMatrix>& noises) {
  const std::size_t T = schedule.step_count();
  if (noises.size() != T + 1) throw std::invalid_argument("fm_posterior_sample: need T + 1 noise draws");
  const auto rows = noises[0].rows();
  RowMatrix u = noises[0];
  for (std::size_t k = T; k >= 1; --k) {
    RowTimes rt;
    rt.t = Eigen::VectorXd::Constant(rows, schedule[k]);
    rt.s = Eigen::VectorXd::Constant(rows, schedule[k - 1]);
    rt.steps = Eigen::VectorXd::Constant(rows, static_cast<double>(T));
    RowPosterior post = row_posterior(rt);
    Tensor ut = Tensor::from_matrix(u);
    Tensor v = Tensor::from_matrix(fm.velocity(u, rt.t, y));
    CouplingParams cp{posterior_mean(ut, v, post), broadcast_to(post.c, ut.shape())};
    u = affine_inverse(Tensor::from_matrix(noises[T - k + 1]), cp).to_matrix();
  }
  return u;
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
  if (!(cfg_dropout >= 0.0 && cfg_dropout <= 1.0)) throw std::invalid_argument("train: cfg_dropout must be in [0, 1]");
  if (!(lambda0 >= 0.0)) throw std::invalid_argument("train: lambda must be >= 0");
  if (!(t_min_lo >= 0.0 && t_min_lo <= t_min_hi && t_min_hi <= 0.05))
    throw std::invalid_argument("train: t_min range must satisfy 0 <= lo <= hi <= 0.05");
  if (batch < 1) throw std::invalid_argument("train: batch must be >= 1");
}

double aux_weight(double lambda0, std::size_t step, std::size_t total) {
  if (total == 0) return 0.0;
  const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return 0.5 * lambda0 * (1.0 + std::cos(std::numbers::pi * progress));
}

Tensor aux_loss(const Tensor& mu_p, const Tensor& mu_fm) { return mean(square(sub(mu_p, mu_fm))); }

Condition apply_cfg_dropout(const Condition& y, double p, Rng& rng) {
  if (p <= 0.0) return y;
  Condition out = y;
  const std::size_t n = y.rows();
  out.null_rows.assign(n, 0);
  for (std::size_t i = 0; i < y.null_rows.size() && i < n; ++i) out.null_rows[i] = y.null_rows[i];
  std::bernoulli_distribution drop(p);
  for (std::size_t i = 0; i < n; ++i)
    if (drop(rng)) out.null_rows[i] = 1;
  return out;
}

namespace {

// Per-example step count and t_min.
struct ExampleDraws {
  std::vector<std::size_t> steps;
  std::vector<double> t_min;
};

ExampleDraws draw_examples(const NtmModel& model, std::size_t n, const TrainConfig& cfg, Rng& rng) {
  const auto& set = model.config().steps;
  std::uniform_int_distribution<std::size_t> pick(0, set.size() - 1);
  std::uniform_real_distribution<double> tmin(cfg.t_min_lo, cfg.t_min_hi);
  ExampleDraws d;
  for (std::size_t i = 0; i < n; ++i) {
    d.steps.push_back(set[pick(rng)]);
    d.t_min.push_back(cfg.t_min_hi > cfg.t_min_lo ? tmin(rng) : cfg.t_min_lo);
  }
  return d;
}

std::vector<Tensor> as_constants(const std::vector<RowMatrix>& levels) {
  std::vector<Tensor> out;
  for (const auto& l : levels) out.push_back(Tensor::from_matrix(l));
  return out;
}

}  // namespace

BatchLoss endtoend_loss(const NtmModel& model, Binder& p, const RowMatrix& x0, const Condition& y,
                        const TrainConfig& cfg, Rng& rng) {
  const std::size_t n = static_cast<std::size_t>(x0.rows());
  const double d = static_cast<double>(x0.cols());
  auto draws = draw_examples(model, n, cfg, rng);
  const auto& ref = model.reference();
  Tensor nll_sum = Tensor::scalar(0.0), aux_sum = Tensor::scalar(0.0);
  double drift_sq = 0.0, drift_count = 0.0;
  for (std::size_t T : model.config().steps) {
    auto rows = rows_where(draws.steps, T);
    if (rows.empty()) continue;
    Eigen::MatrixXd times(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(T + 1));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      auto sched = model.schedule(T, draws.t_min[rows[i]]);
      for (std::size_t k = 0; k <= T; ++k)
        times(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = sched[k];
    }
    Trajectory traj = sample_trajectory(take_rows(x0, rows), times, rng);
    Condition yg = y.select(rows);
    auto tn = trajectory_nll(model.transporter(), model.predictor(), p, as_constants(traj.levels), times, yg);
    nll_sum = add(nll_sum, scale(sum(tn.conditional), 1.0 / (d * static_cast<double>(T))));
    if (ref) {
      std::vector<RowMatrix> upper(traj.levels.begin() + 1, traj.levels.end());
      RowMatrix x_t(static_cast<Eigen::Index>(rows.size() * T), x0.cols());
      for (std::size_t k = 0; k < T; ++k)
        x_t.middleRows(static_cast<Eigen::Index>(k * rows.size()), static_cast<Eigen::Index>(rows.size())) = upper[k];
      RowTimes rt = stacked_pair_times(times);
      std::vector<std::size_t> owner(rows.size() * T);
      for (std::size_t i = 0; i < owner.size(); ++i) owner[i] = i % rows.size();
      Tensor mu_fm = Tensor::from_matrix(reference_posterior_mean(*ref, x_t, rt, yg.select(owner)));
      Tensor sq = sum(square(sub(tn.factors.params.mu, mu_fm)));
      aux_sum = add(aux_sum, scale(sq, 1.0 / (d * static_cast<double>(T))));
      drift_sq += sq.item();
      drift_count += static_cast<double>(x_t.size());
    }
  }
  BatchLoss out;
  out.nll = scale(nll_sum, 1.0 / static_cast<double>(n));
  if (ref) {
    out.aux = scale(aux_sum, 1.0 / static_cast<double>(n));
    out.mu_drift = std::sqrt(drift_sq / drift_count);
  }
  return out;
}

BatchLoss pairwise_loss(const NtmModel& model, Binder& p, const RowMatrix& x0, const Condition& y,
                        const TrainConfig& cfg, Rng& rng) {
  const auto n = x0.rows();
  const double d = static_cast<double>(x0.cols());
  auto draws = draw_examples(model, static_cast<std::size_t>(n), cfg, rng);
  RowTimes rt;
  rt.t.resize(n);
  rt.s.resize(n);
  rt.steps.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const std::size_t T = draws.steps[static_cast<std::size_t>(i)];
    auto sched = model.schedule(T, draws.t_min[static_cast<std::size_t>(i)]);
    std::uniform_int_distribution<std::size_t> pick(1, T);
    const std::size_t k = pick(rng);
    rt.t[i] = sched[k];
    rt.s[i] = sched[k - 1];
    rt.steps[i] = static_cast<double>(T);
  }
  // Marginal at s, then one forward transition; same law as a full trajectory.
  RowMatrix e1 = standard_normal(n, x0.cols(), rng), e2 = standard_normal(n, x0.cols(), rng);
  RowMatrix x_s(n, x0.cols()), x_t(n, x0.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    x_s.row(i) = (1.0 - rt.s[i]) * x0.row(i) + rt.s[i] * e1.row(i);
    const auto c = forward_coeffs(rt.s[i], rt.t[i]);
    x_t.row(i) = c.alpha * x_s.row(i) + c.sigma * e2.row(i);
  }
  auto f = factor_terms(model.transporter(), model.predictor(), p, Tensor::from_matrix(x_s),
                        Tensor::from_matrix(x_t), rt, y);
  BatchLoss out;
  out.nll = scale(mean(f.nll), 1.0 / d);
  if (const auto& ref = model.reference()) {
    Tensor mu_fm = Tensor::from_matrix(reference_posterior_mean(*ref, x_t, rt, y));
    out.aux = aux_loss(f.params.mu, mu_fm);
    out.mu_drift = std::sqrt(out.aux.item());
  }
  return out;
}

TrainState make_train_state(const NtmModel& model, const TrainConfig& cfg) {
  return {AdamW(model.params(), cfg.optim), 0, Rng(cfg.seed)};
}

TrainMetrics train_step(NtmModel& model, TrainState& state, const RowMatrix& x0, const Condition& y,
                        const TrainConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  TrainMetrics m;
  m.step = state.step;
  Condition yd = apply_cfg_dropout(y, cfg.cfg_dropout, state.rng);
  Tape tape;
  Binder p(model.params(), true);
  BatchLoss bl = cfg.mode == TrainMode::end_to_end ? endtoend_loss(model, p, x0, yd, cfg, state.rng)
                                                   : pairwise_loss(model, p, x0, yd, cfg, state.rng);
  m.lambda = model.reference() ? aux_weight(cfg.lambda0, state.step, cfg.iterations) : 0.0;
  Tensor total = bl.nll;
  if (bl.aux.defined()) {
    m.aux = bl.aux.item();
    if (m.lambda > 0.0) total = add(total, scale(bl.aux, m.lambda));
  }
  m.nll = bl.nll.item();
  m.total = total.item();
  m.mu_drift = bl.mu_drift;
  if (!finite(m.total)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << state.step << ": nll=" << m.nll << " aux=" << m.aux
        << " lambda=" << m.lambda << "; parameter norms:";
    for (std::size_t i = 0; i < model.params().size(); ++i)
      msg << "\n  " << model.params().name(i) << " " << model.params().value(i).norm();
    throw TrainingDiverged(msg.str());
  }
  auto grads = p.gradients(total);
  m.lr = learning_rate(cfg.optim, state.step, cfg.iterations);
  m.grad_norm = state.optimizer.step(model.params(), std::move(grads), m.lr);
  ++state.step;
  m.wall_ms = elapsed_ms(start);
  return m;
}

FmTrainState make_fm_train_state(const FlowMatchModel& model, const TrainConfig& cfg) {
  return {AdamW(model.params(), cfg.optim), 0, Rng(cfg.seed)};
}

Tensor fm_loss(const FlowMatchModel& model, Binder& p, const RowMatrix& x0, const Condition& y, Rng& rng) {
  const auto n = x0.rows();
  std::uniform_real_distribution<double> ut(0.0, 1.0);
  Eigen::VectorXd t(n);
  for (Eigen::Index i = 0; i < n; ++i) t[i] = ut(rng);
  RowMatrix eps = standard_normal(n, x0.cols(), rng);
  RowMatrix x_t(n, x0.cols());
  for (Eigen::Index i = 0; i < n; ++i) x_t.row(i) = (1.0 - t[i]) * x0.row(i) + t[i] * eps.row(i);
  Tensor v = model.net()(p, Tensor::from_matrix(x_t), t, y).out;
  return mean(square(sub(v, Tensor::from_matrix(eps - x0))));
}

FmMetrics fm_train_step(FlowMatchModel& model, FmTrainState& state, const RowMatrix& x0, const Condition& y,
                        const TrainConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  FmMetrics m;
  m.step = state.step;
  Condition yd = apply_cfg_dropout(y, cfg.cfg_dropout, state.rng);
  Tape tape;
  Binder p(model.params(), true);
  Tensor loss = fm_loss(model, p, x0, yd, state.rng);
  m.loss = loss.item();
  if (!finite(m.loss)) throw TrainingDiverged("non-finite flow-matching loss at step " + std::to_string(state.step));
  auto grads = p.gradients(loss);
  m.lr = learning_rate(cfg.optim, state.step, cfg.iterations);
  state.optimizer.step(model.params(), std::move(grads), m.lr);
  ++state.step;
  m.wall_ms = elapsed_ms(start);
  return m;
}

RowMatrix fm_integrate(const FlowMatchModel& model, RowMatrix x, const Condition& y, std::size_t steps, double w) {
  if (steps < 1) throw std::invalid_argument("fm_sample: steps must be >= 1");
  const double dt = 1.0 / static_cast<double>(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    const double t = 1.0 - static_cast<double>(i) * dt;
    x -= dt * model.guided_velocity(x, Eigen::VectorXd::Constant(x.rows(), t), y, w);
  }
  return x;
}

RowMatrix fm_sample(const FlowMatchModel& model, const Condition& y, std::size_t steps, Rng& rng, double w) {
  RowMatrix x = standard_normal(static_cast<Eigen::Index>(y.rows()), static_cast<Eigen::Index>(model.config().dim), rng);
  return fm_integrate(model, std::move(x), y, steps, w);
}

}  // namespace trajflow
