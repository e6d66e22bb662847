#pragma once

// Model assembly and training: the flow-matching baseline, the trajectory
// model (from scratch or finetuned from a flow-matching checkpoint), the
// optimizer, and one-step training routines.

#include "trajflow/flow.hpp"
#include "trajflow/nn.hpp"
#include "trajflow/schedule.hpp"

#include <Eigen/Dense>

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace trajflow {

// ---------------------------------------------------------------------------
// Flow matching

struct FlowMatchConfig {
  std::size_t dim = 2;
  std::size_t hidden = 128;
  std::size_t layers = 4;
  std::size_t embed = 32;
  ConditionSpec condition;
};

class FlowMatchModel {
 public:
  static FlowMatchModel make(const FlowMatchConfig& cfg, std::uint64_t seed);

  const FlowMatchConfig& config() const { return cfg_; }
  const VelocityNet& net() const { return net_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// v(x, t, y) without gradient tracking.
  RowMatrix velocity(const RowMatrix& x, const Eigen::VectorXd& t, const Condition& y) const;
  /// Velocity with classifier-free guidance: (1 + w) v_c - w v_u.
  RowMatrix guided_velocity(const RowMatrix& x, const Eigen::VectorXd& t, const Condition& y,
                            double w) const;

 private:
  FlowMatchConfig cfg_;
  ParamStore params_;
  VelocityNet net_;
};

// ---------------------------------------------------------------------------
// Optimizer

struct OptimConfig {
  double lr = 3e-4;
  double min_lr = 1e-6;
  std::size_t warmup = 200;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;  // 0 disables
};

/// Linear warmup to `lr`, then cosine decay to `min_lr` at `total` steps.
double learning_rate(const OptimConfig& cfg, std::size_t step, std::size_t total);

/// Decoupled weight decay Adam.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const ParamStore& store, OptimConfig cfg);

  /// Applies one update in place and returns the pre-clip gradient norm.
  double step(ParamStore& store, std::vector<Eigen::VectorXd> grads, double lr);
  std::size_t steps_taken() const { return t_; }
  const OptimConfig& config() const { return cfg_; }
  /// Parameters that never change (e.g. a frozen reference) can be excluded.
  void freeze(std::size_t index) { frozen_.at(index) = 1; }

 private:
  OptimConfig cfg_;
  std::vector<Eigen::VectorXd> m_, v_;
  std::vector<char> frozen_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Trajectory model

enum class PredictorKind { mlp, posterior, linear_gaussian };

struct NtmConfig {
  TransporterConfig transporter;
  PredictorConfig predictor;
  PredictorKind predictor_kind = PredictorKind::mlp;
  /// Allowed trajectory step counts.
  std::vector<std::size_t> steps{4};
  /// t_min used when sampling.
  double sample_t_min = 0.02;
  /// Resolution shift of the interior grid; seq_len 0 means `positions`.
  bool shift = true;
  std::size_t shift_seq_len = 0;
  /// Parameters of the exact predictor for i.i.d. Gaussian data.
  double gaussian_mean = 0.0;
  double gaussian_variance = 1.0;

  std::size_t dim() const { return transporter.dim(); }
  void validate() const;
};

class NtmModel {
 public:
  static NtmModel make(const NtmConfig& cfg, std::uint64_t seed);

  const NtmConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const Transporter& transporter() const { return transporter_; }
  const Predictor& predictor() const { return predictor_; }

  bool allows(std::size_t steps) const;
  /// Grid for T steps with the given t_min, shifted when enabled.
  TimeSchedule schedule(std::size_t steps, double t_min) const;
  TimeSchedule sampling_schedule(std::size_t steps) const { return schedule(steps, cfg_.sample_t_min); }

  /// Frozen flow-matching reference kept by the finetune path.
  const std::optional<FlowMatchModel>& reference() const { return reference_; }

  /// Exact trajectory NLL, including the top-level prior, evaluated without
  /// gradient tracking. Throws std::invalid_argument when the trajectory does
  /// not use an allowed step count.
  TrajectoryNll nll(const Trajectory& trajectory, const Condition& y) const;

  friend NtmModel finetune_init(const FlowMatchModel& fm, NtmConfig cfg, std::uint64_t seed);

 private:
  NtmConfig cfg_;
  ParamStore params_;
  Transporter transporter_;
  Predictor predictor_;
  std::optional<FlowMatchModel> reference_;
};

/// Identity transporter plus a posterior predictor whose backbone is a copy
/// of `fm`'s velocity network; keeps a frozen copy of `fm` as the reference.
NtmModel finetune_init(const FlowMatchModel& fm, NtmConfig cfg, std::uint64_t seed);

/// Frozen flow-matching posterior mean from x_t for each (t, s) row.
RowMatrix reference_posterior_mean(const FlowMatchModel& fm, const RowMatrix& x_t, const RowTimes& times,
                                   const Condition& y);

/// Ancestral sampling with the Gaussian posterior implied by a flow-matching
/// model. `noises` holds the top-level draw followed by one draw per step from
/// the noisiest step down; each is [rows, dim]. Returns the t_0 level.
RowMatrix fm_posterior_sample(const FlowMatchModel& fm, const TimeSchedule& schedule,
                              const Condition& y, const std::vector<RowMatrix>& noises);

// ---------------------------------------------------------------------------
// Training

enum class TrainMode { end_to_end, pairwise };

struct TrainConfig {
  TrainMode mode = TrainMode::end_to_end;
  OptimConfig optim;
  std::size_t batch = 256;
  std::size_t iterations = 20000;
  double cfg_dropout = 0.1;
  /// Auxiliary mean-alignment weight at step 0, cosine-annealed to 0.
  double lambda0 = 2.5;
  double t_min_lo = 0.0;
  double t_min_hi = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Cosine decay from lambda0 at step 0 to 0 at `total`.
double aux_weight(double lambda0, std::size_t step, std::size_t total);

/// Mean squared difference.
Tensor aux_loss(const Tensor& mu_p, const Tensor& mu_fm);

/// Replaces each row's condition with the null condition with probability p.
Condition apply_cfg_dropout(const Condition& y, double p, Rng& rng);

struct BatchLoss {
  Tensor nll;    // scalar: batch mean of NLL / (dim * factors)
  Tensor aux;    // scalar, undefined without a reference model
  double mu_drift = 0.0;  // RMS of mu_P - mu_FM, 0 without a reference
};

/// Whole-trajectory objective: every example draws T from the allowed set and
/// its own t_min, and all T conditional factors are scored.
BatchLoss endtoend_loss(const NtmModel& model, Binder& p, const RowMatrix& x0, const Condition& y,
                        const TrainConfig& cfg, Rng& rng);
/// One uniformly chosen consecutive pair per example.
BatchLoss pairwise_loss(const NtmModel& model, Binder& p, const RowMatrix& x0, const Condition& y,
                        const TrainConfig& cfg, Rng& rng);

struct TrainMetrics {
  std::size_t step = 0;
  double nll = 0, aux = 0, total = 0, lambda = 0, grad_norm = 0, lr = 0, wall_ms = 0, mu_drift = 0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Persistent state of a training run.
struct TrainState {
  AdamW optimizer;
  std::size_t step = 0;
  Rng rng;
};

TrainState make_train_state(const NtmModel& model, const TrainConfig& cfg);
/// One optimizer update. Throws TrainingDiverged on a non-finite loss.
TrainMetrics train_step(NtmModel& model, TrainState& state, const RowMatrix& x0, const Condition& y,
                        const TrainConfig& cfg);

struct FmMetrics {
  std::size_t step = 0;
  double loss = 0, lr = 0, wall_ms = 0;
};

struct FmTrainState {
  AdamW optimizer;
  std::size_t step = 0;
  Rng rng;
};

FmTrainState make_fm_train_state(const FlowMatchModel& model, const TrainConfig& cfg);
/// Flow-matching loss: mean over elements of (v(x_t, t) - (eps - x0))^2, t ~ U(0, 1).
Tensor fm_loss(const FlowMatchModel& model, Binder& p, const RowMatrix& x0, const Condition& y, Rng& rng);
FmMetrics fm_train_step(FlowMatchModel& model, FmTrainState& state, const RowMatrix& x0,
                        const Condition& y, const TrainConfig& cfg);

/// Euler integration of dx = v dt from t = 1 to 0 on a uniform grid.
RowMatrix fm_sample(const FlowMatchModel& model, const Condition& y, std::size_t steps, Rng& rng,
                    double w = 0.0);
/// Same, starting from the given noise.
RowMatrix fm_integrate(const FlowMatchModel& model, RowMatrix x, const Condition& y, std::size_t steps,
                       double w = 0.0);

}  // namespace trajflow
