#pragma once

// Few-step ancestral sampling, guidance on coupling parameters, trajectory
// score denoising and the distilled one-pass denoiser.

#include "trajflow/flow.hpp"
#include "trajflow/model.hpp"
#include "trajflow/nn.hpp"
#include "trajflow/schedule.hpp"

#include <Eigen/Dense>

#include <vector>

namespace trajflow {

/// Closed-form guidance on Gaussian coupling parameters:
///   r = clip((sigma_c / sigma_u)^2, 0, 1)
///   sigma = sigma_c / sqrt(1 + w - w r)
///   mu = ((1 + w) mu_c - w r mu_u) / (1 + w - w r)
CouplingParams cfg_combine(const Tensor& mu_c, const Tensor& sigma_c, const Tensor& mu_u, const Tensor& sigma_u,
                           double w);

enum class DenoiseMode { none, score, learned };

struct SampleRequest {
  Condition y;  // one row per sample
  double guidance = 0.0;
  std::size_t steps = 4;
  /// Map every generated level back to x-space (needed for score denoising).
  bool full_trajectory = false;
  /// false leaves `x` empty and skips the final transporter inverse; the
  /// learned denoiser works from u_{t_0} directly.
  bool decode = true;
};

struct SampleResult {
  RowMatrix x;                     // final sample at t_0, x-space (empty unless decoded)
  std::vector<RowMatrix> u_levels; // u_{t_0} .. u_{t_T}
  Trajectory trajectory;           // x-space levels, filled when requested
};

/// Draws the top-level noise and one noise per step from `rng`.
SampleResult sample(const NtmModel& model, const SampleRequest& req, Rng& rng);
/// `noises` holds the top-level draw followed by one draw per step, noisiest first.
SampleResult sample_with_noise(const NtmModel& model, const SampleRequest& req,
                               const std::vector<RowMatrix>& noises);

enum class CovarianceMode { joint, diagonal };

struct DenoiseOptions {
  CovarianceMode covariance = CovarianceMode::joint;
  /// |g| is clamped at this percentile per trajectory; values >= 100 disable.
  double clip_percentile = 99.0;
};

struct DenoisedTrajectory {
  RowMatrix x0;                    // read at the t_0 level
  std::vector<RowMatrix> levels;   // every level below the top
  std::vector<RowMatrix> gradient; // d NLL / d x per level, after clipping
};

/// x_den = (x - S g) / (1 - t) per level, with g the gradient of the exact
/// trajectory NLL and S the trajectory covariance (or its diagonal).
DenoisedTrajectory score_denoise(const NtmModel& model, const Trajectory& trajectory, const Condition& y,
                                 const DenoiseOptions& opts = {});

struct DenoiserConfig {
  std::size_t positions = 2;
  std::size_t channels = 1;
  std::size_t hidden = 64;
  std::size_t layers = 2;
  ConditionSpec condition;

  std::size_t dim() const { return positions * channels; }
};

/// Position-wise MLP with one global mixing layer and a zero-initialized
/// residual head, so a fresh denoiser copies its input through.
class Denoiser {
 public:
  static Denoiser make(const DenoiserConfig& cfg, std::uint64_t seed);

  const DenoiserConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  Tensor forward(Binder& p, const Tensor& u_t0, const Condition& y) const;
  /// Single evaluation without gradient tracking.
  RowMatrix apply(const RowMatrix& u_t0, const Condition& y) const;

 private:
  DenoiserConfig cfg_;
  ParamStore params_;
  Linear token_in, mix, head;
  std::vector<Linear> hidden_;
  std::size_t pos_embed_ = 0;
  ConditionEmbedding cond_;
};

inline RowMatrix denoiser_apply(const RowMatrix& u_t0, const Condition& y, const Denoiser& d) {
  return d.apply(u_t0, y);
}

/// Distillation pairs built from real-data trajectories on the model's
/// sampling schedule: input u_{t_0}, target the score-denoised t_0 output.
struct DenoiserBatch {
  RowMatrix u_t0;
  RowMatrix target;
  Condition y;
};
DenoiserBatch make_denoiser_batch(const NtmModel& model, const RowMatrix& x0, const Condition& y,
                                  std::size_t steps, const DenoiseOptions& opts, Rng& rng);

struct DenoiserState {
  AdamW optimizer;
  std::size_t step = 0;
};

/// Mean squared error of g(u_{t_0}, y) against the target, one optimizer update.
double denoiser_train_step(Denoiser& d, DenoiserState& state, const DenoiserBatch& batch, double lr);

}  // namespace trajflow
