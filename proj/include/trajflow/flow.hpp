#pragma once

// Invertible pieces of the trajectory model.
//
//   x_s --transporter--> u_s --predictor coupling (given u_t)--> z ~ N(0, I)
//
// The transporter is a stack of autoregressive affine blocks over positions
// with alternating scan direction; the predictor is a Gaussian affine coupling
// whose shift and scale are functions of the noisier level u_t only. Data
// rows are laid out as [rows, positions * channels], position-major.

#include "trajflow/nn.hpp"
#include "trajflow/schedule.hpp"
#include "trajflow/tensor.hpp"

#include <Eigen/Dense>

#include <optional>
#include <variant>
#include <vector>

namespace trajflow {

/// Raw scale outputs are clamped to this range before exponentiation.
inline constexpr double kLogScaleBound = 7.0;

struct CouplingParams {
  Tensor mu;
  Tensor sigma;  // strictly positive
};

struct AffineForward {
  Tensor z;
  Tensor logdet;  // [rows]: -sum log sigma
};

/// z = (x - mu)/sigma. Throws std::logic_error on nonpositive sigma.
AffineForward affine_forward(const Tensor& x, const CouplingParams& p);
/// x = z * sigma + mu.
Tensor affine_inverse(const Tensor& z, const CouplingParams& p);

/// sigma = exp(clamp(raw, -7, 7)).
Tensor positive_scale(const Tensor& raw);

/// Per-row conditioning shared by transporter and predictor evaluations.
struct RowTimes {
  Eigen::VectorXd t;      // noise level of the rows being transported / predicted from
  Eigen::VectorXd s;      // target level (predictor only)
  Eigen::VectorXd steps;  // trajectory step count T of each row

  std::size_t rows() const { return static_cast<std::size_t>(t.size()); }
  RowTimes select(const std::vector<std::size_t>& rows) const;
  static RowTimes concat(const RowTimes& a, const RowTimes& b);
};

enum class ScanOrder { forward, reversed };
enum class TransporterArch { made, attention };

struct TransporterConfig {
  std::size_t positions = 2;
  std::size_t channels = 1;
  std::size_t blocks = 2;
  std::size_t hidden = 64;
  std::size_t layers = 2;
  std::size_t embed = 32;
  bool condition_on_steps = false;
  /// Rows with t >= skip_threshold pass through unchanged.
  double skip_threshold = 1.0;
  TransporterArch arch = TransporterArch::made;

  std::size_t dim() const { return positions * channels; }
};

/// One autoregressive block. The (mu, sigma) of position n depend only on
/// positions strictly before n in the block's scan order.
struct TransporterBlock {
  ScanOrder order = ScanOrder::forward;
  // Shared by both architectures.
  Linear time_proj;
  std::optional<Linear> steps_proj;
  // made
  std::vector<MaskedLinear> layers;
  MaskedLinear head;  // [hidden, 2 * dim]: mu then raw scale
  // attention
  Linear token_in, query, key, value, mlp_in, mlp_out, token_head;
  std::size_t start_token = 0, pos_embed = 0;
};

class Transporter {
 public:
  static Transporter make(ParamStore& store, const std::string& name, const TransporterConfig& cfg,
                          Rng& rng);

  const TransporterConfig& config() const { return cfg_; }
  std::size_t block_count() const { return blocks_.size(); }
  const TransporterBlock& block(std::size_t i) const { return blocks_.at(i); }

  struct Output {
    Tensor u;
    Tensor logdet;  // [rows]: sum over blocks and positions of -log sigma
  };
  Output forward(Binder& p, const Tensor& x, const RowTimes& times) const;
  /// Sequential decoding, one position per network evaluation, blocks in
  /// reverse order. `network_evals`, when given, receives the number of
  /// network evaluations performed.
  RowMatrix inverse(Binder& p, const RowMatrix& u, const RowTimes& times,
                    std::size_t* network_evals = nullptr) const;

  /// One block, exposed for causality probes.
  Output block_forward(Binder& p, std::size_t block, const Tensor& x, const RowTimes& times) const;
  RowMatrix block_inverse(Binder& p, std::size_t block, const RowMatrix& u, const RowTimes& times,
                          std::size_t* network_evals = nullptr) const;

 private:
  struct TimeFeatures {
    Tensor t, steps;  // sinusoidal embeddings shared by every block
  };
  TimeFeatures time_features(const RowTimes& times) const;
  Output block_forward(Binder& p, std::size_t block, const Tensor& x, const RowTimes& times,
                       const TimeFeatures& f) const;
  RowMatrix block_inverse(Binder& p, std::size_t block, const RowMatrix& u, const RowTimes& times,
                          const TimeFeatures& f, std::size_t* network_evals) const;
  CouplingParams block_params(Binder& p, std::size_t block, const Tensor& x, const Tensor& cond,
                              const RowTimes& times) const;
  Tensor conditioning(Binder& p, const TransporterBlock& b, const TimeFeatures& f) const;
  Tensor keep_mask(const RowTimes& times) const;  // [rows, 1], 0 on skipped rows

  TransporterConfig cfg_;
  std::vector<TransporterBlock> blocks_;
  std::vector<std::size_t> degree_;  // per input unit, forward scan order
};

struct PredictorConfig {
  std::size_t dim = 2;
  std::size_t hidden = 128;
  std::size_t layers = 4;
  std::size_t embed = 32;
  bool condition_on_steps = false;
  ConditionSpec condition;
};

/// From-scratch predictor: MLP on u_t with additive (t, s, T, y) embeddings.
struct MlpPredictor {
  PredictorConfig cfg;
  ConditionedMlp net;
  Linear t_proj, s_proj;
  std::optional<Linear> steps_proj;
  ConditionEmbedding cond;

  static MlpPredictor make(ParamStore& store, const std::string& name, const PredictorConfig& cfg,
                           Rng& rng);
  CouplingParams params(Binder& p, const Tensor& u_t, const RowTimes& times,
                        const Condition& y) const;
};

/// Velocity regression network v(x_t, t, y) with its last hidden features.
struct VelocityNet {
  std::size_t dim = 2;
  std::size_t embed = 32;
  ConditionedMlp net;
  Linear t_proj;
  ConditionEmbedding cond;

  static VelocityNet make(ParamStore& store, const std::string& name, std::size_t dim,
                          std::size_t hidden, std::size_t layers, std::size_t embed,
                          ConditionSpec condition, Rng& rng);
  ConditionedMlp::Output operator()(Binder& p, const Tensor& x, const Eigen::VectorXd& t,
                                    const Condition& y) const;
};

/// Posterior coefficients laid out per row as [rows, 1] tensors.
struct RowPosterior {
  Tensor a, b, c, t;
};
/// Coefficients for each row's (t, s); c is floored at exp(-7) so the
/// Gaussian stays proper when s is at or near zero.
RowPosterior row_posterior(const RowTimes& times);
/// mu_post = a u_t + b (u_t - t v).
Tensor posterior_mean(const Tensor& u_t, const Tensor& v, const RowPosterior& post);

/// Finetune predictor: mu = posterior mean from a velocity backbone evaluated
/// on u_t, sigma = posterior std * exp(delta) with delta from a zero-initialized
/// projection of the backbone's last hidden features.
struct PosteriorPredictor {
  VelocityNet backbone;
  Linear proj_out;

  CouplingParams params(Binder& p, const Tensor& u_t, const RowTimes& times,
                        const Condition& y) const;
  /// Also returns the residual log-scale delta.
  CouplingParams params(Binder& p, const Tensor& u_t, const RowTimes& times, const Condition& y,
                        Tensor* delta) const;
};

/// Exact reverse conditional p(x_s | x_t) of the forward process applied to
/// i.i.d. N(mean, variance) coordinates. Has no trainable parameters.
struct LinearGaussianPredictor {
  double mean = 0.0;
  double variance = 1.0;

  CouplingParams params(const Tensor& u_t, const RowTimes& times) const;
};

using Predictor = std::variant<MlpPredictor, PosteriorPredictor, LinearGaussianPredictor>;

CouplingParams predictor_params(const Predictor& predictor, Binder& p, const Tensor& u_t,
                                const RowTimes& times, const Condition& y);

/// Per-row terms of -log p(x_s | x_t) for a batch of (x_s, x_t) pairs.
struct FactorTerms {
  Tensor nll;             // [rows], includes (D/2) log 2 pi
  Tensor half_sq_norm;    // [rows]: 0.5 |z|^2
  Tensor predictor_logsig;    // [rows]: sum log sigma_P
  Tensor transporter_logsig;  // [rows]: sum over blocks of log sigma_T at x_s
  CouplingParams params;  // predictor params in u-space
  Tensor u_s, u_t;
};

FactorTerms factor_terms(const Transporter& transporter, const Predictor& predictor, Binder& p,
                         const Tensor& x_s, const Tensor& x_t, const RowTimes& times,
                         const Condition& y);

struct TrajectoryNll {
  Tensor total;        // scalar: sum over the batch
  Tensor per_element;  // [batch]: conditional factors + top-level prior
  Tensor conditional;  // [batch]: sum of the T factors
  Tensor prior;        // [batch]: standard normal NLL of the top level
  RowMatrix factor_nll;         // [batch, T]; column k-1 is the factor for step k
  RowMatrix half_sq_norm;       // [batch, T]
  RowMatrix predictor_logsig;   // [batch, T]
  RowMatrix transporter_logsig; // [batch, T]
  FactorTerms factors;          // level-major rows: row (k-1) * batch + b
};

/// Row times for the T factors of a batch of trajectories, stacked
/// level-major: row (k-1) * batch + b pairs level k (t) with level k-1 (s).
RowTimes stacked_pair_times(const Eigen::MatrixXd& times);

/// Exact NLL of whole trajectories under the model. `levels` holds the T + 1
/// states [batch, dim]; they may be tracked tensors so gradients flow back to
/// the trajectory itself.
TrajectoryNll trajectory_nll(const Transporter& transporter, const Predictor& predictor, Binder& p,
                             const std::vector<Tensor>& levels, const Eigen::MatrixXd& times,
                             const Condition& y);

}  // namespace trajflow
