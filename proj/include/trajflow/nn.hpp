#pragma once

// Parameter storage and the small set of layers the models are built from.
//
// Layers refer to parameters by index into a ParamStore, so a model holding
// both can be copied by value (the finetune path keeps a frozen copy).

#include "trajflow/ops.hpp"
#include "trajflow/tensor.hpp"

#include <Eigen/Dense>

#include <random>
#include <string>
#include <vector>

namespace trajflow {

using Rng = std::mt19937_64;

RowMatrix standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng);

class ParamStore {
 public:
  std::size_t add(std::string name, Shape shape, Eigen::VectorXd init);
  std::size_t size() const { return names_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  const Shape& shape(std::size_t i) const { return shapes_.at(i); }
  const Eigen::VectorXd& value(std::size_t i) const { return values_.at(i); }
  Eigen::VectorXd& value(std::size_t i) { return values_.at(i); }
  /// Index of a named parameter; throws std::out_of_range when absent.
  std::size_t find(const std::string& name) const;
  std::size_t scalar_count() const;

 private:
  std::vector<std::string> names_;
  std::vector<Shape> shapes_;
  std::vector<Eigen::VectorXd> values_;
};

/// Materializes parameters as tensors for one forward evaluation. With
/// `track` set, each parameter becomes a leaf on the active tape.
class Binder {
 public:
  Binder(const ParamStore& store, bool track);
  Tensor operator()(std::size_t index);
  bool tracking() const { return track_; }
  /// Gradient of `loss` for every parameter of the store, zeros where unused.
  std::vector<Eigen::VectorXd> gradients(const Tensor& loss);

 private:
  const ParamStore& store_;
  bool track_;
  std::vector<Tensor> bound_;
};

struct Linear {
  std::size_t weight = 0;  // [in, out]
  std::size_t bias = 0;    // [out]
  std::size_t in = 0, out = 0;

  static Linear make(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                     Rng& rng, bool zero_init = false);
  Tensor operator()(Binder& p, const Tensor& x) const;
};

/// Linear layer whose weight is multiplied by a fixed 0/1 connectivity mask.
struct MaskedLinear {
  Linear linear;
  RowMatrix mask;  // [in, out]

  Tensor operator()(Binder& p, const Tensor& x) const;
};

/// Sinusoidal features of per-row scalars: [rows] -> [rows, width]. Angles
/// are scale * value * 10000^(-k / (width/2)).
RowMatrix sinusoidal_embedding(const Eigen::VectorXd& values, std::size_t width,
                               double scale = 1000.0);

/// Stack of GELU layers with an additive conditioning input on the first
/// layer and a linear output head. The head starts at zero when requested.
struct ConditionedMlp {
  Linear input;
  std::vector<Linear> hidden;
  Linear head;

  static ConditionedMlp make(ParamStore& store, const std::string& name, std::size_t in,
                             std::size_t width, std::size_t layers, std::size_t out, Rng& rng,
                             bool zero_head);
  struct Output {
    Tensor out;
    Tensor features;  // last hidden activation
  };
  /// `cond` is [rows, width] or undefined.
  Output operator()(Binder& p, const Tensor& x, const Tensor& cond) const;
};

enum class ConditionKind { none, label, vector };

struct ConditionSpec {
  ConditionKind kind = ConditionKind::none;
  std::size_t classes = 0;  // label
  std::size_t dim = 0;      // vector
};

/// Per-row conditioning. A label of -1 (or a `null_rows` flag) selects the
/// learned null embedding used for classifier-free guidance.
struct Condition {
  std::vector<int> labels;
  RowMatrix vectors;
  std::vector<char> null_rows;

  static Condition none(std::size_t rows);
  static Condition from_labels(std::vector<int> labels);
  std::size_t rows() const;
  bool is_null(std::size_t row) const;
  Condition select(const std::vector<std::size_t>& rows) const;
  Condition nulled() const;
};

/// Maps a Condition to an additive hidden-width embedding.
struct ConditionEmbedding {
  ConditionSpec spec;
  std::size_t table = 0;  // label: [classes + 1, width]; last row is null
  Linear project;         // vector
  std::size_t null_vec = 0;
  std::size_t width = 0;

  static ConditionEmbedding make(ParamStore& store, const std::string& name, ConditionSpec spec,
                                 std::size_t width, Rng& rng);
  /// Returns an undefined tensor when the spec is `none`.
  Tensor operator()(Binder& p, const Condition& c) const;
};

}  // namespace trajflow
