#pragma once

// Property suites run by `trajflow verify`: Monte Carlo checks of the forward
// process, flow invertibility and normalization, gradient checks and the
// closed-form Gaussian oracles.

#include "trajflow/tensor.hpp"

#include <functional>
#include <string>
#include <string_view>
#include <vector>

namespace trajflow {

struct Check {
  std::string suite;
  std::string name;
  double value = 0.0;
  double threshold = 0.0;
  bool at_least = false;  // value >= threshold instead of value <= threshold
  bool pass = false;
};

using Report = std::vector<Check>;

/// Scalar-valued function of several tensors, rebuilt on every call.
using GradFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheck {
  double max_rel = 0.0;
  double max_abs = 0.0;
};

/// Reverse-mode gradients against central differences with step h. Relative
/// error is |a - f| / max(|a|, |f|, 1).
GradCheck check_gradients(const GradFn& f, const std::vector<Tensor>& inputs, double h = 1e-5);

Report verify_schedule();
Report verify_flow();
Report verify_gradients();
Report verify_oracle();

const std::vector<std::string>& suite_names();
/// One suite by name, or every suite for "all". Throws std::invalid_argument
/// for unknown names.
Report run_suite(std::string_view name);

bool all_passed(const Report& r);
/// Aligned table, one line per check.
std::string format_report(const Report& r);

}  // namespace trajflow
