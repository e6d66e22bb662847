#pragma once

#include "trajflow/verify.hpp"

namespace testing {

using Fn = trajflow::GradFn;
using trajflow::check_gradients;

}  // namespace testing
