#pragma once

#include <cstddef>
#include <functional>
#include <string>

#include "metaforge/params.hpp"

namespace metaforge {

/// Scalar objective recorded on a tape over bound parameters.
using TapedObjective = std::function<Var(Tape&, const ParamVars&)>;

struct FdCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares reverse-mode gradients of `f` with central differences at every
/// parameter entry. Error per entry is |analytic - numeric| / max(1, |analytic|).
FdCheckResult fd_check_detailed(const TapedObjective& f, const ParamSet& params, double step);

inline double fd_check(const TapedObjective& f, const ParamSet& params, double step) {
  return fd_check_detailed(f, params, step).max_rel_error;
}

}  // namespace metaforge
