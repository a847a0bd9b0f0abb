#include "metaforge/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "metaforge/errors.hpp"

namespace metaforge {
namespace {

double evaluate(const TapedObjective& f, const ParamSet& params) {
  Tape tape;
  ParamVars vars(tape, params, false);
  return f(tape, vars).value().item();
}

}  // namespace

FdCheckResult fd_check_detailed(const TapedObjective& f, const ParamSet& params, double step) {
  if (!(step > 0.0)) throw ContractViolation("fd_check: step must be positive");

  Tape tape;
  ParamVars vars(tape, params);
  const Var loss = f(tape, vars);
  const double base = loss.value().item();
  const ParamSet analytic = vars.gradients(tape.backward(loss));

  const double again = evaluate(f, params);
  if (again != base) {
    throw OracleInvalid("fd_check: objective is not deterministic (" + std::to_string(base) + " vs " +
                        std::to_string(again) + ")");
  }

  FdCheckResult result;
  ParamSet probe = params;
  for (std::size_t p = 0; p < probe.size(); ++p) {
    auto values = probe[p].value.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = evaluate(f, probe);
      values[i] = saved - step;
      const double down = evaluate(f, probe);
      values[i] = saved;

      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[p].value[i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      if (err > result.max_rel_error || (p == 0 && i == 0)) {
        result.max_rel_error = std::max(result.max_rel_error, err);
        result.worst_param = probe[p].name;
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace metaforge
