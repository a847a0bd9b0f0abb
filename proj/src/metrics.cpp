#include "metaforge/metrics.hpp"

#include <string>

#include "metaforge/errors.hpp"

namespace metaforge {

double mean_of(std::span<const double> xs) {
  if (xs.empty()) throw ContractViolation("mean of an empty list");
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

double population_variance(std::span<const double> xs) {
  const double m = mean_of(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return s / static_cast<double>(xs.size());
}

double mse(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size() || pred.empty()) {
    throw ContractViolation("mse: lengths " + std::to_string(pred.size()) + " and " + std::to_string(truth.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return s / static_cast<double>(pred.size());
}

double nmse(std::span<const double> pred, std::span<const double> truth) {
  if (truth.size() < 2) throw ContractViolation("nmse: need at least 2 values, got " + std::to_string(truth.size()));
  const double var = population_variance(truth);
  if (!(var > 0.0)) throw ContractViolation("nmse: truth has zero variance");
  return mse(pred, truth) / var;
}

}  // namespace metaforge
