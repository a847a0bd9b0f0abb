#pragma once

#include <span>

namespace metaforge {

double mean_of(std::span<const double> xs);

/// Population variance (divides by n).
double population_variance(std::span<const double> xs);

double mse(std::span<const double> pred, std::span<const double> truth);

/// Mean squared error divided by the population variance of `truth`.
/// Throws ContractViolation on length mismatch, fewer than 2 values, or constant truth.
double nmse(std::span<const double> pred, std::span<const double> truth);

}  // namespace metaforge
