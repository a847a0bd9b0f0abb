#pragma once

#include <cmath>
#include <vector>

namespace testing {

// Textbook Adam in the lr_t = lr * sqrt(1 - b2^t) / (1 - b1^t) form.
struct ReferenceAdam {
  std::vector<double> m, v;
  int t = 0;

  void step(std::vector<double>& p, const std::vector<double>& g, double lr) {
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    if (m.empty()) m.assign(p.size(), 0.0), v.assign(p.size(), 0.0);
    ++t;
    const double lr_t = lr * std::sqrt(1.0 - std::pow(b2, t)) / (1.0 - std::pow(b1, t));
    const double eps_t = eps * std::sqrt(1.0 - std::pow(b2, t));
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      p[i] -= lr_t * m[i] / (std::sqrt(v[i]) + eps_t);
    }
  }
};

}  // namespace testing
