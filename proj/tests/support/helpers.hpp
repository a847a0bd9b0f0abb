#pragma once

#include <cmath>
#include <vector>

#include "metaforge/rng.hpp"
#include "metaforge/tensor.hpp"

namespace testing {

inline metaforge::Tensor random_tensor(metaforge::Shape shape, metaforge::Rng& rng, double lo = -1.0,
                                       double hi = 1.0) {
  metaforge::Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Values bounded away from zero, so piecewise-linear ops stay off their kinks
/// under a finite-difference step.
inline metaforge::Tensor random_off_zero(metaforge::Shape shape, metaforge::Rng& rng) {
  metaforge::Tensor t(std::move(shape));
  for (double& v : t.data()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.0);
  return t;
}

inline double max_abs_diff(const metaforge::Tensor& a, const metaforge::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace testing

#include <algorithm>
#include <string>

#include "metaforge/mutenc.hpp"

namespace testing {

inline std::string random_protein(std::size_t n, metaforge::Rng& rng) {
  std::string s(n, 'A');
  for (char& c : s) c = metaforge::kAminoAcids[rng.below(metaforge::kAminoAcids.size())];
  return s;
}

/// Up to `max_muts` valid substitutions at distinct positions of `seq`, sorted by position.
inline std::vector<metaforge::Mutation> random_mutations(const std::string& seq, std::size_t max_muts,
                                                         metaforge::Rng& rng) {
  const std::size_t k = std::min(seq.size(), rng.below(max_muts + 1));
  std::vector<std::size_t> positions(seq.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i + 1;
  rng.shuffle(std::span<std::size_t>(positions));
  positions.resize(k);
  std::sort(positions.begin(), positions.end());
  std::vector<metaforge::Mutation> muts;
  for (std::size_t p : positions) {
    const char orig = seq[p - 1];
    char repl = orig;
    while (repl == orig) repl = metaforge::kAminoAcids[rng.below(metaforge::kAminoAcids.size())];
    muts.push_back({orig, p, repl});
  }
  return muts;
}

}  // namespace testing
