#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <vector>

#include "metaforge/tape.hpp"
#include "metaforge/tensor.hpp"

namespace metaforge {

/// Named trainable tensors in a fixed insertion order. Copies are deep, so a clone
/// can be updated without touching the original.
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor value;
  };

  void add(std::string name, Tensor value);

  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const noexcept { return entries_.size(); }
  const Entry& operator[](std::size_t i) const { return entries_[i]; }
  Entry& operator[](std::size_t i) { return entries_[i]; }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  /// Total number of scalar parameters.
  std::size_t total_count() const;

  /// Same names, same order, same shapes.
  bool same_layout(const ParamSet& other) const;

  ParamSet zeros_like() const;

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      if (a.entries_[i].name != b.entries_[i].name || !(a.entries_[i].value == b.entries_[i].value)) return false;
    }
    return true;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Global L2 norm over every entry.
double global_norm(const ParamSet& p);

/// y += a * x (layouts must match).
void axpy(ParamSet& y, double a, const ParamSet& x);

void scale_in_place(ParamSet& p, double factor);

/// Tape handles for a ParamSet, index-aligned with its entries.
class ParamVars {
 public:
  ParamVars(Tape& tape, const ParamSet& params, bool trainable = true);

  const Var& operator[](std::size_t i) const { return vars_[i]; }
  const Var& get(const std::string& name) const;
  std::size_t size() const noexcept { return vars_.size(); }

  /// Gradients from a backward pass, laid out like the bound ParamSet.
  ParamSet gradients(const Gradients& grads) const;

 private:
  const ParamSet* params_;
  std::vector<Var> vars_;
};

}  // namespace metaforge
