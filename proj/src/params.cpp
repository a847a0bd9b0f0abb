#include "metaforge/params.hpp"

#include <cmath>

#include "metaforge/errors.hpp"

namespace metaforge {

void ParamSet::add(std::string name, Tensor value) {
  if (index_.count(name)) throw ContractViolation("param set: duplicate name '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), std::move(value)});
}

const Tensor& ParamSet::get(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw ContractViolation("param set: no parameter named '" + name + "'");
  return entries_[it->second].value;
}

Tensor& ParamSet::get(const std::string& name) {
  return const_cast<Tensor&>(static_cast<const ParamSet&>(*this).get(name));
}

std::size_t ParamSet::total_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

bool ParamSet::same_layout(const ParamSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name != other.entries_[i].name) return false;
    if (entries_[i].value.shape() != other.entries_[i].value.shape()) return false;
  }
  return true;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (const auto& e : entries_) out.add(e.name, Tensor::zeros_like(e.value));
  return out;
}

double global_norm(const ParamSet& p) {
  double ss = 0.0;
  for (const auto& e : p) {
    for (double v : e.value.data()) ss += v * v;
  }
  return std::sqrt(ss);
}

void axpy(ParamSet& y, double a, const ParamSet& x) {
  if (!y.same_layout(x)) throw ContractViolation("axpy: parameter layouts differ");
  for (std::size_t i = 0; i < y.size(); ++i) {
    auto dst = y[i].value.data();
    auto src = x[i].value.data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += a * src[j];
  }
}

void scale_in_place(ParamSet& p, double factor) {
  for (auto& e : p) {
    for (double& v : e.value.data()) v *= factor;
  }
}

ParamVars::ParamVars(Tape& tape, const ParamSet& params, bool trainable) : params_(&params) {
  vars_.reserve(params.size());
  for (const auto& e : params) vars_.push_back(tape.leaf(e.value, trainable));
}

const Var& ParamVars::get(const std::string& name) const {
  for (std::size_t i = 0; i < params_->size(); ++i) {
    if ((*params_)[i].name == name) return vars_[i];
  }
  throw ContractViolation("param vars: no parameter named '" + name + "'");
}

ParamSet ParamVars::gradients(const Gradients& grads) const {
  ParamSet out;
  for (std::size_t i = 0; i < vars_.size(); ++i) {
    const auto it = grads.find(vars_[i].id());
    if (it == grads.end()) {
      throw MissingProvenance("gradients: parameter '" + (*params_)[i].name + "' has no gradient on this tape");
    }
    out.add((*params_)[i].name, it->second);
  }
  return out;
}

}  // namespace metaforge
