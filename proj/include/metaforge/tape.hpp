#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string_view>
#include <vector>

#include "metaforge/tensor.hpp"

namespace metaforge {

enum class OpKind {
  kLeaf,
  kMatmul,
  kAdd,
  kSub,
  kMul,
  kScale,
  kRelu,
  kSoftmaxLastdim,
  kLayernorm,
  kEmbeddingLookup,
  kDropoutMaskApply,
  kMean,
  kSum,
  kSquare,
  kSqrt,
  kTransposeLast2,
  kConcat,
  kSlice,
  kReshape,
};

std::string_view op_name(OpKind kind);

/// Non-tensor arguments of a primitive. Each op reads only the fields it needs.
struct OpAttrs {
  std::size_t axis = 0;          // concat, slice
  std::size_t begin = 0;         // slice
  std::size_t end = 0;           // slice (exclusive)
  double factor = 1.0;           // scale
  double eps = 1e-5;             // layernorm
  Shape shape;                   // reshape target; embedding index shape
  std::vector<std::size_t> indices;  // embedding ids, row-major over `shape`
  Tensor mask;                   // dropout multiplier, or softmax key mask (0 = masked)
};

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Map from leaf id to d(loss)/d(leaf).
using Gradients = std::map<std::size_t, Tensor>;

/// Records primitive ops in execution order and differentiates them in reverse.
/// Single-writer: one thread records onto a given tape.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool trainable = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Evaluate `kind` on `inputs` and append it to the tape.
  Var apply(OpKind kind, std::span<const Var> inputs, const OpAttrs& attrs = {});

  const Tensor& value(const Var& v) const;
  bool owns(const Var& v) const noexcept { return v.tape() == this && v.id() < nodes_.size(); }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Reverse sweep from a scalar loss. Returns gradients for every trainable leaf.
  Gradients backward(const Var& loss) const;

  /// Number of op visits made by the most recent backward call.
  std::size_t last_backward_visits() const noexcept { return visits_; }

 private:
  struct Node {
    OpKind kind = OpKind::kLeaf;
    std::vector<std::size_t> inputs;
    OpAttrs attrs;
    Tensor value;
    std::vector<double> aux;  // op-specific saved state
    bool trainable = false;
    bool requires_grad = false;
  };

  void check_owned(const Var& v, std::string_view op) const;
  void accumulate_vjp(const Node& node, const Tensor& out_grad, std::vector<Tensor>& adjoints) const;

  std::vector<Node> nodes_;
  mutable std::size_t visits_ = 0;
};

/// Typed front ends over Tape::apply.
namespace ops {

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var relu(const Var& a);
Var softmax_lastdim(const Var& a);
Var softmax_lastdim(const Var& a, Tensor key_mask);
Var layernorm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var embedding_lookup(const Var& table, std::vector<std::size_t> ids, Shape ids_shape);
Var dropout_mask_apply(const Var& a, Tensor mask);
Var mean(const Var& a);
Var sum(const Var& a);
Var square(const Var& a);
Var sqrt(const Var& a);
Var transpose_last2(const Var& a);
Var concat(std::span<const Var> parts, std::size_t axis);
Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end);
Var reshape(const Var& a, Shape shape);

}  // namespace ops

}  // namespace metaforge
