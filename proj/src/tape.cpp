#include "metaforge/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "metaforge/errors.hpp"

namespace metaforge {
namespace {

[[noreturn]] void shape_error(OpKind kind, const std::string& detail) {
  throw ContractViolation(std::string(op_name(kind)) + ": " + detail);
}

std::string shapes_of(std::span<const Tensor* const> xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) s += " and ";
    s += shape_str(xs[i]->shape());
  }
  return s;
}

void expect_arity(OpKind kind, std::size_t got, std::size_t want) {
  if (got != want) {
    shape_error(kind, "expected " + std::to_string(want) + " inputs, got " + std::to_string(got));
  }
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

Shape leading(const Shape& s, std::size_t keep_tail) {
  return Shape(s.begin(), s.end() - static_cast<std::ptrdiff_t>(keep_tail));
}

struct MatmulDims {
  std::size_t batch = 1, m = 0, k = 0, n = 0;
  bool shared_rhs = false;
};

MatmulDims matmul_dims(const Tensor& a, const Tensor& b) {
  const auto fail = [&] {
    const Tensor* xs[] = {&a, &b};
    shape_error(OpKind::kMatmul, "cannot multiply " + shapes_of(xs));
  };
  if (a.rank() < 2 || b.rank() < 2) fail();
  MatmulDims d;
  d.m = a.dim(a.rank() - 2);
  d.k = a.dim(a.rank() - 1);
  d.n = b.dim(b.rank() - 1);
  if (b.dim(b.rank() - 2) != d.k) fail();
  d.batch = shape_size(leading(a.shape(), 2));
  if (b.rank() == 2) {
    d.shared_rhs = true;
  } else if (leading(a.shape(), 2) != leading(b.shape(), 2)) {
    fail();
  }
  return d;
}

// out[m, n] += a[m, k] * b[k, n]
void gemm_nn(const double* a, const double* b, double* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* row = out + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
}

// out[m, k] += g[m, n] * b[k, n]^T
void gemm_nt(const double* g, const double* b, double* out, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double* grow = g + i * n;
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      out[i * k + p] += acc;
    }
  }
}

// out[k, n] += a[m, k]^T * g[m, n]
void gemm_tn(const double* a, const double* g, double* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      double* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * grow[j];
    }
  }
}

struct AxisSplit {
  std::size_t outer = 1, dim = 0, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.dim = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

// Key mask shape expected for a softmax input: leading dims minus the query axis, plus key axis.
Shape softmax_mask_shape(const Shape& s) {
  Shape m(s.begin(), s.end() - 2);
  m.push_back(s.back());
  return m;
}

Tensor forward(OpKind kind, std::span<const Tensor* const> in, const OpAttrs& at, std::vector<double>& aux) {
  switch (kind) {
    case OpKind::kLeaf:
      shape_error(kind, "leaf values are created with Tape::leaf");

    case OpKind::kMatmul: {
      expect_arity(kind, in.size(), 2);
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      const MatmulDims d = matmul_dims(a, b);
      Shape out_shape = leading(a.shape(), 2);
      out_shape.push_back(d.m);
      out_shape.push_back(d.n);
      Tensor out(out_shape);
      if (d.shared_rhs) {
        gemm_nn(a.data().data(), b.data().data(), out.data().data(), d.batch * d.m, d.k, d.n);
      } else {
        for (std::size_t s = 0; s < d.batch; ++s) {
          gemm_nn(a.data().data() + s * d.m * d.k, b.data().data() + s * d.k * d.n,
                  out.data().data() + s * d.m * d.n, d.m, d.k, d.n);
        }
      }
      return out;
    }

    case OpKind::kAdd:
    case OpKind::kSub: {
      expect_arity(kind, in.size(), 2);
      const Tensor& a = *in[0];
      const Tensor& b = *in[1];
      if (!is_suffix(b.shape(), a.shape())) {
        shape_error(kind, "shapes not conformable: " + shapes_of(in) +
                              " (right operand must match the trailing dims of the left)");
      }
      Tensor out = a;
      const std::size_t nb = b.size();
      const double sign = kind == OpKind::kAdd ? 1.0 : -1.0;
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += sign * b[i % nb];
      return out;
    }

    case OpKind::kMul: {
      expect_arity(kind, in.size(), 2);
      if (in[0]->shape() != in[1]->shape()) shape_error(kind, "shape mismatch " + shapes_of(in));
      Tensor out = *in[0];
      for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*in[1])[i];
      return out;
    }

    case OpKind::kScale: {
      expect_arity(kind, in.size(), 1);
      Tensor out = *in[0];
      for (double& v : out.data()) v *= at.factor;
      return out;
    }

    case OpKind::kRelu: {
      expect_arity(kind, in.size(), 1);
      Tensor out = *in[0];
      for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
      return out;
    }

    case OpKind::kSoftmaxLastdim: {
      expect_arity(kind, in.size(), 1);
      const Tensor& x = *in[0];
      if (x.rank() < 1 || x.shape().back() == 0) shape_error(kind, "needs a non-empty last dim, got " + shapes_of(in));
      const std::size_t n = x.shape().back();
      const std::size_t rows = x.size() / n;
      const bool masked = at.mask.size() > 0;
      std::size_t queries = 1;
      if (masked) {
        if (x.rank() < 2 || at.mask.shape() != softmax_mask_shape(x.shape())) {
          shape_error(kind, "key mask " + shape_str(at.mask.shape()) + " does not fit input " + shape_str(x.shape()));
        }
        queries = x.dim(x.rank() - 2);
      }
      Tensor out(x.shape());
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * n;
        double* yr = out.data().data() + r * n;
        const double* mr = masked ? at.mask.data().data() + (r / queries) * n : nullptr;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
          if (!mr || mr[j] != 0.0) mx = std::max(mx, xr[j]);
        }
        if (!std::isfinite(mx)) shape_error(kind, "every key in a row is masked");
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          yr[j] = (!mr || mr[j] != 0.0) ? std::exp(xr[j] - mx) : 0.0;
          z += yr[j];
        }
        for (std::size_t j = 0; j < n; ++j) yr[j] /= z;
      }
      return out;
    }

    case OpKind::kLayernorm: {
      expect_arity(kind, in.size(), 3);
      const Tensor& x = *in[0];
      if (x.rank() < 1) shape_error(kind, "input must have rank >= 1");
      const std::size_t d = x.shape().back();
      if (in[1]->shape() != Shape{d} || in[2]->shape() != Shape{d}) {
        shape_error(kind, "scale/shift must be [" + std::to_string(d) + "], got " + shapes_of(in));
      }
      const std::size_t rows = x.size() / d;
      Tensor out(x.shape());
      // aux: normalized values followed by one inverse std-dev per row
      aux.assign(x.size() + rows, 0.0);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + at.eps);
        aux[x.size() + r] = inv;
        for (std::size_t j = 0; j < d; ++j) {
          const double xh = (xr[j] - mu) * inv;
          aux[r * d + j] = xh;
          out[r * d + j] = xh * (*in[1])[j] + (*in[2])[j];
        }
      }
      return out;
    }

    case OpKind::kEmbeddingLookup: {
      expect_arity(kind, in.size(), 1);
      const Tensor& table = *in[0];
      if (table.rank() != 2) shape_error(kind, "table must be rank 2, got " + shapes_of(in));
      if (shape_size(at.shape) != at.indices.size()) {
        shape_error(kind, "index shape " + shape_str(at.shape) + " does not hold " +
                              std::to_string(at.indices.size()) + " ids");
      }
      const std::size_t vocab = table.dim(0);
      const std::size_t d = table.dim(1);
      Shape out_shape = at.shape;
      out_shape.push_back(d);
      Tensor out(out_shape);
      for (std::size_t i = 0; i < at.indices.size(); ++i) {
        const std::size_t id = at.indices[i];
        if (id >= vocab) {
          shape_error(kind, "id " + std::to_string(id) + " out of range for table " + shape_str(table.shape()));
        }
        std::copy_n(table.data().data() + id * d, d, out.data().data() + i * d);
      }
      return out;
    }

    case OpKind::kDropoutMaskApply: {
      expect_arity(kind, in.size(), 1);
      if (at.mask.shape() != in[0]->shape()) {
        shape_error(kind, "mask " + shape_str(at.mask.shape()) + " does not match input " + shapes_of(in));
      }
      Tensor out = *in[0];
      for (std::size_t i = 0; i < out.size(); ++i) out[i] *= at.mask[i];
      return out;
    }

    case OpKind::kMean:
    case OpKind::kSum: {
      expect_arity(kind, in.size(), 1);
      if (in[0]->size() == 0) shape_error(kind, "empty input");
      double s = 0.0;
      for (double v : in[0]->data()) s += v;
      if (kind == OpKind::kMean) s /= static_cast<double>(in[0]->size());
      return Tensor::scalar(s);
    }

    case OpKind::kSquare: {
      expect_arity(kind, in.size(), 1);
      Tensor out = *in[0];
      for (double& v : out.data()) v *= v;
      return out;
    }

    case OpKind::kSqrt: {
      expect_arity(kind, in.size(), 1);
      Tensor out = *in[0];
      for (double& v : out.data()) {
        if (!(v >= 0.0)) shape_error(kind, "negative input " + std::to_string(v));
        v = std::sqrt(v);
      }
      return out;
    }

    case OpKind::kTransposeLast2: {
      expect_arity(kind, in.size(), 1);
      const Tensor& x = *in[0];
      if (x.rank() < 2) shape_error(kind, "needs rank >= 2, got " + shapes_of(in));
      const std::size_t r = x.dim(x.rank() - 2);
      const std::size_t c = x.dim(x.rank() - 1);
      Shape s = x.shape();
      std::swap(s[s.size() - 2], s[s.size() - 1]);
      Tensor out(s);
      const std::size_t batch = x.size() / (r * c);
      for (std::size_t b = 0; b < batch; ++b) {
        const double* src = x.data().data() + b * r * c;
        double* dst = out.data().data() + b * r * c;
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
      }
      return out;
    }

    case OpKind::kConcat: {
      if (in.empty()) shape_error(kind, "no inputs");
      const Shape& s0 = in[0]->shape();
      if (at.axis >= s0.size()) shape_error(kind, "axis " + std::to_string(at.axis) + " out of range");
      Shape out_shape = s0;
      out_shape[at.axis] = 0;
      for (const Tensor* t : in) {
        Shape probe = t->shape();
        if (probe.size() != s0.size()) shape_error(kind, "rank mismatch " + shapes_of(in));
        probe[at.axis] = s0[at.axis];
        if (probe != s0) shape_error(kind, "shapes differ off the concat axis: " + shapes_of(in));
        out_shape[at.axis] += t->dim(at.axis);
      }
      Tensor out(out_shape);
      const AxisSplit o = split_at(out_shape, at.axis);
      std::size_t offset = 0;
      for (const Tensor* t : in) {
        const std::size_t chunk = t->dim(at.axis) * o.inner;
        for (std::size_t q = 0; q < o.outer; ++q) {
          std::copy_n(t->data().data() + q * chunk, chunk, out.data().data() + q * o.dim * o.inner + offset);
        }
        offset += chunk;
      }
      return out;
    }

    case OpKind::kSlice: {
      expect_arity(kind, in.size(), 1);
      const Tensor& x = *in[0];
      if (at.axis >= x.rank() || at.begin >= at.end || at.end > x.dim(at.axis)) {
        shape_error(kind, "range [" + std::to_string(at.begin) + ", " + std::to_string(at.end) + ") on axis " +
                              std::to_string(at.axis) + " invalid for " + shapes_of(in));
      }
      Shape s = x.shape();
      s[at.axis] = at.end - at.begin;
      Tensor out(s);
      const AxisSplit a = split_at(x.shape(), at.axis);
      const std::size_t chunk = (at.end - at.begin) * a.inner;
      for (std::size_t q = 0; q < a.outer; ++q) {
        std::copy_n(x.data().data() + q * a.dim * a.inner + at.begin * a.inner, chunk, out.data().data() + q * chunk);
      }
      return out;
    }

    case OpKind::kReshape: {
      expect_arity(kind, in.size(), 1);
      if (shape_size(at.shape) != in[0]->size()) {
        shape_error(kind, "cannot reshape " + shapes_of(in) + " to " + shape_str(at.shape));
      }
      return Tensor(at.shape, std::vector<double>(in[0]->data().begin(), in[0]->data().end()));
    }
  }
  shape_error(kind, "unknown op");
}

Tensor& adjoint(std::vector<Tensor>& adj, std::size_t id, const Shape& shape) {
  if (adj[id].size() == 0) adj[id] = Tensor(shape);
  return adj[id];
}

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kRelu: return "relu";
    case OpKind::kSoftmaxLastdim: return "softmax_lastdim";
    case OpKind::kLayernorm: return "layernorm";
    case OpKind::kEmbeddingLookup: return "embedding_lookup";
    case OpKind::kDropoutMaskApply: return "dropout_mask_apply";
    case OpKind::kMean: return "mean";
    case OpKind::kSum: return "sum";
    case OpKind::kSquare: return "square";
    case OpKind::kSqrt: return "sqrt";
    case OpKind::kTransposeLast2: return "transpose_last2";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kReshape: return "reshape";
  }
  return "?";
}

const Tensor& Var::value() const {
  if (!tape_) throw MissingProvenance("variable is not attached to a tape");
  return tape_->value(*this);
}

Var Tape::leaf(Tensor value, bool trainable) {
  Node n;
  n.kind = OpKind::kLeaf;
  n.value = std::move(value);
  n.trainable = trainable;
  n.requires_grad = trainable;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::check_owned(const Var& v, std::string_view op) const {
  if (!owns(v)) {
    throw MissingProvenance(std::string(op) + ": variable " + std::to_string(v.id()) + " was not recorded on this tape");
  }
}

const Tensor& Tape::value(const Var& v) const {
  check_owned(v, "value");
  return nodes_[v.id()].value;
}

Var Tape::apply(OpKind kind, std::span<const Var> inputs, const OpAttrs& attrs) {
  std::vector<const Tensor*> values;
  values.reserve(inputs.size());
  Node n;
  n.kind = kind;
  for (const Var& v : inputs) {
    check_owned(v, op_name(kind));
    values.push_back(&nodes_[v.id()].value);
    n.inputs.push_back(v.id());
    n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
  }
  n.value = forward(kind, values, attrs, n.aux);
  n.attrs = attrs;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Gradients Tape::backward(const Var& loss) const {
  check_owned(loss, "backward");
  const Node& root = nodes_[loss.id()];
  if (root.value.size() != 1) {
    throw ContractViolation("backward: loss must be a scalar, got shape " + shape_str(root.value.shape()));
  }
  std::vector<Tensor> adj(nodes_.size());
  adj[loss.id()] = Tensor(root.value.shape(), 1.0);
  visits_ = 0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    const Node& n = nodes_[i];
    if (n.kind == OpKind::kLeaf || !n.requires_grad || adj[i].size() == 0) continue;
    ++visits_;
    accumulate_vjp(n, adj[i], adj);
  }
  Gradients out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& n = nodes_[i];
    if (n.kind != OpKind::kLeaf || !n.trainable) continue;
    out.emplace(i, adj[i].size() ? std::move(adj[i]) : Tensor::zeros_like(n.value));
  }
  return out;
}

void Tape::accumulate_vjp(const Node& node, const Tensor& g, std::vector<Tensor>& adj) const {
  const auto in = [&](std::size_t k) -> const Node& { return nodes_[node.inputs[k]]; };
  const auto wants = [&](std::size_t k) { return in(k).requires_grad; };
  const auto grad_of = [&](std::size_t k) -> Tensor& {
    return adjoint(adj, node.inputs[k], in(k).value.shape());
  };
  const OpAttrs& at = node.attrs;

  switch (node.kind) {
    case OpKind::kLeaf:
      return;

    case OpKind::kMatmul: {
      const Tensor& a = in(0).value;
      const Tensor& b = in(1).value;
      const MatmulDims d = matmul_dims(a, b);
      if (wants(0)) {
        Tensor& ga = grad_of(0);
        for (std::size_t s = 0; s < d.batch; ++s) {
          const double* bp = b.data().data() + (d.shared_rhs ? 0 : s * d.k * d.n);
          gemm_nt(g.data().data() + s * d.m * d.n, bp, ga.data().data() + s * d.m * d.k, d.m, d.n, d.k);
        }
      }
      if (wants(1)) {
        Tensor& gb = grad_of(1);
        if (d.shared_rhs) {
          gemm_tn(a.data().data(), g.data().data(), gb.data().data(), d.batch * d.m, d.k, d.n);
        } else {
          for (std::size_t s = 0; s < d.batch; ++s) {
            gemm_tn(a.data().data() + s * d.m * d.k, g.data().data() + s * d.m * d.n,
                    gb.data().data() + s * d.k * d.n, d.m, d.k, d.n);
          }
        }
      }
      return;
    }

    case OpKind::kAdd:
    case OpKind::kSub: {
      if (wants(0)) {
        Tensor& ga = grad_of(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (wants(1)) {
        Tensor& gb = grad_of(1);
        const std::size_t nb = gb.size();
        const double sign = node.kind == OpKind::kAdd ? 1.0 : -1.0;
        for (std::size_t i = 0; i < g.size(); ++i) gb[i % nb] += sign * g[i];
      }
      return;
    }

    case OpKind::kMul: {
      const Tensor& a = in(0).value;
      const Tensor& b = in(1).value;
      if (wants(0)) {
        Tensor& ga = grad_of(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (wants(1)) {
        Tensor& gb = grad_of(1);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
      return;
    }

    case OpKind::kScale: {
      Tensor& ga = grad_of(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * at.factor;
      return;
    }

    case OpKind::kRelu: {
      const Tensor& x = in(0).value;
      Tensor& ga = grad_of(0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x[i] > 0.0) ga[i] += g[i];
      }
      return;
    }

    case OpKind::kSoftmaxLastdim: {
      const Tensor& y = node.value;
      const std::size_t n = y.shape().back();
      Tensor& ga = grad_of(0);
      for (std::size_t r = 0; r < y.size() / n; ++r) {
        const double* yr = y.data().data() + r * n;
        const double* gr = g.data().data() + r * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
        double* out = ga.data().data() + r * n;
        for (std::size_t j = 0; j < n; ++j) out[j] += yr[j] * (gr[j] - dot);
      }
      return;
    }

    case OpKind::kLayernorm: {
      const Tensor& x = in(0).value;
      const Tensor& gamma = in(1).value;
      const std::size_t d = x.shape().back();
      const std::size_t rows = x.size() / d;
      const double* xhat = node.aux.data();
      const double* inv = node.aux.data() + x.size();
      if (wants(1)) {
        Tensor& gg = grad_of(1);
        for (std::size_t i = 0; i < x.size(); ++i) gg[i % d] += g[i] * xhat[i];
      }
      if (wants(2)) {
        Tensor& gbeta = grad_of(2);
        for (std::size_t i = 0; i < x.size(); ++i) gbeta[i % d] += g[i];
      }
      if (wants(0)) {
        Tensor& gx = grad_of(0);
        const double dd = static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_dxh = 0.0;
          double mean_dxh_xh = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = g[r * d + j] * gamma[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xhat[r * d + j];
          }
          mean_dxh /= dd;
          mean_dxh_xh /= dd;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = g[r * d + j] * gamma[j];
            gx[r * d + j] += inv[r] * (dxh - mean_dxh - xhat[r * d + j] * mean_dxh_xh);
          }
        }
      }
      return;
    }

    case OpKind::kEmbeddingLookup: {
      Tensor& gt = grad_of(0);
      const std::size_t d = gt.dim(1);
      for (std::size_t i = 0; i < at.indices.size(); ++i) {
        double* row = gt.data().data() + at.indices[i] * d;
        const double* gr = g.data().data() + i * d;
        for (std::size_t j = 0; j < d; ++j) row[j] += gr[j];
      }
      return;
    }

    case OpKind::kDropoutMaskApply: {
      Tensor& ga = grad_of(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * at.mask[i];
      return;
    }

    case OpKind::kMean:
    case OpKind::kSum: {
      Tensor& ga = grad_of(0);
      const double s = node.kind == OpKind::kMean ? g[0] / static_cast<double>(ga.size()) : g[0];
      for (double& v : ga.data()) v += s;
      return;
    }

    case OpKind::kSquare: {
      const Tensor& x = in(0).value;
      Tensor& ga = grad_of(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += 2.0 * x[i] * g[i];
      return;
    }

    case OpKind::kSqrt: {
      const Tensor& y = node.value;
      Tensor& ga = grad_of(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * 0.5 / y[i];
      return;
    }

    case OpKind::kTransposeLast2: {
      const Tensor& x = in(0).value;
      const std::size_t r = x.dim(x.rank() - 2);
      const std::size_t c = x.dim(x.rank() - 1);
      Tensor& ga = grad_of(0);
      for (std::size_t b = 0; b < x.size() / (r * c); ++b) {
        const double* src = g.data().data() + b * r * c;
        double* dst = ga.data().data() + b * r * c;
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) dst[i * c + j] += src[j * r + i];
      }
      return;
    }

    case OpKind::kConcat: {
      const AxisSplit o = split_at(node.value.shape(), at.axis);
      std::size_t offset = 0;
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const std::size_t chunk = in(k).value.dim(at.axis) * o.inner;
        if (wants(k)) {
          Tensor& gk = grad_of(k);
          for (std::size_t q = 0; q < o.outer; ++q) {
            const double* src = g.data().data() + q * o.dim * o.inner + offset;
            double* dst = gk.data().data() + q * chunk;
            for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
          }
        }
        offset += chunk;
      }
      return;
    }

    case OpKind::kSlice: {
      const AxisSplit a = split_at(in(0).value.shape(), at.axis);
      const std::size_t chunk = (at.end - at.begin) * a.inner;
      Tensor& ga = grad_of(0);
      for (std::size_t q = 0; q < a.outer; ++q) {
        double* dst = ga.data().data() + q * a.dim * a.inner + at.begin * a.inner;
        const double* src = g.data().data() + q * chunk;
        for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
      }
      return;
    }

    case OpKind::kReshape: {
      Tensor& ga = grad_of(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      return;
    }
  }
}

namespace ops {
namespace {

Tape& tape_of(std::initializer_list<const Var*> vs, std::string_view op) {
  Tape* t = nullptr;
  for (const Var* v : vs) {
    if (!v->tape()) throw MissingProvenance(std::string(op) + ": variable is not attached to a tape");
    if (t && v->tape() != t) throw MissingProvenance(std::string(op) + ": operands live on different tapes");
    t = v->tape();
  }
  return *t;
}

Var unary(OpKind kind, const Var& a, const OpAttrs& at = {}) {
  const Var in[] = {a};
  return tape_of({&a}, op_name(kind)).apply(kind, in, at);
}

Var binary(OpKind kind, const Var& a, const Var& b) {
  const Var in[] = {a, b};
  return tape_of({&a, &b}, op_name(kind)).apply(kind, in);
}

}  // namespace

Var matmul(const Var& a, const Var& b) { return binary(OpKind::kMatmul, a, b); }
Var add(const Var& a, const Var& b) { return binary(OpKind::kAdd, a, b); }
Var sub(const Var& a, const Var& b) { return binary(OpKind::kSub, a, b); }
Var mul(const Var& a, const Var& b) { return binary(OpKind::kMul, a, b); }

Var scale(const Var& a, double factor) {
  OpAttrs at;
  at.factor = factor;
  return unary(OpKind::kScale, a, at);
}

Var relu(const Var& a) { return unary(OpKind::kRelu, a); }
Var softmax_lastdim(const Var& a) { return unary(OpKind::kSoftmaxLastdim, a); }

Var softmax_lastdim(const Var& a, Tensor key_mask) {
  OpAttrs at;
  at.mask = std::move(key_mask);
  return unary(OpKind::kSoftmaxLastdim, a, at);
}

Var layernorm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  OpAttrs at;
  at.eps = eps;
  const Var in[] = {x, gamma, beta};
  return tape_of({&x, &gamma, &beta}, "layernorm").apply(OpKind::kLayernorm, in, at);
}

Var embedding_lookup(const Var& table, std::vector<std::size_t> ids, Shape ids_shape) {
  OpAttrs at;
  at.indices = std::move(ids);
  at.shape = std::move(ids_shape);
  return unary(OpKind::kEmbeddingLookup, table, at);
}

Var dropout_mask_apply(const Var& a, Tensor mask) {
  OpAttrs at;
  at.mask = std::move(mask);
  return unary(OpKind::kDropoutMaskApply, a, at);
}

Var mean(const Var& a) { return unary(OpKind::kMean, a); }
Var sum(const Var& a) { return unary(OpKind::kSum, a); }
Var square(const Var& a) { return unary(OpKind::kSquare, a); }
Var sqrt(const Var& a) { return unary(OpKind::kSqrt, a); }
Var transpose_last2(const Var& a) { return unary(OpKind::kTransposeLast2, a); }

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ContractViolation("concat: no inputs");
  OpAttrs at;
  at.axis = axis;
  Tape& t = tape_of({&parts[0]}, "concat");
  return t.apply(OpKind::kConcat, parts, at);
}

Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end) {
  OpAttrs at;
  at.axis = axis;
  at.begin = begin;
  at.end = end;
  return unary(OpKind::kSlice, a, at);
}

Var reshape(const Var& a, Shape shape) {
  OpAttrs at;
  at.shape = std::move(shape);
  return unary(OpKind::kReshape, a, at);
}

}  // namespace ops
}  // namespace metaforge
