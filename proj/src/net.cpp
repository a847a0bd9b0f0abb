#include "metaforge/net.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "metaforge/errors.hpp"

namespace metaforge {
namespace {

std::string block(std::size_t layer, const char* name) { return "blocks." + std::to_string(layer) + "." + name; }

Tensor xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  Tensor t({fan_in, fan_out});
  for (double& v : t.data()) v = rng.uniform(-a, a);
  return t;
}

Tensor dropout_mask(const Shape& shape, double p, Rng& rng) {
  Tensor m(shape);
  const double keep = 1.0 / (1.0 - p);
  for (double& v : m.data()) v = rng.uniform() < p ? 0.0 : keep;
  return m;
}

class Dropout {
 public:
  Dropout(Mode mode, double p, Rng& rng) : active_(mode == Mode::kTrain && p > 0.0), p_(p), rng_(rng) {}

  Var operator()(const Var& x) const {
    if (!active_) return x;
    return ops::dropout_mask_apply(x, dropout_mask(x.shape(), p_, rng_));
  }

 private:
  bool active_;
  double p_;
  Rng& rng_;
};

Var linear(const Var& x, const Var& w, const Var& b) { return ops::add(ops::matmul(x, w), b); }

}  // namespace

void NetConfig::validate() const {
  const auto fail = [](const std::string& why) { throw ContractViolation("net config: " + why); };
  if (vocab_size < 1) fail("vocab_size must be positive");
  if (max_len < 1) fail("max_len must be positive");
  if (d_model < 1 || n_heads < 1) fail("d_model and n_heads must be positive");
  if (d_model % n_heads != 0) {
    fail("d_model " + std::to_string(d_model) + " is not divisible by n_heads " + std::to_string(n_heads));
  }
  if (ff_dim < 1) fail("ff_dim must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
}

std::size_t NetConfig::param_count() const {
  const std::size_t d = d_model;
  const std::size_t embed = vocab_size * d + max_len * d + 2 * d;
  const std::size_t per_layer = 4 * (d * d + d) + 2 * d + (d * ff_dim + ff_dim) + (ff_dim * d + d) + 2 * d;
  const std::size_t head = (d * kHeadDims[0] + kHeadDims[0]) + (kHeadDims[0] * kHeadDims[1] + kHeadDims[1]) +
                           (kHeadDims[1] * kHeadDims[2] + kHeadDims[2]);
  return embed + n_layers * per_layer + head;
}

nlohmann::ordered_json NetConfig::to_json() const {
  return {{"vocab_size", vocab_size}, {"max_len", max_len}, {"d_model", d_model}, {"n_heads", n_heads},
          {"n_layers", n_layers},     {"ff_dim", ff_dim},   {"dropout", dropout}};
}

NetConfig NetConfig::from_json(const nlohmann::ordered_json& j) {
  NetConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "vocab_size") c.vocab_size = value.get<std::size_t>();
    else if (key == "max_len") c.max_len = value.get<std::size_t>();
    else if (key == "d_model") c.d_model = value.get<std::size_t>();
    else if (key == "n_heads") c.n_heads = value.get<std::size_t>();
    else if (key == "n_layers") c.n_layers = value.get<std::size_t>();
    else if (key == "ff_dim") c.ff_dim = value.get<std::size_t>();
    else if (key == "dropout") c.dropout = value.get<double>();
    else throw ContractViolation("net config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

ParamSet init_params(const NetConfig& c, std::uint64_t seed) {
  c.validate();
  Rng rng(seed);
  const std::size_t d = c.d_model;
  ParamSet p;
  p.add("tok_emb", xavier(c.vocab_size, d, rng));
  p.add("pos_emb", xavier(c.max_len, d, rng));
  p.add("emb_ln.gamma", Tensor({d}, 1.0));
  p.add("emb_ln.beta", Tensor({d}));
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
      p.add(block(l, (std::string("attn.") + w).c_str()), xavier(d, d, rng));
      p.add(block(l, (std::string("attn.b") + w[1]).c_str()), Tensor({d}));
    }
    p.add(block(l, "ln1.gamma"), Tensor({d}, 1.0));
    p.add(block(l, "ln1.beta"), Tensor({d}));
    p.add(block(l, "ff.w1"), xavier(d, c.ff_dim, rng));
    p.add(block(l, "ff.b1"), Tensor({c.ff_dim}));
    p.add(block(l, "ff.w2"), xavier(c.ff_dim, d, rng));
    p.add(block(l, "ff.b2"), Tensor({d}));
    p.add(block(l, "ln2.gamma"), Tensor({d}, 1.0));
    p.add(block(l, "ln2.beta"), Tensor({d}));
  }
  std::size_t fan_in = d;
  for (std::size_t i = 0; i < NetConfig::kHeadDims.size(); ++i) {
    const std::size_t fan_out = NetConfig::kHeadDims[i];
    p.add("head.w" + std::to_string(i + 1), xavier(fan_in, fan_out, rng));
    p.add("head.b" + std::to_string(i + 1), Tensor({fan_out}));
    fan_in = fan_out;
  }
  return p;
}

Var forward(Tape& tape, const ParamVars& pv, const NetConfig& c, std::span<const TokenSequence> batch, Mode mode,
            Rng& rng, ForwardTrace* trace) {
  if (batch.empty()) throw ContractViolation("forward: empty batch");
  if (pv.size() == 0 || !tape.owns(pv[0])) throw MissingProvenance("forward: parameters are not bound to this tape");
  const std::size_t B = batch.size();

  // Trailing columns that are padding for every row cannot reach the [CLS] output.
  std::size_t L = 1;
  for (const auto& s : batch) {
    if (s.ids.size() != s.mask.size()) throw ContractViolation("forward: ids/mask length mismatch");
    for (std::size_t i = s.ids.size(); i-- > 0;) {
      if (s.mask[i]) {
        L = std::max(L, i + 1);
        break;
      }
    }
  }
  if (L > c.max_len) {
    throw ContractViolation("forward: sequence length " + std::to_string(L) + " exceeds max_len " +
                            std::to_string(c.max_len));
  }
  std::vector<std::size_t> ids(B * L, static_cast<std::size_t>(Vocabulary::kPad));
  Tensor key_mask({B, L});
  for (std::size_t b = 0; b < B; ++b) {
    const auto& s = batch[b];
    for (std::size_t i = 0; i < std::min(L, s.ids.size()); ++i) {
      if (s.ids[i] < 0 || static_cast<std::size_t>(s.ids[i]) >= c.vocab_size) {
        throw ContractViolation("forward: token id " + std::to_string(s.ids[i]) + " out of range for vocab size " +
                                std::to_string(c.vocab_size));
      }
      ids[b * L + i] = static_cast<std::size_t>(s.ids[i]);
      key_mask[b * L + i] = s.mask[i] ? 1.0 : 0.0;
    }
    if (key_mask[b * L] == 0.0) throw ContractViolation("forward: sequence with no active tokens");
  }

  const Dropout drop(mode, c.dropout, rng);
  const std::size_t d = c.d_model;
  const std::size_t dh = d / c.n_heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  Var x = ops::embedding_lookup(pv.get("tok_emb"), ids, {B, L});
  x = ops::add(x, ops::slice(pv.get("pos_emb"), 0, 0, L));
  x = drop(ops::layernorm(x, pv.get("emb_ln.gamma"), pv.get("emb_ln.beta")));

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto P = [&](const char* name) -> const Var& { return pv.get(block(l, name)); };
    const Var q = linear(x, P("attn.wq"), P("attn.bq"));
    const Var k = linear(x, P("attn.wk"), P("attn.bk"));
    const Var v = linear(x, P("attn.wv"), P("attn.bv"));
    std::vector<Var> heads;
    heads.reserve(c.n_heads);
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      const Var qh = ops::slice(q, 2, h * dh, (h + 1) * dh);
      const Var kh = ops::slice(k, 2, h * dh, (h + 1) * dh);
      const Var vh = ops::slice(v, 2, h * dh, (h + 1) * dh);
      const Var scores = ops::scale(ops::matmul(qh, ops::transpose_last2(kh)), inv_sqrt_dh);
      const Var attn = ops::softmax_lastdim(scores, key_mask);
      if (trace) trace->attention.push_back(attn.value());
      heads.push_back(ops::matmul(attn, vh));
    }
    const Var merged = c.n_heads == 1 ? heads[0] : ops::concat(heads, 2);
    const Var attn_out = drop(linear(merged, P("attn.wo"), P("attn.bo")));
    x = ops::layernorm(ops::add(x, attn_out), P("ln1.gamma"), P("ln1.beta"));

    const Var ff = ops::relu(linear(x, P("ff.w1"), P("ff.b1")));
    const Var ff_out = drop(linear(ff, P("ff.w2"), P("ff.b2")));
    x = ops::layernorm(ops::add(x, ff_out), P("ln2.gamma"), P("ln2.beta"));
  }

  Var h = ops::reshape(ops::slice(x, 1, 0, 1), {B, d});
  h = drop(ops::relu(linear(h, pv.get("head.w1"), pv.get("head.b1"))));
  h = drop(ops::relu(linear(h, pv.get("head.w2"), pv.get("head.b2"))));
  const Var out = linear(h, pv.get("head.w3"), pv.get("head.b3"));
  return ops::reshape(out, {B});
}

std::vector<double> predict(const ParamSet& params, const NetConfig& config, std::span<const TokenSequence> batch) {
  Tape tape;
  const ParamVars pv(tape, params, false);
  Rng unused(0);
  const Var out = forward(tape, pv, config, batch, Mode::kEval, unused);
  const auto d = out.value().data();
  return {d.begin(), d.end()};
}

Var loss_mse(const Var& predictions, const Var& targets) {
  if (predictions.shape() != targets.shape() || predictions.value().size() == 0) {
    throw ContractViolation("loss_mse: predictions " + shape_str(predictions.shape()) + " vs targets " +
                            shape_str(targets.shape()));
  }
  return ops::mean(ops::square(ops::sub(predictions, targets)));
}

double loss_mse(std::span<const double> predictions, std::span<const double> targets) {
  if (predictions.empty() || predictions.size() != targets.size()) {
    throw ContractViolation("loss_mse: need equal, non-empty inputs (got " + std::to_string(predictions.size()) +
                            " and " + std::to_string(targets.size()) + ")");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double r = predictions[i] - targets[i];
    s += r * r;
  }
  return s / static_cast<double>(predictions.size());
}

LossGrad grads(const ParamSet& params, const NetConfig& config, std::span<const TokenSequence> batch,
               std::span<const double> targets, Rng& rng, Mode mode) {
  if (targets.size() != batch.size()) throw ContractViolation("grads: batch and target sizes differ");
  Tape tape;
  const ParamVars pv(tape, params);
  const Var pred = forward(tape, pv, config, batch, mode, rng);
  const Var y = tape.constant(Tensor({targets.size()}, std::vector<double>(targets.begin(), targets.end())));
  const Var loss = loss_mse(pred, y);
  return {loss.value().item(), pv.gradients(tape.backward(loss))};
}

}  // namespace metaforge
