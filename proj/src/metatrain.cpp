#include "metaforge/metatrain.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "metaforge/errors.hpp"
#include "metaforge/metrics.hpp"

namespace metaforge {
namespace {

constexpr std::size_t kPredictChunk = 64;

std::vector<double> targets_of(std::span<const Example> batch) {
  std::vector<double> t;
  t.reserve(batch.size());
  for (const auto& e : batch) t.push_back(e.target);
  return t;
}

std::vector<TokenSequence> tokens_of(std::span<const Example> batch) {
  std::vector<TokenSequence> t;
  t.reserve(batch.size());
  for (const auto& e : batch) t.push_back(e.tokens);
  return t;
}

double support_loss(const Learner& learner, const ParamSet& params, std::span<const Example> batch) {
  return loss_mse(learner.predict(params, batch), targets_of(batch));
}

double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

template <typename T>
std::vector<T> draw_without_replacement(const std::vector<T>& pool, std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(pool.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  // Partial Fisher-Yates: the first n slots are a uniform draw.
  for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
  std::vector<T> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(pool[idx[i]]);
  return out;
}

}  // namespace

TransformerLearner::TransformerLearner(NetConfig config) : config_(config) { config_.validate(); }

ParamSet TransformerLearner::init(std::uint64_t seed) const { return init_params(config_, seed); }

LossGrad TransformerLearner::loss_grad(const ParamSet& params, std::span<const Example> batch, Rng& rng,
                                       Mode mode) const {
  return grads(params, config_, tokens_of(batch), targets_of(batch), rng, mode);
}

std::vector<double> TransformerLearner::predict(const ParamSet& params, std::span<const Example> batch) const {
  std::vector<double> out;
  out.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); i += kPredictChunk) {
    const auto chunk = batch.subspan(i, std::min(kPredictChunk, batch.size() - i));
    const auto p = metaforge::predict(params, config_, tokens_of(chunk));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

LinearLearner::LinearLearner(std::size_t n_features, bool bias) : n_features_(n_features), bias_(bias) {
  if (n_features == 0) throw ContractViolation("linear learner needs at least one feature");
}

ParamSet LinearLearner::init(std::uint64_t seed) const {
  Rng rng(seed);
  ParamSet p;
  Tensor w({n_features_});
  for (double& v : w.data()) v = rng.normal() * 0.1;
  p.add("w", std::move(w));
  if (bias_) p.add("b", Tensor({1}));
  return p;
}

std::vector<double> LinearLearner::predict(const ParamSet& params, std::span<const Example> batch) const {
  const Tensor& w = params.get("w");
  const double b = bias_ ? params.get("b")[0] : 0.0;
  std::vector<double> out;
  out.reserve(batch.size());
  for (const auto& e : batch) {
    if (e.features.size() != n_features_) {
      throw ContractViolation("linear learner: expected " + std::to_string(n_features_) + " features, got " +
                              std::to_string(e.features.size()));
    }
    double y = b;
    for (std::size_t j = 0; j < n_features_; ++j) y += w[j] * e.features[j];
    out.push_back(y);
  }
  return out;
}

LossGrad LinearLearner::loss_grad(const ParamSet& params, std::span<const Example> batch, Rng&, Mode) const {
  const auto pred = predict(params, batch);
  LossGrad lg{loss_mse(pred, targets_of(batch)), params.zeros_like()};
  const double n = static_cast<double>(batch.size());
  Tensor& gw = lg.grad.get("w");
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double r = 2.0 * (pred[i] - batch[i].target) / n;
    for (std::size_t j = 0; j < n_features_; ++j) gw[j] += r * batch[i].features[j];
    if (bias_) lg.grad.get("b")[0] += r;
  }
  return lg;
}

std::string to_string(InnerOptimizer o) { return o == InnerOptimizer::kSgd ? "sgd" : "adam"; }

InnerOptimizer parse_inner_optimizer(std::string_view text) {
  if (text == "sgd") return InnerOptimizer::kSgd;
  if (text == "adam") return InnerOptimizer::kAdam;
  throw ParseError("unknown inner optimizer '" + std::string(text) + "' (expected sgd or adam)");
}

void MamlConfig::validate() const {
  const auto fail = [](const std::string& why) { throw ContractViolation("maml config: " + why); };
  if (!(inner_lr >= 0.0) || !(meta_lr >= 0.0)) fail("learning rates must be non-negative");
  if (support_size == 0 || query_size == 0) fail("support_size and query_size must be positive");
  if (meta_batch == 0) fail("meta_batch must be positive");
  if (inner_steps == 0) fail("inner_steps must be at least 1");
  if (steps_per_epoch == 0) fail("steps_per_epoch must be positive");
  if (!(clip_max_norm >= 0.0)) fail("clip_max_norm must be non-negative");
}

nlohmann::ordered_json MamlConfig::to_json() const {
  return {{"inner_lr", inner_lr},
          {"meta_lr", meta_lr},
          {"support_size", support_size},
          {"query_size", query_size},
          {"meta_batch", meta_batch},
          {"epochs", epochs},
          {"inner_steps", inner_steps},
          {"steps_per_epoch", steps_per_epoch},
          {"clip_max_norm", clip_max_norm},
          {"inner_optimizer", to_string(inner_optimizer)},
          {"seed", seed}};
}

MamlConfig MamlConfig::from_json(const nlohmann::ordered_json& j) {
  MamlConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "inner_lr") c.inner_lr = value.get<double>();
    else if (key == "meta_lr") c.meta_lr = value.get<double>();
    else if (key == "support_size") c.support_size = value.get<std::size_t>();
    else if (key == "query_size") c.query_size = value.get<std::size_t>();
    else if (key == "meta_batch") c.meta_batch = value.get<std::size_t>();
    else if (key == "epochs") c.epochs = value.get<std::size_t>();
    else if (key == "inner_steps") c.inner_steps = value.get<std::size_t>();
    else if (key == "steps_per_epoch") c.steps_per_epoch = value.get<std::size_t>();
    else if (key == "clip_max_norm") c.clip_max_norm = value.get<double>();
    else if (key == "inner_optimizer") c.inner_optimizer = parse_inner_optimizer(value.get<std::string>());
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else throw ValidationError("maml config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

AdamState AdamState::zeros_like(const ParamSet& params) { return {params.zeros_like(), params.zeros_like(), 0}; }

ParamSet AdamState::to_entries() const {
  ParamSet out;
  out.add("optim.step", Tensor::scalar(static_cast<double>(step)));
  for (const auto& e : m) out.add("optim.m." + e.name, e.value);
  for (const auto& e : v) out.add("optim.v." + e.name, e.value);
  return out;
}

AdamState AdamState::from_entries(const ParamSet& entries, const ParamSet& params) {
  AdamState s = zeros_like(params);
  if (!entries.contains("optim.step")) throw CheckpointError("optimizer state missing 'optim.step'");
  s.step = static_cast<std::uint64_t>(entries.get("optim.step").item());
  for (auto* part : {&s.m, &s.v}) {
    const std::string prefix = part == &s.m ? "optim.m." : "optim.v.";
    for (auto& e : *part) {
      const std::string name = prefix + e.name;
      if (!entries.contains(name)) throw CheckpointError("optimizer state missing '" + name + "'");
      const Tensor& t = entries.get(name);
      if (t.shape() != e.value.shape()) throw CheckpointError("optimizer state '" + name + "' has wrong shape");
      e.value = t;
    }
  }
  return s;
}

void adam_step(ParamSet& params, const ParamSet& grad, AdamState& state, double lr) {
  if (!params.same_layout(grad) || !params.same_layout(state.m)) {
    throw ContractViolation("adam_step: parameter, gradient and moment layouts differ");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(AdamState::kBeta1, t);
  const double c2 = 1.0 - std::pow(AdamState::kBeta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].value.data();
    const auto g = grad[i].value.data();
    auto m = state.m[i].value.data();
    auto v = state.v[i].value.data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = AdamState::kBeta1 * m[k] + (1.0 - AdamState::kBeta1) * g[k];
      v[k] = AdamState::kBeta2 * v[k] + (1.0 - AdamState::kBeta2) * g[k] * g[k];
      const double m_hat = m[k] / c1;
      const double v_hat = v[k] / c2;
      p[k] -= lr * m_hat / (std::sqrt(v_hat) + AdamState::kEps);
    }
  }
}

ParamSet clip_grad(ParamSet grad, double max_norm) {
  if (!(max_norm > 0.0)) throw ContractViolation("clip_grad: max_norm must be positive");
  const double norm = global_norm(grad);
  if (norm > max_norm) scale_in_place(grad, max_norm / norm);
  return grad;
}

std::vector<Example> to_examples(const std::vector<MutationRecord>& records, EncoderMode mode, std::size_t max_len) {
  const Vocabulary& vocab = Vocabulary::standard();
  std::vector<Example> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    out.push_back({encode(mode, r.sequence, r.mutations, vocab, max_len), {}, r.target, r.task});
  }
  return out;
}

Task to_task(const TaskDataset& ds, EncoderMode mode, std::size_t max_len) {
  return {ds.task, to_examples(ds.train, mode, max_len), to_examples(ds.test, mode, max_len)};
}

Episode sample_episode(const Task& task, const MamlConfig& cfg, Rng& rng) {
  const std::size_t need = cfg.support_size + cfg.query_size;
  if (task.train.size() < need) {
    throw DataError("task '" + task.name + "' has " + std::to_string(task.train.size()) +
                    " training records; an episode needs " + std::to_string(need));
  }
  auto drawn = draw_without_replacement(task.train, need, rng);
  Episode ep{task.name, {}, {}};
  ep.query.assign(std::make_move_iterator(drawn.begin() + static_cast<std::ptrdiff_t>(cfg.support_size)),
                  std::make_move_iterator(drawn.end()));
  drawn.resize(cfg.support_size);
  ep.support = std::move(drawn);
  return ep;
}

InnerResult inner_adapt(const Learner& learner, const ParamSet& theta, std::span<const Example> support,
                        const MamlConfig& cfg, Rng& rng) {
  if (support.empty()) throw ContractViolation("inner_adapt: empty support set");
  InnerResult r{theta, {}};
  r.support_losses.reserve(cfg.inner_steps + 1);
  r.support_losses.push_back(support_loss(learner, r.adapted, support));
  AdamState adam = AdamState::zeros_like(theta);
  for (std::size_t s = 0; s < cfg.inner_steps; ++s) {
    const LossGrad lg = learner.loss_grad(r.adapted, support, rng, Mode::kTrain);
    if (cfg.inner_optimizer == InnerOptimizer::kSgd) {
      axpy(r.adapted, -cfg.inner_lr, lg.grad);
    } else {
      adam_step(r.adapted, lg.grad, adam, cfg.inner_lr);
    }
    r.support_losses.push_back(support_loss(learner, r.adapted, support));
  }
  return r;
}

MetaGradient meta_gradient(const Learner& learner, const ParamSet& theta, std::span<const Episode> episodes,
                           const MamlConfig& cfg, Rng& rng) {
  if (episodes.empty()) throw ContractViolation("meta_gradient: no episodes");
  MetaGradient out{theta.zeros_like(), {}};
  MetaStepMetrics& mx = out.metrics;
  mx.episodes = episodes.size();
  for (const Episode& ep : episodes) {
    const InnerResult inner = inner_adapt(learner, theta, ep.support, cfg, rng);
    const LossGrad q = learner.loss_grad(inner.adapted, ep.query, rng, Mode::kTrain);
    axpy(out.grad, 1.0, q.grad);
    mx.support_loss_before += inner.support_losses.front();
    mx.support_loss_after += inner.support_losses.back();
    if (inner.support_losses.back() <= inner.support_losses.front()) ++mx.support_improved;
    mx.query_loss_before += support_loss(learner, theta, ep.query);
    mx.query_loss_after += support_loss(learner, inner.adapted, ep.query);
  }
  const double n = static_cast<double>(episodes.size());
  scale_in_place(out.grad, 1.0 / n);
  mx.support_loss_before /= n;
  mx.support_loss_after /= n;
  mx.query_loss_before /= n;
  mx.query_loss_after /= n;
  mx.grad_norm_preclip = global_norm(out.grad);
  mx.grad_norm_postclip = mx.grad_norm_preclip;
  return out;
}

MetaStepMetrics meta_step(const Learner& learner, ParamSet& theta, std::span<const Episode> episodes,
                          const MamlConfig& cfg, AdamState& adam, Rng& rng) {
  MetaGradient mg = meta_gradient(learner, theta, episodes, cfg, rng);
  if (cfg.clip_max_norm > 0.0) {
    mg.grad = clip_grad(std::move(mg.grad), cfg.clip_max_norm);
    mg.metrics.grad_norm_postclip = global_norm(mg.grad);
  }
  adam_step(theta, mg.grad, adam, cfg.meta_lr);
  return mg.metrics;
}

nlohmann::ordered_json EpochLog::to_json() const {
  return {{"epoch", epoch},
          {"mean_support_loss", mean_support_loss},
          {"mean_query_loss", mean_query_loss},
          {"grad_norm_preclip", grad_norm_preclip},
          {"grad_norm_postclip", grad_norm_postclip},
          {"support_improved", support_improved},
          {"episodes", episodes},
          {"wall_ms", wall_ms}};
}

TrainResult train_maml(const Learner& learner, ParamSet init, const std::vector<Task>& tasks, const MamlConfig& cfg,
                       const EpochCallback& on_epoch) {
  cfg.validate();
  if (tasks.empty()) throw DataError("meta-training needs at least one task");
  const std::size_t need = cfg.support_size + cfg.query_size;
  TrainResult res{std::move(init), {}, {}, {}, 0, 0.0};
  for (const Task& t : tasks) {
    if (t.train.size() < need) {
      throw DataError("task '" + t.name + "' has " + std::to_string(t.train.size()) +
                      " training records; meta-training needs at least " + std::to_string(need));
    }
    res.train_examples += t.train.size();
  }
  res.optimizer = AdamState::zeros_like(res.params);
  Rng rng(cfg.seed);
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    EpochLog log;
    log.epoch = epoch;
    for (std::size_t s = 0; s < cfg.steps_per_epoch; ++s) {
      std::vector<Episode> episodes;
      episodes.reserve(cfg.meta_batch);
      for (std::size_t b = 0; b < cfg.meta_batch; ++b) {
        episodes.push_back(sample_episode(tasks[rng.below(tasks.size())], cfg, rng));
        for (const auto* part : {&episodes.back().support, &episodes.back().query}) {
          for (const Example& e : *part) res.tasks_seen.insert(e.task);
        }
      }
      const MetaStepMetrics mx = meta_step(learner, res.params, episodes, cfg, res.optimizer, rng);
      log.mean_support_loss += mx.support_loss_after;
      log.mean_query_loss += mx.query_loss_after;
      log.grad_norm_preclip = std::max(log.grad_norm_preclip, mx.grad_norm_preclip);
      log.grad_norm_postclip = std::max(log.grad_norm_postclip, mx.grad_norm_postclip);
      log.support_improved += mx.support_improved;
      log.episodes += mx.episodes;
    }
    log.mean_support_loss /= static_cast<double>(cfg.steps_per_epoch);
    log.mean_query_loss /= static_cast<double>(cfg.steps_per_epoch);
    log.wall_ms = elapsed_ms(epoch_start);
    res.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  res.wall_seconds = elapsed_ms(start) / 1000.0;
  return res;
}

double evaluate_nmse(const Learner& learner, const ParamSet& params, std::span<const Example> examples) {
  return nmse(learner.predict(params, examples), targets_of(examples));
}

AdaptEval adapt_and_eval(const Learner& learner, const ParamSet& theta, const Task& target, const MamlConfig& cfg,
                         std::size_t trials, std::uint64_t seed) {
  if (trials == 0) throw ContractViolation("adapt_and_eval: trials must be positive");
  if (target.train.size() < cfg.support_size) {
    throw DataError("task '" + target.name + "' has " + std::to_string(target.train.size()) +
                    " training records; adaptation needs " + std::to_string(cfg.support_size));
  }
  const std::vector<double> truth = targets_of(target.test);
  AdaptEval out;
  const auto base = learner.predict(theta, target.test);
  out.unadapted_nmse = nmse(base, truth);
  out.unadapted_mse = mse(base, truth);
  for (std::size_t i = 0; i < trials; ++i) {
    const std::uint64_t s = seed + i;
    Rng rng(s);
    const auto support = draw_without_replacement(target.train, cfg.support_size, rng);
    const InnerResult inner = inner_adapt(learner, theta, support, cfg, rng);
    const auto pred = learner.predict(inner.adapted, target.test);
    out.seeds.push_back(s);
    out.nmse.push_back(nmse(pred, truth));
    out.mse.push_back(mse(pred, truth));
  }
  return out;
}

nlohmann::ordered_json FinetuneConfig::to_json() const {
  return {{"epochs", epochs}, {"lr", lr}, {"batch_size", batch_size}, {"seed", seed}};
}

FinetuneConfig FinetuneConfig::from_json(const nlohmann::ordered_json& j) {
  FinetuneConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "epochs") c.epochs = value.get<std::size_t>();
    else if (key == "lr") c.lr = value.get<double>();
    else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else throw ValidationError("finetune config: unknown key '" + key + "'");
  }
  if (c.batch_size == 0) throw ValidationError("finetune config: batch_size must be positive");
  return c;
}

FinetuneResult train_finetune(const Learner& learner, ParamSet init, const std::vector<Example>& train,
                              const FinetuneConfig& cfg) {
  if (cfg.batch_size == 0) throw ContractViolation("train_finetune: batch_size must be positive");
  if (train.empty() && cfg.epochs > 0) throw DataError("fine-tuning needs at least one training record");
  FinetuneResult res{std::move(init), {}, {}, 0, 0.0};
  res.optimizer = AdamState::zeros_like(res.params);
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const auto start = std::chrono::steady_clock::now();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t i = 0; i < order.size(); i += cfg.batch_size) {
      std::vector<Example> batch;
      for (std::size_t k = i; k < std::min(order.size(), i + cfg.batch_size); ++k) batch.push_back(train[order[k]]);
      const LossGrad lg = learner.loss_grad(res.params, batch, rng, Mode::kTrain);
      adam_step(res.params, lg.grad, res.optimizer, cfg.lr);
      total += lg.loss;
      ++batches;
      ++res.optimizer_steps;
    }
    res.epoch_losses.push_back(total / static_cast<double>(batches));
  }
  res.wall_seconds = elapsed_ms(start) / 1000.0;
  return res;
}

}  // namespace metaforge
