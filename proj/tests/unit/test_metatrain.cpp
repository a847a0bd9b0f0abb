#include <doctest.h>

#include <cmath>
#include <set>

#include "helpers.hpp"
#include "reference_adam.hpp"
#include "metaforge/errors.hpp"
#include "metaforge/evalkit.hpp"
#include "metaforge/metatrain.hpp"

using namespace metaforge;

namespace {

Example scalar_example(double x, double y, std::string task = "toy") { return {{}, {x}, y, std::move(task)}; }

Task numbered_task(std::size_t n, const std::string& name = "toy") {
  Task t{name, {}, {}};
  for (std::size_t i = 0; i < n; ++i) t.train.push_back(scalar_example(static_cast<double>(i), 0.0, name));
  return t;
}

ParamSet scalar_params(double w) {
  ParamSet p;
  p.add("w", Tensor({1}, std::vector<double>{w}));
  return p;
}

NetConfig tiny_net() {
  NetConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.ff_dim = 32;
  c.max_len = 30;
  c.dropout = 0.0;
  return c;
}

std::vector<Task> synthetic_tasks(std::size_t k, EncoderMode mode, std::size_t max_len, std::uint64_t seed) {
  SyntheticOptions opt;
  opt.records = 80;
  std::vector<Task> tasks;
  for (const auto& spec : synthetic_family(k, opt, seed)) {
    tasks.push_back(to_task(synthetic_dataset(spec, opt, seed + 1), mode, max_len));
  }
  return tasks;
}


}  // namespace

TEST_CASE("default configuration values") {
  const MamlConfig c;
  CHECK(c.inner_lr == 0.01);
  CHECK(c.meta_lr == 0.001);
  CHECK(c.support_size == 8);
  CHECK(c.query_size == 8);
  CHECK(c.support_size + c.query_size == 16);
  CHECK(c.meta_batch == 4);
  CHECK(c.epochs == 50);
  CHECK(c.inner_steps == 5);
  CHECK(c.inner_optimizer == InnerOptimizer::kAdam);
  CHECK(MamlConfig::from_json(c.to_json()) == c);
  auto j = c.to_json();
  j["outer_lr"] = 0.1;
  CHECK_THROWS_AS(MamlConfig::from_json(j), ValidationError);
  j = c.to_json();
  j["inner_steps"] = 0;
  CHECK_THROWS_AS(MamlConfig::from_json(j), ContractViolation);
}

TEST_CASE("sample_episode sizes, exhaustion and determinism") {
  const MamlConfig cfg;
  Rng rng(1);
  const Task big = numbered_task(1000);
  const Episode ep = sample_episode(big, cfg, rng);
  CHECK(ep.support.size() == 8);
  CHECK(ep.query.size() == 8);
  std::set<double> ids;
  for (const auto& e : ep.support) ids.insert(e.features[0]);
  for (const auto& e : ep.query) ids.insert(e.features[0]);
  CHECK(ids.size() == 16);

  const Task exact = numbered_task(16);
  const Episode all = sample_episode(exact, cfg, rng);
  ids.clear();
  for (const auto& e : all.support) ids.insert(e.features[0]);
  for (const auto& e : all.query) ids.insert(e.features[0]);
  CHECK(ids.size() == 16);
  CHECK(*ids.begin() == 0.0);
  CHECK(*ids.rbegin() == 15.0);

  Rng a(9), b(9);
  const Episode e1 = sample_episode(big, cfg, a);
  const Episode e2 = sample_episode(big, cfg, b);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(e1.support[i].features == e2.support[i].features);
    CHECK(e1.query[i].features == e2.query[i].features);
  }

  const Task small = numbered_task(15, "tiny_task");
  try {
    sample_episode(small, cfg, rng);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("tiny_task") != std::string::npos);
  }
}

TEST_CASE("inner_adapt leaves theta untouched and respects degenerate cases") {
  const LinearLearner lin(1);
  MamlConfig cfg;
  cfg.inner_optimizer = InnerOptimizer::kSgd;
  cfg.inner_steps = 1;
  Rng rng(0);

  SUBCASE("scalar hand derivative") {
    const double w = 0.7, x = 1.5, y = -0.4;
    const ParamSet theta = scalar_params(w);
    const std::vector<Example> support{scalar_example(x, y)};
    const InnerResult r = inner_adapt(lin, theta, support, cfg, rng);
    CHECK(std::abs(r.adapted.get("w")[0] - (w - 0.01 * 2.0 * x * (w * x - y))) < 1e-15);
    CHECK(theta.get("w")[0] == w);
    CHECK(r.support_losses.size() == 2);
  }

  SUBCASE("zero learning rate") {
    for (auto opt : {InnerOptimizer::kSgd, InnerOptimizer::kAdam}) {
      cfg.inner_optimizer = opt;
      cfg.inner_lr = 0.0;
      cfg.inner_steps = 4;
      const ParamSet theta = scalar_params(0.3);
      const std::vector<Example> support{scalar_example(1.0, 2.0), scalar_example(-2.0, 0.5)};
      CHECK(inner_adapt(lin, theta, support, cfg, rng).adapted == theta);
    }
  }

  SUBCASE("stationary transformer support") {
    const TransformerLearner net(tiny_net());
    const ParamSet theta = net.init(3);
    const ParamSet before = theta;
    auto support = synthetic_tasks(1, EncoderMode::kEnhanced, 30, 4)[0].train;
    support.resize(8);
    const auto out = net.predict(theta, support);
    for (std::size_t i = 0; i < support.size(); ++i) support[i].target = out[i];
    for (auto opt : {InnerOptimizer::kSgd, InnerOptimizer::kAdam}) {
      cfg.inner_optimizer = opt;
      cfg.inner_lr = 0.01;
      cfg.inner_steps = 3;
      const InnerResult r = inner_adapt(net, theta, support, cfg, rng);
      CHECK(r.adapted == theta);
      CHECK(theta == before);
    }
  }

  SUBCASE("theta is bitwise unchanged by a real adaptation") {
    const TransformerLearner net(tiny_net());
    const ParamSet theta = net.init(5);
    const ParamSet before = theta;
    auto support = synthetic_tasks(1, EncoderMode::kEnhanced, 30, 6)[0].train;
    support.resize(8);
    cfg.inner_optimizer = InnerOptimizer::kAdam;
    cfg.inner_steps = 5;
    const InnerResult r = inner_adapt(net, theta, support, cfg, rng);
    CHECK(theta == before);
    CHECK_FALSE(r.adapted == theta);
    CHECK(r.support_losses.size() == 6);
  }
}

TEST_CASE("clip_grad scaling rule") {
  ParamSet g;
  g.add("a", Tensor({2}, std::vector<double>{6.0, 0.0}));
  g.add("b", Tensor({1}, std::vector<double>{8.0}));
  const ParamSet c = clip_grad(g, 1.0);
  CHECK(std::abs(c.get("a")[0] - 0.6) < 1e-15);
  CHECK(std::abs(c.get("b")[0] - 0.8) < 1e-15);
  CHECK(std::abs(global_norm(c) - 1.0) < 1e-15);

  ParamSet small;
  small.add("a", Tensor({2}, std::vector<double>{0.3, 0.4}));
  CHECK(clip_grad(small, 1.0) == small);
  CHECK_THROWS_AS(clip_grad(small, 0.0), ContractViolation);

  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    ParamSet r;
    r.add("x", testing::random_tensor({3, 4}, rng, -5, 5));
    r.add("y", testing::random_tensor({7}, rng, -5, 5));
    const double max_norm = rng.uniform(0.1, 3.0);
    const ParamSet out = clip_grad(r, max_norm);
    double sq = 0.0;
    for (const auto& e : out) {
      for (double v : e.value.data()) sq += v * v;
    }
    CHECK(std::sqrt(sq) <= max_norm + 1e-12);
  }
}

TEST_CASE("Adam matches an independent reference over five steps") {
  Rng rng(4);
  ParamSet p;
  p.add("a", testing::random_tensor({3, 2}, rng));
  p.add("b", testing::random_tensor({4}, rng));
  std::vector<double> ref;
  for (const auto& e : p) ref.insert(ref.end(), e.value.data().begin(), e.value.data().end());
  AdamState state = AdamState::zeros_like(p);
  testing::ReferenceAdam reference;
  for (int s = 0; s < 5; ++s) {
    ParamSet g = p.zeros_like();
    std::vector<double> flat;
    for (auto& e : g) {
      for (double& v : e.value.data()) {
        v = rng.uniform(-2, 2);
        flat.push_back(v);
      }
    }
    adam_step(p, g, state, 0.001);
    reference.step(ref, flat, 0.001);
  }
  CHECK(state.step == 5);
  std::size_t k = 0;
  double worst = 0.0;
  for (const auto& e : p) {
    for (double v : e.value.data()) worst = std::max(worst, std::abs(v - ref[k++]));
  }
  CHECK(worst < 1e-12);

  ParamSet q = p;
  AdamState fresh = AdamState::zeros_like(q);
  adam_step(q, q.zeros_like(), fresh, 0.1);
  CHECK(q == p);

  const AdamState back = AdamState::from_entries(state.to_entries(), p);
  CHECK(back.step == state.step);
  CHECK(back.m == state.m);
  CHECK(back.v == state.v);
}

TEST_CASE("first-order meta-gradient equals the closed form on a scalar model") {
  const LinearLearner lin(1);
  MamlConfig cfg;
  cfg.inner_optimizer = InnerOptimizer::kSgd;
  cfg.inner_steps = 1;
  cfg.clip_max_norm = 0.0;
  cfg.meta_batch = 1;
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const double w = rng.uniform(-2, 2);
    cfg.inner_lr = rng.uniform(0.001, 0.2);
    Episode ep{"toy", {}, {}};
    for (int i = 0; i < 3; ++i) ep.support.push_back(scalar_example(rng.uniform(-2, 2), rng.uniform(-2, 2)));
    for (int i = 0; i < 4; ++i) ep.query.push_back(scalar_example(rng.uniform(-2, 2), rng.uniform(-2, 2)));

    // w' = w - a * dLs/dw;  meta-gradient = dLq/dw evaluated at w'.
    double gs = 0.0;
    for (const auto& e : ep.support) gs += 2.0 * (w * e.features[0] - e.target) * e.features[0];
    gs /= static_cast<double>(ep.support.size());
    const double w_adapted = w - cfg.inner_lr * gs;
    double gq = 0.0;
    for (const auto& e : ep.query) gq += 2.0 * (w_adapted * e.features[0] - e.target) * e.features[0];
    gq /= static_cast<double>(ep.query.size());

    ParamSet theta = scalar_params(w);
    const MetaGradient mg = meta_gradient(lin, theta, std::span(&ep, 1), cfg, rng);
    CHECK(std::abs(mg.grad.get("w")[0] - gq) < 1e-10);

    // One Adam step from zero moments moves by meta_lr * g / (|g| + eps).
    AdamState adam = AdamState::zeros_like(theta);
    meta_step(lin, theta, std::span(&ep, 1), cfg, adam, rng);
    const double expected = w - cfg.meta_lr * gq / (std::abs(gq) + AdamState::kEps);
    CHECK(std::abs(theta.get("w")[0] - expected) < 1e-10);
  }
}

TEST_CASE("meta_step with zero query gradients is the identity") {
  const LinearLearner lin(1);
  MamlConfig cfg;
  cfg.meta_batch = 2;
  std::vector<Episode> eps(2);
  for (auto& ep : eps) {
    for (double x : {1.0, -2.0, 0.5}) {
      ep.support.push_back(scalar_example(x, 0.75 * x));
      ep.query.push_back(scalar_example(2 * x, 1.5 * x));
    }
  }
  ParamSet theta = scalar_params(0.75);
  const ParamSet before = theta;
  AdamState adam = AdamState::zeros_like(theta);
  Rng rng(0);
  const MetaStepMetrics m = meta_step(lin, theta, eps, cfg, adam, rng);
  CHECK(theta == before);
  CHECK(m.grad_norm_preclip == 0.0);
}

TEST_CASE("meta-batch of averaged episodes matches the per-episode mean") {
  const LinearLearner lin(2, true);
  MamlConfig cfg;
  cfg.inner_optimizer = InnerOptimizer::kSgd;
  cfg.inner_steps = 3;
  cfg.clip_max_norm = 0.0;
  Rng rng(11);
  std::vector<Episode> eps(4);
  for (auto& ep : eps) {
    for (int i = 0; i < 8; ++i) {
      ep.support.push_back({{}, {rng.uniform(-1, 1), rng.uniform(-1, 1)}, rng.normal(), "toy"});
      ep.query.push_back({{}, {rng.uniform(-1, 1), rng.uniform(-1, 1)}, rng.normal(), "toy"});
    }
  }
  const ParamSet theta = lin.init(1);
  const MetaGradient all = meta_gradient(lin, theta, eps, cfg, rng);
  ParamSet sum = theta.zeros_like();
  for (const auto& ep : eps) axpy(sum, 0.25, meta_gradient(lin, theta, std::span(&ep, 1), cfg, rng).grad);
  for (std::size_t i = 0; i < sum.size(); ++i) CHECK(testing::max_abs_diff(sum[i].value, all.grad[i].value) < 1e-14);
}

TEST_CASE("train_maml edge cases and determinism") {
  const TransformerLearner net(tiny_net());
  const auto tasks = synthetic_tasks(2, EncoderMode::kEnhanced, 30, 20);
  MamlConfig cfg;
  cfg.seed = 3;

  cfg.epochs = 0;
  const ParamSet init = net.init(3);
  CHECK(train_maml(net, init, tasks, cfg).params == init);

  cfg.epochs = 3;
  const TrainResult a = train_maml(net, init, tasks, cfg);
  const TrainResult b = train_maml(net, init, tasks, cfg);
  CHECK(a.params == b.params);
  CHECK(a.optimizer.m == b.optimizer.m);
  CHECK(a.log.size() == 3);
  for (std::size_t i = 0; i < a.log.size(); ++i) CHECK(a.log[i].mean_query_loss == b.log[i].mean_query_loss);
  CHECK(a.optimizer.step == 3);

  std::vector<Task> undersized = tasks;
  undersized[1].name = "short_task";
  undersized[1].train.resize(10);
  CHECK_THROWS_WITH_AS(train_maml(net, init, undersized, cfg), doctest::Contains("short_task"), DataError);
}

TEST_CASE("meta-training on two synthetic tasks lowers the query loss") {
  NetConfig nc = tiny_net();
  nc.dropout = 0.1;
  const TransformerLearner net(nc);
  const auto tasks = synthetic_tasks(2, EncoderMode::kEnhanced, nc.max_len, 30);
  MamlConfig cfg;
  cfg.epochs = 50;
  cfg.seed = 5;
  cfg.inner_optimizer = InnerOptimizer::kSgd;
  const TrainResult r = train_maml(net, net.init(5), tasks, cfg);
  REQUIRE(r.log.size() == 50);
  std::size_t improved = 0, episodes = 0;
  for (const auto& e : r.log) {
    CHECK(e.grad_norm_postclip <= cfg.clip_max_norm + 1e-12);
    improved += e.support_improved;
    episodes += e.episodes;
  }
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < 10; ++i) {
    first += r.log[i].mean_query_loss;
    last += r.log[40 + i].mean_query_loss;
  }
  CHECK(last < first);
  CHECK(static_cast<double>(improved) >= 0.9 * static_cast<double>(episodes));
  CHECK(r.tasks_seen == std::set<std::string>{"syn0", "syn1"});
}

TEST_CASE("adapt_and_eval bookkeeping") {
  const TransformerLearner net(tiny_net());
  const Task t = synthetic_tasks(1, EncoderMode::kEnhanced, 30, 40)[0];
  const ParamSet theta = net.init(8);
  MamlConfig cfg;
  const AdaptEval r = adapt_and_eval(net, theta, t, cfg, 3, 100);
  CHECK(r.nmse.size() == 3);
  CHECK(r.seeds == std::vector<std::uint64_t>{100, 101, 102});

  cfg.inner_lr = 0.0;
  const AdaptEval still = adapt_and_eval(net, theta, t, cfg, 2, 1);
  for (double v : still.nmse) CHECK(v == still.unadapted_nmse);
  CHECK(still.unadapted_nmse == evaluate_nmse(net, theta, t.test));
}

TEST_CASE("train_finetune step count, zero rate and descent") {
  const TransformerLearner net(tiny_net());
  const Task t = synthetic_tasks(1, EncoderMode::kEnhanced, 30, 50)[0];
  const ParamSet init = net.init(2);
  FinetuneConfig fc;
  fc.epochs = 1;
  fc.batch_size = 4;
  const std::size_t n = t.train.size();
  CHECK(train_finetune(net, init, t.train, fc).optimizer_steps == (n + 3) / 4);

  std::vector<Example> odd(t.train.begin(), t.train.begin() + 13);
  CHECK(train_finetune(net, init, odd, fc).optimizer_steps == 4);

  fc.lr = 0.0;
  fc.epochs = 2;
  CHECK(train_finetune(net, init, t.train, fc).params == init);

  fc.lr = 1e-3;
  fc.epochs = 8;
  const FinetuneResult r = train_finetune(net, init, t.train, fc);
  CHECK(r.epoch_losses.back() < r.epoch_losses.front());
}
