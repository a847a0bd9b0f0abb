#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "files.hpp"
#include "helpers.hpp"
#include "metaforge/checkpoint.hpp"
#include "metaforge/cli.hpp"
#include "metaforge/evalkit.hpp"
#include "metaforge/gradcheck.hpp"
#include "primitive_cases.hpp"
#include "reference_adam.hpp"

using namespace metaforge;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

NetConfig small_net(std::size_t max_len, double dropout) {
  NetConfig c;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 2;
  c.ff_dim = 32;
  c.max_len = max_len;
  c.dropout = dropout;
  return c;
}

/// Meta-training settings for the synthetic-family runs (criteria 6 and 7).
MamlConfig synthetic_maml() {
  MamlConfig m;
  m.epochs = 200;
  m.inner_optimizer = InnerOptimizer::kSgd;
  m.meta_lr = 0.003;
  m.seed = 1;
  return m;
}

Outcome gradient_correctness() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst_primitive = 0.0;
  std::string worst_name;
  for (const auto& c : testing::primitive_cases()) {
    const double e = testing::primitive_fd_error(c, 100);
    if (e > worst_primitive) worst_primitive = e, worst_name = c.name;
  }

  const NetConfig cfg = small_net(24, 0.0);
  const Vocabulary& vocab = Vocabulary::standard();
  Rng rng(21);
  std::vector<TokenSequence> batch;
  for (int i = 0; i < 3; ++i) {
    const std::string seq = testing::random_protein(10 + rng.below(10), rng);
    batch.push_back(encode_enhanced(seq, testing::random_mutations(seq, 2, rng), vocab, cfg.max_len));
  }
  const std::vector<double> targets{0.5, -1.0, 2.0};
  const TapedObjective f = [&](Tape& tape, const ParamVars& pv) {
    Rng unused(0);
    const Var pred = forward(tape, pv, cfg, batch, Mode::kEval, unused);
    return loss_mse(pred, tape.constant(Tensor({targets.size()}, targets)));
  };
  const FdCheckResult full = fd_check_detailed(f, init_params(cfg, 4), 1e-6);
  const double elapsed = seconds_since(t0);

  const bool ok = worst_primitive < 1e-5 && full.max_rel_error < 1e-4 && elapsed < 120.0;
  return {ok, "primitives worst " + fmt("%.2e", worst_primitive) + " (" + worst_name + "), full model " +
                  fmt("%.2e", full.max_rel_error) + ", " + fmt("%.1f", elapsed) + " s"};
}

Example scalar_example(double x, double y) { return {{}, {x}, y, "toy"}; }

Outcome fomaml_equivalence() {
  const LinearLearner lin(1);
  MamlConfig cfg;
  cfg.inner_optimizer = InnerOptimizer::kSgd;
  cfg.inner_steps = 1;
  cfg.clip_max_norm = 0.0;
  cfg.meta_batch = 1;
  Rng rng(7);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const double w = rng.uniform(-2, 2);
    cfg.inner_lr = rng.uniform(0.001, 0.2);
    Episode ep{"toy", {}, {}};
    for (int i = 0; i < 4; ++i) ep.support.push_back(scalar_example(rng.uniform(-2, 2), rng.uniform(-2, 2)));
    for (int i = 0; i < 4; ++i) ep.query.push_back(scalar_example(rng.uniform(-2, 2), rng.uniform(-2, 2)));

    double gs = 0.0;
    for (const auto& e : ep.support) gs += 2.0 * (w * e.features[0] - e.target) * e.features[0];
    gs /= static_cast<double>(ep.support.size());
    const double adapted = w - cfg.inner_lr * gs;
    double gq = 0.0;
    for (const auto& e : ep.query) gq += 2.0 * (adapted * e.features[0] - e.target) * e.features[0];
    gq /= static_cast<double>(ep.query.size());
    const double expected = w - cfg.meta_lr * gq / (std::abs(gq) + AdamState::kEps);

    ParamSet theta;
    theta.add("w", Tensor({1}, std::vector<double>{w}));
    AdamState adam = AdamState::zeros_like(theta);
    meta_step(lin, theta, std::span(&ep, 1), cfg, adam, rng);
    worst = std::max(worst, std::abs(theta.get("w")[0] - expected));
  }
  return {worst < 1e-10, "max |update - closed form| " + fmt("%.2e", worst) + " over 200 draws"};
}

Outcome adam_oracle() {
  double worst = 0.0;
  for (std::uint64_t trial = 0; trial < 50; ++trial) {
    Rng rng(100 + trial);
    ParamSet p;
    p.add("a", testing::random_tensor({3, 4}, rng));
    p.add("b", testing::random_tensor({5}, rng));
    std::vector<double> ref;
    for (const auto& e : p) ref.insert(ref.end(), e.value.data().begin(), e.value.data().end());
    AdamState state = AdamState::zeros_like(p);
    testing::ReferenceAdam reference;
    const double lr = rng.uniform(1e-4, 1e-1);
    for (int s = 0; s < 5; ++s) {
      ParamSet g = p.zeros_like();
      std::vector<double> flat;
      for (auto& e : g) {
        for (double& v : e.value.data()) {
          v = rng.uniform(-3, 3);
          flat.push_back(v);
        }
      }
      adam_step(p, g, state, lr);
      reference.step(ref, flat, lr);
    }
    std::size_t k = 0;
    for (const auto& e : p) {
      for (double v : e.value.data()) worst = std::max(worst, std::abs(v - ref[k++]));
    }
  }
  return {worst < 1e-12, "max per-parameter diff " + fmt("%.2e", worst) + " over 50 five-step trajectories"};
}

/// Splits a compact rendering such as "[CLS] SSG [SEP] R" into single tokens.
std::vector<std::string> split_rendered(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string word;
  while (in >> word) {
    if (word.front() == '[') {
      out.push_back(word);
    } else {
      for (char c : word) out.emplace_back(1, c);
    }
  }
  return out;
}

/// Rebuilds the wild type from enhanced tokens: segments joined by the original residues.
std::string rebuild_wild_type(const std::vector<std::string>& tokens) {
  std::string seq;
  std::size_t i = 1;
  while (i < tokens.size() && tokens[i] != "[PAD]") {
    if (tokens[i] == "[SEP]") {
      seq += tokens[i + 1];
      i += 5;
    } else {
      seq += tokens[i++];
    }
  }
  return seq;
}

Outcome encoding_properties() {
  const Vocabulary& vocab = Vocabulary::standard();
  Rng rng(4242);
  std::size_t enhanced_unk = 0, standard_missing_unk = 0, standard_checked = 0;
  for (int i = 0; i < 10000; ++i) {
    const std::string seq = testing::random_protein(1 + rng.below(300), rng);
    const auto muts = testing::random_mutations(seq, 4, rng);
    const TokenSequence enh = encode_enhanced(seq, muts, vocab, 1 + seq.size() + 4 * muts.size());
    enhanced_unk += static_cast<std::size_t>(std::count(enh.ids.begin(), enh.ids.end(), Vocabulary::kUnk));
    if (!muts.empty()) {
      const std::string text = canonical_mutation_string(muts);
      const TokenSequence st = encode_standard(seq, text, vocab, seq.size() + 2 + text.size());
      ++standard_checked;
      if (std::count(st.ids.begin(), st.ids.end(), Vocabulary::kUnk) == 0) ++standard_missing_unk;
    }
  }

  const std::string worked = "[CLS] SSGGSSILD [SEP] R [SEP] A [SEP] AVIEHNLLSAS";
  const auto tokens =
      token_strings(encode_enhanced("SSGGSSILDRAVIEHNLLSAS", parse_mutation_list("R10A"), vocab, 64), vocab);
  std::vector<std::string> active;
  for (const auto& t : tokens) {
    if (t != "[PAD]") active.push_back(t);
  }
  const bool worked_ok = active == split_rendered(worked);

  std::size_t round_trip_fail = 0;
  Rng rt(99);
  for (int i = 0; i < 1000; ++i) {
    const std::string seq = testing::random_protein(1 + rt.below(200), rt);
    const auto muts = testing::random_mutations(seq, 5, rt);
    const TokenSequence enh = encode_enhanced(seq, muts, vocab, 1 + seq.size() + 4 * muts.size() + rt.below(5));
    if (rebuild_wild_type(token_strings(enh, vocab)) != seq) ++round_trip_fail;
  }

  const bool ok = enhanced_unk == 0 && standard_missing_unk == 0 && worked_ok && round_trip_fail == 0;
  return {ok, "enhanced [UNK] " + std::to_string(enhanced_unk) + "/10000 records, standard without [UNK] " +
                  std::to_string(standard_missing_unk) + "/" + std::to_string(standard_checked) +
                  ", worked example " + (worked_ok ? "exact" : "MISMATCH") + ", round trip failures " +
                  std::to_string(round_trip_fail) + "/1000"};
}

Outcome pipeline_properties() {
  testing::TempDir dir("acceptance_pipeline");
  Rng rng(10);
  std::string table = testing::random_table(1000, rng, {"lab_a", "lab_b", "lab_c"});
  std::istringstream rows(table);
  std::string header, line;
  std::getline(rows, header);
  std::vector<std::string> lines;
  while (std::getline(rows, line)) lines.push_back(line);
  for (std::size_t i = 0; i < 50; ++i) table += lines[i * 7] + '\n';
  table += "MKT,K2R,nan,lab_a,FF\n";
  table += "MKT,Q2R,1.0,lab_a,FF\n";
  table += "MKT,K2R,,lab_a,FF\n";
  const fs::path file = testing::write_file(dir.path / "ff.csv", table);
  const std::size_t rows_in = 1000 + 50 + 3;

  const TaskDataset ds = build_task_dataset({file}, "FF", 42);
  double worst_mean = 0.0, worst_var = 0.0;
  for (const auto& [source, _] : ds.scalers) {
    std::vector<double> ys;
    for (const auto& r : ds.train) {
      if (r.source == source) ys.push_back(r.target);
    }
    double m = 0.0;
    for (double y : ys) m += y;
    m /= static_cast<double>(ys.size());
    double v = 0.0;
    for (double y : ys) v += (y - m) * (y - m);
    v /= static_cast<double>(ys.size());
    worst_mean = std::max(worst_mean, std::abs(m));
    worst_var = std::max(worst_var, std::abs(v - 1.0));
  }
  const bool counts = ds.stats.input_rows == rows_in && ds.stats.accepted + ds.stats.rejected == rows_in &&
                      ds.stats.accepted == ds.train.size() + ds.test.size() &&
                      ds.rejects.size() == ds.stats.rejected && ds.stats.duplicates == 50 &&
                      ds.stats.accepted == 1000;

  save_task_dataset(ds, dir.path / "a");
  save_task_dataset(build_task_dataset({file}, "FF", 42), dir.path / "b");
  std::size_t files = 0, differing = 0;
  for (const auto& e : fs::directory_iterator(dir.path / "a")) {
    ++files;
    if (testing::slurp(e.path()) != testing::slurp(dir.path / "b" / e.path().filename())) ++differing;
  }

  const bool ok = worst_mean < 1e-9 && worst_var < 1e-9 && counts && differing == 0 && files > 0;
  return {ok, "worst |mean| " + fmt("%.1e", worst_mean) + ", worst |var-1| " + fmt("%.1e", worst_var) +
                  ", counts " + (counts ? "conserved" : "NOT conserved") + " (" + std::to_string(ds.stats.accepted) +
                  " accepted, " + std::to_string(ds.stats.rejected) + " rejected, " +
                  std::to_string(ds.stats.duplicates) + " duplicates), " + std::to_string(differing) + "/" +
                  std::to_string(files) + " files differ on rerun"};
}

Outcome meta_learning_efficacy() {
  const auto t0 = std::chrono::steady_clock::now();
  SyntheticOptions opt;
  const NetConfig net = small_net(opt.seq_len + 6, 0.1);
  const MamlConfig cfg = synthetic_maml();
  const TransformerLearner learner(net);

  std::vector<Task> train;
  for (const auto& spec : synthetic_family(8, opt, 100, "train")) {
    train.push_back(to_task(synthetic_dataset(spec, opt, 5), EncoderMode::kEnhanced, net.max_len));
  }
  const ParamSet init = learner.init(1);
  const TrainResult trained = train_maml(learner, init, train, cfg);

  std::vector<double> meta_mse, random_mse;
  std::size_t wins = 0, adapt_helps = 0;
  for (const auto& spec : synthetic_family(20, opt, 200, "held")) {
    const Task t = to_task(synthetic_dataset(spec, opt, 6), EncoderMode::kEnhanced, net.max_len);
    const AdaptEval meta = adapt_and_eval(learner, trained.params, t, cfg, 1, 7);
    const AdaptEval rand = adapt_and_eval(learner, init, t, cfg, 1, 7);
    meta_mse.push_back(meta.mse[0]);
    random_mse.push_back(rand.mse[0]);
    wins += meta.mse[0] < rand.mse[0];
    adapt_helps += meta.nmse[0] < meta.unadapted_nmse;
  }
  const double ratio = median(meta_mse) / median(random_mse);
  const double elapsed = seconds_since(t0);
  const bool ok = ratio <= 0.5 && wins >= 16 && elapsed < 600.0;
  return {ok, "median MSE meta " + fmt("%.3f", median(meta_mse)) + " vs random " + fmt("%.3f", median(random_mse)) +
                  " (ratio " + fmt("%.3f", ratio) + "), meta wins " + std::to_string(wins) +
                  "/20, adaptation lowers NMSE on " + std::to_string(adapt_helps) + "/20, " + fmt("%.0f", elapsed) +
                  " s"};
}

Outcome table_ordering() {
  SyntheticOptions base;
  base.alphabet = "ADFHLNQSVY";
  SyntheticOptions shifted = base;
  shifted.alphabet = "CEGIKMPRTW";
  std::vector<TaskDataset> all;
  for (const auto& spec : synthetic_family(5, base, 300, "task")) all.push_back(synthetic_dataset(spec, base, 11));
  all.push_back(synthetic_dataset(synthetic_family(1, shifted, 301, "shifted")[0], shifted, 11));

  ExperimentConfig cfg;
  cfg.net = small_net(base.seq_len + 6, 0.1);
  cfg.maml = synthetic_maml();
  cfg.trials = 3;

  cfg.encoder = EncoderMode::kEnhanced;
  const double enhanced = run_cross_task(all, "task0", cfg).reports[0].nmse_mean;
  const double cross_shifted = run_cross_task(all, "shifted0", cfg).reports[0].nmse_mean;
  double pooled_shifted = 0.0;
  for (const auto& r : run_pooled(all, cfg).reports) {
    if (r.target_task == "shifted0") pooled_shifted = r.nmse_mean;
  }
  cfg.encoder = EncoderMode::kStandard;
  const double standard = run_cross_task(all, "task0", cfg).reports[0].nmse_mean;

  const bool ok = enhanced <= standard && pooled_shifted <= cross_shifted;
  return {ok, "cross-task on task0: enhanced " + fmt("%.3f", enhanced) + " vs standard " + fmt("%.3f", standard) +
                  "; shifted task: pooled " + fmt("%.3f", pooled_shifted) + " vs cross-task " +
                  fmt("%.3f", cross_shifted) + " (NMSE means over 3 trials)"};
}

double two_pass_nmse(const std::vector<double>& p, const std::vector<double>& t) {
  long double mean = 0.0L;
  for (double v : t) mean += v;
  mean /= static_cast<long double>(t.size());
  long double var = 0.0L, err = 0.0L;
  for (std::size_t i = 0; i < t.size(); ++i) {
    var += (t[i] - mean) * (t[i] - mean);
    err += (static_cast<long double>(p[i]) - t[i]) * (static_cast<long double>(p[i]) - t[i]);
  }
  return static_cast<double>(err / var);
}

Outcome nmse_metric() {
  Rng rng(8);
  double worst_oracle = 0.0, worst_affine = 0.0;
  bool constant_exact = true;
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 2 + rng.below(200);
    std::vector<double> p(n), t(n);
    for (std::size_t i = 0; i < n; ++i) {
      t[i] = rng.normal() * 3.0 + 1.0;
      p[i] = t[i] + rng.normal();
    }
    if (population_variance(t) == 0.0) continue;
    const double value = nmse(p, t);
    worst_oracle = std::max(worst_oracle, std::abs(value - two_pass_nmse(p, t)) / std::max(1.0, value));
    constant_exact = constant_exact && nmse(std::vector<double>(n, mean_of(t)), t) == 1.0;

    double a = rng.uniform(-10, 10);
    if (std::abs(a) < 0.1) a = 2.0;
    const double b = rng.uniform(-50, 50);
    std::vector<double> pa(n), ta(n);
    for (std::size_t i = 0; i < n; ++i) {
      pa[i] = a * p[i] + b;
      ta[i] = a * t[i] + b;
    }
    worst_affine = std::max(worst_affine, std::abs(nmse(pa, ta) - value));
  }
  const bool ok = worst_oracle < 1e-12 && constant_exact && worst_affine < 1e-10;
  return {ok, "vs two-pass oracle " + fmt("%.1e", worst_oracle) + ", constant-mean predictor " +
                  (constant_exact ? "exactly 1.0" : "NOT 1.0") + ", affine drift " + fmt("%.1e", worst_affine)};
}

Outcome train_determinism() {
  testing::TempDir dir("acceptance_determinism");
  std::ostringstream sink;
  auto cli = [&](std::vector<std::string> args) {
    args.insert(args.begin(), "metaforge");
    return cli::run(args, sink, sink);
  };
  if (cli({"synth", "--out", dir / "raw", "--tasks", "3", "--records", "60", "--seed", "5"}) != 0 ||
      cli({"ingest", "--input", dir / "raw/syn0.csv", dir / "raw/syn1.csv", dir / "raw/syn2.csv", "--out",
           dir / "data", "--seed", "2"}) != 0) {
    return {false, "could not prepare data: " + sink.str()};
  }
  testing::write_file(dir.path / "config.json",
                      R"({"net": {"d_model": 16, "n_heads": 2, "n_layers": 2, "ff_dim": 32, "max_len": 32},)"
                      R"( "maml": {"epochs": 10}, "trials": 3})");
  const std::vector<std::string> args{"train", "--config", dir / "config.json", "--data", dir / "data",
                                      "--exclude-task", "syn2", "--seed", "17", "--deterministic", "--out",
                                      dir / "run"};
  const std::vector<std::string> files{"checkpoint.mfck", "reports.json", "train_log.jsonl"};
  if (cli(args) != 0) return {false, "first run failed: " + sink.str()};
  std::vector<std::string> first;
  for (const auto& f : files) first.push_back(testing::slurp(dir.path / "run" / f));
  fs::remove_all(dir.path / "run");
  if (cli(args) != 0) return {false, "second run failed: " + sink.str()};
  std::size_t differing = 0;
  for (std::size_t i = 0; i < files.size(); ++i) differing += testing::slurp(dir.path / "run" / files[i]) != first[i];
  return {differing == 0 && !first[0].empty(), std::to_string(differing) + "/" + std::to_string(files.size()) +
                                                   " artifacts differ between two runs (checkpoint " +
                                                   std::to_string(first[0].size()) + " bytes)"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria, one PASS/FAIL line each"};
  std::vector<int> only;
  app.add_option("--only", only, "Run only these criteria (1-9)");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient correctness", gradient_correctness},
      {"first-order MAML equivalence", fomaml_equivalence},
      {"Adam oracle", adam_oracle},
      {"encoding properties", encoding_properties},
      {"pipeline properties", pipeline_properties},
      {"meta-learning efficacy", meta_learning_efficacy},
      {"method ordering on the shifted synthetic family", table_ordering},
      {"NMSE metric", nmse_metric},
      {"determinism", train_determinism},
  };

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
