#include "metaforge/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "metaforge/checkpoint.hpp"
#include "metaforge/errors.hpp"

namespace metaforge::cli {
namespace {

constexpr const char* kSeedEnv = "METAFORGE_SEED";

nlohmann::ordered_json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return nlohmann::ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

std::uint64_t env_seed() {
  const char* v = std::getenv(kSeedEnv);
  if (!v || !*v) return 0;
  char* end = nullptr;
  const unsigned long long s = std::strtoull(v, &end, 10);
  if (*end != '\0') throw ValidationError(std::string(kSeedEnv) + " is not an unsigned integer: '" + v + "'");
  return s;
}

/// Options shared by train and eval. Values only override the config when the flag was given.
struct CommonFlags {
  std::string config;
  std::uint64_t seed = 0;
  std::string data;
  std::string out;
  std::string encoder;
  std::size_t trials = 0;
  std::size_t epochs = 0;
  std::size_t steps_per_epoch = 0;
  std::string inner_optimizer;
  bool deterministic = false;

  CLI::Option* seed_opt = nullptr;
  CLI::Option* trials_opt = nullptr;
  CLI::Option* epochs_opt = nullptr;
  CLI::Option* spe_opt = nullptr;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "JSON run configuration (flags override its values)");
    seed_opt = cmd->add_option("--seed", seed, std::string("Run seed (falls back to config, then ") + kSeedEnv + ")");
    cmd->add_option("--data", data, "Directory of ingested task datasets");
    cmd->add_option("--out", out, "Output directory");
    cmd->add_option("--encoder", encoder, "Mutation encoding: enhanced or standard");
    trials_opt = cmd->add_option("--trials", trials, "Evaluation trials (seeds seed+0, seed+1, ...)");
    epochs_opt = cmd->add_option("--epochs", epochs, "Training epochs");
    spe_opt = cmd->add_option("--steps-per-epoch", steps_per_epoch, "Meta-steps per epoch");
    cmd->add_option("--inner-optimizer", inner_optimizer, "Inner-loop optimizer: adam or sgd");
    cmd->add_flag("--deterministic", deterministic, "Single-threaded run with wall-clock fields recorded as 0");
  }

  RunConfig resolve(RunConfig base = {}) const {
    RunConfig cfg = base;
    bool seed_from_config = false;
    if (!config.empty()) {
      const auto j = read_json(config);
      seed_from_config = j.contains("seed");
      cfg = RunConfig::merge(cfg, j);
    }
    if (*seed_opt) {
      cfg.seed = seed;
    } else if (!seed_from_config && std::getenv(kSeedEnv)) {
      cfg.seed = env_seed();
    }
    if (!data.empty()) cfg.data_dir = data;
    if (!out.empty()) cfg.out_dir = out;
    if (!encoder.empty()) cfg.encoder = parse_encoder_mode(encoder);
    if (*trials_opt) cfg.trials = trials;
    if (*epochs_opt) {
      cfg.maml.epochs = epochs;
      cfg.finetune.epochs = epochs;
    }
    if (*spe_opt) cfg.maml.steps_per_epoch = steps_per_epoch;
    if (!inner_optimizer.empty()) cfg.maml.inner_optimizer = parse_inner_optimizer(inner_optimizer);
    if (cfg.trials == 0) throw ValidationError("trials must be at least 1");
    cfg.maml.validate();
    cfg.net.validate();
    return cfg;
  }
};

void zero_wall_clock(std::vector<EpochLog>& log, std::vector<RunReport>& reports) {
  for (auto& e : log) e.wall_ms = 0.0;
  for (auto& r : reports) r.wall_seconds = 0.0;
}

nlohmann::ordered_json reports_json(const std::vector<RunReport>& reports) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : reports) arr.push_back(r.to_json());
  return arr;
}

std::vector<RunReport> read_reports(const std::filesystem::path& path) {
  const auto j = read_json(path);
  std::vector<RunReport> out;
  if (j.is_array()) {
    for (const auto& r : j) out.push_back(RunReport::from_json(r));
  } else {
    out.push_back(RunReport::from_json(j));
  }
  return out;
}

int cmd_ingest(const std::vector<std::string>& inputs, const std::string& out_dir, const std::vector<std::string>& only,
               std::uint64_t seed, const PipelineOptions& opts, std::ostream& out) {
  std::vector<std::filesystem::path> files(inputs.begin(), inputs.end());
  for (const auto& f : files) read_records(f);  // surfaces missing files and columns before any output
  const std::vector<std::string> tasks = only.empty() ? tasks_in(files) : only;
  if (tasks.empty()) throw DataError("no records found in the input files");
  out << "task\taccepted\trejected\tduplicates\ttrain\ttest\n";
  for (const auto& task : tasks) {
    const TaskDataset ds = build_task_dataset(files, task, seed, opts);
    save_task_dataset(ds, std::filesystem::path(out_dir) / task);
    out << task << '\t' << ds.stats.accepted << '\t' << ds.stats.rejected << '\t' << ds.stats.duplicates << '\t'
        << ds.train.size() << '\t' << ds.test.size() << '\n';
  }
  return 0;
}

struct TrainFlags {
  std::string protocol;
  std::string exclude_task;
  std::string task;
  bool pooled = false;
};

int cmd_train(const CommonFlags& common, const TrainFlags& tf, std::ostream& out) {
  RunConfig cfg = common.resolve();
  if (!tf.protocol.empty()) cfg.protocol = tf.protocol;
  const ExperimentConfig exp = cfg.experiment();
  const auto tasks = load_task_datasets(cfg.data_dir);

  Checkpoint ck;
  ck.config = cfg.net;
  std::vector<RunReport> reports;
  std::vector<EpochLog> meta_log;
  std::vector<double> finetune_losses;

  if (cfg.protocol == "maml") {
    if (tf.pooled == !tf.exclude_task.empty()) {
      throw ValidationError("train --protocol maml needs exactly one of --exclude-task or --pooled");
    }
    MetaRun run = tf.pooled ? run_pooled(tasks, exp) : run_cross_task(tasks, tf.exclude_task, exp);
    ck.params = std::move(run.train.params);
    ck.optimizer = run.train.optimizer.to_entries();
    meta_log = std::move(run.train.log);
    reports = std::move(run.reports);
  } else if (cfg.protocol == "finetune") {
    if (tf.task.empty()) throw ValidationError("train --protocol finetune needs --task");
    FinetuneRun run = run_finetune(tasks, tf.task, exp, tf.pooled);
    ck.params = std::move(run.first.params);
    ck.optimizer = run.first.optimizer.to_entries();
    finetune_losses = std::move(run.first.epoch_losses);
    reports.push_back(std::move(run.report));
  } else {
    throw ValidationError("unknown protocol '" + cfg.protocol + "' (expected maml or finetune)");
  }
  if (common.deterministic) zero_wall_clock(meta_log, reports);

  ck.meta = {{"protocol", to_string(reports.front().protocol)},
             {"encoder_mode", std::string(to_string(cfg.encoder))},
             {"target_task", tf.pooled && cfg.protocol == "maml" ? "" : reports.front().target_task},
             {"training_tasks", reports.front().training_tasks},
             {"train_size", reports.front().train_size},
             {"run_config", cfg.to_json()}};

  std::string log_text;
  if (!meta_log.empty()) {
    for (const auto& e : meta_log) log_text += e.to_json().dump() + '\n';
  } else {
    for (std::size_t i = 0; i < finetune_losses.size(); ++i) {
      log_text += nlohmann::ordered_json{{"epoch", i + 1}, {"mean_train_loss", finetune_losses[i]}}.dump() + '\n';
    }
  }
  std::filesystem::create_directories(cfg.out_dir);
  save_checkpoint(ck, cfg.out_dir / "checkpoint.mfck");
  write_file(cfg.out_dir / "train_log.jsonl", log_text);
  write_file(cfg.out_dir / "reports.json", reports_json(reports).dump(2) + '\n');
  write_file(cfg.out_dir / "config.json", cfg.to_json().dump(2) + '\n');
  out << aggregate(reports).to_text();
  return 0;
}

int cmd_eval(const CommonFlags& common, const std::string& checkpoint, const std::string& task,
             const std::string& report_path, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  RunConfig base;
  if (ck.meta.contains("run_config")) base = RunConfig::merge(base, ck.meta["run_config"]);
  base.net = ck.config;
  RunConfig cfg = common.resolve(base);
  cfg.net = ck.config;

  const auto tasks = load_task_datasets(cfg.data_dir);
  const TaskDataset* target = nullptr;
  for (const auto& t : tasks) {
    if (t.task == task) target = &t;
  }
  if (!target) throw DataError("task '" + task + "' not found under " + cfg.data_dir.string());

  const ExperimentConfig exp = cfg.experiment();
  const TransformerLearner learner(cfg.net);
  const Task eval_task = to_task(*target, cfg.encoder, cfg.net.max_len);
  const AdaptEval ev = adapt_and_eval(learner, ck.params, eval_task, exp.maml, cfg.trials, cfg.seed);

  RunReport r;
  r.protocol = parse_protocol(ck.meta.value("protocol", std::string("cross_task")));
  r.target_task = task;
  r.encoder = cfg.encoder;
  r.trial_nmse = ev.nmse;
  r.seeds = ev.seeds;
  r.unadapted_nmse = ev.unadapted_nmse;
  r.training_tasks = ck.meta.value("training_tasks", std::vector<std::string>{});
  r.train_size = ck.meta.value("train_size", std::size_t{0});
  r.config_hash = exp.hash();
  r.checkpoint_hash = short_hash(serialize_checkpoint({ck.config, ck.params, {}, {}}));
  r.summarize();
  const std::string text = r.to_json().dump(2) + '\n';
  if (!report_path.empty()) write_file(report_path, text);
  out << text;
  return 0;
}

void print_encoding(const std::string& label, const TokenSequence& ts, std::ostream& out) {
  const Vocabulary& vocab = Vocabulary::standard();
  const auto tokens = token_strings(ts, vocab);
  out << label << ": " << render_tokens(tokens) << '\n' << label << " ids:";
  for (std::size_t i = 0; i < tokens.size(); ++i) out << ' ' << ts.ids[i];
  out << '\n';
}

int cmd_encode(const std::string& seq, const std::string& mut, const std::string& mode, std::size_t max_len,
               std::ostream& out) {
  if (mode != "enhanced" && mode != "standard" && mode != "both") {
    throw ValidationError("unknown mode '" + mode + "' (expected enhanced, standard or both)");
  }
  const auto muts = parse_mutation_list(mut);
  validate_against_sequence(seq, muts);
  const Vocabulary& vocab = Vocabulary::standard();
  if (mode != "standard") print_encoding("enhanced", encode_enhanced(seq, muts, vocab, max_len), out);
  if (mode != "enhanced") print_encoding("standard", encode_standard(seq, mut, vocab, max_len), out);
  return 0;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& json_out, std::ostream& out) {
  std::vector<RunReport> reports;
  for (const auto& path : inputs) {
    auto more = read_reports(path);
    reports.insert(reports.end(), more.begin(), more.end());
  }
  const ComparisonTable table = aggregate(reports);
  if (!json_out.empty()) write_file(json_out, table.to_json().dump(2) + '\n');
  out << table.to_text();
  return 0;
}

int cmd_synth(const std::string& out_dir, std::size_t k, const SyntheticOptions& opt, std::uint64_t seed,
              const std::string& prefix, std::ostream& out) {
  const auto family = synthetic_family(k, opt, seed, prefix);
  std::filesystem::create_directories(out_dir);
  out << "task\thydro_coef\tsine_amp\tphase\tslope\n";
  for (std::size_t i = 0; i < family.size(); ++i) {
    const auto& t = family[i];
    write_records(std::filesystem::path(out_dir) / (t.name + ".csv"),
                  synthetic_records(t, opt.records, opt.noise, seed + 1 + i));
    out << t.name << '\t' << format_double(t.hydro_coef) << '\t' << format_double(t.sine_amp) << '\t'
        << format_double(t.phase) << '\t' << format_double(t.slope) << '\n';
  }
  return 0;
}

}  // namespace

ExperimentConfig RunConfig::experiment() const {
  ExperimentConfig e;
  e.net = net;
  e.maml = maml;
  e.maml.seed = seed;
  e.finetune = finetune;
  e.finetune.seed = seed;
  e.encoder = encoder;
  e.trials = trials;
  return e;
}

nlohmann::ordered_json RunConfig::to_json() const {
  auto m = maml.to_json();
  m.erase("seed");
  auto f = finetune.to_json();
  f.erase("seed");
  return {{"net", net.to_json()},
          {"maml", m},
          {"finetune", f},
          {"encoder_mode", std::string(metaforge::to_string(encoder))},
          {"protocol", protocol},
          {"trials", trials},
          {"seed", seed},
          {"data_dir", data_dir.string()},
          {"out_dir", out_dir.string()}};
}

RunConfig RunConfig::merge(RunConfig base, const nlohmann::ordered_json& j) {
  if (!j.is_object()) throw ValidationError("run config must be a JSON object");
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "net") {
        auto merged = base.net.to_json();
        for (const auto& [k, v] : value.items()) merged[k] = v;
        base.net = NetConfig::from_json(merged);
      } else if (key == "maml") {
        auto merged = base.maml.to_json();
        for (const auto& [k, v] : value.items()) merged[k] = v;
        base.maml = MamlConfig::from_json(merged);
      } else if (key == "finetune") {
        auto merged = base.finetune.to_json();
        for (const auto& [k, v] : value.items()) merged[k] = v;
        base.finetune = FinetuneConfig::from_json(merged);
      } else if (key == "encoder_mode") {
        base.encoder = parse_encoder_mode(value.get<std::string>());
      } else if (key == "protocol") {
        base.protocol = value.get<std::string>();
      } else if (key == "trials") {
        base.trials = value.get<std::size_t>();
      } else if (key == "seed") {
        base.seed = value.get<std::uint64_t>();
      } else if (key == "data_dir") {
        base.data_dir = value.get<std::string>();
      } else if (key == "out_dir") {
        base.out_dir = value.get<std::string>();
      } else {
        throw ValidationError("run config: unknown key '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("run config: ") + e.what());
  } catch (const ContractViolation& e) {
    throw ValidationError(e.what());
  }
  return base;
}

RunConfig RunConfig::load(const std::filesystem::path& path, RunConfig base) {
  return merge(std::move(base), read_json(path));
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot meta-learning for protein mutation effect regression"};
  app.name(args.empty() ? "metaforge" : std::filesystem::path(args[0]).filename().string());
  app.require_subcommand(1);
  app.set_version_flag("--version", "metaforge 0.1.0");

  auto* ingest = app.add_subcommand("ingest", "Validate, deduplicate, split and normalize mutation tables");
  std::vector<std::string> ingest_inputs, ingest_tasks;
  std::string ingest_out;
  std::uint64_t ingest_seed = 0;
  PipelineOptions pipeline;
  ingest->add_option("--input", ingest_inputs, "CSV/TSV files (columns sequence, mutation, target, source[, task])")
      ->required();
  ingest->add_option("--out", ingest_out, "Output directory; one sub-directory per task")->required();
  ingest->add_option("--task", ingest_tasks, "Only these tasks (default: every task in the inputs)");
  auto* ingest_seed_opt = ingest->add_option("--seed", ingest_seed, "Split seed");
  ingest->add_option("--train-ratio", pipeline.train_ratio, "Train fraction")->capture_default_str();
  ingest->add_option("--bins", pipeline.bins, "Target bins for stratification")->capture_default_str();

  auto* train = app.add_subcommand("train", "Meta-train or fine-tune, then evaluate");
  CommonFlags train_flags;
  train_flags.attach(train);
  TrainFlags tf;
  train->add_option("--protocol", tf.protocol, "maml or finetune");
  train->add_option("--exclude-task", tf.exclude_task, "Cross-task run: meta-train on every other task");
  train->add_option("--task", tf.task, "Target task for fine-tuning");
  train->add_flag("--pooled", tf.pooled, "Train on every task's train split");

  auto* eval = app.add_subcommand("eval", "Adapt a checkpoint to a task and report NMSE");
  CommonFlags eval_flags;
  eval_flags.attach(eval);
  std::string ck_path, eval_task, report_path;
  eval->add_option("--checkpoint", ck_path, "Checkpoint file")->required();
  eval->add_option("--task", eval_task, "Target task")->required();
  eval->add_option("--report", report_path, "Also write the report JSON here");

  auto* encode = app.add_subcommand("encode", "Show the token encoding of a mutated sequence");
  std::string enc_seq, enc_mut, enc_mode = "both";
  std::size_t enc_max_len = 1024;
  encode->add_option("--seq", enc_seq, "Wild-type sequence")->required();
  encode->add_option("--mut", enc_mut, "Mutations such as R10A;K12E (empty for wild type)");
  encode->add_option("--mode", enc_mode, "enhanced, standard or both")->capture_default_str();
  encode->add_option("--max-len", enc_max_len, "Token budget")->capture_default_str();

  auto* report = app.add_subcommand("report", "Aggregate run reports into a comparison table");
  std::vector<std::string> report_inputs;
  std::string report_json;
  report->add_option("--input", report_inputs, "Report files (reports.json or single report)");
  report->add_option("--json", report_json, "Also write the table as JSON");

  auto* synth = app.add_subcommand("synth", "Write a synthetic task family as CSV files");
  std::string synth_out;
  std::size_t synth_k = 3;
  std::uint64_t synth_seed = 0;
  std::string synth_prefix = "syn";
  SyntheticOptions synth_opt;
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--tasks", synth_k, "Number of tasks")->capture_default_str();
  synth->add_option("--records", synth_opt.records, "Records per task")->capture_default_str();
  synth->add_option("--seq-len", synth_opt.seq_len, "Wild-type length")->capture_default_str();
  synth->add_option("--noise", synth_opt.noise, "Gaussian noise standard deviation")->capture_default_str();
  synth->add_option("--seed", synth_seed, "Family seed")->capture_default_str();
  synth->add_option("--prefix", synth_prefix, "Task name prefix")->capture_default_str();
  synth->add_option("--alphabet", synth_opt.alphabet, "Residues used by wild types and replacements")
      ->capture_default_str();

  std::vector<const char*> argv;
  if (args.empty()) argv.push_back("metaforge");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kFailure);
  }

  try {
    if (*ingest) {
      std::uint64_t seed = ingest_seed;
      if (!*ingest_seed_opt && std::getenv(kSeedEnv)) seed = env_seed();
      return cmd_ingest(ingest_inputs, ingest_out, ingest_tasks, seed, pipeline, out);
    }
    if (*train) return cmd_train(train_flags, tf, out);
    if (*eval) return cmd_eval(eval_flags, ck_path, eval_task, report_path, out);
    if (*encode) return cmd_encode(enc_seq, enc_mut, enc_mode, enc_max_len, out);
    if (*report) return cmd_report(report_inputs, report_json, out);
    if (*synth) return cmd_synth(synth_out, synth_k, synth_opt, synth_seed, synth_prefix, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kFailure);
  }
  return 0;
}

}  // namespace metaforge::cli
