#include "metaforge/evalkit.hpp"

#include <openssl/sha.h>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <set>
#include <sstream>
#include <tuple>

#include "metaforge/errors.hpp"

namespace metaforge {
namespace {

const TaskDataset& find_task(const std::vector<TaskDataset>& all, const std::string& name) {
  for (const auto& t : all) {
    if (t.task == name) return t;
  }
  std::string known;
  for (const auto& t : all) known += (known.empty() ? "" : ", ") + t.task;
  throw DataError("unknown task '" + name + "' (available: " + known + ")");
}

std::string checkpoint_hash(const NetConfig& net, const TrainResult& tr) {
  Checkpoint ck{net, tr.params, {}, nlohmann::ordered_json::object()};
  return short_hash(serialize_checkpoint(ck));
}

RunReport base_report(Protocol protocol, const std::string& target, const ExperimentConfig& cfg) {
  RunReport r;
  r.protocol = protocol;
  r.target_task = target;
  r.encoder = cfg.encoder;
  r.config_hash = cfg.hash();
  return r;
}

void fill_trials(RunReport& r, const AdaptEval& ev) {
  r.trial_nmse = ev.nmse;
  r.seeds = ev.seeds;
  r.unadapted_nmse = ev.unadapted_nmse;
  r.summarize();
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace

std::string to_string(Protocol p) {
  switch (p) {
    case Protocol::kCrossTask: return "cross_task";
    case Protocol::kPooledMeta: return "pooled_meta";
    case Protocol::kFinetune: return "finetune";
    case Protocol::kFinetunePooled: return "finetune_pooled";
  }
  return "unknown";
}

Protocol parse_protocol(std::string_view text) {
  for (Protocol p : {Protocol::kCrossTask, Protocol::kPooledMeta, Protocol::kFinetune, Protocol::kFinetunePooled}) {
    if (to_string(p) == text) return p;
  }
  throw ParseError("unknown protocol '" + std::string(text) + "'");
}

void RunReport::summarize() {
  if (trial_nmse.empty()) {
    nmse_mean = nmse_variance = 0.0;
    return;
  }
  nmse_mean = mean_of(trial_nmse);
  nmse_variance = population_variance(trial_nmse);
}

nlohmann::ordered_json RunReport::to_json() const {
  return {{"protocol", to_string(protocol)},
          {"target_task", target_task},
          {"encoder_mode", std::string(metaforge::to_string(encoder))},
          {"trial_nmse", trial_nmse},
          {"seeds", seeds},
          {"nmse_mean", nmse_mean},
          {"nmse_variance", nmse_variance},
          {"unadapted_nmse", unadapted_nmse},
          {"wall_seconds", wall_seconds},
          {"train_size", train_size},
          {"training_tasks", training_tasks},
          {"config_hash", config_hash},
          {"checkpoint_hash", checkpoint_hash}};
}

RunReport RunReport::from_json(const nlohmann::ordered_json& j) {
  try {
    RunReport r;
    r.protocol = parse_protocol(j.at("protocol").get<std::string>());
    r.target_task = j.at("target_task").get<std::string>();
    r.encoder = parse_encoder_mode(j.at("encoder_mode").get<std::string>());
    r.trial_nmse = j.at("trial_nmse").get<std::vector<double>>();
    r.seeds = j.value("seeds", std::vector<std::uint64_t>{});
    r.unadapted_nmse = j.value("unadapted_nmse", 0.0);
    r.wall_seconds = j.value("wall_seconds", 0.0);
    r.train_size = j.value("train_size", std::size_t{0});
    r.training_tasks = j.value("training_tasks", std::vector<std::string>{});
    r.config_hash = j.value("config_hash", std::string{});
    r.checkpoint_hash = j.value("checkpoint_hash", std::string{});
    r.summarize();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("run report: ") + e.what());
  }
}

nlohmann::ordered_json ExperimentConfig::to_json() const {
  return {{"net", net.to_json()},
          {"maml", maml.to_json()},
          {"finetune", finetune.to_json()},
          {"encoder_mode", std::string(metaforge::to_string(encoder))},
          {"trials", trials}};
}

std::string ExperimentConfig::hash() const { return short_hash(to_json().dump()); }

std::string short_hash(const std::string& bytes) {
  unsigned char digest[SHA256_DIGEST_LENGTH];
  SHA256(reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(), digest);
  std::ostringstream os;
  for (int i = 0; i < 8; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return os.str();
}

MetaRun run_cross_task(const std::vector<TaskDataset>& all, const std::string& target, const ExperimentConfig& cfg) {
  const TaskDataset& target_ds = find_task(all, target);
  std::vector<Task> train_tasks;
  for (const auto& t : all) {
    if (t.task != target) train_tasks.push_back(to_task(t, cfg.encoder, cfg.net.max_len));
  }
  if (train_tasks.size() < 2) {
    throw DataError("cross-task run needs at least 2 tasks besides '" + target + "', got " +
                    std::to_string(train_tasks.size()));
  }
  const TransformerLearner learner(cfg.net);
  MetaRun run;
  run.train = train_maml(learner, learner.init(cfg.maml.seed), train_tasks, cfg.maml);
  if (run.train.tasks_seen.count(target)) {
    throw ContractViolation("cross-task run for '" + target + "' trained on target records");
  }
  const Task eval_task = to_task(target_ds, cfg.encoder, cfg.net.max_len);
  RunReport r = base_report(Protocol::kCrossTask, target, cfg);
  fill_trials(r, adapt_and_eval(learner, run.train.params, eval_task, cfg.maml, cfg.trials, cfg.maml.seed));
  r.wall_seconds = run.train.wall_seconds;
  r.train_size = run.train.train_examples;
  r.training_tasks.assign(run.train.tasks_seen.begin(), run.train.tasks_seen.end());
  r.checkpoint_hash = checkpoint_hash(cfg.net, run.train);
  run.reports.push_back(std::move(r));
  return run;
}

MetaRun run_pooled(const std::vector<TaskDataset>& all, const ExperimentConfig& cfg) {
  std::vector<Task> tasks;
  for (const auto& t : all) tasks.push_back(to_task(t, cfg.encoder, cfg.net.max_len));
  const TransformerLearner learner(cfg.net);
  MetaRun run;
  run.train = train_maml(learner, learner.init(cfg.maml.seed), tasks, cfg.maml);
  const std::string ck_hash = checkpoint_hash(cfg.net, run.train);
  for (const Task& t : tasks) {
    RunReport r = base_report(Protocol::kPooledMeta, t.name, cfg);
    fill_trials(r, adapt_and_eval(learner, run.train.params, t, cfg.maml, cfg.trials, cfg.maml.seed));
    r.wall_seconds = run.train.wall_seconds;
    r.train_size = run.train.train_examples;
    r.training_tasks.assign(run.train.tasks_seen.begin(), run.train.tasks_seen.end());
    r.checkpoint_hash = ck_hash;
    run.reports.push_back(std::move(r));
  }
  return run;
}

FinetuneRun run_finetune(const std::vector<TaskDataset>& all, const std::string& target, const ExperimentConfig& cfg,
                         bool pooled) {
  const Task eval_task = to_task(find_task(all, target), cfg.encoder, cfg.net.max_len);
  std::vector<Example> train;
  std::set<std::string> tasks_used;
  for (const auto& t : all) {
    if (!pooled && t.task != target) continue;
    const auto ex = to_examples(t.train, cfg.encoder, cfg.net.max_len);
    train.insert(train.end(), ex.begin(), ex.end());
    tasks_used.insert(t.task);
  }
  const TransformerLearner learner(cfg.net);
  FinetuneRun run;
  RunReport& r = run.report;
  r = base_report(pooled ? Protocol::kFinetunePooled : Protocol::kFinetune, target, cfg);
  r.train_size = train.size();
  r.training_tasks.assign(tasks_used.begin(), tasks_used.end());
  r.unadapted_nmse = evaluate_nmse(learner, learner.init(cfg.finetune.seed), eval_task.test);
  for (std::size_t i = 0; i < cfg.trials; ++i) {
    FinetuneConfig fc = cfg.finetune;
    fc.seed = cfg.finetune.seed + i;
    FinetuneResult fr = train_finetune(learner, learner.init(fc.seed), train, fc);
    r.trial_nmse.push_back(evaluate_nmse(learner, fr.params, eval_task.test));
    r.seeds.push_back(fc.seed);
    r.wall_seconds += fr.wall_seconds;
    if (i == 0) {
      r.checkpoint_hash = short_hash(serialize_checkpoint({cfg.net, fr.params, {}, {}}));
      run.first = std::move(fr);
    }
  }
  r.wall_seconds /= static_cast<double>(std::max<std::size_t>(cfg.trials, 1));
  r.summarize();
  return run;
}

nlohmann::ordered_json ComparisonTable::to_json() const {
  auto rows_json = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    rows_json.push_back({{"task", r.task},
                         {"method", r.method},
                         {"wall_seconds", r.wall_seconds},
                         {"train_size", r.train_size},
                         {"trials", r.trials},
                         {"nmse_mean", r.nmse_mean},
                         {"nmse_variance", r.nmse_variance}});
  }
  return {{"rows", rows_json}};
}

std::string ComparisonTable::to_text() const {
  const std::vector<std::string> header{"task", "method", "time_s", "train_size", "nmse (mean ± var)"};
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : rows) {
    cells.push_back({r.task, r.method, fixed(r.wall_seconds, 1), std::to_string(r.train_size),
                     fixed(r.nmse_mean, 4) + " ± " + fixed(r.nmse_variance, 4)});
  }
  std::vector<std::size_t> width(header.size());
  const auto display_width = [](const std::string& s) {
    // "±" is two bytes in UTF-8 but one column.
    std::size_t n = 0;
    for (unsigned char c : s) n += (c & 0xC0) != 0x80;
    return n;
  };
  for (std::size_t c = 0; c < header.size(); ++c) {
    width[c] = display_width(header[c]);
    for (const auto& row : cells) width[c] = std::max(width[c], display_width(row[c]));
  }
  std::ostringstream os;
  const auto emit = [&](const std::vector<std::string>& row) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) os << "  ";
      os << row[c] << std::string(width[c] - display_width(row[c]), ' ');
    }
    os << '\n';
  };
  emit(header);
  for (const auto& row : cells) emit(row);
  return os.str();
}

ComparisonTable aggregate(const std::vector<RunReport>& reports) {
  ComparisonTable table;
  for (const auto& rep : reports) {
    ComparisonRow row;
    row.task = rep.target_task;
    row.method = to_string(rep.protocol) + "/" + std::string(metaforge::to_string(rep.encoder));
    row.wall_seconds = rep.wall_seconds;
    row.train_size = rep.train_size;
    row.trials = rep.trial_nmse.size();
    if (!rep.trial_nmse.empty()) {
      row.nmse_mean = mean_of(rep.trial_nmse);
      row.nmse_variance = population_variance(rep.trial_nmse);
    }
    table.rows.push_back(std::move(row));
  }
  std::stable_sort(table.rows.begin(), table.rows.end(), [](const ComparisonRow& a, const ComparisonRow& b) {
    return std::tie(a.task, a.method) < std::tie(b.task, b.method);
  });
  return table;
}

double hydropathy(char residue) {
  switch (residue) {
    case 'A': return 1.8;
    case 'R': return -4.5;
    case 'N': return -3.5;
    case 'D': return -3.5;
    case 'C': return 2.5;
    case 'Q': return -3.5;
    case 'E': return -3.5;
    case 'G': return -0.4;
    case 'H': return -3.2;
    case 'I': return 4.5;
    case 'L': return 3.8;
    case 'K': return -3.9;
    case 'M': return 1.9;
    case 'F': return 2.8;
    case 'P': return -1.6;
    case 'S': return -0.8;
    case 'T': return -0.7;
    case 'W': return -0.9;
    case 'Y': return -1.3;
    case 'V': return 4.2;
    default: throw ContractViolation(std::string("no hydropathy value for residue '") + residue + "'");
  }
}

std::vector<double> synthetic_features(const std::string& wild_type, const Mutation& m) {
  const double p = static_cast<double>(m.position) / static_cast<double>(wild_type.size());
  // Kyte-Doolittle spans [-4.5, 4.5], so a change spans [-9, 9].
  const double dh = (hydropathy(m.replacement) - hydropathy(m.original)) / 9.0;
  return {p, dh};
}

double synthetic_mean(const SyntheticTask& task, const Mutation& m) {
  const auto f = synthetic_features(task.wild_type, m);
  return task.hydro_coef * f[1] + task.sine_amp * std::sin(2.0 * std::numbers::pi * f[0] + task.phase) +
         task.slope * f[0];
}

std::vector<SyntheticTask> synthetic_family(std::size_t k, const SyntheticOptions& opt, std::uint64_t seed,
                                            const std::string& prefix) {
  if (opt.alphabet.size() < 2) throw ContractViolation("synthetic alphabet needs at least two residues");
  for (char c : opt.alphabet) hydropathy(c);
  Rng rng(seed);
  std::vector<SyntheticTask> tasks;
  for (std::size_t i = 0; i < k; ++i) {
    SyntheticTask t;
    t.name = prefix + std::to_string(i);
    t.alphabet = opt.alphabet;
    t.wild_type.resize(opt.seq_len);
    for (char& c : t.wild_type) c = opt.alphabet[rng.below(opt.alphabet.size())];
    t.hydro_coef = 1.0 + opt.spread * rng.normal();
    t.sine_amp = 1.0 + opt.spread * rng.normal();
    t.phase = opt.spread * rng.normal();
    t.slope = opt.spread * rng.normal();
    tasks.push_back(std::move(t));
  }
  return tasks;
}

std::vector<MutationRecord> synthetic_records(const SyntheticTask& task, std::size_t n, double noise,
                                              std::uint64_t seed) {
  const std::string& alphabet = task.alphabet;
  for (char c : task.wild_type) {
    if (alphabet.find(c) == std::string::npos) {
      throw ContractViolation("synthetic task '" + task.name + "': wild-type residue outside its alphabet");
    }
  }
  const std::size_t len = task.wild_type.size();
  const std::size_t universe = len * (alphabet.size() - 1);
  if (n > universe) {
    throw ContractViolation("synthetic task '" + task.name + "': " + std::to_string(n) +
                            " records requested but only " + std::to_string(universe) + " substitutions exist");
  }
  Rng rng(seed);
  std::vector<std::size_t> codes(universe);
  for (std::size_t i = 0; i < universe; ++i) codes[i] = i;
  rng.shuffle(std::span<std::size_t>(codes));
  std::vector<MutationRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t pos = codes[i] / (alphabet.size() - 1);
    const char orig = task.wild_type[pos];
    std::size_t r = codes[i] % (alphabet.size() - 1);
    if (r >= alphabet.find(orig)) ++r;
    const Mutation m{orig, pos + 1, alphabet[r]};
    MutationRecord rec;
    rec.sequence = task.wild_type;
    rec.mutations = {m};
    rec.target = synthetic_mean(task, m) + noise * rng.normal();
    rec.source = task.name;
    rec.task = task.name;
    out.push_back(std::move(rec));
  }
  return out;
}

TaskDataset synthetic_dataset(const SyntheticTask& task, const SyntheticOptions& opt, std::uint64_t seed) {
  return build_task_dataset(synthetic_records(task, opt.records, opt.noise, seed), {}, task.name, seed);
}

}  // namespace metaforge
