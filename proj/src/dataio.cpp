#include "metaforge/dataio.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "metaforge/errors.hpp"
#include "metaforge/rng.hpp"

namespace metaforge {
namespace {

using json = nlohmann::ordered_json;

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::string trim_copy(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return std::string(s);
}

// Splits one line; CSV fields may be double-quoted with "" as an escaped quote.
std::vector<std::string> split_fields(const std::string& line, TableFormat fmt) {
  std::vector<std::string> out;
  if (fmt == TableFormat::kTsv) {
    std::size_t start = 0;
    while (true) {
      const std::size_t tab = line.find('\t', start);
      out.push_back(trim_copy(std::string_view(line).substr(start, tab - start)));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    return out;
  }
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(trim_copy(field));
      field.clear();
    } else {
      field += c;
    }
  }
  out.push_back(trim_copy(field));
  return out;
}

bool is_missing(const std::string& v) {
  const std::string l = lower(v);
  return l.empty() || l == "nan" || l == "na" || l == "n/a" || l == "null" || l == "none";
}

bool parse_double(const std::string& s, double& out) {
  const char* b = s.data();
  const char* e = s.data() + s.size();
  if (b != e && *b == '+') ++b;
  const auto [ptr, ec] = std::from_chars(b, e, out);
  return ec == std::errc{} && ptr == e;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

void write_records(const std::filesystem::path& path, const std::vector<MutationRecord>& records) {
  std::string text = "sequence,mutation,target,source,task\n";
  for (const auto& r : records) {
    text += r.sequence + ',' + canonical_mutation_string(r.mutations) + ',' + format_double(r.target) + ',' +
            csv_escape(r.source) + ',' + csv_escape(r.task) + '\n';
  }
  write_text(path, text);
}

std::string MutationRecord::key() const {
  return sequence + '\x1f' + canonical_mutation_string(mutations) + '\x1f' + source;
}

TableFormat format_for(const std::filesystem::path& path) {
  const std::string ext = lower(path.extension().string());
  return (ext == ".tsv" || ext == ".tab") ? TableFormat::kTsv : TableFormat::kCsv;
}

ReadResult read_records(const std::filesystem::path& path) { return read_records(path, format_for(path)); }

ReadResult read_records(const std::filesystem::path& path, TableFormat format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());

  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    if (trim_copy(line).empty()) continue;
    header = split_fields(line, format);
    break;
  }
  if (header.empty()) throw FormatError(path.string() + ": missing header row");

  std::unordered_map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col.emplace(lower(header[i]), i);
  for (const char* required : {"sequence", "mutation", "target", "source"}) {
    if (!col.count(required)) {
      throw FormatError(path.string() + ": missing required column '" + std::string(required) + "'");
    }
  }
  const std::size_t c_seq = col["sequence"], c_mut = col["mutation"], c_tgt = col["target"], c_src = col["source"];
  const bool has_task = col.count("task") != 0;
  const std::size_t c_task = has_task ? col["task"] : 0;
  const std::string default_task = path.stem().string();

  ReadResult result;
  const std::string file = path.string();
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim_copy(line).empty()) continue;
    ++result.rows;
    const auto fields = split_fields(line, format);
    std::string task = default_task;
    if (has_task && c_task < fields.size() && !fields[c_task].empty()) task = fields[c_task];
    const auto reject = [&](std::string reason) {
      result.rejects.push_back({file, line_no, task, std::move(reason)});
    };
    if (fields.size() != header.size()) {
      reject("expected " + std::to_string(header.size()) + " fields, found " + std::to_string(fields.size()));
      continue;
    }

    MutationRecord rec;
    rec.sequence = fields[c_seq];
    rec.source = fields[c_src];
    rec.task = task;
    rec.line = line_no;
    if (rec.source.empty()) {
      reject("missing source tag");
      continue;
    }
    const std::string& target = fields[c_tgt];
    if (is_missing(target)) {
      reject("missing experimental value");
      continue;
    }
    if (!parse_double(target, rec.target)) {
      reject("unparseable target '" + target + "'");
      continue;
    }
    if (!std::isfinite(rec.target)) {
      reject("missing experimental value");
      continue;
    }
    try {
      rec.mutations = parse_mutation_list(fields[c_mut]);
      validate_against_sequence(rec.sequence, rec.mutations);
    } catch (const Error& e) {
      reject(e.what());
      continue;
    }
    result.records.push_back(std::move(rec));
  }
  return result;
}

std::vector<MutationRecord> dedup(const std::vector<MutationRecord>& records, std::vector<Rejection>* dropped) {
  std::unordered_map<std::string, std::size_t> first_line;
  std::vector<MutationRecord> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    const auto [it, inserted] = first_line.emplace(r.key(), r.line);
    if (inserted) {
      out.push_back(r);
    } else if (dropped) {
      dropped->push_back({"", r.line, r.task, "duplicate of line " + std::to_string(it->second)});
    }
  }
  return out;
}

ScalerMap fit_scalers(const std::vector<MutationRecord>& train) {
  std::map<std::string, std::vector<double>> by_source;
  for (const auto& r : train) by_source[r.source].push_back(r.target);
  ScalerMap out;
  for (const auto& [source, values] : by_source) {
    if (values.size() < 2) {
      throw DataError("source '" + source + "' has fewer than 2 training records; cannot fit a scaler");
    }
    const double n = static_cast<double>(values.size());
    const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / n);
    if (!(sd > 0.0)) throw DataError("source '" + source + "' has zero target variance; cannot fit a scaler");
    out.emplace(source, Scaler{source, mean, sd});
  }
  return out;
}

std::vector<MutationRecord> normalize(std::vector<MutationRecord> records, const ScalerMap& scalers) {
  for (auto& r : records) {
    const auto it = scalers.find(r.source);
    if (it == scalers.end()) {
      throw DataError("source '" + r.source + "' has no training records to fit a scaler");
    }
    r.target = it->second.transform(r.target);
  }
  return records;
}

Split stratified_split(const std::vector<MutationRecord>& records, double ratio, std::size_t bins,
                       std::uint64_t seed) {
  const std::size_t n = records.size();
  if (bins < 1) throw ContractViolation("stratified_split: bins must be >= 1");
  if (n < bins) {
    throw ContractViolation("stratified_split: " + std::to_string(n) + " records cannot fill " +
                            std::to_string(bins) + " bins");
  }
  if (!(ratio > 0.0 && ratio < 1.0)) throw ContractViolation("stratified_split: ratio must be in (0, 1)");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return records[a].target < records[b].target; });

  // Bin b covers sorted ranks [b*n/bins, (b+1)*n/bins).
  std::vector<std::size_t> lo(bins), hi(bins), quota(bins);
  std::vector<std::pair<double, std::size_t>> remainders;
  const std::size_t total = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 0.5));
  std::size_t assigned = 0;
  for (std::size_t b = 0; b < bins; ++b) {
    lo[b] = b * n / bins;
    hi[b] = (b + 1) * n / bins;
    const double exact = ratio * static_cast<double>(hi[b] - lo[b]);
    quota[b] = static_cast<std::size_t>(std::floor(exact));
    assigned += quota[b];
    remainders.emplace_back(-(exact - std::floor(exact)), b);
  }
  std::stable_sort(remainders.begin(), remainders.end());
  for (std::size_t i = 0; assigned < total && i < remainders.size(); ++i, ++assigned) ++quota[remainders[i].second];

  Rng rng(seed);
  std::vector<char> in_train(n, 0);
  for (std::size_t b = 0; b < bins; ++b) {
    std::vector<std::size_t> members(order.begin() + static_cast<std::ptrdiff_t>(lo[b]),
                                     order.begin() + static_cast<std::ptrdiff_t>(hi[b]));
    rng.shuffle(std::span<std::size_t>(members));
    for (std::size_t j = 0; j < quota[b]; ++j) in_train[members[j]] = 1;
  }

  Split out;
  for (std::size_t i = 0; i < n; ++i) (in_train[i] ? out.train : out.test).push_back(records[i]);
  return out;
}

TaskDataset build_task_dataset(std::vector<MutationRecord> records, std::vector<Rejection> rejects,
                               const std::string& task, std::uint64_t seed, const PipelineOptions& options) {
  TaskDataset ds;
  ds.task = task;
  ds.stats.input_rows = records.size() + rejects.size();
  const std::size_t qc_rejects = rejects.size();
  std::vector<Rejection> dupes;
  records = dedup(records, &dupes);
  ds.stats.duplicates = dupes.size();
  ds.rejects = std::move(rejects);
  ds.rejects.insert(ds.rejects.end(), dupes.begin(), dupes.end());
  ds.stats.rejected = qc_rejects + dupes.size();
  ds.stats.accepted = records.size();
  if (records.empty()) throw DataError("task '" + task + "': no valid records");

  const std::size_t bins = std::min(options.bins, records.size());
  Split split = stratified_split(records, options.train_ratio, bins, seed);
  ds.scalers = fit_scalers(split.train);
  ds.train = normalize(std::move(split.train), ds.scalers);
  ds.test = normalize(std::move(split.test), ds.scalers);
  return ds;
}

TaskDataset build_task_dataset(const std::vector<std::filesystem::path>& files, const std::string& task,
                               std::uint64_t seed, const PipelineOptions& options) {
  std::vector<MutationRecord> records;
  std::vector<Rejection> rejects;
  for (const auto& f : files) {
    ReadResult rr = read_records(f);
    for (auto& r : rr.records) {
      if (r.task == task) records.push_back(std::move(r));
    }
    for (auto& r : rr.rejects) {
      if (r.task == task) rejects.push_back(std::move(r));
    }
  }
  TaskDataset ds = build_task_dataset(std::move(records), std::move(rejects), task, seed, options);
  return ds;
}

std::vector<std::string> tasks_in(const std::vector<std::filesystem::path>& files) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& f : files) {
    const ReadResult rr = read_records(f);
    const auto note = [&](const std::string& t) {
      if (seen.insert(t).second) out.push_back(t);
    };
    for (const auto& r : rr.records) note(r.task);
    for (const auto& r : rr.rejects) note(r.task);
  }
  return out;
}

void save_task_dataset(const TaskDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_records(dir / "train.csv", ds.train);
  write_records(dir / "test.csv", ds.test);

  json scalers = json::array();
  for (const auto& [source, s] : ds.scalers) {
    scalers.push_back({{"source", source}, {"mean", s.mean}, {"std", s.std}});
  }
  write_text(dir / "scalers.json", json{{"task", ds.task}, {"scalers", scalers}}.dump(2) + "\n");

  std::string log;
  for (const auto& r : ds.rejects) {
    log += (r.file.empty() ? std::string("-") : r.file) + ':' + std::to_string(r.line) + '\t' + r.reason + '\n';
  }
  write_text(dir / "rejects.log", log);

  const json summary = {{"task", ds.task},
                        {"input_rows", ds.stats.input_rows},
                        {"accepted", ds.stats.accepted},
                        {"rejected", ds.stats.rejected},
                        {"duplicates", ds.stats.duplicates},
                        {"train", ds.train.size()},
                        {"test", ds.test.size()}};
  write_text(dir / "summary.json", summary.dump(2) + "\n");
}

TaskDataset load_task_dataset(const std::filesystem::path& dir) {
  TaskDataset ds;
  const auto load_split = [&](const char* name) {
    ReadResult rr = read_records(dir / name, TableFormat::kCsv);
    if (!rr.rejects.empty()) {
      const auto& r = rr.rejects.front();
      throw FormatError((dir / name).string() + ":" + std::to_string(r.line) + ": " + r.reason);
    }
    return std::move(rr.records);
  };
  ds.train = load_split("train.csv");
  ds.test = load_split("test.csv");

  std::ifstream in(dir / "scalers.json", std::ios::binary);
  if (!in) throw FormatError("missing " + (dir / "scalers.json").string());
  try {
    const json j = json::parse(in);
    ds.task = j.at("task").get<std::string>();
    for (const auto& s : j.at("scalers")) {
      Scaler sc{s.at("source").get<std::string>(), s.at("mean").get<double>(), s.at("std").get<double>()};
      ds.scalers.emplace(sc.source, sc);
    }
  } catch (const json::exception& e) {
    throw FormatError((dir / "scalers.json").string() + ": " + e.what());
  }
  for (auto* split : {&ds.train, &ds.test}) {
    for (auto& r : *split) r.task = ds.task;
  }
  ds.stats.accepted = ds.train.size() + ds.test.size();
  ds.stats.input_rows = ds.stats.accepted;
  return ds;
}

std::vector<TaskDataset> load_task_datasets(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw FormatError("not a dataset directory: " + root.string());
  if (std::filesystem::exists(root / "train.csv")) return {load_task_dataset(root)};
  std::vector<std::filesystem::path> dirs;
  for (const auto& e : std::filesystem::directory_iterator(root)) {
    if (e.is_directory() && std::filesystem::exists(e.path() / "train.csv")) dirs.push_back(e.path());
  }
  std::sort(dirs.begin(), dirs.end());
  std::vector<TaskDataset> out;
  for (const auto& d : dirs) out.push_back(load_task_dataset(d));
  if (out.empty()) throw FormatError("no task datasets under " + root.string());
  return out;
}

}  // namespace metaforge
