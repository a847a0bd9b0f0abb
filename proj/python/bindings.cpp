#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "metaforge/cli.hpp"
#include "metaforge/errors.hpp"
#include "metaforge/evalkit.hpp"

namespace py = pybind11;
using namespace metaforge;

namespace {

ExperimentConfig experiment_from(const std::string& config_json) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  if (!config_json.empty()) {
    try {
      j = nlohmann::ordered_json::parse(config_json);
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("run config: ") + e.what());
    }
  }
  return cli::RunConfig::merge({}, j).experiment();
}

std::string reports_json(const std::vector<RunReport>& reports) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : reports) arr.push_back(r.to_json());
  return arr.dump();
}

py::dict encode_py(const std::string& sequence, const std::string& mutations, const std::string& mode,
                   std::size_t max_len) {
  const Vocabulary& vocab = Vocabulary::standard();
  const auto muts = parse_mutation_list(mutations);
  validate_against_sequence(sequence, muts);
  const TokenSequence ts = parse_encoder_mode(mode) == EncoderMode::kEnhanced
                               ? encode_enhanced(sequence, muts, vocab, max_len)
                               : encode_standard(sequence, mutations, vocab, max_len);
  const auto tokens = token_strings(ts, vocab);
  py::dict d;
  d["tokens"] = tokens;
  d["ids"] = ts.ids;
  d["mask"] = ts.mask;
  d["rendered"] = render_tokens(tokens);
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Few-shot meta-learning engine for protein mutation regression";

  const auto& base = py::register_exception<Error>(m, "MetaforgeError");
  py::register_exception<ContractViolation>(m, "ContractViolation", base.ptr());
  py::register_exception<ParseError>(m, "ParseError", base.ptr());
  py::register_exception<ValidationError>(m, "ValidationError", base.ptr());
  py::register_exception<FormatError>(m, "FormatError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<CheckpointError>(m, "CheckpointError", base.ptr());

  m.def("encode", &encode_py, py::arg("sequence"), py::arg("mutations") = "", py::arg("mode") = "enhanced",
        py::arg("max_len") = 1024, "Token strings, ids, mask and compact rendering of a mutated sequence.");

  m.def(
      "nmse", [](const std::vector<double>& pred, const std::vector<double>& truth) { return nmse(pred, truth); },
      py::arg("pred"), py::arg("truth"), "Mean squared error divided by the variance of the truth.");

  m.def(
      "default_config", [] { return cli::RunConfig{}.to_json().dump(); },
      "Default run configuration as a JSON string.");

  m.def(
      "run_cross_task",
      [](const std::string& data_dir, const std::string& target, const std::string& config_json) {
        const auto tasks = load_task_datasets(data_dir);
        const ExperimentConfig cfg = experiment_from(config_json);
        py::gil_scoped_release release;
        return reports_json(run_cross_task(tasks, target, cfg).reports);
      },
      py::arg("data_dir"), py::arg("target"), py::arg("config_json") = "",
      "Meta-train on every task but `target`, adapt to it and return the reports as JSON.");

  m.def(
      "run_pooled",
      [](const std::string& data_dir, const std::string& config_json) {
        const auto tasks = load_task_datasets(data_dir);
        const ExperimentConfig cfg = experiment_from(config_json);
        py::gil_scoped_release release;
        return reports_json(run_pooled(tasks, cfg).reports);
      },
      py::arg("data_dir"), py::arg("config_json") = "");

  m.def(
      "run_finetune",
      [](const std::string& data_dir, const std::string& target, bool pooled, const std::string& config_json) {
        const auto tasks = load_task_datasets(data_dir);
        const ExperimentConfig cfg = experiment_from(config_json);
        py::gil_scoped_release release;
        return reports_json({run_finetune(tasks, target, cfg, pooled).report});
      },
      py::arg("data_dir"), py::arg("target"), py::arg("pooled") = false, py::arg("config_json") = "");

  m.def(
      "cli",
      [](const std::vector<std::string>& args) {
        std::vector<std::string> argv{"metaforge"};
        argv.insert(argv.end(), args.begin(), args.end());
        std::ostringstream out, err;
        int code = 0;
        {
          py::gil_scoped_release release;
          code = cli::run(argv, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs one command line in-process; returns (exit_code, stdout, stderr).");

  m.attr("__version__") = "0.1.0";
}
