#pragma once

// Command implementations behind the `cloc` executable. Argument parsing
// lives in tools/cloc.cpp; everything here takes plain option structs so the
// commands can also be driven in-process.
//
// Exit codes: 0 success, 1 runtime failure, 2 bad input, 3 missing or
// corrupt artifact.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cloc/datagen.hpp"
#include "cloc/errors.hpp"
#include "cloc/metrics.hpp"
#include "cloc/model.hpp"
#include "cloc/trainer.hpp"
#include "cloc/verification.hpp"
#include "cloc/version.hpp"

namespace cloc::cli {

enum ExitCode : int { kOk = 0, kRuntimeFailure = 1, kBadInput = 2, kMissingArtifact = 3 };

/// A required artifact (checkpoint) is missing or unreadable.
class ArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Runs a command body and maps exceptions onto the exit-code contract.
inline int guarded(const std::function<void()>& body, std::ostream& err = std::cerr) {
  try {
    body();
    return kOk;
  } catch (const ArtifactError& e) {
    err << "error: " << e.what() << '\n';
    return kMissingArtifact;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kBadInput;
  } catch (const DataError& e) {
    err << "error: " << e.what() << '\n';
    return kBadInput;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << '\n';
    return kBadInput;
  } catch (const nlohmann::json::exception& e) {
    err << "error: invalid JSON: " << e.what() << '\n';
    return kBadInput;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeFailure;
  }
}

// --- manifest --------------------------------------------------------------

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  std::optional<std::uint64_t> seed;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json inputs = nlohmann::json::object();
  nlohmann::json outputs = nlohmann::json::object();
  nlohmann::json timings_seconds = nlohmann::json::object();

  nlohmann::json to_json() const {
    nlohmann::json j{{"tool", "cloc"},   {"version", kVersion},  {"command", command}, {"argv", argv},
                     {"config", config}, {"inputs", inputs},     {"outputs", outputs},
                     {"timings_seconds", timings_seconds}};
    j["seed"] = seed ? nlohmann::json(*seed) : nlohmann::json(nullptr);
    return j;
  }

  void write(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write manifest " + path);
    out << to_json().dump(2) << '\n';
  }
};

namespace detail {

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError("malformed JSON in " + path + ": " + e.what());
  }
}

inline std::string sibling_manifest(const std::string& output) { return output + ".manifest.json"; }

inline Checkpoint read_checkpoint(const std::string& path) {
  if (!std::filesystem::exists(path)) throw ArtifactError("checkpoint not found: " + path);
  try {
    return load_checkpoint(path);
  } catch (const DataError& e) {
    throw ArtifactError(e.what());
  } catch (const UsageError& e) {
    throw ArtifactError(std::string("corrupt checkpoint: ") + e.what());
  } catch (const ShapeError& e) {
    throw ArtifactError(std::string("corrupt checkpoint: ") + e.what());
  }
}

inline Dataset read_dataset(const std::string& path, std::optional<std::size_t> num_classes = std::nullopt) {
  if (!std::filesystem::exists(path)) throw UsageError("data file not found: " + path);
  return load_csv(path, num_classes);
}

}  // namespace detail

// --- gen -------------------------------------------------------------------

struct GenOptions {
  std::string spec_path;
  std::string out_path;
  std::optional<std::string> bias_path;
  std::vector<std::string> argv;
};

inline void cmd_gen(const GenOptions& opts, std::ostream& log = std::cerr) {
  detail::Stopwatch clock;
  const SyntheticSpec spec = synthetic_spec_from_json(detail::read_json_file(opts.spec_path));
  Dataset ds = generate(spec);
  RunManifest manifest;
  manifest.command = "gen";
  manifest.argv = opts.argv;
  manifest.seed = spec.seed;
  manifest.config["synthetic"] = to_json(spec);
  manifest.inputs["spec"] = opts.spec_path;
  if (opts.bias_path) {
    const BiasSpec bias = bias_spec_from_json(detail::read_json_file(*opts.bias_path));
    ds = inject_bias(ds, bias);
    manifest.config["bias"] = to_json(bias);
    manifest.inputs["bias"] = *opts.bias_path;
  }
  save_csv(ds, opts.out_path);
  manifest.outputs["data"] = opts.out_path;
  manifest.timings_seconds["total"] = clock.seconds();
  manifest.write(detail::sibling_manifest(opts.out_path));
  log << "wrote " << ds.size() << " samples to " << opts.out_path << '\n';
}

// --- train -----------------------------------------------------------------

struct TrainOptions {
  std::optional<std::string> config_path;
  std::string data_path;
  std::string out_dir;
  std::optional<std::string> validation_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> margin_mode;  // per_pair | single | fixed:<v>
  std::vector<std::string> fix_margins;    // "<boundary>=<value>", 1-based
  std::optional<std::size_t> max_epochs;
  bool phase1_only = false;
  bool no_precautions = false;
  bool verbose = false;
  std::vector<std::string> argv;
};

/// Applies the --margin-mode value to cfg.
inline void apply_margin_mode(TrainConfig& cfg, const std::string& value) {
  if (value.rfind("fixed:", 0) == 0) {
    const std::string number = value.substr(6);
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(number, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != number.size()) throw UsageError("--margin-mode fixed:<v> needs a number, got '" + value + "'");
    cfg.margin_mode = MarginMode::all_fixed;
    cfg.fixed_margin_value = v;
    return;
  }
  if (value == "fixed") throw UsageError("--margin-mode fixed needs a value, e.g. fixed:1");
  cfg.margin_mode = parse_margin_mode(value);
}

/// Parses "<boundary>=<value>" with a 1-based boundary into cfg.fixed_overrides.
inline void apply_fix_margin(TrainConfig& cfg, const std::string& spec) {
  const auto eq = spec.find('=');
  if (eq == std::string::npos) throw UsageError("--fix-margin expects <boundary>=<value>, got '" + spec + "'");
  std::size_t b = 0;
  double v = 0.0;
  try {
    std::size_t used = 0;
    b = std::stoul(spec.substr(0, eq), &used);
    if (used != eq) throw std::invalid_argument("boundary");
    const std::string rest = spec.substr(eq + 1);
    v = std::stod(rest, &used);
    if (used != rest.size()) throw std::invalid_argument("value");
  } catch (const std::exception&) {
    throw UsageError("--fix-margin expects <boundary>=<value>, got '" + spec + "'");
  }
  if (b == 0) throw UsageError("--fix-margin: boundaries are numbered from 1");
  cfg.fixed_overrides[b - 1] = v;
}

inline TrainConfig resolve_train_config(const TrainOptions& opts) {
  TrainConfig cfg = opts.config_path ? train_config_from_json(detail::read_json_file(*opts.config_path)) : TrainConfig{};
  if (opts.seed) cfg.seed = *opts.seed;
  if (opts.margin_mode) apply_margin_mode(cfg, *opts.margin_mode);
  for (const auto& f : opts.fix_margins) apply_fix_margin(cfg, f);
  if (opts.max_epochs) cfg.max_epochs = *opts.max_epochs;
  if (opts.phase1_only) cfg.phase1_only = true;
  if (opts.no_precautions) cfg = cfg.without_precautions();
  cfg.validate();
  return cfg;
}

inline void cmd_train(const TrainOptions& opts, std::ostream& log = std::cerr) {
  detail::Stopwatch clock;
  const TrainConfig cfg = resolve_train_config(opts);
  const Dataset data = detail::read_dataset(opts.data_path);
  std::optional<Dataset> validation;
  if (opts.validation_path) validation = detail::read_dataset(*opts.validation_path, data.num_classes);
  for (const auto& [h, v] : cfg.fixed_overrides) {
    if (h + 1 >= data.num_classes) {
      throw UsageError("--fix-margin: boundary " + std::to_string(h + 1) + " does not exist for " +
                       std::to_string(data.num_classes) + " classes");
    }
  }
  std::filesystem::create_directories(opts.out_dir);
  const auto path = [&](const char* name) { return (std::filesystem::path(opts.out_dir) / name).string(); };

  EpochCallback progress;
  if (opts.verbose) {
    progress = [&log](const EpochRecord& r) {
      log << "phase " << r.phase << " epoch " << r.epoch << " objective " << r.objective << " acc " << r.accuracy
          << '\n';
    };
  }
  const double load_seconds = clock.seconds();
  TrainResult result = train_cloc(data, cfg, validation ? &*validation : nullptr, progress);
  const double train_seconds = clock.seconds() - load_seconds;

  save_checkpoint(path("checkpoint.json"), result.model, result.margins);
  {
    std::ofstream out(path("train_log.csv"));
    if (!out) throw std::runtime_error("cannot write " + path("train_log.csv"));
    const TrainLog* logs[] = {&result.phase_one, &result.phase_two};
    write_train_log(out, logs, result.margins.size());
  }
  {
    std::ofstream out(path("margins.json"));
    if (!out) throw std::runtime_error("cannot write " + path("margins.json"));
    out << to_json(margin_report(result.margins)).dump(2) << '\n';
  }

  RunManifest manifest;
  manifest.command = "train";
  manifest.argv = opts.argv;
  manifest.seed = cfg.seed;
  manifest.config = to_json(cfg);
  manifest.inputs["data"] = opts.data_path;
  if (opts.validation_path) manifest.inputs["validation"] = *opts.validation_path;
  if (opts.config_path) manifest.inputs["config"] = *opts.config_path;
  manifest.outputs = {{"checkpoint", path("checkpoint.json")},
                      {"train_log", path("train_log.csv")},
                      {"margins", path("margins.json")}};
  manifest.timings_seconds = {{"load", load_seconds}, {"train", train_seconds}, {"total", clock.seconds()}};
  manifest.config["phase_one_stop"] = result.phase_one.stop_reason;
  manifest.config["phase_two_stop"] = result.phase_two.stop_reason;
  manifest.write(path("manifest.json"));

  log << "phase one: " << result.phase_one.epochs.size() << " epochs (" << result.phase_one.stop_reason
      << "), train accuracy " << result.phase_one.last().accuracy << '\n';
  if (!result.phase_two.empty()) {
    log << "phase two: " << result.phase_two.epochs.size() << " epochs (" << result.phase_two.stop_reason
        << "), train accuracy " << result.phase_two.last().accuracy << '\n';
  }
  log << "outputs in " << opts.out_dir << '\n';
}

// --- eval / export ---------------------------------------------------------

struct EvalOptions {
  std::string checkpoint_path;
  std::string data_path;
  BoundaryNormalization normalization = BoundaryNormalization::pair_mass;
  bool use_clean_labels = false;  // score against the clean_label column when present
};

inline void cmd_eval(const EvalOptions& opts, std::ostream& out = std::cout) {
  const Checkpoint ck = detail::read_checkpoint(opts.checkpoint_path);
  Dataset ds = detail::read_dataset(opts.data_path, ck.model.num_classes());
  if (opts.use_clean_labels) {
    if (!ds.has_clean_labels) throw UsageError("--clean-labels: " + opts.data_path + " has no clean_label column");
    for (auto& s : ds.samples) s.label = s.clean_label;
  }
  if (ds.dim != ck.model.input_dim()) {
    throw UsageError("data has " + std::to_string(ds.dim) + " features but the checkpoint expects " +
                     std::to_string(ck.model.input_dim()));
  }
  nlohmann::json j = to_json(evaluate(ck.model, ds, opts.normalization));
  std::size_t present = 0;
  for (auto n : ds.class_counts()) present += n > 0;
  const std::optional<double> score = present >= 2 ? ordering_score(ck.model, ds) : std::nullopt;
  j["ordering_score"] = score ? nlohmann::json(*score) : nlohmann::json(nullptr);
  out << j.dump(2) << '\n';
}

struct ExportOptions {
  std::string checkpoint_path;
  std::string data_path;
  std::string out_path;
  std::vector<std::string> argv;
};

inline void cmd_export(const ExportOptions& opts, std::ostream& log = std::cerr) {
  detail::Stopwatch clock;
  const Checkpoint ck = detail::read_checkpoint(opts.checkpoint_path);
  const Dataset ds = detail::read_dataset(opts.data_path, ck.model.num_classes());
  if (ds.dim != ck.model.input_dim()) {
    throw UsageError("data has " + std::to_string(ds.dim) + " features but the checkpoint expects " +
                     std::to_string(ck.model.input_dim()));
  }
  export_embeddings(ck.model, ds, opts.out_path);
  RunManifest manifest;
  manifest.command = "export";
  manifest.argv = opts.argv;
  manifest.inputs = {{"checkpoint", opts.checkpoint_path}, {"data", opts.data_path}};
  manifest.outputs["embeddings"] = opts.out_path;
  manifest.timings_seconds["total"] = clock.seconds();
  manifest.write(detail::sibling_manifest(opts.out_path));
  log << "wrote " << ds.size() << " embeddings to " << opts.out_path << '\n';
}

// --- check -----------------------------------------------------------------

struct CheckOptions {
  std::size_t gradient_configurations = 24;
  std::size_t oracle_batches = 100;
  std::uint64_t seed = 7;
};

/// Returns true when both batteries pass.
inline bool cmd_check(const CheckOptions& opts, std::ostream& out = std::cout) {
  const auto grad = gradient_battery(opts.gradient_configurations, opts.seed);
  out << (grad.passed ? "ok  " : "FAIL") << " gradients: " << grad.summary() << '\n';
  for (const auto& c : grad.cases) {
    if (!c.report.passed) {
      out << "     batch " << c.batch_size << ", C=" << c.num_classes << ", d=" << c.embedding_dim << ": "
          << c.report.diagnostic << '\n';
    }
  }
  const auto oracle = oracle_battery(opts.oracle_batches, derive_seed(opts.seed, 1));
  out << (oracle.passed ? "ok  " : "FAIL") << " loss oracle: " << oracle.summary() << '\n';
  return grad.passed && oracle.passed;
}

}  // namespace cloc::cli
