#pragma once

// Two-phase training.
//
// Phase one jointly optimizes encoder, classifier and margins, with softplus
// margins initialized in [0.5, 1.0) and early stopping once full-train
// accuracy reaches a threshold. Phase two freezes the margins and keeps
// training encoder and classifier from their phase-one state until the
// monitored accuracy stops improving. Adam moments restart at the boundary.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cloc/datagen.hpp"
#include "cloc/errors.hpp"
#include "cloc/losses.hpp"
#include "cloc/margins.hpp"
#include "cloc/metrics.hpp"
#include "cloc/model.hpp"
#include "cloc/sampler.hpp"

namespace cloc {

// --- Adam ------------------------------------------------------------------

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t step = 0;
  std::vector<std::vector<double>> first;
  std::vector<std::vector<double>> second;

  AdamState() = default;
  AdamState(std::span<const Tensor> params, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8)
      : beta1(b1), beta2(b2), epsilon(eps) {
    for (const auto& p : params) {
      first.emplace_back(p.size(), 0.0);
      second.emplace_back(p.size(), 0.0);
    }
  }
};

/// One bias-corrected Adam update. A parameter without an accumulated
/// gradient is treated as having a zero gradient.
inline void adam_step(std::span<Tensor> params, AdamState& state, double lr) {
  if (state.first.size() != params.size()) throw UsageError("adam_step: state was built for a different parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.first[i].size() != params[i].size()) throw UsageError("adam_step: moment shape mismatch");
    if (params[i].has_grad()) {
      for (double g : params[i].grad())
        if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in parameter " + std::to_string(i));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].mutable_values();
    const bool has = params[i].has_grad();
    auto& m = state.first[i];
    auto& v = state.second[i];
    for (std::size_t k = 0; k < values.size(); ++k) {
      const double g = has ? params[i].grad()[k] : 0.0;
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g;
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g * g;
      const double mhat = m[k] / c1, vhat = v[k] / c2;
      values[k] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
  }
}

// --- configuration ---------------------------------------------------------

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t max_epochs = 500;
  double phase1_stop_train_accuracy = 0.95;
  bool phase1_early_stop = true;
  std::size_t phase2_patience = 10;
  std::string phase2_monitor = "train_accuracy";  // or "validation_accuracy"
  bool phase1_only = false;
  double rho = 0.0;
  BatchSpec batch_spec;
  std::uint64_t seed = 0;

  MarginMode margin_mode = MarginMode::per_pair_learnable;
  MarginActivation margin_activation = MarginActivation::softplus;
  MarginInitRange margin_init;
  double fixed_margin_value = 1.0;
  std::map<std::size_t, double> fixed_overrides;  // 0-based boundary -> value
  double mm_weight = 1.0;

  std::vector<std::size_t> encoder_hidden{64, 64};
  std::size_t embedding_dim = 16;
  std::size_t classifier_hidden = 16;

  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;

  void validate() const {
    if (!(learning_rate > 0.0)) throw UsageError("TrainConfig: learning_rate must be > 0");
    if (!(phase1_stop_train_accuracy > 0.0 && phase1_stop_train_accuracy <= 1.0)) {
      throw UsageError("TrainConfig: phase1_stop_train_accuracy must lie in (0, 1]");
    }
    if (phase2_patience < 1) throw UsageError("TrainConfig: phase2_patience must be >= 1");
    if (max_epochs < 1) throw UsageError("TrainConfig: max_epochs must be >= 1");
    if (!(rho >= 0.0)) throw UsageError("TrainConfig: rho must be >= 0");
    if (phase2_monitor != "train_accuracy" && phase2_monitor != "validation_accuracy") {
      throw UsageError("TrainConfig: phase2_monitor must be train_accuracy or validation_accuracy");
    }
    if (batch_spec.samples_per_rank < 2) throw UsageError("TrainConfig: batch_spec.samples_per_rank must be >= 2");
    if (batch_spec.ranks_per_batch == 1) throw UsageError("TrainConfig: batch_spec.ranks_per_batch must be >= 2");
  }

  /// Disables the collapse precautions: ReLU margins started near zero and
  /// no phase-one early stop.
  TrainConfig without_precautions() const {
    TrainConfig c = *this;
    c.margin_activation = MarginActivation::relu;
    c.margin_init = {0.01, 0.05};
    c.phase1_early_stop = false;
    return c;
  }

  ModelConfig model_config(std::size_t input_dim, std::size_t num_classes) const {
    return {input_dim, encoder_hidden, embedding_dim, classifier_hidden, num_classes};
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json overrides = nlohmann::json::object();
  for (const auto& [h, v] : c.fixed_overrides) overrides[std::to_string(h + 1)] = v;
  return {{"learning_rate", c.learning_rate},
          {"max_epochs", c.max_epochs},
          {"phase1_stop_train_accuracy", c.phase1_stop_train_accuracy},
          {"phase1_early_stop", c.phase1_early_stop},
          {"phase2_patience", c.phase2_patience},
          {"phase2_monitor", c.phase2_monitor},
          {"phase1_only", c.phase1_only},
          {"rho", c.rho},
          {"batch_spec",
           {{"ranks_per_batch", c.batch_spec.ranks_per_batch},
            {"samples_per_rank", c.batch_spec.samples_per_rank},
            {"seed", c.batch_spec.seed}}},
          {"seed", c.seed},
          {"margin_mode", to_string(c.margin_mode)},
          {"margin_activation", to_string(c.margin_activation)},
          {"margin_init", {c.margin_init.low, c.margin_init.high}},
          {"fixed_margin_value", c.fixed_margin_value},
          {"fixed_overrides", overrides},
          {"mm_weight", c.mm_weight},
          {"encoder_hidden", c.encoder_hidden},
          {"embedding_dim", c.embedding_dim},
          {"classifier_hidden", c.classifier_hidden},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_epsilon", c.adam_epsilon}};
}

/// Reads a config; absent keys keep their defaults, unknown keys are rejected.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw UsageError("train config must be a JSON object");
  TrainConfig c;
  const nlohmann::json known = to_json(c);
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw UsageError("train config: unknown key '" + key + "'");
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.phase1_stop_train_accuracy = j.value("phase1_stop_train_accuracy", c.phase1_stop_train_accuracy);
    c.phase1_early_stop = j.value("phase1_early_stop", c.phase1_early_stop);
    c.phase2_patience = j.value("phase2_patience", c.phase2_patience);
    c.phase2_monitor = j.value("phase2_monitor", c.phase2_monitor);
    c.phase1_only = j.value("phase1_only", c.phase1_only);
    c.rho = j.value("rho", c.rho);
    if (j.contains("batch_spec")) {
      const auto& b = j.at("batch_spec");
      c.batch_spec.ranks_per_batch = b.value("ranks_per_batch", c.batch_spec.ranks_per_batch);
      c.batch_spec.samples_per_rank = b.value("samples_per_rank", c.batch_spec.samples_per_rank);
      c.batch_spec.seed = b.value("seed", c.batch_spec.seed);
    }
    c.seed = j.value("seed", c.seed);
    if (j.contains("margin_mode")) c.margin_mode = parse_margin_mode(j.at("margin_mode").get<std::string>());
    if (j.contains("margin_activation")) {
      c.margin_activation = parse_margin_activation(j.at("margin_activation").get<std::string>());
    }
    if (j.contains("margin_init")) {
      auto r = j.at("margin_init").get<std::vector<double>>();
      if (r.size() != 2) throw UsageError("train config: margin_init must be [low, high]");
      c.margin_init = {r[0], r[1]};
    }
    c.fixed_margin_value = j.value("fixed_margin_value", c.fixed_margin_value);
    if (j.contains("fixed_overrides")) {
      for (const auto& [k, v] : j.at("fixed_overrides").items()) {
        const auto b = std::stoul(k);
        if (b == 0) throw UsageError("train config: boundaries are numbered from 1");
        c.fixed_overrides[b - 1] = v.get<double>();
      }
    }
    c.mm_weight = j.value("mm_weight", c.mm_weight);
    c.encoder_hidden = j.value("encoder_hidden", c.encoder_hidden);
    c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
    c.classifier_hidden = j.value("classifier_hidden", c.classifier_hidden);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

// --- logs ------------------------------------------------------------------

struct EpochRecord {
  int phase = 1;
  std::size_t epoch = 0;
  double objective = 0.0;  // mean batch objective over the epoch
  double ce = 0.0;
  double mm = 0.0;
  double accuracy = 0.0;  // full training set, end of epoch
  std::optional<double> monitored;  // phase-two monitored quantity when it differs from accuracy
  std::vector<double> margins;
  std::size_t batches = 0;
  std::size_t invalid_batches = 0;
  // smallest (m_h - rho) over learnable margins after any step this epoch
  double min_margin_excess = std::numeric_limits<double>::infinity();
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::string stop_reason;

  bool empty() const { return epochs.empty(); }
  const EpochRecord& last() const { return epochs.back(); }
};

/// CSV trace: a comment line describing optimizer handling, then
/// `phase,epoch,objective,ce,mm,acc,m_1..m_{C-1}`.
inline void write_train_log(std::ostream& out, std::span<const TrainLog* const> logs, std::size_t num_boundaries) {
  out << "# adam_moments=reset_per_phase\n";
  out << "phase,epoch,objective,ce,mm,acc";
  for (std::size_t h = 1; h <= num_boundaries; ++h) out << ",m_" << h;
  out << '\n';
  for (const auto* log : logs) {
    for (const auto& r : log->epochs) {
      out << r.phase << ',' << r.epoch << ',' << format_real(r.objective) << ',' << format_real(r.ce) << ','
          << format_real(r.mm) << ',' << format_real(r.accuracy);
      for (double m : r.margins) out << ',' << format_real(m);
      out << '\n';
    }
  }
}

using EpochCallback = std::function<void(const EpochRecord&)>;

// --- phases ----------------------------------------------------------------

namespace detail {

inline BatchSpec effective_batch_spec(const TrainConfig& cfg) {
  BatchSpec spec = cfg.batch_spec;
  spec.seed = derive_seed(cfg.seed, cfg.batch_spec.seed + streams::batches);
  return spec;
}

inline double min_learnable_excess(const MarginSet& ms, std::span<const double> values) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t h = 0; h < values.size(); ++h)
    if (ms.is_learnable(h)) best = std::min(best, values[h] - ms.rho());
  return best;
}

// Runs one epoch of optimizer steps; fills the objective and margin fields.
inline void train_epoch(Model& model, MarginSet& margins, const Dataset& data, const TrainConfig& cfg,
                        std::vector<Tensor>& params, AdamState& adam, std::uint64_t batch_epoch,
                        bool track_margins, EpochRecord& rec) {
  const auto batches = build_batches(data, effective_batch_spec(cfg), batch_epoch);
  double objective = 0.0, ce = 0.0, mm = 0.0;
  for (const auto& batch : batches) {
    if (!validate_batch(batch).ok) ++rec.invalid_batches;
    for (auto& p : params) p.zero_grad();
    const auto terms = batch_objective(batch, data, model, margins, cfg.mm_weight);
    terms.total.backward();
    adam_step(params, adam, cfg.learning_rate);
    objective += terms.total.item();
    ce += terms.ce_mean;
    mm += terms.mm_mean;
    if (track_margins) rec.min_margin_excess = std::min(rec.min_margin_excess, min_learnable_excess(margins, margins.values()));
  }
  for (auto& p : params) p.zero_grad();
  rec.batches = batches.size();
  const double nb = static_cast<double>(batches.size());
  rec.objective = objective / nb;
  rec.ce = ce / nb;
  rec.mm = mm / nb;
  rec.margins = margins.values();
}

}  // namespace detail

/// Joint optimization of model and learnable margins. Stops at max_epochs or
/// at the first epoch whose full-train accuracy reaches the threshold.
inline TrainLog run_phase_one(Model& model, MarginSet& margins, const Dataset& data, const TrainConfig& cfg,
                              const EpochCallback& on_epoch = {}) {
  cfg.validate();
  margins.set_trainable(true);
  std::vector<Tensor> params = model.parameters();
  for (auto& p : margins.parameters()) params.push_back(p);
  AdamState adam(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
  TrainLog log;
  log.stop_reason = "max_epochs";
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    EpochRecord rec;
    rec.phase = 1;
    rec.epoch = epoch;
    detail::train_epoch(model, margins, data, cfg, params, adam, epoch, true, rec);
    rec.accuracy = accuracy(model, data);
    log.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (cfg.phase1_early_stop && rec.accuracy >= cfg.phase1_stop_train_accuracy) {
      log.stop_reason = "train_accuracy";
      break;
    }
  }
  margins.set_trainable(false);
  return log;
}

/// Refines encoder and classifier under frozen margins; stops once the
/// monitored accuracy has not improved for phase2_patience epochs.
inline TrainLog run_phase_two(Model& model, MarginSet& margins, const Dataset& data, const TrainConfig& cfg,
                              const Dataset* validation = nullptr, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  const bool use_validation = cfg.phase2_monitor == "validation_accuracy";
  if (use_validation && (validation == nullptr || validation->empty())) {
    throw UsageError("run_phase_two: validation_accuracy monitor needs a validation set");
  }
  margins.set_trainable(false);
  std::vector<Tensor> params = model.parameters();
  AdamState adam(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
  TrainLog log;
  log.stop_reason = "max_epochs";
  double best = -std::numeric_limits<double>::infinity();
  std::size_t unimproved = 0;
  constexpr std::uint64_t kPhaseTwoEpochOffset = 1'000'000;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    EpochRecord rec;
    rec.phase = 2;
    rec.epoch = epoch;
    detail::train_epoch(model, margins, data, cfg, params, adam, kPhaseTwoEpochOffset + epoch, false, rec);
    rec.accuracy = accuracy(model, data);
    const double monitored = use_validation ? accuracy(model, *validation) : rec.accuracy;
    if (use_validation) rec.monitored = monitored;
    log.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (monitored > best) {
      best = monitored;
      unimproved = 0;
    } else if (++unimproved >= cfg.phase2_patience) {
      log.stop_reason = "patience";
      break;
    }
  }
  return log;
}

struct TrainResult {
  Model model;
  MarginSet margins;
  TrainLog phase_one;
  TrainLog phase_two;
  Model phase_one_model;  // snapshot taken at the phase boundary
};

inline MarginSet initial_margins(const TrainConfig& cfg, std::size_t num_classes) {
  MarginOptions opts;
  opts.activation = cfg.margin_activation;
  opts.fixed_value = cfg.fixed_margin_value;
  opts.fixed_overrides = cfg.fixed_overrides;
  opts.init = cfg.margin_init;
  return init_margins(OrdinalSchema::numbered(num_classes), cfg.margin_mode, cfg.seed, cfg.rho, opts);
}

/// Initialization, phase one, margin freeze, phase two.
inline TrainResult train_cloc(const Dataset& data, const TrainConfig& cfg, const Dataset* validation = nullptr,
                              const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (data.empty()) throw UsageError("train_cloc: empty training set");
  Model model = Model::init(cfg.model_config(data.dim, data.num_classes), cfg.seed);
  MarginSet margins = initial_margins(cfg, data.num_classes);
  TrainLog one = run_phase_one(model, margins, data, cfg, on_epoch);
  Model snapshot = model.clone();
  TrainLog two;
  if (!cfg.phase1_only) two = run_phase_two(model, margins, data, cfg, validation, on_epoch);
  return {std::move(model), std::move(margins), std::move(one), std::move(two), std::move(snapshot)};
}

}  // namespace cloc
