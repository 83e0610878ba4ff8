#pragma once

// Inter-rank margins. Boundary h (0-based) separates rank h from rank h + 1;
// the margin required between two arbitrary ranks is the sum of the adjacent
// margins along the path between them.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cloc/errors.hpp"
#include "cloc/log.hpp"
#include "cloc/ops.hpp"
#include "cloc/random.hpp"
#include "cloc/tensor.hpp"

namespace cloc {

/// 0-based position in the rank order.
using Rank = std::size_t;

class OrdinalSchema {
 public:
  explicit OrdinalSchema(std::vector<std::string> labels) : labels_(std::move(labels)) {
    if (labels_.size() < 2) throw UsageError("OrdinalSchema: at least two ranks are required");
  }

  /// Ranks named "1".."C".
  static OrdinalSchema numbered(std::size_t num_classes) {
    if (num_classes < 2) throw UsageError("OrdinalSchema: at least two ranks are required");
    std::vector<std::string> labels;
    for (std::size_t i = 1; i <= num_classes; ++i) labels.push_back(std::to_string(i));
    return OrdinalSchema(std::move(labels));
  }

  std::size_t num_classes() const { return labels_.size(); }
  std::size_t num_boundaries() const { return labels_.size() - 1; }
  const std::string& label(Rank r) const { return labels_.at(r); }
  const std::vector<std::string>& labels() const { return labels_; }

  std::pair<Rank, Rank> boundary(std::size_t h) const {
    if (h >= num_boundaries()) throw UsageError("boundary index " + std::to_string(h) + " out of range");
    return {h, h + 1};
  }
  std::string boundary_name(std::size_t h) const {
    auto [lo, hi] = boundary(h);
    return labels_[lo] + "-" + labels_[hi];
  }

  bool operator==(const OrdinalSchema&) const = default;

 private:
  std::vector<std::string> labels_;
};

enum class MarginMode { per_pair_learnable, single_learnable, all_fixed };
enum class MarginActivation { softplus, relu };

inline std::string to_string(MarginMode mode) {
  switch (mode) {
    case MarginMode::per_pair_learnable: return "per_pair_learnable";
    case MarginMode::single_learnable: return "single_learnable";
    case MarginMode::all_fixed: return "all_fixed";
  }
  return "?";
}

inline MarginMode parse_margin_mode(const std::string& s) {
  if (s == "per_pair_learnable" || s == "per_pair") return MarginMode::per_pair_learnable;
  if (s == "single_learnable" || s == "single") return MarginMode::single_learnable;
  if (s == "all_fixed" || s == "fixed") return MarginMode::all_fixed;
  throw UsageError("unknown margin mode '" + s + "'");
}

inline std::string to_string(MarginActivation a) { return a == MarginActivation::softplus ? "softplus" : "relu"; }

inline MarginActivation parse_margin_activation(const std::string& s) {
  if (s == "softplus") return MarginActivation::softplus;
  if (s == "relu") return MarginActivation::relu;
  throw UsageError("unknown margin activation '" + s + "'");
}

inline double apply_activation(MarginActivation a, double x) {
  return a == MarginActivation::softplus ? detail::stable_softplus(x) : std::max(0.0, x);
}

/// Raw parameter whose activation equals y (y > 0).
inline double inverse_activation(MarginActivation a, double y) {
  if (!(y > 0.0)) throw DomainError("inverse_activation: target must be positive");
  if (a == MarginActivation::relu) return y;
  // log(e^y - 1), written to stay accurate for small and large y
  return y > 30.0 ? y + std::log1p(-std::exp(-y)) : std::log(std::expm1(y));
}

/// Half-open range the activated margins are drawn from at initialization.
struct MarginInitRange {
  double low = 0.5;
  double high = 1.0;
};

struct MarginOptions {
  MarginActivation activation = MarginActivation::softplus;
  double fixed_value = 1.0;                     // all_fixed mode
  std::map<std::size_t, double> fixed_overrides;  // boundary -> constant
  MarginInitRange init;
};

class MarginSet {
 public:
  MarginSet(OrdinalSchema schema, MarginMode mode, MarginActivation activation, double rho, double fixed_value,
            std::map<std::size_t, double> overrides, Tensor raw)
      : schema_(std::move(schema)),
        mode_(mode),
        activation_(activation),
        rho_(rho),
        fixed_value_(fixed_value),
        overrides_(std::move(overrides)),
        raw_(std::move(raw)) {
    if (!(rho_ >= 0.0)) throw UsageError("MarginSet: rho must be >= 0");
    for (const auto& [h, v] : overrides_) {
      if (h >= schema_.num_boundaries()) {
        throw UsageError("MarginSet: override for boundary " + std::to_string(h + 1) + " but only " +
                         std::to_string(schema_.num_boundaries()) + " boundaries exist");
      }
      if (!std::isfinite(v) || v < 0.0) throw UsageError("MarginSet: override values must be finite and >= 0");
    }
    const std::size_t expected = mode_ == MarginMode::per_pair_learnable ? schema_.num_boundaries()
                                 : mode_ == MarginMode::single_learnable ? 1
                                                                         : 0;
    const std::size_t have = raw_.defined() ? raw_.size() : 0;
    if (have != expected) {
      throw UsageError("MarginSet: mode " + to_string(mode_) + " needs " + std::to_string(expected) +
                       " raw parameters, got " + std::to_string(have));
    }
  }

  const OrdinalSchema& schema() const { return schema_; }
  MarginMode mode() const { return mode_; }
  MarginActivation activation() const { return activation_; }
  double rho() const { return rho_; }
  double fixed_value() const { return fixed_value_; }
  const std::map<std::size_t, double>& overrides() const { return overrides_; }
  std::size_t size() const { return schema_.num_boundaries(); }

  bool is_overridden(std::size_t h) const { return overrides_.contains(h); }
  bool is_learnable(std::size_t h) const { return !is_overridden(h) && mode_ != MarginMode::all_fixed; }

  /// "learnable", "shared" or "fixed", as shown in margin reports.
  std::string boundary_mode(std::size_t h) const {
    if (!is_learnable(h)) return "fixed";
    return mode_ == MarginMode::single_learnable ? "shared" : "learnable";
  }

  /// Activated margins m_h = rho + act(theta_h), overrides substituted.
  Tensor activated() const {
    const std::size_t n = size();
    Tensor act;
    if (raw_.defined()) act = activation_ == MarginActivation::softplus ? softplus(raw_) : relu(raw_);
    std::vector<Tensor> parts;
    parts.reserve(n);
    for (std::size_t h = 0; h < n; ++h) {
      if (auto it = overrides_.find(h); it != overrides_.end()) {
        parts.push_back(Tensor::scalar(it->second));
      } else if (mode_ == MarginMode::all_fixed) {
        parts.push_back(Tensor::scalar(fixed_value_));
      } else {
        const std::size_t idx = mode_ == MarginMode::single_learnable ? 0 : h;
        parts.push_back(add_scalar(select(act, idx), rho_));
      }
    }
    return stack(parts);
  }

  std::vector<double> values() const {
    NoGradGuard guard;
    auto t = activated();
    return {t.values().begin(), t.values().end()};
  }

  /// Raw parameters the optimizer may update (empty in all_fixed mode).
  std::vector<Tensor> parameters() const {
    if (!raw_.defined()) return {};
    return {raw_};
  }
  const Tensor& raw() const { return raw_; }

  /// Freezing stops gradient flow into the raw parameters.
  void set_trainable(bool on) {
    if (raw_.defined()) raw_.set_requires_grad(on);
  }
  bool trainable() const { return raw_.defined() && raw_.requires_grad(); }

  MarginSet clone() const {
    return MarginSet(schema_, mode_, activation_, rho_, fixed_value_, overrides_,
                     raw_.defined() ? raw_.clone(raw_.requires_grad()) : Tensor{});
  }

 private:
  OrdinalSchema schema_;
  MarginMode mode_;
  MarginActivation activation_;
  double rho_;
  double fixed_value_;
  std::map<std::size_t, double> overrides_;
  Tensor raw_;
};

/// Draws each learnable activated margin from opts.init and inverts the
/// activation to obtain the raw parameter.
inline MarginSet init_margins(const OrdinalSchema& schema, MarginMode mode, std::uint64_t seed, double rho,
                              const MarginOptions& opts = {}) {
  if (!(rho >= 0.0)) throw UsageError("init_margins: rho must be >= 0");
  if (!(opts.init.low < opts.init.high) || opts.init.low < 0.0) {
    throw UsageError("init_margins: invalid initialization range");
  }
  double low = opts.init.low, high = opts.init.high;
  if (rho >= low) {
    warn("init_margins: rho=" + std::to_string(rho) + " is not below the init range; drawing margins from [rho+" +
         std::to_string(low) + ", rho+" + std::to_string(high) + ")");
    low += rho;
    high += rho;
  }
  const std::size_t count = mode == MarginMode::per_pair_learnable ? schema.num_boundaries()
                            : mode == MarginMode::single_learnable ? 1
                                                                   : 0;
  Tensor raw;
  if (count > 0) {
    Rng rng(derive_seed(seed, streams::margin_init));
    std::uniform_real_distribution<double> dist(low, high);
    std::vector<double> theta(count);
    for (auto& t : theta) {
      double target = dist(rng) - rho;
      if (opts.activation == MarginActivation::relu && target == 0.0) target = high - rho;
      t = inverse_activation(opts.activation, target);
    }
    raw = Tensor::vector(std::move(theta), true);
  }
  return MarginSet(schema, mode, opts.activation, rho, opts.fixed_value, opts.fixed_overrides, std::move(raw));
}

namespace detail {
inline void check_rank_pair(std::size_t num_classes, Rank y, Rank yk) {
  if (y >= num_classes || yk >= num_classes) throw UsageError("cumulative_margin: rank out of range");
  if (y == yk) throw UsageError("cumulative_margin: ranks must differ (margins apply to negatives only)");
}
}  // namespace detail

/// Sum of adjacent margins between ranks y and yk, accumulated from the lower rank upward.
inline double cumulative_margin(std::span<const double> margins, Rank y, Rank yk) {
  detail::check_rank_pair(margins.size() + 1, y, yk);
  const Rank lo = std::min(y, yk), hi = std::max(y, yk);
  double total = 0.0;
  for (Rank h = lo; h < hi; ++h) total += margins[h];
  return total;
}

inline Tensor cumulative_margin(const MarginSet& ms, Rank y, Rank yk) {
  detail::check_rank_pair(ms.schema().num_classes(), y, yk);
  const Tensor m = ms.activated();
  const Rank lo = std::min(y, yk), hi = std::max(y, yk);
  std::vector<Tensor> parts;
  for (Rank h = lo; h < hi; ++h) parts.push_back(select(m, h));
  return sum(stack(parts));
}

/// C x C table of cumulative margins (zero diagonal) from C - 1 activated margins.
inline Tensor cumulative_margin_table(const Tensor& margins) {
  detail::require_vector(margins, "cumulative_margin_table");
  const std::size_t c = margins.size() + 1;
  std::vector<double> table(c * c, 0.0);
  for (Rank a = 0; a < c; ++a)
    for (Rank b = a + 1; b < c; ++b) {
      double total = 0.0;
      for (Rank h = a; h < b; ++h) total += margins[h];
      table[a * c + b] = table[b * c + a] = total;
    }
  return Tensor::from_op(
      {c, c}, std::move(table), {margins},
      [c](detail::Node& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        auto& g = p.grad_buffer();
        for (Rank a = 0; a < c; ++a)
          for (Rank b = a + 1; b < c; ++b) {
            const double w = self.grad[a * c + b] + self.grad[b * c + a];
            if (w == 0.0) continue;
            for (Rank h = a; h < b; ++h) g[h] += w;
          }
      },
      "cumulative_margin_table");
}

}  // namespace cloc
