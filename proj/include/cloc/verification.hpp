#pragma once

// Self-verification batteries: reverse-mode gradients of the batch objective
// against central differences, and the loss implementations against the
// plain-double oracle.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "cloc/gradcheck.hpp"
#include "cloc/losses.hpp"
#include "cloc/margins.hpp"
#include "cloc/model.hpp"
#include "cloc/random.hpp"

namespace cloc {

struct GradientCase {
  std::size_t batch_size = 0;
  std::size_t num_classes = 0;
  std::size_t embedding_dim = 0;
  std::size_t input_dim = 0;
  MarginMode mode = MarginMode::per_pair_learnable;
  GradientCheckReport report;
};

struct GradientBattery {
  std::vector<GradientCase> cases;
  double max_relative_error = 0.0;
  bool passed = false;

  std::string summary() const {
    std::ostringstream os;
    std::size_t ok = 0, checked = 0, skipped = 0;
    for (const auto& c : cases) {
      ok += c.report.passed;
      checked += c.report.checked;
      skipped += c.report.skipped;
    }
    os << ok << "/" << cases.size() << " configurations, " << checked << " coordinates compared, " << skipped
       << " skipped at kinks, max relative error " << max_relative_error;
    return os.str();
  }
};

namespace detail {

// Labels for a batch of n items over c ranks: k ranks (>= 2) each with at
// least two items, the remainder spread over those ranks.
inline std::vector<Rank> random_batch_labels(std::size_t n, std::size_t c, Rng& rng) {
  const std::size_t max_ranks = std::min(c, n / 2);
  std::uniform_int_distribution<std::size_t> pick_k(2, max_ranks);
  const std::size_t k = pick_k(rng);
  std::vector<Rank> ranks(c);
  for (Rank r = 0; r < c; ++r) ranks[r] = r;
  std::shuffle(ranks.begin(), ranks.end(), rng);
  ranks.resize(k);
  std::vector<Rank> labels;
  for (Rank r : ranks) labels.insert(labels.end(), 2, r);
  std::uniform_int_distribution<std::size_t> pick(0, k - 1);
  while (labels.size() < n) labels.push_back(ranks[pick(rng)]);
  std::shuffle(labels.begin(), labels.end(), rng);
  return labels;
}

inline std::vector<double> normal_values(std::size_t n, Rng& rng, double sd = 1.0) {
  std::normal_distribution<double> dist(0.0, sd);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

}  // namespace detail

/// Random configurations cycling through C in {3, 5, 8}, d in {4, 16} and
/// batch sizes 6..24, each checked on the full batch objective with respect to
/// every encoder, classifier and margin parameter.
inline GradientBattery gradient_battery(std::size_t configurations = 24, std::uint64_t seed = 7,
                                        const GradientCheckOptions& opts = {}) {
  constexpr std::size_t kClasses[] = {3, 5, 8};
  constexpr std::size_t kDims[] = {4, 16};
  GradientBattery battery;
  battery.passed = true;
  Rng rng(seed);
  for (std::size_t i = 0; i < configurations; ++i) {
    GradientCase gc;
    gc.num_classes = kClasses[i % 3];
    gc.embedding_dim = kDims[(i / 3) % 2];
    std::uniform_int_distribution<std::size_t> pick_n(6, 24), pick_in(3, 6);
    gc.batch_size = pick_n(rng);
    gc.input_dim = pick_in(rng);
    gc.mode = i % 4 == 3 ? MarginMode::single_learnable : MarginMode::per_pair_learnable;

    ModelConfig cfg{gc.input_dim, {6}, gc.embedding_dim, 5, gc.num_classes};
    const std::uint64_t case_seed = derive_seed(seed, 1000 + i);
    Model model = Model::init(cfg, case_seed);
    MarginOptions mopts;
    if (i % 5 == 4) mopts.fixed_overrides[0] = 0.75;
    MarginSet margins = init_margins(OrdinalSchema::numbered(gc.num_classes), gc.mode, case_seed, 0.0, mopts);

    const auto labels = detail::random_batch_labels(gc.batch_size, gc.num_classes, rng);
    const Tensor x = Tensor::matrix(gc.batch_size, gc.input_dim,
                                    detail::normal_values(gc.batch_size * gc.input_dim, rng));
    std::vector<Tensor> params = model.parameters();
    for (auto& p : margins.parameters()) params.push_back(p);

    gc.report = gradient_check([&] { return batch_objective(x, labels, model, margins).total; }, params, opts);
    battery.max_relative_error = std::max(battery.max_relative_error, gc.report.max_relative_error);
    battery.passed = battery.passed && gc.report.passed;
    battery.cases.push_back(std::move(gc));
  }
  battery.passed = battery.passed && !battery.cases.empty();
  return battery;
}

struct OracleBattery {
  std::size_t batches = 0;
  std::size_t anchors = 0;
  double max_literal_error = 0.0;  // scalar-op path vs oracle
  double max_fused_error = 0.0;    // batched path vs oracle
  std::size_t triples = 0;
  std::size_t additivity_failures = 0;
  bool passed = false;

  std::string summary() const {
    std::ostringstream os;
    os << batches << " batches / " << anchors << " anchors, max |literal - oracle| " << max_literal_error
       << ", max |fused - oracle| " << max_fused_error << ", " << triples << " rank triples with "
       << additivity_failures << " additivity failures";
    return os.str();
  }
};

/// Margins that are multiples of 2^-10 in [1/1024, 2): every partial sum is
/// exactly representable, so summation order cannot matter.
inline std::vector<double> dyadic_margins(std::size_t n, Rng& rng) {
  std::uniform_int_distribution<int> pick(1, 2047);
  std::vector<double> m(n);
  for (auto& v : m) v = std::ldexp(static_cast<double>(pick(rng)), -10);
  return m;
}

/// Exact check of m(a, c) == m(a, b) + m(b, c) over every ordered triple a < b < c.
inline std::size_t additivity_failures(std::span<const double> margins, std::size_t* triples = nullptr) {
  const std::size_t c = margins.size() + 1;
  std::size_t failures = 0, count = 0;
  for (Rank a = 0; a < c; ++a)
    for (Rank b = a + 1; b < c; ++b)
      for (Rank d = b + 1; d < c; ++d) {
        ++count;
        const double whole = cumulative_margin(margins, a, d);
        const double split = cumulative_margin(margins, a, b) + cumulative_margin(margins, b, d);
        const double reversed = cumulative_margin(margins, d, a);
        if (whole != split || whole != reversed) ++failures;
      }
  if (triples != nullptr) *triples += count;
  return failures;
}

inline OracleBattery oracle_battery(std::size_t batches = 100, std::uint64_t seed = 11, double tolerance = 1e-10) {
  OracleBattery out;
  Rng rng(seed);
  constexpr std::size_t kClasses[] = {3, 5, 8};
  for (std::size_t b = 0; b < batches; ++b) {
    const std::size_t c = kClasses[b % 3];
    std::uniform_int_distribution<std::size_t> pick_n(6, 24), pick_d(2, 16);
    const std::size_t n = pick_n(rng), d = pick_d(rng);
    const auto labels = detail::random_batch_labels(n, c, rng);
    const auto flat = detail::normal_values(n * d, rng);
    std::uniform_real_distribution<double> pick_m(0.0, 1.5);
    std::vector<double> raw(c - 1);
    for (auto& v : raw) v = pick_m(rng);

    MarginSet margins(OrdinalSchema::numbered(c), MarginMode::per_pair_learnable, MarginActivation::relu, 0.0, 1.0,
                      {}, Tensor::vector(raw, false));
    const auto m = margins.values();

    std::vector<Tensor> rows;
    std::vector<std::vector<double>> plain;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> v(flat.begin() + i * d, flat.begin() + (i + 1) * d);
      rows.push_back(Tensor::vector(v, false));
      plain.push_back(std::move(v));
    }
    const Tensor fused =
        anchor_mmnp_losses(cosine_similarity_matrix(Tensor::matrix(n, d, flat, false)),
                           cumulative_margin_table(margins.activated()), labels);

    for (std::size_t i = 0; i < n; ++i) {
      PairSets sets{rows[i], labels[i], {}, {}};
      PlainPairSets ps{plain[i], labels[i], {}, {}};
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        if (labels[j] == labels[i]) {
          sets.positives.emplace_back(rows[j], labels[j]);
          ps.positives.emplace_back(plain[j], labels[j]);
        } else {
          sets.negatives.emplace_back(rows[j], labels[j]);
          ps.negatives.emplace_back(plain[j], labels[j]);
        }
      }
      const double expected = mmnp_oracle(ps, m);
      out.max_literal_error = std::max(out.max_literal_error, std::abs(mmnp_loss(sets, margins).item() - expected));
      out.max_fused_error = std::max(out.max_fused_error, std::abs(fused[i] - expected));
      ++out.anchors;
    }
    out.additivity_failures += additivity_failures(dyadic_margins(c - 1, rng), &out.triples);
    ++out.batches;
  }
  out.passed = out.batches > 0 && out.max_literal_error <= tolerance && out.max_fused_error <= tolerance &&
               out.additivity_failures == 0;
  return out;
}

}  // namespace cloc
