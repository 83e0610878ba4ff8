#pragma once

// Cross-entropy, the multi-margin n-pair hinge loss and the joint per-batch
// objective.
//
// For an anchor z of rank y with positives S+ and negatives S-:
//
//   loss(z) = sum_{j in S+} sum_{k in S-} max(0, M(y, y_k) + cos(z, z_k) - cos(z, z_j))
//
// where M(y, y_k) is the cumulative margin between the two ranks. The loss is
// zero exactly when every positive is more similar to the anchor than every
// negative by at least that negative's cumulative margin.

#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cloc/datagen.hpp"
#include "cloc/errors.hpp"
#include "cloc/margins.hpp"
#include "cloc/model.hpp"
#include "cloc/ops.hpp"
#include "cloc/sampler.hpp"
#include "cloc/tensor.hpp"

namespace cloc {

struct PairSets {
  Tensor anchor;
  Rank rank = 0;
  std::vector<std::pair<Tensor, Rank>> positives;
  std::vector<std::pair<Tensor, Rank>> negatives;

  void validate() const {
    if (positives.empty()) throw UsageError("PairSets: empty positive set");
    if (negatives.empty()) throw UsageError("PairSets: empty negative set");
    for (const auto& [z, r] : positives) {
      if (r != rank) throw UsageError("PairSets: positive with a different rank than the anchor");
      if (z.same_node(anchor)) throw UsageError("PairSets: the anchor cannot be its own positive");
    }
    for (const auto& [z, r] : negatives) {
      if (r == rank) throw UsageError("PairSets: negative with the anchor's rank");
    }
  }
};

inline Tensor ce_loss(Rank true_label, const Tensor& logits) { return softmax_cross_entropy(logits, true_label); }

/// Loss for a single anchor, assembled term by term from scalar ops.
inline Tensor mmnp_loss(const PairSets& pairs, const MarginSet& ms) {
  pairs.validate();
  const Tensor margins = ms.activated();
  std::vector<Tensor> terms;
  terms.reserve(pairs.positives.size() * pairs.negatives.size());
  for (const auto& [zj, yj] : pairs.positives) {
    const Tensor pos_sim = cosine_similarity(pairs.anchor, zj);
    for (const auto& [zk, yk] : pairs.negatives) {
      const Rank lo = std::min(pairs.rank, yk), hi = std::max(pairs.rank, yk);
      std::vector<Tensor> path;
      for (Rank h = lo; h < hi; ++h) path.push_back(select(margins, h));
      const Tensor cumulative = sum(stack(path));
      terms.push_back(hinge(sub(add(cumulative, cosine_similarity(pairs.anchor, zk)), pos_sim)));
    }
  }
  return sum(stack(terms));
}

/// Per-anchor losses for a whole batch. Row i of `similarities` holds the
/// cosine similarities of anchor i to every batch member; `margin_table` is
/// the C x C cumulative margin table. Each anchor uses every other member of
/// its rank as a positive and every member of another rank as a negative.
inline Tensor anchor_mmnp_losses(const Tensor& similarities, const Tensor& margin_table,
                                 std::span<const Rank> labels) {
  detail::require_matrix(similarities, "anchor_mmnp_losses");
  detail::require_matrix(margin_table, "anchor_mmnp_losses");
  const std::size_t n = labels.size();
  const std::size_t c = margin_table.rows();
  if (similarities.rows() != n || similarities.cols() != n) {
    throw ShapeError("anchor_mmnp_losses: similarity matrix " + shape_string(similarities.shape()) + " for " +
                     std::to_string(n) + " labels");
  }
  if (margin_table.cols() != c) throw ShapeError("anchor_mmnp_losses: margin table must be square");

  struct Term {
    std::size_t anchor, positive, negative;
  };
  std::vector<Term> active;
  std::vector<std::uint8_t> kinks;
  std::vector<double> losses(n, 0.0);
  const auto s = similarities.values();
  const auto t = margin_table.values();
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= c) throw UsageError("anchor_mmnp_losses: label out of range");
    std::size_t np = 0, nn = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i || labels[j] != labels[i]) continue;
      ++np;
      nn = 0;
      for (std::size_t k = 0; k < n; ++k) {
        if (labels[k] == labels[i]) continue;
        ++nn;
        const double term = t[labels[i] * c + labels[k]] + s[i * n + k] - s[i * n + j];
        kinks.push_back(term > 0.0);
        if (term > 0.0) {
          losses[i] += term;
          active.push_back({i, j, k});
        }
      }
    }
    if (np == 0) throw UsageError("anchor_mmnp_losses: anchor " + std::to_string(i) + " has no positive");
    if (nn == 0) throw UsageError("anchor_mmnp_losses: anchor " + std::to_string(i) + " has no negative");
  }
  std::vector<Rank> lab(labels.begin(), labels.end());
  return Tensor::from_op(
      {n}, std::move(losses), {similarities, margin_table},
      [n, c, active = std::move(active), lab = std::move(lab)](detail::Node& self) {
        auto& ps = *self.parents[0];
        auto& pt = *self.parents[1];
        for (const auto& [i, j, k] : active) {
          const double g = self.grad[i];
          if (ps.requires_grad) {
            auto& gs = ps.grad_buffer();
            gs[i * n + k] += g;
            gs[i * n + j] -= g;
          }
          if (pt.requires_grad) pt.grad_buffer()[lab[i] * c + lab[k]] += g;
        }
      },
      "anchor_mmnp_losses", std::move(kinks));
}

struct ObjectiveTerms {
  Tensor total;            // mean over anchors of CE + weight * MM
  Tensor ce;               // per-anchor cross-entropy
  Tensor mm;               // per-anchor margin loss
  double ce_mean = 0.0;
  double mm_mean = 0.0;
};

/// Joint objective for one batch: every item is an anchor once, with
/// positives and negatives taken from the rest of the batch.
inline ObjectiveTerms batch_objective(const Tensor& features, std::span<const Rank> labels, const Model& model,
                                      const MarginSet& margins, double mm_weight = 1.0) {
  if (features.dim() != 2 || features.rows() != labels.size()) {
    throw ShapeError("batch_objective: features " + shape_string(features.shape()) + " for " +
                     std::to_string(labels.size()) + " labels");
  }
  if (margins.schema().num_classes() != model.num_classes()) {
    throw UsageError("batch_objective: margin schema and model disagree on the class count");
  }
  ObjectiveTerms out;
  const Tensor z = model.encode(features);
  out.ce = softmax_cross_entropy_rows(model.classify(z), labels);
  auto margin_terms = [&] {
    return anchor_mmnp_losses(cosine_similarity_matrix(z), cumulative_margin_table(margins.activated()), labels);
  };
  if (mm_weight != 0.0) {
    out.mm = margin_terms();
    out.total = mean(add(out.ce, scale(out.mm, mm_weight)));
  } else {
    {
      NoGradGuard guard;
      out.mm = margin_terms();
    }
    out.total = mean(out.ce);
  }
  const double n = static_cast<double>(labels.size());
  for (double v : out.ce.values()) out.ce_mean += v / n;
  for (double v : out.mm.values()) out.mm_mean += v / n;
  return out;
}

inline ObjectiveTerms batch_objective(const Batch& batch, const Dataset& data, const Model& model,
                                      const MarginSet& margins, double mm_weight = 1.0) {
  return batch_objective(data.features(batch.rows), batch.labels, model, margins, mm_weight);
}

// --- reference oracle ------------------------------------------------------
//
// Plain-double transcription of the loss formula. Shares nothing with the
// differentiable path above; used to cross-check it.

struct PlainPairSets {
  std::vector<double> anchor;
  Rank rank = 0;
  std::vector<std::pair<std::vector<double>, Rank>> positives;
  std::vector<std::pair<std::vector<double>, Rank>> negatives;
};

inline double mmnp_oracle(const PlainPairSets& pairs, std::span<const double> margins) {
  auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      ab += a[i] * b[i];
      aa += a[i] * a[i];
      bb += b[i] * b[i];
    }
    return ab / (std::sqrt(aa) * std::sqrt(bb));
  };
  double total = 0.0;
  for (const auto& pos : pairs.positives) {
    for (const auto& neg : pairs.negatives) {
      const Rank from = pairs.rank < neg.second ? pairs.rank : neg.second;
      const Rank to = pairs.rank < neg.second ? neg.second : pairs.rank;
      double margin = 0.0;
      for (Rank h = from; h < to; ++h) margin += margins[h];
      const double value = margin + cosine(pairs.anchor, neg.first) - cosine(pairs.anchor, pos.first);
      total += value > 0.0 ? value : 0.0;
    }
  }
  return total;
}

}  // namespace cloc
