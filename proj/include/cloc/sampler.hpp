#pragma once

// N-pair style mini-batches: every batch holds at least two ranks with at
// least two samples each, so each anchor has a positive and two negatives.

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "cloc/datagen.hpp"
#include "cloc/errors.hpp"
#include "cloc/log.hpp"
#include "cloc/random.hpp"

namespace cloc {

struct BatchSpec {
  std::size_t ranks_per_batch = 0;  // 0 = every rank present in the data
  std::size_t samples_per_rank = 4;
  std::uint64_t seed = 0;
};

struct Batch {
  std::vector<std::size_t> rows;  // indices into the dataset
  std::vector<Rank> labels;

  std::size_t size() const { return rows.size(); }
};

struct BatchValidation {
  bool ok = true;
  std::string reason;
};

/// Structural check: >= 2 ranks, >= 2 items per present rank, and for every
/// anchor at least one positive and two negatives.
inline BatchValidation validate_batch(const Batch& batch) {
  std::map<Rank, std::size_t> counts;
  for (auto l : batch.labels) ++counts[l];
  if (batch.rows.size() != batch.labels.size()) return {false, "rows and labels differ in length"};
  if (counts.size() < 2) return {false, "fewer than two ranks"};
  for (const auto& [rank, n] : counts) {
    if (n < 2) return {false, "rank " + std::to_string(rank + 1) + " has a single item"};
  }
  for (std::size_t i = 0; i < batch.labels.size(); ++i) {
    const std::size_t positives = counts[batch.labels[i]] - 1;
    const std::size_t negatives = batch.labels.size() - counts[batch.labels[i]];
    if (positives < 1) return {false, "anchor " + std::to_string(i) + " has no positive"};
    if (negatives < 2) return {false, "anchor " + std::to_string(i) + " has fewer than two negatives"};
  }
  return {};
}

/// One epoch of batches. Within-class order is reshuffled per epoch; a class
/// contributes consecutive chunks of samples_per_rank items from its shuffled
/// order (wrapping when exhausted), so every sample appears at least once.
/// Classes smaller than samples_per_rank are completed by sampling with
/// replacement.
inline std::vector<Batch> build_batches(const Dataset& ds, const BatchSpec& spec, std::uint64_t epoch = 0) {
  if (spec.samples_per_rank < 2) throw UsageError("BatchSpec: samples_per_rank must be >= 2");
  if (spec.ranks_per_batch == 1) throw UsageError("BatchSpec: ranks_per_batch must be >= 2");
  if (spec.ranks_per_batch > ds.num_classes) {
    throw UsageError("BatchSpec: ranks_per_batch " + std::to_string(spec.ranks_per_batch) + " exceeds " +
                     std::to_string(ds.num_classes) + " classes");
  }
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) by_class.at(ds.samples[i].label).push_back(i);

  std::vector<Rank> present;
  std::size_t at_least_two = 0;
  for (Rank c = 0; c < ds.num_classes; ++c) {
    if (!by_class[c].empty()) present.push_back(c);
    if (by_class[c].size() >= 2) ++at_least_two;
  }
  if (at_least_two < 2) {
    throw UsageError("build_batches: need at least two classes with two or more samples, found " +
                     std::to_string(at_least_two));
  }
  std::size_t k = spec.ranks_per_batch == 0 ? present.size() : spec.ranks_per_batch;
  if (k > present.size()) {
    if (epoch == 0) {
      warn("build_batches: only " + std::to_string(present.size()) + " ranks present; using that many per batch");
    }
    k = present.size();
  }

  const std::size_t spr = spec.samples_per_rank;
  Rng rng(derive_seed(derive_seed(spec.seed, streams::batches), epoch));
  std::vector<std::size_t> chunks_left(ds.num_classes, 0), cursor(ds.num_classes, 0);
  for (Rank c : present) {
    std::shuffle(by_class[c].begin(), by_class[c].end(), rng);
    chunks_left[c] = (by_class[c].size() + spr - 1) / spr;
    if (by_class[c].size() < spr && epoch == 0) {
      warn("build_batches: rank " + std::to_string(c + 1) + " has " + std::to_string(by_class[c].size()) +
           " samples, fewer than samples_per_rank=" + std::to_string(spr) + "; padding by replacement");
    }
  }
  // tie-break order between classes with equal remaining chunks
  std::vector<Rank> priority = present;
  std::shuffle(priority.begin(), priority.end(), rng);

  auto take_chunk = [&](Rank c, Batch& b) {
    const auto& rows = by_class[c];
    const std::size_t n = rows.size();
    if (n >= spr) {
      for (std::size_t i = 0; i < spr; ++i) b.rows.push_back(rows[(cursor[c] + i) % n]);
      cursor[c] += spr;
    } else {
      b.rows.insert(b.rows.end(), rows.begin(), rows.end());
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      for (std::size_t i = n; i < spr; ++i) b.rows.push_back(rows[pick(rng)]);
    }
    b.labels.insert(b.labels.end(), spr, c);
    if (chunks_left[c] > 0) --chunks_left[c];
  };

  std::vector<Batch> batches;
  auto remaining = [&] {
    return std::any_of(present.begin(), present.end(), [&](Rank c) { return chunks_left[c] > 0; });
  };
  while (remaining()) {
    std::vector<Rank> order = priority;
    std::stable_sort(order.begin(), order.end(),
                     [&](Rank a, Rank b) { return chunks_left[a] > chunks_left[b]; });
    order.resize(k);
    std::sort(order.begin(), order.end());
    Batch b;
    for (Rank c : order) take_chunk(c, b);
    batches.push_back(std::move(b));
    std::rotate(priority.begin(), priority.begin() + 1, priority.end());
  }
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

}  // namespace cloc
