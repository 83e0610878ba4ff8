#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "cloc/log.hpp"
#include "cloc/sampler.hpp"

using namespace cloc;

namespace {

Dataset with_counts(const std::vector<std::size_t>& counts) {
  Dataset ds{counts.size(), 1, {}, false};
  std::int64_t id = 0;
  for (Rank c = 0; c < counts.size(); ++c)
    for (std::size_t i = 0; i < counts[c]; ++i) ds.samples.push_back({id++, {static_cast<double>(id)}, c, c});
  return ds;
}

}  // namespace

TEST(Sampler, FiveRanksFourEach) {
  const auto ds = with_counts({12, 12, 12, 12, 12});
  const auto batches = build_batches(ds, {5, 4, 1});
  EXPECT_EQ(batches.size(), 3u);
  for (const auto& b : batches) {
    ASSERT_EQ(b.size(), 20u);
    std::map<Rank, int> per;
    for (auto l : b.labels) ++per[l];
    EXPECT_EQ(per.size(), 5u);
    for (auto& [r, n] : per) EXPECT_EQ(n, 4);
  }
}

TEST(Sampler, EveryBatchPassesTheValidator) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto ds = with_counts({9, 3, 17, 5, 2, 11});
    for (std::size_t k : {0u, 2u, 3u, 6u}) {
      ScopedWarningSink quiet([](const std::string&) {});
      for (const auto& b : build_batches(ds, {k, 3, seed}, seed)) {
        const auto v = validate_batch(b);
        EXPECT_TRUE(v.ok) << v.reason;
      }
    }
  }
}

TEST(Sampler, EpochCoversEverySample) {
  const auto ds = with_counts({7, 13, 4, 9});
  for (std::uint64_t epoch = 0; epoch < 5; ++epoch) {
    std::set<std::size_t> seen;
    for (const auto& b : build_batches(ds, {2, 3, 4}, epoch)) seen.insert(b.rows.begin(), b.rows.end());
    EXPECT_EQ(seen.size(), ds.size());
  }
}

TEST(Sampler, RowsAndLabelsAgree) {
  const auto ds = with_counts({6, 8, 5});
  for (const auto& b : build_batches(ds, {0, 2, 3})) {
    ASSERT_EQ(b.rows.size(), b.labels.size());
    for (std::size_t i = 0; i < b.size(); ++i) EXPECT_EQ(ds.samples[b.rows[i]].label, b.labels[i]);
  }
}

TEST(Sampler, DeterministicPerSeedAndEpoch) {
  const auto ds = with_counts({10, 10, 10});
  const auto a = build_batches(ds, {0, 4, 5}, 2);
  const auto b = build_batches(ds, {0, 4, 5}, 2);
  const auto c = build_batches(ds, {0, 4, 5}, 3);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].rows, b[i].rows);
  bool differs = a.size() != c.size();
  for (std::size_t i = 0; !differs && i < a.size(); ++i) differs = a[i].rows != c[i].rows;
  EXPECT_TRUE(differs);
}

TEST(Sampler, TinyClassIsPaddedWithAWarning) {
  const auto ds = with_counts({1, 8, 8});
  std::vector<std::string> warnings;
  ScopedWarningSink sink([&](const std::string& w) { warnings.push_back(w); });
  const auto batches = build_batches(ds, {3, 4, 0});
  EXPECT_EQ(warnings.size(), 1u);
  for (const auto& b : batches) {
    EXPECT_EQ(std::count(b.labels.begin(), b.labels.end(), Rank{0}), 4);
    EXPECT_TRUE(validate_batch(b).ok);
  }
}

TEST(Sampler, UnsatisfiableSpecs) {
  EXPECT_THROW(build_batches(with_counts({5, 1, 1}), {}), UsageError);
  EXPECT_THROW(build_batches(with_counts({5, 5}), {1, 4, 0}), UsageError);
  EXPECT_THROW(build_batches(with_counts({5, 5}), {2, 1, 0}), UsageError);
  EXPECT_THROW(build_batches(with_counts({5, 5}), {3, 2, 0}), UsageError);
}

TEST(Validator, RejectsBrokenBatches) {
  EXPECT_FALSE(validate_batch({{0, 1}, {0, 0}}).ok);
  EXPECT_FALSE(validate_batch({{0, 1, 2}, {0, 0, 1}}).ok);
  // two ranks of two: every anchor has one positive and two negatives
  EXPECT_TRUE(validate_batch({{0, 1, 2, 3}, {0, 0, 1, 1}}).ok);
  // rank 0 with three items but rank 1 with two still leaves anchors of rank 0 with two negatives
  EXPECT_TRUE(validate_batch({{0, 1, 2, 3, 4}, {0, 0, 0, 1, 1}}).ok);
}
