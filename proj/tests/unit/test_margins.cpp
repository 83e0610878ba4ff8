#include <cmath>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "cloc/log.hpp"
#include "cloc/margins.hpp"
#include "cloc/verification.hpp"

using namespace cloc;

namespace {

MarginSet with_raw(std::size_t classes, std::vector<double> theta, double rho = 0.0,
                   std::map<std::size_t, double> overrides = {}) {
  return MarginSet(OrdinalSchema::numbered(classes), MarginMode::per_pair_learnable, MarginActivation::softplus, rho,
                   1.0, std::move(overrides), Tensor::vector(std::move(theta), true));
}

// Fixed margins from the interpretability example: 0.35, 0.41, 0.23, 0.30.
MarginSet example_margins() {
  return MarginSet(OrdinalSchema::numbered(5), MarginMode::all_fixed, MarginActivation::softplus, 0.0, 1.0,
                   {{0, 0.35}, {1, 0.41}, {2, 0.23}, {3, 0.30}}, Tensor{});
}

}  // namespace

TEST(OrdinalSchema, BoundariesJoinConsecutiveRanks) {
  const auto s = OrdinalSchema::numbered(5);
  EXPECT_EQ(s.num_boundaries(), 4u);
  for (std::size_t h = 0; h < 4; ++h) EXPECT_EQ(s.boundary(h), std::make_pair(h, h + 1));
  EXPECT_EQ(s.boundary_name(1), "2-3");
  EXPECT_THROW(s.boundary(4), UsageError);
  EXPECT_THROW(OrdinalSchema::numbered(1), UsageError);
}

TEST(InitMargins, DrawsFromHalfToOne) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto ms = init_margins(OrdinalSchema::numbered(5), MarginMode::per_pair_learnable, seed, 0.0);
    const auto m = ms.values();
    ASSERT_EQ(m.size(), 4u);
    for (double v : m) {
      EXPECT_GE(v, 0.5 - 1e-12);
      EXPECT_LT(v, 1.0 + 1e-12);
    }
  }
}

TEST(InitMargins, DeterministicUnderSeed) {
  const auto a = init_margins(OrdinalSchema::numbered(6), MarginMode::per_pair_learnable, 42, 0.0).values();
  const auto b = init_margins(OrdinalSchema::numbered(6), MarginMode::per_pair_learnable, 42, 0.0).values();
  const auto c = init_margins(OrdinalSchema::numbered(6), MarginMode::per_pair_learnable, 43, 0.0).values();
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
}

TEST(InitMargins, AllFixedHasNoRawParameters) {
  MarginOptions opts;
  opts.fixed_value = 1.0;
  const auto ms = init_margins(OrdinalSchema::numbered(5), MarginMode::all_fixed, 1, 0.0, opts);
  EXPECT_EQ(ms.values(), std::vector<double>(4, 1.0));
  EXPECT_TRUE(ms.parameters().empty());
}

TEST(InitMargins, SingleLearnableSharesOneParameter) {
  const auto ms = init_margins(OrdinalSchema::numbered(5), MarginMode::single_learnable, 1, 0.0);
  ASSERT_EQ(ms.parameters().size(), 1u);
  EXPECT_EQ(ms.parameters()[0].size(), 1u);
  const auto m = ms.values();
  for (double v : m) EXPECT_EQ(v, m[0]);
  EXPECT_EQ(ms.boundary_mode(0), "shared");
}

TEST(InitMargins, LargeRhoShiftsRangeAndWarns) {
  std::vector<std::string> warnings;
  ScopedWarningSink sink([&](const std::string& w) { warnings.push_back(w); });
  const auto ms = init_margins(OrdinalSchema::numbered(4), MarginMode::per_pair_learnable, 3, 0.6);
  ASSERT_EQ(warnings.size(), 1u);
  for (double v : ms.values()) {
    EXPECT_GE(v, 1.1 - 1e-12);
    EXPECT_LT(v, 1.6 + 1e-12);
  }
}

TEST(InitMargins, InverseActivationRoundTrips) {
  const double theta = inverse_activation(MarginActivation::softplus, 0.7);
  const auto ms = with_raw(2, {theta});
  EXPECT_NEAR(ms.values()[0], 0.7, 1e-15);
  EXPECT_THROW(inverse_activation(MarginActivation::softplus, 0.0), DomainError);
}

TEST(ActivatedMargins, ZeroThetaGivesLn2) {
  const auto ms = with_raw(4, {0.0, 0.0, 0.0});
  for (double v : ms.values()) EXPECT_NEAR(v, std::log(2.0), 1e-15);
}

TEST(ActivatedMargins, OverrideIsVerbatimAndReceivesNoGradient) {
  auto ms = with_raw(5, {0.3, 5.0, -1.0, 2.0}, 0.0, {{1, 0.41}});
  EXPECT_EQ(ms.values()[1], 0.41);
  sum(ms.activated()).backward();
  const auto g = ms.raw().grad();
  EXPECT_EQ(g[1], 0.0);
  EXPECT_GT(g[0], 0.0);
  EXPECT_EQ(ms.boundary_mode(1), "fixed");
  EXPECT_EQ(ms.boundary_mode(0), "learnable");
}

TEST(ActivatedMargins, StayAboveRho) {
  const auto ms = with_raw(5, {-30.0, -5.0, 0.0, 3.0}, 0.1);
  for (double v : ms.values()) EXPECT_GT(v, 0.1);
}

TEST(ActivatedMargins, InvalidOverridesRejected) {
  EXPECT_THROW(with_raw(3, {0.0, 0.0}, 0.0, {{2, 1.0}}), UsageError);
  EXPECT_THROW(with_raw(3, {0.0, 0.0}, 0.0, {{0, -1.0}}), UsageError);
  EXPECT_THROW(with_raw(3, {0.0}), UsageError);
}

TEST(ActivatedMargins, FreezingStopsGradientFlow) {
  auto ms = with_raw(3, {0.1, 0.2});
  ms.set_trainable(false);
  EXPECT_FALSE(ms.activated().requires_grad());
  ms.set_trainable(true);
  EXPECT_TRUE(ms.activated().requires_grad());
}

TEST(ActivatedMargins, ParseModes) {
  EXPECT_EQ(parse_margin_mode("per_pair"), MarginMode::per_pair_learnable);
  EXPECT_EQ(parse_margin_mode("single_learnable"), MarginMode::single_learnable);
  EXPECT_EQ(parse_margin_mode("all_fixed"), MarginMode::all_fixed);
  EXPECT_THROW(parse_margin_mode("cubic"), UsageError);
}

TEST(CumulativeMargin, WorkedExample) {
  const auto ms = example_margins();
  EXPECT_NEAR(cumulative_margin(ms, 0, 1).item(), 0.35, 1e-15);
  EXPECT_NEAR(cumulative_margin(ms, 0, 2).item(), 0.76, 1e-15);
  EXPECT_NEAR(cumulative_margin(ms, 2, 0).item(), 0.76, 1e-15);
  const auto m = ms.values();
  EXPECT_NEAR(cumulative_margin(m, 0, 4), 0.35 + 0.41 + 0.23 + 0.30, 1e-15);
}

TEST(CumulativeMargin, EqualRanksAreUsageError) {
  const auto ms = example_margins();
  EXPECT_THROW(cumulative_margin(ms, 2, 2), UsageError);
  EXPECT_THROW(cumulative_margin(ms.values(), 0, 5), UsageError);
}

TEST(CumulativeMargin, AdditivityIsExactOnDyadicMargins) {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    std::size_t triples = 0;
    const auto m = dyadic_margins(7, rng);
    EXPECT_EQ(additivity_failures(m, &triples), 0u);
    EXPECT_EQ(triples, 56u);  // C(8, 3)
  }
}

TEST(CumulativeMargin, AdditivityHoldsToRoundingOnArbitraryReals) {
  Rng rng(18);
  std::uniform_real_distribution<double> d(0.0, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> m(6);
    for (auto& v : m) v = d(rng);
    for (Rank a = 0; a < 7; ++a)
      for (Rank b = a + 1; b < 7; ++b)
        for (Rank c = b + 1; c < 7; ++c)
          EXPECT_NEAR(cumulative_margin(m, a, c), cumulative_margin(m, a, b) + cumulative_margin(m, b, c), 1e-14);
  }
}

TEST(CumulativeMargin, MonotoneInRankDistance) {
  const auto m = example_margins().values();
  for (Rank y = 0; y < 5; ++y)
    for (Rank k = y + 1; k + 1 < 5; ++k) EXPECT_LT(cumulative_margin(m, y, k), cumulative_margin(m, y, k + 1));
}

TEST(CumulativeMargin, TableMatchesScalarPathAndGradient) {
  auto ms = with_raw(5, {0.1, -0.4, 0.9, 0.2});
  const auto table = cumulative_margin_table(ms.activated());
  const auto m = ms.values();
  for (Rank a = 0; a < 5; ++a)
    for (Rank b = 0; b < 5; ++b) {
      if (a == b) {
        EXPECT_EQ(table.at(a, b), 0.0);
      } else {
        EXPECT_NEAR(table.at(a, b), cumulative_margin(m, a, b), 1e-15);
      }
    }
  const auto report = gradient_check([&] { return sum(cumulative_margin_table(ms.activated())); }, ms.parameters());
  EXPECT_TRUE(report.passed) << report.diagnostic;
}
