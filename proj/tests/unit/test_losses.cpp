#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "cloc/gradcheck.hpp"
#include "cloc/losses.hpp"
#include "cloc/verification.hpp"

using namespace cloc;

namespace {

MarginSet fixed_margins(std::vector<double> values) {
  std::map<std::size_t, double> o;
  for (std::size_t h = 0; h < values.size(); ++h) o[h] = values[h];
  return MarginSet(OrdinalSchema::numbered(values.size() + 1), MarginMode::all_fixed, MarginActivation::softplus, 0.0,
                   0.0, std::move(o), Tensor{});
}

std::vector<double> gaussian(std::size_t n, Rng& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

// Direct -log softmax[y] by summation, for the cross-entropy oracle.
double direct_ce(const std::vector<double>& logits, std::size_t y) {
  double denom = 0.0;
  for (double l : logits) denom += std::exp(l);
  return -std::log(std::exp(logits[y]) / denom);
}

}  // namespace

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  EXPECT_NEAR(ce_loss(2, Tensor::vector({0.0, 0.0, 0.0, 0.0})).item(), std::log(4.0), 1e-15);
}

TEST(CrossEntropy, SaturatedCorrectPredictionIsNearZero) {
  EXPECT_LT(ce_loss(1, Tensor::vector({0.0, 20.0, 0.0})).item(), 1e-8);
}

TEST(CrossEntropy, MatchesDirectFormula) {
  Rng rng(4);
  for (int t = 0; t < 20; ++t) {
    const auto logits = gaussian(5, rng);
    for (std::size_t y = 0; y < 5; ++y) EXPECT_NEAR(ce_loss(y, Tensor::vector(logits)).item(), direct_ce(logits, y), 1e-10);
  }
}

TEST(CrossEntropy, OutOfRangeLabel) { EXPECT_THROW(ce_loss(3, Tensor::vector({0.0, 0.0, 0.0})), UsageError); }

TEST(MmnpLoss, EqualEmbeddingsPayTheMargin) {
  const auto u = Tensor::vector({0.6, 0.8});
  PairSets ps{u, 0, {{Tensor::vector({0.6, 0.8}), 0}}, {{Tensor::vector({0.6, 0.8}), 1}}};
  EXPECT_NEAR(mmnp_loss(ps, fixed_margins({0.5})).item(), 0.5, 1e-15);
}

TEST(MmnpLoss, SatisfiedConstraintIsZero) {
  const auto u = Tensor::vector({1.0, 0.0});
  PairSets ps{u, 0, {{Tensor::vector({2.0, 0.0}), 0}}, {{Tensor::vector({-1.0, 0.0}), 1}}};
  EXPECT_EQ(mmnp_loss(ps, fixed_margins({0.5})).item(), 0.0);
}

TEST(MmnpLoss, EmptySetsAreUsageErrors) {
  const auto u = Tensor::vector({1.0, 0.0});
  PairSets no_pos{u, 0, {}, {{Tensor::vector({0.0, 1.0}), 1}}};
  PairSets no_neg{u, 0, {{Tensor::vector({0.0, 1.0}), 0}}, {}};
  EXPECT_THROW(mmnp_loss(no_pos, fixed_margins({0.5})), UsageError);
  EXPECT_THROW(mmnp_loss(no_neg, fixed_margins({0.5})), UsageError);
  PairSets self_pos{u, 0, {{u, 0}}, {{Tensor::vector({0.0, 1.0}), 1}}};
  EXPECT_THROW(mmnp_loss(self_pos, fixed_margins({0.5})), UsageError);
}

TEST(MmnpLoss, RandomBatchMatchesOracleAndGradients) {
  Rng rng(12);
  const std::vector<Rank> labels{0, 0, 1, 1, 1, 2, 2, 0};
  std::vector<Tensor> z;
  std::vector<std::vector<double>> plain;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    plain.push_back(gaussian(4, rng));
    z.push_back(Tensor::vector(plain.back(), true));
  }
  auto ms = init_margins(OrdinalSchema::numbered(3), MarginMode::per_pair_learnable, 9, 0.0);
  for (std::size_t a = 0; a < labels.size(); ++a) {
    PairSets ps{z[a], labels[a], {}, {}};
    PlainPairSets pp{plain[a], labels[a], {}, {}};
    for (std::size_t j = 0; j < labels.size(); ++j) {
      if (j == a) continue;
      auto& dst = labels[j] == labels[a] ? ps.positives : ps.negatives;
      auto& pdst = labels[j] == labels[a] ? pp.positives : pp.negatives;
      dst.emplace_back(z[j], labels[j]);
      pdst.emplace_back(plain[j], labels[j]);
    }
    EXPECT_NEAR(mmnp_loss(ps, ms).item(), mmnp_oracle(pp, ms.values()), 1e-10);
    std::vector<Tensor> params = z;
    params.push_back(ms.parameters()[0]);
    const auto report = gradient_check([&] { return mmnp_loss(ps, ms); }, params);
    EXPECT_TRUE(report.passed) << report.diagnostic;
  }
}

TEST(MmnpOracle, SingleOrthogonalPair) {
  PlainPairSets pp{{1.0, 0.0}, 1, {{{0.6, 0.8}, 1}}, {{{0.0, 1.0}, 2}}};
  const std::vector<double> m{9.0, 0.9};
  EXPECT_NEAR(mmnp_oracle(pp, m), 0.9 + 0.0 - 0.6, 1e-15);
}

TEST(MmnpOracle, AllTermsClipped) {
  PlainPairSets pp{{1.0, 0.0}, 0, {{{1.0, 0.0}, 0}}, {{{-1.0, 0.0}, 1}}};
  const std::vector<double> m{0.2};
  EXPECT_EQ(mmnp_oracle(pp, m), 0.0);
}

TEST(FusedLoss, MatchesOracleOnRandomBatches) {
  const auto battery = oracle_battery(30, 99);
  EXPECT_TRUE(battery.passed) << battery.summary();
  EXPECT_LE(battery.max_fused_error, 1e-10);
}

TEST(FusedLoss, AnchorWithoutPositiveIsUsageError) {
  const std::vector<Rank> labels{0, 1, 1};
  const auto s = cosine_similarity_matrix(Tensor::matrix(3, 2, {1, 0, 0, 1, 1, 1}));
  const auto table = cumulative_margin_table(Tensor::vector({0.5}));
  EXPECT_THROW(anchor_mmnp_losses(s, table, labels), UsageError);
}

TEST(BatchObjective, InactiveHingeLeavesMeanCe) {
  // Linear identity encoder: z = x, two tight clusters pointing in opposite directions.
  const Model model = Model::init({2, {}, 2, 3, 2}, 1);
  Tensor w = model.encoder().layers().front().weight;
  Tensor b = model.encoder().layers().front().bias;
  auto wv = w.mutable_values();
  wv[0] = 1.0, wv[1] = 0.0, wv[2] = 0.0, wv[3] = 1.0;
  for (auto& v : b.mutable_values()) v = 0.0;
  const auto x = Tensor::matrix(4, 2, {1, 0.1, 1, -0.1, -1, 0.1, -1, -0.1});
  const std::vector<Rank> labels{0, 0, 1, 1};
  const auto terms = batch_objective(x, labels, model, fixed_margins({0.5}));
  EXPECT_EQ(terms.mm_mean, 0.0);
  EXPECT_NEAR(terms.total.item(), terms.ce_mean, 1e-15);
}

TEST(BatchObjective, ZeroMarginsAndIdenticalSimilaritiesReduceToCe) {
  // A zero encoder maps everything to the bias direction, so every similarity is 1.
  const Model model = Model::init({3, {4}, 2, 3, 3}, 2);
  Tensor weight = model.encoder().layers().back().weight;
  Tensor last_bias = model.encoder().layers().back().bias;
  for (auto& p : weight.mutable_values()) p = 0.0;
  auto bias = last_bias.mutable_values();
  bias[0] = 1.0;
  bias[1] = 0.5;
  Rng rng(3);
  const auto x = Tensor::matrix(6, 3, gaussian(18, rng));
  const std::vector<Rank> labels{0, 0, 1, 1, 2, 2};
  const auto terms = batch_objective(x, labels, model, fixed_margins({0.0, 0.0}));
  EXPECT_EQ(terms.mm_mean, 0.0);
  EXPECT_NEAR(terms.total.item(), terms.ce_mean, 1e-15);
}

TEST(BatchObjective, MatchesOraclePath) {
  Rng rng(31);
  const Model model = Model::init({5, {8}, 4, 6, 3}, 11);
  const auto flat = gaussian(12 * 5, rng);
  const auto x = Tensor::matrix(12, 5, flat);
  const std::vector<Rank> labels{0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2};
  const auto ms = init_margins(OrdinalSchema::numbered(3), MarginMode::per_pair_learnable, 4, 0.0);
  const auto m = ms.values();

  double expected = 0.0;
  std::vector<std::vector<double>> z;
  for (std::size_t i = 0; i < 12; ++i) z.push_back(model.encode(std::span<const double>(flat).subspan(i * 5, 5)));
  for (std::size_t i = 0; i < 12; ++i) {
    const auto logits = model.logits(std::span<const double>(flat).subspan(i * 5, 5));
    PlainPairSets pp{z[i], labels[i], {}, {}};
    for (std::size_t j = 0; j < 12; ++j) {
      if (j == i) continue;
      (labels[j] == labels[i] ? pp.positives : pp.negatives).emplace_back(z[j], labels[j]);
    }
    expected += direct_ce(logits, labels[i]) + mmnp_oracle(pp, m);
  }
  expected /= 12.0;
  EXPECT_NEAR(batch_objective(x, labels, model, ms).total.item(), expected, 1e-10);
}

TEST(BatchObjective, ZeroWeightKeepsMarginsOutOfTheGraph) {
  const Model model = Model::init({3, {4}, 3, 3, 3}, 5);
  auto ms = init_margins(OrdinalSchema::numbered(3), MarginMode::per_pair_learnable, 4, 0.0);
  Rng rng(8);
  const auto x = Tensor::matrix(6, 3, gaussian(18, rng));
  const std::vector<Rank> labels{0, 0, 1, 1, 2, 2};
  const auto terms = batch_objective(x, labels, model, ms, 0.0);
  terms.total.backward();
  EXPECT_FALSE(ms.raw().has_grad());
  EXPECT_GT(terms.mm_mean, 0.0);
}

TEST(BatchObjective, ShapeErrors) {
  const Model model = Model::init({3, {4}, 3, 3, 3}, 5);
  const auto ms = init_margins(OrdinalSchema::numbered(3), MarginMode::per_pair_learnable, 4, 0.0);
  const std::vector<Rank> labels{0, 0, 1, 1};
  EXPECT_THROW(batch_objective(Tensor::matrix(3, 3, std::vector<double>(9, 1.0)), labels, model, ms), ShapeError);
  const auto wrong = init_margins(OrdinalSchema::numbered(4), MarginMode::per_pair_learnable, 4, 0.0);
  EXPECT_THROW(batch_objective(Tensor::matrix(4, 3, std::vector<double>(12, 1.0)), labels, model, wrong), UsageError);
}
