#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "cloc/gradcheck.hpp"
#include "cloc/model.hpp"

using namespace cloc;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "cloc_model_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Model, ShapesFollowTheConfig) {
  const Model m = Model::init({6, {10, 8}, 4, 5, 3}, 1);
  EXPECT_EQ(m.input_dim(), 6u);
  EXPECT_EQ(m.embedding_dim(), 4u);
  EXPECT_EQ(m.num_classes(), 3u);
  EXPECT_EQ(m.encoder().sizes(), (std::vector<std::size_t>{6, 10, 8, 4}));
  EXPECT_EQ(m.classifier().sizes(), (std::vector<std::size_t>{4, 5, 3}));
  const auto z = m.encode(Tensor::matrix(2, 6, std::vector<double>(12, 0.3)));
  EXPECT_EQ(z.rows(), 2u);
  EXPECT_EQ(z.cols(), 4u);
  EXPECT_EQ(m.classify(z).cols(), 3u);
}

TEST(Model, ZeroParametersGiveZeroEmbedding) {
  Model m = Model::init({3, {5}, 4, 5, 3}, 2);
  for (auto p : m.encoder().parameters())
    for (auto& v : p.mutable_values()) v = 0.0;
  for (double v : m.encode(std::vector<double>{1.0, -2.0, 3.0})) EXPECT_EQ(v, 0.0);
}

TEST(Model, DimensionMismatchIsRejected) {
  const Model m = Model::init({3, {5}, 4, 5, 3}, 2);
  EXPECT_THROW(m.encode(Tensor::matrix(1, 4, std::vector<double>(4, 1.0))), ShapeError);
}

TEST(Model, ArgmaxTiesGoToTheLowerRank) {
  EXPECT_EQ(Model::argmax_rank(std::vector<double>{0.1, 0.7, 0.7}), 1u);
  EXPECT_EQ(Model::argmax_rank(std::vector<double>{2.0, 2.0}), 0u);
}

TEST(Model, InitIsDeterministic) {
  const Model a = Model::init({4, {8}, 3, 4, 3}, 9);
  const Model b = Model::init({4, {8}, 3, 4, 3}, 9);
  const auto pa = a.parameters(), pb = b.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i)
    EXPECT_TRUE(std::equal(pa[i].values().begin(), pa[i].values().end(), pb[i].values().begin()));
}

TEST(Model, CloneIsIndependent) {
  const Model a = Model::init({4, {8}, 3, 4, 3}, 9);
  Model b = a.clone();
  b.parameters()[0].mutable_values()[0] += 1.0;
  EXPECT_NE(a.parameters()[0].values()[0], b.parameters()[0].values()[0]);
}

TEST(Model, GradientsMatchFiniteDifferences) {
  const Model m = Model::init({3, {6}, 4, 5, 3}, 4);
  Rng rng(1);
  std::normal_distribution<double> d;
  std::vector<double> x(5 * 3);
  for (auto& v : x) v = d(rng);
  const auto input = Tensor::matrix(5, 3, x);
  const std::vector<Rank> labels{0, 1, 2, 1, 0};
  const auto report =
      gradient_check([&] { return mean(softmax_cross_entropy_rows(m.classify(m.encode(input)), labels)); },
                     m.parameters());
  EXPECT_TRUE(report.passed) << report.diagnostic;
}

TEST(Checkpoint, RoundTripIsBitwise) {
  const Model m = Model::init({4, {7, 5}, 3, 4, 4}, 3);
  MarginOptions opts;
  opts.fixed_overrides[1] = 0.8;
  const auto ms = init_margins(OrdinalSchema::numbered(4), MarginMode::per_pair_learnable, 3, 0.0, opts);
  const auto path = temp_file("roundtrip.json").string();
  save_checkpoint(path, m, ms);
  const auto ck = load_checkpoint(path);
  const auto pa = m.parameters(), pb = ck.model.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    ASSERT_EQ(pa[i].shape(), pb[i].shape());
    for (std::size_t k = 0; k < pa[i].size(); ++k) EXPECT_EQ(pa[i].values()[k], pb[i].values()[k]);
  }
  EXPECT_EQ(ck.margins.values(), ms.values());
  EXPECT_EQ(ck.margins.overrides(), ms.overrides());
  EXPECT_EQ(ck.margins.mode(), ms.mode());
  const std::vector<double> x{0.1, -0.2, 0.3, 0.4};
  EXPECT_EQ(m.logits(x), ck.model.logits(x));
}

TEST(Checkpoint, CorruptInputIsDataError) {
  const auto path = temp_file("corrupt.json").string();
  {
    std::ofstream(path) << "{\"format\": \"cloc-checkpoint\", \"version\": 1, \"encoder\": ";
  }
  EXPECT_THROW(load_checkpoint(path), DataError);
  {
    std::ofstream(path) << "{\"format\": \"something-else\"}";
  }
  EXPECT_THROW(load_checkpoint(path), DataError);
  EXPECT_THROW(load_checkpoint(temp_file("does_not_exist.json").string()), DataError);
}
