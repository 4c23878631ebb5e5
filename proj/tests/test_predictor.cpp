#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"

using namespace moeq;

namespace {

BlockPredictor random_predictor(std::size_t h, std::size_t d, Rng& rng) {
  BlockPredictor p;
  p.w1 = random_uniform(h, d, -0.5, 0.5, rng);
  p.b1.resize(h);
  p.w2.resize(h);
  for (auto& v : p.b1) v = rng.uniform(-0.2, 0.2);
  for (auto& v : p.w2) v = rng.uniform(-0.5, 0.5);
  p.b2 = 0.1;
  return p;
}

}  // namespace

TEST(Predictor, GradientMatchesFiniteDifferences) {
  Rng rng(1);
  const Matrix x = random_normal(12, 5, rng);
  std::vector<double> y(12);
  for (auto& v : y) v = rng.uniform(-0.9, 0.9);
  const BlockPredictor p = random_predictor(6, 5, rng);
  std::vector<std::size_t> rows(12);
  std::iota(rows.begin(), rows.end(), 0);
  const auto analytic = oracle::flatten(loss_and_gradient(p, x, y, rows));
  const auto numeric = oracle::numeric_gradient(p, x, y, 1e-5);
  EXPECT_LT(oracle::relative_error(analytic, numeric), 1e-4);
}

TEST(Predictor, LearnsConstantTarget) {
  Rng rng(2);
  const Matrix x = random_normal(200, 4, rng);
  const std::vector<double> y(200, 0.5);
  PredictorConfig cfg;
  cfg.hidden = 8;
  cfg.epochs = 100;
  cfg.learning_rate = 0.05;
  const BlockPredictor p = train_predictor(x, y, cfg);
  EXPECT_LE(p.final_mse, 0.05 * 0.05);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(p.predict(x.row(i)), 0.5, 0.05);
}

TEST(Predictor, LossLogNeverIncreases) {
  Rng rng(3);
  const Matrix x = random_normal(100, 6, rng);
  std::vector<double> y(100);
  for (std::size_t i = 0; i < 100; ++i) y[i] = std::tanh(x(i, 0) - 0.5 * x(i, 3));
  PredictorConfig cfg;
  cfg.hidden = 16;
  cfg.epochs = 40;
  cfg.learning_rate = 0.5;  // large enough to trigger rollbacks
  const BlockPredictor p = train_predictor(x, y, cfg);
  ASSERT_EQ(p.log.size(), 41u);
  for (std::size_t i = 1; i < p.log.size(); ++i) EXPECT_LE(p.log[i].second, p.log[i - 1].second);
  EXPECT_LE(p.final_mse, 0.5 * p.log.front().second);
  EXPECT_EQ(p.final_mse, p.log.back().second);
}

TEST(Predictor, DeterministicPerSeed) {
  Rng rng(4);
  const Matrix x = random_normal(50, 3, rng);
  std::vector<double> y(50, 0.2);
  PredictorConfig cfg;
  cfg.hidden = 4;
  cfg.epochs = 5;
  const auto a = train_predictor(x, y, cfg), b = train_predictor(x, y, cfg);
  EXPECT_EQ(a.w1, b.w1);
  EXPECT_EQ(a.w2, b.w2);
  cfg.seed = 1;
  EXPECT_NE(train_predictor(x, y, cfg).w1, a.w1);
}

TEST(Predictor, ErrorsOnEmptyOrMismatchedData) {
  EXPECT_THROW(train_predictor(Matrix(0, 3), {}, {}), EmptyTrace);
  EXPECT_THROW(train_predictor(Matrix(2, 3, 1.0), std::vector<double>{1.0}, {}), ShapeMismatch);
  EXPECT_THROW(train_block_predictor(BlockTrace{}), EmptyTrace);
}

TEST(BlockPredictor, TargetsAreBlockCosines) {
  Trace::BlockIo io;
  io.inputs = Matrix(2, 2, std::vector<double>{1, 0, 0, 1});
  io.outputs = Matrix(2, 2, std::vector<double>{1, 1, 0, 3});
  const auto t = cosine_targets(io);
  EXPECT_NEAR(t[0], 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_DOUBLE_EQ(t[1], 1.0);
}

TEST(BlockPredictor, TrainsOnePerMoeBlockAndScores) {
  ModelSpec s = oracle::toy_spec(3);
  s.num_layers = 3;
  s.first_layer_dense = true;
  const Model m = build_model(s);
  const BlockTrace trace = capture_block_io(m, generate_calibration(1, 4, 32, s.vocab_size));
  PredictorConfig cfg;
  cfg.hidden = 8;
  cfg.epochs = 10;
  const auto bsp = train_block_predictor(trace, cfg);
  EXPECT_EQ(bsp.blocks.size(), 2u);
  EXPECT_EQ(bsp.blocks.count(0), 0u);
  for (const auto& [l, p] : bsp.blocks) EXPECT_LE(p.final_mse, p.log.front().second);
  const auto scores = predict_block_scores(bsp, trace);
  EXPECT_EQ(scores.size(), 2u);
  for (const auto& [l, v] : scores) {
    EXPECT_GT(v, -1.0);
    EXPECT_LT(v, 1.0);
  }
  std::map<std::size_t, Matrix> missing{{0, Matrix(1, s.hidden_dim)}};
  EXPECT_THROW(predict_block_scores(bsp, missing), std::invalid_argument);
}

TEST(PlanPredicted, LowestScoresGetHighBits) {
  ModelSpec s = oracle::toy_spec(1);
  s.num_layers = 4;
  const std::map<std::size_t, double> scores{{0, 0.9}, {1, 0.5}, {2, 0.95}, {3, 0.6}};
  const BitPlan p = plan_predicted_blocks(scores, s, 2);
  EXPECT_EQ(p.bits_for({1, WeightKind::expert, 0, "gate"}), 4);
  EXPECT_EQ(p.bits_for({3, WeightKind::expert, 7, "down"}), 4);
  EXPECT_FALSE(p.assignments.contains({0, WeightKind::expert, 0, "gate"}));
  EXPECT_EQ(p.provenance, (std::vector<std::string>{"predicted:2"}));
  EXPECT_THROW(plan_predicted_blocks(scores, s, 5), std::invalid_argument);
}
