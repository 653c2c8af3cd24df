#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>

#include "gkd/trainer.hpp"
#include "test_util.hpp"

namespace gkd {
namespace {

using test::bit_equal;
using test::random_tensor;

using TensorMap = std::map<std::string, Tensor<float>>;

TensorMap single(const std::string& name, float v) {
  TensorMap m;
  m.emplace(name, Tensor<float>(Shape{1}, v));
  return m;
}

TEST(Adam, HandEvaluatedFirstStep) {
  TensorMap w = single("w", 1.0f);
  AdamState state;
  adam_step(w, single("w", 0.5f), state);
  EXPECT_NEAR(w.at("w")[0], 0.999f, 1e-6);
  EXPECT_EQ(state.t, 1u);
  EXPECT_NEAR(state.m.at("w")[0], 0.05f, 1e-7);
  EXPECT_NEAR(state.v.at("w")[0], 0.00025f, 1e-9);
}

TEST(Adam, ZeroGradientIsAFixedPoint) {
  TensorMap w;
  w.emplace("a", random_tensor<float>(Shape{3, 4}, 1));
  const TensorMap before = w;
  TensorMap g;
  g.emplace("a", Tensor<float>(Shape{3, 4}));
  AdamState state;
  for (int i = 0; i < 5; ++i) adam_step(w, g, state);
  EXPECT_TRUE(bit_equal(w.at("a"), before.at("a")));
  EXPECT_EQ(state.t, 5u);
}

TEST(Adam, EqualGradientsGiveEqualUpdates) {
  TensorMap w;
  w.emplace("a", Tensor<float>(Shape{2}, std::vector<float>{0.3f, -2.0f}));
  w.emplace("b", Tensor<float>(Shape{2}, std::vector<float>{0.3f, -2.0f}));
  TensorMap g;
  g.emplace("a", Tensor<float>(Shape{2}, std::vector<float>{0.7f, 0.7f}));
  g.emplace("b", Tensor<float>(Shape{2}, std::vector<float>{0.7f, 0.7f}));
  AdamState state;
  for (int i = 0; i < 3; ++i) adam_step(w, g, state);
  EXPECT_TRUE(bit_equal(w.at("a"), w.at("b")));
  EXPECT_NEAR(w.at("a")[0] - 0.3f, w.at("a")[1] + 2.0f, 1e-6);
}

TEST(Adam, NonFiniteGradientAbortsBeforeAnyUpdate) {
  TensorMap w;
  w.emplace("a", Tensor<float>(Shape{2}, 1.0f));
  w.emplace("b", Tensor<float>(Shape{2}, 1.0f));
  TensorMap g;
  g.emplace("a", Tensor<float>(Shape{2}, 0.5f));
  g.emplace("b", Tensor<float>(Shape{2}, std::vector<float>{0.5f, std::numeric_limits<float>::quiet_NaN()}));
  AdamState state;
  try {
    adam_step(w, g, state);
    FAIL() << "expected domain_error";
  } catch (const std::domain_error& e) {
    EXPECT_NE(std::string(e.what()).find("'b'"), std::string::npos) << e.what();
  }
  EXPECT_EQ(w.at("a")[0], 1.0f);
  EXPECT_EQ(state.t, 0u);
  EXPECT_TRUE(state.m.empty());
  g.at("b")[1] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(adam_step(w, g, state), std::domain_error);
}

TEST(Adam, RejectsMismatchedGradients) {
  TensorMap w = single("w", 1.0f);
  AdamState state;
  EXPECT_THROW(adam_step(w, single("other", 1.0f), state), std::invalid_argument);
  TensorMap g;
  g.emplace("w", Tensor<float>(Shape{2}));
  EXPECT_THROW(adam_step(w, g, state), ShapeError);
}

TEST(Adam, StateMirrorsParametersAndSecondMomentStaysNonNegative) {
  TensorMap w;
  w.emplace("a", random_tensor<float>(Shape{4, 3}, 2));
  w.emplace("b", random_tensor<float>(Shape{5}, 3));
  AdamState state;
  for (std::uint64_t step = 0; step < 20; ++step) {
    TensorMap g;
    g.emplace("a", random_tensor<float>(Shape{4, 3}, 100 + step, -3, 3));
    g.emplace("b", random_tensor<float>(Shape{5}, 200 + step, -3, 3));
    adam_step(w, g, state);
    ASSERT_EQ(state.t, step + 1);
    for (const auto& [name, t] : w) {
      ASSERT_EQ(state.m.at(name).shape(), t.shape());
      ASSERT_EQ(state.v.at(name).shape(), t.shape());
      for (float v : state.v.at(name).data()) ASSERT_GE(v, 0.0f);
    }
  }
  EXPECT_EQ(state.m.size(), 2u);
}

TEST(ClipGradNorm, ScalesToTheLimit) {
  TensorMap g;
  g.emplace("a", Tensor<float>(Shape{2}, std::vector<float>{3.0f, 4.0f}));
  EXPECT_DOUBLE_EQ(clip_grad_norm(g, 1.0), 5.0);
  EXPECT_NEAR(g.at("a")[0], 0.6f, 1e-6);
  EXPECT_NEAR(g.at("a")[1], 0.8f, 1e-6);
  clip_grad_norm(g, 10.0);
  EXPECT_NEAR(g.at("a")[1], 0.8f, 1e-6);
}

TEST(Batches, TrailingSingletonJoinsPreviousBatch) {
  using P = std::pair<std::size_t, std::size_t>;
  EXPECT_EQ(train_detail::batches(10, 4), (std::vector<P>{{0, 4}, {4, 8}, {8, 10}}));
  EXPECT_EQ(train_detail::batches(9, 4), (std::vector<P>{{0, 4}, {4, 9}}));
  EXPECT_EQ(train_detail::batches(1, 4), (std::vector<P>{{0, 1}}));
  EXPECT_EQ(train_detail::batches(8, 8), (std::vector<P>{{0, 8}}));
}

// ---------------------------------------------------------------------------

Dataset tiny_dataset(std::size_t train, std::size_t val, std::size_t test, std::size_t frame,
                     std::uint64_t seed = 5) {
  DatasetManifest m;
  m.train = train;
  m.val = val;
  m.test = test;
  m.frame_size = frame;
  m.seed = seed;
  return synth_generate(m);
}

ArchSpec small_spec(Family family, std::size_t frame) {
  ArchSpec s;
  s.family = family;
  s.width = {1, 4};
  s.class_count = kSynthClasses;
  s.frame_size = frame;
  return s;
}

bool same_weights(const ModelParams<float>& a, const ModelParams<float>& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (const auto& [name, t] : a.tensors)
    if (!bit_equal(t, b.at(name))) return false;
  return true;
}

TEST(Train, SameSeedIsBitReproducible) {
  const auto d = tiny_dataset(12, 4, 1, 8);
  const auto model = build_model<float>(small_spec(Family::joint, 8), 3);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 5;
  cfg.seed = 11;
  cfg.augment.enabled = true;
  const auto a = train(model, d.train, d.val, cfg);
  const auto b = train(model, d.train, d.val, cfg);
  ASSERT_EQ(a.history.size(), 2u);
  for (std::size_t e = 0; e < 2; ++e) {
    EXPECT_EQ(a.history[e].train_loss, b.history[e].train_loss);
    EXPECT_EQ(a.history[e].val_accuracy, b.history[e].val_accuracy);
  }
  EXPECT_TRUE(same_weights(a.final_model, b.final_model));
  EXPECT_TRUE(same_weights(a.model, b.model));
  EXPECT_FALSE(same_weights(a.final_model, model));

  cfg.seed = 12;
  const auto c = train(model, d.train, d.val, cfg);
  EXPECT_FALSE(same_weights(a.final_model, c.final_model));
}

TEST(Train, FullBatchEpochTakesOneStepPerTensor) {
  const auto d = tiny_dataset(6, 1, 1, 8);
  const auto model = build_model<float>(small_spec(Family::baseline_cnn3d, 8), 1);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = d.train.size();
  const auto r = train(model, d.train, {}, cfg);
  EXPECT_EQ(r.steps, 1u);
  EXPECT_EQ(r.adam.t, 1u);
  std::size_t trainable = 0;
  for (const auto& [name, t] : model.tensors) {
    if (is_buffer_name(name)) {
      EXPECT_FALSE(r.adam.m.count(name)) << name;
      continue;
    }
    ++trainable;
    ASSERT_TRUE(r.adam.m.count(name)) << name;
    EXPECT_EQ(r.adam.m.at(name).shape(), t.shape());
  }
  EXPECT_EQ(r.adam.m.size(), trainable);
  EXPECT_EQ(r.adam.v.size(), trainable);
  // The batch-norm running statistics moved too.
  EXPECT_FALSE(bit_equal(r.final_model.at("bn1.running_mean"), model.at("bn1.running_mean")));
}

TEST(Train, BestSnapshotPrefersLaterEpochOnTies) {
  const auto d = tiny_dataset(16, 8, 1, 8);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 4;
  const auto r = train(build_model<float>(small_spec(Family::baseline_lstm, 8), 2), d.train, d.val, cfg);
  double best = -1;
  for (const auto& h : r.history) best = std::max(best, *h.val_accuracy);
  ASSERT_GE(r.best_epoch, 1u);
  EXPECT_EQ(*r.history[r.best_epoch - 1].val_accuracy, best);
  for (std::size_t e = r.best_epoch; e < r.history.size(); ++e) EXPECT_LT(*r.history[e].val_accuracy, best);
  EXPECT_DOUBLE_EQ(evaluate(r.model, d.val).accuracy(), best);
}

TEST(Train, WritesHistoryRecords) {
  const auto d = tiny_dataset(8, 4, 1, 8);
  const auto csv = std::filesystem::temp_directory_path() / "gkd_trainer_history.csv";
  std::ostringstream log;
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 4;
  cfg.history_csv = csv.string();
  cfg.log = &log;
  train(build_model<float>(small_spec(Family::baseline_lstm, 8), 2), d.train, d.val, cfg);
  std::ifstream in(csv);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], "epoch,train_loss,train_accuracy,val_accuracy");
  EXPECT_EQ(lines[3].substr(0, 2), "3,");
  const std::string text = log.str();
  EXPECT_NE(text.find("epoch 1 train_loss"), std::string::npos);
  EXPECT_NE(text.find("epoch 3 train_loss"), std::string::npos);
  std::filesystem::remove(csv);
}

TEST(Train, RejectsBadInputs) {
  const auto d = tiny_dataset(4, 1, 1, 8);
  const auto model = build_model<float>(small_spec(Family::joint, 8), 1);
  TrainConfig cfg;
  EXPECT_THROW(train(model, {}, d.val, cfg), std::invalid_argument);
  cfg.epochs = 0;
  EXPECT_THROW(train(model, d.train, d.val, cfg), std::invalid_argument);
  cfg.epochs = 1;
  cfg.batch_size = 0;
  EXPECT_THROW(train(model, d.train, d.val, cfg), std::invalid_argument);
  cfg.batch_size = 2;
  auto bad = d.train;
  bad[0].label = 9;
  EXPECT_THROW(train(model, bad, d.val, cfg), std::invalid_argument);
  // Frames of the wrong size for the model.
  const auto other = tiny_dataset(4, 1, 1, 16);
  EXPECT_THROW(train(model, other.train, {}, cfg), ShapeError);
  cfg.loss = LossMode::distill;
  EXPECT_THROW(train(model, d.train, {}, cfg), std::invalid_argument);
}

TEST(Train, OverfitsSixtyFourSamples) {
  const auto d = tiny_dataset(64, 1, 1, 32, 21);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 8;
  cfg.seed = 1;
  const auto r = train(build_model<float>(small_spec(Family::joint, 32), 4), d.train, {}, cfg);
  EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
  EXPECT_GE(r.history.back().train_accuracy, 0.95);
  EXPECT_GE(evaluate(r.final_model, d.train).accuracy(), 0.95);
}

// ---------------------------------------------------------------------------

TEST(Evaluate, OracleGetsDiagonalConfusion) {
  const auto d = tiny_dataset(1, 1, 24, 8);
  const auto r = evaluate(
      [](const std::vector<const GestureSample*>& batch) {
        std::vector<std::size_t> out;
        for (const auto* s : batch) out.push_back(s->label);
        return out;
      },
      d.test, kSynthClasses, 5);
  EXPECT_EQ(r.accuracy(), 1.0);
  EXPECT_EQ(r.total, 24u);
  for (std::size_t i = 0; i < kSynthClasses; ++i)
    for (std::size_t j = 0; j < kSynthClasses; ++j) EXPECT_EQ(r.confusion[i][j], i == j ? 3u : 0u);
}

TEST(Evaluate, UntrainedModelIsNearChance) {
  const auto d = tiny_dataset(1, 1, 240, 16);
  const auto model = build_model<float>(small_spec(Family::baseline_lstm, 16), 9);
  const auto r = evaluate(model, d.test);
  EXPECT_NEAR(r.accuracy(), 0.125, 0.08);
  std::size_t sum = 0;
  for (const auto& row : r.confusion)
    for (std::size_t v : row) sum += v;
  EXPECT_EQ(sum, d.test.size());
}

TEST(Evaluate, NeverChangesTheModel) {
  const auto d = tiny_dataset(1, 1, 10, 8);
  const auto model = build_model<float>(small_spec(Family::joint, 8), 9);
  const auto copy = model;
  const auto a = evaluate(model, d.test);
  const auto b = evaluate(model, d.test, 3);
  EXPECT_TRUE(same_weights(model, copy));
  EXPECT_EQ(a.confusion, b.confusion);
}

TEST(Evaluate, RejectsEmptyDataset) {
  const auto model = build_model<float>(small_spec(Family::joint, 8), 9);
  EXPECT_THROW(evaluate(model, {}), std::invalid_argument);
}

TEST(ArgmaxRows, LowestIndexWinsTies) {
  Tensor<float> logits(Shape{2, 3}, std::vector<float>{1, 3, 3, -1, -2, -1});
  EXPECT_EQ(argmax_rows(logits), (std::vector<std::size_t>{1, 0}));
}

}  // namespace
}  // namespace gkd
