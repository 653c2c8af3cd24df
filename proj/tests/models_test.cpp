#include <gtest/gtest.h>

#include <cmath>
#include <tuple>

#include "gkd/grad_check.hpp"
#include "gkd/models.hpp"
#include "test_util.hpp"

namespace gkd {
namespace {

using test::random_tensor;

ArchSpec spec_of(Family family, Rational width, std::size_t frame = 64, std::size_t classes = 20) {
  ArchSpec s;
  s.family = family;
  s.width = width;
  s.frame_size = frame;
  s.class_count = classes;
  return s;
}

constexpr Rational kFull{1, 1}, kHalf{1, 2}, kQuarter{1, 4};

TEST(ParamCount, CanonicalCnnMatchesClosedForm) {
  EXPECT_EQ(param_count(spec_of(Family::baseline_cnn3d, kFull)), 18'823'284u);
  EXPECT_EQ(param_count(spec_of(Family::joint, kFull)), 6'760'564u);
}

TEST(ParamCount, BuiltModelAgreesWithLayout) {
  for (Family f : {Family::baseline_cnn3d, Family::baseline_lstm, Family::joint}) {
    const auto spec = spec_of(f, kQuarter);
    EXPECT_EQ(param_count(build_model<float>(spec, 1)), param_count(spec)) << to_string(f);
  }
}

class ScalingLaw : public ::testing::TestWithParam<Family> {};

TEST_P(ScalingLaw, HalfAndQuarterWidthRatios) {
  const double full = static_cast<double>(param_count(spec_of(GetParam(), kFull)));
  const double half = static_cast<double>(param_count(spec_of(GetParam(), kHalf))) / full;
  const double quarter = static_cast<double>(param_count(spec_of(GetParam(), kQuarter))) / full;
  EXPECT_GE(half, 0.23);
  EXPECT_LE(half, 0.27);
  EXPECT_GE(quarter, 0.055);
  EXPECT_LE(quarter, 0.075);
}

INSTANTIATE_TEST_SUITE_P(AllFamilies, ScalingLaw,
                         ::testing::Values(Family::baseline_cnn3d, Family::baseline_lstm,
                                           Family::joint),
                         [](const auto& info) { return to_string(info.param); });

TEST(ArchSpec, WidthRoundingAndErrors) {
  auto s = spec_of(Family::joint, Rational{1, 3});
  EXPECT_EQ(s.scaled(32), 11u);  // 10.67
  EXPECT_EQ(s.scaled(512), 171u);
  EXPECT_THROW(spec_of(Family::joint, Rational{1, 1024}).validate(), std::invalid_argument);
  EXPECT_THROW(build_model<float>(spec_of(Family::joint, Rational{1, 100}), 0), std::invalid_argument);
  EXPECT_EQ(Rational::parse("1/4"), (Rational{1, 4}));
  EXPECT_EQ(Rational::parse("1"), (Rational{1, 1}));
  EXPECT_THROW(Rational::parse("0.25"), std::invalid_argument);
  EXPECT_THROW(Rational::parse("1/0"), std::invalid_argument);
}

TEST(ArchSpec, JsonRoundTrip) {
  for (Family f : {Family::baseline_cnn3d, Family::baseline_lstm, Family::joint}) {
    auto s = spec_of(f, kHalf, 32, 8);
    s.input_mode = InputMode::combined;
    const auto j = to_json(s);
    EXPECT_EQ(j.at("input_channels"), 4);
    EXPECT_EQ(arch_spec_from_json(j), s);
  }
  auto j = to_json(spec_of(Family::joint, kQuarter));
  j["layer_table"][0]["out"] = 99;
  EXPECT_THROW(arch_spec_from_json(j), std::invalid_argument);
}

TEST(Models, CnnShapeTraceAtFullWidth) {
  const auto spec = spec_of(Family::baseline_cnn3d, kFull);
  std::array<std::size_t, 3> dims{32, 64, 64};
  std::vector<std::size_t> temporal{32}, spatial{64};
  for (const auto& l : spec.conv_layers()) {
    for (std::size_t a = 0; a < 3; ++a)
      dims[a] = conv3d_shape(dims[a], l.kernel[a], l.geometry.stride[a], l.geometry.pad[a]);
    temporal.push_back(dims[0]);
    spatial.push_back(dims[1]);
  }
  EXPECT_EQ(temporal, (std::vector<std::size_t>{32, 16, 16, 8, 8, 4, 4}));
  EXPECT_EQ(spatial, (std::vector<std::size_t>{64, 32, 32, 16, 16, 8, 8}));
  EXPECT_EQ(spec.flatten_size(), 32'768u);
}

TEST(Models, JointEncoderShapeTrace) {
  const auto spec = spec_of(Family::joint, kFull);
  std::array<std::size_t, 3> dims{4, 64, 64};
  std::vector<std::size_t> temporal{4}, spatial{64};
  for (const auto& l : spec.conv_layers()) {
    for (std::size_t a = 0; a < 3; ++a)
      dims[a] = conv3d_shape(dims[a], l.kernel[a], l.geometry.stride[a], l.geometry.pad[a]);
    temporal.push_back(dims[0]);
    spatial.push_back(dims[1]);
  }
  EXPECT_EQ(temporal, (std::vector<std::size_t>{4, 2, 2, 1, 1, 1, 1}));
  EXPECT_EQ(spatial, (std::vector<std::size_t>{64, 32, 32, 16, 16, 8, 8}));
  EXPECT_EQ(spec.flatten_size(), 8'192u);
}

TEST(Models, BuildIsDeterministicInSeed) {
  const auto spec = spec_of(Family::joint, kQuarter);
  auto a = build_model<float>(spec, 42), b = build_model<float>(spec, 42), c = build_model<float>(spec, 43);
  ASSERT_EQ(a.tensors.size(), b.tensors.size());
  for (const auto& [name, t] : a.tensors) EXPECT_TRUE(test::bit_equal(t, b.at(name))) << name;
  EXPECT_FALSE(test::bit_equal(a.at("conv1.weight"), c.at("conv1.weight")));
  const Tensor<float>& bias = a.at("lstm.bias");
  const std::size_t h = spec.lstm_units();
  for (std::size_t i = 0; i < 4 * h; ++i) EXPECT_EQ(bias[i], (i >= h && i < 2 * h) ? 1.0f : 0.0f);
}

TEST(Models, NameSetIsDeterminedBySpec) {
  const auto spec = spec_of(Family::baseline_lstm, kQuarter);
  auto model = build_model<float>(spec, 0);
  std::vector<std::string> names;
  for (const auto& [name, t] : model.tensors) names.push_back(name);
  EXPECT_EQ(names, (std::vector<std::string>{"fc.bias", "fc.weight", "in_fc.bias", "in_fc.weight",
                                             "lstm.bias", "lstm.w_hh", "lstm.w_ih"}));
}

TEST(Models, FullWidthCnnOnZeroClipIsFinite) {
  auto model = build_model<float>(spec_of(Family::baseline_cnn3d, kFull), 3);
  Tape<float> tape(false);
  Var out = forward_baseline_cnn(tape, model, Tensor<float>(Shape{1, 2, 32, 64, 64}), Mode::eval);
  const auto& logits = tape.value(out);
  EXPECT_EQ(logits.shape(), (Shape{1, 20}));
  for (float v : logits.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Models, CnnRejectsWrongClipShape) {
  auto model = build_model<float>(spec_of(Family::baseline_cnn3d, kQuarter, 16), 3);
  Tape<float> tape(false);
  EXPECT_THROW(forward_baseline_cnn(tape, model, Tensor<float>(Shape{1, 2, 31, 16, 16}), Mode::eval),
               ShapeError);
  EXPECT_THROW(forward_baseline_cnn(tape, model, Tensor<float>(Shape{1, 4, 32, 16, 16}), Mode::eval),
               ShapeError);
  EXPECT_THROW(forward_baseline_cnn(tape, model, Tensor<float>(Shape{2, 32, 16, 16}), Mode::eval),
               ShapeError);
  EXPECT_NO_THROW(forward_baseline_cnn(tape, model, Tensor<float>(Shape{1, 2, 32, 16, 16}), Mode::eval));
}

TEST(Models, RecurrentModelsRejectBadVideos) {
  for (Family f : {Family::baseline_lstm, Family::joint}) {
    auto model = build_model<float>(spec_of(f, kQuarter, 16), 3);
    EXPECT_THROW(infer_logits(model, std::vector<Tensor<float>>{}), ShapeError);
    EXPECT_THROW(infer_logits(model, {Tensor<float>(Shape{2, 8, 32, 32})}), ShapeError);
    EXPECT_THROW(infer_logits(model, {Tensor<float>(Shape{3, 8, 16, 16})}), ShapeError);
  }
}

TEST(Models, JointHandlesVideosOfDifferentLengths) {
  auto model = build_model<float>(spec_of(Family::joint, kQuarter), 5);
  std::vector<Tensor<float>> videos;
  for (std::size_t t : {16, 32, 48}) videos.push_back(random_tensor<float>({2, t, 64, 64}, t, 0, 1));
  auto logits = infer_logits(model, videos);
  EXPECT_EQ(logits.shape(), (Shape{3, 20}));
  for (float v : logits.data()) EXPECT_TRUE(std::isfinite(v));
}

class ArbitraryLength : public ::testing::TestWithParam<Family> {};

TEST_P(ArbitraryLength, EveryLengthUpTo64) {
  auto model = build_model<float>(spec_of(GetParam(), kQuarter, 8, 8), 9);
  std::vector<Tensor<float>> videos;
  for (std::size_t t = 1; t <= 64; ++t) videos.push_back(random_tensor<float>({2, t, 8, 8}, t, 0, 1));
  auto batched = infer_logits(model, videos);
  EXPECT_EQ(batched.shape(), (Shape{64, 8}));
  for (float v : batched.data()) EXPECT_TRUE(std::isfinite(v));
  // Batched and per-video inference agree.
  for (std::size_t i : {0, 6, 31, 63}) {
    auto single = infer_logits(model, {videos[i]});
    for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(single[k], batched[i * 8 + k], 1e-5);
  }
}

INSTANTIATE_TEST_SUITE_P(Recurrent, ArbitraryLength,
                         ::testing::Values(Family::baseline_lstm, Family::joint),
                         [](const auto& info) { return to_string(info.param); });

TEST(Models, FourFrameLstmVideoIsOneStep) {
  auto model = build_model<double>(spec_of(Family::baseline_lstm, kQuarter, 8, 8), 11);
  auto video = random_tensor<double>({2, 4, 8, 8}, 12, 0, 1);
  auto logits = infer_logits(model, {video});

  auto feat = linear_forward(video.reshaped(Shape{video.size()}), model.at("in_fc.weight"),
                             model.at("in_fc.bias"));
  feat = relu(feat);
  auto state = lstm_step(feat, LstmState<double>::zeros(model.spec.lstm_units()),
                         model.at("lstm.w_ih"), model.at("lstm.w_hh"), model.at("lstm.bias"));
  auto expected = linear_forward(state.hidden, model.at("fc.weight"), model.at("fc.bias"));
  for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(logits[k], expected[k], 1e-9);
}

TEST(Models, SingleJointBlockIsEncoderStepClassifier) {
  auto model = build_model<double>(spec_of(Family::joint, kQuarter, 16, 8), 13);
  model.at("bn3.running_mean").fill(0.1);
  model.at("bn3.running_var").fill(2.0);
  auto video = random_tensor<double>({2, 4, 16, 16}, 14, 0, 1);
  auto logits = infer_logits(model, {video});

  Tensor<double> x = video.reshaped(Shape{1, 2, 4, 16, 16});
  const auto layers = model.spec.conv_layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string n = std::to_string(i + 1);
    x = conv3d_forward(x, model.at("conv" + n + ".weight"), model.at("conv" + n + ".bias"),
                       layers[i].geometry);
    BatchNormState<double> bn{model.at("bn" + n + ".gamma"), model.at("bn" + n + ".beta"),
                              {model.at("bn" + n + ".running_mean"), model.at("bn" + n + ".running_var")}};
    x = relu(batchnorm3d(x, bn, Mode::eval));
  }
  auto feat = relu(linear_forward(x.reshaped(Shape{x.size()}), model.at("enc_fc.weight"),
                                  model.at("enc_fc.bias")));
  auto state = lstm_step(feat, LstmState<double>::zeros(model.spec.lstm_units()),
                         model.at("lstm.w_ih"), model.at("lstm.w_hh"), model.at("lstm.bias"));
  auto expected = linear_forward(state.hidden, model.at("fc.weight"), model.at("fc.bias"));
  for (std::size_t k = 0; k < 8; ++k) EXPECT_NEAR(logits[k], expected[k], 1e-9);
}

TEST(Models, EvalForwardIsPure) {
  auto model = build_model<float>(spec_of(Family::joint, kQuarter, 16, 8), 15);
  const auto before = model;
  std::vector<Tensor<float>> videos{random_tensor<float>({2, 9, 16, 16}, 1, 0, 1),
                                    random_tensor<float>({2, 20, 16, 16}, 2, 0, 1)};
  auto a = infer_logits(model, videos);
  auto b = infer_logits(model, videos);
  EXPECT_TRUE(test::bit_equal(a, b));
  for (const auto& [name, t] : before.tensors) EXPECT_TRUE(test::bit_equal(t, model.at(name))) << name;
}

TEST(Models, TrainForwardReportsStatUpdatesWithoutMutating) {
  auto model = build_model<float>(spec_of(Family::baseline_cnn3d, kQuarter, 16, 8), 16);
  const auto before = model;
  std::vector<Tensor<float>> videos{random_tensor<float>({2, 40, 16, 16}, 1, 0, 1),
                                    random_tensor<float>({2, 20, 16, 16}, 2, 0, 1)};
  StatUpdates<float> updates;
  Tape<float> tape;
  forward(tape, model, videos, Mode::train, &updates);
  EXPECT_EQ(updates.size(), 12u);
  for (const auto& [name, t] : before.tensors) EXPECT_TRUE(test::bit_equal(t, model.at(name))) << name;
  EXPECT_FALSE(test::bit_equal(updates.at("bn1.running_mean"), model.at("bn1.running_mean")));
  apply_stat_updates(model, std::move(updates));
  EXPECT_FALSE(test::bit_equal(before.at("bn1.running_var"), model.at("bn1.running_var")));
}

// Cross-entropy through each full model at width 1/4 on 8x8 frames; a seeded
// subset of elements per tensor keeps the finite differences affordable.
// Eval mode runs with running statistics settled on the batch, since fresh
// statistics shrink activations towards the ReLU kinks.
class ModelGradient : public ::testing::TestWithParam<std::tuple<Family, Mode>> {};

TEST_P(ModelGradient, MatchesFiniteDifferences) {
  const auto [family, mode] = GetParam();
  const auto spec = spec_of(family, kQuarter, 8, 8);
  auto model = build_model<double>(spec, 21);
  std::vector<Tensor<double>> videos{random_tensor<double>({2, 8, 8, 8}, 22, 0, 1),
                                     random_tensor<double>({2, 6, 8, 8}, 23, 0, 1)};
  const std::vector<std::size_t> labels{3, 5};
  if (mode == Mode::eval) {
    for (int i = 0; i < 80; ++i) {
      StatUpdates<double> updates;
      Tape<double> tape(false);
      forward(tape, model, videos, Mode::train, &updates);
      apply_stat_updates(model, std::move(updates));
    }
  }
  // Running statistics sit in the same map but never reach the tape as
  // parameters, so the check skips them.
  auto loss = [&](Tape<double>& tape, const ParamMap<double>&) {
    return ops::cross_entropy(tape, forward(tape, model, videos, mode), labels);
  };
  GradCheckOptions opt;
  opt.max_elements_per_tensor = 12;
  opt.seed = 4;
  const auto r = grad_check<double>(loss, model.tensors, opt);
  EXPECT_LT(r.max_relative_error, 1e-3) << r.worst_tensor << "[" << r.worst_index
                                        << "] analytic " << r.worst_analytic << " numeric "
                                        << r.worst_numeric;
  EXPECT_GT(r.checked, 50u);
}

INSTANTIATE_TEST_SUITE_P(
    AllFamilies, ModelGradient,
    ::testing::Combine(::testing::Values(Family::baseline_cnn3d, Family::baseline_lstm,
                                         Family::joint),
                       ::testing::Values(Mode::train, Mode::eval)),
    [](const auto& info) {
      return to_string(std::get<0>(info.param)) +
             (std::get<1>(info.param) == Mode::train ? "_train" : "_eval");
    });

}  // namespace
}  // namespace gkd
