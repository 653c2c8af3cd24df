#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "gkd/grad_check.hpp"
#include "gkd/layers.hpp"
#include "test_util.hpp"

namespace gkd {
namespace {

using test::random_tensor;

TEST(Relu, Examples) {
  Tensor<float> x(Shape{3}, std::vector<float>{-1, 0, 2});
  EXPECT_EQ(relu(x).values(), (std::vector<float>{0, 0, 2}));
  EXPECT_EQ(relu(Tensor<float>(Shape{4}, -3.0f)).values(), (std::vector<float>(4, 0.0f)));
  auto r = random_tensor<float>({50}, 1);
  EXPECT_EQ(relu(relu(r)), relu(r));
}

TEST(BatchNorm, ConstantChannelMapsToBeta) {
  auto state = BatchNormState<float>::fresh(2);
  state.gamma[0] = 3.0f;
  state.gamma[1] = -2.0f;
  state.beta.fill(0.5f);
  Tensor<float> x(Shape{2, 2, 2, 3, 3});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 18; ++i) {
      x[(n * 2 + 0) * 18 + i] = 4.0f;
      x[(n * 2 + 1) * 18 + i] = -7.0f;
    }
  auto y = batchnorm3d(x, state, Mode::train);
  for (float v : y.data()) EXPECT_FLOAT_EQ(v, 0.5f);
}

TEST(BatchNorm, TrainModeStandardizesEachChannel) {
  auto state = BatchNormState<float>::fresh(3);
  auto x = random_tensor<float>({4, 3, 2, 4, 4}, 7, -3.0, 5.0);
  auto y = batchnorm3d(x, state, Mode::train);
  const std::size_t vol = 32;
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0, sq = 0;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < vol; ++i) mean += y[(n * 3 + c) * vol + i];
    mean /= 128;
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t i = 0; i < vol; ++i) {
        const double d = y[(n * 3 + c) * vol + i] - mean;
        sq += d * d;
      }
    EXPECT_LT(std::abs(mean), 1e-4);
    EXPECT_LT(std::abs(sq / 128 - 1.0), 1e-3);
  }
}

TEST(BatchNorm, RunningStatisticsUpdateWithMomentum) {
  auto state = BatchNormState<double>::fresh(1);
  Tensor<double> x(Shape{1, 1, 1, 1, 4}, std::vector<double>{1, 2, 3, 6});
  batchnorm3d(x, state, Mode::train);
  // mean 3, unbiased variance (4 + 1 + 0 + 9) / 3
  EXPECT_NEAR(state.stats.running_mean[0], 0.1 * 3, 1e-12);
  EXPECT_NEAR(state.stats.running_var[0], 0.9 + 0.1 * 14.0 / 3.0, 1e-12);
}

TEST(BatchNorm, EvalModeUsesRunningStatisticsOnly) {
  auto state = BatchNormState<float>::fresh(2);
  auto x = random_tensor<float>({2, 2, 2, 3, 3}, 3);
  auto y = batchnorm3d(x, state, Mode::eval);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i], 1e-5 * std::abs(x[i]) + 1e-7);
  EXPECT_EQ(state.stats.running_mean[0], 0.0f);
  EXPECT_EQ(state.stats.running_var[1], 1.0f);

  state.stats.running_mean.fill(1.0f);
  state.stats.running_var.fill(4.0f);
  auto y2 = batchnorm3d(x, state, Mode::eval);
  auto y3 = batchnorm3d(random_tensor<float>({2, 2, 2, 3, 3}, 3), state, Mode::eval);
  EXPECT_EQ(y2, y3);
  EXPECT_NEAR(y2[0], (x[0] - 1.0f) / std::sqrt(4.0f + 1e-5f), 1e-6);
}

TEST(BatchNorm, TrainModeRejectsSingleElementChannels) {
  auto state = BatchNormState<float>::fresh(2);
  EXPECT_THROW(batchnorm3d(Tensor<float>(Shape{1, 2, 1, 1, 1}), state, Mode::train), ShapeError);
  EXPECT_NO_THROW(batchnorm3d(Tensor<float>(Shape{1, 2, 1, 1, 1}), state, Mode::eval));
}

TEST(BatchNorm, RunningVarianceStaysNonNegative) {
  auto state = BatchNormState<float>::fresh(4);
  for (int step = 0; step < 20; ++step) {
    batchnorm3d(random_tensor<float>({2, 4, 2, 2, 2}, 100 + step, -10, 10), state, Mode::train);
    for (float v : state.stats.running_var.data()) EXPECT_GE(v, 0.0f);
  }
}

template <typename LossFn>
double check(LossFn&& fn, ParamMap<double>& params) {
  return grad_check<double>(fn, params).max_relative_error;
}

TEST(BatchNormGradient, TrainAndEvalModes) {
  for (Mode mode : {Mode::train, Mode::eval}) {
    ParamMap<double> params;
    params.emplace("x", random_tensor<double>({2, 3, 2, 3, 3}, 5, -2, 2));
    params.emplace("gamma", random_tensor<double>({3}, 6, 0.5, 1.5));
    params.emplace("beta", random_tensor<double>({3}, 7));
    const auto target = random_tensor<double>({2, 3, 2, 3, 3}, 8);
    auto stats = BatchNormStats<double>::fresh(3);
    stats.running_mean.fill(0.2);
    stats.running_var.fill(1.7);
    auto loss = [&](Tape<double>& tape, const ParamMap<double>& p) {
      auto local = stats;
      Var y = ops::batchnorm3d(tape, tape.parameter("x", p.at("x")),
                               tape.parameter("gamma", p.at("gamma")),
                               tape.parameter("beta", p.at("beta")), local, mode);
      return ops::sum(tape, ops::mul(tape, y, tape.constant(target)));
    };
    EXPECT_LT(check(loss, params), 1e-3) << (mode == Mode::train ? "train" : "eval");
  }
}

TEST(ReluGradient, MatchesFiniteDifferences) {
  ParamMap<double> params;
  params.emplace("x", random_tensor<double>({40}, 9));
  const auto target = random_tensor<double>({40}, 10);
  auto loss = [&](Tape<double>& tape, const ParamMap<double>& p) {
    Var y = ops::relu(tape, tape.parameter("x", p.at("x")));
    return ops::sum(tape, ops::mul(tape, y, tape.constant(target)));
  };
  EXPECT_LT(check(loss, params), 1e-3);
}

// Scalar LSTM (H = I = 1) evaluated directly from the gate equations.
TEST(Lstm, ScalarCellMatchesHandEvaluation) {
  const double x = 0.7, h0 = -0.3, c0 = 0.4;
  const double wi[4] = {0.5, -0.2, 0.9, 0.3};   // input weights per gate (i, f, g, o)
  const double wh[4] = {0.1, 0.8, -0.6, -0.4};  // recurrent weights
  const double bb[4] = {0.05, 1.0, -0.1, 0.2};
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  const double i = sig(wi[0] * x + wh[0] * h0 + bb[0]);
  const double f = sig(wi[1] * x + wh[1] * h0 + bb[1]);
  const double g = std::tanh(wi[2] * x + wh[2] * h0 + bb[2]);
  const double o = sig(wi[3] * x + wh[3] * h0 + bb[3]);
  const double c1 = f * c0 + i * g;
  const double h1 = o * std::tanh(c1);

  Tensor<double> w_ih(Shape{4, 1}, std::vector<double>(wi, wi + 4));
  Tensor<double> w_hh(Shape{4, 1}, std::vector<double>(wh, wh + 4));
  Tensor<double> bias(Shape{4}, std::vector<double>(bb, bb + 4));
  LstmState<double> s{Tensor<double>(Shape{1}, h0), Tensor<double>(Shape{1}, c0)};
  auto next = lstm_step(Tensor<double>(Shape{1}, x), s, w_ih, w_hh, bias);
  EXPECT_NEAR(next.hidden[0], h1, 1e-6);
  EXPECT_NEAR(next.cell[0], c1, 1e-6);

  LstmState<float> sf{s.hidden.cast<float>(), s.cell.cast<float>()};
  auto nextf = lstm_step(Tensor<float>(Shape{1}, 0.7f), sf, w_ih.cast<float>(), w_hh.cast<float>(),
                         bias.cast<float>());
  EXPECT_NEAR(nextf.hidden[0], h1, 1e-6);
}

TEST(Lstm, ZeroWeightsGiveZeroState) {
  const std::size_t h = 5, in = 3;
  auto x = random_tensor<float>({in}, 1);
  auto next = lstm_step(x, LstmState<float>::zeros(h), Tensor<float>(Shape{4 * h, in}),
                        Tensor<float>(Shape{4 * h, h}), Tensor<float>(Shape{4 * h}));
  for (float v : next.hidden.data()) EXPECT_EQ(v, 0.0f);
  for (float v : next.cell.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Lstm, SingleStepSequenceEqualsOneStep) {
  auto w_ih = random_tensor<float>({16, 3}, 2);
  auto w_hh = random_tensor<float>({16, 4}, 3);
  auto b = random_tensor<float>({16}, 4);
  auto x = random_tensor<float>({3}, 5);
  auto seq = lstm_forward<float>({x}, w_ih, w_hh, b);
  auto step = lstm_step(x, LstmState<float>::zeros(4), w_ih, w_hh, b);
  EXPECT_TRUE(test::bit_equal(seq.hidden, step.hidden));
  EXPECT_TRUE(test::bit_equal(seq.cell, step.cell));
}

TEST(Lstm, HiddenStaysInUnitInterval) {
  auto w_ih = random_tensor<float>({32, 6}, 6, -5, 5);
  auto w_hh = random_tensor<float>({32, 8}, 7, -5, 5);
  auto b = random_tensor<float>({32}, 8, -5, 5);
  std::vector<Tensor<float>> steps;
  for (int t = 0; t < 20; ++t) steps.push_back(random_tensor<float>({6}, 50 + t, -10, 10));
  auto state = LstmState<float>::zeros(8);
  for (const auto& x : steps) {
    state = lstm_step(x, state, w_ih, w_hh, b);
    for (float v : state.hidden.data()) {
      EXPECT_GE(v, -1.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Lstm, RejectsShapeMismatch) {
  EXPECT_THROW(lstm_step(Tensor<float>(Shape{3}), LstmState<float>::zeros(4),
                         Tensor<float>(Shape{16, 2}), Tensor<float>(Shape{16, 4}),
                         Tensor<float>(Shape{16})),
               ShapeError);
  EXPECT_THROW(lstm_step(Tensor<float>(Shape{3}), LstmState<float>::zeros(4),
                         Tensor<float>(Shape{16, 3}), Tensor<float>(Shape{16, 4}),
                         Tensor<float>(Shape{12})),
               ShapeError);
}

TEST(LstmGradient, ThreeStepsThroughTime) {
  const std::size_t batch = 2, in = 3, h = 4;
  ParamMap<double> params;
  params.emplace("x", random_tensor<double>({3 * batch, in}, 11));
  params.emplace("w_ih", random_tensor<double>({4 * h, in}, 12));
  params.emplace("w_hh", random_tensor<double>({4 * h, h}, 13));
  params.emplace("bias", random_tensor<double>({4 * h}, 14));
  const auto target = random_tensor<double>({batch, h}, 15);
  auto loss = [&](Tape<double>& tape, const ParamMap<double>& p) {
    Var xs = tape.parameter("x", p.at("x"));
    Var w_ih = tape.parameter("w_ih", p.at("w_ih"));
    Var w_hh = tape.parameter("w_hh", p.at("w_hh"));
    Var b = tape.parameter("bias", p.at("bias"));
    Var zero = tape.constant(Tensor<double>(Shape{4 * h}));
    ops::LstmVars state{tape.constant(Tensor<double>(Shape{batch, h})),
                        tape.constant(Tensor<double>(Shape{batch, h}))};
    std::vector<Var> hs;
    for (std::size_t t = 0; t < 3; ++t) {
      Var x = ops::gather_rows(tape, xs, {t * batch, t * batch + 1});
      state = ops::lstm_step(tape, x, state, w_ih, w_hh, b, zero);
      hs.push_back(state.hidden);
    }
    // sample 0 read at step 2, sample 1 at step 1
    Var last = ops::pick_steps(tape, hs, {2, 1});
    return ops::sum(tape, ops::mul(tape, last, tape.constant(target)));
  };
  EXPECT_LT(check(loss, params), 1e-3);
}

TEST(Softmax, Examples) {
  auto u = softmax(Tensor<float>(Shape{4}, 0.0f));
  for (float v : u.data()) EXPECT_FLOAT_EQ(v, 0.25f);
  auto p = softmax(Tensor<double>(Shape{2}, std::vector<double>{2, 0}));
  EXPECT_NEAR(p[0], 0.88080, 1e-5);
  EXPECT_NEAR(p[1], 0.11920, 1e-5);
}

TEST(Softmax, ShiftInvarianceAndNormalization) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto z = random_tensor<double>({7}, seed, -20, 20);
    auto shifted = z;
    for (std::size_t i = 0; i < z.size(); ++i) shifted[i] += 123.0;
    auto a = softmax(z), b = softmax(shifted);
    double total = 0;
    for (std::size_t i = 0; i < 7; ++i) {
      EXPECT_NEAR(a[i], b[i], 1e-12);
      EXPECT_GT(a[i], 0.0);
      EXPECT_LT(a[i], 1.0);
      total += a[i];
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(CrossEntropy, Examples) {
  EXPECT_NEAR(cross_entropy(Tensor<double>(Shape{20}, 0.3), 7), std::log(20.0), 1e-12);
  EXPECT_NEAR(cross_entropy(Tensor<double>(Shape{20}, 0.3), 7), 2.9957, 1e-4);
  EXPECT_NEAR(cross_entropy(Tensor<double>(Shape{2}, std::vector<double>{2, 0}), 0), 0.12693,
              1e-5);
  auto z = random_tensor<double>({6}, 3, -2, 2);
  auto p = softmax(z);
  double entropy = 0;
  for (double v : p.data()) entropy -= v * std::log(v);
  EXPECT_NEAR(cross_entropy(z, p), entropy, 1e-12);
}

TEST(CrossEntropy, NonNegativeAndZeroOnlyForConfidentMatch) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto z = random_tensor<double>({5}, seed, -4, 4);
    EXPECT_GE(cross_entropy(z, seed % 5), 0.0);
  }
  Tensor<double> confident(Shape{3}, std::vector<double>{100, 0, 0});
  EXPECT_NEAR(cross_entropy(confident, 0), 0.0, 1e-12);
  // Floor at 1e-12: an impossible class costs at most -log(1e-12).
  EXPECT_NEAR(cross_entropy(confident, 1), -std::log(1e-12), 1e-9);
}

TEST(CrossEntropy, RejectsBadTargets) {
  EXPECT_THROW(cross_entropy(Tensor<float>(Shape{3}), 3), std::out_of_range);
  EXPECT_THROW(cross_entropy(Tensor<float>(Shape{3}), Tensor<float>(Shape{3}, 0.5f)),
               std::invalid_argument);
}

TEST(CrossEntropyGradient, HardAndSoftTargets) {
  ParamMap<double> params;
  params.emplace("z", random_tensor<double>({3, 5}, 21, -3, 3));
  const std::vector<std::size_t> labels{0, 4, 2};
  auto hard = [&](Tape<double>& tape, const ParamMap<double>& p) {
    return ops::cross_entropy(tape, tape.parameter("z", p.at("z")), labels);
  };
  EXPECT_LT(check(hard, params), 1e-3);

  const auto targets = softmax(random_tensor<double>({3, 5}, 22, -2, 2));
  for (double temperature : {1.0, 2.0, 5.0}) {
    auto soft = [&](Tape<double>& tape, const ParamMap<double>& p) {
      return ops::soft_cross_entropy(tape, tape.parameter("z", p.at("z")), targets, temperature);
    };
    EXPECT_LT(check(soft, params), 1e-3) << temperature;
  }
}

TEST(CrossEntropyGradient, ClampedEntriesContributeNoLogGradient) {
  // Class 1 probability is far below the floor; analytic and numeric agree.
  ParamMap<double> params;
  params.emplace("z", Tensor<double>(Shape{1, 3}, std::vector<double>{0.0, -40.0, 0.5}));
  const Tensor<double> targets(Shape{1, 3}, std::vector<double>{0.3, 0.3, 0.4});
  auto soft = [&](Tape<double>& tape, const ParamMap<double>& p) {
    return ops::soft_cross_entropy(tape, tape.parameter("z", p.at("z")), targets, 1.0);
  };
  EXPECT_LT(check(soft, params), 1e-3);
}

}  // namespace
}  // namespace gkd
