#pragma once

// Activation, normalization, recurrent and loss layers, each available as a
// pure function on tensors and as a differentiable tape operation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gkd/autodiff.hpp"
#include "gkd/linear.hpp"
#include "gkd/tensor.hpp"

namespace gkd {

enum class Mode { train, eval };

/// Floor applied inside log() by the cross-entropy losses.
inline constexpr double kLogFloor = 1e-12;

// ---------------------------------------------------------------------------
// ReLU

template <typename T>
Tensor<T> relu(Tensor<T> x) {
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = x[i] > T{0} ? x[i] : T{0};
  return x;
}

namespace ops {

template <typename T>
Var relu(Tape<T>& tape, Var x) {
  Var r = tape.result(gkd::relu(tape.value(x)), {x});
  if (tape.tracking_branches()) {
    const Tensor<T>& xv = tape.value(x);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < xv.size(); ++i) h = (h ^ (xv[i] > T{0} ? 1u : 2u)) * 0x100000001b3ULL;
    tape.mix_branch(h);
  }
  if (tape.requires_grad(r)) {
    tape.record([x, r](Tape<T>& t) {
      const Tensor<T>& xv = t.value(x);
      const Tensor<T>& g = t.grad(r);
      Tensor<T>& gx = t.grad(x);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xv[i] > T{0}) gx[i] += g[i];
    });
  }
  return r;
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Batch normalization over (N, T, H, W) per channel.

template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.1);
  T epsilon = T(1e-5);

  static BatchNormStats fresh(std::size_t channels) {
    return BatchNormStats{Tensor<T>(Shape{channels}, T{0}), Tensor<T>(Shape{channels}, T{1})};
  }
};

template <typename T>
struct BatchNormState {
  Tensor<T> gamma;
  Tensor<T> beta;
  BatchNormStats<T> stats;

  static BatchNormState fresh(std::size_t channels) {
    return BatchNormState{Tensor<T>(Shape{channels}, T{1}), Tensor<T>(Shape{channels}, T{0}),
                          BatchNormStats<T>::fresh(channels)};
  }
};

namespace bn_detail {

struct Dims {
  std::size_t n, c, volume;
  std::size_t per_channel() const { return n * volume; }
};

template <typename T>
Dims check(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  require_shape(x.rank() == 5, "batchnorm3d: input must be N x C x T x H x W, got " +
                                   shape_string(x.shape()));
  const std::size_t c = x.dim(1);
  require_shape(gamma.shape() == Shape{c} && beta.shape() == Shape{c},
                "batchnorm3d: gamma/beta must have " + std::to_string(c) + " entries");
  return Dims{x.dim(0), c, x.dim(2) * x.dim(3) * x.dim(4)};
}

// Per-channel mean and 1/sqrt(var + eps) used for normalization. In train mode
// the batch statistics are used and `stats` receives the running update.
template <typename T>
void channel_moments(const Tensor<T>& x, const Dims& d, BatchNormStats<T>& stats, Mode mode,
                     std::vector<T>& mean, std::vector<T>& inv_std) {
  mean.assign(d.c, T{0});
  inv_std.assign(d.c, T{0});
  if (mode == Mode::eval) {
    for (std::size_t c = 0; c < d.c; ++c) {
      mean[c] = stats.running_mean[c];
      inv_std[c] = T(1) / std::sqrt(stats.running_var[c] + stats.epsilon);
    }
    return;
  }
  const std::size_t m = d.per_channel();
  if (m < 2) {
    throw ShapeError("batchnorm3d: train mode needs at least 2 elements per channel, got " +
                     std::to_string(m));
  }
  for (std::size_t c = 0; c < d.c; ++c) {
    double acc = 0;
    for (std::size_t n = 0; n < d.n; ++n) {
      const T* p = x.ptr() + (n * d.c + c) * d.volume;
      for (std::size_t i = 0; i < d.volume; ++i) acc += p[i];
    }
    const double mu = acc / static_cast<double>(m);
    double sq = 0;
    for (std::size_t n = 0; n < d.n; ++n) {
      const T* p = x.ptr() + (n * d.c + c) * d.volume;
      for (std::size_t i = 0; i < d.volume; ++i) {
        const double diff = p[i] - mu;
        sq += diff * diff;
      }
    }
    const double var = sq / static_cast<double>(m);
    mean[c] = static_cast<T>(mu);
    inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(stats.epsilon)));
    const T unbiased = static_cast<T>(sq / static_cast<double>(m - 1));
    stats.running_mean[c] =
        (T(1) - stats.momentum) * stats.running_mean[c] + stats.momentum * static_cast<T>(mu);
    stats.running_var[c] = (T(1) - stats.momentum) * stats.running_var[c] + stats.momentum * unbiased;
  }
}

template <typename T>
Tensor<T> normalize(const Tensor<T>& x, const Dims& d, const Tensor<T>& gamma,
                    const Tensor<T>& beta, const std::vector<T>& mean,
                    const std::vector<T>& inv_std) {
  Tensor<T> y(x.shape());
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t c = 0; c < d.c; ++c) {
      const std::size_t off = (n * d.c + c) * d.volume;
      const T scale = gamma[c] * inv_std[c];
      const T shift = beta[c];
      const T mu = mean[c];
      for (std::size_t i = 0; i < d.volume; ++i) y[off + i] = (x[off + i] - mu) * scale + shift;
    }
  }
  return y;
}

}  // namespace bn_detail

/// Train mode normalizes with batch statistics and updates the running ones;
/// eval mode reads only the running statistics.
template <typename T>
Tensor<T> batchnorm3d(const Tensor<T>& x, BatchNormState<T>& state, Mode mode) {
  const auto d = bn_detail::check(x, state.gamma, state.beta);
  std::vector<T> mean, inv_std;
  bn_detail::channel_moments(x, d, state.stats, mode, mean, inv_std);
  return bn_detail::normalize(x, d, state.gamma, state.beta, mean, inv_std);
}

namespace ops {

template <typename T>
Var batchnorm3d(Tape<T>& tape, Var x, Var gamma, Var beta, BatchNormStats<T>& stats, Mode mode) {
  const auto d = bn_detail::check(tape.value(x), tape.value(gamma), tape.value(beta));
  std::vector<T> mean, inv_std;
  bn_detail::channel_moments(tape.value(x), d, stats, mode, mean, inv_std);
  Var r = tape.result(bn_detail::normalize(tape.value(x), d, tape.value(gamma), tape.value(beta),
                                           mean, inv_std),
                      {x, gamma, beta});
  if (!tape.requires_grad(r)) return r;
  tape.record([x, gamma, beta, r, d, mode, mean = std::move(mean),
               inv_std = std::move(inv_std)](Tape<T>& t) {
    const Tensor<T>& xv = t.value(x);
    const Tensor<T>& gv = t.value(gamma);
    const Tensor<T>& gy = t.grad(r);
    const bool need_x = t.requires_grad(x);
    const double m = static_cast<double>(d.per_channel());
    for (std::size_t c = 0; c < d.c; ++c) {
      double sum_g = 0;
      double sum_g_xhat = 0;
      for (std::size_t n = 0; n < d.n; ++n) {
        const std::size_t off = (n * d.c + c) * d.volume;
        for (std::size_t i = 0; i < d.volume; ++i) {
          const double xhat = (xv[off + i] - mean[c]) * inv_std[c];
          sum_g += gy[off + i];
          sum_g_xhat += gy[off + i] * xhat;
        }
      }
      if (t.requires_grad(gamma)) t.grad(gamma)[c] += static_cast<T>(sum_g_xhat);
      if (t.requires_grad(beta)) t.grad(beta)[c] += static_cast<T>(sum_g);
      if (!need_x) continue;
      Tensor<T>& gx = t.grad(x);
      const double scale = static_cast<double>(gv[c]) * inv_std[c];
      for (std::size_t n = 0; n < d.n; ++n) {
        const std::size_t off = (n * d.c + c) * d.volume;
        for (std::size_t i = 0; i < d.volume; ++i) {
          if (mode == Mode::eval) {
            gx[off + i] += static_cast<T>(scale * gy[off + i]);
          } else {
            const double xhat = (xv[off + i] - mean[c]) * inv_std[c];
            gx[off + i] +=
                static_cast<T>(scale * (gy[off + i] - sum_g / m - xhat * sum_g_xhat / m));
          }
        }
      }
    }
  });
  return r;
}

}  // namespace ops

// ---------------------------------------------------------------------------
// LSTM. Gate rows are laid out as [input, forget, candidate, output] blocks of
// H rows each.

template <typename T>
struct LstmState {
  Tensor<T> hidden;
  Tensor<T> cell;

  static LstmState zeros(std::size_t hidden_size) {
    return LstmState{Tensor<T>(Shape{hidden_size}), Tensor<T>(Shape{hidden_size})};
  }
};

namespace lstm_detail {

template <typename T>
T sigmoid(T v) {
  return T(1) / (T(1) + std::exp(-v));
}

// gates [B x 4H] (pre-activation), c [B x H] -> h', c'
template <typename T>
std::pair<Tensor<T>, Tensor<T>> cell(const Tensor<T>& gates, const Tensor<T>& c) {
  const std::size_t h = c.shape().back();
  const std::size_t b = c.size() / h;
  require_shape(gates.size() == b * 4 * h, "lstm: gate tensor " + shape_string(gates.shape()) +
                                               " inconsistent with cell " +
                                               shape_string(c.shape()));
  Tensor<T> h_next(c.shape());
  Tensor<T> c_next(c.shape());
  for (std::size_t r = 0; r < b; ++r) {
    const T* g = gates.ptr() + r * 4 * h;
    for (std::size_t j = 0; j < h; ++j) {
      const T ig = sigmoid(g[j]);
      const T fg = sigmoid(g[h + j]);
      const T cg = std::tanh(g[2 * h + j]);
      const T og = sigmoid(g[3 * h + j]);
      const T cn = fg * c[r * h + j] + ig * cg;
      c_next[r * h + j] = cn;
      h_next[r * h + j] = og * std::tanh(cn);
    }
  }
  return {std::move(h_next), std::move(c_next)};
}

template <typename T>
void check_weights(std::size_t input, std::size_t hidden, const Tensor<T>& w_ih,
                   const Tensor<T>& w_hh, const Tensor<T>& bias) {
  require_shape(w_ih.shape() == Shape{4 * hidden, input},
                "lstm: w_ih must be " + shape_string({4 * hidden, input}) + ", got " +
                    shape_string(w_ih.shape()));
  require_shape(w_hh.shape() == Shape{4 * hidden, hidden},
                "lstm: w_hh must be " + shape_string({4 * hidden, hidden}) + ", got " +
                    shape_string(w_hh.shape()));
  require_shape(bias.shape() == Shape{4 * hidden},
                "lstm: bias must have " + std::to_string(4 * hidden) + " entries");
}

}  // namespace lstm_detail

/// One LSTM time step on a single vector or a [B x I] batch.
template <typename T>
LstmState<T> lstm_step(const Tensor<T>& x, const LstmState<T>& state, const Tensor<T>& w_ih,
                       const Tensor<T>& w_hh, const Tensor<T>& bias) {
  require_shape(state.hidden.shape() == state.cell.shape(), "lstm: hidden/cell shape mismatch");
  require_shape(x.rank() == state.hidden.rank() &&
                    (x.rank() == 1 || x.dim(0) == state.hidden.dim(0)),
                "lstm: input batch does not match state");
  const std::size_t hidden = state.hidden.shape().back();
  lstm_detail::check_weights(x.shape().back(), hidden, w_ih, w_hh, bias);
  Tensor<T> gates = linear_forward(x, w_ih, bias);
  const Tensor<T> recurrent = linear_forward(state.hidden, w_hh, Tensor<T>(Shape{4 * hidden}));
  for (std::size_t i = 0; i < gates.size(); ++i) gates[i] += recurrent[i];
  auto [h, c] = lstm_detail::cell(gates, state.cell);
  return LstmState<T>{std::move(h), std::move(c)};
}

/// Runs the recurrence over `steps` from a zero state and returns the final state.
template <typename T>
LstmState<T> lstm_forward(const std::vector<Tensor<T>>& steps, const Tensor<T>& w_ih,
                          const Tensor<T>& w_hh, const Tensor<T>& bias) {
  if (steps.empty()) throw ShapeError("lstm_forward: empty sequence");
  const std::size_t hidden = w_hh.dim(1);
  LstmState<T> state = LstmState<T>::zeros(hidden);
  if (steps.front().rank() == 2) {
    state = LstmState<T>{Tensor<T>(Shape{steps.front().dim(0), hidden}),
                         Tensor<T>(Shape{steps.front().dim(0), hidden})};
  }
  for (const auto& x : steps) state = lstm_step(x, state, w_ih, w_hh, bias);
  return state;
}

namespace ops {

struct LstmVars {
  Var hidden;
  Var cell;
};

/// Fused gate nonlinearity and cell update: (gates, c) -> (h', c').
template <typename T>
LstmVars lstm_cell(Tape<T>& tape, Var gates, Var c) {
  auto [h_next, c_next] = lstm_detail::cell(tape.value(gates), tape.value(c));
  Var hr = tape.result(std::move(h_next), {gates, c});
  Var cr = tape.result(std::move(c_next), {gates, c});
  if (tape.requires_grad(hr)) {
    tape.record([gates, c, hr, cr](Tape<T>& t) {
      const Tensor<T>& gv = t.value(gates);
      const Tensor<T>& cv = t.value(c);
      const Tensor<T>& cn = t.value(cr);
      const Tensor<T>& dh = t.grad(hr);
      const Tensor<T>& dc_next = t.grad(cr);
      const std::size_t h = cv.shape().back();
      const std::size_t b = cv.size() / h;
      const bool need_g = t.requires_grad(gates);
      const bool need_c = t.requires_grad(c);
      for (std::size_t r = 0; r < b; ++r) {
        const T* g = gv.ptr() + r * 4 * h;
        for (std::size_t j = 0; j < h; ++j) {
          const std::size_t k = r * h + j;
          const T ig = lstm_detail::sigmoid(g[j]);
          const T fg = lstm_detail::sigmoid(g[h + j]);
          const T cg = std::tanh(g[2 * h + j]);
          const T og = lstm_detail::sigmoid(g[3 * h + j]);
          const T tc = std::tanh(cn[k]);
          const T dc = dc_next[k] + dh[k] * og * (T(1) - tc * tc);
          if (need_g) {
            T* dg = t.grad(gates).ptr() + r * 4 * h;
            dg[j] += dc * cg * ig * (T(1) - ig);
            dg[h + j] += dc * cv[k] * fg * (T(1) - fg);
            dg[2 * h + j] += dc * ig * (T(1) - cg * cg);
            dg[3 * h + j] += dh[k] * tc * og * (T(1) - og);
          }
          if (need_c) t.grad(c)[k] += dc * fg;
        }
      }
    });
  }
  return LstmVars{hr, cr};
}

/// One LSTM step on the tape. `zero_bias` is a constant of 4H zeros used for
/// the recurrent projection.
template <typename T>
LstmVars lstm_step(Tape<T>& tape, Var x, LstmVars state, Var w_ih, Var w_hh, Var bias,
                   Var zero_bias) {
  const std::size_t hidden = tape.value(w_hh).dim(1);
  lstm_detail::check_weights(tape.value(x).shape().back(), hidden, tape.value(w_ih),
                             tape.value(w_hh), tape.value(bias));
  Var input_part = linear(tape, x, w_ih, bias);
  Var recurrent_part = linear(tape, state.hidden, w_hh, zero_bias);
  Var gates = weighted_sum(tape, input_part, T(1), recurrent_part, T(1));
  return lstm_cell(tape, gates, state.cell);
}

/// Rows of a [R x F] matrix; std::nullopt entries produce zero rows.
template <typename T>
Var gather_rows(Tape<T>& tape, Var x, std::vector<std::optional<std::size_t>> rows) {
  const Tensor<T>& xv = tape.value(x);
  require_shape(xv.rank() == 2, "gather_rows: input must be a matrix");
  const std::size_t f = xv.dim(1);
  Tensor<T> out(Shape{rows.size(), f});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!rows[i]) continue;
    if (*rows[i] >= xv.dim(0)) throw std::out_of_range("gather_rows: row index out of range");
    std::copy(xv.ptr() + *rows[i] * f, xv.ptr() + (*rows[i] + 1) * f, out.ptr() + i * f);
  }
  Var r = tape.result(std::move(out), {x});
  if (tape.requires_grad(r)) {
    tape.record([x, r, rows = std::move(rows), f](Tape<T>& t) {
      const Tensor<T>& g = t.grad(r);
      Tensor<T>& gx = t.grad(x);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (!rows[i]) continue;
        for (std::size_t j = 0; j < f; ++j) gx[*rows[i] * f + j] += g[i * f + j];
      }
    });
  }
  return r;
}

/// Row b of the result is row b of steps[step_of_row[b]]; every step is [B x H].
template <typename T>
Var pick_steps(Tape<T>& tape, const std::vector<Var>& steps,
               const std::vector<std::size_t>& step_of_row) {
  require_shape(!steps.empty(), "pick_steps: no steps");
  const Shape shape = tape.value(steps.front()).shape();
  require_shape(shape.size() == 2 && shape[0] == step_of_row.size(),
                "pick_steps: step shape does not match row selection");
  const std::size_t h = shape[1];
  Tensor<T> out(shape);
  for (std::size_t b = 0; b < step_of_row.size(); ++b) {
    const Tensor<T>& src = tape.value(steps.at(step_of_row[b]));
    std::copy(src.ptr() + b * h, src.ptr() + (b + 1) * h, out.ptr() + b * h);
  }
  Var r = tape.result(std::move(out), steps);
  if (tape.requires_grad(r)) {
    tape.record([steps, step_of_row, r, h](Tape<T>& t) {
      const Tensor<T>& g = t.grad(r);
      for (std::size_t b = 0; b < step_of_row.size(); ++b) {
        const Var s = steps[step_of_row[b]];
        if (!t.requires_grad(s)) continue;
        Tensor<T>& gs = t.grad(s);
        for (std::size_t j = 0; j < h; ++j) gs[b * h + j] += g[b * h + j];
      }
    });
  }
  return r;
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Softmax and cross-entropy

/// Softmax of logits / temperature over the last axis, with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits, T temperature = T(1)) {
  if (!(temperature > T{0})) throw std::invalid_argument("softmax: temperature must be > 0");
  const std::size_t c = logits.shape().back();
  const std::size_t rows = logits.size() / c;
  Tensor<T> out(logits.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* z = logits.ptr() + r * c;
    T* p = out.ptr() + r * c;
    T top = z[0];
    for (std::size_t i = 1; i < c; ++i) top = std::max(top, z[i]);
    T total{0};
    for (std::size_t i = 0; i < c; ++i) {
      p[i] = std::exp((z[i] - top) / temperature);
      total += p[i];
    }
    for (std::size_t i = 0; i < c; ++i) p[i] /= total;
  }
  return out;
}

namespace ce_detail {

// log softmax(z / temperature) for one row. `raw` is exact; `floored` is
// clamped at log(kLogFloor) and `clamped` marks where the floor is active.
template <typename T>
void log_softmax_row(const T* z, std::size_t c, T temperature, std::vector<T>& raw,
                     std::vector<T>& floored, std::vector<bool>& clamped) {
  raw.resize(c);
  floored.resize(c);
  clamped.assign(c, false);
  T top = z[0];
  for (std::size_t i = 1; i < c; ++i) top = std::max(top, z[i]);
  T total{0};
  for (std::size_t i = 0; i < c; ++i) total += std::exp((z[i] - top) / temperature);
  const T log_total = std::log(total);
  const T floor = static_cast<T>(std::log(kLogFloor));
  for (std::size_t i = 0; i < c; ++i) {
    raw[i] = (z[i] - top) / temperature - log_total;
    clamped[i] = raw[i] < floor;
    floored[i] = clamped[i] ? floor : raw[i];
  }
}

template <typename T>
void check_distribution(const T* p, std::size_t c) {
  double total = 0;
  for (std::size_t i = 0; i < c; ++i) {
    if (p[i] < T{0}) throw std::invalid_argument("cross_entropy: negative target probability");
    total += p[i];
  }
  if (std::abs(total - 1.0) > 1e-6) {
    throw std::invalid_argument("cross_entropy: target distribution sums to " +
                                std::to_string(total) + ", not 1");
  }
}

}  // namespace ce_detail

/// -log softmax(logits)[target], log floored at 1e-12.
template <typename T>
T cross_entropy(const Tensor<T>& logits, std::size_t target) {
  const std::size_t c = logits.shape().back();
  require_shape(logits.size() == c, "cross_entropy: expected a single logit vector");
  if (target >= c) {
    throw std::out_of_range("cross_entropy: class index " + std::to_string(target) +
                            " out of range for " + std::to_string(c) + " classes");
  }
  std::vector<T> raw, logp;
  std::vector<bool> clamped;
  ce_detail::log_softmax_row(logits.ptr(), c, T(1), raw, logp, clamped);
  return -logp[target];
}

/// -sum_i target_i log softmax(logits / temperature)_i, log floored at 1e-12.
template <typename T>
T cross_entropy(const Tensor<T>& logits, const Tensor<T>& target, T temperature = T(1)) {
  if (!(temperature > T{0})) throw std::invalid_argument("cross_entropy: temperature must be > 0");
  const std::size_t c = logits.shape().back();
  require_shape(logits.size() == c && target.size() == c,
                "cross_entropy: logits and target must be vectors of equal length");
  ce_detail::check_distribution(target.ptr(), c);
  std::vector<T> raw, logp;
  std::vector<bool> clamped;
  ce_detail::log_softmax_row(logits.ptr(), c, temperature, raw, logp, clamped);
  T loss{0};
  for (std::size_t i = 0; i < c; ++i) loss -= target[i] * logp[i];
  return loss;
}

namespace ops {

/// Batch-mean cross-entropy of softmax(logits / temperature) against rows of
/// `targets` ([B x c] distributions).
template <typename T>
Var soft_cross_entropy(Tape<T>& tape, Var logits, Tensor<T> targets, T temperature = T(1)) {
  if (!(temperature > T{0})) {
    throw std::invalid_argument("soft_cross_entropy: temperature must be > 0");
  }
  const Tensor<T>& z = tape.value(logits);
  require_shape(z.rank() == 2 && targets.shape() == z.shape(),
                "soft_cross_entropy: logits " + shape_string(z.shape()) + " vs targets " +
                    shape_string(targets.shape()));
  const std::size_t b = z.dim(0);
  const std::size_t c = z.dim(1);
  std::vector<T> raw, logp;
  std::vector<bool> clamped;
  T total{0};
  for (std::size_t r = 0; r < b; ++r) {
    ce_detail::check_distribution(targets.ptr() + r * c, c);
    ce_detail::log_softmax_row(z.ptr() + r * c, c, temperature, raw, logp, clamped);
    T row{0};
    for (std::size_t i = 0; i < c; ++i) row -= targets[r * c + i] * logp[i];
    total += row;
  }
  Var out = tape.result(Tensor<T>::scalar(total / static_cast<T>(b)), {logits});
  if (tape.requires_grad(out)) {
    tape.record([logits, out, targets = std::move(targets), temperature, b, c](Tape<T>& t) {
      const Tensor<T>& zv = t.value(logits);
      const T scale = t.grad(out)[0] / (static_cast<T>(b) * temperature);
      Tensor<T>& gz = t.grad(logits);
      std::vector<T> raw, logp;
      std::vector<bool> clamped;
      for (std::size_t r = 0; r < b; ++r) {
        ce_detail::log_softmax_row(zv.ptr() + r * c, c, temperature, raw, logp, clamped);
        const T* p = targets.ptr() + r * c;
        T live_mass{0};
        for (std::size_t i = 0; i < c; ++i)
          if (!clamped[i]) live_mass += p[i];
        for (std::size_t j = 0; j < c; ++j) {
          T d = std::exp(raw[j]) * live_mass;
          if (!clamped[j]) d -= p[j];
          gz[r * c + j] += scale * d;
        }
      }
    });
  }
  return out;
}

/// Batch-mean cross-entropy against hard class labels.
template <typename T>
Var cross_entropy(Tape<T>& tape, Var logits, const std::vector<std::size_t>& labels) {
  const Tensor<T>& z = tape.value(logits);
  require_shape(z.rank() == 2 && z.dim(0) == labels.size(),
                "cross_entropy: logits " + shape_string(z.shape()) + " vs " +
                    std::to_string(labels.size()) + " labels");
  const std::size_t c = z.dim(1);
  Tensor<T> onehot(z.shape(), T{0});
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] >= c) {
      throw std::out_of_range("cross_entropy: class index " + std::to_string(labels[r]) +
                              " out of range for " + std::to_string(c) + " classes");
    }
    onehot[r * c + labels[r]] = T{1};
  }
  return soft_cross_entropy(tape, logits, std::move(onehot), T(1));
}

}  // namespace ops
}  // namespace gkd
