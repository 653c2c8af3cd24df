#pragma once

// Adam, the supervised / distillation training loop and accuracy metrics.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "gkd/autodiff.hpp"
#include "gkd/data.hpp"
#include "gkd/distill_loss.hpp"
#include "gkd/layers.hpp"
#include "gkd/models.hpp"
#include "gkd/tensor.hpp"

namespace gkd {

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::uint64_t t = 0;
  std::map<std::string, Tensor<float>> m;
  std::map<std::string, Tensor<float>> v;
};

/// One bias-corrected Adam update of every tensor in `grads`. All gradients
/// are checked before any weight moves; a NaN/Inf aborts the whole step.
inline void adam_step(std::map<std::string, Tensor<float>>& params,
                      const std::map<std::string, Tensor<float>>& grads, AdamState& state) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("adam_step: gradient for unknown tensor '" + name + "'");
    require_shape(it->second.shape() == g.shape(),
                  "adam_step: gradient shape " + shape_string(g.shape()) + " for '" + name +
                      "' " + shape_string(it->second.shape()));
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) {
        throw std::domain_error("adam_step: non-finite gradient in '" + name + "' at element " +
                                std::to_string(i) + " (step " + std::to_string(state.t + 1) + ")");
      }
    }
  }
  const AdamConfig& c = state.config;
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double correct1 = 1.0 - std::pow(c.beta1, t);
  const double correct2 = 1.0 - std::pow(c.beta2, t);
  for (const auto& [name, g] : grads) {
    Tensor<float>& w = params.at(name);
    auto m_it = state.m.try_emplace(name, g.shape()).first;
    auto v_it = state.v.try_emplace(name, g.shape()).first;
    Tensor<float>& m = m_it->second;
    Tensor<float>& v = v_it->second;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double gi = g[i];
      const double mi = c.beta1 * m[i] + (1 - c.beta1) * gi;
      const double vi = c.beta2 * v[i] + (1 - c.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double m_hat = mi / correct1;
      const double v_hat = vi / correct2;
      w[i] = static_cast<float>(w[i] - c.lr * m_hat / (std::sqrt(v_hat) + c.epsilon));
    }
  }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
inline double clip_grad_norm(std::map<std::string, Tensor<float>>& grads, double max_norm) {
  double sq = 0;
  for (const auto& [name, g] : grads)
    for (std::size_t i = 0; i < g.size(); ++i) sq += static_cast<double>(g[i]) * g[i];
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const float scale = static_cast<float>(max_norm / norm);
    for (auto& [name, g] : grads)
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= scale;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]

  double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / total; }
};

/// Lowest index among the maxima of each row of [B x c].
inline std::vector<std::size_t> argmax_rows(const Tensor<float>& logits) {
  require_shape(logits.rank() == 2, "argmax_rows: expected B x c");
  std::vector<std::size_t> out(logits.dim(0));
  const std::size_t c = logits.dim(1);
  for (std::size_t b = 0; b < out.size(); ++b) {
    const float* row = logits.ptr() + b * c;
    out[b] = static_cast<std::size_t>(std::max_element(row, row + c) - row);
  }
  return out;
}

using Predictor = std::function<std::vector<std::size_t>(const std::vector<const GestureSample*>&)>;

inline EvalResult evaluate(const Predictor& predict, const std::vector<GestureSample>& samples,
                           std::size_t class_count, std::size_t batch_size = 16) {
  if (samples.empty()) throw std::invalid_argument("evaluate: empty dataset");
  if (batch_size == 0) throw std::invalid_argument("evaluate: batch size must be >= 1");
  EvalResult r;
  r.confusion.assign(class_count, std::vector<std::size_t>(class_count, 0));
  for (std::size_t begin = 0; begin < samples.size(); begin += batch_size) {
    std::vector<const GestureSample*> batch;
    for (std::size_t i = begin; i < std::min(samples.size(), begin + batch_size); ++i)
      batch.push_back(&samples[i]);
    const auto predicted = predict(batch);
    if (predicted.size() != batch.size()) throw std::logic_error("evaluate: predictor returned wrong count");
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const std::size_t truth = batch[i]->label;
      if (truth >= class_count || predicted[i] >= class_count) {
        throw std::out_of_range("evaluate: class index outside [0, " + std::to_string(class_count) + ")");
      }
      ++r.confusion[truth][predicted[i]];
      if (truth == predicted[i]) ++r.correct;
      ++r.total;
    }
  }
  return r;
}

/// Model inputs for a batch, shaped for the model's input mode.
inline std::vector<Tensor<float>> make_inputs(const std::vector<const GestureSample*>& batch,
                                              InputMode mode) {
  std::vector<Tensor<float>> out;
  out.reserve(batch.size());
  for (const GestureSample* s : batch) out.push_back(make_input(*s, mode));
  return out;
}

inline Tensor<float> batch_logits(const ModelParams<float>& model,
                                  const std::vector<const GestureSample*>& batch) {
  return infer_logits(model, make_inputs(batch, model.spec.input_mode));
}

/// Eval-mode accuracy and confusion; never touches the model.
inline EvalResult evaluate(const ModelParams<float>& model, const std::vector<GestureSample>& samples,
                           std::size_t batch_size = 16) {
  return evaluate(
      [&model](const std::vector<const GestureSample*>& batch) {
        return argmax_rows(batch_logits(model, batch));
      },
      samples, model.spec.class_count, batch_size);
}

// ---------------------------------------------------------------------------
// Training loop

enum class LossMode { hard, distill };

/// Teacher logits [B x c] for a batch of (possibly augmented) samples.
using TeacherFn = std::function<Tensor<float>(const std::vector<const GestureSample*>&)>;

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  AdamConfig adam;
  std::uint64_t seed = 0;
  bool shuffle = true;
  LossMode loss = LossMode::hard;
  DistillLossConfig distill;
  double clip_norm = 0;  // 0 disables clipping
  AugmentConfig augment;
  std::string history_csv;     // empty: no file
  std::ostream* log = nullptr;  // one line per epoch

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
    if (!(adam.lr > 0)) throw std::invalid_argument("learning rate must be > 0");
    if (clip_norm < 0) throw std::invalid_argument("clip norm must be >= 0");
    if (loss == LossMode::distill) distill.validate();
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double train_accuracy = 0;
  std::optional<double> val_accuracy;
};

struct TrainResult {
  ModelParams<float> model;  // best-validation snapshot
  ModelParams<float> final_model;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  std::uint64_t steps = 0;
  AdamState adam;
};

namespace train_detail {

// Batch boundaries over n items; a trailing batch of one joins the previous
// batch so batch-norm never sees a single sample.
inline std::vector<std::pair<std::size_t, std::size_t>> batches(std::size_t n, std::size_t size) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t begin = 0; begin < n; begin += size) out.emplace_back(begin, std::min(n, begin + size));
  if (out.size() > 1 && out.back().second - out.back().first == 1) {
    out.pop_back();
    out.back().second = n;
  }
  return out;
}

inline bool has_batch_norm(const ArchSpec& spec) { return spec.family != Family::baseline_lstm; }

}  // namespace train_detail

/// Mini-batch Adam training. Returns the snapshot with the best validation
/// accuracy (later epochs win ties); without a validation split, the last.
inline TrainResult train(ModelParams<float> model, const std::vector<GestureSample>& train_set,
                         const std::vector<GestureSample>& val_set, const TrainConfig& cfg,
                         const TeacherFn& teacher = {}) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training split");
  if (cfg.loss == LossMode::distill && cfg.distill.alpha > 0 && !teacher) {
    throw std::invalid_argument("train: distillation needs teacher logits");
  }
  if (train_set.size() == 1 && train_detail::has_batch_norm(model.spec)) {
    throw std::invalid_argument("train: batch normalization needs at least 2 training samples");
  }
  for (const auto& s : train_set) {
    if (s.label >= model.spec.class_count) {
      throw std::invalid_argument("train: label " + std::to_string(s.label) + " of sample " +
                                  std::to_string(s.id) + " exceeds the model's " +
                                  std::to_string(model.spec.class_count) + " classes");
    }
  }

  std::ofstream csv;
  if (!cfg.history_csv.empty()) {
    csv.open(cfg.history_csv);
    if (!csv) throw std::runtime_error("cannot write history file " + cfg.history_csv);
    csv << "epoch,train_loss,train_accuracy,val_accuracy\n";
  }

  TrainResult result{model, model, {}, 0, 0, {}};
  result.adam.config = cfg.adam;
  double best_val = -1;
  std::vector<std::size_t> order(train_set.size());

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (cfg.shuffle) {
      auto rng = keyed_rng(cfg.seed, 0x5348554646ULL, epoch);
      std::shuffle(order.begin(), order.end(), rng);
    }
    double loss_sum = 0;
    std::size_t correct = 0;
    for (const auto& [begin, end] : train_detail::batches(order.size(), cfg.batch_size)) {
      std::vector<GestureSample> augmented;
      std::vector<const GestureSample*> batch;
      std::vector<std::size_t> labels;
      if (cfg.augment.enabled) augmented.reserve(end - begin);
      for (std::size_t k = begin; k < end; ++k) {
        const GestureSample& s = train_set[order[k]];
        if (cfg.augment.enabled) {
          auto rng = keyed_rng(cfg.seed, epoch, 0x41554700000000ULL + s.id);
          augmented.push_back(augment(s, rng, cfg.augment));
          batch.push_back(&augmented.back());
        } else {
          batch.push_back(&s);
        }
        labels.push_back(s.label);
      }

      Tape<float> tape;
      StatUpdates<float> updates;
      Var logits = forward(tape, model, make_inputs(batch, model.spec.input_mode), Mode::train, &updates);
      Var loss;
      if (cfg.loss == LossMode::hard) {
        loss = ops::cross_entropy(tape, logits, labels);
      } else {
        Tensor<float> targets = cfg.distill.alpha > 0 ? teacher(batch)
                                                      : Tensor<float>(tape.value(logits).shape());
        loss = ops::distill_loss(tape, logits, targets, labels, cfg.distill);
      }
      const double batch_loss = tape.value(loss)[0];
      const auto predicted = argmax_rows(tape.value(logits));
      for (std::size_t i = 0; i < labels.size(); ++i) correct += predicted[i] == labels[i];
      tape.backward(loss);
      auto grads = tape.gradients();
      for (auto it = grads.begin(); it != grads.end();)
        it = is_buffer_name(it->first) ? grads.erase(it) : std::next(it);
      if (cfg.clip_norm > 0) clip_grad_norm(grads, cfg.clip_norm);
      adam_step(model.tensors, grads, result.adam);
      apply_stat_updates(model, std::move(updates));
      ++result.steps;
      loss_sum += batch_loss * static_cast<double>(labels.size());
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train_set.size());
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(train_set.size());
    if (!val_set.empty()) rec.val_accuracy = evaluate(model, val_set).accuracy();
    result.history.push_back(rec);

    const double score = rec.val_accuracy.value_or(0.0);
    if (score >= best_val) {
      best_val = score;
      result.best_epoch = epoch;
      result.model = model;
    }
    if (cfg.log) {
      *cfg.log << "epoch " << epoch << " train_loss " << std::setprecision(6) << rec.train_loss
               << " train_acc " << std::setprecision(4) << 100 * rec.train_accuracy << " val_acc ";
      if (rec.val_accuracy) *cfg.log << 100 * *rec.val_accuracy; else *cfg.log << "-";
      *cfg.log << '\n' << std::flush;
    }
    if (csv) {
      csv << epoch << ',' << std::setprecision(9) << rec.train_loss << ',' << rec.train_accuracy << ',';
      if (rec.val_accuracy) csv << *rec.val_accuracy;
      csv << '\n';
    }
  }
  result.final_model = std::move(model);
  return result;
}

}  // namespace gkd
