#pragma once

// Temperature-softened targets and the weighted soft/hard distillation loss.

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "gkd/autodiff.hpp"
#include "gkd/layers.hpp"
#include "gkd/tensor.hpp"

namespace gkd {

struct DistillLossConfig {
  double temperature = 2.0;
  double alpha = 0.5;  // weight of the soft term
  // Multiplies the soft term by T^2 (keeps its gradient scale independent of T).
  bool scale_soft_by_t2 = false;

  void validate() const {
    if (!(temperature > 0)) {
      throw std::invalid_argument("temperature must be > 0, got " + std::to_string(temperature));
    }
    if (!(alpha >= 0 && alpha <= 1)) {
      throw std::invalid_argument("alpha must be in [0, 1], got " + std::to_string(alpha));
    }
  }
  double soft_weight() const {
    return scale_soft_by_t2 ? alpha * temperature * temperature : alpha;
  }
};

/// exp(z_i / T) / sum_j exp(z_j / T) per row.
template <typename T>
Tensor<T> soften(const Tensor<T>& logits, T temperature) {
  if (!(temperature > T{0})) throw std::invalid_argument("soften: temperature must be > 0");
  return softmax(logits, temperature);
}

/// Single-sample loss: alpha * CE(soften(student), soften(teacher)) +
/// (1 - alpha) * CE(student, label).
template <typename T>
T distill_loss(const Tensor<T>& student, const Tensor<T>& teacher, std::size_t label,
               const DistillLossConfig& cfg) {
  cfg.validate();
  require_shape(student.shape() == teacher.shape() && student.rank() == 1,
                "distill_loss: student and teacher logits must be equal-length vectors");
  const T temperature = static_cast<T>(cfg.temperature);
  const T hard = cross_entropy(student, label);
  if (cfg.alpha == 0) return hard;
  const T soft = cross_entropy(student, soften(teacher, temperature), temperature);
  if (cfg.alpha == 1) return static_cast<T>(cfg.soft_weight()) * soft;
  return static_cast<T>(cfg.soft_weight()) * soft + static_cast<T>(1 - cfg.alpha) * hard;
}

namespace ops {

/// Batch-mean distillation loss for student logits [B x c] against fixed
/// teacher logits [B x c]. alpha = 0 records exactly the hard cross-entropy
/// and alpha = 1 only the soft term.
template <typename T>
Var distill_loss(Tape<T>& tape, Var student, const Tensor<T>& teacher,
                 const std::vector<std::size_t>& labels, const DistillLossConfig& cfg) {
  cfg.validate();
  require_shape(tape.value(student).shape() == teacher.shape(),
                "distill_loss: student logits " + shape_string(tape.value(student).shape()) +
                    " vs teacher " + shape_string(teacher.shape()));
  if (cfg.alpha == 0) return cross_entropy(tape, student, labels);
  const T temperature = static_cast<T>(cfg.temperature);
  Var soft = soft_cross_entropy(tape, student, soften(teacher, temperature), temperature);
  if (cfg.alpha == 1 && !cfg.scale_soft_by_t2) return soft;
  Var hard = cfg.alpha == 1 ? soft : cross_entropy(tape, student, labels);
  return weighted_sum(tape, soft, static_cast<T>(cfg.soft_weight()), hard,
                      static_cast<T>(1 - cfg.alpha));
}

}  // namespace ops
}  // namespace gkd
