#pragma once

// Training a student against a frozen teacher's softened outputs.

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "gkd/data.hpp"
#include "gkd/distill_loss.hpp"
#include "gkd/models.hpp"
#include "gkd/trainer.hpp"

namespace gkd {

struct DistillConfig {
  double temperature = 2.0;
  double alpha = 0.5;
  bool scale_soft_by_t2 = false;
  // Precompute teacher logits once per sample id (ignored under augmentation,
  // where every epoch shows the teacher a different view).
  bool cache_teacher = true;

  DistillLossConfig loss() const { return {temperature, alpha, scale_soft_by_t2}; }
};

/// Eval-mode teacher logits. The clip CNN windows each video itself, so both
/// teacher and student are fed whole videos built for their own input mode.
class TeacherLogits {
 public:
  TeacherLogits(const ModelParams<float>& teacher, bool cache)
      : teacher_(teacher), cache_(cache) {}

  Tensor<float> operator()(const std::vector<const GestureSample*>& batch) {
    const std::size_t c = teacher_.spec.class_count;
    Tensor<float> out(Shape{batch.size(), c});
    std::vector<const GestureSample*> missing;
    if (cache_) {
      for (const GestureSample* s : batch)
        if (!cached_.count(s->id)) missing.push_back(s);
    } else {
      missing = batch;
    }
    std::map<std::uint32_t, Tensor<float>> fresh;
    if (!missing.empty()) {
      const Tensor<float> logits = batch_logits(teacher_, missing);
      for (std::size_t i = 0; i < missing.size(); ++i) {
        Tensor<float> row(Shape{c});
        std::copy(logits.ptr() + i * c, logits.ptr() + (i + 1) * c, row.ptr());
        (cache_ ? cached_ : fresh)[missing[i]->id] = std::move(row);
      }
    }
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto& source = cache_ ? cached_ : fresh;
      const Tensor<float>& row = source.at(batch[b]->id);
      std::copy(row.ptr(), row.ptr() + c, out.ptr() + b * c);
    }
    return out;
  }

  std::size_t cached() const { return cached_.size(); }
  bool caching() const { return cache_; }
  const ModelParams<float>& teacher() const { return teacher_; }

 private:
  const ModelParams<float>& teacher_;
  bool cache_;
  std::map<std::uint32_t, Tensor<float>> cached_;
};

/// Trains `student` against logits from `provider`, which may be shared
/// between runs on the same split so a caching teacher runs once per sample.
/// `train_cfg.loss` and `.distill` are overridden from `cfg`.
inline TrainResult distill_train(TeacherLogits& provider, ModelParams<float> student,
                                 const std::vector<GestureSample>& train_set,
                                 const std::vector<GestureSample>& val_set, const DistillConfig& cfg,
                                 TrainConfig train_cfg) {
  const ArchSpec& teacher = provider.teacher().spec;
  if (teacher.class_count != student.spec.class_count) {
    throw std::invalid_argument("distill: teacher has " + std::to_string(teacher.class_count) +
                                " classes, student " + std::to_string(student.spec.class_count));
  }
  if (provider.caching() && train_cfg.augment.enabled) {
    throw std::invalid_argument("distill: a caching teacher cannot follow augmented samples");
  }
  train_cfg.loss = LossMode::distill;
  train_cfg.distill = cfg.loss();
  train_cfg.distill.validate();
  return train(std::move(student), train_set, val_set, train_cfg,
               [&provider](const std::vector<const GestureSample*>& batch) { return provider(batch); });
}

/// Trains `student` with alpha * soft + (1 - alpha) * hard against the frozen
/// `teacher`. `train_cfg.loss` and `.distill` are overridden from `cfg`.
inline TrainResult distill_train(const ModelParams<float>& teacher, ModelParams<float> student,
                                 const std::vector<GestureSample>& train_set,
                                 const std::vector<GestureSample>& val_set, const DistillConfig& cfg,
                                 TrainConfig train_cfg) {
  // Teacher ids are only unique within one split, which is all train() sees.
  TeacherLogits provider(teacher, cfg.cache_teacher && !train_cfg.augment.enabled);
  return distill_train(provider, std::move(student), train_set, val_set, cfg, std::move(train_cfg));
}

}  // namespace gkd
