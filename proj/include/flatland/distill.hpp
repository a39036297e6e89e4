#pragma once

#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "flatland/model.hpp"
#include "flatland/ops.hpp"
#include "flatland/tape.hpp"

namespace flatland {

/// Settings for the self-distillation loss: a frozen exponential moving
/// average of the student provides soft targets, and the training loss is
/// cross-entropy on the labels plus kd_weight times the KL term between
/// the temperature-softened teacher and student predictions.
struct DistillConfig {
  double temperature = 5.0;
  double kd_weight = 1.0;
  double ema_decay = 0.999;
  bool kl_literal_order = false;
  bool tau_squared_scale = false;

  void validate() const {
    if (!(temperature > 0.0)) {
      throw std::invalid_argument("distill: temperature must be positive, got " +
                                  std::to_string(temperature));
    }
    if (kd_weight < 0.0) throw std::invalid_argument("distill: kd_weight must be >= 0");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) {
      throw std::invalid_argument("distill: ema_decay must be in [0, 1)");
    }
  }
};

/// The exponential-moving-average teacher. Holds a full model copy whose
/// parameters and running buffers trail the student's; the teacher only
/// ever runs deterministic inference.
template <typename T>
class TeacherStateT {
 public:
  /// Start the teacher as an exact copy of the student.
  TeacherStateT(WidePyramidNetT<T>& student, double ema_decay)
      : model_(student), ema_decay_(ema_decay) {
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) {
      throw std::invalid_argument("teacher: ema_decay must be in [0, 1)");
    }
    model_.set_train(false);
  }

  /// Blend the student into the shadow copy:
  /// teacher <- decay * teacher + (1 - decay) * student.
  /// The two models must expose identical tensor sets.
  void ema_update(WidePyramidNetT<T>& student) {
    auto tp = model_.parameters();
    auto sp = student.parameters();
    if (tp.size() != sp.size()) {
      throw std::invalid_argument("teacher: student parameter set changed size");
    }
    for (std::size_t i = 0; i < tp.size(); ++i) {
      if (tp[i]->id != sp[i]->id) {
        throw std::invalid_argument("teacher: parameter mismatch at '" + sp[i]->id + "'");
      }
      if (tp[i]->value.shape != sp[i]->value.shape) {
        throw std::invalid_argument("teacher: parameter '" + sp[i]->id + "' changed shape");
      }
      blend(tp[i]->value, sp[i]->value);
    }
    auto tb = model_.buffers();
    auto sb = student.buffers();
    if (tb.size() != sb.size()) {
      throw std::invalid_argument("teacher: student buffer set changed size");
    }
    for (std::size_t i = 0; i < tb.size(); ++i) {
      if (tb[i].first != sb[i].first) {
        throw std::invalid_argument("teacher: buffer mismatch at '" + sb[i].first + "'");
      }
      if (tb[i].second->shape != sb[i].second->shape) {
        throw std::invalid_argument("teacher: buffer '" + sb[i].first + "' changed shape");
      }
      blend(*tb[i].second, *sb[i].second);
    }
  }

  /// Deterministic teacher predictions for a batch.
  TensorT<T> predict_logits(const TensorT<T>& images) { return model_.predict_logits(images); }

  WidePyramidNetT<T>& model() { return model_; }
  double ema_decay() const { return ema_decay_; }

 private:
  void blend(TensorT<T>& teacher, const TensorT<T>& student) {
    for (std::size_t i = 0; i < teacher.data.size(); ++i) {
      teacher.data[i] = static_cast<T>(ema_decay_ * static_cast<double>(teacher.data[i]) +
                                       (1.0 - ema_decay_) * static_cast<double>(student.data[i]));
    }
  }

  WidePyramidNetT<T> model_;
  double ema_decay_;
};

using TeacherState = TeacherStateT<float>;

/// Combined distillation loss on the tape:
/// CE(student logits, targets) + kd_weight * KL(teacher || student).
/// With kd_weight zero no KL node is recorded at all, so the loss and its
/// gradients match plain cross-entropy exactly.
template <typename T>
int mesa_loss(TapeT<T>& t, int student_logits, const TensorT<T>& teacher_logits,
              const TensorT<T>& targets, const DistillConfig& cfg) {
  cfg.validate();
  const int ce = soft_cross_entropy(t, student_logits, targets);
  if (cfg.kd_weight == 0.0) return ce;
  const int kl = kl_divergence(t, student_logits, teacher_logits, cfg.temperature,
                               cfg.kl_literal_order, cfg.tau_squared_scale);
  return add(t, ce, scalar_mul(t, kl, cfg.kd_weight));
}

}  // namespace flatland
