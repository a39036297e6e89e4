#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "flatland/augment.hpp"
#include "flatland/data.hpp"
#include "flatland/distill.hpp"
#include "flatland/model.hpp"
#include "flatland/optim.hpp"
#include "flatland/rng.hpp"
#include "flatland/sched.hpp"
#include "flatland/tape.hpp"

namespace flatland {

enum class LossMode { kCrossEntropy, kDistill };

inline LossMode loss_mode_from_string(const std::string& s) {
  if (s == "ce") return LossMode::kCrossEntropy;
  if (s == "mesa") return LossMode::kDistill;
  throw std::invalid_argument("unknown loss mode '" + s + "' (ce, mesa)");
}

inline std::string loss_mode_to_string(LossMode m) {
  return m == LossMode::kCrossEntropy ? "ce" : "mesa";
}

/// The adaptive schedule is the default; the cosine baseline anneals
/// target_lr down to min_lr over exactly max_epochs and never terminates
/// early, which makes equal-budget comparisons straightforward.
enum class SchedKind { kAlrs, kCosine };

inline SchedKind sched_kind_from_string(const std::string& s) {
  if (s == "alrs") return SchedKind::kAlrs;
  if (s == "cosine") return SchedKind::kCosine;
  throw std::invalid_argument("unknown scheduler '" + s + "' (alrs, cosine)");
}

/// One stage of the progressive schedule: a resolution, a loss mode, an
/// optimizer, and a fresh adaptive learning-rate schedule.
struct StagePlan {
  int stage_index = 1;  // 1-based
  int resolution = 16;
  LossMode loss_mode = LossMode::kCrossEntropy;
  SchedKind scheduler = SchedKind::kAlrs;
  OptimConfig optimizer;
  AlrsConfig alrs;
  int batch_size = 48;
  int max_epochs = 500;
  std::vector<AugKind> augment;
  double cutmix_prob = 0.5;
  double cutmix_beta = 1.0;
  int crop_pad = 2;

  void validate() const {
    if (stage_index < 1) throw std::invalid_argument("stage: stage_index must be >= 1");
    if (resolution < 8) throw std::invalid_argument("stage: resolution must be >= 8");
    if (batch_size < 1) throw std::invalid_argument("stage: batch_size must be >= 1");
    if (max_epochs < 1) throw std::invalid_argument("stage: max_epochs must be >= 1");
    if (!(cutmix_prob >= 0.0 && cutmix_prob <= 1.0)) {
      throw std::invalid_argument("stage: cutmix_prob must be in [0, 1]");
    }
    if (!(cutmix_beta > 0.0)) throw std::invalid_argument("stage: cutmix_beta must be positive");
    if (crop_pad < 0) throw std::invalid_argument("stage: crop_pad must be >= 0");
    optimizer.validate();
    alrs.validate();
  }
};

/// The full four-stage progression: plain loss then distillation at the
/// low resolution, the same pair again at double resolution. Each stage
/// starts its schedule from scratch.
inline void validate_stage_plans(const std::vector<StagePlan>& plans) {
  if (plans.size() != 4) {
    throw std::invalid_argument("pipeline: expected 4 stages, got " + std::to_string(plans.size()));
  }
  static const LossMode kModes[4] = {LossMode::kCrossEntropy, LossMode::kDistill,
                                     LossMode::kCrossEntropy, LossMode::kDistill};
  for (int i = 0; i < 4; ++i) {
    plans[static_cast<std::size_t>(i)].validate();
    if (plans[static_cast<std::size_t>(i)].stage_index != i + 1) {
      throw std::invalid_argument("pipeline: stage " + std::to_string(i) + " has stage_index " +
                                  std::to_string(plans[static_cast<std::size_t>(i)].stage_index));
    }
    if (plans[static_cast<std::size_t>(i)].loss_mode != kModes[i]) {
      throw std::invalid_argument("pipeline: stage " + std::to_string(i + 1) + " must use " +
                                  loss_mode_to_string(kModes[i]) + " loss");
    }
  }
  if (plans[1].resolution != plans[0].resolution) {
    throw std::invalid_argument("pipeline: stages 1 and 2 must share a resolution");
  }
  if (plans[3].resolution != plans[2].resolution) {
    throw std::invalid_argument("pipeline: stages 3 and 4 must share a resolution");
  }
  if (plans[2].resolution != 2 * plans[0].resolution) {
    throw std::invalid_argument("pipeline: stages 3 and 4 must run at double the stage 1 resolution");
  }
}

struct EpochRow {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;
};

struct StageMetrics {
  int stage_index = 0;
  int epochs_run = 0;
  double final_train_loss = 0.0;
  double val_accuracy = 0.0;
  std::vector<EpochRow> rows;
  std::vector<SchedTraceRow> sched_rows;
};

/// Shared state for a training run.
struct TrainContext {
  const SyntheticDomainDataset* data = nullptr;
  std::vector<int> train_indices;
  std::vector<int> val_indices;
  DistillConfig distill;
  std::uint64_t seed = 0;
  std::int64_t global_step = 0;

  void validate() const {
    if (data == nullptr) throw std::invalid_argument("train: dataset is required");
    if (train_indices.empty()) throw std::invalid_argument("train: empty training split");
  }
};

namespace detail {

inline constexpr std::uint64_t kShuffleKey = 0x7101;
inline constexpr std::uint64_t kAugKey = 0x7102;
inline constexpr std::uint64_t kCutmixKey = 0x7103;
inline constexpr std::uint64_t kTtaKey = 0x7104;

}  // namespace detail

/// Top-1 accuracy of deterministic single-pass predictions.
inline double evaluate_accuracy(WidePyramidNet& model, const SyntheticDomainDataset& data,
                                const std::vector<int>& indices, int resolution,
                                int eval_batch = 64) {
  if (indices.empty()) throw std::invalid_argument("evaluate_accuracy: empty index list");
  int correct = 0;
  for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(eval_batch)) {
    const std::size_t end = std::min(indices.size(), start + static_cast<std::size_t>(eval_batch));
    const std::vector<int> chunk(indices.begin() + static_cast<std::ptrdiff_t>(start),
                                 indices.begin() + static_cast<std::ptrdiff_t>(end));
    const Tensor batch = render_batch(data, chunk, resolution);
    const Tensor logits = model.predict_logits(batch);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      int best = 0;
      for (int k = 1; k < logits.dim(1); ++k) {
        if (logits.at2(static_cast<int>(i), k) > logits.at2(static_cast<int>(i), best)) best = k;
      }
      if (best == data.item(chunk[i]).class_id) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

/// Mean softmax over randomly augmented renderings of one item. The
/// augmentation list is applied per pass with its own keyed stream, so the
/// prediction is reproducible for a given seed.
inline std::vector<double> tta_predict(WidePyramidNet& model, const SyntheticDomainDataset& data,
                                       int index, int resolution, int tta_epochs,
                                       const std::vector<AugKind>& kinds, std::uint64_t seed,
                                       int crop_pad = 2) {
  if (tta_epochs < 1) throw std::invalid_argument("tta_predict: tta_epochs must be >= 1");
  const Tensor base = data.render(index, resolution);
  Tensor batch({tta_epochs, 3, resolution, resolution});
  const std::int64_t per = 3LL * resolution * resolution;
  for (int e = 0; e < tta_epochs; ++e) {
    RngStream rng(seed, detail::kTtaKey, static_cast<std::uint64_t>(index),
                  static_cast<std::uint64_t>(e));
    const Tensor aug = augment_image(base, kinds, rng, crop_pad);
    std::copy(aug.data.begin(), aug.data.end(), batch.data.begin() + e * per);
  }
  const Tensor logits = model.predict_logits(batch);
  const int K = logits.dim(1);
  std::vector<double> probs(static_cast<std::size_t>(K), 0.0);
  for (int e = 0; e < tta_epochs; ++e) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(logits.at2(e, k)));
    double z = 0.0;
    for (int k = 0; k < K; ++k) z += std::exp(static_cast<double>(logits.at2(e, k)) - mx);
    for (int k = 0; k < K; ++k) {
      probs[static_cast<std::size_t>(k)] +=
          std::exp(static_cast<double>(logits.at2(e, k)) - mx) / z;
    }
  }
  for (auto& p : probs) p /= static_cast<double>(tta_epochs);
  return probs;
}

inline double evaluate_tta_accuracy(WidePyramidNet& model, const SyntheticDomainDataset& data,
                                    const std::vector<int>& indices, int resolution,
                                    int tta_epochs, const std::vector<AugKind>& kinds,
                                    std::uint64_t seed, int crop_pad = 2) {
  if (indices.empty()) throw std::invalid_argument("evaluate_tta_accuracy: empty index list");
  int correct = 0;
  for (int idx : indices) {
    const auto probs = tta_predict(model, data, idx, resolution, tta_epochs, kinds, seed, crop_pad);
    int best = 0;
    for (std::size_t k = 1; k < probs.size(); ++k) {
      if (probs[k] > probs[static_cast<std::size_t>(best)]) best = static_cast<int>(k);
    }
    if (best == data.item(idx).class_id) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

/// Train one stage to scheduler termination (or the epoch cap). The
/// scheduler is consulted at the start of every epoch with the previous
/// epoch's mean loss. Distillation stages freeze an averaged teacher at
/// stage entry and trail it behind the student after every step.
inline StageMetrics train_stage(WidePyramidNet& model, const StagePlan& plan, TrainContext& ctx) {
  plan.validate();
  ctx.validate();
  const SyntheticDomainDataset& data = *ctx.data;

  auto optimizer = make_optimizer<float>(plan.optimizer);
  AlrsState sched(plan.alrs);
  auto params = model.parameters();

  std::unique_ptr<TeacherState> teacher;
  if (plan.loss_mode == LossMode::kDistill) {
    model.set_train(false);
    teacher = std::make_unique<TeacherState>(model, ctx.distill.ema_decay);
  }

  StageMetrics metrics;
  metrics.stage_index = plan.stage_index;

  std::optional<double> prev_loss;
  int nonfinite_streak = 0;
  for (int epoch = 0;; ++epoch) {
    if (epoch >= plan.max_epochs) break;
    AlrsStepResult lr_step;
    if (plan.scheduler == SchedKind::kCosine) {
      lr_step.lr = plan.max_epochs == 1
                       ? plan.alrs.target_lr
                       : cosine_lr(epoch, plan.max_epochs - 1, plan.alrs.target_lr,
                                   plan.alrs.min_lr);
    } else {
      lr_step = alrs_step(sched, prev_loss);
    }
    metrics.sched_rows.push_back(
        {epoch, lr_step.lr, prev_loss, lr_step.decayed, lr_step.terminate});
    if (lr_step.terminate) break;

    model.set_train(true);
    std::vector<int> order = ctx.train_indices;
    RngStream shuffle(ctx.seed, detail::kShuffleKey, static_cast<std::uint64_t>(plan.stage_index),
                      static_cast<std::uint64_t>(epoch));
    shuffle.shuffle(order);

    double loss_sum = 0.0;
    std::int64_t loss_count = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(plan.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(plan.batch_size));
      const std::vector<int> chunk(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(end));

      Tensor images({static_cast<int>(chunk.size()), 3, plan.resolution, plan.resolution});
      const std::int64_t per = 3LL * plan.resolution * plan.resolution;
      for (std::size_t i = 0; i < chunk.size(); ++i) {
        Tensor img = data.render(chunk[i], plan.resolution);
        RngStream aug(ctx.seed, detail::kAugKey, static_cast<std::uint64_t>(plan.stage_index),
                      (static_cast<std::uint64_t>(epoch) << 24) ^ static_cast<std::uint64_t>(chunk[i]));
        img = augment_image(img, plan.augment, aug, plan.crop_pad);
        std::copy(img.data.begin(), img.data.end(),
                  images.data.begin() + static_cast<std::int64_t>(i) * per);
      }
      Tensor labels = one_hot_labels(data, chunk);

      const bool wants_cutmix =
          std::find(plan.augment.begin(), plan.augment.end(), AugKind::kCutMix) != plan.augment.end();
      if (wants_cutmix) {
        RngStream cm(ctx.seed, detail::kCutmixKey, static_cast<std::uint64_t>(plan.stage_index),
                     (static_cast<std::uint64_t>(epoch) << 24) ^ static_cast<std::uint64_t>(start));
        cutmix_batch(images, labels, plan.cutmix_prob, plan.cutmix_beta, cm);
      }

      Tensor teacher_logits;
      if (teacher) teacher_logits = teacher->predict_logits(images);

      Tape tape;
      const int input = tape.constant(images);
      WidePyramidNet::StepContext step_ctx{ctx.seed, ctx.global_step};
      const int logits = model.forward(tape, input, step_ctx);
      const int loss = teacher ? mesa_loss(tape, logits, teacher_logits, labels, ctx.distill)
                               : soft_cross_entropy(tape, logits, labels);

      zero_grad(params);
      tape.backward(loss);
      optimizer->step(params, lr_step.lr);
      if (teacher) teacher->ema_update(model);

      const double batch_loss = static_cast<double>(tape.value(loss).data[0]);
      loss_sum += batch_loss * static_cast<double>(chunk.size());
      loss_count += static_cast<std::int64_t>(chunk.size());
      ++ctx.global_step;
    }

    const double mean_loss = loss_sum / static_cast<double>(loss_count);
    model.set_train(false);

    EpochRow row;
    row.epoch = epoch;
    row.lr = lr_step.lr;
    row.train_loss = mean_loss;
    if (!ctx.val_indices.empty()) {
      row.val_accuracy = evaluate_accuracy(model, data, ctx.val_indices, plan.resolution);
    }
    metrics.rows.push_back(row);
    metrics.epochs_run = epoch + 1;
    metrics.final_train_loss = mean_loss;
    metrics.val_accuracy = row.val_accuracy;

    if (!std::isfinite(mean_loss)) {
      if (++nonfinite_streak >= 3) {
        throw TrainingError("stage " + std::to_string(plan.stage_index) + " diverged: " +
                            std::to_string(nonfinite_streak) +
                            " consecutive non-finite epoch losses (last epoch " +
                            std::to_string(epoch) + ")");
      }
      prev_loss.reset();
    } else {
      nonfinite_streak = 0;
      prev_loss = mean_loss;
    }
  }

  model.set_train(false);
  return metrics;
}

/// Run the whole progressive schedule. The optional callback fires after
/// every completed stage with the live model, for checkpointing or
/// logging.
inline std::vector<StageMetrics> run_dfp(
    WidePyramidNet& model, const std::vector<StagePlan>& plans, TrainContext& ctx,
    const std::function<void(const StagePlan&, WidePyramidNet&, const StageMetrics&)>& on_stage =
        nullptr) {
  validate_stage_plans(plans);
  std::vector<StageMetrics> out;
  out.reserve(plans.size());
  for (const StagePlan& plan : plans) {
    StageMetrics m = train_stage(model, plan, ctx);
    if (on_stage) on_stage(plan, model, m);
    out.push_back(std::move(m));
  }
  return out;
}

struct LodoFold {
  int held_out_domain = 0;
  double accuracy = 0.0;
};

struct LodoResult {
  std::vector<LodoFold> folds;
  double mean_accuracy = 0.0;
};

/// Leave-one-domain-out protocol: for every domain, train a fresh model
/// on the others (with the usual in-domain validation split) and test on
/// the entire held-out domain at the final stage resolution.
template <typename ModelFactory>
LodoResult leave_one_domain_out(const SyntheticDomainDataset& data,
                                const std::vector<StagePlan>& plans, const DistillConfig& distill,
                                std::uint64_t seed, double val_fraction, ModelFactory make_model) {
  validate_stage_plans(plans);
  const int D = data.config().num_domains;
  if (D < 2) throw std::invalid_argument("leave_one_domain_out: need at least 2 domains");

  LodoResult result;
  for (int held = 0; held < D; ++held) {
    std::vector<int> train_domains;
    for (int d = 0; d < D; ++d) {
      if (d != held) train_domains.push_back(d);
    }
    const SplitIndices split = split_train_val(data, train_domains, val_fraction, seed);

    WidePyramidNet model = make_model(held);
    TrainContext ctx;
    ctx.data = &data;
    ctx.train_indices = split.train;
    ctx.val_indices = split.val;
    ctx.distill = distill;
    ctx.seed = seed + static_cast<std::uint64_t>(held) * 0x9e37;
    run_dfp(model, plans, ctx);

    LodoFold fold;
    fold.held_out_domain = held;
    fold.accuracy = evaluate_accuracy(model, data, data.indices_of_domain(held),
                                      plans.back().resolution);
    result.folds.push_back(fold);
    result.mean_accuracy += fold.accuracy;
  }
  result.mean_accuracy /= static_cast<double>(result.folds.size());
  return result;
}

}  // namespace flatland
