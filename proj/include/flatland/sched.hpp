#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>

namespace flatland {

/// Adaptive learning-rate scheduler settings.
///
/// The schedule has two phases. For the first warmup_epochs epochs the rate
/// ramps linearly from zero to target_lr. After warmup, each epoch compares
/// the two most recent epoch losses: when the improvement is small both
/// relative to the current loss (slope_threshold) and absolutely
/// (diff_threshold), the rate is multiplied by decay_rate. Training stops
/// once the rate falls below min_lr.
///
/// prose_decrease_rule switches the plateau test to "loss failed to
/// improve", a stricter published description of the same idea.
struct AlrsConfig {
  int warmup_epochs = 5;
  double target_lr = 0.1;
  double decay_rate = 0.9;
  double slope_threshold = 0.2;
  double diff_threshold = 0.2;
  double min_lr = 1e-4;
  bool prose_decrease_rule = false;

  void validate() const {
    if (warmup_epochs < 0) throw std::invalid_argument("alrs: warmup_epochs must be >= 0");
    if (!(target_lr > 0.0)) throw std::invalid_argument("alrs: target_lr must be positive");
    if (!(decay_rate > 0.0 && decay_rate < 1.0)) {
      throw std::invalid_argument("alrs: decay_rate must be in (0, 1)");
    }
    if (!(slope_threshold > 0.0)) throw std::invalid_argument("alrs: slope_threshold must be positive");
    if (!(diff_threshold > 0.0)) throw std::invalid_argument("alrs: diff_threshold must be positive");
    if (!(min_lr > 0.0)) throw std::invalid_argument("alrs: min_lr must be positive");
    if (min_lr >= target_lr) {
      throw std::invalid_argument("alrs: min_lr " + std::to_string(min_lr) +
                                  " must be below target_lr " + std::to_string(target_lr));
    }
  }
};

/// Mutable scheduler state. prev_loss / curr_loss hold the two most recent
/// epoch losses once enough epochs have reported one; losses_seen tracks
/// how many have, so the decay test never fires on garbage.
struct AlrsState {
  AlrsConfig cfg;
  int epoch = 0;
  double lr = 0.0;
  double prev_loss = 0.0;
  double curr_loss = 0.0;
  int losses_seen = 0;

  explicit AlrsState(AlrsConfig c) : cfg(c) {
    cfg.validate();
    lr = cfg.target_lr;
  }
};

struct AlrsStepResult {
  double lr = 0.0;
  bool terminate = false;
  bool decayed = false;
};

/// One line of the per-epoch schedule log: the rate chosen for the epoch,
/// the loss the decision was based on (absent on the first epoch), and the
/// decay / termination flags.
struct SchedTraceRow {
  int epoch = 0;
  double lr = 0.0;
  std::optional<double> epoch_loss;
  bool decayed = false;
  bool terminate = false;
};

/// Advance the schedule by one epoch. Call at the start of each epoch with
/// the previous epoch's mean training loss (nullopt on the very first call,
/// when no epoch has finished yet). Returns the rate to train with this
/// epoch and whether the schedule has run its course.
inline AlrsStepResult alrs_step(AlrsState& s, std::optional<double> epoch_loss) {
  if (epoch_loss && !std::isfinite(*epoch_loss)) {
    throw std::invalid_argument("alrs_step: epoch loss must be finite, got " +
                                std::to_string(*epoch_loss));
  }
  if (epoch_loss) {
    s.prev_loss = s.curr_loss;
    s.curr_loss = *epoch_loss;
    if (s.losses_seen < 2) ++s.losses_seen;
  }

  const int e = s.epoch;
  const bool in_warmup = s.cfg.warmup_epochs > 0 && e <= s.cfg.warmup_epochs;
  AlrsStepResult r;
  if (in_warmup) {
    // ramp hits target_lr exactly on the final warmup epoch
    r.lr = (e == s.cfg.warmup_epochs)
               ? s.cfg.target_lr
               : s.cfg.target_lr * static_cast<double>(e) / static_cast<double>(s.cfg.warmup_epochs);
  } else {
    r.lr = s.lr;
    if (s.losses_seen >= 2) {
      const double delta = s.prev_loss - s.curr_loss;
      bool plateau;
      if (s.cfg.prose_decrease_rule) {
        plateau = delta <= 0.0;
      } else {
        plateau = std::abs(delta / s.curr_loss) < s.cfg.slope_threshold &&
                  std::abs(delta) < s.cfg.diff_threshold;
      }
      if (plateau) {
        r.lr = s.cfg.decay_rate * r.lr;
        r.decayed = true;
      }
    }
  }
  s.lr = r.lr;
  s.epoch = e + 1;
  // the ramp passes through rates below min_lr by design, so only the
  // decay phase can end the schedule
  r.terminate = !in_warmup && r.lr < s.cfg.min_lr;
  return r;
}

/// Cosine annealing from base_lr to min_lr over a fixed horizon, the
/// conventional fixed-length baseline the adaptive schedule is measured
/// against. Endpoints are returned exactly.
inline double cosine_lr(int epoch, int total_epochs, double base_lr, double min_lr) {
  if (total_epochs <= 0) throw std::invalid_argument("cosine_lr: total_epochs must be positive");
  if (epoch < 0 || epoch > total_epochs) {
    throw std::invalid_argument("cosine_lr: epoch " + std::to_string(epoch) + " outside [0, " +
                                std::to_string(total_epochs) + "]");
  }
  if (epoch == 0) return base_lr;
  if (epoch == total_epochs) return min_lr;
  const double t = static_cast<double>(epoch) / static_cast<double>(total_epochs);
  return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

}  // namespace flatland
