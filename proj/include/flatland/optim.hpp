#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "flatland/tape.hpp"

namespace flatland {

/// Raised when a training step cannot proceed (non-finite gradients, a
/// run that diverged past recovery, and similar).
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class OptimKind { kSgd, kAdamW };

struct OptimConfig {
  OptimKind kind = OptimKind::kSgd;
  double weight_decay = 0.0;
  double momentum = 0.9;       // sgd
  double beta1 = 0.9;          // adamw
  double beta2 = 0.999;        // adamw
  double eps = 1e-8;           // adamw

  void validate() const {
    if (weight_decay < 0.0) throw std::invalid_argument("optimizer: weight_decay must be >= 0");
    if (kind == OptimKind::kSgd) {
      if (momentum < 0.0 || momentum >= 1.0) {
        throw std::invalid_argument("optimizer: momentum must be in [0, 1)");
      }
    } else {
      if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
        throw std::invalid_argument("optimizer: adamw betas must be in [0, 1)");
      }
      if (!(eps > 0.0)) throw std::invalid_argument("optimizer: adamw eps must be positive");
    }
  }
};

template <typename T>
void zero_grad(const std::vector<ParameterT<T>*>& params) {
  for (auto* p : params) p->zero_grad();
}

namespace detail {

/// All optimizers refuse to touch parameters when any gradient is
/// non-finite; an exploded step would corrupt every parameter at once.
template <typename T>
void check_finite_grads(const std::vector<ParameterT<T>*>& params) {
  for (const auto* p : params) {
    for (std::size_t i = 0; i < p->grad.size(); ++i) {
      if (!std::isfinite(p->grad[i])) {
        throw TrainingError("non-finite gradient in parameter '" + p->id + "' at index " +
                            std::to_string(i));
      }
    }
  }
}

}  // namespace detail

template <typename T>
class OptimizerT {
 public:
  virtual ~OptimizerT() = default;
  virtual void step(const std::vector<ParameterT<T>*>& params, double lr) = 0;
  virtual void reset() = 0;
};

/// SGD with classical momentum. Weight decay is folded into the gradient
/// before the momentum update (coupled form).
template <typename T>
class SgdT : public OptimizerT<T> {
 public:
  explicit SgdT(OptimConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  void step(const std::vector<ParameterT<T>*>& params, double lr) override {
    detail::check_finite_grads(params);
    for (auto* p : params) {
      auto& vel = velocity_[p->id];
      if (vel.size() != p->grad.size()) vel.assign(p->grad.size(), 0.0);
      for (std::size_t i = 0; i < p->grad.size(); ++i) {
        const double g = p->grad[i] + cfg_.weight_decay * static_cast<double>(p->value.data[i]);
        vel[i] = cfg_.momentum * vel[i] + g;
        p->value.data[i] = static_cast<T>(static_cast<double>(p->value.data[i]) - lr * vel[i]);
      }
    }
  }

  void reset() override { velocity_.clear(); }

 private:
  OptimConfig cfg_;
  std::unordered_map<std::string, std::vector<double>> velocity_;
};

/// AdamW with decoupled weight decay and bias correction.
template <typename T>
class AdamWT : public OptimizerT<T> {
 public:
  explicit AdamWT(OptimConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  void step(const std::vector<ParameterT<T>*>& params, double lr) override {
    detail::check_finite_grads(params);
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto* p : params) {
      auto& m = m_[p->id];
      auto& v = v_[p->id];
      if (m.size() != p->grad.size()) m.assign(p->grad.size(), 0.0);
      if (v.size() != p->grad.size()) v.assign(p->grad.size(), 0.0);
      for (std::size_t i = 0; i < p->grad.size(); ++i) {
        const double g = p->grad[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        const double theta = static_cast<double>(p->value.data[i]);
        p->value.data[i] = static_cast<T>(
            theta - lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * theta));
      }
    }
  }

  void reset() override {
    m_.clear();
    v_.clear();
    t_ = 0;
  }

 private:
  OptimConfig cfg_;
  std::unordered_map<std::string, std::vector<double>> m_;
  std::unordered_map<std::string, std::vector<double>> v_;
  long t_ = 0;
};

template <typename T>
std::unique_ptr<OptimizerT<T>> make_optimizer(const OptimConfig& cfg) {
  cfg.validate();
  if (cfg.kind == OptimKind::kSgd) return std::make_unique<SgdT<T>>(cfg);
  return std::make_unique<AdamWT<T>>(cfg);
}

}  // namespace flatland
