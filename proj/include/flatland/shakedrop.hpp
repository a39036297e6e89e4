#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "flatland/ops.hpp"
#include "flatland/rng.hpp"
#include "flatland/tape.hpp"

namespace flatland {

/// Stochastic residual-join settings. A gate draw beta decides per
/// application whether the block output passes through unscaled (beta = 1)
/// or gets a random forward coefficient alpha; the backward pass uses an
/// independently drawn gamma instead of alpha, which is the whole point of
/// the regularizer.
///
/// literal_coupled_backward switches the backward coefficient from the
/// gated form (beta ? 1 : gamma) to gamma + alpha - gamma * alpha, an
/// alternative published form that ignores the gate. depth_decay makes the
/// gate probability fall off linearly with block depth.
struct ShakeDropConfig {
  double gate_prob = 0.5;
  std::array<double, 2> alpha_range{0.0, 1.0};
  std::array<double, 2> gamma_range{0.0, 1.0};
  bool literal_coupled_backward = false;
  bool per_example = false;
  bool depth_decay = false;

  void validate() const {
    if (!(gate_prob >= 0.0 && gate_prob <= 1.0)) {
      throw std::invalid_argument("shakedrop: gate_prob must be in [0, 1], got " +
                                  std::to_string(gate_prob));
    }
    if (alpha_range[0] > alpha_range[1]) {
      throw std::invalid_argument("shakedrop: alpha_range must be ordered");
    }
    if (gamma_range[0] > gamma_range[1]) {
      throw std::invalid_argument("shakedrop: gamma_range must be ordered");
    }
  }

  /// Gate probability for block `index` (1-based) of `total`. Without
  /// depth_decay every block uses gate_prob; with it the probability
  /// interpolates from 1 at depth 0 down to gate_prob at the last block.
  double gate_prob_at(int index, int total) const {
    if (index < 1 || total < 1 || index > total) {
      throw std::invalid_argument("shakedrop: bad block index " + std::to_string(index) + "/" +
                                  std::to_string(total));
    }
    if (!depth_decay) return gate_prob;
    return 1.0 - (static_cast<double>(index) / static_cast<double>(total)) * (1.0 - gate_prob);
  }

  /// Expected forward coefficient, used at inference so the deterministic
  /// network matches the training-time mean.
  double expected_coeff(double effective_gate_prob) const {
    const double mean_alpha = 0.5 * (alpha_range[0] + alpha_range[1]);
    return effective_gate_prob + mean_alpha * (1.0 - effective_gate_prob);
  }
  double expected_coeff() const { return expected_coeff(gate_prob); }
};

/// Training-time stochastic join of a residual branch pair. Samples are
/// drawn from the given streams: beta and alpha at forward time, gamma
/// lazily when backward reaches the node. The draw record is attached to
/// the tape node and can be read back after the fact.
///
/// With per_example set, each leading-dim element gets its own draws.
template <typename T>
int shakedrop_join(TapeT<T>& t, int x_res, int x_block, const ShakeDropConfig& cfg,
                   double effective_gate_prob, RngStream forward_rng, RngStream backward_rng) {
  cfg.validate();
  const TensorT<T>& xr = t.value(x_res);
  const TensorT<T>& xb = t.value(x_block);
  if (!xr.same_shape(xb)) {
    throw std::invalid_argument("shakedrop_join: branch shapes differ, " + shape_str(xr.shape) +
                                " vs " + shape_str(xb.shape));
  }

  const int groups = cfg.per_example ? xr.dim(0) : 1;
  auto record = std::make_shared<std::vector<ShakeDropSample>>();
  record->resize(static_cast<std::size_t>(groups));
  for (int g = 0; g < groups; ++g) {
    ShakeDropSample& s = (*record)[static_cast<std::size_t>(g)];
    s.beta = forward_rng.bernoulli(effective_gate_prob) ? 1 : 0;
    s.alpha = forward_rng.uniform(cfg.alpha_range[0], cfg.alpha_range[1]);
  }

  typename TapeT<T>::Node n;
  n.kind = OpKind::kShakeDropJoin;
  n.inputs = {x_res, x_block};
  n.out = TensorT<T>(xr.shape);
  n.join_record = record;
  const std::int64_t per_group = xr.numel() / groups;
  for (int g = 0; g < groups; ++g) {
    const ShakeDropSample& s = (*record)[static_cast<std::size_t>(g)];
    const double cf = s.beta ? 1.0 : s.alpha;
    const T* r = &xr.data[static_cast<std::size_t>(g * per_group)];
    const T* b = &xb.data[static_cast<std::size_t>(g * per_group)];
    T* o = &n.out.data[static_cast<std::size_t>(g * per_group)];
    for (std::int64_t i = 0; i < per_group; ++i) {
      o[i] = r[i] + static_cast<T>(cf * static_cast<double>(b[i]));
    }
  }

  n.backward = [record, per_group, groups, cfg, backward_rng](TapeT<T>& tp, int id) mutable {
    auto& self = tp.node(id);
    auto& gr = tp.node(self.inputs[0]).grad;
    auto& gb = tp.node(self.inputs[1]).grad;
    for (int g = 0; g < groups; ++g) {
      ShakeDropSample& s = (*record)[static_cast<std::size_t>(g)];
      s.gamma = backward_rng.uniform(cfg.gamma_range[0], cfg.gamma_range[1]);
      double cb;
      if (cfg.literal_coupled_backward) {
        cb = s.gamma + s.alpha - s.gamma * s.alpha;
      } else {
        cb = s.beta ? 1.0 : s.gamma;
      }
      const double* gg = &self.grad[static_cast<std::size_t>(g * per_group)];
      double* grr = &gr[static_cast<std::size_t>(g * per_group)];
      double* gbb = &gb[static_cast<std::size_t>(g * per_group)];
      for (std::int64_t i = 0; i < per_group; ++i) {
        grr[i] += gg[i];
        gbb[i] += cb * gg[i];
      }
    }
  };
  return t.push(std::move(n));
}

/// Deterministic inference-time join: x_res + expected_coeff * x_block,
/// assembled from the basic ops so the graph stays inspectable.
template <typename T>
int shakedrop_join_eval(TapeT<T>& t, int x_res, int x_block, double expected_coeff) {
  return add(t, x_res, scalar_mul(t, x_block, expected_coeff));
}

/// Read back the draw record of a join node.
template <typename T>
const std::vector<ShakeDropSample>& shakedrop_record(const TapeT<T>& t, int id) {
  const auto& n = t.node(id);
  if (!n.join_record) {
    throw std::invalid_argument("node " + std::to_string(id) + " has no shakedrop record");
  }
  return *n.join_record;
}

}  // namespace flatland
