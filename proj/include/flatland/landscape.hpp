#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "flatland/rng.hpp"
#include "flatland/tape.hpp"
#include "flatland/tensor.hpp"

namespace flatland {

enum class DirectionMode { kFilterNorm, kGlobalNorm, kRaw };

inline DirectionMode direction_mode_from_string(const std::string& s) {
  if (s == "filter") return DirectionMode::kFilterNorm;
  if (s == "global") return DirectionMode::kGlobalNorm;
  if (s == "raw") return DirectionMode::kRaw;
  throw std::invalid_argument("unknown direction mode '" + s + "' (filter, global, raw)");
}

inline std::string direction_mode_to_string(DirectionMode m) {
  switch (m) {
    case DirectionMode::kFilterNorm: return "filter";
    case DirectionMode::kGlobalNorm: return "global";
    case DirectionMode::kRaw: return "raw";
  }
  return "filter";
}

/// A perturbation direction in parameter space, one entry per parameter.
/// One-dimensional parameters (biases, normalization scales) always get a
/// zero entry: perturbing them distorts the picture without saying
/// anything about the weight geometry.
template <typename T>
struct DirectionT {
  std::vector<TensorT<T>> entries;
  DirectionMode mode = DirectionMode::kFilterNorm;
};

using Direction = DirectionT<float>;

/// Draw a random direction matched to the parameter list. Filter
/// normalization rescales every leading-dim slice of the draw to the norm
/// of the corresponding parameter slice; global normalization matches
/// whole-tensor norms; raw leaves the gaussian draw as is.
template <typename T>
DirectionT<T> sample_direction(const std::vector<ParameterT<T>*>& params, DirectionMode mode,
                               RngStream& rng) {
  if (params.empty()) throw std::invalid_argument("sample_direction: empty parameter list");
  DirectionT<T> dir;
  dir.mode = mode;
  dir.entries.reserve(params.size());
  for (const auto* p : params) {
    TensorT<T> d(p->value.shape);
    if (p->value.ndim() < 2) {
      dir.entries.push_back(std::move(d));
      continue;
    }
    for (auto& v : d.data) v = static_cast<T>(rng.normal());
    if (mode == DirectionMode::kFilterNorm) {
      const int slices = p->value.dim(0);
      const std::int64_t per = p->value.numel() / slices;
      for (int o = 0; o < slices; ++o) {
        double wn = 0.0, dn = 0.0;
        for (std::int64_t i = 0; i < per; ++i) {
          const double w = static_cast<double>(p->value.data[static_cast<std::size_t>(o * per + i)]);
          const double dv = static_cast<double>(d.data[static_cast<std::size_t>(o * per + i)]);
          wn += w * w;
          dn += dv * dv;
        }
        const double scale = std::sqrt(wn) / (std::sqrt(dn) + 1e-10);
        for (std::int64_t i = 0; i < per; ++i) {
          d.data[static_cast<std::size_t>(o * per + i)] =
              static_cast<T>(scale * static_cast<double>(d.data[static_cast<std::size_t>(o * per + i)]));
        }
      }
    } else if (mode == DirectionMode::kGlobalNorm) {
      double wn = 0.0, dn = 0.0;
      for (std::size_t i = 0; i < d.data.size(); ++i) {
        wn += static_cast<double>(p->value.data[i]) * static_cast<double>(p->value.data[i]);
        dn += static_cast<double>(d.data[i]) * static_cast<double>(d.data[i]);
      }
      const double scale = std::sqrt(wn) / (std::sqrt(dn) + 1e-10);
      for (auto& v : d.data) v = static_cast<T>(scale * static_cast<double>(v));
    }
    dir.entries.push_back(std::move(d));
  }
  return dir;
}

struct Slice1D {
  double radius = 1.0;
  std::vector<double> ts;
  std::vector<double> losses;
  double base_loss = 0.0;
};

struct Slice2D {
  double radius = 1.0;
  int steps = 0;
  std::vector<double> ts;
  std::vector<double> losses;  // row-major over (t1, t2)
  double base_loss = 0.0;
};

namespace detail {

template <typename T>
void check_direction(const std::vector<ParameterT<T>*>& params, const DirectionT<T>& dir,
                     const char* what) {
  if (dir.entries.size() != params.size()) {
    throw std::invalid_argument(std::string(what) + ": direction has " +
                                std::to_string(dir.entries.size()) + " entries for " +
                                std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (dir.entries[i].shape != params[i]->value.shape) {
      throw std::invalid_argument(std::string(what) + ": direction entry " + std::to_string(i) +
                                  " shape " + shape_str(dir.entries[i].shape) +
                                  " does not match parameter '" + params[i]->id + "' " +
                                  shape_str(params[i]->value.shape));
    }
  }
}

/// RAII restore of the exact parameter bytes.
template <typename T>
class ParamSnapshot {
 public:
  explicit ParamSnapshot(const std::vector<ParameterT<T>*>& params) : params_(params) {
    base_.reserve(params.size());
    for (const auto* p : params) base_.push_back(p->value);
  }
  ~ParamSnapshot() { restore(); }

  void restore() {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i]->value = base_[i];
  }

  const TensorT<T>& base(std::size_t i) const { return base_[i]; }

 private:
  const std::vector<ParameterT<T>*>& params_;
  std::vector<TensorT<T>> base_;
};

inline double sanitize_loss(double v) {
  return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
}

inline std::vector<double> slice_ts(double radius, int steps) {
  std::vector<double> ts(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) {
    ts[static_cast<std::size_t>(i)] = -radius + 2.0 * radius * i / (steps - 1);
  }
  return ts;
}

}  // namespace detail

/// Evaluate the loss along theta + t * d for `steps` evenly spaced t in
/// [-radius, radius]. Parameters are restored bit-exactly afterwards; a
/// t of exactly zero skips perturbation entirely so the base loss comes
/// from the untouched weights. Non-finite losses are recorded as +inf.
template <typename T>
Slice1D loss_slice_1d(const std::vector<ParameterT<T>*>& params,
                      const std::function<double()>& loss_fn, const DirectionT<T>& dir,
                      double radius, int steps) {
  if (!(radius > 0.0)) throw std::invalid_argument("loss_slice_1d: radius must be positive");
  if (steps < 3) throw std::invalid_argument("loss_slice_1d: need at least 3 steps");
  detail::check_direction(params, dir, "loss_slice_1d");

  Slice1D out;
  out.radius = radius;
  out.ts = detail::slice_ts(radius, steps);
  out.losses.resize(static_cast<std::size_t>(steps));

  detail::ParamSnapshot<T> snap(params);
  out.base_loss = detail::sanitize_loss(loss_fn());
  for (int s = 0; s < steps; ++s) {
    const double t = out.ts[static_cast<std::size_t>(s)];
    if (t == 0.0) {
      out.losses[static_cast<std::size_t>(s)] = out.base_loss;
      continue;
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& value = params[i]->value;
      const auto& base = snap.base(i);
      const auto& d = dir.entries[i];
      for (std::size_t j = 0; j < value.data.size(); ++j) {
        value.data[j] = static_cast<T>(static_cast<double>(base.data[j]) +
                                       t * static_cast<double>(d.data[j]));
      }
    }
    out.losses[static_cast<std::size_t>(s)] = detail::sanitize_loss(loss_fn());
    snap.restore();
  }
  return out;
}

/// Two-direction grid version: loss at theta + t1 * d1 + t2 * d2 over a
/// steps x steps lattice, row-major in (t1, t2).
template <typename T>
Slice2D loss_slice_2d(const std::vector<ParameterT<T>*>& params,
                      const std::function<double()>& loss_fn, const DirectionT<T>& d1,
                      const DirectionT<T>& d2, double radius, int steps) {
  if (!(radius > 0.0)) throw std::invalid_argument("loss_slice_2d: radius must be positive");
  if (steps < 3) throw std::invalid_argument("loss_slice_2d: need at least 3 steps");
  detail::check_direction(params, d1, "loss_slice_2d");
  detail::check_direction(params, d2, "loss_slice_2d");

  Slice2D out;
  out.radius = radius;
  out.steps = steps;
  out.ts = detail::slice_ts(radius, steps);
  out.losses.resize(static_cast<std::size_t>(steps) * steps);

  detail::ParamSnapshot<T> snap(params);
  out.base_loss = detail::sanitize_loss(loss_fn());
  for (int s1 = 0; s1 < steps; ++s1) {
    for (int s2 = 0; s2 < steps; ++s2) {
      const double t1 = out.ts[static_cast<std::size_t>(s1)];
      const double t2 = out.ts[static_cast<std::size_t>(s2)];
      const std::size_t idx = static_cast<std::size_t>(s1) * steps + static_cast<std::size_t>(s2);
      if (t1 == 0.0 && t2 == 0.0) {
        out.losses[idx] = out.base_loss;
        continue;
      }
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto& value = params[i]->value;
        const auto& base = snap.base(i);
        const auto& e1 = d1.entries[i];
        const auto& e2 = d2.entries[i];
        for (std::size_t j = 0; j < value.data.size(); ++j) {
          value.data[j] = static_cast<T>(static_cast<double>(base.data[j]) +
                                         t1 * static_cast<double>(e1.data[j]) +
                                         t2 * static_cast<double>(e2.data[j]));
        }
      }
      out.losses[idx] = detail::sanitize_loss(loss_fn());
      snap.restore();
    }
  }
  return out;
}

/// Largest loss rise over the base point within |t| <= radius_fraction
/// times the slice radius. Low values mean the minimum sits in a flat
/// basin at this scale.
inline double sharpness_from_slice(const Slice1D& slice, double radius_fraction = 1.0) {
  if (!(radius_fraction > 0.0 && radius_fraction <= 1.0)) {
    throw std::invalid_argument("sharpness: radius_fraction must be in (0, 1]");
  }
  const double lim = radius_fraction * slice.radius;
  double best = 0.0;
  bool any = false;
  for (std::size_t i = 0; i < slice.ts.size(); ++i) {
    if (std::abs(slice.ts[i]) > lim * (1.0 + 1e-12)) continue;
    const double rise = slice.losses[i] - slice.base_loss;
    if (!any || rise > best) {
      best = rise;
      any = true;
    }
  }
  if (!any) throw std::invalid_argument("sharpness: no slice samples within the radius");
  return best;
}

}  // namespace flatland
