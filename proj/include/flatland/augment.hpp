#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "flatland/rng.hpp"
#include "flatland/tensor.hpp"

namespace flatland {

namespace detail {

inline float bilinear_clamped(const Tensor& img, int ch, double fy, double fx) {
  const int R = img.dim(1);
  const int W = img.dim(2);
  const auto clampi = [](int v, int hi) { return v < 0 ? 0 : (v > hi ? hi : v); };
  const int x0 = static_cast<int>(std::floor(fx));
  const int y0 = static_cast<int>(std::floor(fy));
  const double ax = fx - x0;
  const double ay = fy - y0;
  const std::int64_t plane = static_cast<std::int64_t>(R) * W;
  const auto at = [&](int y, int x) {
    return static_cast<double>(
        img.data[static_cast<std::size_t>(ch * plane + static_cast<std::int64_t>(clampi(y, R - 1)) * W +
                                          clampi(x, W - 1))]);
  };
  const double top = at(y0, x0) * (1.0 - ax) + at(y0, x0 + 1) * ax;
  const double bot = at(y0 + 1, x0) * (1.0 - ax) + at(y0 + 1, x0 + 1) * ax;
  return static_cast<float>(top * (1.0 - ay) + bot * ay);
}

/// Resample through an inverse affine map around the image center:
/// src = A * (dst - c) + c + shift. Border pixels extend outward.
inline Tensor affine_resample(const Tensor& img, double a00, double a01, double a10, double a11,
                              double shift_y, double shift_x) {
  require_ndim(img, 3, "augment image");
  const int R = img.dim(1);
  const int W = img.dim(2);
  const double cy = 0.5 * (R - 1);
  const double cx = 0.5 * (W - 1);
  Tensor out(img.shape);
  for (int ch = 0; ch < img.dim(0); ++ch) {
    for (int y = 0; y < R; ++y) {
      for (int x = 0; x < W; ++x) {
        const double dy = y - cy;
        const double dx = x - cx;
        const double sy = a10 * dx + a11 * dy + cy + shift_y;
        const double sx = a00 * dx + a01 * dy + cx + shift_x;
        out.data[static_cast<std::size_t>((static_cast<std::int64_t>(ch) * R + y) * W + x)] =
            bilinear_clamped(img, ch, sy, sx);
      }
    }
  }
  return out;
}

inline float clamp01(double v) { return static_cast<float>(std::min(1.0, std::max(0.0, v))); }

}  // namespace detail

inline Tensor rotate_image(const Tensor& img, double degrees) {
  const double th = degrees * 3.14159265358979323846 / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  // inverse rotation
  return detail::affine_resample(img, c, -s, s, c, 0.0, 0.0);
}

inline Tensor shear_x_image(const Tensor& img, double magnitude) {
  return detail::affine_resample(img, 1.0, -magnitude, 0.0, 1.0, 0.0, 0.0);
}

inline Tensor shear_y_image(const Tensor& img, double magnitude) {
  return detail::affine_resample(img, 1.0, 0.0, -magnitude, 1.0, 0.0, 0.0);
}

inline Tensor translate_image(const Tensor& img, double frac_x, double frac_y) {
  const double sx = -frac_x * img.dim(2);
  const double sy = -frac_y * img.dim(1);
  return detail::affine_resample(img, 1.0, 0.0, 0.0, 1.0, sy, sx);
}

inline Tensor brightness_image(const Tensor& img, double factor) {
  Tensor out = img;
  for (auto& v : out.data) v = detail::clamp01(factor * static_cast<double>(v));
  return out;
}

inline Tensor contrast_image(const Tensor& img, double factor) {
  double mean = 0.0;
  for (const auto& v : img.data) mean += static_cast<double>(v);
  mean /= static_cast<double>(img.numel());
  Tensor out = img;
  for (auto& v : out.data) v = detail::clamp01(mean + factor * (static_cast<double>(v) - mean));
  return out;
}

inline Tensor saturation_image(const Tensor& img, double factor) {
  require_ndim(img, 3, "saturation image");
  Tensor out = img;
  const std::int64_t plane = static_cast<std::int64_t>(img.dim(1)) * img.dim(2);
  for (std::int64_t p = 0; p < plane; ++p) {
    const double r = img.data[static_cast<std::size_t>(p)];
    const double g = img.data[static_cast<std::size_t>(plane + p)];
    const double b = img.data[static_cast<std::size_t>(2 * plane + p)];
    const double gray = 0.299 * r + 0.587 * g + 0.114 * b;
    out.data[static_cast<std::size_t>(p)] = detail::clamp01(gray + factor * (r - gray));
    out.data[static_cast<std::size_t>(plane + p)] = detail::clamp01(gray + factor * (g - gray));
    out.data[static_cast<std::size_t>(2 * plane + p)] = detail::clamp01(gray + factor * (b - gray));
  }
  return out;
}

/// Zero-pad by `pad` on all sides, then crop a same-sized window at a
/// random offset.
inline Tensor random_crop_image(const Tensor& img, int pad, RngStream& rng) {
  require_ndim(img, 3, "random_crop image");
  if (pad < 0) throw std::invalid_argument("random_crop: pad must be >= 0");
  if (pad == 0) return img;
  const int C = img.dim(0), R = img.dim(1), W = img.dim(2);
  const int oy = static_cast<int>(rng.uniform_int(0, 2 * pad));
  const int ox = static_cast<int>(rng.uniform_int(0, 2 * pad));
  Tensor out(img.shape);
  for (int ch = 0; ch < C; ++ch) {
    for (int y = 0; y < R; ++y) {
      const int sy = y + oy - pad;
      if (sy < 0 || sy >= R) continue;  // zero fill
      for (int x = 0; x < W; ++x) {
        const int sx = x + ox - pad;
        if (sx < 0 || sx >= W) continue;
        out.data[static_cast<std::size_t>((static_cast<std::int64_t>(ch) * R + y) * W + x)] =
            img.data[static_cast<std::size_t>((static_cast<std::int64_t>(ch) * R + sy) * W + sx)];
      }
    }
  }
  return out;
}

inline Tensor color_jitter_image(const Tensor& img, RngStream& rng) {
  Tensor out = brightness_image(img, rng.uniform(0.8, 1.2));
  out = contrast_image(out, rng.uniform(0.8, 1.2));
  return saturation_image(out, rng.uniform(0.7, 1.3));
}

/// A small fixed menu of two-op policies in the spirit of learned
/// augmentation schedules: one policy is drawn per image, and each of its
/// ops fires with its own probability.
inline Tensor auto_augment_image(const Tensor& img, RngStream& rng) {
  struct OpSpec {
    int op;  // 0 rotate deg, 1 shear_x, 2 shear_y, 3 translate_x, 4 translate_y,
             // 5 brightness, 6 contrast, 7 saturation
    double prob;
    double magnitude;
  };
  static const OpSpec kPolicies[8][2] = {
      {{0, 0.7, 15.0}, {5, 0.3, 1.2}},  {{1, 0.7, 0.20}, {6, 0.3, 1.3}},
      {{3, 0.7, 0.20}, {7, 0.3, 1.4}},  {{0, 0.5, -15.0}, {6, 0.5, 0.8}},
      {{2, 0.5, 0.20}, {5, 0.5, 0.8}},  {{4, 0.5, 0.20}, {7, 0.3, 0.7}},
      {{0, 0.3, 8.0}, {1, 0.5, -0.15}}, {{5, 0.5, 1.1}, {6, 0.5, 1.15}},
  };
  const auto pick = rng.uniform_int(0, 7);
  Tensor out = img;
  for (const OpSpec& spec : kPolicies[pick]) {
    if (!rng.bernoulli(spec.prob)) continue;
    switch (spec.op) {
      case 0: out = rotate_image(out, spec.magnitude); break;
      case 1: out = shear_x_image(out, spec.magnitude); break;
      case 2: out = shear_y_image(out, spec.magnitude); break;
      case 3: out = translate_image(out, spec.magnitude, 0.0); break;
      case 4: out = translate_image(out, 0.0, spec.magnitude); break;
      case 5: out = brightness_image(out, spec.magnitude); break;
      case 6: out = contrast_image(out, spec.magnitude); break;
      case 7: out = saturation_image(out, spec.magnitude); break;
      default: break;
    }
  }
  return out;
}

enum class AugKind { kAutoAugment, kColorJitter, kRandomCrop, kCutMix };

inline AugKind aug_kind_from_string(const std::string& s) {
  if (s == "autoaugment") return AugKind::kAutoAugment;
  if (s == "colorjitter") return AugKind::kColorJitter;
  if (s == "randomcrop") return AugKind::kRandomCrop;
  if (s == "cutmix") return AugKind::kCutMix;
  throw std::invalid_argument("unknown augmentation '" + s + "'");
}

inline std::string aug_kind_to_string(AugKind k) {
  switch (k) {
    case AugKind::kAutoAugment: return "autoaugment";
    case AugKind::kColorJitter: return "colorjitter";
    case AugKind::kRandomCrop: return "randomcrop";
    case AugKind::kCutMix: return "cutmix";
  }
  return "?";
}

/// Apply the per-image transforms from `kinds` in order. The batch-level
/// mixing entry is skipped here; it runs once per batch elsewhere. An
/// empty list returns the image unchanged.
inline Tensor augment_image(const Tensor& img, const std::vector<AugKind>& kinds, RngStream& rng,
                            int crop_pad = 2) {
  Tensor out = img;
  for (AugKind k : kinds) {
    switch (k) {
      case AugKind::kAutoAugment: out = auto_augment_image(out, rng); break;
      case AugKind::kColorJitter: out = color_jitter_image(out, rng); break;
      case AugKind::kRandomCrop: out = random_crop_image(out, crop_pad, rng); break;
      case AugKind::kCutMix: break;
    }
  }
  return out;
}

struct CutMixInfo {
  bool applied = false;
  double lambda = 1.0;
  int y0 = 0, y1 = 0, x0 = 0, x1 = 0;
  std::vector<int> partner;
};

/// Batch-level box mixing. With probability mix_prob a mixing ratio is
/// drawn from Beta(beta_param, beta_param), a matching box is cut from a
/// shuffled partner image into each image, and the label rows are blended
/// by the actual pasted area. Labels stay valid distributions.
inline CutMixInfo cutmix_batch(Tensor& images, Tensor& labels, double mix_prob, double beta_param,
                               RngStream& rng) {
  require_ndim(images, 4, "cutmix images");
  require_ndim(labels, 2, "cutmix labels");
  if (images.dim(0) != labels.dim(0)) {
    throw std::invalid_argument("cutmix: batch size mismatch, images " + shape_str(images.shape) +
                                " vs labels " + shape_str(labels.shape));
  }
  if (!(mix_prob >= 0.0 && mix_prob <= 1.0)) {
    throw std::invalid_argument("cutmix: mix_prob must be in [0, 1]");
  }
  if (!(beta_param > 0.0)) throw std::invalid_argument("cutmix: beta_param must be positive");

  CutMixInfo info;
  const int N = images.dim(0);
  if (N < 2 || !rng.bernoulli(mix_prob)) return info;

  const double lam = rng.beta(beta_param, beta_param);
  const int H = images.dim(2), W = images.dim(3);
  const double cut = std::sqrt(1.0 - lam);
  const int rh = static_cast<int>(std::floor(H * cut));
  const int rw = static_cast<int>(std::floor(W * cut));
  const int cy = static_cast<int>(rng.uniform_int(0, H - 1));
  const int cx = static_cast<int>(rng.uniform_int(0, W - 1));
  info.y0 = std::max(0, cy - rh / 2);
  info.y1 = std::min(H, info.y0 + rh);
  info.x0 = std::max(0, cx - rw / 2);
  info.x1 = std::min(W, info.x0 + rw);

  info.partner.resize(static_cast<std::size_t>(N));
  for (int i = 0; i < N; ++i) info.partner[static_cast<std::size_t>(i)] = i;
  rng.shuffle(info.partner);

  const double area = static_cast<double>(info.y1 - info.y0) * (info.x1 - info.x0);
  info.lambda = 1.0 - area / (static_cast<double>(H) * W);
  info.applied = true;
  if (area == 0.0) return info;

  const Tensor src_images = images;
  const Tensor src_labels = labels;
  const int C = images.dim(1);
  const int K = labels.dim(1);
  for (int i = 0; i < N; ++i) {
    const int j = info.partner[static_cast<std::size_t>(i)];
    for (int ch = 0; ch < C; ++ch) {
      for (int y = info.y0; y < info.y1; ++y) {
        for (int x = info.x0; x < info.x1; ++x) {
          images.at4(i, ch, y, x) = src_images.at4(j, ch, y, x);
        }
      }
    }
    for (int k = 0; k < K; ++k) {
      labels.at2(i, k) = static_cast<float>(info.lambda * static_cast<double>(src_labels.at2(i, k)) +
                                            (1.0 - info.lambda) *
                                                static_cast<double>(src_labels.at2(j, k)));
    }
  }
  return info;
}

}  // namespace flatland
