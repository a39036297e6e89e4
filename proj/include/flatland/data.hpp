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

/// Synthetic corpus layout: num_domains visual domains, each holding
/// images_per_class_per_domain renderings of every class. The class signal
/// is pure geometry and is drawn independently of the domain; domains
/// differ only in style (hue, background texture, brightness, noise). With
/// style_strength 0 every domain renders bit-identical images, which is
/// the degenerate case tests lean on.
struct DatasetConfig {
  int num_classes = 4;
  int num_domains = 3;
  int images_per_class_per_domain = 64;
  int resolution = 16;
  double style_strength = 1.0;
  double noise_level = 0.05;

  void validate() const {
    if (num_classes < 2) throw std::invalid_argument("dataset: num_classes must be >= 2");
    if (num_classes > 8) {
      throw std::invalid_argument("dataset: only 8 shape classes are defined, got " +
                                  std::to_string(num_classes));
    }
    if (num_domains < 1) throw std::invalid_argument("dataset: num_domains must be >= 1");
    if (images_per_class_per_domain < 1) {
      throw std::invalid_argument("dataset: images_per_class_per_domain must be >= 1");
    }
    if (resolution < 8) throw std::invalid_argument("dataset: resolution must be >= 8");
    if (style_strength < 0.0) throw std::invalid_argument("dataset: style_strength must be >= 0");
    if (noise_level < 0.0) throw std::invalid_argument("dataset: noise_level must be >= 0");
  }
};

namespace detail {

// stream purposes
inline constexpr std::uint64_t kGeometryKey = 0x6E01;
inline constexpr std::uint64_t kDomainStyleKey = 0x6E02;
inline constexpr std::uint64_t kImageStyleKey = 0x6E03;
inline constexpr std::uint64_t kNoiseKey = 0x6E04;
inline constexpr std::uint64_t kSplitKey = 0x6E05;

struct DomainStyle {
  double hue_shift = 0.0;
  double texture_freq = 2.0;
  double texture_amp = 0.0;
  double brightness = 1.0;
  double noise_sigma = 0.0;
};

struct Geometry {
  double cx = 0.5, cy = 0.5;
  double size = 0.34;
  double thickness = 0.16;
};

}  // namespace detail

class SyntheticDomainDataset {
 public:
  struct Item {
    int class_id = 0;
    int domain_id = 0;
    int index = 0;  // within (domain, class)
  };

  SyntheticDomainDataset(DatasetConfig cfg, std::uint64_t seed) : cfg_(cfg), seed_(seed) {
    cfg_.validate();
  }

  const DatasetConfig& config() const { return cfg_; }
  std::uint64_t seed() const { return seed_; }

  int size() const { return cfg_.num_domains * cfg_.num_classes * cfg_.images_per_class_per_domain; }

  Item item(int i) const {
    if (i < 0 || i >= size()) {
      throw std::out_of_range("dataset index " + std::to_string(i) + " outside 0.." +
                              std::to_string(size() - 1));
    }
    Item it;
    it.index = i % cfg_.images_per_class_per_domain;
    const int rest = i / cfg_.images_per_class_per_domain;
    it.class_id = rest % cfg_.num_classes;
    it.domain_id = rest / cfg_.num_classes;
    return it;
  }

  int flat_index(const Item& it) const {
    return (it.domain_id * cfg_.num_classes + it.class_id) * cfg_.images_per_class_per_domain +
           it.index;
  }

  std::vector<int> indices_of_domain(int domain) const {
    if (domain < 0 || domain >= cfg_.num_domains) {
      throw std::out_of_range("dataset domain " + std::to_string(domain) + " outside 0.." +
                              std::to_string(cfg_.num_domains - 1));
    }
    std::vector<int> out;
    const int per_domain = cfg_.num_classes * cfg_.images_per_class_per_domain;
    out.reserve(static_cast<std::size_t>(per_domain));
    for (int i = 0; i < per_domain; ++i) out.push_back(domain * per_domain + i);
    return out;
  }

  Tensor render(int i, int resolution) const { return render(item(i), resolution); }

  /// Rasterize one image as [3, R, R] in [0, 1]. Geometry lives in
  /// normalized coordinates, so the same item rendered at two resolutions
  /// shows the same scene at different sampling density.
  Tensor render(const Item& it, int resolution) const {
    if (resolution < 8) throw std::invalid_argument("dataset: render resolution must be >= 8");
    const detail::DomainStyle style = domain_style(it.domain_id);
    const detail::Geometry geo = geometry(it.class_id, it.index);

    RngStream tex(seed_, detail::kImageStyleKey, key_of(it.class_id, it.index));
    const double tex_phase = tex.uniform(0.0, 2.0 * 3.14159265358979323846);
    const double tex_orient = tex.uniform(0.0, 3.14159265358979323846);

    const int R = resolution;
    Tensor img({3, R, R});
    const double fg[3] = {0.80, 0.55, 0.25};
    const double bg[3] = {0.24, 0.34, 0.48};
    const double co = std::cos(tex_orient), so = std::sin(tex_orient);

    for (int y = 0; y < R; ++y) {
      for (int x = 0; x < R; ++x) {
        // 2x2 supersampled coverage for soft shape edges
        double cover = 0.0;
        for (int sy = 0; sy < 2; ++sy) {
          for (int sx = 0; sx < 2; ++sx) {
            const double u = (x + 0.25 + 0.5 * sx) / R;
            const double v = (y + 0.25 + 0.5 * sy) / R;
            cover += shape_mask(it.class_id, geo, u, v);
          }
        }
        cover *= 0.25;

        const double uc = (x + 0.5) / R;
        const double vc = (y + 0.5) / R;
        const double wave = std::sin(2.0 * 3.14159265358979323846 * style.texture_freq *
                                         (uc * co + vc * so) +
                                     tex_phase);
        const double tex_term = style.texture_amp * wave;
        for (int ch = 0; ch < 3; ++ch) {
          const double base = bg[ch] * (1.0 + tex_term);
          img.data[static_cast<std::size_t>((static_cast<std::int64_t>(ch) * R + y) * R + x)] =
              static_cast<float>(base + (fg[ch] - base) * cover);
        }
      }
    }

    apply_hue_brightness(img, style.hue_shift, style.brightness);

    if (cfg_.noise_level > 0.0) {
      RngStream noise(seed_, detail::kNoiseKey, key_of(it.class_id, it.index),
                      static_cast<std::uint64_t>(R));
      for (auto& v : img.data) {
        v = static_cast<float>(static_cast<double>(v) + style.noise_sigma * noise.normal());
      }
    }
    for (auto& v : img.data) v = std::min(1.0f, std::max(0.0f, v));
    return img;
  }

  detail::DomainStyle domain_style(int domain) const {
    if (domain < 0 || domain >= cfg_.num_domains) {
      throw std::out_of_range("dataset domain " + std::to_string(domain) + " outside 0.." +
                              std::to_string(cfg_.num_domains - 1));
    }
    RngStream s(seed_, detail::kDomainStyleKey, static_cast<std::uint64_t>(domain));
    const double k = cfg_.style_strength;
    detail::DomainStyle st;
    st.hue_shift = k * s.uniform(-0.9, 0.9);
    st.texture_freq = 2.0 + k * s.uniform(0.0, 4.0);
    st.texture_amp = k * s.uniform(0.05, 0.16);
    st.brightness = 1.0 + k * s.uniform(-0.18, 0.18);
    st.noise_sigma = cfg_.noise_level * (1.0 + k * s.uniform(-0.5, 0.5));
    return st;
  }

 private:
  std::uint64_t key_of(int class_id, int index) const {
    return static_cast<std::uint64_t>(class_id) * 0x100000 + static_cast<std::uint64_t>(index);
  }

  detail::Geometry geometry(int class_id, int index) const {
    RngStream g(seed_, detail::kGeometryKey, key_of(class_id, index));
    detail::Geometry geo;
    geo.cx = 0.5 + g.uniform(-0.10, 0.10);
    geo.cy = 0.5 + g.uniform(-0.10, 0.10);
    geo.size = g.uniform(0.30, 0.42);
    geo.thickness = geo.size * g.uniform(0.14, 0.20);
    return geo;
  }

  /// Binary coverage of the class shape at a normalized point.
  static double shape_mask(int class_id, const detail::Geometry& g, double u, double v) {
    const double dx = u - g.cx;
    const double dy = v - g.cy;
    const double r = std::sqrt(dx * dx + dy * dy);
    const double h = g.size * 0.5;
    const double t = g.thickness * 0.5;
    const double inv_sqrt2 = 0.7071067811865476;
    switch (class_id) {
      case 0:  // disk
        return r < h ? 1.0 : 0.0;
      case 1: {  // square frame
        const double m = std::max(std::abs(dx), std::abs(dy));
        return (m < h && m > h - 2.0 * t) ? 1.0 : 0.0;
      }
      case 2: {  // plus
        const double m = std::max(std::abs(dx), std::abs(dy));
        return (m < h && (std::abs(dx) < t || std::abs(dy) < t)) ? 1.0 : 0.0;
      }
      case 3: {  // single diagonal bar
        const double d = std::abs(dx - dy) * inv_sqrt2;
        return (d < t && r < h * 1.1) ? 1.0 : 0.0;
      }
      case 4:  // ring
        return (r < h && r > h - 2.0 * t) ? 1.0 : 0.0;
      case 5: {  // diagonal cross
        const double d1 = std::abs(dx - dy) * inv_sqrt2;
        const double d2 = std::abs(dx + dy) * inv_sqrt2;
        return ((d1 < t || d2 < t) && r < h * 1.1) ? 1.0 : 0.0;
      }
      case 6: {  // filled triangle, apex up
        if (dy < -h || dy > h) return 0.0;
        const double half_width = h * (dy + h) / (2.0 * h);
        return std::abs(dx) < half_width ? 1.0 : 0.0;
      }
      case 7: {  // two opposite filled quadrants
        const double m = std::max(std::abs(dx), std::abs(dy));
        return (m < h && ((dx > 0.0) != (dy > 0.0))) ? 1.0 : 0.0;
      }
      default:
        throw std::invalid_argument("dataset: no shape for class " + std::to_string(class_id));
    }
  }

  static void apply_hue_brightness(Tensor& img, double hue, double brightness) {
    const double c = std::cos(hue), s = std::sin(hue);
    const double oc = (1.0 - c) / 3.0;
    const double sq = 0.5773502691896258 * s;  // s / sqrt(3)
    const double m[3][3] = {{c + oc, oc - sq, oc + sq},
                            {oc + sq, c + oc, oc - sq},
                            {oc - sq, oc + sq, c + oc}};
    const int R = img.dim(1);
    const std::int64_t plane = static_cast<std::int64_t>(R) * R;
    for (std::int64_t p = 0; p < plane; ++p) {
      const double in[3] = {img.data[static_cast<std::size_t>(p)],
                            img.data[static_cast<std::size_t>(plane + p)],
                            img.data[static_cast<std::size_t>(2 * plane + p)]};
      for (int ch = 0; ch < 3; ++ch) {
        const double out = m[ch][0] * in[0] + m[ch][1] * in[1] + m[ch][2] * in[2];
        img.data[static_cast<std::size_t>(ch * plane + p)] = static_cast<float>(brightness * out);
      }
    }
  }

  DatasetConfig cfg_;
  std::uint64_t seed_;
};

struct SplitIndices {
  std::vector<int> train;
  std::vector<int> val;
};

/// Deterministic stratified split over the given domains: within every
/// (domain, class) cell the items are shuffled by a stream keyed on the
/// split seed and the tail fraction goes to validation. Membership is a
/// pure function of (dataset, domains, val_fraction, seed).
inline SplitIndices split_train_val(const SyntheticDomainDataset& data,
                                   const std::vector<int>& domains, double val_fraction,
                                   std::uint64_t seed) {
  if (domains.empty()) throw std::invalid_argument("split: need at least one domain");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) {
    throw std::invalid_argument("split: val_fraction must be in [0, 1)");
  }
  const auto& cfg = data.config();
  std::vector<char> seen(static_cast<std::size_t>(cfg.num_domains), 0);
  for (int d : domains) {
    if (d < 0 || d >= cfg.num_domains) {
      throw std::invalid_argument("split: domain " + std::to_string(d) + " outside 0.." +
                                  std::to_string(cfg.num_domains - 1));
    }
    if (seen[static_cast<std::size_t>(d)]) {
      throw std::invalid_argument("split: domain " + std::to_string(d) + " listed twice");
    }
    seen[static_cast<std::size_t>(d)] = 1;
  }

  SplitIndices out;
  for (int d : domains) {
    for (int c = 0; c < cfg.num_classes; ++c) {
      std::vector<int> cell;
      cell.reserve(static_cast<std::size_t>(cfg.images_per_class_per_domain));
      for (int i = 0; i < cfg.images_per_class_per_domain; ++i) {
        cell.push_back(data.flat_index({c, d, i}));
      }
      RngStream s(seed, detail::kSplitKey, static_cast<std::uint64_t>(d),
                  static_cast<std::uint64_t>(c));
      s.shuffle(cell);
      const int val_n = static_cast<int>(std::floor(val_fraction * cell.size() + 0.5));
      for (std::size_t i = 0; i < cell.size(); ++i) {
        if (static_cast<int>(i) < val_n) {
          out.val.push_back(cell[i]);
        } else {
          out.train.push_back(cell[i]);
        }
      }
    }
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.val.begin(), out.val.end());
  return out;
}

/// One-hot rows for a batch of items.
inline Tensor one_hot_labels(const SyntheticDomainDataset& data, const std::vector<int>& indices) {
  const int K = data.config().num_classes;
  Tensor labels({static_cast<int>(indices.size()), K});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    labels.at2(static_cast<int>(i), data.item(indices[i]).class_id) = 1.0f;
  }
  return labels;
}

/// Stack renderings of the given items at one resolution into [N, 3, R, R].
inline Tensor render_batch(const SyntheticDomainDataset& data, const std::vector<int>& indices,
                           int resolution) {
  if (indices.empty()) throw std::invalid_argument("render_batch: empty index list");
  const int R = resolution;
  Tensor batch({static_cast<int>(indices.size()), 3, R, R});
  const std::int64_t per = 3LL * R * R;
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Tensor img = data.render(indices[i], R);
    std::copy(img.data.begin(), img.data.end(), batch.data.begin() + static_cast<std::int64_t>(i) * per);
  }
  return batch;
}

}  // namespace flatland
