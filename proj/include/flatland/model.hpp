#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "flatland/ops.hpp"
#include "flatland/rng.hpp"
#include "flatland/shakedrop.hpp"
#include "flatland/tape.hpp"
#include "flatland/tensor.hpp"

namespace flatland {

inline int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

/// Architecture description. Channel counts grow linearly across the whole
/// depth of the network: block k of N ends at roughly
/// base_channels + k * total_channel_add / N channels, scaled by
/// widen_factor. The first block of every stage after the first halves the
/// spatial resolution.
struct PyramidSpec {
  int input_resolution = 16;
  int stem_downsample_factor = 1;
  int base_channels = 8;
  int total_channel_add = 16;
  int num_stages = 3;
  int blocks_per_stage = 2;
  int bottleneck_ratio = 4;
  double widen_factor = 1.0;

  int total_blocks() const { return num_stages * blocks_per_stage; }
  int interior_resolution() const { return input_resolution / stem_downsample_factor; }

  void validate() const {
    if (input_resolution < 1) throw std::invalid_argument("pyramid: input_resolution must be >= 1");
    if (stem_downsample_factor != 1 && stem_downsample_factor != 2 && stem_downsample_factor != 4) {
      throw std::invalid_argument("pyramid: stem_downsample_factor must be 1, 2, or 4");
    }
    if (input_resolution % stem_downsample_factor != 0) {
      throw std::invalid_argument("pyramid: input_resolution must be divisible by the stem factor");
    }
    if (base_channels < 1) throw std::invalid_argument("pyramid: base_channels must be >= 1");
    if (total_channel_add < 0) throw std::invalid_argument("pyramid: total_channel_add must be >= 0");
    if (num_stages < 1) throw std::invalid_argument("pyramid: num_stages must be >= 1");
    if (blocks_per_stage < 1) throw std::invalid_argument("pyramid: blocks_per_stage must be >= 1");
    if (bottleneck_ratio < 1) throw std::invalid_argument("pyramid: bottleneck_ratio must be >= 1");
    if (!(widen_factor > 0.0)) throw std::invalid_argument("pyramid: widen_factor must be positive");
    int r = interior_resolution();
    for (int s = 1; s < num_stages; ++s) {
      if (r % 2 != 0) {
        throw std::invalid_argument("pyramid: interior resolution " +
                                    std::to_string(interior_resolution()) +
                                    " cannot be halved " + std::to_string(num_stages - 1) +
                                    " times");
      }
      r /= 2;
    }
  }
};

/// Output channels after block k (1-based). The base schedule is rounded
/// to integers first and widen_factor scales the integer counts.
inline int channel_schedule(const PyramidSpec& spec, int k) {
  spec.validate();
  if (k < 1 || k > spec.total_blocks()) {
    throw std::invalid_argument("channel_schedule: block index " + std::to_string(k) +
                                " outside 1.." + std::to_string(spec.total_blocks()));
  }
  const double step = static_cast<double>(spec.total_channel_add) / spec.total_blocks();
  const int base = round_half_up(spec.base_channels + k * step);
  return round_half_up(spec.widen_factor * base);
}

template <typename T>
struct Conv2dLayerT {
  ParameterT<T> w;
  std::optional<ParameterT<T>> b;
  int stride = 1;
  int pad = 0;
};

template <typename T>
struct BatchNorm2dLayerT {
  ParameterT<T> gamma;
  ParameterT<T> beta;
  TensorT<T> running_mean;
  TensorT<T> running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

template <typename T>
struct DenseLayerT {
  ParameterT<T> w;
  ParameterT<T> b;
};

template <typename T>
struct BottleneckBlockT {
  int index = 0;  // 1-based over the whole network
  int in_channels = 0;
  int out_channels = 0;
  int width = 0;
  int stride = 1;
  BatchNorm2dLayerT<T> bn1, bn2, bn3, bn4;
  Conv2dLayerT<T> conv1, conv2, conv3;
};

template <typename T>
class WidePyramidNetT;

template <typename T>
WidePyramidNetT<T> fold_batchnorm(const WidePyramidNetT<T>& m);

/// Pyramidal bottleneck network. Every residual block runs
/// bn - conv1x1 - bn - relu - conv3x3 - bn - relu - conv1x1 - bn
/// on the main branch and joins it with the shortcut through the
/// stochastic residual gate (its expectation at inference). The stem is a
/// single 3x3 convolution whose stride adapts to the input resolution, so
/// one parameter set serves every resolution the run trains at.
template <typename T>
class WidePyramidNetT {
 public:
  struct StepContext {
    std::uint64_t seed = 0;
    std::int64_t step = 0;
  };

  WidePyramidNetT(const PyramidSpec& spec, int num_classes, const ShakeDropConfig& sd,
                  std::uint64_t init_seed)
      : spec_(spec), num_classes_(num_classes), shakedrop_(sd), init_seed_(init_seed) {
    spec_.validate();
    shakedrop_.validate();
    if (num_classes_ < 2) throw std::invalid_argument("model: num_classes must be >= 2");
    build();
  }

  const PyramidSpec& spec() const { return spec_; }
  int num_classes() const { return num_classes_; }
  const ShakeDropConfig& shakedrop() const { return shakedrop_; }
  std::uint64_t init_seed() const { return init_seed_; }
  int interior_resolution() const { return spec_.interior_resolution(); }
  bool is_folded() const { return folded_; }
  bool is_training() const { return training_; }

  void set_train(bool on) {
    if (on && folded_) throw std::runtime_error("model: a folded model cannot enter train mode");
    training_ = on;
  }

  /// Record a forward pass onto the tape and return the logits node.
  /// Train mode draws fresh residual-gate samples keyed by (seed, block,
  /// step); eval mode is fully deterministic.
  int forward(TapeT<T>& tape, int input_id, const StepContext& ctx = {}) {
    return forward_impl(tape, input_id, training_, ctx);
  }

  /// Deterministic eval-mode forward on a private tape.
  TensorT<T> predict_logits(const TensorT<T>& images) {
    TapeT<T> tape;
    const int in = tape.constant(images);
    const int out = forward_impl(tape, in, false, {});
    return tape.value(out);
  }

  std::vector<ParameterT<T>*> parameters() {
    std::vector<ParameterT<T>*> out;
    auto conv = [&](Conv2dLayerT<T>& c) {
      out.push_back(&c.w);
      if (c.b) out.push_back(&*c.b);
    };
    auto bn = [&](BatchNorm2dLayerT<T>& l) {
      if (folded_) return;
      out.push_back(&l.gamma);
      out.push_back(&l.beta);
    };
    conv(stem_conv_);
    bn(stem_bn_);
    for (auto& blk : blocks_) {
      bn(blk.bn1);
      conv(blk.conv1);
      bn(blk.bn2);
      conv(blk.conv2);
      bn(blk.bn3);
      conv(blk.conv3);
      bn(blk.bn4);
    }
    bn(head_bn_);
    out.push_back(&fc_.w);
    out.push_back(&fc_.b);
    return out;
  }

  /// Non-trainable state that still belongs in checkpoints and teacher
  /// averaging: the batchnorm running statistics.
  std::vector<std::pair<std::string, TensorT<T>*>> buffers() {
    std::vector<std::pair<std::string, TensorT<T>*>> out;
    if (folded_) return out;
    auto bn = [&](BatchNorm2dLayerT<T>& l, const std::string& name) {
      out.emplace_back(name + ".running_mean", &l.running_mean);
      out.emplace_back(name + ".running_var", &l.running_var);
    };
    bn(stem_bn_, "stem.bn");
    for (auto& blk : blocks_) {
      const std::string b = block_name(blk.index);
      bn(blk.bn1, b + ".bn1");
      bn(blk.bn2, b + ".bn2");
      bn(blk.bn3, b + ".bn3");
      bn(blk.bn4, b + ".bn4");
    }
    bn(head_bn_, "head.bn");
    return out;
  }

  const std::vector<BottleneckBlockT<T>>& blocks() const { return blocks_; }

  friend WidePyramidNetT fold_batchnorm<T>(const WidePyramidNetT& m);

 private:
  static std::string block_name(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "block%02d", index);
    return buf;
  }

  void build() {
    RngStream init(init_seed_, 0x1217u);
    std::uint64_t pidx = 0;
    auto conv_param = [&](const std::string& id, int co, int ci, int kh, int kw) {
      TensorT<T> w({co, ci, kh, kw});
      const double std = std::sqrt(2.0 / (static_cast<double>(kh) * kw * co));
      RngStream s = init.child(0xC0, pidx++);
      for (auto& v : w.data) v = static_cast<T>(std * s.normal());
      return ParameterT<T>(id, std::move(w));
    };
    auto bn_init = [&](BatchNorm2dLayerT<T>& l, const std::string& name, int c) {
      l.gamma = ParameterT<T>(name + ".gamma", TensorT<T>({c}, T(1)));
      l.beta = ParameterT<T>(name + ".beta", TensorT<T>({c}, T(0)));
      l.running_mean = TensorT<T>({c}, T(0));
      l.running_var = TensorT<T>({c}, T(1));
    };

    const int stem_ch = round_half_up(spec_.widen_factor * spec_.base_channels);
    stem_conv_.w = conv_param("stem.conv.w", stem_ch, 3, 3, 3);
    stem_conv_.pad = 1;
    bn_init(stem_bn_, "stem.bn", stem_ch);

    int cin = stem_ch;
    const int total = spec_.total_blocks();
    blocks_.clear();
    blocks_.reserve(static_cast<std::size_t>(total));
    for (int k = 1; k <= total; ++k) {
      BottleneckBlockT<T> blk;
      blk.index = k;
      blk.in_channels = cin;
      blk.out_channels = channel_schedule(spec_, k);
      blk.width = std::max(1, round_half_up(static_cast<double>(blk.out_channels) / spec_.bottleneck_ratio));
      const int stage = (k - 1) / spec_.blocks_per_stage;        // 0-based
      const bool first_in_stage = (k - 1) % spec_.blocks_per_stage == 0;
      blk.stride = (stage > 0 && first_in_stage) ? 2 : 1;
      const std::string name = block_name(k);
      bn_init(blk.bn1, name + ".bn1", cin);
      blk.conv1.w = conv_param(name + ".conv1.w", blk.width, cin, 1, 1);
      bn_init(blk.bn2, name + ".bn2", blk.width);
      blk.conv2.w = conv_param(name + ".conv2.w", blk.width, blk.width, 3, 3);
      blk.conv2.stride = blk.stride;
      blk.conv2.pad = 1;
      bn_init(blk.bn3, name + ".bn3", blk.width);
      blk.conv3.w = conv_param(name + ".conv3.w", blk.out_channels, blk.width, 1, 1);
      bn_init(blk.bn4, name + ".bn4", blk.out_channels);
      cin = blk.out_channels;
      blocks_.push_back(std::move(blk));
    }

    bn_init(head_bn_, "head.bn", cin);
    TensorT<T> fw({num_classes_, cin});
    const double std = 1.0 / std::sqrt(static_cast<double>(cin));
    RngStream s = init.child(0xFC, pidx++);
    for (auto& v : fw.data) v = static_cast<T>(std * s.normal());
    fc_.w = ParameterT<T>("head.fc.w", std::move(fw));
    fc_.b = ParameterT<T>("head.fc.b", TensorT<T>({num_classes_}, T(0)));
  }

  int bn_apply(TapeT<T>& t, int x, BatchNorm2dLayerT<T>& l, bool train) {
    const int g = t.leaf(l.gamma);
    const int b = t.leaf(l.beta);
    return batchnorm2d(t, x, g, b, &l.running_mean, &l.running_var, train, l.momentum, l.eps);
  }

  int conv_apply(TapeT<T>& t, int x, Conv2dLayerT<T>& c) {
    const int w = t.leaf(c.w);
    if (c.b) return conv2d(t, x, w, t.leaf(*c.b), c.stride, c.pad);
    return conv2d(t, x, w, c.stride, c.pad);
  }

  int forward_impl(TapeT<T>& tape, int input_id, bool train, const StepContext& ctx) {
    if (train && folded_) throw std::runtime_error("model: folded models run inference only");
    const TensorT<T>& in = tape.value(input_id);
    require_ndim(in, 4, "model input");
    if (in.dim(1) != 3) {
      throw std::invalid_argument("model: expected 3 input channels, got shape " + shape_str(in.shape));
    }
    if (in.dim(2) != in.dim(3)) {
      throw std::invalid_argument("model: input must be square, got shape " + shape_str(in.shape));
    }
    const int res = in.dim(2);
    const int interior = interior_resolution();
    if (res % interior != 0) {
      throw std::invalid_argument("model: input resolution " + std::to_string(res) +
                                  " is not a multiple of the interior resolution " +
                                  std::to_string(interior));
    }
    const int factor = res / interior;
    if (factor != 1 && factor != 2 && factor != 4) {
      throw std::invalid_argument("model: input resolution " + std::to_string(res) +
                                  " must be 1x, 2x, or 4x the interior resolution " +
                                  std::to_string(interior));
    }

    // stem, with stride chosen at run time from the input resolution
    stem_conv_.stride = factor >= 2 ? 2 : 1;
    int x = conv_apply(tape, input_id, stem_conv_);
    if (!folded_) x = bn_apply(tape, x, stem_bn_, train);
    x = relu(tape, x);
    if (factor == 4) x = avg_pool2x2(tape, x);

    const int total = spec_.total_blocks();
    for (auto& blk : blocks_) {
      int shortcut = x;
      if (blk.stride == 2) shortcut = avg_pool2x2(tape, shortcut);
      if (blk.out_channels > blk.in_channels) {
        shortcut = pad_channels(tape, shortcut, blk.out_channels);
      }

      int m = x;
      if (!folded_) m = bn_apply(tape, m, blk.bn1, train);
      m = conv_apply(tape, m, blk.conv1);
      if (!folded_) m = bn_apply(tape, m, blk.bn2, train);
      m = relu(tape, m);
      m = conv_apply(tape, m, blk.conv2);
      if (!folded_) m = bn_apply(tape, m, blk.bn3, train);
      m = relu(tape, m);
      m = conv_apply(tape, m, blk.conv3);
      if (!folded_) m = bn_apply(tape, m, blk.bn4, train);

      const double p = shakedrop_.gate_prob_at(blk.index, total);
      if (train) {
        RngStream fwd(ctx.seed, 0x5DF0u, static_cast<std::uint64_t>(blk.index),
                      static_cast<std::uint64_t>(ctx.step));
        RngStream bwd(ctx.seed, 0x5DB1u, static_cast<std::uint64_t>(blk.index),
                      static_cast<std::uint64_t>(ctx.step));
        x = shakedrop_join(tape, shortcut, m, shakedrop_, p, fwd, bwd);
      } else {
        x = shakedrop_join_eval(tape, shortcut, m, shakedrop_.expected_coeff(p));
      }
    }

    if (!folded_) x = bn_apply(tape, x, head_bn_, train);
    x = global_avg_pool(tape, x);
    return dense(tape, x, tape.leaf(fc_.w), tape.leaf(fc_.b));
  }

  PyramidSpec spec_;
  int num_classes_ = 0;
  ShakeDropConfig shakedrop_;
  std::uint64_t init_seed_ = 0;
  bool training_ = true;
  bool folded_ = false;

  Conv2dLayerT<T> stem_conv_;
  BatchNorm2dLayerT<T> stem_bn_;
  std::vector<BottleneckBlockT<T>> blocks_;
  BatchNorm2dLayerT<T> head_bn_;
  DenseLayerT<T> fc_;
};

using WidePyramidNet = WidePyramidNetT<float>;

namespace detail {

/// Per-channel affine equivalent of a frozen batchnorm: y = a * x + c.
template <typename T>
void bn_affine(const BatchNorm2dLayerT<T>& l, std::vector<double>& a, std::vector<double>& c) {
  const std::size_t n = l.gamma.value.data.size();
  a.resize(n);
  c.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double g = static_cast<double>(l.gamma.value.data[i]);
    const double b = static_cast<double>(l.beta.value.data[i]);
    const double mean = static_cast<double>(l.running_mean.data[i]);
    const double var = static_cast<double>(l.running_var.data[i]);
    a[i] = g / std::sqrt(var + l.eps);
    c[i] = b - a[i] * mean;
  }
}

}  // namespace detail

/// Re-parameterize a trained model for inference: every batchnorm is
/// absorbed into the adjacent convolution (or the classifier), leaving
/// three biased convolutions and two relus per block. The input model is
/// untouched; folding an already folded model returns a plain copy.
template <typename T>
WidePyramidNetT<T> fold_batchnorm(const WidePyramidNetT<T>& m) {
  WidePyramidNetT<T> out = m;
  if (out.folded_) return out;
  if (m.training_) {
    throw std::runtime_error("fold_batchnorm: model must be in eval mode with settled running stats");
  }

  auto scale_rows = [](ParameterT<T>& w, const std::vector<double>& a) {
    // multiply output-channel slice o by a[o]
    const int co = w.value.dim(0);
    const std::int64_t per = w.value.numel() / co;
    for (int o = 0; o < co; ++o) {
      T* row = &w.value.data[static_cast<std::size_t>(o * per)];
      for (std::int64_t i = 0; i < per; ++i) {
        row[i] = static_cast<T>(a[static_cast<std::size_t>(o)] * static_cast<double>(row[i]));
      }
    }
  };
  auto give_bias = [](Conv2dLayerT<T>& conv, const std::string& id, const std::vector<double>& c) {
    TensorT<T> b({conv.w.value.dim(0)});
    for (std::size_t i = 0; i < b.data.size(); ++i) b.data[i] = static_cast<T>(c[i]);
    conv.b = ParameterT<T>(id, std::move(b));
  };

  std::vector<double> a, c;

  // stem: conv then bn becomes conv with bias
  detail::bn_affine(out.stem_bn_, a, c);
  scale_rows(out.stem_conv_.w, a);
  give_bias(out.stem_conv_, "stem.conv.b", c);

  for (auto& blk : out.blocks_) {
    const std::string name = WidePyramidNetT<T>::block_name(blk.index);

    // bn1 feeds the 1x1 conv1, so it folds through the input side;
    // bn2 follows conv1 and folds onto the output side
    std::vector<double> a1, c1, a2, c2;
    detail::bn_affine(blk.bn1, a1, c1);
    detail::bn_affine(blk.bn2, a2, c2);
    const int w1_out = blk.conv1.w.value.dim(0);
    const int w1_in = blk.conv1.w.value.dim(1);
    std::vector<double> bias1(static_cast<std::size_t>(w1_out), 0.0);
    for (int o = 0; o < w1_out; ++o) {
      double acc = 0.0;
      for (int i = 0; i < w1_in; ++i) {
        T& wv = blk.conv1.w.value.data[static_cast<std::size_t>(o * w1_in + i)];
        const double folded = a2[static_cast<std::size_t>(o)] * static_cast<double>(wv) *
                              a1[static_cast<std::size_t>(i)];
        acc += a2[static_cast<std::size_t>(o)] * static_cast<double>(wv) * c1[static_cast<std::size_t>(i)];
        wv = static_cast<T>(folded);
      }
      bias1[static_cast<std::size_t>(o)] = acc + c2[static_cast<std::size_t>(o)];
    }
    give_bias(blk.conv1, name + ".conv1.b", bias1);

    detail::bn_affine(blk.bn3, a, c);
    scale_rows(blk.conv2.w, a);
    give_bias(blk.conv2, name + ".conv2.b", c);

    detail::bn_affine(blk.bn4, a, c);
    scale_rows(blk.conv3.w, a);
    give_bias(blk.conv3, name + ".conv3.b", c);
  }

  // head: the bn ahead of pooling is per-channel affine, pooling is linear,
  // so it slides through into the classifier weights
  detail::bn_affine(out.head_bn_, a, c);
  const int K = out.fc_.w.value.dim(0);
  const int C = out.fc_.w.value.dim(1);
  for (int k = 0; k < K; ++k) {
    double shift = 0.0;
    for (int ch = 0; ch < C; ++ch) {
      T& wv = out.fc_.w.value.data[static_cast<std::size_t>(k * C + ch)];
      shift += static_cast<double>(wv) * c[static_cast<std::size_t>(ch)];
      wv = static_cast<T>(static_cast<double>(wv) * a[static_cast<std::size_t>(ch)]);
    }
    out.fc_.b.value.data[static_cast<std::size_t>(k)] =
        static_cast<T>(static_cast<double>(out.fc_.b.value.data[static_cast<std::size_t>(k)]) + shift);
  }

  out.folded_ = true;
  out.training_ = false;
  return out;
}

}  // namespace flatland
