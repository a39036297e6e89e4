#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "flatland/tape.hpp"
#include "flatland/tensor.hpp"

namespace flatland {

// ---------------------------------------------------------------------------
// elementwise and structural ops
// ---------------------------------------------------------------------------

template <typename T>
int relu(TapeT<T>& t, int x) {
  typename TapeT<T>::Node n;
  n.kind = OpKind::kRelu;
  n.inputs = {x};
  const TensorT<T>& xin = t.value(x);
  n.out = xin;
  for (auto& v : n.out.data) v = v > T(0) ? v : T(0);
  n.backward = [](TapeT<T>& tp, int id) {
    auto& self = tp.node(id);
    const TensorT<T>& xin2 = tp.value(self.inputs[0]);
    auto& gx = tp.node(self.inputs[0]).grad;
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (xin2.data[i] > T(0)) gx[i] += self.grad[i];
    }
  };
  return t.push(std::move(n));
}

template <typename T>
int add(TapeT<T>& t, int a, int b) {
  const TensorT<T>& av = t.value(a);
  const TensorT<T>& bv = t.value(b);
  if (!av.same_shape(bv)) {
    throw std::invalid_argument("add: shape mismatch " + shape_str(av.shape) + " vs " +
                                shape_str(bv.shape));
  }
  typename TapeT<T>::Node n;
  n.kind = OpKind::kAdd;
  n.inputs = {a, b};
  n.out = av;
  for (std::size_t i = 0; i < n.out.data.size(); ++i) n.out.data[i] = av.data[i] + bv.data[i];
  n.backward = [](TapeT<T>& tp, int id) {
    auto& self = tp.node(id);
    auto& ga = tp.node(self.inputs[0]).grad;
    auto& gb = tp.node(self.inputs[1]).grad;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      ga[i] += self.grad[i];
      gb[i] += self.grad[i];
    }
  };
  return t.push(std::move(n));
}

template <typename T>
int scalar_mul(TapeT<T>& t, int x, double c) {
  typename TapeT<T>::Node n;
  n.kind = OpKind::kScalarMul;
  n.inputs = {x};
  const TensorT<T>& xin = t.value(x);
  n.out = xin;
  for (std::size_t i = 0; i < n.out.data.size(); ++i) {
    n.out.data[i] = static_cast<T>(c * static_cast<double>(xin.data[i]));
  }
  n.backward = [c](TapeT<T>& tp, int id) {
    auto& self = tp.node(id);
    auto& gx = tp.node(self.inputs[0]).grad;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += c * self.grad[i];
  };
  return t.push(std::move(n));
}

/// Widen [N, C, H, W] to [N, out_channels, H, W] with zero-filled trailing
/// channels. This is the parameter-free shortcut used when a residual block
/// grows its channel count.
template <typename T>
int pad_channels(TapeT<T>& t, int x, int out_channels) {
  const TensorT<T>& xin = t.value(x);
  require_ndim(xin, 4, "pad_channels input");
  const int cin = xin.dim(1);
  if (out_channels < cin) {
    throw std::invalid_argument("pad_channels: target channels " + std::to_string(out_channels) +
                                " < input channels " + std::to_string(cin));
  }
  const int N = xin.dim(0), H = xin.dim(2), W = xin.dim(3);
  typename TapeT<T>::Node n;
  n.kind = OpKind::kPadChannels;
  n.inputs = {x};
  n.out = TensorT<T>({N, out_channels, H, W});
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  for (int i = 0; i < N; ++i) {
    for (int c = 0; c < cin; ++c) {
      const T* src = &xin.data[static_cast<std::size_t>((static_cast<std::int64_t>(i) * cin + c) * plane)];
      T* dst = &n.out.data[static_cast<std::size_t>((static_cast<std::int64_t>(i) * out_channels + c) * plane)];
      std::copy(src, src + plane, dst);
    }
  }
  n.backward = [cin, out_channels, plane](TapeT<T>& tp, int id) {
    auto& self = tp.node(id);
    auto& gx = tp.node(self.inputs[0]).grad;
    const int N2 = self.out.dim(0);
    for (int i = 0; i < N2; ++i) {
      for (int c = 0; c < cin; ++c) {
        const double* src = &self.grad[static_cast<std::size_t>((static_cast<std::int64_t>(i) * out_channels + c) * plane)];
        double* dst = &gx[static_cast<std::size_t>((static_cast<std::int64_t>(i) * cin + c) * plane)];
        for (std::int64_t k = 0; k < plane; ++k) dst[k] += src[k];
      }
    }
  };
  return t.push(std::move(n));
}

/// 2x2 average pooling with stride 2. Requires even spatial dims.
template <typename T>
int avg_pool2x2(TapeT<T>& t, int x) {
  const TensorT<T>& xin = t.value(x);
  require_ndim(xin, 4, "avg_pool2x2 input");
  const int N = xin.dim(0), C = xin.dim(1), H = xin.dim(2), W = xin.dim(3);
  if (H % 2 != 0 || W % 2 != 0) {
    throw std::invalid_argument("avg_pool2x2: spatial dims must be even, got " + shape_str(xin.shape));
  }
  typename TapeT<T>::Node n;
  n.kind = OpKind::kAvgPool2x2;
  n.inputs = {x};
  n.out = TensorT<T>({N, C, H / 2, W / 2});
  for (int i = 0; i < N; ++i) {
    for (int c = 0; c < C; ++c) {
      for (int h = 0; h < H / 2; ++h) {
        for (int w = 0; w < W / 2; ++w) {
          const double s = static_cast<double>(xin.at4(i, c, 2 * h, 2 * w)) +
                           static_cast<double>(xin.at4(i, c, 2 * h, 2 * w + 1)) +
                           static_cast<double>(xin.at4(i, c, 2 * h + 1, 2 * w)) +
                           static_cast<double>(xin.at4(i, c, 2 * h + 1, 2 * w + 1));
          n.out.at4(i, c, h, w) = static_cast<T>(s * 0.25);
        }
      }
    }
  }
  n.backward = [N, C, H, W](TapeT<T>& tp, int id) {
    auto& self = tp.node(id);
    auto& gx = tp.node(self.inputs[0]).grad;
    const int Ho = H / 2, Wo = W / 2;
    for (int i = 0; i < N; ++i) {
      for (int c = 0; c < C; ++c) {
        for (int h = 0; h < Ho; ++h) {
          for (int w = 0; w < Wo; ++w) {
            const double g = 0.25 * self.grad[static_cast<std::size_t>(((static_cast<std::int64_t>(i) * C + c) * Ho + h) * Wo + w)];
            const std::int64_t base = ((static_cast<std::int64_t>(i) * C + c) * H + 2 * h) * W + 2 * w;
            gx[static_cast<std::size_t>(base)] += g;
            gx[static_cast<std::size_t>(base + 1)] += g;
            gx[static_cast<std::size_t>(base + W)] += g;
            gx[static_cast<std::size_t>(base + W + 1)] += g;
          }
        }
      }
    }
  };
  return t.push(std::move(n));
}

template <typename T>
int global_avg_pool(TapeT<T>& t, int x) {
  const TensorT<T>& xin = t.value(x);
  require_ndim(xin, 4, "global_avg_pool input");
  const int N = xin.dim(0), C = xin.dim(1), H = xin.dim(2), W = xin.dim(3);
  typename TapeT<T>::Node n;
  n.kind = OpKind::kGlobalAvgPool;
  n.inputs = {x};
  n.out = TensorT<T>({N, C});
  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  for (int i = 0; i < N; ++i) {
    for (int c = 0; c < C; ++c) {
      const T* src = &xin.data[static_cast<std::size_t>((static_cast<std::int64_t>(i) * C + c) * plane)];
      double s = 0.0;
      for (std::int64_t k = 0; k < plane; ++k) s += static_cast<double>(src[k]);
      n.out.at2(i, c) = static_cast<T>(s / static_cast<double>(plane));
    }
  }
  n.backward = [N, C, plane](TapeT<T>& tp, int id) {
    auto& self = tp.node(id);
    auto& gx = tp.node(self.inputs[0]).grad;
    for (int i = 0; i < N; ++i) {
      for (int c = 0; c < C; ++c) {
        const double g = self.grad[static_cast<std::size_t>(static_cast<std::int64_t>(i) * C + c)] /
                         static_cast<double>(plane);
        double* dst = &gx[static_cast<std::size_t>((static_cast<std::int64_t>(i) * C + c) * plane)];
        for (std::int64_t k = 0; k < plane; ++k) dst[k] += g;
      }
    }
  };
  return t.push(std::move(n));
}

// ---------------------------------------------------------------------------
// dense and convolution
// ---------------------------------------------------------------------------

/// Fully connected layer: x [N, F] times w [K, F] plus b [K] -> [N, K].
template <typename T>
int dense(TapeT<T>& t, int x, int w, int b) {
  const TensorT<T>& xv = t.value(x);
  const TensorT<T>& wv = t.value(w);
  const TensorT<T>& bv = t.value(b);
  require_ndim(xv, 2, "dense input");
  require_ndim(wv, 2, "dense weight");
  require_ndim(bv, 1, "dense bias");
  if (xv.dim(1) != wv.dim(1)) {
    throw std::invalid_argument("dense: input features " + shape_str(xv.shape) +
                                " do not match weight " + shape_str(wv.shape));
  }
  if (bv.dim(0) != wv.dim(0)) {
    throw std::invalid_argument("dense: bias " + shape_str(bv.shape) + " does not match weight " +
                                shape_str(wv.shape));
  }
  const int N = xv.dim(0), F = xv.dim(1), K = wv.dim(0);
  typename TapeT<T>::Node n;
  n.kind = OpKind::kDense;
  n.inputs = {x, w, b};
  n.out = TensorT<T>({N, K});
  for (int i = 0; i < N; ++i) {
    const T* xr = &xv.data[static_cast<std::size_t>(static_cast<std::int64_t>(i) * F)];
    for (int k = 0; k < K; ++k) {
      const T* wr = &wv.data[static_cast<std::size_t>(static_cast<std::int64_t>(k) * F)];
      double acc = static_cast<double>(bv.data[static_cast<std::size_t>(k)]);
      for (int f = 0; f < F; ++f) acc += static_cast<double>(xr[f]) * static_cast<double>(wr[f]);
      n.out.at2(i, k) = static_cast<T>(acc);
    }
  }
  n.backward = [N, F, K](TapeT<T>& tp, int id) {
    auto& self = tp.node(id);
    const TensorT<T>& xv2 = tp.value(self.inputs[0]);
    const TensorT<T>& wv2 = tp.value(self.inputs[1]);
    auto& gx = tp.node(self.inputs[0]).grad;
    auto& gw = tp.node(self.inputs[1]).grad;
    auto& gb = tp.node(self.inputs[2]).grad;
    for (int i = 0; i < N; ++i) {
      const double* gr = &self.grad[static_cast<std::size_t>(static_cast<std::int64_t>(i) * K)];
      for (int k = 0; k < K; ++k) {
        const double g = gr[k];
        if (g == 0.0) continue;
        gb[static_cast<std::size_t>(k)] += g;
        const T* wr = &wv2.data[static_cast<std::size_t>(static_cast<std::int64_t>(k) * F)];
        const T* xr = &xv2.data[static_cast<std::size_t>(static_cast<std::int64_t>(i) * F)];
        double* gxr = &gx[static_cast<std::size_t>(static_cast<std::int64_t>(i) * F)];
        double* gwr = &gw[static_cast<std::size_t>(static_cast<std::int64_t>(k) * F)];
        for (int f = 0; f < F; ++f) {
          gxr[f] += g * static_cast<double>(wr[f]);
          gwr[f] += g * static_cast<double>(xr[f]);
        }
      }
    }
  };
  return t.push(std::move(n));
}

namespace detail {

inline int conv_out_dim(int in, int k, int stride, int pad, const char* what) {
  const int span = in + 2 * pad - k;
  if (span < 0) {
    throw std::invalid_argument(std::string(what) + ": kernel size " + std::to_string(k) +
                                " exceeds padded input extent " + std::to_string(in + 2 * pad));
  }
  return span / stride + 1;
}

}  // namespace detail

/// 2-d convolution with zero padding. x [N, Ci, H, W], w [Co, Ci, kh, kw].
/// Stride is 1 or 2. Pass bias = -1 for a bias-free convolution.
template <typename T>
int conv2d(TapeT<T>& t, int x, int w, int bias, int stride, int pad) {
  if (stride != 1 && stride != 2) {
    throw std::invalid_argument("conv2d: stride must be 1 or 2, got " + std::to_string(stride));
  }
  if (pad < 0) throw std::invalid_argument("conv2d: padding must be >= 0");
  const TensorT<T>& xv = t.value(x);
  const TensorT<T>& wv = t.value(w);
  require_ndim(xv, 4, "conv2d input");
  require_ndim(wv, 4, "conv2d weight");
  if (xv.dim(1) != wv.dim(1)) {
    throw std::invalid_argument("conv2d: input channels " + shape_str(xv.shape) +
                                " do not match weight " + shape_str(wv.shape));
  }
  const int N = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const int Co = wv.dim(0), Kh = wv.dim(2), Kw = wv.dim(3);
  const int Ho = detail::conv_out_dim(H, Kh, stride, pad, "conv2d height");
  const int Wo = detail::conv_out_dim(W, Kw, stride, pad, "conv2d width");
  const bool has_bias = bias >= 0;
  if (has_bias) {
    const TensorT<T>& bv = t.value(bias);
    require_ndim(bv, 1, "conv2d bias");
    if (bv.dim(0) != Co) {
      throw std::invalid_argument("conv2d: bias " + shape_str(bv.shape) +
                                  " does not match weight " + shape_str(wv.shape));
    }
  }

  typename TapeT<T>::Node n;
  n.kind = OpKind::kConv2d;
  n.inputs = has_bias ? std::vector<int>{x, w, bias} : std::vector<int>{x, w};
  n.out = TensorT<T>({N, Co, Ho, Wo});

  const std::int64_t in_plane = static_cast<std::int64_t>(H) * W;
  const std::int64_t out_plane = static_cast<std::int64_t>(Ho) * Wo;
  for (int i = 0; i < N; ++i) {
    for (int co = 0; co < Co; ++co) {
      T* out_base = &n.out.data[static_cast<std::size_t>((static_cast<std::int64_t>(i) * Co + co) * out_plane)];
      if (has_bias) {
        const T bval = t.value(bias).data[static_cast<std::size_t>(co)];
        std::fill(out_base, out_base + out_plane, bval);
      }
      for (int ci = 0; ci < Ci; ++ci) {
        const T* x_base = &xv.data[static_cast<std::size_t>((static_cast<std::int64_t>(i) * Ci + ci) * in_plane)];
        const T* w_base = &wv.data[static_cast<std::size_t>(((static_cast<std::int64_t>(co) * Ci + ci) * Kh) * Kw)];
        for (int kh = 0; kh < Kh; ++kh) {
          for (int kw = 0; kw < Kw; ++kw) {
            const T wval = w_base[kh * Kw + kw];
            if (wval == T(0)) continue;
            for (int ho = 0; ho < Ho; ++ho) {
              const int ih = ho * stride + kh - pad;
              if (ih < 0 || ih >= H) continue;
              // clip the wo range so iw = wo*stride + kw - pad stays in bounds
              int wo_lo = 0;
              while (wo_lo < Wo && wo_lo * stride + kw - pad < 0) ++wo_lo;
              int wo_hi = Wo;
              while (wo_hi > wo_lo && (wo_hi - 1) * stride + kw - pad >= W) --wo_hi;
              const T* xr = x_base + static_cast<std::int64_t>(ih) * W + (kw - pad);
              T* orow = out_base + static_cast<std::int64_t>(ho) * Wo;
              if (stride == 1) {
                for (int wo = wo_lo; wo < wo_hi; ++wo) orow[wo] += wval * xr[wo];
              } else {
                for (int wo = wo_lo; wo < wo_hi; ++wo) orow[wo] += wval * xr[2 * wo];
              }
            }
          }
        }
      }
    }
  }

  n.backward = [N, Ci, H, W, Co, Kh, Kw, Ho, Wo, stride, pad, has_bias](TapeT<T>& tp, int id) {
    auto& self = tp.node(id);
    const TensorT<T>& xv2 = tp.value(self.inputs[0]);
    const TensorT<T>& wv2 = tp.value(self.inputs[1]);
    auto& gx = tp.node(self.inputs[0]).grad;
    auto& gw = tp.node(self.inputs[1]).grad;
    const std::int64_t in_plane2 = static_cast<std::int64_t>(H) * W;
    const std::int64_t out_plane2 = static_cast<std::int64_t>(Ho) * Wo;
    for (int i = 0; i < N; ++i) {
      for (int co = 0; co < Co; ++co) {
        const double* g_base = &self.grad[static_cast<std::size_t>((static_cast<std::int64_t>(i) * Co + co) * out_plane2)];
        if (has_bias) {
          auto& gb = tp.node(self.inputs[2]).grad;
          double s = 0.0;
          for (std::int64_t k = 0; k < out_plane2; ++k) s += g_base[k];
          gb[static_cast<std::size_t>(co)] += s;
        }
        for (int ci = 0; ci < Ci; ++ci) {
          const T* x_base = &xv2.data[static_cast<std::size_t>((static_cast<std::int64_t>(i) * Ci + ci) * in_plane2)];
          const T* w_base = &wv2.data[static_cast<std::size_t>(((static_cast<std::int64_t>(co) * Ci + ci) * Kh) * Kw)];
          double* gx_base = &gx[static_cast<std::size_t>((static_cast<std::int64_t>(i) * Ci + ci) * in_plane2)];
          double* gw_base = &gw[static_cast<std::size_t>(((static_cast<std::int64_t>(co) * Ci + ci) * Kh) * Kw)];
          for (int kh = 0; kh < Kh; ++kh) {
            for (int kw = 0; kw < Kw; ++kw) {
              const double wval = static_cast<double>(w_base[kh * Kw + kw]);
              double wacc = 0.0;
              for (int ho = 0; ho < Ho; ++ho) {
                const int ih = ho * stride + kh - pad;
                if (ih < 0 || ih >= H) continue;
                int wo_lo = 0;
                while (wo_lo < Wo && wo_lo * stride + kw - pad < 0) ++wo_lo;
                int wo_hi = Wo;
                while (wo_hi > wo_lo && (wo_hi - 1) * stride + kw - pad >= W) --wo_hi;
                const double* grow = g_base + static_cast<std::int64_t>(ho) * Wo;
                const T* xr = x_base + static_cast<std::int64_t>(ih) * W + (kw - pad);
                double* gxr = gx_base + static_cast<std::int64_t>(ih) * W + (kw - pad);
                if (stride == 1) {
                  for (int wo = wo_lo; wo < wo_hi; ++wo) {
                    const double g = grow[wo];
                    gxr[wo] += wval * g;
                    wacc += static_cast<double>(xr[wo]) * g;
                  }
                } else {
                  for (int wo = wo_lo; wo < wo_hi; ++wo) {
                    const double g = grow[wo];
                    gxr[2 * wo] += wval * g;
                    wacc += static_cast<double>(xr[2 * wo]) * g;
                  }
                }
              }
              gw_base[kh * Kw + kw] += wacc;
            }
          }
        }
      }
    }
  };
  return t.push(std::move(n));
}

template <typename T>
int conv2d(TapeT<T>& t, int x, int w, int stride, int pad) {
  return conv2d(t, x, w, -1, stride, pad);
}

// ---------------------------------------------------------------------------
// batch normalization
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
struct BnSaved {
  std::vector<double> invstd;
  TensorT<T> xhat;
  std::int64_t count = 0;
  bool training = false;
};
}  // namespace detail

/// Per-channel batch normalization over [N, C, H, W]. In train mode the
/// batch statistics normalize the activations and the running buffers move
/// toward them (unbiased variance, momentum-weighted). In eval mode the
/// running buffers normalize and nothing is mutated.
template <typename T>
int batchnorm2d(TapeT<T>& t, int x, int gamma, int beta, TensorT<T>* running_mean,
                TensorT<T>* running_var, bool training, double momentum = 0.1,
                double eps = 1e-5) {
  const TensorT<T>& xv = t.value(x);
  require_ndim(xv, 4, "batchnorm2d input");
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const TensorT<T>& gv = t.value(gamma);
  const TensorT<T>& bv = t.value(beta);
  require_shape(gv, {C}, "batchnorm2d gamma");
  require_shape(bv, {C}, "batchnorm2d beta");
  if (running_mean == nullptr || running_var == nullptr) {
    throw std::invalid_argument("batchnorm2d: running statistics buffers are required");
  }
  require_shape(*running_mean, {C}, "batchnorm2d running_mean");
  require_shape(*running_var, {C}, "batchnorm2d running_var");
  const std::int64_t count = static_cast<std::int64_t>(N) * H * W;
  if (training && count < 2) {
    throw std::invalid_argument("batchnorm2d: train mode needs more than one value per channel, got " +
                                shape_str(xv.shape));
  }

  auto saved = std::make_shared<detail::BnSaved<T>>();
  saved->invstd.resize(static_cast<std::size_t>(C));
  saved->xhat = TensorT<T>({N, C, H, W});
  saved->count = count;
  saved->training = training;

  typename TapeT<T>::Node n;
  n.kind = OpKind::kBatchNorm2d;
  n.inputs = {x, gamma, beta};
  n.out = TensorT<T>({N, C, H, W});

  const std::int64_t plane = static_cast<std::int64_t>(H) * W;
  for (int c = 0; c < C; ++c) {
    double mean;
    double var;
    if (training) {
      double s = 0.0;
      for (int i = 0; i < N; ++i) {
        const T* src = &xv.data[static_cast<std::size_t>((static_cast<std::int64_t>(i) * C + c) * plane)];
        for (std::int64_t k = 0; k < plane; ++k) s += static_cast<double>(src[k]);
      }
      mean = s / static_cast<double>(count);
      double sq = 0.0;
      for (int i = 0; i < N; ++i) {
        const T* src = &xv.data[static_cast<std::size_t>((static_cast<std::int64_t>(i) * C + c) * plane)];
        for (std::int64_t k = 0; k < plane; ++k) {
          const double d = static_cast<double>(src[k]) - mean;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(count);
      const double unbiased = sq / static_cast<double>(count - 1);
      running_mean->data[static_cast<std::size_t>(c)] = static_cast<T>(
          (1.0 - momentum) * static_cast<double>(running_mean->data[static_cast<std::size_t>(c)]) +
          momentum * mean);
      running_var->data[static_cast<std::size_t>(c)] = static_cast<T>(
          (1.0 - momentum) * static_cast<double>(running_var->data[static_cast<std::size_t>(c)]) +
          momentum * unbiased);
    } else {
      mean = static_cast<double>(running_mean->data[static_cast<std::size_t>(c)]);
      var = static_cast<double>(running_var->data[static_cast<std::size_t>(c)]);
    }
    const double invstd = 1.0 / std::sqrt(var + eps);
    saved->invstd[static_cast<std::size_t>(c)] = invstd;
    const double g = static_cast<double>(gv.data[static_cast<std::size_t>(c)]);
    const double b = static_cast<double>(bv.data[static_cast<std::size_t>(c)]);
    for (int i = 0; i < N; ++i) {
      const T* src = &xv.data[static_cast<std::size_t>((static_cast<std::int64_t>(i) * C + c) * plane)];
      T* xh = &saved->xhat.data[static_cast<std::size_t>((static_cast<std::int64_t>(i) * C + c) * plane)];
      T* dst = &n.out.data[static_cast<std::size_t>((static_cast<std::int64_t>(i) * C + c) * plane)];
      for (std::int64_t k = 0; k < plane; ++k) {
        const double xhat = (static_cast<double>(src[k]) - mean) * invstd;
        xh[k] = static_cast<T>(xhat);
        dst[k] = static_cast<T>(g * xhat + b);
      }
    }
  }

  n.backward = [saved, N, C, plane](TapeT<T>& tp, int id) {
    auto& self = tp.node(id);
    const TensorT<T>& gv2 = tp.value(self.inputs[1]);
    auto& gx = tp.node(self.inputs[0]).grad;
    auto& gg = tp.node(self.inputs[1]).grad;
    auto& gb = tp.node(self.inputs[2]).grad;
    for (int c = 0; c < C; ++c) {
      double sum_g = 0.0;
      double sum_gx = 0.0;
      for (int i = 0; i < N; ++i) {
        const double* gr = &self.grad[static_cast<std::size_t>((static_cast<std::int64_t>(i) * C + c) * plane)];
        const T* xh = &saved->xhat.data[static_cast<std::size_t>((static_cast<std::int64_t>(i) * C + c) * plane)];
        for (std::int64_t k = 0; k < plane; ++k) {
          sum_g += gr[k];
          sum_gx += gr[k] * static_cast<double>(xh[k]);
        }
      }
      gg[static_cast<std::size_t>(c)] += sum_gx;
      gb[static_cast<std::size_t>(c)] += sum_g;
      const double gamma_c = static_cast<double>(gv2.data[static_cast<std::size_t>(c)]);
      const double invstd = saved->invstd[static_cast<std::size_t>(c)];
      if (saved->training) {
        const double inv_count = 1.0 / static_cast<double>(saved->count);
        for (int i = 0; i < N; ++i) {
          const double* gr = &self.grad[static_cast<std::size_t>((static_cast<std::int64_t>(i) * C + c) * plane)];
          const T* xh = &saved->xhat.data[static_cast<std::size_t>((static_cast<std::int64_t>(i) * C + c) * plane)];
          double* gxr = &gx[static_cast<std::size_t>((static_cast<std::int64_t>(i) * C + c) * plane)];
          for (std::int64_t k = 0; k < plane; ++k) {
            gxr[k] += gamma_c * invstd *
                      (gr[k] - inv_count * (sum_g + static_cast<double>(xh[k]) * sum_gx));
          }
        }
      } else {
        for (int i = 0; i < N; ++i) {
          const double* gr = &self.grad[static_cast<std::size_t>((static_cast<std::int64_t>(i) * C + c) * plane)];
          double* gxr = &gx[static_cast<std::size_t>((static_cast<std::int64_t>(i) * C + c) * plane)];
          for (std::int64_t k = 0; k < plane; ++k) gxr[k] += gamma_c * invstd * gr[k];
        }
      }
    }
  };
  return t.push(std::move(n));
}

// ---------------------------------------------------------------------------
// row-wise softmax family
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
void check_rowwise(const TensorT<T>& x, const char* what) {
  require_ndim(x, 2, what);
}
}  // namespace detail

template <typename T>
int softmax(TapeT<T>& t, int x) {
  const TensorT<T>& xv = t.value(x);
  detail::check_rowwise(xv, "softmax input");
  const int N = xv.dim(0), K = xv.dim(1);
  typename TapeT<T>::Node n;
  n.kind = OpKind::kSoftmax;
  n.inputs = {x};
  n.out = TensorT<T>({N, K});
  for (int i = 0; i < N; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(xv.at2(i, k)));
    double z = 0.0;
    for (int k = 0; k < K; ++k) z += std::exp(static_cast<double>(xv.at2(i, k)) - mx);
    for (int k = 0; k < K; ++k) {
      n.out.at2(i, k) = static_cast<T>(std::exp(static_cast<double>(xv.at2(i, k)) - mx) / z);
    }
  }
  n.backward = [N, K](TapeT<T>& tp, int id) {
    auto& self = tp.node(id);
    auto& gx = tp.node(self.inputs[0]).grad;
    for (int i = 0; i < N; ++i) {
      double dot = 0.0;
      for (int k = 0; k < K; ++k) {
        dot += self.grad[static_cast<std::size_t>(static_cast<std::int64_t>(i) * K + k)] *
               static_cast<double>(self.out.at2(i, k));
      }
      for (int k = 0; k < K; ++k) {
        const double p = static_cast<double>(self.out.at2(i, k));
        gx[static_cast<std::size_t>(static_cast<std::int64_t>(i) * K + k)] +=
            p * (self.grad[static_cast<std::size_t>(static_cast<std::int64_t>(i) * K + k)] - dot);
      }
    }
  };
  return t.push(std::move(n));
}

template <typename T>
int log_softmax(TapeT<T>& t, int x) {
  const TensorT<T>& xv = t.value(x);
  detail::check_rowwise(xv, "log_softmax input");
  const int N = xv.dim(0), K = xv.dim(1);
  typename TapeT<T>::Node n;
  n.kind = OpKind::kLogSoftmax;
  n.inputs = {x};
  n.out = TensorT<T>({N, K});
  for (int i = 0; i < N; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(xv.at2(i, k)));
    double z = 0.0;
    for (int k = 0; k < K; ++k) z += std::exp(static_cast<double>(xv.at2(i, k)) - mx);
    const double lse = mx + std::log(z);
    for (int k = 0; k < K; ++k) n.out.at2(i, k) = static_cast<T>(static_cast<double>(xv.at2(i, k)) - lse);
  }
  n.backward = [N, K](TapeT<T>& tp, int id) {
    auto& self = tp.node(id);
    auto& gx = tp.node(self.inputs[0]).grad;
    for (int i = 0; i < N; ++i) {
      double sum_g = 0.0;
      for (int k = 0; k < K; ++k) {
        sum_g += self.grad[static_cast<std::size_t>(static_cast<std::int64_t>(i) * K + k)];
      }
      for (int k = 0; k < K; ++k) {
        const double p = std::exp(static_cast<double>(self.out.at2(i, k)));
        gx[static_cast<std::size_t>(static_cast<std::int64_t>(i) * K + k)] +=
            self.grad[static_cast<std::size_t>(static_cast<std::int64_t>(i) * K + k)] - p * sum_g;
      }
    }
  };
  return t.push(std::move(n));
}

// ---------------------------------------------------------------------------
// scalar reductions
// ---------------------------------------------------------------------------

template <typename T>
int sum_all(TapeT<T>& t, int x) {
  const TensorT<T>& xv = t.value(x);
  typename TapeT<T>::Node n;
  n.kind = OpKind::kSumAll;
  n.inputs = {x};
  double s = 0.0;
  for (const T& v : xv.data) s += static_cast<double>(v);
  n.out = TensorT<T>({1});
  n.out.data[0] = static_cast<T>(s);
  n.backward = [](TapeT<T>& tp, int id) {
    auto& self = tp.node(id);
    auto& gx = tp.node(self.inputs[0]).grad;
    const double g = self.grad[0];
    for (auto& v : gx) v += g;
  };
  return t.push(std::move(n));
}

/// Scalar sum of x weighted by a fixed tensor. Handy for probing gradients
/// of intermediate tensors without symmetric cancellation.
template <typename T>
int weighted_sum(TapeT<T>& t, int x, const TensorT<T>& weights) {
  const TensorT<T>& xv = t.value(x);
  if (!xv.same_shape(weights)) {
    throw std::invalid_argument("weighted_sum: weights shape " + shape_str(weights.shape) +
                                " does not match input " + shape_str(xv.shape));
  }
  typename TapeT<T>::Node n;
  n.kind = OpKind::kSumAll;
  n.inputs = {x};
  double s = 0.0;
  for (std::size_t i = 0; i < xv.data.size(); ++i) {
    s += static_cast<double>(xv.data[i]) * static_cast<double>(weights.data[i]);
  }
  n.out = TensorT<T>({1});
  n.out.data[0] = static_cast<T>(s);
  n.backward = [w = weights](TapeT<T>& tp, int id) {
    auto& self = tp.node(id);
    auto& gx = tp.node(self.inputs[0]).grad;
    const double g = self.grad[0];
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * static_cast<double>(w.data[i]);
  };
  return t.push(std::move(n));
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

/// Mean cross-entropy between logits [N, K] and target distributions
/// [N, K]. Targets are fixed (off-tape); rows must be valid distributions.
/// Soft targets make mixed-label losses exact by linearity.
template <typename T>
int soft_cross_entropy(TapeT<T>& t, int logits, const TensorT<T>& targets) {
  const TensorT<T>& zv = t.value(logits);
  detail::check_rowwise(zv, "soft_cross_entropy logits");
  if (!zv.same_shape(targets)) {
    throw std::invalid_argument("soft_cross_entropy: targets shape " + shape_str(targets.shape) +
                                " does not match logits " + shape_str(zv.shape));
  }
  const int N = zv.dim(0), K = zv.dim(1);
  for (int i = 0; i < N; ++i) {
    double row = 0.0;
    for (int k = 0; k < K; ++k) {
      const double v = static_cast<double>(targets.at2(i, k));
      if (v < 0.0) throw std::invalid_argument("soft_cross_entropy: negative target in row " + std::to_string(i));
      row += v;
    }
    if (std::abs(row - 1.0) > 1e-3) {
      throw std::invalid_argument("soft_cross_entropy: target row " + std::to_string(i) +
                                  " sums to " + std::to_string(row) + ", expected 1");
    }
  }

  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(N) * K);
  typename TapeT<T>::Node n;
  n.kind = OpKind::kSoftCrossEntropy;
  n.inputs = {logits};
  double loss = 0.0;
  for (int i = 0; i < N; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(zv.at2(i, k)));
    double z = 0.0;
    for (int k = 0; k < K; ++k) z += std::exp(static_cast<double>(zv.at2(i, k)) - mx);
    const double lse = mx + std::log(z);
    for (int k = 0; k < K; ++k) {
      const double logp = static_cast<double>(zv.at2(i, k)) - lse;
      (*probs)[static_cast<std::size_t>(static_cast<std::int64_t>(i) * K + k)] = std::exp(logp);
      loss -= static_cast<double>(targets.at2(i, k)) * logp;
    }
  }
  n.out = TensorT<T>({1});
  n.out.data[0] = static_cast<T>(loss / static_cast<double>(N));
  n.backward = [probs, tg = targets, N, K](TapeT<T>& tp, int id) {
    auto& self = tp.node(id);
    auto& gz = tp.node(self.inputs[0]).grad;
    const double g = self.grad[0] / static_cast<double>(N);
    for (int i = 0; i < N; ++i) {
      for (int k = 0; k < K; ++k) {
        const std::size_t idx = static_cast<std::size_t>(static_cast<std::int64_t>(i) * K + k);
        gz[idx] += g * ((*probs)[idx] - static_cast<double>(tg.at2(i, k)));
      }
    }
  };
  return t.push(std::move(n));
}

/// Mean KL divergence between temperature-softened teacher and student
/// predictions, computed from raw logits. The default direction measures
/// KL(teacher || student); flip literal_order for KL(student || teacher).
/// tau_squared rescales the loss by tau^2 to keep gradient magnitude
/// comparable across temperatures.
template <typename T>
int kl_divergence(TapeT<T>& t, int student_logits, const TensorT<T>& teacher_logits, double tau,
                  bool literal_order = false, bool tau_squared = false) {
  if (!(tau > 0.0)) throw std::invalid_argument("kl_divergence: temperature must be positive");
  const TensorT<T>& zv = t.value(student_logits);
  detail::check_rowwise(zv, "kl_divergence student logits");
  if (!zv.same_shape(teacher_logits)) {
    throw std::invalid_argument("kl_divergence: teacher logits shape " +
                                shape_str(teacher_logits.shape) + " does not match student " +
                                shape_str(zv.shape));
  }
  const int N = zv.dim(0), K = zv.dim(1);
  const double scale = tau_squared ? tau * tau : 1.0;

  // temperature-softened log-probabilities for both distributions
  auto log_p = std::make_shared<std::vector<double>>(static_cast<std::size_t>(N) * K);  // student
  auto log_q = std::make_shared<std::vector<double>>(static_cast<std::size_t>(N) * K);  // teacher
  auto row_logsoft = [&](auto&& get, std::vector<double>& out) {
    for (int i = 0; i < N; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int k = 0; k < K; ++k) mx = std::max(mx, get(i, k) / tau);
      double z = 0.0;
      for (int k = 0; k < K; ++k) z += std::exp(get(i, k) / tau - mx);
      const double lse = mx + std::log(z);
      for (int k = 0; k < K; ++k) {
        out[static_cast<std::size_t>(static_cast<std::int64_t>(i) * K + k)] = get(i, k) / tau - lse;
      }
    }
  };
  row_logsoft([&](int i, int k) { return static_cast<double>(zv.at2(i, k)); }, *log_p);
  row_logsoft([&](int i, int k) { return static_cast<double>(teacher_logits.at2(i, k)); }, *log_q);

  double loss = 0.0;
  std::vector<double> row_kl(static_cast<std::size_t>(N), 0.0);
  for (int i = 0; i < N; ++i) {
    double kl = 0.0;
    for (int k = 0; k < K; ++k) {
      const std::size_t idx = static_cast<std::size_t>(static_cast<std::int64_t>(i) * K + k);
      if (literal_order) {
        kl += std::exp((*log_p)[idx]) * ((*log_p)[idx] - (*log_q)[idx]);
      } else {
        kl += std::exp((*log_q)[idx]) * ((*log_q)[idx] - (*log_p)[idx]);
      }
    }
    row_kl[static_cast<std::size_t>(i)] = kl;
    loss += kl;
  }

  typename TapeT<T>::Node n;
  n.kind = OpKind::kKlDivergence;
  n.inputs = {student_logits};
  n.out = TensorT<T>({1});
  n.out.data[0] = static_cast<T>(scale * loss / static_cast<double>(N));
  n.backward = [log_p, log_q, row_kl, N, K, tau, scale, literal_order](TapeT<T>& tp, int id) {
    auto& self = tp.node(id);
    auto& gz = tp.node(self.inputs[0]).grad;
    const double g = self.grad[0] * scale / (static_cast<double>(N) * tau);
    for (int i = 0; i < N; ++i) {
      for (int k = 0; k < K; ++k) {
        const std::size_t idx = static_cast<std::size_t>(static_cast<std::int64_t>(i) * K + k);
        const double p = std::exp((*log_p)[idx]);
        if (literal_order) {
          gz[idx] += g * p * ((*log_p)[idx] - (*log_q)[idx] - row_kl[static_cast<std::size_t>(i)]);
        } else {
          gz[idx] += g * (p - std::exp((*log_q)[idx]));
        }
      }
    }
  };
  return t.push(std::move(n));
}

}  // namespace flatland
