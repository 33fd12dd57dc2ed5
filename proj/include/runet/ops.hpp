#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "runet/autograd.hpp"
#include "runet/rng.hpp"
#include "runet/tensor.hpp"

namespace runet {

enum class Pad { same, valid };
enum class Act { sigmoid, tanh_fn, relu };

namespace detail {

inline std::size_t conv_out_dim(std::size_t in, std::size_t k, int stride,
                                int pad) {
  return (in + 2 * static_cast<std::size_t>(pad) - k) /
             static_cast<std::size_t>(stride) +
         1;
}

/// Output-index range [lo, hi] for which in = out*stride + tap - pad stays
/// inside [0, limit). hi < lo means the tap never lands in bounds.
struct TapRange {
  long lo, hi;
};

inline TapRange tap_range(long tap, int pad, int stride, long in_limit,
                          long out_limit) {
  const long lo_num = pad - tap;
  const long lo = lo_num > 0 ? (lo_num + stride - 1) / stride : 0;
  const long hi_num = in_limit - 1 - tap + pad;
  const long hi =
      hi_num < 0 ? -1 : std::min(out_limit - 1, hi_num / stride);
  return {lo, hi};
}

inline int pad_amount(std::size_t k, Pad pad) {
  if (pad == Pad::valid) return 0;
  if (k % 2 == 0) throw ParamError("same padding requires odd kernel size");
  return static_cast<int>((k - 1) / 2);
}

inline void check_conv_args(const std::vector<std::size_t>& in,
                            const std::vector<std::size_t>& w,
                            const std::vector<std::size_t>& b, int stride,
                            Pad pad) {
  if (in.size() != 3)
    throw ShapeError("conv2d input must be [C,H,W], got rank " +
                     std::to_string(in.size()));
  if (w.size() != 4)
    throw ShapeError("conv2d kernel must be [Co,Ci,kh,kw], got rank " +
                     std::to_string(w.size()));
  if (b.size() != 1 || b[0] != w[0])
    throw ShapeError("conv2d bias length must equal out_channels axis 0 of "
                     "kernel");
  if (in[0] != w[1])
    throw ShapeError("conv2d channel axis mismatch: input has " +
                     std::to_string(in[0]) + " channels, kernel expects " +
                     std::to_string(w[1]));
  if (stride != 1 && stride != 2)
    throw ParamError("conv2d stride must be 1 or 2");
  if (pad == Pad::valid && (in[1] < w[2] || in[2] < w[3]))
    throw ShapeError("conv2d valid padding: spatial axes smaller than kernel");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Raw kernels (forward / explicit backward). All reductions accumulate in
// double and cast to T at the end; loop nesting is fixed so repeated runs are
// bit-identical.
// ---------------------------------------------------------------------------

/// Cross-correlation (no kernel flip), zero-fill boundary.
/// in [Ci,H,W], w [Co,Ci,kh,kw], b [Co] -> [Co,Ho,Wo]
template <class T>
TensorT<T> conv2d_fwd(const TensorT<T>& in, const TensorT<T>& w,
                      const TensorT<T>& b, int stride = 1,
                      Pad pad = Pad::same) {
  detail::check_conv_args(in.shape(), w.shape(), b.shape(), stride, pad);
  const std::size_t Ci = in.dim(0), H = in.dim(1), W = in.dim(2);
  const std::size_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int p = detail::pad_amount(kh, pad);
  const std::size_t Ho = detail::conv_out_dim(H, kh, stride, p);
  const std::size_t Wo = detail::conv_out_dim(W, kw, stride, p);

  TensorT<T> out({Co, Ho, Wo});
#pragma omp parallel for schedule(static)
  for (std::size_t co = 0; co < Co; ++co) {
    std::vector<double> plane(Ho * Wo, static_cast<double>(b[co]));
    for (std::size_t ci = 0; ci < Ci; ++ci) {
      const T* in_c = in.data() + ci * H * W;
      const T* w_c = w.data() + (co * Ci + ci) * kh * kw;
      for (std::size_t r = 0; r < kh; ++r) {
        const auto [oh_lo, oh_hi] = detail::tap_range(
            static_cast<long>(r), p, stride, static_cast<long>(H),
            static_cast<long>(Ho));
        for (std::size_t c = 0; c < kw; ++c) {
          const double wv = static_cast<double>(w_c[r * kw + c]);
          if (wv == 0.0) continue;
          const auto [ow_lo, ow_hi] = detail::tap_range(
              static_cast<long>(c), p, stride, static_cast<long>(W),
              static_cast<long>(Wo));
          const long dh = static_cast<long>(r) - p;
          const long dw = static_cast<long>(c) - p;
          for (long oh = oh_lo; oh <= oh_hi; ++oh) {
            const T* in_row = in_c + static_cast<std::size_t>(oh * stride + dh) * W;
            double* out_row = plane.data() + static_cast<std::size_t>(oh) * Wo;
            if (stride == 1) {
              for (long ow = ow_lo; ow <= ow_hi; ++ow)
                out_row[ow] += wv * static_cast<double>(in_row[ow + dw]);
            } else {
              for (long ow = ow_lo; ow <= ow_hi; ++ow)
                out_row[ow] += wv * static_cast<double>(in_row[2 * ow + dw]);
            }
          }
        }
      }
    }
    T* out_c = out.data() + co * Ho * Wo;
    for (std::size_t i = 0; i < Ho * Wo; ++i) out_c[i] = static_cast<T>(plane[i]);
  }
  return out;
}

template <class T>
TensorT<T> conv2d_bwd_input(const TensorT<T>& gout, const TensorT<T>& w,
                            const std::vector<std::size_t>& in_shape,
                            int stride, Pad pad) {
  const std::size_t Ci = in_shape[0], H = in_shape[1], W = in_shape[2];
  const std::size_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int p = detail::pad_amount(kh, pad);
  const std::size_t Ho = gout.dim(1), Wo = gout.dim(2);

  TensorT<T> gin(in_shape);
  // ci-major so each thread owns one input plane; the per-element
  // contribution order (co, then taps) is unchanged
#pragma omp parallel for schedule(static)
  for (std::size_t ci = 0; ci < Ci; ++ci) {
    std::vector<double> acc_c(H * W, 0.0);
    for (std::size_t co = 0; co < Co; ++co) {
      const T* g_c = gout.data() + co * Ho * Wo;
      const T* w_c = w.data() + (co * Ci + ci) * kh * kw;
      for (std::size_t r = 0; r < kh; ++r) {
        const auto [oh_lo, oh_hi] = detail::tap_range(
            static_cast<long>(r), p, stride, static_cast<long>(H),
            static_cast<long>(Ho));
        for (std::size_t c = 0; c < kw; ++c) {
          const double wv = static_cast<double>(w_c[r * kw + c]);
          if (wv == 0.0) continue;
          const auto [ow_lo, ow_hi] = detail::tap_range(
              static_cast<long>(c), p, stride, static_cast<long>(W),
              static_cast<long>(Wo));
          const long dh = static_cast<long>(r) - p;
          const long dw = static_cast<long>(c) - p;
          for (long oh = oh_lo; oh <= oh_hi; ++oh) {
            double* acc_row =
                acc_c.data() + static_cast<std::size_t>(oh * stride + dh) * W;
            const T* g_row = g_c + static_cast<std::size_t>(oh) * Wo;
            if (stride == 1) {
              for (long ow = ow_lo; ow <= ow_hi; ++ow)
                acc_row[ow + dw] += wv * static_cast<double>(g_row[ow]);
            } else {
              for (long ow = ow_lo; ow <= ow_hi; ++ow)
                acc_row[2 * ow + dw] += wv * static_cast<double>(g_row[ow]);
            }
          }
        }
      }
    }
    T* gin_c = gin.data() + ci * H * W;
    for (std::size_t i = 0; i < H * W; ++i)
      gin_c[i] = static_cast<T>(acc_c[i]);
  }
  return gin;
}

template <class T>
TensorT<T> conv2d_bwd_weights(const TensorT<T>& gout, const TensorT<T>& in,
                              const std::vector<std::size_t>& w_shape,
                              int stride, Pad pad) {
  const std::size_t Ci = in.dim(0), H = in.dim(1), W = in.dim(2);
  const std::size_t Co = w_shape[0], kh = w_shape[2], kw = w_shape[3];
  const int p = detail::pad_amount(kh, pad);
  const std::size_t Ho = gout.dim(1), Wo = gout.dim(2);

  TensorT<T> gw(w_shape);
#pragma omp parallel for schedule(static)
  for (std::size_t co = 0; co < Co; ++co) {
    const T* g_c = gout.data() + co * Ho * Wo;
    for (std::size_t ci = 0; ci < Ci; ++ci) {
      const T* in_c = in.data() + ci * H * W;
      for (std::size_t r = 0; r < kh; ++r) {
        const auto [oh_lo, oh_hi] = detail::tap_range(
            static_cast<long>(r), p, stride, static_cast<long>(H),
            static_cast<long>(Ho));
        for (std::size_t c = 0; c < kw; ++c) {
          const auto [ow_lo, ow_hi] = detail::tap_range(
              static_cast<long>(c), p, stride, static_cast<long>(W),
              static_cast<long>(Wo));
          const long dh = static_cast<long>(r) - p;
          const long dw = static_cast<long>(c) - p;
          double acc = 0.0;
          for (long oh = oh_lo; oh <= oh_hi; ++oh) {
            const T* in_row =
                in_c + static_cast<std::size_t>(oh * stride + dh) * W;
            const T* g_row = g_c + static_cast<std::size_t>(oh) * Wo;
            if (stride == 1) {
              for (long ow = ow_lo; ow <= ow_hi; ++ow)
                acc += static_cast<double>(g_row[ow]) *
                       static_cast<double>(in_row[ow + dw]);
            } else {
              for (long ow = ow_lo; ow <= ow_hi; ++ow)
                acc += static_cast<double>(g_row[ow]) *
                       static_cast<double>(in_row[2 * ow + dw]);
            }
          }
          gw[((co * Ci + ci) * kh + r) * kw + c] = static_cast<T>(acc);
        }
      }
    }
  }
  return gw;
}

template <class T>
TensorT<T> conv2d_bwd_bias(const TensorT<T>& gout) {
  const std::size_t Co = gout.dim(0), n = gout.dim(1) * gout.dim(2);
  TensorT<T> gb({Co});
  for (std::size_t co = 0; co < Co; ++co) {
    const T* g_c = gout.data() + co * n;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(g_c[i]);
    gb[co] = static_cast<T>(acc);
  }
  return gb;
}

/// Stride-2 transposed convolution: [Ci,H,W] -> [Co,2H,2W]. Defined as the
/// adjoint of the stride-2 same-padded conv, so <T x, y> == <x, T* y>.
/// in [Ci,H,W], w [Co,Ci,kh,kw], b [Co]
template <class T>
TensorT<T> conv_transpose2d_fwd(const TensorT<T>& in, const TensorT<T>& w,
                                const TensorT<T>& b) {
  if (in.rank() != 3) throw ShapeError("conv_transpose2d input must be [C,H,W]");
  if (w.rank() != 4)
    throw ShapeError("conv_transpose2d kernel must be [Co,Ci,kh,kw]");
  if (in.dim(0) != w.dim(1))
    throw ShapeError("conv_transpose2d channel axis mismatch: input has " +
                     std::to_string(in.dim(0)) + " channels, kernel expects " +
                     std::to_string(w.dim(1)));
  if (b.dim(0) != w.dim(0))
    throw ShapeError("conv_transpose2d bias length must equal out_channels");
  const std::size_t Ci = in.dim(0), H = in.dim(1), W = in.dim(2);
  const std::size_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t Ho = 2 * H, Wo = 2 * W;

  TensorT<T> out({Co, Ho, Wo});
#pragma omp parallel for schedule(static)
  for (std::size_t co = 0; co < Co; ++co) {
    std::vector<double> plane(Ho * Wo, static_cast<double>(b[co]));
    for (std::size_t ci = 0; ci < Ci; ++ci) {
      const T* in_c = in.data() + ci * H * W;
      const T* w_c = w.data() + (co * Ci + ci) * kh * kw;
      for (std::size_t r = 0; r < kh; ++r) {
        const long dh = static_cast<long>(r) - 1;
        const auto [ih_lo, ih_hi] = detail::tap_range(
            dh, 0, 2, static_cast<long>(Ho), static_cast<long>(H));
        for (std::size_t c = 0; c < kw; ++c) {
          const double wv = static_cast<double>(w_c[r * kw + c]);
          if (wv == 0.0) continue;
          const long dw = static_cast<long>(c) - 1;
          const auto [iw_lo, iw_hi] = detail::tap_range(
              dw, 0, 2, static_cast<long>(Wo), static_cast<long>(W));
          for (long ih = ih_lo; ih <= ih_hi; ++ih) {
            double* out_row =
                plane.data() + static_cast<std::size_t>(2 * ih + dh) * Wo;
            const T* in_row = in_c + static_cast<std::size_t>(ih) * W;
            for (long iw = iw_lo; iw <= iw_hi; ++iw)
              out_row[2 * iw + dw] += wv * static_cast<double>(in_row[iw]);
          }
        }
      }
    }
    T* out_c = out.data() + co * Ho * Wo;
    for (std::size_t i = 0; i < Ho * Wo; ++i) out_c[i] = static_cast<T>(plane[i]);
  }
  return out;
}

template <class T>
TensorT<T> conv_transpose2d_bwd_input(const TensorT<T>& gout,
                                      const TensorT<T>& w,
                                      const std::vector<std::size_t>& in_shape) {
  const std::size_t Ci = in_shape[0], H = in_shape[1], W = in_shape[2];
  const std::size_t Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t Ho = gout.dim(1), Wo = gout.dim(2);

  TensorT<T> gin(in_shape);
#pragma omp parallel for schedule(static)
  for (std::size_t ci = 0; ci < Ci; ++ci) {
    std::vector<double> acc_c(H * W, 0.0);
    for (std::size_t co = 0; co < Co; ++co) {
      const T* g_c = gout.data() + co * Ho * Wo;
      const T* w_c = w.data() + (co * Ci + ci) * kh * kw;
      for (std::size_t r = 0; r < kh; ++r) {
        const long dh = static_cast<long>(r) - 1;
        const auto [ih_lo, ih_hi] = detail::tap_range(
            dh, 0, 2, static_cast<long>(Ho), static_cast<long>(H));
        for (std::size_t c = 0; c < kw; ++c) {
          const double wv = static_cast<double>(w_c[r * kw + c]);
          if (wv == 0.0) continue;
          const long dw = static_cast<long>(c) - 1;
          const auto [iw_lo, iw_hi] = detail::tap_range(
              dw, 0, 2, static_cast<long>(Wo), static_cast<long>(W));
          for (long ih = ih_lo; ih <= ih_hi; ++ih) {
            const T* g_row =
                g_c + static_cast<std::size_t>(2 * ih + dh) * Wo;
            double* acc_row = acc_c.data() + static_cast<std::size_t>(ih) * W;
            for (long iw = iw_lo; iw <= iw_hi; ++iw)
              acc_row[iw] += wv * static_cast<double>(g_row[2 * iw + dw]);
          }
        }
      }
    }
    T* gin_c = gin.data() + ci * H * W;
    for (std::size_t i = 0; i < H * W; ++i)
      gin_c[i] = static_cast<T>(acc_c[i]);
  }
  return gin;
}

template <class T>
TensorT<T> conv_transpose2d_bwd_weights(const TensorT<T>& gout,
                                        const TensorT<T>& in,
                                        const std::vector<std::size_t>& w_shape) {
  const std::size_t Ci = in.dim(0), H = in.dim(1), W = in.dim(2);
  const std::size_t Co = w_shape[0], kh = w_shape[2], kw = w_shape[3];
  const std::size_t Ho = gout.dim(1), Wo = gout.dim(2);

  TensorT<T> gw(w_shape);
#pragma omp parallel for schedule(static)
  for (std::size_t co = 0; co < Co; ++co) {
    const T* g_c = gout.data() + co * Ho * Wo;
    for (std::size_t ci = 0; ci < Ci; ++ci) {
      const T* in_c = in.data() + ci * H * W;
      for (std::size_t r = 0; r < kh; ++r) {
        const long dh = static_cast<long>(r) - 1;
        const auto [ih_lo, ih_hi] = detail::tap_range(
            dh, 0, 2, static_cast<long>(Ho), static_cast<long>(H));
        for (std::size_t c = 0; c < kw; ++c) {
          const long dw = static_cast<long>(c) - 1;
          const auto [iw_lo, iw_hi] = detail::tap_range(
              dw, 0, 2, static_cast<long>(Wo), static_cast<long>(W));
          double acc = 0.0;
          for (long ih = ih_lo; ih <= ih_hi; ++ih) {
            const T* g_row =
                g_c + static_cast<std::size_t>(2 * ih + dh) * Wo;
            const T* in_row = in_c + static_cast<std::size_t>(ih) * W;
            for (long iw = iw_lo; iw <= iw_hi; ++iw)
              acc += static_cast<double>(in_row[iw]) *
                     static_cast<double>(g_row[2 * iw + dw]);
          }
          gw[((co * Ci + ci) * kh + r) * kw + c] = static_cast<T>(acc);
        }
      }
    }
  }
  return gw;
}

struct PoolIndices {
  std::vector<std::size_t> argmax;  // flat input index per output element
};

/// 2x2 stride-2 max pool; ties resolved to the first element in row-major
/// window scan order.
template <class T>
TensorT<T> maxpool2d_fwd(const TensorT<T>& in, PoolIndices* idx) {
  if (in.rank() != 3) throw ShapeError("maxpool2d input must be [C,H,W]");
  const std::size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
  if (H % 2 || W % 2)
    throw ShapeError("maxpool2d requires even spatial dims, got " +
                     std::to_string(H) + "x" + std::to_string(W));
  const std::size_t Ho = H / 2, Wo = W / 2;
  TensorT<T> out({C, Ho, Wo});
  if (idx) idx->argmax.assign(C * Ho * Wo, 0);
  for (std::size_t c = 0; c < C; ++c) {
    const T* in_c = in.data() + c * H * W;
    for (std::size_t oh = 0; oh < Ho; ++oh) {
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        const std::size_t base = (2 * oh) * W + 2 * ow;
        std::size_t best = base;
        T best_v = in_c[base];
        const std::size_t cand[3] = {base + 1, base + W, base + W + 1};
        for (std::size_t k : cand) {
          if (in_c[k] > best_v) {
            best_v = in_c[k];
            best = k;
          }
        }
        out[(c * Ho + oh) * Wo + ow] = best_v;
        if (idx) idx->argmax[(c * Ho + oh) * Wo + ow] = c * H * W + best;
      }
    }
  }
  return out;
}

template <class T>
TensorT<T> maxpool2d_bwd(const TensorT<T>& gout, const PoolIndices& idx,
                         const std::vector<std::size_t>& in_shape) {
  TensorT<T> gin(in_shape);
  for (std::size_t i = 0; i < gout.numel(); ++i)
    gin[idx.argmax[i]] += gout[i];
  return gin;
}

template <class T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) {
    const T e = std::exp(-x);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
TensorT<T> activation_fwd(const TensorT<T>& in, Act kind) {
  TensorT<T> out(in.shape());
  const std::size_t n = in.numel();
  switch (kind) {
    case Act::sigmoid:
      for (std::size_t i = 0; i < n; ++i) out[i] = sigmoid_scalar(in[i]);
      break;
    case Act::tanh_fn:
      for (std::size_t i = 0; i < n; ++i) out[i] = std::tanh(in[i]);
      break;
    case Act::relu:
      for (std::size_t i = 0; i < n; ++i) out[i] = in[i] > T(0) ? in[i] : T(0);
      break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Autograd wrappers.
// ---------------------------------------------------------------------------

template <class T>
VarT<T> conv2d(const VarT<T>& x, const VarT<T>& w, const VarT<T>& b,
               int stride = 1, Pad pad = Pad::same) {
  auto out = make_leaf<T>(conv2d_fwd(x->value, w->value, b->value, stride, pad));
  if (recording<T>({&x, &w, &b})) {
    out->requires_grad = true;
    out->parents = {x, w, b};
    const auto in_shape = x->value.shape();
    const auto w_shape = w->value.shape();
    out->backward_fn = [x, w, b, in_shape, w_shape, stride,
                        pad](NodeT<T>& n) {
      if (x->requires_grad)
        x->accumulate(conv2d_bwd_input(n.grad, w->value, in_shape, stride, pad));
      if (w->requires_grad)
        w->accumulate(conv2d_bwd_weights(n.grad, x->value, w_shape, stride, pad));
      if (b->requires_grad) b->accumulate(conv2d_bwd_bias(n.grad));
    };
  }
  return out;
}

template <class T>
VarT<T> conv_transpose2d(const VarT<T>& x, const VarT<T>& w, const VarT<T>& b) {
  auto out = make_leaf<T>(conv_transpose2d_fwd(x->value, w->value, b->value));
  if (recording<T>({&x, &w, &b})) {
    out->requires_grad = true;
    out->parents = {x, w, b};
    const auto in_shape = x->value.shape();
    const auto w_shape = w->value.shape();
    out->backward_fn = [x, w, b, in_shape, w_shape](NodeT<T>& n) {
      if (x->requires_grad)
        x->accumulate(conv_transpose2d_bwd_input(n.grad, w->value, in_shape));
      if (w->requires_grad)
        w->accumulate(conv_transpose2d_bwd_weights(n.grad, x->value, w_shape));
      if (b->requires_grad) b->accumulate(conv2d_bwd_bias(n.grad));
    };
  }
  return out;
}

template <class T>
struct PoolOut {
  VarT<T> out;
  std::shared_ptr<PoolIndices> indices;
};

template <class T>
PoolOut<T> maxpool2d(const VarT<T>& x) {
  auto idx = std::make_shared<PoolIndices>();
  auto out = make_leaf<T>(maxpool2d_fwd(x->value, idx.get()));
  if (recording<T>({&x})) {
    out->requires_grad = true;
    out->parents = {x};
    const auto in_shape = x->value.shape();
    out->backward_fn = [x, idx, in_shape](NodeT<T>& n) {
      x->accumulate(maxpool2d_bwd(n.grad, *idx, in_shape));
    };
  }
  return {out, idx};
}

template <class T>
VarT<T> activation(const VarT<T>& x, Act kind) {
  auto out = make_leaf<T>(activation_fwd(x->value, kind));
  if (recording<T>({&x})) {
    out->requires_grad = true;
    out->parents = {x};
    out->backward_fn = [x, kind](NodeT<T>& n) {
      TensorT<T> g(n.value.shape());
      const std::size_t k = g.numel();
      switch (kind) {
        case Act::sigmoid:
          for (std::size_t i = 0; i < k; ++i) {
            const T y = n.value[i];
            g[i] = n.grad[i] * y * (T(1) - y);
          }
          break;
        case Act::tanh_fn:
          for (std::size_t i = 0; i < k; ++i) {
            const T y = n.value[i];
            g[i] = n.grad[i] * (T(1) - y * y);
          }
          break;
        case Act::relu:
          // subgradient 0 at 0
          for (std::size_t i = 0; i < k; ++i)
            g[i] = x->value[i] > T(0) ? n.grad[i] : T(0);
          break;
      }
      x->accumulate(g);
    };
  }
  return out;
}

template <class T>
VarT<T> vadd(const VarT<T>& a, const VarT<T>& b) {
  expect_same_shape("add", a->value.shape(), b->value.shape());
  TensorT<T> v(a->value.shape());
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] = a->value[i] + b->value[i];
  auto out = make_leaf<T>(std::move(v));
  if (recording<T>({&a, &b})) {
    out->requires_grad = true;
    out->parents = {a, b};
    out->backward_fn = [a, b](NodeT<T>& n) {
      if (a->requires_grad) a->accumulate(n.grad);
      if (b->requires_grad) b->accumulate(n.grad);
    };
  }
  return out;
}

template <class T>
VarT<T> hadamard(const VarT<T>& a, const VarT<T>& b) {
  expect_same_shape("hadamard", a->value.shape(), b->value.shape());
  TensorT<T> v(a->value.shape());
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] = a->value[i] * b->value[i];
  auto out = make_leaf<T>(std::move(v));
  if (recording<T>({&a, &b})) {
    out->requires_grad = true;
    out->parents = {a, b};
    out->backward_fn = [a, b](NodeT<T>& n) {
      const std::size_t k = n.grad.numel();
      if (a->requires_grad) {
        TensorT<T> g(n.grad.shape());
        for (std::size_t i = 0; i < k; ++i) g[i] = n.grad[i] * b->value[i];
        a->accumulate(g);
      }
      if (b->requires_grad) {
        TensorT<T> g(n.grad.shape());
        for (std::size_t i = 0; i < k; ++i) g[i] = n.grad[i] * a->value[i];
        b->accumulate(g);
      }
    };
  }
  return out;
}

/// [C,H,W] scaled per channel by s[C]; the per-channel peephole variant.
template <class T>
VarT<T> channel_scale(const VarT<T>& x, const VarT<T>& s) {
  if (x->value.rank() != 3 || s->value.rank() != 1 ||
      s->value.dim(0) != x->value.dim(0))
    throw ShapeError("channel_scale expects [C,H,W] and [C]");
  const std::size_t C = x->value.dim(0),
                    n = x->value.dim(1) * x->value.dim(2);
  TensorT<T> v(x->value.shape());
  for (std::size_t c = 0; c < C; ++c) {
    const T sc = s->value[c];
    for (std::size_t i = 0; i < n; ++i) v[c * n + i] = x->value[c * n + i] * sc;
  }
  auto out = make_leaf<T>(std::move(v));
  if (recording<T>({&x, &s})) {
    out->requires_grad = true;
    out->parents = {x, s};
    out->backward_fn = [x, s, C, n](NodeT<T>& nd) {
      if (x->requires_grad) {
        TensorT<T> g(x->value.shape());
        for (std::size_t c = 0; c < C; ++c) {
          const T sc = s->value[c];
          for (std::size_t i = 0; i < n; ++i)
            g[c * n + i] = nd.grad[c * n + i] * sc;
        }
        x->accumulate(g);
      }
      if (s->requires_grad) {
        TensorT<T> g({C});
        for (std::size_t c = 0; c < C; ++c) {
          double acc = 0.0;
          for (std::size_t i = 0; i < n; ++i)
            acc += static_cast<double>(nd.grad[c * n + i]) *
                   static_cast<double>(x->value[c * n + i]);
          g[c] = static_cast<T>(acc);
        }
        s->accumulate(g);
      }
    };
  }
  return out;
}

template <class T>
VarT<T> concat_channels(const VarT<T>& a, const VarT<T>& b) {
  if (a->value.rank() != 3 || b->value.rank() != 3)
    throw ShapeError("concat_channels expects [C,H,W] inputs");
  if (a->value.dim(1) != b->value.dim(1) || a->value.dim(2) != b->value.dim(2))
    throw ShapeError("concat_channels spatial mismatch: " +
                     std::to_string(a->value.dim(1)) + "x" +
                     std::to_string(a->value.dim(2)) + " vs " +
                     std::to_string(b->value.dim(1)) + "x" +
                     std::to_string(b->value.dim(2)));
  const std::size_t C1 = a->value.dim(0), C2 = b->value.dim(0);
  const std::size_t n = a->value.dim(1) * a->value.dim(2);
  TensorT<T> v({C1 + C2, a->value.dim(1), a->value.dim(2)});
  std::copy(a->value.data(), a->value.data() + C1 * n, v.data());
  std::copy(b->value.data(), b->value.data() + C2 * n, v.data() + C1 * n);
  auto out = make_leaf<T>(std::move(v));
  if (recording<T>({&a, &b})) {
    out->requires_grad = true;
    out->parents = {a, b};
    out->backward_fn = [a, b, C1, C2, n](NodeT<T>& nd) {
      if (a->requires_grad) {
        TensorT<T> g(a->value.shape());
        std::copy(nd.grad.data(), nd.grad.data() + C1 * n, g.data());
        a->accumulate(g);
      }
      if (b->requires_grad) {
        TensorT<T> g(b->value.shape());
        std::copy(nd.grad.data() + C1 * n, nd.grad.data() + (C1 + C2) * n,
                  g.data());
        b->accumulate(g);
      }
    };
  }
  return out;
}

/// Inverted dropout: training mode zeroes with probability `rate` and scales
/// survivors by 1/(1-rate); inference is the identity and draws nothing.
template <class T>
VarT<T> dropout(const VarT<T>& x, double rate, bool training, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw ParamError("dropout rate must lie in [0,1), got " +
                     std::to_string(rate));
  if (!training || rate == 0.0) return x;
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  auto mask = std::make_shared<TensorT<T>>(x->value.shape());
  TensorT<T> v(x->value.shape());
  for (std::size_t i = 0; i < v.numel(); ++i) {
    const T m = rng.uniform() < rate ? T(0) : scale;
    (*mask)[i] = m;
    v[i] = x->value[i] * m;
  }
  auto out = make_leaf<T>(std::move(v));
  if (recording<T>({&x})) {
    out->requires_grad = true;
    out->parents = {x};
    out->backward_fn = [x, mask](NodeT<T>& nd) {
      TensorT<T> g(nd.grad.shape());
      for (std::size_t i = 0; i < g.numel(); ++i)
        g[i] = nd.grad[i] * (*mask)[i];
      x->accumulate(g);
    };
  }
  return out;
}

/// Sum of all elements -> scalar var (double accumulation).
template <class T>
VarT<T> vsum(const VarT<T>& x) {
  auto out = make_leaf<T>(TensorT<T>::scalar(static_cast<T>(x->value.sum())));
  if (recording<T>({&x})) {
    out->requires_grad = true;
    out->parents = {x};
    out->backward_fn = [x](NodeT<T>& nd) {
      x->accumulate(TensorT<T>::full(x->value.shape(), nd.grad[0]));
    };
  }
  return out;
}

template <class T>
VarT<T> vscale(const VarT<T>& x, double k) {
  TensorT<T> v(x->value.shape());
  for (std::size_t i = 0; i < v.numel(); ++i)
    v[i] = static_cast<T>(static_cast<double>(x->value[i]) * k);
  auto out = make_leaf<T>(std::move(v));
  if (recording<T>({&x})) {
    out->requires_grad = true;
    out->parents = {x};
    out->backward_fn = [x, k](NodeT<T>& nd) {
      TensorT<T> g(nd.grad.shape());
      for (std::size_t i = 0; i < g.numel(); ++i)
        g[i] = static_cast<T>(static_cast<double>(nd.grad[i]) * k);
      x->accumulate(g);
    };
  }
  return out;
}

template <class T>
VarT<T> vshift(const VarT<T>& x, double c) {
  TensorT<T> v(x->value.shape());
  for (std::size_t i = 0; i < v.numel(); ++i)
    v[i] = static_cast<T>(static_cast<double>(x->value[i]) + c);
  auto out = make_leaf<T>(std::move(v));
  if (recording<T>({&x})) {
    out->requires_grad = true;
    out->parents = {x};
    out->backward_fn = [x](NodeT<T>& nd) { x->accumulate(nd.grad); };
  }
  return out;
}

/// Scalar division a/b (both shape [1]).
template <class T>
VarT<T> vdiv(const VarT<T>& a, const VarT<T>& b) {
  if (a->value.numel() != 1 || b->value.numel() != 1)
    throw ShapeError("vdiv expects scalar vars");
  auto out = make_leaf<T>(TensorT<T>::scalar(a->value[0] / b->value[0]));
  if (recording<T>({&a, &b})) {
    out->requires_grad = true;
    out->parents = {a, b};
    out->backward_fn = [a, b](NodeT<T>& nd) {
      const T bv = b->value[0];
      if (a->requires_grad)
        a->accumulate(TensorT<T>::scalar(nd.grad[0] / bv));
      if (b->requires_grad)
        b->accumulate(
            TensorT<T>::scalar(-nd.grad[0] * a->value[0] / (bv * bv)));
    };
  }
  return out;
}

}  // namespace runet
