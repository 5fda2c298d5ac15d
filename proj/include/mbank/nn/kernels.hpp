// Copyright (c) 2026 The ModalityBank Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "mbank/nn/blas.hpp"
#include "mbank/nn/tensor.hpp"

// Raw compute kernels behind the differentiable ops. Everything here works on
// NCHW tensors and keeps no state.
namespace mbank::nn::kernels {

struct ConvGeometry {
  std::size_t n = 0, channels = 0, height = 0, width = 0;  // image side
  std::size_t kh = 0, kw = 0, stride = 1, pad = 0;
  std::size_t out_h = 0, out_w = 0;                         // sliding-window side

  std::size_t col_rows() const { return channels * kh * kw; }
  std::size_t col_cols() const { return n * out_h * out_w; }
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

inline std::size_t conv_transpose_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                             std::size_t pad) {
  return (in - 1) * stride + k - 2 * pad;
}

// Valid output-column range [lo, hi) whose input column ox*stride - pad + j
// falls inside [0, width).
inline void valid_range(std::size_t out, std::size_t extent, std::size_t stride, std::size_t pad,
                        std::size_t j, std::size_t& lo, std::size_t& hi) {
  const long off = static_cast<long>(j) - static_cast<long>(pad);
  long l = off >= 0 ? 0 : (-off + static_cast<long>(stride) - 1) / static_cast<long>(stride);
  long h = (static_cast<long>(extent) - 1 - off);
  h = h < 0 ? 0 : h / static_cast<long>(stride) + 1;
  l = std::min<long>(l, static_cast<long>(out));
  h = std::min<long>(std::max(h, l), static_cast<long>(out));
  lo = static_cast<std::size_t>(l);
  hi = static_cast<std::size_t>(h);
}

// col[(c*kh+i)*kw+j, (n*out_h+oy)*out_w+ox] = img[n,c,oy*s-p+i,ox*s-p+j] (0 outside).
template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  const std::size_t cols = g.col_cols();
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      std::size_t ylo, yhi;
      valid_range(g.out_h, g.height, g.stride, g.pad, i, ylo, yhi);
      for (std::size_t j = 0; j < g.kw; ++j) {
        std::size_t xlo, xhi;
        valid_range(g.out_w, g.width, g.stride, g.pad, j, xlo, xhi);
        T* row = col + ((c * g.kh + i) * g.kw + j) * cols;
        for (std::size_t b = 0; b < g.n; ++b) {
          const T* src = img + (b * g.channels + c) * g.height * g.width;
          T* dst = row + b * plane;
          std::fill(dst, dst + ylo * g.out_w, T{0});
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const std::size_t y = oy * g.stride + i - g.pad;
            T* d = dst + oy * g.out_w;
            std::fill(d, d + xlo, T{0});
            const T* s = src + y * g.width + (xlo * g.stride + j - g.pad);
            if (g.stride == 1) {
              std::copy(s, s + (xhi - xlo), d + xlo);
            } else {
              for (std::size_t ox = xlo; ox < xhi; ++ox) d[ox] = s[(ox - xlo) * g.stride];
            }
            std::fill(d + xhi, d + g.out_w, T{0});
          }
          std::fill(dst + yhi * g.out_w, dst + plane, T{0});
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into img (img must be zeroed
// by the caller if accumulation is not wanted).
template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* img) {
  const std::size_t cols = g.col_cols();
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      std::size_t ylo, yhi;
      valid_range(g.out_h, g.height, g.stride, g.pad, i, ylo, yhi);
      for (std::size_t j = 0; j < g.kw; ++j) {
        std::size_t xlo, xhi;
        valid_range(g.out_w, g.width, g.stride, g.pad, j, xlo, xhi);
        const T* row = col + ((c * g.kh + i) * g.kw + j) * cols;
        for (std::size_t b = 0; b < g.n; ++b) {
          T* dst = img + (b * g.channels + c) * g.height * g.width;
          const T* src = row + b * plane;
          for (std::size_t oy = ylo; oy < yhi; ++oy) {
            const std::size_t y = oy * g.stride + i - g.pad;
            T* d = dst + y * g.width + (xlo * g.stride + j - g.pad);
            const T* s = src + oy * g.out_w;
            if (g.stride == 1) {
              for (std::size_t ox = xlo; ox < xhi; ++ox) d[ox - xlo] += s[ox];
            } else {
              for (std::size_t ox = xlo; ox < xhi; ++ox) d[(ox - xlo) * g.stride] += s[ox];
            }
          }
        }
      }
    }
  }
}

// Per-thread scratch buffers, reused across calls to avoid zero-filled
// allocations in the hot path. Contents are unspecified on return.
template <typename T, int Slot>
T* scratch(std::size_t n) {
  thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf.data();
}

// [N,C,P] <-> [C,N*P] layout shuffles used around the batched GEMMs.
template <typename T>
void nchw_to_cm(const T* src, std::size_t n, std::size_t c, std::size_t plane, T* dst) {
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* s = src + (b * c + ch) * plane;
      T* d = dst + ch * n * plane + b * plane;
      std::copy(s, s + plane, d);
    }
}

template <typename T>
void cm_to_nchw(const T* src, std::size_t n, std::size_t c, std::size_t plane, T* dst) {
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* s = src + ch * n * plane + b * plane;
      T* d = dst + (b * c + ch) * plane;
      std::copy(s, s + plane, d);
    }
}

template <typename T>
void add_channel_bias(Tensor<T>& y, const Tensor<T>* bias) {
  if (!bias) return;
  const std::size_t n = y.dim(0), c = y.dim(1), plane = y.dim(2) * y.dim(3);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      T* p = y.ptr() + (b * c + ch) * plane;
      const T v = (*bias)[ch];
      for (std::size_t i = 0; i < plane; ++i) p[i] += v;
    }
}

template <typename T>
void channel_sums(const Tensor<T>& y, Tensor<T>& out) {
  const std::size_t n = y.dim(0), c = y.dim(1), plane = y.dim(2) * y.dim(3);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* p = y.ptr() + (b * c + ch) * plane;
      T s{0};
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
      out[ch] += s;
    }
}

inline void check_conv_args(const Shape& x, const Shape& w, std::size_t stride, std::size_t pad,
                            bool transposed) {
  if (x.size() != 4 || w.size() != 4) {
    throw ShapeError("conv: expected 4-d input and kernel, got " + shape_str(x) + " and " +
                     shape_str(w));
  }
  if (stride < 1) throw ShapeError("conv: stride must be >= 1");
  if (x[1] != w[0] && transposed) {
    throw ShapeError("conv_transpose: input channels " + std::to_string(x[1]) +
                     " do not match kernel " + shape_str(w));
  }
  if (x[1] != w[1] && !transposed) {
    throw ShapeError("conv: input channels " + std::to_string(x[1]) + " do not match kernel " +
                     shape_str(w));
  }
  if (!transposed && (w[2] > x[2] + 2 * pad || w[3] > x[3] + 2 * pad)) {
    throw ShapeError("conv: kernel " + shape_str(w) + " larger than padded input " +
                     shape_str(x));
  }
  if (transposed && ((x[2] - 1) * stride + w[2] <= 2 * pad || (x[3] - 1) * stride + w[3] <= 2 * pad)) {
    throw ShapeError("conv_transpose: padding too large for " + shape_str(x));
  }
}

inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, std::size_t stride,
                                  std::size_t pad) {
  ConvGeometry g;
  g.n = x[0];
  g.channels = x[1];
  g.height = x[2];
  g.width = x[3];
  g.kh = w[2];
  g.kw = w[3];
  g.stride = stride;
  g.pad = pad;
  g.out_h = conv_out_extent(g.height, g.kh, stride, pad);
  g.out_w = conv_out_extent(g.width, g.kw, stride, pad);
  return g;
}

// Geometry of the conv whose input-gradient a transposed conv computes: the
// image side is the transposed conv's output.
inline ConvGeometry conv_transpose_geometry(const Shape& x, const Shape& w, std::size_t stride,
                                            std::size_t pad) {
  ConvGeometry g;
  g.n = x[0];
  g.channels = w[1];
  g.height = conv_transpose_out_extent(x[2], w[2], stride, pad);
  g.width = conv_transpose_out_extent(x[3], w[3], stride, pad);
  g.kh = w[2];
  g.kw = w[3];
  g.stride = stride;
  g.pad = pad;
  g.out_h = x[2];
  g.out_w = x[3];
  return g;
}

/// Cross-correlation. x [N,C,H,W], w [O,C,kh,kw], bias [O] or null.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                         std::size_t stride, std::size_t pad) {
  check_conv_args(x.shape(), w.shape(), stride, pad, false);
  const ConvGeometry g = conv_geometry(x.shape(), w.shape(), stride, pad);
  const std::size_t out_c = w.dim(0);
  if (bias && (bias->rank() != 1 || bias->dim(0) != out_c)) {
    throw ShapeError("conv: bias " + shape_str(bias->shape()) + " for " + std::to_string(out_c) +
                     " output channels");
  }
  T* col = scratch<T, 0>(g.col_rows() * g.col_cols());
  im2col(x.ptr(), g, col);
  Tensor<T> y(Shape{g.n, out_c, g.out_h, g.out_w});
  const std::size_t plane = g.out_h * g.out_w;
  if (g.n == 1) {
    blas::gemm<T>(false, false, int(out_c), int(g.col_cols()), int(g.col_rows()), T{1}, w.ptr(),
                  int(g.col_rows()), col, int(g.col_cols()), T{0}, y.ptr(),
                  int(g.col_cols()));
  } else {
    T* ym = scratch<T, 1>(out_c * g.col_cols());
    blas::gemm<T>(false, false, int(out_c), int(g.col_cols()), int(g.col_rows()), T{1}, w.ptr(),
                  int(g.col_rows()), col, int(g.col_cols()), T{0}, ym, int(g.col_cols()));
    cm_to_nchw(ym, g.n, out_c, plane, y.ptr());
  }
  add_channel_bias(y, bias);
  return y;
}

/// Gradients of conv2d. Any of dx/dw/db may be null to skip.
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                     std::size_t stride, std::size_t pad, Tensor<T>* dx, Tensor<T>* dw,
                     Tensor<T>* db) {
  const ConvGeometry g = conv_geometry(x.shape(), w.shape(), stride, pad);
  const std::size_t out_c = w.dim(0);
  const std::size_t plane = g.out_h * g.out_w;
  const T* dyp = dy.ptr();
  if (g.n != 1) {
    T* dym = scratch<T, 1>(out_c * g.col_cols());
    nchw_to_cm(dy.ptr(), g.n, out_c, plane, dym);
    dyp = dym;
  }
  if (db) channel_sums(dy, *db);
  T* col = scratch<T, 0>(g.col_rows() * g.col_cols());
  if (dw) {
    im2col(x.ptr(), g, col);
    blas::gemm<T>(false, true, int(out_c), int(g.col_rows()), int(g.col_cols()), T{1}, dyp,
                  int(g.col_cols()), col, int(g.col_cols()), T{1}, dw->ptr(),
                  int(g.col_rows()));
  }
  if (dx) {
    blas::gemm<T>(true, false, int(g.col_rows()), int(g.col_cols()), int(out_c), T{1}, w.ptr(),
                  int(g.col_rows()), dyp, int(g.col_cols()), T{0}, col, int(g.col_cols()));
    col2im(col, g, dx->ptr());
  }
}

/// Transposed conv. x [N,Ci,H,W], w [Ci,Co,kh,kw], bias [Co] or null.
/// Equals the input-gradient of conv2d with the same kernel.
template <typename T>
Tensor<T> conv_transpose2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                                   std::size_t stride, std::size_t pad) {
  check_conv_args(x.shape(), w.shape(), stride, pad, true);
  const ConvGeometry g = conv_transpose_geometry(x.shape(), w.shape(), stride, pad);
  const std::size_t in_c = w.dim(0), out_c = w.dim(1);
  if (bias && (bias->rank() != 1 || bias->dim(0) != out_c)) {
    throw ShapeError("conv_transpose: bias " + shape_str(bias->shape()) + " for " +
                     std::to_string(out_c) + " output channels");
  }
  const std::size_t plane = g.out_h * g.out_w;
  const T* xp = x.ptr();
  if (g.n != 1) {
    T* xm = scratch<T, 1>(in_c * g.col_cols());
    nchw_to_cm(x.ptr(), g.n, in_c, plane, xm);
    xp = xm;
  }
  T* col = scratch<T, 0>(g.col_rows() * g.col_cols());
  blas::gemm<T>(true, false, int(g.col_rows()), int(g.col_cols()), int(in_c), T{1}, w.ptr(),
                int(g.col_rows()), xp, int(g.col_cols()), T{0}, col, int(g.col_cols()));
  Tensor<T> y(Shape{g.n, out_c, g.height, g.width});
  col2im(col, g, y.ptr());
  add_channel_bias(y, bias);
  return y;
}

template <typename T>
void conv_transpose2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                               std::size_t stride, std::size_t pad, Tensor<T>* dx, Tensor<T>* dw,
                               Tensor<T>* db) {
  const ConvGeometry g = conv_transpose_geometry(x.shape(), w.shape(), stride, pad);
  const std::size_t in_c = w.dim(0);
  const std::size_t plane = g.out_h * g.out_w;
  if (db) channel_sums(dy, *db);
  if (!dx && !dw) return;
  T* col = scratch<T, 0>(g.col_rows() * g.col_cols());
  im2col(dy.ptr(), g, col);
  if (dw) {
    const T* xp = x.ptr();
    if (g.n != 1) {
      T* xm = scratch<T, 1>(in_c * g.col_cols());
      nchw_to_cm(x.ptr(), g.n, in_c, plane, xm);
      xp = xm;
    }
    blas::gemm<T>(false, true, int(in_c), int(g.col_rows()), int(g.col_cols()), T{1}, xp,
                  int(g.col_cols()), col, int(g.col_cols()), T{1}, dw->ptr(),
                  int(g.col_rows()));
  }
  if (dx) {
    T* dxm = scratch<T, 1>(in_c * g.col_cols());
    blas::gemm<T>(false, false, int(in_c), int(g.col_cols()), int(g.col_rows()), T{1}, w.ptr(),
                  int(g.col_rows()), col, int(g.col_cols()), T{0}, dxm, int(g.col_cols()));
    for (std::size_t b = 0; b < g.n; ++b)
      for (std::size_t ch = 0; ch < in_c; ++ch) {
        const T* s = dxm + ch * g.n * plane + b * plane;
        T* d = dx->ptr() + (b * in_c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) d[i] += s[i];
      }
  }
}

/// Per-(sample, channel) normalization over the spatial plane.
template <typename T>
struct InstanceNormCache {
  Tensor<T> normalized;    // x-hat, same shape as x
  std::vector<T> inv_std;  // one per (n, c)
};

template <typename T>
Tensor<T> instance_norm_forward(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift,
                                T eps, InstanceNormCache<T>& cache) {
  if (x.rank() != 4 || scale.size() != x.dim(1) || shift.size() != x.dim(1)) {
    throw ShapeError("instance_norm: input " + shape_str(x.shape()) + " with scale " +
                     shape_str(scale.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> y(x.shape());
  cache.normalized = Tensor<T>(x.shape());
  cache.inv_std.assign(n * c, T{0});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * plane;
      const T* xp = x.ptr() + off;
      T mean{0};
      for (std::size_t i = 0; i < plane; ++i) mean += xp[i];
      mean /= static_cast<T>(plane);
      T var{0};
      for (std::size_t i = 0; i < plane; ++i) var += (xp[i] - mean) * (xp[i] - mean);
      var /= static_cast<T>(plane);
      const T inv = T{1} / std::sqrt(var + eps);
      cache.inv_std[b * c + ch] = inv;
      T* hp = cache.normalized.ptr() + off;
      T* yp = y.ptr() + off;
      for (std::size_t i = 0; i < plane; ++i) {
        hp[i] = (xp[i] - mean) * inv;
        yp[i] = scale[ch] * hp[i] + shift[ch];
      }
    }
  return y;
}

template <typename T>
void instance_norm_backward(const InstanceNormCache<T>& cache, const Tensor<T>& scale,
                            const Tensor<T>& dy, Tensor<T>* dx, Tensor<T>* dscale,
                            Tensor<T>* dshift) {
  const std::size_t n = dy.dim(0), c = dy.dim(1), plane = dy.dim(2) * dy.dim(3);
  const T count = static_cast<T>(plane);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * plane;
      const T* g = dy.ptr() + off;
      const T* h = cache.normalized.ptr() + off;
      T sum_g{0}, sum_gh{0};
      for (std::size_t i = 0; i < plane; ++i) {
        sum_g += g[i];
        sum_gh += g[i] * h[i];
      }
      if (dscale) (*dscale)[ch] += sum_gh;
      if (dshift) (*dshift)[ch] += sum_g;
      if (dx) {
        const T k = scale[ch] * cache.inv_std[b * c + ch] / count;
        T* d = dx->ptr() + off;
        for (std::size_t i = 0; i < plane; ++i) d[i] += k * (count * g[i] - sum_g - h[i] * sum_gh);
      }
    }
}

}  // namespace mbank::nn::kernels
