#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "gkd/autodiff.hpp"
#include "gkd/gemm.hpp"
#include "gkd/tensor.hpp"

namespace gkd {

/// Output length of a zero-padded strided convolution along one dimension.
inline std::size_t conv3d_shape(std::size_t in_dim, std::size_t kernel, std::size_t stride,
                                std::size_t pad) {
  if (in_dim < 1 || kernel < 1 || stride < 1) {
    throw ShapeError("conv3d_shape: input, kernel and stride must be >= 1");
  }
  if (in_dim + 2 * pad < kernel) {
    throw ShapeError("conv3d_shape: kernel " + std::to_string(kernel) +
                     " exceeds padded input " + std::to_string(in_dim + 2 * pad));
  }
  return (in_dim + 2 * pad - kernel) / stride + 1;
}

/// Per-dimension (time, height, width) stride and padding.
struct Conv3dGeometry {
  std::array<std::size_t, 3> stride{1, 1, 1};
  std::array<std::size_t, 3> pad{0, 0, 0};
};

namespace conv_detail {

struct Dims {
  std::size_t n, c_in, c_out;
  std::array<std::size_t, 3> in, k, out;
  std::size_t patch() const { return c_in * k[0] * k[1] * k[2]; }
  std::size_t positions() const { return out[0] * out[1] * out[2]; }
  std::size_t in_volume() const { return in[0] * in[1] * in[2]; }
};

template <typename T>
Dims check(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const Conv3dGeometry& g) {
  require_shape(x.rank() == 5, "conv3d: input must be N x C x T x H x W, got " +
                                   shape_string(x.shape()));
  require_shape(w.rank() == 5, "conv3d: weight must be Cout x Cin x kt x kh x kw, got " +
                                   shape_string(w.shape()));
  require_shape(x.dim(1) == w.dim(1), "conv3d: input has " + std::to_string(x.dim(1)) +
                                          " channels but weight expects " +
                                          std::to_string(w.dim(1)));
  require_shape(b.rank() == 1 && b.dim(0) == w.dim(0), "conv3d: bias must have Cout entries");
  Dims d{};
  d.n = x.dim(0);
  d.c_in = x.dim(1);
  d.c_out = w.dim(0);
  for (std::size_t i = 0; i < 3; ++i) {
    d.in[i] = x.dim(2 + i);
    d.k[i] = w.dim(2 + i);
    d.out[i] = conv3d_shape(d.in[i], d.k[i], g.stride[i], g.pad[i]);
  }
  return d;
}

// Output positions [lo, hi) whose input index o * stride + k - pad lies in [0, in).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in,
                                                       std::size_t stride, std::size_t pad,
                                                       std::size_t k) {
  const std::size_t lo = std::min(out, k < pad ? (pad - k + stride - 1) / stride : 0);
  const std::size_t end = pad + in > k ? (pad + in - k + stride - 1) / stride : 0;
  return {lo, std::max(lo, std::min(out, end))};
}

// cols[(c, kt, kh, kw) x (ot, oh, ow)] for one sample.
template <typename T>
void im2col(const T* x, const Dims& d, const Conv3dGeometry& g, T* cols) {
  const std::size_t positions = d.positions();
  std::size_t row = 0;
  for (std::size_t c = 0; c < d.c_in; ++c) {
    const T* xc = x + c * d.in_volume();
    for (std::size_t kt = 0; kt < d.k[0]; ++kt) {
      for (std::size_t kh = 0; kh < d.k[1]; ++kh) {
        for (std::size_t kw = 0; kw < d.k[2]; ++kw, ++row) {
          T* out = cols + row * positions;
          for (std::size_t ot = 0; ot < d.out[0]; ++ot) {
            const std::ptrdiff_t it = static_cast<std::ptrdiff_t>(ot * g.stride[0] + kt) -
                                      static_cast<std::ptrdiff_t>(g.pad[0]);
            const bool t_ok = it >= 0 && it < static_cast<std::ptrdiff_t>(d.in[0]);
            for (std::size_t oh = 0; oh < d.out[1]; ++oh) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride[1] + kh) -
                                        static_cast<std::ptrdiff_t>(g.pad[1]);
              const bool h_ok = t_ok && ih >= 0 && ih < static_cast<std::ptrdiff_t>(d.in[1]);
              T* dst = out + (ot * d.out[1] + oh) * d.out[2];
              if (!h_ok) {
                std::fill(dst, dst + d.out[2], T{0});
                continue;
              }
              const T* src = xc + (static_cast<std::size_t>(it) * d.in[1] +
                                   static_cast<std::size_t>(ih)) * d.in[2];
              const auto [lo, hi] = valid_range(d.out[2], d.in[2], g.stride[2], g.pad[2], kw);
              std::fill(dst, dst + lo, T{0});
              const T* s0 = src + (lo * g.stride[2] + kw - g.pad[2]);
              if (g.stride[2] == 1) {
                std::copy(s0, s0 + (hi - lo), dst + lo);
              } else {
                for (std::size_t ow = lo; ow < hi; ++ow) dst[ow] = s0[(ow - lo) * g.stride[2]];
              }
              std::fill(dst + hi, dst + d.out[2], T{0});
            }
          }
        }
      }
    }
  }
}

// Scatter-add of cols back into one sample's input gradient.
template <typename T>
void col2im(const T* cols, const Dims& d, const Conv3dGeometry& g, T* dx) {
  const std::size_t positions = d.positions();
  std::size_t row = 0;
  for (std::size_t c = 0; c < d.c_in; ++c) {
    T* dxc = dx + c * d.in_volume();
    for (std::size_t kt = 0; kt < d.k[0]; ++kt) {
      for (std::size_t kh = 0; kh < d.k[1]; ++kh) {
        for (std::size_t kw = 0; kw < d.k[2]; ++kw, ++row) {
          const T* in = cols + row * positions;
          for (std::size_t ot = 0; ot < d.out[0]; ++ot) {
            const std::ptrdiff_t it = static_cast<std::ptrdiff_t>(ot * g.stride[0] + kt) -
                                      static_cast<std::ptrdiff_t>(g.pad[0]);
            if (it < 0 || it >= static_cast<std::ptrdiff_t>(d.in[0])) continue;
            for (std::size_t oh = 0; oh < d.out[1]; ++oh) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride[1] + kh) -
                                        static_cast<std::ptrdiff_t>(g.pad[1]);
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(d.in[1])) continue;
              const T* src = in + (ot * d.out[1] + oh) * d.out[2];
              T* dst = dxc + (static_cast<std::size_t>(it) * d.in[1] +
                              static_cast<std::size_t>(ih)) * d.in[2];
              const auto [lo, hi] = valid_range(d.out[2], d.in[2], g.stride[2], g.pad[2], kw);
              T* d0 = dst + (lo * g.stride[2] + kw - g.pad[2]);
              const std::size_t st = g.stride[2];
              for (std::size_t ow = lo; ow < hi; ++ow) d0[(ow - lo) * st] += src[ow];
            }
          }
        }
      }
    }
  }
}

template <typename T>
std::vector<T>& scratch() {
  thread_local std::vector<T> buffer;
  return buffer;
}

}  // namespace conv_detail

/// 3D convolution of a batch [N x Cin x T x H x W], or of a single clip
/// [Cin x T x H x W]. Kernel extents come from the weight shape.
template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                         const Conv3dGeometry& geometry) {
  const bool single = input.rank() == 4;
  const Tensor<T> batched = single ? input.reshaped(Shape{1, input.dim(0), input.dim(1),
                                                          input.dim(2), input.dim(3)})
                                   : Tensor<T>();
  const Tensor<T>& x = single ? batched : input;
  const auto d = conv_detail::check(x, weight, bias, geometry);
  Tensor<T> y(Shape{d.n, d.c_out, d.out[0], d.out[1], d.out[2]});
  auto& cols = conv_detail::scratch<T>();
  cols.resize(d.patch() * d.positions());
  const std::size_t p = d.positions();
  for (std::size_t n = 0; n < d.n; ++n) {
    conv_detail::im2col(x.ptr() + n * d.c_in * d.in_volume(), d, geometry, cols.data());
    T* yn = y.ptr() + n * d.c_out * p;
    gemm(Trans::no, Trans::no, d.c_out, p, d.patch(), weight.ptr(), d.patch(), cols.data(), p,
         yn, p, false);
    for (std::size_t co = 0; co < d.c_out; ++co) {
      const T bv = bias[co];
      T* row = yn + co * p;
      for (std::size_t i = 0; i < p; ++i) row[i] += bv;
    }
  }
  if (single) y.reshape(Shape{d.c_out, d.out[0], d.out[1], d.out[2]});
  return y;
}

namespace ops {

template <typename T>
Var conv3d(Tape<T>& tape, Var x, Var w, Var b, const Conv3dGeometry& geometry) {
  Var r = tape.result(conv3d_forward(tape.value(x), tape.value(w), tape.value(b), geometry),
                      {x, w, b});
  if (!tape.requires_grad(r)) return r;
  tape.record([x, w, b, r, geometry](Tape<T>& t) {
    const Tensor<T>& xv = t.value(x);
    const Tensor<T>& wv = t.value(w);
    const auto d = conv_detail::check(xv, wv, t.value(b), geometry);
    const Tensor<T>& gy = t.grad(r);
    const std::size_t p = d.positions();
    const bool need_x = t.requires_grad(x);
    const bool need_w = t.requires_grad(w);
    const bool need_b = t.requires_grad(b);
    auto& cols = conv_detail::scratch<T>();
    cols.resize(d.patch() * p);
    for (std::size_t n = 0; n < d.n; ++n) {
      const T* gyn = gy.ptr() + n * d.c_out * p;
      if (need_b) {
        Tensor<T>& gb = t.grad(b);
        for (std::size_t co = 0; co < d.c_out; ++co) {
          T acc{0};
          const T* row = gyn + co * p;
          for (std::size_t i = 0; i < p; ++i) acc += row[i];
          gb[co] += acc;
        }
      }
      if (need_w) {
        conv_detail::im2col(xv.ptr() + n * d.c_in * d.in_volume(), d, geometry, cols.data());
        gemm(Trans::no, Trans::yes, d.c_out, d.patch(), p, gyn, p, cols.data(), p,
             t.grad(w).ptr(), d.patch(), true);
      }
      if (need_x) {
        gemm(Trans::yes, Trans::no, d.patch(), p, d.c_out, wv.ptr(), d.patch(), gyn, p,
             cols.data(), p, false);
        conv_detail::col2im(cols.data(), d, geometry,
                            t.grad(x).ptr() + n * d.c_in * d.in_volume());
      }
    }
  });
  return r;
}

}  // namespace ops
}  // namespace gkd
