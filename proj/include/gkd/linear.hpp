#pragma once

#include <cstddef>
#include <string>

#include "gkd/autodiff.hpp"
#include "gkd/gemm.hpp"
#include "gkd/tensor.hpp"

namespace gkd {

namespace linear_detail {

struct Dims {
  std::size_t batch, in, out;
  bool vector_input;
};

template <typename T>
Dims check(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_shape(w.rank() == 2, "linear: weight must be M x N, got " + shape_string(w.shape()));
  require_shape(b.rank() == 1 && b.dim(0) == w.dim(0),
                "linear: bias must have " + std::to_string(w.dim(0)) + " entries, got " +
                    shape_string(b.shape()));
  require_shape(x.rank() == 1 || x.rank() == 2,
                "linear: input must be N or B x N, got " + shape_string(x.shape()));
  const std::size_t in = x.shape().back();
  require_shape(in == w.dim(1), "linear: input width " + std::to_string(in) +
                                    " does not match weight " + shape_string(w.shape()));
  return Dims{x.rank() == 2 ? x.dim(0) : 1, in, w.dim(0), x.rank() == 1};
}

}  // namespace linear_detail

/// weight * input + bias, applied row-wise to a [B x N] batch.
template <typename T>
Tensor<T> linear_forward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  const auto d = linear_detail::check(input, weight, bias);
  Tensor<T> y(d.vector_input ? Shape{d.out} : Shape{d.batch, d.out});
  gemm(Trans::no, Trans::yes, d.batch, d.out, d.in, input.ptr(), d.in, weight.ptr(), d.in, y.ptr(),
       d.out, false);
  for (std::size_t r = 0; r < d.batch; ++r) {
    T* row = y.ptr() + r * d.out;
    for (std::size_t j = 0; j < d.out; ++j) row[j] += bias[j];
  }
  return y;
}

namespace ops {

template <typename T>
Var linear(Tape<T>& tape, Var x, Var w, Var b) {
  Var r = tape.result(linear_forward(tape.value(x), tape.value(w), tape.value(b)), {x, w, b});
  if (!tape.requires_grad(r)) return r;
  tape.record([x, w, b, r](Tape<T>& t) {
    const Tensor<T>& xv = t.value(x);
    const Tensor<T>& wv = t.value(w);
    const auto d = linear_detail::check(xv, wv, t.value(b));
    const Tensor<T>& gy = t.grad(r);
    if (t.requires_grad(x)) {
      gemm(Trans::no, Trans::no, d.batch, d.in, d.out, gy.ptr(), d.out, wv.ptr(), d.in,
           t.grad(x).ptr(), d.in, true);
    }
    if (t.requires_grad(w)) {
      gemm(Trans::yes, Trans::no, d.out, d.in, d.batch, gy.ptr(), d.out, xv.ptr(), d.in,
           t.grad(w).ptr(), d.in, true);
    }
    if (t.requires_grad(b)) {
      Tensor<T>& gb = t.grad(b);
      for (std::size_t r = 0; r < d.batch; ++r)
        for (std::size_t j = 0; j < d.out; ++j) gb[j] += gy[r * d.out + j];
    }
  });
  return r;
}

}  // namespace ops
}  // namespace gkd
