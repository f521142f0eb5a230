#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "polypseg/autodiff.hpp"
#include "polypseg/error.hpp"
#include "polypseg/rng.hpp"
#include "polypseg/tensor.hpp"

namespace polypseg {

template <class T>
struct Conv2dParams {
  Tensor<T> weights;  // [out_ch, in_ch, k, k]
  Tensor<T> bias;     // [out_ch]
  std::size_t stride = 1;
  std::size_t padding = 0;
};

template <class T>
struct PoolResult {
  Tensor<T> output;
  LabelTensor indices;  // flat position inside each 2x2 window, 0..3
};

enum class NormMode { train, eval };

template <class T>
struct BatchNormState {
  Tensor<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;
  NormMode mode = NormMode::train;
};

enum class DropoutMode { off, train, mc_sample };

struct DropoutConfig {
  double rate = 0.5;
  DropoutMode mode = DropoutMode::train;
};

namespace kernels {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

struct ConvGeom {
  std::size_t n, c, h, w;  // input (conv-side) dims
  std::size_t k, stride, pad;
  std::size_t ho, wo;

  std::size_t rows() const { return c * k * k; }
  std::size_t cols() const { return n * ho * wo; }
};

inline std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride,
                            std::size_t pad, const char* what) {
  if (in + 2 * pad < k) {
    throw ShapeError(std::string(what) + ": kernel larger than padded input");
  }
  return (in + 2 * pad - k) / stride + 1;
}

// Convolutions run one sample at a time: the column buffer of a single
// image stays cache resident and each GEMM writes straight into NCHW.

// Valid output columns [lo, hi) for kernel tap kw when stride is 1.
inline std::pair<std::size_t, std::size_t> valid_span(const ConvGeom& g, std::size_t kw) {
  const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(g.pad) -
                                                           static_cast<std::ptrdiff_t>(kw));
  const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(
      static_cast<std::ptrdiff_t>(g.wo),
      static_cast<std::ptrdiff_t>(g.w + g.pad) - static_cast<std::ptrdiff_t>(kw));
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(std::max(lo, hi))};
}

// col is [c*k*k, ho*wo] for one sample x [c, h, w], row-major.
template <class T>
void im2col(const T* x, const ConvGeom& g, T* col) {
  const std::size_t P = g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c) {
    const T* plane = x + c * g.h * g.w;
    for (std::size_t kh = 0; kh < g.k; ++kh) {
      for (std::size_t kw = 0; kw < g.k; ++kw) {
        T* row = col + ((c * g.k + kh) * g.k + kw) * P;
        const auto [lo, hi] = valid_span(g, kw);
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          T* out = row + oh * g.wo;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(out, out + g.wo, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(ih) * g.w;
          if (g.stride == 1) {
            std::fill(out, out + lo, T{0});
            std::copy(src + lo + kw - g.pad, src + hi + kw - g.pad, out + lo);
            std::fill(out + hi, out + g.wo, T{0});
            continue;
          }
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kw) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            out[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.w)) ? T{0} : src[iw];
          }
        }
      }
    }
  }
}

// Adjoint of im2col for one sample: scatters-and-adds col back into x.
template <class T>
void col2im(const T* col, const ConvGeom& g, T* x) {
  const std::size_t P = g.ho * g.wo;
  for (std::size_t c = 0; c < g.c; ++c) {
    T* plane = x + c * g.h * g.w;
    for (std::size_t kh = 0; kh < g.k; ++kh) {
      for (std::size_t kw = 0; kw < g.k; ++kw) {
        const T* row = col + ((c * g.k + kh) * g.k + kw) * P;
        const auto [lo, hi] = valid_span(g, kw);
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) -
                                    static_cast<std::ptrdiff_t>(g.pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h)) continue;
          T* dst = plane + static_cast<std::size_t>(ih) * g.w;
          const T* in = row + oh * g.wo;
          if (g.stride == 1) {
            for (std::size_t ow = lo; ow < hi; ++ow) dst[ow + kw - g.pad] += in[ow];
            continue;
          }
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kw) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.w)) dst[iw] += in[ow];
          }
        }
      }
    }
  }
}

// Per-thread buffer reused across calls; contents are scratch.
template <class T>
T* scratch(std::size_t size) {
  thread_local std::vector<T> buf;
  if (buf.size() < size) buf.resize(size);
  return buf.data();
}

inline bool is_pointwise(const ConvGeom& g) { return g.k == 1 && g.stride == 1 && g.pad == 0; }

// Columns of sample i; a pointwise conv reads the input plane directly.
template <class T>
const T* sample_columns(const T* x, const ConvGeom& g, std::size_t i, T* buf) {
  const T* xi = x + i * g.c * g.h * g.w;
  if (is_pointwise(g)) return xi;
  im2col(xi, g, buf);
  return buf;
}

/// y = W * im2col(x) + b. Weights [cout, c, k, k].
template <class T>
Tensor<T> conv_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b,
                       const ConvGeom& g) {
  const std::size_t cout = w.dim(0), P = g.ho * g.wo;
  Tensor<T> out({g.n, cout, g.ho, g.wo});
  T* buf = scratch<T>(g.rows() * P);
  const CMapMat<T> wm(w.data(), cout, g.rows());
  for (std::size_t i = 0; i < g.n; ++i) {
    const T* col = sample_columns(x.data(), g, i, buf);
    MapMat<T> yi(out.data() + i * cout * P, cout, P);
    yi.noalias() = wm * CMapMat<T>(col, g.rows(), P);
    if (b) {
      for (std::size_t co = 0; co < cout; ++co) yi.row(co).array() += (*b)[co];
    }
  }
  return out;
}

/// dx += col2im(W^T * gy), gy given in NCHW with the conv output geometry.
template <class T>
void conv_backward_data(const Tensor<T>& gy, const Tensor<T>& w, const ConvGeom& g,
                        T* dx) {
  const std::size_t cout = w.dim(0), P = g.ho * g.wo;
  const CMapMat<T> wm(w.data(), cout, g.rows());
  T* buf = scratch<T>(g.rows() * P);
  for (std::size_t i = 0; i < g.n; ++i) {
    const CMapMat<T> gyi(gy.data() + i * cout * P, cout, P);
    T* dxi = dx + i * g.c * g.h * g.w;
    if (is_pointwise(g)) {
      MapMat<T>(dxi, g.c, P).noalias() += wm.transpose() * gyi;
    } else {
      MapMat<T> dcol(buf, g.rows(), P);
      dcol.noalias() = wm.transpose() * gyi;
      col2im(buf, g, dxi);
    }
  }
}

/// dW += gy * im2col(x)^T, with gy in NCHW over the conv output geometry.
template <class T>
void conv_backward_weights(const Tensor<T>& gy, const T* x, const ConvGeom& g,
                           std::size_t cout, T* dw) {
  const std::size_t P = g.ho * g.wo;
  MapMat<T> dwm(dw, cout, g.rows());
  T* buf = scratch<T>(g.rows() * P);
  for (std::size_t i = 0; i < g.n; ++i) {
    const T* col = sample_columns(x, g, i, buf);
    dwm.noalias() += CMapMat<T>(gy.data() + i * cout * P, cout, P) *
                     CMapMat<T>(col, g.rows(), P).transpose();
  }
}

template <class T>
void bias_backward(const Tensor<T>& gy, T* db) {
  const std::size_t n = gy.dim(0), c = gy.dim(1), P = gy.dim(2) * gy.dim(3);
  for (std::size_t ch = 0; ch < c; ++ch) {
    T acc{};
    for (std::size_t i = 0; i < n; ++i) {
      const T* p = gy.data() + (i * c + ch) * P;
      for (std::size_t j = 0; j < P; ++j) acc += p[j];
    }
    db[ch] += acc;
  }
}

inline ConvGeom conv_geom(const Shape& xs, const Shape& ws, std::size_t stride,
                          std::size_t pad) {
  ConvGeom g{xs[0], xs[1], xs[2], xs[3], ws[2], stride, pad, 0, 0};
  g.ho = conv_out(g.h, g.k, stride, pad, "conv2d");
  g.wo = conv_out(g.w, g.k, stride, pad, "conv2d");
  return g;
}

// Geometry of the convolution whose backward-data is the transposed conv
// from x (the conv output side) to y (the conv input side).
inline ConvGeom transposed_geom(const Shape& xs, const Shape& ws, std::size_t stride,
                                std::size_t pad) {
  const std::ptrdiff_t hy = (static_cast<std::ptrdiff_t>(xs[2]) - 1) *
                                static_cast<std::ptrdiff_t>(stride) -
                            2 * static_cast<std::ptrdiff_t>(pad) +
                            static_cast<std::ptrdiff_t>(ws[2]);
  const std::ptrdiff_t wy = (static_cast<std::ptrdiff_t>(xs[3]) - 1) *
                                static_cast<std::ptrdiff_t>(stride) -
                            2 * static_cast<std::ptrdiff_t>(pad) +
                            static_cast<std::ptrdiff_t>(ws[3]);
  if (hy <= 0 || wy <= 0) {
    throw ShapeError("transposed_conv2d: non-positive output size");
  }
  ConvGeom g{xs[0], ws[1], static_cast<std::size_t>(hy), static_cast<std::size_t>(wy),
             ws[2], stride, pad, xs[2], xs[3]};
  return g;
}

}  // namespace kernels

namespace detail {

template <class T>
void check_conv_args(const Shape& xs, const Shape& ws, const Shape* bs,
                     std::size_t stride, bool transposed) {
  const char* what = transposed ? "transposed_conv2d" : "conv2d";
  if (stride == 0) throw InvalidArgument(std::string(what) + ": stride must be >= 1");
  if (xs.size() != 4) throw ShapeError(std::string(what) + ": input must be NCHW, got " + shape_str(xs));
  if (ws.size() != 4) throw ShapeError(std::string(what) + ": weights must be rank 4, got " + shape_str(ws));
  if (ws[2] != ws[3]) throw ShapeError(std::string(what) + ": kernels must be square");
  const std::size_t in_ch = transposed ? ws[0] : ws[1];
  const std::size_t out_ch = transposed ? ws[1] : ws[0];
  if (xs[1] != in_ch) {
    throw ShapeError(std::string(what) + ": input has " + std::to_string(xs[1]) +
                     " channels, weights expect " + std::to_string(in_ch));
  }
  if (bs && (bs->size() != 1 || (*bs)[0] != out_ch)) {
    throw ShapeError(std::string(what) + ": bias shape " + shape_str(*bs) +
                     " does not match " + std::to_string(out_ch) + " output channels");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolutions

/// Cross-correlation with zero padding. w is [out_ch, in_ch, k, k].
template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, std::optional<Var<T>> b, std::size_t stride,
              std::size_t pad) {
  const Shape bshape = b ? b->shape() : Shape{};
  detail::check_conv_args<T>(x.shape(), w.shape(), b ? &bshape : nullptr, stride, false);
  const auto geom = kernels::conv_geom(x.shape(), w.shape(), stride, pad);
  std::vector<NodeId> parents{x.id, w.id};
  if (b) parents.push_back(b->id);
  return x.tape->record(
      "conv2d", std::move(parents),
      [geom](auto in) {
        return kernels::conv_forward(*in[0], *in[1], in.size() > 2 ? in[2] : nullptr, geom);
      },
      [geom](const BackwardContext<T>& c) {
        const auto& w = *c.inputs[1];
        if (auto* dx = c.grad_inputs[0]) {
          kernels::conv_backward_data(c.grad_output, w, geom, dx->data());
        }
        if (auto* dw = c.grad_inputs[1]) {
          kernels::conv_backward_weights(c.grad_output, c.inputs[0]->data(), geom, w.dim(0),
                                         dw->data());
        }
        if (c.grad_inputs.size() > 2 && c.grad_inputs[2]) {
          kernels::bias_backward(c.grad_output, c.grad_inputs[2]->data());
        }
      });
}

/// Adjoint of conv2d with respect to its input. w is [in_ch, out_ch, k, k],
/// i.e. the weights of the convolution that maps out_ch back to in_ch.
/// Output size is (H - 1) * stride - 2 * pad + k.
template <class T>
Var<T> transposed_conv2d(Var<T> x, Var<T> w, std::optional<Var<T>> b, std::size_t stride,
                         std::size_t pad) {
  const Shape bshape = b ? b->shape() : Shape{};
  detail::check_conv_args<T>(x.shape(), w.shape(), b ? &bshape : nullptr, stride, true);
  const auto geom = kernels::transposed_geom(x.shape(), w.shape(), stride, pad);
  std::vector<NodeId> parents{x.id, w.id};
  if (b) parents.push_back(b->id);
  return x.tape->record(
      "transposed_conv2d", std::move(parents),
      [geom](auto in) {
        Tensor<T> y({geom.n, geom.c, geom.h, geom.w});
        kernels::conv_backward_data(*in[0], *in[1], geom, y.data());
        if (in.size() > 2) {
          const std::size_t P = geom.h * geom.w;
          for (std::size_t i = 0; i < geom.n; ++i)
            for (std::size_t ch = 0; ch < geom.c; ++ch) {
              T* p = y.data() + (i * geom.c + ch) * P;
              const T bv = (*in[2])[ch];
              for (std::size_t j = 0; j < P; ++j) p[j] += bv;
            }
        }
        return y;
      },
      [geom](const BackwardContext<T>& c) {
        const auto& w = *c.inputs[1];
        const auto& gy = c.grad_output;
        if (auto* dx = c.grad_inputs[0]) {
          auto gx = kernels::conv_forward(gy, w, static_cast<const Tensor<T>*>(nullptr), geom);
          detail::accumulate(dx, gx);
        }
        if (auto* dw = c.grad_inputs[1]) {
          // Same GEMM as the conv weight gradient with the roles of input and
          // output swapped: x plays the output gradient, gy the conv input.
          kernels::conv_backward_weights(*c.inputs[0], gy.data(), geom, w.dim(0), dw->data());
        }
        if (c.grad_inputs.size() > 2 && c.grad_inputs[2]) {
          kernels::bias_backward(gy, c.grad_inputs[2]->data());
        }
      });
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Conv2dParams<T>& p) {
  Tape<T> tape;
  auto xv = tape.leaf(x);
  auto wv = tape.leaf(p.weights);
  auto bv = tape.leaf(p.bias);
  return conv2d(xv, wv, std::optional<Var<T>>(bv), p.stride, p.padding).value();
}

template <class T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const Conv2dParams<T>& p) {
  Tape<T> tape;
  auto xv = tape.leaf(x);
  auto wv = tape.leaf(p.weights);
  auto bv = tape.leaf(p.bias);
  return transposed_conv2d(xv, wv, std::optional<Var<T>>(bv), p.stride, p.padding).value();
}

// ---------------------------------------------------------------------------
// Pooling

namespace kernels {

template <class T>
PoolResult<T> maxpool2x2(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("maxpool2x2: input must be NCHW, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) {
    throw ShapeError("maxpool2x2: spatial dims must be even, got " + shape_str(x.shape()));
  }
  const std::size_t ho = h / 2, wo = w / 2;
  PoolResult<T> r{Tensor<T>({n, c, ho, wo}), LabelTensor({n, c, ho, wo})};
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = x.data() + p * h * w;
    T* out = r.output.data() + p * ho * wo;
    std::int32_t* idx = r.indices.data() + p * ho * wo;
    for (std::size_t i = 0; i < ho; ++i) {
      for (std::size_t j = 0; j < wo; ++j) {
        const T* win = src + 2 * i * w + 2 * j;
        const T vals[4] = {win[0], win[1], win[w], win[w + 1]};
        std::int32_t best = 0;
        for (std::int32_t q = 1; q < 4; ++q) {
          if (vals[q] > vals[best]) best = q;  // strict: ties keep the smaller index
        }
        out[i * wo + j] = vals[best];
        idx[i * wo + j] = best;
      }
    }
  }
  return r;
}

template <class T>
void check_unpool(const Shape& ys, const LabelTensor& idx, const Shape& out_shape) {
  if (ys.size() != 4) throw ShapeError("max_unpool2x2: input must be NCHW");
  if (idx.shape() != ys) {
    throw ShapeError("max_unpool2x2: indices shape " + shape_str(idx.shape()) +
                     " does not match input " + shape_str(ys));
  }
  if (out_shape.size() != 4 || out_shape[0] != ys[0] || out_shape[1] != ys[1] ||
      out_shape[2] != 2 * ys[2] || out_shape[3] != 2 * ys[3]) {
    throw ShapeError("max_unpool2x2: output shape " + shape_str(out_shape) +
                     " is not the 2x upsampling of " + shape_str(ys));
  }
  for (auto v : idx.vec()) {
    if (v < 0 || v > 3) {
      throw CorruptionError("max_unpool2x2: index " + std::to_string(v) +
                            " is outside its 2x2 window");
    }
  }
}

inline std::size_t window_offset(std::int32_t q, std::size_t w) {
  return static_cast<std::size_t>(q >> 1) * w + static_cast<std::size_t>(q & 1);
}

template <class T>
Tensor<T> max_unpool2x2(const Tensor<T>& y, const LabelTensor& idx, const Shape& out_shape) {
  check_unpool<T>(y.shape(), idx, out_shape);
  Tensor<T> out(out_shape);
  const std::size_t h = out_shape[2], w = out_shape[3], ho = y.dim(2), wo = y.dim(3);
  for (std::size_t p = 0; p < y.dim(0) * y.dim(1); ++p) {
    T* dst = out.data() + p * h * w;
    const T* src = y.data() + p * ho * wo;
    const std::int32_t* id = idx.data() + p * ho * wo;
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j)
        dst[2 * i * w + 2 * j + window_offset(id[i * wo + j], w)] = src[i * wo + j];
  }
  return out;
}

}  // namespace kernels

template <class T>
struct PoolVar {
  Var<T> output;
  // Shared with the pool node so re-evaluation keeps downstream unpooling
  // consistent with the latest argmax.
  std::shared_ptr<LabelTensor> indices;
};

template <class T>
PoolVar<T> maxpool2x2(Var<T> x) {
  auto idx = std::make_shared<LabelTensor>();
  const Shape in_shape = x.shape();
  auto out = x.tape->record(
      "maxpool2x2", {x.id},
      [idx](auto in) {
        auto r = kernels::maxpool2x2(*in[0]);
        *idx = std::move(r.indices);
        return std::move(r.output);
      },
      [idx, in_shape](const BackwardContext<T>& c) {
        if (auto* dx = c.grad_inputs[0]) {
          auto scattered = kernels::max_unpool2x2(c.grad_output, *idx, in_shape);
          detail::accumulate(dx, scattered);
        }
      });
  return {out, idx};
}

template <class T>
Var<T> max_unpool2x2(Var<T> y, std::shared_ptr<const LabelTensor> indices, Shape out_shape) {
  kernels::check_unpool<T>(y.shape(), *indices, out_shape);
  return y.tape->record(
      "max_unpool2x2", {y.id},
      [indices, out_shape](auto in) {
        return kernels::max_unpool2x2(*in[0], *indices, out_shape);
      },
      [indices](const BackwardContext<T>& c) {
        auto* dy = c.grad_inputs[0];
        if (!dy) return;
        const auto& g = c.grad_output;
        const std::size_t h = g.dim(2), w = g.dim(3), ho = h / 2, wo = w / 2;
        for (std::size_t p = 0; p < g.dim(0) * g.dim(1); ++p) {
          const T* src = g.data() + p * h * w;
          T* dst = dy->data() + p * ho * wo;
          const std::int32_t* id = indices->data() + p * ho * wo;
          for (std::size_t i = 0; i < ho; ++i)
            for (std::size_t j = 0; j < wo; ++j)
              dst[i * wo + j] += src[2 * i * w + 2 * j + kernels::window_offset(id[i * wo + j], w)];
        }
      });
}

template <class T>
PoolResult<T> maxpool2x2(const Tensor<T>& x) {
  return kernels::maxpool2x2(x);
}

template <class T>
Tensor<T> max_unpool2x2(const Tensor<T>& y, const LabelTensor& indices, const Shape& out_shape) {
  return kernels::max_unpool2x2(y, indices, out_shape);
}

// ---------------------------------------------------------------------------
// Batch normalization

namespace detail {

struct ChannelStats {
  std::vector<double> mean, var;  // biased variance
};

// Sum of f(0..n-1) over eight independent lanes so the loop vectorizes
// without reassociating a single accumulator; the order is fixed.
template <class F>
double lane_sum(std::size_t n, F f) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8)
    for (std::size_t l = 0; l < 8; ++l) acc[l] += f(j + l);
  for (; j < n; ++j) acc[j % 8] += f(j);
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <class T>
ChannelStats channel_stats(const Tensor<T>& x) {
  const std::size_t n = x.dim(0), c = x.dim(1), P = x.dim(2) * x.dim(3);
  const double m = static_cast<double>(n * P);
  ChannelStats s{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const T* p = x.data() + (i * c + ch) * P;
      acc += lane_sum(P, [p](std::size_t j) { return static_cast<double>(p[j]); });
    }
    const double mean = acc / m;
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const T* p = x.data() + (i * c + ch) * P;
      sq += lane_sum(P, [p, mean](std::size_t j) {
        const double d = p[j] - mean;
        return d * d;
      });
    }
    s.mean[ch] = mean;
    s.var[ch] = sq / m;
  }
  return s;
}

}  // namespace detail

/// Per-channel normalization over (N, H, W). In train mode the batch
/// statistics are used and the running statistics are updated in place
/// (unbiased variance, exponential moving average with `momentum`); in eval
/// mode the running statistics are used.
namespace detail {

template <class T>
void check_batchnorm(const Shape& xs, std::initializer_list<const Shape*> per_channel,
                     double momentum, double epsilon) {
  if (xs.size() != 4) throw ShapeError("batchnorm: input must be NCHW, got " + shape_str(xs));
  for (const Shape* s : per_channel) {
    if (*s != Shape{xs[1]}) {
      throw ShapeError("batchnorm: per-channel tensor shape " + shape_str(*s) +
                       " does not match " + std::to_string(xs[1]) + " channels");
    }
  }
  if (!(epsilon > 0.0)) throw InvalidArgument("batchnorm: epsilon must be > 0");
  if (!(momentum > 0.0 && momentum < 1.0)) {
    throw InvalidArgument("batchnorm: momentum must be in (0,1)");
  }
}

}  // namespace detail

/// Train-mode batch normalization over (N, H, W) with batch statistics. The
/// running statistics are updated once, at record time (unbiased variance,
/// exponential moving average with weight `momentum` on the new batch).
template <class T>
Var<T> batchnorm_train(Var<T> x, Var<T> gamma, Var<T> beta, Tensor<T>& running_mean,
                       Tensor<T>& running_var, double momentum = 0.1, double epsilon = 1e-5) {
  const auto& xs = x.shape();
  detail::check_batchnorm<T>(xs, {&gamma.shape(), &beta.shape(), &running_mean.shape(),
                                  &running_var.shape()},
                             momentum, epsilon);
  const std::size_t c = xs[1];
  {
    const std::size_t m = xs[0] * xs[2] * xs[3];
    if (m < 2) {
      throw InvalidArgument("batchnorm: train mode needs at least 2 values per channel");
    }
    const auto stats = detail::channel_stats(x.value());
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double unbiased = stats.var[ch] * static_cast<double>(m) / static_cast<double>(m - 1);
      running_mean[ch] = static_cast<T>((1.0 - momentum) * running_mean[ch] + momentum * stats.mean[ch]);
      running_var[ch] = static_cast<T>((1.0 - momentum) * running_var[ch] + momentum * unbiased);
    }
    return x.tape->record(
        "batchnorm_train", {x.id, gamma.id, beta.id},
        [epsilon](auto in) {
          const auto& xv = *in[0];
          const auto st = detail::channel_stats(xv);
          Tensor<T> out(xv.shape());
          const std::size_t n = xv.dim(0), c = xv.dim(1), P = xv.dim(2) * xv.dim(3);
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double inv = 1.0 / std::sqrt(st.var[ch] + epsilon);
            const double g = (*in[1])[ch], b = (*in[2])[ch];
            for (std::size_t i = 0; i < n; ++i) {
              const T* src = xv.data() + (i * c + ch) * P;
              T* dst = out.data() + (i * c + ch) * P;
              for (std::size_t j = 0; j < P; ++j) {
                dst[j] = static_cast<T>(g * ((src[j] - st.mean[ch]) * inv) + b);
              }
            }
          }
          return out;
        },
        [epsilon](const BackwardContext<T>& ctx) {
          const auto& xv = *ctx.inputs[0];
          const auto& gy = ctx.grad_output;
          const auto st = detail::channel_stats(xv);
          const std::size_t n = xv.dim(0), c = xv.dim(1), P = xv.dim(2) * xv.dim(3);
          const double m = static_cast<double>(n * P);
          for (std::size_t ch = 0; ch < c; ++ch) {
            const double inv = 1.0 / std::sqrt(st.var[ch] + epsilon);
            const double g = (*ctx.inputs[1])[ch];
            double sum_g = 0.0, sum_gx = 0.0;
            const double mean = st.mean[ch];
            for (std::size_t i = 0; i < n; ++i) {
              const T* src = xv.data() + (i * c + ch) * P;
              const T* gp = gy.data() + (i * c + ch) * P;
              sum_g += detail::lane_sum(P, [gp](std::size_t j) { return static_cast<double>(gp[j]); });
              sum_gx += detail::lane_sum(P, [gp, src, mean, inv](std::size_t j) {
                return gp[j] * ((src[j] - mean) * inv);
              });
            }
            if (auto* dg = ctx.grad_inputs[1]) (*dg)[ch] += static_cast<T>(sum_gx);
            if (auto* db = ctx.grad_inputs[2]) (*db)[ch] += static_cast<T>(sum_g);
            if (auto* dx = ctx.grad_inputs[0]) {
              // dx = gamma * inv / m * (m * gy - sum(gy) - xhat * sum(gy * xhat))
              const double k = g * inv / m;
              for (std::size_t i = 0; i < n; ++i) {
                const T* src = xv.data() + (i * c + ch) * P;
                const T* gp = gy.data() + (i * c + ch) * P;
                T* dst = dx->data() + (i * c + ch) * P;
                for (std::size_t j = 0; j < P; ++j) {
                  const double xhat = (src[j] - st.mean[ch]) * inv;
                  dst[j] += static_cast<T>(k * (m * gp[j] - sum_g - xhat * sum_gx));
                }
              }
            }
          }
        });
  }
}

/// Eval-mode batch normalization with fixed running statistics.
template <class T>
Var<T> batchnorm_eval(Var<T> x, Var<T> gamma, Var<T> beta, const Tensor<T>& running_mean,
                      const Tensor<T>& running_var, double epsilon = 1e-5) {
  const auto& xs = x.shape();
  detail::check_batchnorm<T>(xs, {&gamma.shape(), &beta.shape(), &running_mean.shape(),
                                  &running_var.shape()},
                             0.5, epsilon);
  const std::size_t c = xs[1];
  std::vector<double> mean(c), inv(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (running_var[ch] < T{0}) throw InvalidArgument("batchnorm: negative running variance");
    mean[ch] = running_mean[ch];
    inv[ch] = 1.0 / std::sqrt(static_cast<double>(running_var[ch]) + epsilon);
  }
  return x.tape->record(
      "batchnorm_eval", {x.id, gamma.id, beta.id},
      [mean, inv](auto in) {
        const auto& xv = *in[0];
        Tensor<T> out(xv.shape());
        const std::size_t n = xv.dim(0), c = xv.dim(1), P = xv.dim(2) * xv.dim(3);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T scale = static_cast<T>((*in[1])[ch] * inv[ch]);
          const T shift = static_cast<T>((*in[2])[ch] - (*in[1])[ch] * inv[ch] * mean[ch]);
          for (std::size_t i = 0; i < n; ++i) {
            const T* src = xv.data() + (i * c + ch) * P;
            T* dst = out.data() + (i * c + ch) * P;
            for (std::size_t j = 0; j < P; ++j) dst[j] = src[j] * scale + shift;
          }
        }
        return out;
      },
      [mean, inv](const BackwardContext<T>& ctx) {
        const auto& xv = *ctx.inputs[0];
        const auto& gy = ctx.grad_output;
        const std::size_t n = xv.dim(0), c = xv.dim(1), P = xv.dim(2) * xv.dim(3);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double g = (*ctx.inputs[1])[ch];
          double sum_g = 0.0, sum_gx = 0.0;
          const T scale = static_cast<T>(g * inv[ch]);
          for (std::size_t i = 0; i < n; ++i) {
            const T* src = xv.data() + (i * c + ch) * P;
            const T* gp = gy.data() + (i * c + ch) * P;
            T* dst = ctx.grad_inputs[0] ? ctx.grad_inputs[0]->data() + (i * c + ch) * P : nullptr;
            for (std::size_t j = 0; j < P; ++j) {
              sum_g += gp[j];
              sum_gx += gp[j] * ((src[j] - mean[ch]) * inv[ch]);
              if (dst) dst[j] += gp[j] * scale;
            }
          }
          if (auto* dg = ctx.grad_inputs[1]) (*dg)[ch] += static_cast<T>(sum_gx);
          if (auto* db = ctx.grad_inputs[2]) (*db)[ch] += static_cast<T>(sum_g);
        }
      });
}

template <class T>
Var<T> batchnorm(Var<T> x, Var<T> gamma, Var<T> beta, Tensor<T>& running_mean,
                 Tensor<T>& running_var, NormMode mode, double momentum = 0.1,
                 double epsilon = 1e-5) {
  if (mode == NormMode::train) {
    return batchnorm_train(x, gamma, beta, running_mean, running_var, momentum, epsilon);
  }
  return batchnorm_eval(x, gamma, beta, running_mean, running_var, epsilon);
}

template <class T>
Tensor<T> batchnorm(const Tensor<T>& x, BatchNormState<T>& s) {
  Tape<T> tape;
  auto xv = tape.leaf(x);
  auto g = tape.leaf(s.gamma);
  auto b = tape.leaf(s.beta);
  return batchnorm(xv, g, b, s.running_mean, s.running_var, s.mode, s.momentum, s.epsilon)
      .value();
}

// ---------------------------------------------------------------------------
// Dropout

inline void check_dropout(const DropoutConfig& cfg) {
  if (!(cfg.rate >= 0.0 && cfg.rate < 1.0)) {
    throw InvalidArgument("dropout: rate must be in [0, 1), got " + std::to_string(cfg.rate));
  }
}

/// Inverted dropout: keep with probability 1 - rate and scale survivors by
/// 1 / (1 - rate). Modes train and mc_sample behave identically; off (and
/// rate 0) returns the input node itself.
template <class T>
Var<T> dropout(Var<T> x, const DropoutConfig& cfg, Rng& rng) {
  check_dropout(cfg);
  if (cfg.mode == DropoutMode::off || cfg.rate == 0.0) return x;
  auto mask = std::make_shared<Tensor<T>>(x.shape());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - cfg.rate));
  for (auto& v : mask->vec()) v = rng.uniform() >= cfg.rate ? keep_scale : T{0};
  return x.tape->record(
      cfg.mode == DropoutMode::mc_sample ? "dropout_mc" : "dropout", {x.id},
      [mask](auto in) {
        Tensor<T> out = *in[0];
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*mask)[i];
        return out;
      },
      [mask](const BackwardContext<T>& c) {
        if (auto* dx = c.grad_inputs[0]) {
          for (std::size_t i = 0; i < dx->size(); ++i) (*dx)[i] += c.grad_output[i] * (*mask)[i];
        }
      });
}

template <class T>
Tensor<T> dropout(const Tensor<T>& x, const DropoutConfig& cfg, Rng& rng) {
  Tape<T> tape;
  return dropout(tape.leaf(x), cfg, rng).value();
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy

inline constexpr double kProbFloor = 1e-12;

/// Per-pixel softmax over the channel axis of [N, K, H, W] logits, computed
/// after subtracting the per-pixel maximum.
template <class T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  require_rank(logits, 4, "softmax");
  const std::size_t n = logits.dim(0), k = logits.dim(1), P = logits.dim(2) * logits.dim(3);
  Tensor<T> probs(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* src = logits.data() + i * k * P;
    T* dst = probs.data() + i * k * P;
    for (std::size_t p = 0; p < P; ++p) {
      T mx = src[p];
      for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, src[c * P + p]);
      T z{};
      for (std::size_t c = 0; c < k; ++c) {
        const T e = std::exp(src[c * P + p] - mx);
        dst[c * P + p] = e;
        z += e;
      }
      for (std::size_t c = 0; c < k; ++c) dst[c * P + p] /= z;
    }
  }
  return probs;
}

template <class T>
struct SoftmaxCE {
  Var<T> loss;      // shape [1]
  Tensor<T> probs;  // [N, K, H, W]
};

/// Mean over pixels of -log(max(p_target, 1e-12)).
template <class T>
SoftmaxCE<T> softmax_ce(Var<T> logits, const LabelTensor& target) {
  const auto& ls = logits.shape();
  if (ls.size() != 4) throw ShapeError("softmax_ce: logits must be NKHW, got " + shape_str(ls));
  const Shape ts{ls[0], ls[2], ls[3]};
  if (target.shape() != ts) {
    throw ShapeError("softmax_ce: target shape " + shape_str(target.shape()) +
                     " does not match logits " + shape_str(ls));
  }
  const auto k = static_cast<std::int32_t>(ls[1]);
  for (auto v : target.vec()) {
    if (v < 0 || v >= k) {
      throw InvalidArgument("softmax_ce: target class " + std::to_string(v) + " out of range");
    }
  }
  auto tgt = std::make_shared<const LabelTensor>(target);
  auto loss = logits.tape->record(
      "softmax_ce", {logits.id},
      [tgt](auto in) {
        const auto probs = softmax_channels(*in[0]);
        const std::size_t n = probs.dim(0), k = probs.dim(1), P = probs.dim(2) * probs.dim(3);
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < P; ++p) {
            const auto t = static_cast<std::size_t>((*tgt)[i * P + p]);
            const double pt = probs[(i * k + t) * P + p];
            acc -= std::log(std::max(pt, kProbFloor));
          }
        return Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n * P)));
      },
      [tgt](const BackwardContext<T>& c) {
        auto* dl = c.grad_inputs[0];
        if (!dl) return;
        const auto probs = softmax_channels(*c.inputs[0]);
        const std::size_t n = probs.dim(0), k = probs.dim(1), P = probs.dim(2) * probs.dim(3);
        const T scale = c.grad_output[0] / static_cast<T>(n * P);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < P; ++p) {
            const auto t = static_cast<std::size_t>((*tgt)[i * P + p]);
            // Below the floor the log term is constant, so its gradient vanishes.
            if (probs[(i * k + t) * P + p] < static_cast<T>(kProbFloor)) continue;
            for (std::size_t ch = 0; ch < k; ++ch) {
              const std::size_t at = (i * k + ch) * P + p;
              const T onehot = ch == t ? T{1} : T{0};
              (*dl)[at] += scale * (probs[at] - onehot);
            }
          }
      });
  return {loss, softmax_channels(logits.value())};
}

// ---------------------------------------------------------------------------
// Bilinear upsampling

namespace detail {

struct LerpTap {
  std::size_t i0, i1;
  double frac;
};

// Half-pixel-centre sampling (align_corners = false), clamped at the border.
inline std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t factor) {
  std::vector<LerpTap> taps(in * factor);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    src = std::max(src, 0.0);
    auto i0 = static_cast<std::size_t>(std::floor(src));
    i0 = std::min(i0, in - 1);
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

template <class T>
Var<T> bilinear_upsample(Var<T> x, std::size_t factor) {
  if (factor == 0) throw InvalidArgument("bilinear_upsample: factor must be >= 1");
  const auto& xs = x.shape();
  if (xs.size() != 4) throw ShapeError("bilinear_upsample: input must be NCHW");
  const auto ty = detail::lerp_taps(xs[2], factor);
  const auto tx = detail::lerp_taps(xs[3], factor);
  return x.tape->record(
      "bilinear_upsample", {x.id},
      [ty, tx](auto in) {
        const auto& v = *in[0];
        const std::size_t planes = v.dim(0) * v.dim(1), h = v.dim(2), w = v.dim(3);
        Tensor<T> out({v.dim(0), v.dim(1), ty.size(), tx.size()});
        for (std::size_t p = 0; p < planes; ++p) {
          const T* src = v.data() + p * h * w;
          T* dst = out.data() + p * ty.size() * tx.size();
          for (std::size_t oy = 0; oy < ty.size(); ++oy) {
            const auto& a = ty[oy];
            for (std::size_t ox = 0; ox < tx.size(); ++ox) {
              const auto& b = tx[ox];
              const double top = src[a.i0 * w + b.i0] * (1 - b.frac) + src[a.i0 * w + b.i1] * b.frac;
              const double bot = src[a.i1 * w + b.i0] * (1 - b.frac) + src[a.i1 * w + b.i1] * b.frac;
              dst[oy * tx.size() + ox] = static_cast<T>(top * (1 - a.frac) + bot * a.frac);
            }
          }
        }
        return out;
      },
      [ty, tx](const BackwardContext<T>& c) {
        auto* dx = c.grad_inputs[0];
        if (!dx) return;
        const std::size_t planes = dx->dim(0) * dx->dim(1), w = dx->dim(3);
        const std::size_t h = dx->dim(2);
        for (std::size_t p = 0; p < planes; ++p) {
          const T* g = c.grad_output.data() + p * ty.size() * tx.size();
          T* dst = dx->data() + p * h * w;
          for (std::size_t oy = 0; oy < ty.size(); ++oy) {
            const auto& a = ty[oy];
            for (std::size_t ox = 0; ox < tx.size(); ++ox) {
              const auto& b = tx[ox];
              const double gv = g[oy * tx.size() + ox];
              dst[a.i0 * w + b.i0] += static_cast<T>(gv * (1 - a.frac) * (1 - b.frac));
              dst[a.i0 * w + b.i1] += static_cast<T>(gv * (1 - a.frac) * b.frac);
              dst[a.i1 * w + b.i0] += static_cast<T>(gv * a.frac * (1 - b.frac));
              dst[a.i1 * w + b.i1] += static_cast<T>(gv * a.frac * b.frac);
            }
          }
        }
      });
}

template <class T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, std::size_t factor) {
  Tape<T> tape;
  return bilinear_upsample(tape.leaf(x), factor).value();
}

}  // namespace polypseg
