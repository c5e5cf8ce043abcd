#ifndef FISHERPRUNE_KERNELS_HPP
#define FISHERPRUNE_KERNELS_HPP

// Numerical kernels over Tensor. Feature maps are C x H x W, or N x C x H x W
// for a batch; every kernel accepts both and returns the same rank it was
// given. Convolution is cross-correlation (no kernel flip) everywhere,
// including the transpose. All reductions run in a fixed sequential order so
// results are bitwise reproducible, and removing a zero-weight term from a
// sum leaves the sum bitwise unchanged.

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "fisherprune/error.hpp"
#include "fisherprune/tensor.hpp"

namespace fisherprune {

/// Convolution parameters: kernel fn x cn x h x w, bias of length fn.
struct ConvWeights {
  Tensor kernel;
  Tensor bias;
  std::size_t stride = 1;
  std::size_t pad = 0;

  std::size_t filters() const { return kernel.dim(0); }
  std::size_t channels() const { return kernel.dim(1); }
  std::size_t kh() const { return kernel.dim(2); }
  std::size_t kw() const { return kernel.dim(3); }

  void validate() const {
    require(kernel.rank() == 4, ErrorKind::Shape,
            "conv kernel must be rank 4 (fn x cn x h x w), got " + shape_str(kernel.shape()));
    require(stride >= 1, ErrorKind::Shape, "conv stride must be positive");
    require(bias.rank() == 1 && bias.dim(0) == filters(), ErrorKind::Shape,
            "conv bias length must equal filter count " + std::to_string(filters()));
  }
};

/// Argmax locations recorded by max pooling: index[i] is the flat position in
/// the pooled input that produced flat output element i.
struct PoolSwitches {
  Shape input_shape;
  Shape output_shape;
  std::vector<std::size_t> index;
};

/// Output extent of a strided window; floor semantics, throws if nonpositive.
inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                                   std::size_t pad, const char* dim_name) {
  const std::size_t padded = in + 2 * pad;
  require(padded >= k, ErrorKind::Shape,
          std::string("conv: kernel ") + dim_name + " " + std::to_string(k) +
              " exceeds padded input " + dim_name + " " + std::to_string(padded));
  return (padded - k) / stride + 1;
}

namespace detail {

// C(MxN) += A(MxK) * B(KxN). Each C element accumulates over k ascending.
inline void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const double* A,
                    const double* B, double* C) {
  for (std::size_t i = 0; i < M; ++i) {
    double* c = C + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const double a = A[i * K + k];
      const double* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

// C(MxN) += A^T * B with A stored K x M.
inline void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const double* A,
                    const double* B, double* C) {
  for (std::size_t k = 0; k < K; ++k) {
    const double* b = B + k * N;
    for (std::size_t i = 0; i < M; ++i) {
      const double a = A[k * M + i];
      double* c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
    }
  }
}

struct ConvGeometry {
  std::size_t cn, h, w;      // input
  std::size_t fn, kh, kw;    // kernel
  std::size_t oh, ow;        // output
  std::size_t stride, pad;

  std::size_t rows() const { return cn * kh * kw; }
  std::size_t cols() const { return oh * ow; }
};

inline ConvGeometry geometry(std::size_t cn, std::size_t h, std::size_t w, const ConvWeights& wt) {
  wt.validate();
  require(cn == wt.channels(), ErrorKind::Shape,
          "conv: input channel count " + std::to_string(cn) + " != kernel channel count " +
              std::to_string(wt.channels()));
  ConvGeometry g{cn, h, w, wt.filters(), wt.kh(), wt.kw(), 0, 0, wt.stride, wt.pad};
  g.oh = conv_out_extent(h, g.kh, g.stride, g.pad, "height");
  g.ow = conv_out_extent(w, g.kw, g.stride, g.pad, "width");
  return g;
}

// col is rows() x cols(); row index (c, ki, kj), column index (oy, ox).
inline void im2col(const ConvGeometry& g, const double* x, double* col) {
  const std::size_t P = g.cols();
  for (std::size_t c = 0; c < g.cn; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        double* row = col + ((c * g.kh + ki) * g.kw + kj) * P;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) &&
                                ix < static_cast<long>(g.w);
            row[oy * g.ow + ox] = inside ? x[(c * g.h + iy) * g.w + ix] : 0.0;
          }
        }
      }
}

inline void col2im(const ConvGeometry& g, const double* col, double* x) {
  const std::size_t P = g.cols();
  for (std::size_t c = 0; c < g.cn; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const double* row = col + ((c * g.kh + ki) * g.kw + kj) * P;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            x[(c * g.h + iy) * g.w + ix] += row[oy * g.ow + ox];
          }
        }
      }
}

// Splits a rank-3 or rank-4 feature tensor into (batch, c, h, w).
struct MapDims {
  std::size_t n, c, h, w;
  bool batched;
};

inline MapDims map_dims(const Tensor& x, const char* op) {
  if (x.rank() == 3) return {1, x.dim(0), x.dim(1), x.dim(2), false};
  if (x.rank() == 4) return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), true};
  fail(ErrorKind::Shape, std::string(op) + ": expected C x H x W or N x C x H x W, got " +
                             shape_str(x.shape()));
}

inline Shape map_shape(bool batched, std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  return batched ? Shape{n, c, h, w} : Shape{c, h, w};
}

}  // namespace detail

/// Cross-correlation plus per-filter bias.
inline Tensor conv2d_forward(const Tensor& x, const ConvWeights& wt) {
  const auto d = detail::map_dims(x, "conv2d_forward");
  const auto g = detail::geometry(d.c, d.h, d.w, wt);
  const std::size_t P = g.cols(), K = g.rows();
  Tensor y(detail::map_shape(d.batched, d.n, g.fn, g.oh, g.ow));
  std::vector<double> col(K * P);
  for (std::size_t s = 0; s < d.n; ++s) {
    detail::im2col(g, x.data() + s * d.c * d.h * d.w, col.data());
    double* out = y.data() + s * g.fn * P;
    detail::gemm_nn(g.fn, P, K, wt.kernel.data(), col.data(), out);
    for (std::size_t f = 0; f < g.fn; ++f)
      for (std::size_t p = 0; p < P; ++p) out[f * P + p] += wt.bias[f];
  }
  return y;
}

/// Adjoint of the linear (bias-free) part of conv2d_forward. `in_h`/`in_w`
/// give the input extents; when zero they are recovered assuming the forward
/// pass tiled exactly.
inline Tensor conv2d_transpose(const Tensor& y, const ConvWeights& wt, std::size_t in_h = 0,
                               std::size_t in_w = 0) {
  const auto d = detail::map_dims(y, "conv2d_transpose");
  wt.validate();
  require(d.c == wt.filters(), ErrorKind::Shape,
          "conv2d_transpose: input has " + std::to_string(d.c) + " maps but kernel has " +
              std::to_string(wt.filters()) + " filters");
  if (in_h == 0) in_h = (d.h - 1) * wt.stride + wt.kh() - 2 * wt.pad;
  if (in_w == 0) in_w = (d.w - 1) * wt.stride + wt.kw() - 2 * wt.pad;
  const auto g = detail::geometry(wt.channels(), in_h, in_w, wt);
  require(g.oh == d.h && g.ow == d.w, ErrorKind::Shape,
          "conv2d_transpose: map extent " + std::to_string(d.h) + "x" + std::to_string(d.w) +
              " inconsistent with input extent " + std::to_string(in_h) + "x" +
              std::to_string(in_w));
  const std::size_t P = g.cols(), K = g.rows();
  Tensor x(detail::map_shape(d.batched, d.n, g.cn, g.h, g.w));
  std::vector<double> col(K * P);
  for (std::size_t s = 0; s < d.n; ++s) {
    std::fill(col.begin(), col.end(), 0.0);
    detail::gemm_tn(K, P, g.fn, wt.kernel.data(), y.data() + s * g.fn * P, col.data());
    detail::col2im(g, col.data(), x.data() + s * g.cn * g.h * g.w);
  }
  return x;
}

/// Kernel and bias gradients of conv2d_forward given its input and the
/// gradient of its output. Summed over the batch.
inline std::pair<Tensor, Tensor> conv2d_weight_grad(const Tensor& x, const Tensor& dy,
                                                    const ConvWeights& wt) {
  const auto d = detail::map_dims(x, "conv2d_weight_grad");
  const auto g = detail::geometry(d.c, d.h, d.w, wt);
  const std::size_t P = g.cols(), K = g.rows();
  require(dy.size() == d.n * g.fn * P, ErrorKind::Shape, "conv2d_weight_grad: gradient shape");
  Tensor dk(wt.kernel.shape());
  Tensor db({g.fn});
  std::vector<double> col(K * P), colT(P * K);
  for (std::size_t s = 0; s < d.n; ++s) {
    detail::im2col(g, x.data() + s * d.c * d.h * d.w, col.data());
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t p = 0; p < P; ++p) colT[p * K + k] = col[k * P + p];
    const double* gy = dy.data() + s * g.fn * P;
    detail::gemm_nn(g.fn, K, P, gy, colT.data(), dk.data());
    for (std::size_t f = 0; f < g.fn; ++f)
      for (std::size_t p = 0; p < P; ++p) db[f] += gy[f * P + p];
  }
  return {std::move(dk), std::move(db)};
}

/// Max pooling with a k x k window. Windows must tile the input exactly; ties
/// go to the lowest linear index.
inline std::pair<Tensor, PoolSwitches> maxpool_forward(const Tensor& x, std::size_t k,
                                                       std::size_t stride) {
  const auto d = detail::map_dims(x, "maxpool_forward");
  require(k >= 1 && stride >= 1, ErrorKind::Shape, "maxpool: window and stride must be positive");
  require(d.h >= k && d.w >= k && (d.h - k) % stride == 0 && (d.w - k) % stride == 0,
          ErrorKind::Shape,
          "maxpool: window " + std::to_string(k) + " stride " + std::to_string(stride) +
              " does not tile " + std::to_string(d.h) + "x" + std::to_string(d.w));
  const std::size_t oh = (d.h - k) / stride + 1, ow = (d.w - k) / stride + 1;
  Tensor y(detail::map_shape(d.batched, d.n, d.c, oh, ow));
  PoolSwitches sw{x.shape(), y.shape(), std::vector<std::size_t>(y.size())};
  std::size_t o = 0;
  for (std::size_t s = 0; s < d.n; ++s)
    for (std::size_t c = 0; c < d.c; ++c) {
      const std::size_t base = (s * d.c + c) * d.h * d.w;
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
          std::size_t best = base + oy * stride * d.w + ox * stride;
          double bv = x[best];
          for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) {
              const std::size_t idx = base + (oy * stride + i) * d.w + ox * stride + j;
              if (x[idx] > bv) {
                bv = x[idx];
                best = idx;
              }
            }
          y[o] = bv;
          sw.index[o] = best;
        }
    }
  return {std::move(y), std::move(sw)};
}

/// Scatters y to the recorded switch positions; everything else is zero.
/// Overlapping windows accumulate, which keeps unpool the adjoint of pooling.
inline Tensor unpool(const Tensor& y, const PoolSwitches& sw, const Shape& in_shape) {
  require(y.size() == sw.index.size(), ErrorKind::Shape,
          "unpool: " + std::to_string(y.size()) + " values but " +
              std::to_string(sw.index.size()) + " switches");
  Tensor x(in_shape);
  for (std::size_t i = 0; i < y.size(); ++i) {
    require(sw.index[i] < x.size(), ErrorKind::Shape,
            "unpool: switch index " + std::to_string(sw.index[i]) + " out of range");
    x[sw.index[i]] += y[i];
  }
  return x;
}

inline Tensor rectify(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
  return y;
}

/// y = W x + b where x may have any shape with W.dim(1) elements.
inline Tensor dense_forward(const Tensor& x, const Tensor& W, const Tensor& b) {
  require(W.rank() == 2, ErrorKind::Shape, "dense: weight must be dout x din");
  const std::size_t dout = W.dim(0), din = W.dim(1);
  require(x.size() == din, ErrorKind::Shape,
          "dense: input has " + std::to_string(x.size()) + " elements, weight expects din=" +
              std::to_string(din));
  require(b.size() == dout, ErrorKind::Shape,
          "dense: bias length " + std::to_string(b.size()) + " != dout " + std::to_string(dout));
  Tensor y({dout});
  for (std::size_t o = 0; o < dout; ++o) {
    const double* w = W.data() + o * din;
    double s = 0.0;
    for (std::size_t i = 0; i < din; ++i) s += w[i] * x[i];
    y[o] = s + b[o];
  }
  return y;
}

/// Batched dense map: x is N x (anything with din elements) -> N x dout.
inline Tensor dense_forward_batch(const Tensor& x, const Tensor& W, const Tensor& b) {
  require(W.rank() == 2 && x.rank() >= 2, ErrorKind::Shape, "dense batch: bad ranks");
  const std::size_t n = x.dim(0), dout = W.dim(0), din = W.dim(1);
  require(x.size() == n * din, ErrorKind::Shape,
          "dense: per-sample input has " + std::to_string(x.size() / n) +
              " elements, weight expects din=" + std::to_string(din));
  require(b.size() == dout, ErrorKind::Shape, "dense: bias length mismatch");
  Tensor y({n, dout});
  for (std::size_t s = 0; s < n; ++s) {
    const double* xs = x.data() + s * din;
    for (std::size_t o = 0; o < dout; ++o) {
      const double* w = W.data() + o * din;
      double acc = 0.0;
      for (std::size_t i = 0; i < din; ++i) acc += w[i] * xs[i];
      y[s * dout + o] = acc + b[o];
    }
  }
  return y;
}

/// W^T y for a batch of output gradients (N x dout) -> N x din.
inline Tensor dense_transpose_batch(const Tensor& dy, const Tensor& W) {
  const std::size_t dout = W.dim(0), din = W.dim(1);
  const std::size_t n = dy.size() / dout;
  require(dy.size() == n * dout, ErrorKind::Shape, "dense transpose: gradient shape");
  Tensor dx({n, din});
  for (std::size_t s = 0; s < n; ++s)
    detail::gemm_tn(din, 1, dout, W.data(), dy.data() + s * dout, dx.data() + s * din);
  return dx;
}

}  // namespace fisherprune

#endif  // FISHERPRUNE_KERNELS_HPP
