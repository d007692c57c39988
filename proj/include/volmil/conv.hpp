#ifndef VOLMIL_CONV_HPP_
#define VOLMIL_CONV_HPP_

// Convolution and pooling over up to three spatial axes.
//
// Convolution is cross-correlation with zero padding. The 2D routines run
// the 3D kernels with a unit depth axis.

#include "volmil/graph.hpp"
#include "volmil/ops.hpp"

#include <array>
#include <limits>
#include <memory>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace volmil {

using Triple = std::array<Index, 3>;

struct ConvGeometry {
  Index n = 0, c = 0, out_c = 0;
  Triple in{}, kernel{}, stride{}, pad{}, out{};

  Index in_plane() const { return in[0] * in[1] * in[2]; }
  Index out_plane() const { return out[0] * out[1] * out[2]; }
  Index patch() const { return c * kernel[0] * kernel[1] * kernel[2]; }
  bool pointwise() const {
    return kernel == Triple{1, 1, 1} && stride == Triple{1, 1, 1} && pad == Triple{0, 0, 0};
  }
};

inline Index conv_out_extent(Index in, Index k, Index s, Index p) {
  if (s < 1) throw ShapeError("stride must be >= 1");
  const Index span = in + 2 * p - k;
  if (span < 0) throw ShapeError("kernel larger than padded input");
  return span / s + 1;
}

namespace detail {

// Samples per work unit. Fixed so that per-chunk gradient partials are
// summed in the same order for any thread count.
inline constexpr Index kConvChunk = 4;

template <typename T>
void vol2col(const T* x, const ConvGeometry& g, T* col) {
  const auto [D, H, W] = g.in;
  const auto [kd, kh, kw] = g.kernel;
  const auto [Do, Ho, Wo] = g.out;
  Index row = 0;
  for (Index c = 0; c < g.c; ++c)
    for (Index a = 0; a < kd; ++a)
      for (Index b = 0; b < kh; ++b)
        for (Index e = 0; e < kw; ++e, ++row) {
          T* dst = col + row * g.out_plane();
          for (Index od = 0; od < Do; ++od) {
            const Index id = od * g.stride[0] - g.pad[0] + a;
            for (Index oh = 0; oh < Ho; ++oh) {
              const Index ih = oh * g.stride[1] - g.pad[1] + b;
              T* line = dst + (od * Ho + oh) * Wo;
              if (id < 0 || id >= D || ih < 0 || ih >= H) {
                std::fill(line, line + Wo, T(0));
                continue;
              }
              const T* src = x + ((c * D + id) * H + ih) * W;
              for (Index ow = 0; ow < Wo; ++ow) {
                const Index iw = ow * g.stride[2] - g.pad[2] + e;
                line[ow] = (iw >= 0 && iw < W) ? src[iw] : T(0);
              }
            }
          }
        }
}

template <typename T>
void col2vol(const T* col, const ConvGeometry& g, T* x) {
  const auto [D, H, W] = g.in;
  const auto [kd, kh, kw] = g.kernel;
  const auto [Do, Ho, Wo] = g.out;
  Index row = 0;
  for (Index c = 0; c < g.c; ++c)
    for (Index a = 0; a < kd; ++a)
      for (Index b = 0; b < kh; ++b)
        for (Index e = 0; e < kw; ++e, ++row) {
          const T* src = col + row * g.out_plane();
          for (Index od = 0; od < Do; ++od) {
            const Index id = od * g.stride[0] - g.pad[0] + a;
            if (id < 0 || id >= D) continue;
            for (Index oh = 0; oh < Ho; ++oh) {
              const Index ih = oh * g.stride[1] - g.pad[1] + b;
              if (ih < 0 || ih >= H) continue;
              const T* line = src + (od * Ho + oh) * Wo;
              T* dst = x + ((c * D + id) * H + ih) * W;
              for (Index ow = 0; ow < Wo; ++ow) {
                const Index iw = ow * g.stride[2] - g.pad[2] + e;
                if (iw >= 0 && iw < W) dst[iw] += line[ow];
              }
            }
          }
        }
}

template <typename T>
void conv_forward(const T* x, const T* k, const ConvGeometry& g, T* y) {
  const Index chunks = (g.n + kConvChunk - 1) / kConvChunk;
  ConstRowMap<T> K(k, g.out_c, g.patch());
#pragma omp parallel for schedule(static)
  for (Index ch = 0; ch < chunks; ++ch) {
    RowMatrix<T> col;
    if (!g.pointwise()) col.resize(g.patch(), g.out_plane());
    for (Index n = ch * kConvChunk; n < std::min(g.n, (ch + 1) * kConvChunk); ++n) {
      const T* xn = x + n * g.c * g.in_plane();
      RowMap<T> Y(y + n * g.out_c * g.out_plane(), g.out_c, g.out_plane());
      if (g.pointwise()) {
        Y.noalias() = K * ConstRowMap<T>(xn, g.c, g.in_plane());
      } else {
        vol2col(xn, g, col.data());
        Y.noalias() = K * col;
      }
    }
  }
}

template <typename T>
void conv_backward(const T* x, const T* k, const T* dy, const ConvGeometry& g, T* dx, T* dk) {
  const Index chunks = (g.n + kConvChunk - 1) / kConvChunk;
  ConstRowMap<T> K(k, g.out_c, g.patch());
  std::vector<RowMatrix<T>> partial(dk ? chunks : 0);
#pragma omp parallel for schedule(static)
  for (Index ch = 0; ch < chunks; ++ch) {
    RowMatrix<T> col(g.patch(), g.out_plane());
    RowMatrix<T> dcol;
    if (dk) partial[ch].setZero(g.out_c, g.patch());
    for (Index n = ch * kConvChunk; n < std::min(g.n, (ch + 1) * kConvChunk); ++n) {
      const T* xn = x + n * g.c * g.in_plane();
      ConstRowMap<T> DY(dy + n * g.out_c * g.out_plane(), g.out_c, g.out_plane());
      if (g.pointwise()) {
        ConstRowMap<T> X(xn, g.c, g.in_plane());
        if (dk) partial[ch].noalias() += DY * X.transpose();
        if (dx) RowMap<T>(dx + n * g.c * g.in_plane(), g.c, g.in_plane()).noalias() += K.transpose() * DY;
        continue;
      }
      if (dk) {
        vol2col(xn, g, col.data());
        partial[ch].noalias() += DY * col.transpose();
      }
      if (dx) {
        dcol.noalias() = K.transpose() * DY;
        col2vol(dcol.data(), g, dx + n * g.c * g.in_plane());
      }
    }
  }
  if (dk) {
    RowMap<T> DK(dk, g.out_c, g.patch());
    for (const auto& p : partial) DK += p;
  }
}

}  // namespace detail

namespace detail {

template <typename T>
Var<T> conv_op(const Var<T>& input, const Var<T>& kernel, ConvGeometry g, Shape out_shape) {
  for (int a = 0; a < 3; ++a) g.out[a] = conv_out_extent(g.in[a], g.kernel[a], g.stride[a], g.pad[a]);
  if (input.dim(1) != kernel.dim(1))
    throw ShapeError("conv: input has " + std::to_string(input.dim(1)) + " channels, kernel expects " +
                     std::to_string(kernel.dim(1)));
  const std::size_t r = out_shape.size();
  out_shape[r - 1] = g.out[2];
  out_shape[r - 2] = g.out[1];
  if (r == 5) out_shape[2] = g.out[0];
  Tensor<T> out(std::move(out_shape));
  conv_forward(input.value().data(), kernel.value().data(), g, out.data());
  Node<T>* nx = input.node();
  Node<T>* nk = kernel.node();
  return input.graph().record(std::move(out), {input, kernel}, [=](Node<T>* o) {
    return [=] {
      T* dx = nx->requires_grad ? nx->grad_buffer().data() : nullptr;
      T* dk = nk->requires_grad ? nk->grad_buffer().data() : nullptr;
      conv_backward(nx->value.data(), nk->value.data(), o->grad.data(), g, dx, dk);
    };
  });
}

}  // namespace detail

/// 3D convolution. input N x C x D x H x W, kernel O x C x kd x kh x kw.
template <typename T>
Var<T> conv3d(const Var<T>& input, const Var<T>& kernel, Triple stride, Triple pad) {
  if (input.value().rank() != 5 || kernel.value().rank() != 5)
    throw ShapeError("conv3d expects 5-d input and kernel");
  ConvGeometry g;
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.out_c = kernel.dim(0);
  g.in = {input.dim(2), input.dim(3), input.dim(4)};
  g.kernel = {kernel.dim(2), kernel.dim(3), kernel.dim(4)};
  g.stride = stride;
  g.pad = pad;
  return detail::conv_op(input, kernel, g, {g.n, g.out_c, 0, 0, 0});
}

/// 2D convolution. input N x C x H x W, kernel O x C x kh x kw.
template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& kernel, Index stride, Index pad) {
  if (input.value().rank() != 4 || kernel.value().rank() != 4)
    throw ShapeError("conv2d expects 4-d input and kernel");
  ConvGeometry g;
  g.n = input.dim(0);
  g.c = input.dim(1);
  g.out_c = kernel.dim(0);
  g.in = {1, input.dim(2), input.dim(3)};
  g.kernel = {1, kernel.dim(2), kernel.dim(3)};
  g.stride = {1, stride, stride};
  g.pad = {0, pad, pad};
  return detail::conv_op(input, kernel, g, {g.n, g.out_c, 0, 0});
}

namespace detail {

struct PoolGeometry {
  Index planes = 0;  // N * C
  Triple in{}, kernel{}, stride{}, pad{}, out{};
};

template <typename T>
PoolGeometry pool_geometry(const Var<T>& x, Triple kernel, Triple stride, Triple pad) {
  const int rank = x.value().rank();
  if (rank != 5 && rank != 4) throw ShapeError("pooling expects N x C x [D x] H x W");
  PoolGeometry g;
  g.planes = x.dim(0) * x.dim(1);
  g.in = {rank == 5 ? x.dim(2) : 1, x.dim(-2), x.dim(-1)};
  g.kernel = kernel;
  g.stride = stride;
  g.pad = pad;
  for (int a = 0; a < 3; ++a) {
    if (kernel[a] < 1 || kernel[a] > g.in[a] + 2 * pad[a]) throw ShapeError("invalid pooling window");
    if (pad[a] * 2 > kernel[a]) throw ShapeError("pooling padding exceeds half the window");
    g.out[a] = conv_out_extent(g.in[a], kernel[a], stride[a], pad[a]);
  }
  return g;
}

template <typename T>
Shape pool_out_shape(const Var<T>& x, const PoolGeometry& g) {
  if (x.value().rank() == 4) return {x.dim(0), x.dim(1), g.out[1], g.out[2]};
  return {x.dim(0), x.dim(1), g.out[0], g.out[1], g.out[2]};
}

}  // namespace detail

/// Max pooling over N x C x D x H x W (or N x C x H x W with unit depth
/// window); padded cells never win.
template <typename T>
Var<T> max_pool3d(const Var<T>& x, Triple kernel, Triple stride, Triple pad) {
  const auto g = detail::pool_geometry(x, kernel, stride, pad);
  Tensor<T> out(detail::pool_out_shape(x, g));
  auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(out.size()));
  const Index in_plane = g.in[0] * g.in[1] * g.in[2];
  const Index out_plane = g.out[0] * g.out[1] * g.out[2];
  const T* src = x.value().data();
#pragma omp parallel for schedule(static)
  for (Index p = 0; p < g.planes; ++p) {
    const T* plane = src + p * in_plane;
    for (Index od = 0; od < g.out[0]; ++od)
      for (Index oh = 0; oh < g.out[1]; ++oh)
        for (Index ow = 0; ow < g.out[2]; ++ow) {
          T best = -std::numeric_limits<T>::infinity();
          Index best_i = -1;
          for (Index a = 0; a < g.kernel[0]; ++a) {
            const Index id = od * g.stride[0] - g.pad[0] + a;
            if (id < 0 || id >= g.in[0]) continue;
            for (Index b = 0; b < g.kernel[1]; ++b) {
              const Index ih = oh * g.stride[1] - g.pad[1] + b;
              if (ih < 0 || ih >= g.in[1]) continue;
              for (Index e = 0; e < g.kernel[2]; ++e) {
                const Index iw = ow * g.stride[2] - g.pad[2] + e;
                if (iw < 0 || iw >= g.in[2]) continue;
                const Index i = (id * g.in[1] + ih) * g.in[2] + iw;
                if (plane[i] > best || best_i < 0) {
                  best = plane[i];
                  best_i = i;
                }
              }
            }
          }
          const Index o = p * out_plane + (od * g.out[1] + oh) * g.out[2] + ow;
          out[o] = best;
          (*argmax)[static_cast<std::size_t>(o)] = p * in_plane + best_i;
        }
  }
  Node<T>* nx = x.node();
  return x.graph().record(std::move(out), {x}, [=](Node<T>* o) {
    return [=] {
      if (!nx->requires_grad) return;
      Tensor<T>& gx = nx->grad_buffer();
      for (Index i = 0; i < o->grad.size(); ++i) gx[(*argmax)[static_cast<std::size_t>(i)]] += o->grad[i];
    };
  });
}

template <typename T>
Var<T> max_pool2d(const Var<T>& x, Index kernel, Index stride, Index pad) {
  if (x.value().rank() != 4) throw ShapeError("max_pool2d expects N x C x H x W");
  return max_pool3d(x, {1, kernel, kernel}, {1, stride, stride}, {0, pad, pad});
}

template <typename T>
Var<T> avg_pool3d(const Var<T>& x, Triple kernel, Triple stride, Triple pad);

template <typename T>
Var<T> avg_pool2d(const Var<T>& x, Index kernel, Index stride, Index pad) {
  if (x.value().rank() != 4) throw ShapeError("avg_pool2d expects N x C x H x W");
  return avg_pool3d(x, {1, kernel, kernel}, {1, stride, stride}, {0, pad, pad});
}

/// Average pooling; padded cells are excluded from the divisor.
template <typename T>
Var<T> avg_pool3d(const Var<T>& x, Triple kernel, Triple stride, Triple pad) {
  const auto g = detail::pool_geometry(x, kernel, stride, pad);
  Tensor<T> out(detail::pool_out_shape(x, g));
  const Index in_plane = g.in[0] * g.in[1] * g.in[2];
  const Index out_plane = g.out[0] * g.out[1] * g.out[2];
  // Visits every (output cell, contributing input cell) pair.
  auto visit = [g, in_plane, out_plane](auto&& fn) {
    for (Index p = 0; p < g.planes; ++p)
      for (Index od = 0; od < g.out[0]; ++od)
        for (Index oh = 0; oh < g.out[1]; ++oh)
          for (Index ow = 0; ow < g.out[2]; ++ow) {
            std::vector<Index> cells;
            for (Index a = 0; a < g.kernel[0]; ++a) {
              const Index id = od * g.stride[0] - g.pad[0] + a;
              if (id < 0 || id >= g.in[0]) continue;
              for (Index b = 0; b < g.kernel[1]; ++b) {
                const Index ih = oh * g.stride[1] - g.pad[1] + b;
                if (ih < 0 || ih >= g.in[1]) continue;
                for (Index e = 0; e < g.kernel[2]; ++e) {
                  const Index iw = ow * g.stride[2] - g.pad[2] + e;
                  if (iw >= 0 && iw < g.in[2]) cells.push_back(p * in_plane + (id * g.in[1] + ih) * g.in[2] + iw);
                }
              }
            }
            fn(p * out_plane + (od * g.out[1] + oh) * g.out[2] + ow, cells);
          }
  };
  const T* src = x.value().data();
  visit([&](Index o, const std::vector<Index>& cells) {
    T s = 0;
    for (Index i : cells) s += src[i];
    out[o] = s / static_cast<T>(cells.size());
  });
  Node<T>* nx = x.node();
  return x.graph().record(std::move(out), {x}, [=](Node<T>* o) {
    return [=] {
      if (!nx->requires_grad) return;
      Tensor<T>& gx = nx->grad_buffer();
      visit([&](Index oi, const std::vector<Index>& cells) {
        const T share = o->grad[oi] / static_cast<T>(cells.size());
        for (Index i : cells) gx[i] += share;
      });
    };
  });
}

/// Mean over every axis after the first two: N x C x ... -> N x C.
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  if (x.value().rank() < 3) throw ShapeError("global_avg_pool expects N x C x spatial...");
  const Index n = x.dim(0);
  const Index c = x.dim(1);
  const Index plane = x.size() / (n * c);
  Tensor<T> out({n, c});
  ConstRowMap<T> src(x.value().data(), n * c, plane);
  out.vec() = src.rowwise().mean();
  Node<T>* nx = x.node();
  return x.graph().record(std::move(out), {x}, [=](Node<T>* o) {
    return [=] {
      if (!nx->requires_grad) return;
      RowMap<T> gx(nx->grad_buffer().data(), n * c, plane);
      gx.colwise() += o->grad.vec() / static_cast<T>(plane);
    };
  });
}

}  // namespace volmil

#endif  // VOLMIL_CONV_HPP_
