#ifndef VOLMIL_OPS_HPP_
#define VOLMIL_OPS_HPP_

// Differentiable dense primitives. Every function takes Vars of one graph
// and records its own backward rule.

#include "volmil/graph.hpp"

#include <cmath>
#include <numbers>
#include <vector>

namespace volmil {

namespace detail {

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
}

template <typename T>
void require_rank2(const Var<T>& a, const char* op) {
  if (a.value().rank() != 2)
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out(a.shape(), (a.value().vec() + b.value().vec()).eval());
  Node<T>* na = a.node();
  Node<T>* nb = b.node();
  return a.graph().record(std::move(out), {a, b}, [=](Node<T>* o) {
    return [=] {
      accumulate(na, o->grad.vec());
      accumulate(nb, o->grad.vec());
    };
  });
}

template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out(a.shape(), (a.value().vec() - b.value().vec()).eval());
  Node<T>* na = a.node();
  Node<T>* nb = b.node();
  return a.graph().record(std::move(out), {a, b}, [=](Node<T>* o) {
    return [=] {
      accumulate(na, o->grad.vec());
      accumulate(nb, -o->grad.vec());
    };
  });
}

/// Hadamard product.
template <typename T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape(), a.value().vec().cwiseProduct(b.value().vec()).eval());
  Node<T>* na = a.node();
  Node<T>* nb = b.node();
  return a.graph().record(std::move(out), {a, b}, [=](Node<T>* o) {
    return [=] {
      accumulate(na, o->grad.vec().cwiseProduct(nb->value.vec()));
      accumulate(nb, o->grad.vec().cwiseProduct(na->value.vec()));
    };
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  Tensor<T> out(a.shape(), (a.value().vec() * s).eval());
  Node<T>* na = a.node();
  return a.graph().record(std::move(out), {a},
                          [=](Node<T>* o) { return [=] { accumulate(na, o->grad.vec() * s); }; });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Tensor<T> out(a.shape(), (a.value().vec().array() + s).matrix().eval());
  Node<T>* na = a.node();
  return a.graph().record(std::move(out), {a},
                          [=](Node<T>* o) { return [=] { accumulate(na, o->grad.vec()); }; });
}

/// Elementwise map with derivative expressed through input x and output y.
template <typename T, typename F, typename DF>
Var<T> map_unary(const Var<T>& a, F f, DF df) {
  const Tensor<T>& x = a.value();
  Tensor<T> out(x.shape());
  for (Index i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  Node<T>* na = a.node();
  return a.graph().record(std::move(out), {a}, [=](Node<T>* o) {
    return [=] {
      if (!na->requires_grad) return;
      Tensor<T>& g = na->grad_buffer();
      const Tensor<T>& xv = na->value;
      for (Index i = 0; i < xv.size(); ++i) g[i] += o->grad[i] * df(xv[i], o->value[i]);
    };
  });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  return map_unary(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  return map_unary(
      a,
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> tanh(const Var<T>& a) {
  return map_unary(
      a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

/// Exact (erf-based) GELU.
template <typename T>
Var<T> gelu(const Var<T>& a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return map_unary(
      a, [=](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
      [=](T x, T) {
        return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
      });
}

template <typename T>
Var<T> square(const Var<T>& a) {
  return map_unary(
      a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

/// Square root with a zero subgradient at 0.
template <typename T>
Var<T> sqrt(const Var<T>& a) {
  return map_unary(
      a, [](T x) { return std::sqrt(x); },
      [](T, T y) { return y > T(0) ? T(0.5) / y : T(0); });
}

enum class Activation { none, relu, gelu, sigmoid, tanh };

template <typename T>
Var<T> activate(const Var<T>& a, Activation act) {
  switch (act) {
    case Activation::relu: return relu(a);
    case Activation::gelu: return gelu(a);
    case Activation::sigmoid: return sigmoid(a);
    case Activation::tanh: return tanh(a);
    case Activation::none: break;
  }
  return a;
}

// ------------------------------------------------------------------ reshaping

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  Node<T>* na = a.node();
  return a.graph().record(std::move(out), {a},
                          [=](Node<T>* o) { return [=] { accumulate(na, o->grad.vec()); }; });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  detail::require_rank2(a, "transpose");
  RowMatrix<T> t = a.value().matrix().transpose();
  Tensor<T> out({a.dim(1), a.dim(0)});
  out.matrix() = t;
  Node<T>* na = a.node();
  return a.graph().record(std::move(out), {a}, [=](Node<T>* o) {
    return [=] {
      if (!na->requires_grad) return;
      na->grad_buffer().matrix() += o->grad.matrix().transpose();
    };
  });
}

/// Concatenates matrices (rows x c_i) along columns.
template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Index rows = parts[0].value().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    if (p.value().rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p.value().cols();
  }
  Tensor<T> out({rows, cols});
  std::vector<Node<T>*> nodes;
  Index c = 0;
  for (const auto& p : parts) {
    out.matrix().middleCols(c, p.value().cols()) = p.value().matrix();
    c += p.value().cols();
    nodes.push_back(p.node());
  }
  return parts[0].graph().record(std::move(out), parts, [=](Node<T>* o) {
    return [=] {
      Index c0 = 0;
      for (Node<T>* n : nodes) {
        const Index w = n->value.cols();
        if (n->requires_grad) n->grad_buffer().matrix() += o->grad.matrix().middleCols(c0, w);
        c0 += w;
      }
    };
  });
}

template <typename T>
Var<T> slice_cols(const Var<T>& a, Index start, Index count) {
  if (start < 0 || count <= 0 || start + count > a.value().cols())
    throw ShapeError("slice_cols: range out of bounds");
  Tensor<T> out({a.value().rows(), count});
  out.matrix() = a.value().matrix().middleCols(start, count);
  Node<T>* na = a.node();
  return a.graph().record(std::move(out), {a}, [=](Node<T>* o) {
    return [=] {
      if (na->requires_grad) na->grad_buffer().matrix().middleCols(start, count) += o->grad.matrix();
    };
  });
}

/// Concatenates matrices (r_i x cols) along rows.
template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const Index cols = parts[0].value().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    if (p.value().cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p.value().rows();
  }
  Tensor<T> out({rows, cols});
  std::vector<Node<T>*> nodes;
  Index r = 0;
  for (const auto& p : parts) {
    out.matrix().middleRows(r, p.value().rows()) = p.value().matrix();
    r += p.value().rows();
    nodes.push_back(p.node());
  }
  return parts[0].graph().record(std::move(out), parts, [=](Node<T>* o) {
    return [=] {
      Index r0 = 0;
      for (Node<T>* n : nodes) {
        const Index h = n->value.rows();
        if (n->requires_grad) n->grad_buffer().matrix() += o->grad.matrix().middleRows(r0, h);
        r0 += h;
      }
    };
  });
}

/// out row i = a row index[i]. Repeated indices accumulate in backward.
template <typename T>
Var<T> gather_rows(const Var<T>& a, std::vector<Index> index) {
  const Index rows = a.value().rows();
  const Index cols = a.value().cols();
  if (index.empty()) throw ShapeError("gather_rows: empty index");
  Tensor<T> out({static_cast<Index>(index.size()), cols});
  auto src = a.value().matrix();
  auto dst = out.matrix();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= rows) throw ShapeError("gather_rows: index out of range");
    dst.row(static_cast<Index>(i)) = src.row(index[i]);
  }
  Node<T>* na = a.node();
  return a.graph().record(std::move(out), {a}, [=, index = std::move(index)](Node<T>* o) {
    return [=] {
      if (!na->requires_grad) return;
      auto g = na->grad_buffer().matrix();
      auto go = o->grad.matrix();
      for (std::size_t i = 0; i < index.size(); ++i) g.row(index[i]) += go.row(static_cast<Index>(i));
    };
  });
}

/// Flat gather: out[i] = a[index[i]] reshaped to `shape`.
template <typename T>
Var<T> gather(const Var<T>& a, std::vector<Index> index, Shape shape) {
  if (shape_size(shape) != static_cast<Index>(index.size()))
    throw ShapeError("gather: index length does not match shape");
  Tensor<T> out(std::move(shape));
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= a.size()) throw ShapeError("gather: index out of range");
    out[static_cast<Index>(i)] = a.value()[index[i]];
  }
  Node<T>* na = a.node();
  return a.graph().record(std::move(out), {a}, [=, index = std::move(index)](Node<T>* o) {
    return [=] {
      if (!na->requires_grad) return;
      Tensor<T>& g = na->grad_buffer();
      for (std::size_t i = 0; i < index.size(); ++i) g[index[i]] += o->grad[static_cast<Index>(i)];
    };
  });
}

// ------------------------------------------------------------------ reductions

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  Tensor<T> out(Shape{1}, a.value().vec().sum());
  Node<T>* na = a.node();
  return a.graph().record(std::move(out), {a}, [=](Node<T>* o) {
    return [=] {
      if (na->requires_grad) na->grad_buffer().vec().array() += o->grad[0];
    };
  });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  return scale(sum_all(a), T(1) / static_cast<T>(a.size()));
}

/// Mean over the last axis: (rows x cols) -> [rows].
template <typename T>
Var<T> row_mean(const Var<T>& a) {
  const Index cols = a.value().cols();
  Tensor<T> out(Shape{a.value().rows()});
  out.vec() = a.value().matrix().rowwise().mean();
  Node<T>* na = a.node();
  return a.graph().record(std::move(out), {a}, [=](Node<T>* o) {
    return [=] {
      if (!na->requires_grad) return;
      na->grad_buffer().matrix().colwise() += o->grad.vec() / static_cast<T>(cols);
    };
  });
}

/// Mean over rows: (rows x cols) -> [cols].
template <typename T>
Var<T> col_mean(const Var<T>& a) {
  const Index rows = a.value().rows();
  Tensor<T> out(Shape{a.value().cols()});
  out.vec() = a.value().matrix().colwise().mean().transpose();
  Node<T>* na = a.node();
  return a.graph().record(std::move(out), {a}, [=](Node<T>* o) {
    return [=] {
      if (!na->requires_grad) return;
      na->grad_buffer().matrix().rowwise() += (o->grad.vec() / static_cast<T>(rows)).transpose();
    };
  });
}

/// Averages each consecutive block of `group` rows: (G*group x C) -> (G x C).
template <typename T>
Var<T> group_mean_rows(const Var<T>& a, Index group) {
  const Index rows = a.value().rows();
  const Index cols = a.value().cols();
  if (group <= 0 || rows % group != 0) throw ShapeError("group_mean_rows: rows not divisible by group");
  const Index groups = rows / group;
  Tensor<T> out({groups, cols});
  auto src = a.value().matrix();
  for (Index g = 0; g < groups; ++g)
    out.matrix().row(g) = src.middleRows(g * group, group).colwise().mean();
  Node<T>* na = a.node();
  return a.graph().record(std::move(out), {a}, [=](Node<T>* o) {
    return [=] {
      if (!na->requires_grad) return;
      auto gi = na->grad_buffer().matrix();
      auto go = o->grad.matrix();
      const T inv = T(1) / static_cast<T>(group);
      for (Index g = 0; g < groups; ++g) gi.middleRows(g * group, group).rowwise() += go.row(g) * inv;
    };
  });
}

// ---------------------------------------------------------------- broadcasting

/// Adds a length-cols vector to every row.
template <typename T>
Var<T> add_row(const Var<T>& a, const Var<T>& b) {
  if (b.size() != a.value().cols()) throw ShapeError("add_row: vector length must equal column count");
  Tensor<T> out = a.value();
  out.matrix().rowwise() += b.value().vec().transpose();
  Node<T>* na = a.node();
  Node<T>* nb = b.node();
  return a.graph().record(std::move(out), {a, b}, [=](Node<T>* o) {
    return [=] {
      accumulate(na, o->grad.vec());
      if (nb->requires_grad) nb->grad_buffer().vec() += o->grad.matrix().colwise().sum().transpose();
    };
  });
}

/// Multiplies row i of a by w[i].
template <typename T>
Var<T> scale_rows(const Var<T>& a, const Var<T>& w) {
  if (w.size() != a.value().rows()) throw ShapeError("scale_rows: weight length must equal row count");
  Tensor<T> out = a.value();
  out.matrix() = w.value().vec().asDiagonal() * a.value().matrix();
  Node<T>* na = a.node();
  Node<T>* nw = w.node();
  return a.graph().record(std::move(out), {a, w}, [=](Node<T>* o) {
    return [=] {
      if (na->requires_grad) na->grad_buffer().matrix() += nw->value.vec().asDiagonal() * o->grad.matrix();
      if (nw->requires_grad)
        nw->grad_buffer().vec() += o->grad.matrix().cwiseProduct(na->value.matrix()).rowwise().sum();
    };
  });
}

// -------------------------------------------------------------- linear algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  if (a.dim(1) != b.dim(0)) throw ShapeError("matmul: inner dimensions disagree");
  Tensor<T> out({a.dim(0), b.dim(1)});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix();
  Node<T>* na = a.node();
  Node<T>* nb = b.node();
  return a.graph().record(std::move(out), {a, b}, [=](Node<T>* o) {
    return [=] {
      if (na->requires_grad) na->grad_buffer().matrix().noalias() += o->grad.matrix() * nb->value.matrix().transpose();
      if (nb->requires_grad) nb->grad_buffer().matrix().noalias() += na->value.matrix().transpose() * o->grad.matrix();
    };
  });
}

/// a * b^T.
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  detail::require_rank2(a, "matmul_nt");
  detail::require_rank2(b, "matmul_nt");
  if (a.dim(1) != b.dim(1)) throw ShapeError("matmul_nt: inner dimensions disagree");
  Tensor<T> out({a.dim(0), b.dim(0)});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix().transpose();
  Node<T>* na = a.node();
  Node<T>* nb = b.node();
  return a.graph().record(std::move(out), {a, b}, [=](Node<T>* o) {
    return [=] {
      if (na->requires_grad) na->grad_buffer().matrix().noalias() += o->grad.matrix() * nb->value.matrix();
      if (nb->requires_grad) nb->grad_buffer().matrix().noalias() += o->grad.matrix().transpose() * na->value.matrix();
    };
  });
}

/// Affine map over the last axis: x (..., in), weight (out x in), bias [out].
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>* bias = nullptr) {
  detail::require_rank2(weight, "linear");
  const Index in = weight.dim(1);
  const Index outd = weight.dim(0);
  if (x.value().cols() != in)
    throw ShapeError("linear: input width " + std::to_string(x.value().cols()) + " != weight width " +
                     std::to_string(in));
  if (bias && bias->size() != outd) throw ShapeError("linear: bias length mismatch");
  Shape shape = x.shape();
  shape.back() = outd;
  Tensor<T> out(shape);
  out.matrix().noalias() = x.value().matrix() * weight.value().matrix().transpose();
  if (bias) out.matrix().rowwise() += bias->value().vec().transpose();
  Node<T>* nx = x.node();
  Node<T>* nw = weight.node();
  Node<T>* nb = bias ? bias->node() : nullptr;
  std::vector<Var<T>> parents{x, weight};
  if (bias) parents.push_back(*bias);
  return x.graph().record(std::move(out), parents, [=](Node<T>* o) {
    return [=] {
      auto go = o->grad.matrix();
      if (nx->requires_grad) nx->grad_buffer().matrix().noalias() += go * nw->value.matrix();
      if (nw->requires_grad) nw->grad_buffer().matrix().noalias() += go.transpose() * nx->value.matrix();
      if (nb && nb->requires_grad) nb->grad_buffer().vec() += go.colwise().sum().transpose();
    };
  });
}

/// Dense layer followed by a pointwise activation.
template <typename T>
Var<T> dense_block(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, Activation act) {
  return activate(linear(x, weight, &bias), act);
}

/// Row-wise softmax over the last axis.
template <typename T>
Var<T> softmax_rows(const Var<T>& a) {
  Tensor<T> out = a.value();
  auto m = out.matrix();
  for (Index r = 0; r < m.rows(); ++r) {
    const T mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp();
    m.row(r) /= m.row(r).sum();
  }
  Node<T>* na = a.node();
  return a.graph().record(std::move(out), {a}, [=](Node<T>* o) {
    return [=] {
      if (!na->requires_grad) return;
      auto y = o->value.matrix();
      auto gy = o->grad.matrix();
      auto gx = na->grad_buffer().matrix();
      for (Index r = 0; r < y.rows(); ++r) {
        const T dot = y.row(r).dot(gy.row(r));
        gx.row(r).array() += y.row(r).array() * (gy.row(r).array() - dot);
      }
    };
  });
}

/// Euclidean norm of each row; the subgradient at a zero row is zero.
template <typename T>
Var<T> row_norm(const Var<T>& a) {
  Tensor<T> out(Shape{a.value().rows()});
  out.vec() = a.value().matrix().rowwise().norm();
  Node<T>* na = a.node();
  return a.graph().record(std::move(out), {a}, [=](Node<T>* o) {
    return [=] {
      if (!na->requires_grad) return;
      auto gx = na->grad_buffer().matrix();
      auto x = na->value.matrix();
      for (Index r = 0; r < x.rows(); ++r) {
        const T n = o->value[r];
        if (n > T(0)) gx.row(r) += x.row(r) * (o->grad[r] / n);
      }
    };
  });
}

/// Rows scaled to unit Euclidean norm (eps-guarded).
template <typename T>
Var<T> l2_normalize_rows(const Var<T>& a, T eps = T(1e-12)) {
  Tensor<T> out = a.value();
  ColVector<T> norms = a.value().matrix().rowwise().norm();
  for (Index r = 0; r < norms.size(); ++r) norms[r] = std::max(norms[r], eps);
  out.matrix() = norms.cwiseInverse().asDiagonal() * a.value().matrix();
  Node<T>* na = a.node();
  return a.graph().record(std::move(out), {a}, [=](Node<T>* o) {
    return [=] {
      if (!na->requires_grad) return;
      auto y = o->value.matrix();
      auto gy = o->grad.matrix();
      auto gx = na->grad_buffer().matrix();
      for (Index r = 0; r < y.rows(); ++r) {
        if (norms[r] <= eps) {
          gx.row(r) += gy.row(r) / eps;
          continue;
        }
        const T dot = y.row(r).dot(gy.row(r));
        gx.row(r) += (gy.row(r) - y.row(r) * dot) / norms[r];
      }
    };
  });
}

}  // namespace volmil

#endif  // VOLMIL_OPS_HPP_
