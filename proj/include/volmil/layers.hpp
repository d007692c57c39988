#ifndef VOLMIL_LAYERS_HPP_
#define VOLMIL_LAYERS_HPP_

#include "volmil/conv.hpp"
#include "volmil/graph.hpp"
#include "volmil/ops.hpp"

#include <cmath>
#include <memory>
#include <vector>

namespace volmil {

// ------------------------------------------------------------- normalization

/// Running statistics updated by a batch-norm forward in training mode.
template <typename T>
struct NormStats {
  Tensor<T>* mean = nullptr;
  Tensor<T>* var = nullptr;
  T momentum = T(0.1);
};

/// Batch normalization over N x C x spatial... (statistics per channel).
///
/// Training mode normalizes with batch statistics and updates `stats`;
/// evaluation mode uses the running statistics.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, NormStats<T> stats,
                  T eps = T(1e-5)) {
  if (x.value().rank() < 2) throw ShapeError("batch_norm expects N x C x ...");
  const Index n = x.dim(0);
  const Index c = x.dim(1);
  const Index plane = x.size() / (n * c);
  const Index m = n * plane;
  if (gamma.size() != c || beta.size() != c) throw ShapeError("batch_norm: affine length mismatch");
  const bool training = x.graph().training();
  if (!training && (!stats.mean || !stats.var)) throw std::logic_error("batch_norm: eval mode needs running stats");

  ColVector<T> mean(c), inv_std(c);
  const T* xs = x.value().data();
  if (training) {
    if (m < 2) throw ShapeError("batch_norm: training needs more than one value per channel");
    for (Index ch = 0; ch < c; ++ch) {
      T s = 0, s2 = 0;
      for (Index i = 0; i < n; ++i) {
        const T* p = xs + (i * c + ch) * plane;
        for (Index j = 0; j < plane; ++j) s += p[j];
      }
      const T mu = s / static_cast<T>(m);
      for (Index i = 0; i < n; ++i) {
        const T* p = xs + (i * c + ch) * plane;
        for (Index j = 0; j < plane; ++j) s2 += (p[j] - mu) * (p[j] - mu);
      }
      const T var = s2 / static_cast<T>(m);
      mean[ch] = mu;
      inv_std[ch] = T(1) / std::sqrt(var + eps);
      if (stats.mean && stats.var) {
        (*stats.mean)[ch] = (T(1) - stats.momentum) * (*stats.mean)[ch] + stats.momentum * mu;
        (*stats.var)[ch] = (T(1) - stats.momentum) * (*stats.var)[ch] +
                           stats.momentum * s2 / static_cast<T>(m - 1);
      }
    }
  } else {
    for (Index ch = 0; ch < c; ++ch) {
      mean[ch] = (*stats.mean)[ch];
      inv_std[ch] = T(1) / std::sqrt((*stats.var)[ch] + eps);
    }
  }

  Tensor<T> out(x.shape());
  auto xhat = std::make_shared<Tensor<T>>(x.shape());
  const T* gm = gamma.value().data();
  const T* bt = beta.value().data();
  for (Index i = 0; i < n; ++i)
    for (Index ch = 0; ch < c; ++ch) {
      const Index base = (i * c + ch) * plane;
      for (Index j = 0; j < plane; ++j) {
        const T h = (xs[base + j] - mean[ch]) * inv_std[ch];
        (*xhat)[base + j] = h;
        out[base + j] = gm[ch] * h + bt[ch];
      }
    }

  Node<T>* nx = x.node();
  Node<T>* ng = gamma.node();
  Node<T>* nb = beta.node();
  return x.graph().record(std::move(out), {x, gamma, beta}, [=](Node<T>* o) {
    return [=] {
      const T* dy = o->grad.data();
      ColVector<T> sum_dy = ColVector<T>::Zero(c), sum_dy_xhat = ColVector<T>::Zero(c);
      for (Index i = 0; i < n; ++i)
        for (Index ch = 0; ch < c; ++ch) {
          const Index base = (i * c + ch) * plane;
          for (Index j = 0; j < plane; ++j) {
            sum_dy[ch] += dy[base + j];
            sum_dy_xhat[ch] += dy[base + j] * (*xhat)[base + j];
          }
        }
      if (ng->requires_grad) ng->grad_buffer().vec() += sum_dy_xhat;
      if (nb->requires_grad) nb->grad_buffer().vec() += sum_dy;
      if (!nx->requires_grad) return;
      T* dx = nx->grad_buffer().data();
      const T* gm2 = ng->value.data();
      for (Index i = 0; i < n; ++i)
        for (Index ch = 0; ch < c; ++ch) {
          const Index base = (i * c + ch) * plane;
          const T k = gm2[ch] * inv_std[ch];
          if (training) {
            const T mdy = sum_dy[ch] / static_cast<T>(m);
            const T mdyx = sum_dy_xhat[ch] / static_cast<T>(m);
            for (Index j = 0; j < plane; ++j) dx[base + j] += k * (dy[base + j] - mdy - (*xhat)[base + j] * mdyx);
          } else {
            for (Index j = 0; j < plane; ++j) dx[base + j] += k * dy[base + j];
          }
        }
    };
  });
}

/// Layer normalization over the last axis with per-feature affine.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const Index cols = x.value().cols();
  if (gamma.size() != cols || beta.size() != cols) throw ShapeError("layer_norm: affine length mismatch");
  const Index rows = x.value().rows();
  auto xhat = std::make_shared<RowMatrix<T>>(rows, cols);
  ColVector<T> inv_std(rows);
  auto xm = x.value().matrix();
  for (Index r = 0; r < rows; ++r) {
    const T mu = xm.row(r).mean();
    const T var = (xm.row(r).array() - mu).square().mean();
    inv_std[r] = T(1) / std::sqrt(var + eps);
    xhat->row(r) = (xm.row(r).array() - mu) * inv_std[r];
  }
  Tensor<T> out(x.shape());
  out.matrix() = (*xhat) * gamma.value().vec().asDiagonal();
  out.matrix().rowwise() += beta.value().vec().transpose();
  Node<T>* nx = x.node();
  Node<T>* ng = gamma.node();
  Node<T>* nb = beta.node();
  return x.graph().record(std::move(out), {x, gamma, beta}, [=](Node<T>* o) {
    return [=] {
      auto dy = o->grad.matrix();
      if (ng->requires_grad) ng->grad_buffer().vec() += dy.cwiseProduct(*xhat).colwise().sum().transpose();
      if (nb->requires_grad) nb->grad_buffer().vec() += dy.colwise().sum().transpose();
      if (!nx->requires_grad) return;
      auto dx = nx->grad_buffer().matrix();
      RowMatrix<T> g = dy * ng->value.vec().asDiagonal();
      for (Index r = 0; r < rows; ++r) {
        const T mg = g.row(r).mean();
        const T mgx = g.row(r).dot(xhat->row(r)) / static_cast<T>(cols);
        dx.row(r).array() += inv_std[r] * (g.row(r).array() - mg - xhat->row(r).array() * mgx);
      }
    };
  });
}

/// Stochastic depth on a residual branch laid out as consecutive row
/// groups (one group per sample). In training each group is zeroed with
/// probability `rate` and survivors are scaled by 1/(1-rate). Identity in
/// evaluation or when rate is 0.
template <typename T>
Var<T> drop_path(const Var<T>& branch, double rate, Index group_rows) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("drop_path rate must be in [0, 1)");
  if (!branch.graph().training() || rate == 0.0) return branch;
  const Index rows = branch.value().rows();
  if (group_rows <= 0 || rows % group_rows != 0) throw ShapeError("drop_path: rows not divisible by group");
  ColVector<T> mask(rows);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (Index g = 0; g < rows / group_rows; ++g) {
    const T v = branch.graph().rng().bernoulli(rate) ? T(0) : keep_scale;
    mask.segment(g * group_rows, group_rows).setConstant(v);
  }
  Var<T> m = branch.graph().constant(Tensor<T>(Shape{rows}, mask));
  return scale_rows(branch, m);
}

// ------------------------------------------------------------------ attention

/// Attention probabilities of one call: groups x heads matrices of T x T.
template <typename T>
struct AttentionMaps {
  Index groups = 0, heads = 0, tokens = 0;
  std::vector<RowMatrix<T>> maps;  // index = group * heads + head

  const RowMatrix<T>& at(Index group, Index head) const {
    return maps[static_cast<std::size_t>(group * heads + head)];
  }
};

/// Scaled dot-product attention over row groups.
///
/// q, k, v are (groups * tokens) x D. Each group attends within itself;
/// heads split D into equal slices. Returns the concatenated head outputs.
template <typename T>
Var<T> grouped_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, Index tokens, Index heads,
                         AttentionMaps<T>* trace = nullptr) {
  detail::require_same_shape(q, k, "attention");
  detail::require_same_shape(q, v, "attention");
  const Index rows = q.value().rows();
  const Index d = q.value().cols();
  if (heads <= 0 || d % heads != 0) throw ShapeError("attention: model width not divisible by head count");
  if (tokens <= 0 || rows % tokens != 0) throw ShapeError("attention: rows not divisible by token count");
  const Index groups = rows / tokens;
  const Index dh = d / heads;
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(dh));
  auto probs = std::make_shared<std::vector<RowMatrix<T>>>(static_cast<std::size_t>(groups * heads));
  Tensor<T> out({rows, d});
  auto Q = q.value().matrix();
  auto K = k.value().matrix();
  auto V = v.value().matrix();
  auto O = out.matrix();
  for (Index g = 0; g < groups; ++g)
    for (Index h = 0; h < heads; ++h) {
      RowMatrix<T> s = (Q.block(g * tokens, h * dh, tokens, dh) * K.block(g * tokens, h * dh, tokens, dh).transpose()) * inv_scale;
      for (Index r = 0; r < tokens; ++r) {
        const T mx = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - mx).exp();
        s.row(r) /= s.row(r).sum();
      }
      O.block(g * tokens, h * dh, tokens, dh).noalias() = s * V.block(g * tokens, h * dh, tokens, dh);
      (*probs)[static_cast<std::size_t>(g * heads + h)] = std::move(s);
    }
  if (trace) {
    trace->groups = groups;
    trace->heads = heads;
    trace->tokens = tokens;
    trace->maps = *probs;
  }
  Node<T>* nq = q.node();
  Node<T>* nk = k.node();
  Node<T>* nv = v.node();
  return q.graph().record(std::move(out), {q, k, v}, [=](Node<T>* o) {
    return [=] {
      auto dO = o->grad.matrix();
      auto Qm = nq->value.matrix();
      auto Km = nk->value.matrix();
      auto Vm = nv->value.matrix();
      for (Index g = 0; g < groups; ++g)
        for (Index h = 0; h < heads; ++h) {
          const RowMatrix<T>& A = (*probs)[static_cast<std::size_t>(g * heads + h)];
          auto dOb = dO.block(g * tokens, h * dh, tokens, dh);
          if (nv->requires_grad) nv->grad_buffer().matrix().block(g * tokens, h * dh, tokens, dh).noalias() += A.transpose() * dOb;
          if (!nq->requires_grad && !nk->requires_grad) continue;
          RowMatrix<T> dA = dOb * Vm.block(g * tokens, h * dh, tokens, dh).transpose();
          RowMatrix<T> dS(tokens, tokens);
          for (Index r = 0; r < tokens; ++r) {
            const T dot = A.row(r).dot(dA.row(r));
            dS.row(r) = A.row(r).array() * (dA.row(r).array() - dot);
          }
          dS *= inv_scale;
          if (nq->requires_grad)
            nq->grad_buffer().matrix().block(g * tokens, h * dh, tokens, dh).noalias() += dS * Km.block(g * tokens, h * dh, tokens, dh);
          if (nk->requires_grad)
            nk->grad_buffer().matrix().block(g * tokens, h * dh, tokens, dh).noalias() += dS.transpose() * Qm.block(g * tokens, h * dh, tokens, dh);
        }
    };
  });
}

/// Parameters of one multi-head self-attention layer.
template <typename T>
struct AttentionWeights {
  Var<T> qkv_weight;  // 3D x D
  Var<T> qkv_bias;    // 3D
  Var<T> out_weight;  // D x D
  Var<T> out_bias;    // D
};

/// Multi-head self-attention over groups of `tokens` rows.
template <typename T>
Var<T> multi_head_attention(const Var<T>& x, const AttentionWeights<T>& w, Index tokens, Index heads,
                            AttentionMaps<T>* trace = nullptr) {
  const Index d = x.value().cols();
  if (heads <= 0 || d % heads != 0) throw ShapeError("multi_head_attention: width not divisible by heads");
  Var<T> qkv = linear(x, w.qkv_weight, &w.qkv_bias);
  Var<T> q = slice_cols(qkv, 0, d);
  Var<T> k = slice_cols(qkv, d, d);
  Var<T> v = slice_cols(qkv, 2 * d, d);
  Var<T> a = grouped_attention(q, k, v, tokens, heads, trace);
  return linear(a, w.out_weight, &w.out_bias);
}

// ----------------------------------------------------------------------- LSTM

/// Weights of one LSTM direction; gate order i, f, g, o.
template <typename T>
struct LstmWeights {
  Var<T> input_weight;   // 4H x D
  Var<T> hidden_weight;  // 4H x H
  Var<T> bias;           // 4H
};

namespace detail {

/// Runs one direction over `steps`, each a batch x D input at step t.
/// Returns hidden outputs in step order.
template <typename T>
std::vector<Var<T>> lstm_direction(const Var<T>& projected, Index batch, Index steps, const LstmWeights<T>& w,
                                   bool reverse) {
  Graph<T>& graph = projected.graph();
  const Index hidden = w.hidden_weight.dim(1);
  std::vector<Var<T>> outputs(static_cast<std::size_t>(steps));
  Var<T> h = graph.constant(Tensor<T>({batch, hidden}));
  Var<T> c = graph.constant(Tensor<T>({batch, hidden}));
  for (Index k = 0; k < steps; ++k) {
    const Index t = reverse ? steps - 1 - k : k;
    std::vector<Index> rows(static_cast<std::size_t>(batch));
    for (Index b = 0; b < batch; ++b) rows[static_cast<std::size_t>(b)] = b * steps + t;
    Var<T> gates = gather_rows(projected, rows) + matmul_nt(h, w.hidden_weight);
    Var<T> i = sigmoid(slice_cols(gates, 0, hidden));
    Var<T> f = sigmoid(slice_cols(gates, hidden, hidden));
    Var<T> g = tanh(slice_cols(gates, 2 * hidden, hidden));
    Var<T> o = sigmoid(slice_cols(gates, 3 * hidden, hidden));
    c = f * c + i * g;
    h = o * tanh(c);
    outputs[static_cast<std::size_t>(t)] = h;
  }
  return outputs;
}

}  // namespace detail

/// Bidirectional LSTM over `batch` sequences of `steps` rows each.
///
/// seq is (batch * steps) x D with rows ordered sequence-major
/// (row = b * steps + t). Output is (batch * steps) x 2H in the same order;
/// the forward direction fills the first H columns.
template <typename T>
Var<T> bilstm_forward(const Var<T>& seq, Index batch, Index steps, const LstmWeights<T>& forward,
                      const LstmWeights<T>& backward) {
  if (steps < 1 || batch < 1 || seq.value().rows() != batch * steps)
    throw ShapeError("bilstm_forward: rows must equal batch * steps");
  const Index hidden = forward.hidden_weight.dim(1);
  if (forward.input_weight.dim(0) != 4 * hidden || backward.hidden_weight.dim(1) != hidden)
    throw ShapeError("bilstm_forward: inconsistent gate shapes");
  Var<T> pf = linear(seq, forward.input_weight, &forward.bias);
  Var<T> pb = linear(seq, backward.input_weight, &backward.bias);
  auto hf = detail::lstm_direction(pf, batch, steps, forward, false);
  auto hb = detail::lstm_direction(pb, batch, steps, backward, true);
  std::vector<Var<T>> per_step;
  for (Index t = 0; t < steps; ++t)
    per_step.push_back(concat_cols<T>({hf[static_cast<std::size_t>(t)], hb[static_cast<std::size_t>(t)]}));
  Var<T> step_major = concat_rows(per_step);  // row = t * batch + b
  std::vector<Index> order(static_cast<std::size_t>(batch * steps));
  for (Index b = 0; b < batch; ++b)
    for (Index t = 0; t < steps; ++t) order[static_cast<std::size_t>(b * steps + t)] = t * batch + b;
  return gather_rows(step_major, order);
}

// ---------------------------------------------------------------------- losses

/// Mean weighted binary cross-entropy on logits, in softplus form.
template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, const std::vector<T>& labels, T pos_weight = T(1)) {
  const Index n = logits.size();
  if (static_cast<Index>(labels.size()) != n) throw ShapeError("bce: label count mismatch");
  if (!(pos_weight > T(0))) throw std::invalid_argument("bce: pos_weight must be positive");
  for (T y : labels)
    if (y != T(0) && y != T(1)) throw std::invalid_argument("bce: labels must be 0 or 1");
  auto softplus = [](T x) { return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x))); };
  T total = 0;
  for (Index i = 0; i < n; ++i) {
    const T x = logits.value()[i];
    const T y = labels[static_cast<std::size_t>(i)];
    total += y * pos_weight * softplus(-x) + (T(1) - y) * softplus(x);
  }
  Node<T>* nl = logits.node();
  return logits.graph().record(Tensor<T>(Shape{1}, total / static_cast<T>(n)), {logits}, [=](Node<T>* o) {
    return [=] {
      if (!nl->requires_grad) return;
      Tensor<T>& g = nl->grad_buffer();
      for (Index i = 0; i < n; ++i) {
        const T x = nl->value[i];
        const T s = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
        const T y = labels[static_cast<std::size_t>(i)];
        g[i] += o->grad[0] * (y * pos_weight * (s - T(1)) + (T(1) - y) * s) / static_cast<T>(n);
      }
    };
  });
}

}  // namespace volmil

#endif  // VOLMIL_LAYERS_HPP_
