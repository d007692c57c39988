#ifndef VOLMIL_MODELS_HPP_
#define VOLMIL_MODELS_HPP_

#include "volmil/conv.hpp"
#include "volmil/errors.hpp"
#include "volmil/layers.hpp"
#include "volmil/model_spec.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace volmil {

/// Per-call diagnostics of a forward pass.
template <typename T>
struct ForwardTrace {
  /// SE attention, B x S, values in (0,1) (cnn_bilstm only).
  RowMatrix<T> slice_weights;
  /// Token attention of the last transformer block (cnn_transformer only).
  AttentionMaps<T> attention;
  /// Slice embeddings, (B*S) x D (2.5D architectures only).
  Tensor<T> embeddings;
};

/// 2D kernel O x I x Kh x Kw -> O x I x Kd x Kh x Kw, every depth copy
/// scaled by 1/Kd. The last copy carries the rounding remainder so that
/// summing over depth in order reproduces the 2D kernel bit for bit.
template <typename T>
Tensor<T> inflate_kernel(const Tensor<T>& kernel2d, Index depth) {
  if (kernel2d.rank() != 4) throw ShapeError("inflate_kernel expects O x I x Kh x Kw");
  if (depth < 1) throw std::invalid_argument("inflate_kernel: depth must be >= 1");
  const Index o = kernel2d.dim(0), i = kernel2d.dim(1), kh = kernel2d.dim(2), kw = kernel2d.dim(3);
  Tensor<T> out({o, i, depth, kh, kw});
  const Index plane = kh * kw;
  const T s = T(1) / static_cast<T>(depth);
  for (Index oi = 0; oi < o * i; ++oi)
    for (Index p = 0; p < plane; ++p) {
      const T x = kernel2d[oi * plane + p];
      const T part = x * s;
      T partial = T(0);
      for (Index d = 0; d + 1 < depth; ++d) {
        out[(oi * depth + d) * plane + p] = part;
        partial += part;
      }
      // Exact: partial lies within a factor of two of x.
      out[(oi * depth + depth - 1) * plane + p] = x - partial;
    }
  return out;
}

/// Copies every encoder.* parameter and buffer of `source` into `target`.
/// 2D kernels are inflated when the target holds the 3D counterpart.
/// Throws PreconditionError naming the first layer that does not fit, in
/// which case the target is left unchanged. Appends one line per tensor to
/// `log` when given.
template <typename T>
void copy_encoder(const ParameterStore<T>& source, ParameterStore<T>& target, std::vector<std::string>* log = nullptr) {
  auto layer_of = [](const std::string& name) { return name.substr(0, name.rfind('.')); };
  auto is_encoder = [](const std::string& name) { return name.rfind("encoder.", 0) == 0; };
  auto inflatable = [](const Shape& ss, const Shape& ds) {
    return ss.size() == 4 && ds.size() == 5 && ds[0] == ss[0] && ds[1] == ss[1] && ds[3] == ss[2] && ds[4] == ss[3];
  };
  for (const Parameter<T>* p : target.parameters())
    if (is_encoder(p->name) && !source.contains(p->name))
      throw PreconditionError("encoder transfer: layer " + layer_of(p->name) + " missing in source");
  for (const Parameter<T>* p : source.parameters()) {
    if (!is_encoder(p->name)) continue;
    if (!target.contains(p->name))
      throw PreconditionError("encoder transfer: layer " + layer_of(p->name) + " missing in target");
    const Shape& ss = p->value.shape();
    const Shape& ds = target.at(p->name).value.shape();
    if (ss != ds && !inflatable(ss, ds))
      throw PreconditionError("encoder transfer: layer " + layer_of(p->name) + " has source shape " +
                              shape_string(ss) + " but target shape " + shape_string(ds));
  }
  for (const Buffer<T>* b : source.buffers())
    if (is_encoder(b->name) &&
        (!target.contains_buffer(b->name) || target.buffer(b->name).value.shape() != b->value.shape()))
      throw PreconditionError("encoder transfer: layer " + layer_of(b->name) + " statistics do not fit the target");

  for (const Parameter<T>* p : source.parameters()) {
    if (!is_encoder(p->name)) continue;
    Parameter<T>& d = target.at(p->name);
    if (p->value.shape() == d.value.shape()) {
      d.value = p->value;
      if (log) log->push_back(p->name + " copied " + shape_string(p->value.shape()));
    } else {
      d.value = inflate_kernel(p->value, d.value.dim(2));
      if (log) log->push_back(p->name + " inflated " + shape_string(p->value.shape()) + " -> " + shape_string(d.value.shape()));
    }
  }
  for (const Buffer<T>* b : source.buffers()) {
    if (!is_encoder(b->name)) continue;
    target.buffer(b->name).value = b->value;
    if (log) log->push_back(b->name + " copied " + shape_string(b->value.shape()));
  }
}

namespace detail {

template <typename T>
void add_conv(ParameterStore<T>& store, const std::string& name, Shape shape, std::uint64_t seed) {
  Rng rng(derive_seed(seed, name + ".weight"));
  store.add(name + ".weight", init::kaiming<T>(std::move(shape), rng));
}

template <typename T>
void add_bn(ParameterStore<T>& store, const std::string& name, Index c) {
  store.add(name + ".gamma", Tensor<T>({c}, T(1)));
  store.add(name + ".beta", Tensor<T>({c}, T(0)));
  store.add_buffer(name + ".running_mean", Tensor<T>({c}, T(0)));
  store.add_buffer(name + ".running_var", Tensor<T>({c}, T(1)));
}

template <typename T>
void add_dense(ParameterStore<T>& store, const std::string& name, Index in, Index out, std::uint64_t seed,
               double stddev = 0.0) {
  Rng rng(derive_seed(seed, name));
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  store.add(name + ".weight", stddev > 0 ? init::normal<T>({out, in}, stddev, rng) : init::uniform<T>({out, in}, bound, rng));
  store.add(name + ".bias", stddev > 0 ? Tensor<T>({out}) : init::uniform<T>({out}, bound, rng));
}

template <typename T>
void add_layer_norm(ParameterStore<T>& store, const std::string& name, Index d) {
  store.add(name + ".gamma", Tensor<T>({d}, T(1)));
  store.add(name + ".beta", Tensor<T>({d}, T(0)));
}

template <typename T>
void add_attention(ParameterStore<T>& store, const std::string& name, Index d, std::uint64_t seed) {
  Rng rng(derive_seed(seed, name));
  store.add(name + ".qkv_weight", init::normal<T>({3 * d, d}, 0.02, rng));
  store.add(name + ".qkv_bias", Tensor<T>({3 * d}));
  store.add(name + ".out_weight", init::normal<T>({d, d}, 0.02, rng));
  store.add(name + ".out_bias", Tensor<T>({d}));
}

template <typename T>
void add_lstm(ParameterStore<T>& store, const std::string& name, Index in, Index hidden, std::uint64_t seed) {
  Rng rng(derive_seed(seed, name));
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
  store.add(name + ".input_weight", init::uniform<T>({4 * hidden, in}, bound, rng));
  store.add(name + ".hidden_weight", init::uniform<T>({4 * hidden, hidden}, bound, rng));
  store.add(name + ".bias", init::uniform<T>({4 * hidden}, bound, rng));
}

/// Registers the encoder. Volumetric encoders carry depth-inflated kernels.
template <typename T>
void add_encoder(ParameterStore<T>& store, const ModelSpec& spec, bool volumetric, std::uint64_t seed) {
  const EncoderSpec& e = spec.encoder;
  auto kernel = [&](Index o, Index i, Index kd, Index k) -> Shape {
    return volumetric ? Shape{o, i, kd, k, k} : Shape{o, i, k, k};
  };
  add_conv(store, "encoder.stem.conv", kernel(e.stem_width, e.in_channels, spec.inflation.stem_depth, 7), seed);
  add_bn(store, "encoder.stem.bn", e.stem_width);
  Index in = e.stem_width;
  for (std::size_t st = 0; st < e.widths.size(); ++st) {
    const Index width = e.widths[st];
    const Index out = width * e.expansion;
    for (Index b = 0; b < e.blocks[st]; ++b) {
      const std::string p = "encoder.layer" + std::to_string(st + 1) + "." + std::to_string(b) + ".";
      const Index stride = (st > 0 && b == 0) ? 2 : 1;
      add_conv(store, p + "conv1", kernel(width, in, 1, 1), seed);
      add_bn(store, p + "bn1", width);
      add_conv(store, p + "conv2", kernel(width, width, spec.inflation.conv3_depth, 3), seed);
      add_bn(store, p + "bn2", width);
      add_conv(store, p + "conv3", kernel(out, width, 1, 1), seed);
      add_bn(store, p + "bn3", out);
      if (stride != 1 || in != out) {
        add_conv(store, p + "downsample.conv", kernel(out, in, 1, 1), seed);
        add_bn(store, p + "downsample.bn", out);
      }
      in = out;
    }
  }
}

template <typename T>
Var<T> bn_apply(Graph<T>& g, ParameterStore<T>& store, const std::string& name, const Var<T>& x) {
  return batch_norm(x, g.param(store.at(name + ".gamma")), g.param(store.at(name + ".beta")),
                    NormStats<T>{&store.buffer(name + ".running_mean").value, &store.buffer(name + ".running_var").value});
}

template <typename T>
Var<T> dense_apply(Graph<T>& g, ParameterStore<T>& store, const std::string& name, const Var<T>& x,
                   Activation act = Activation::none) {
  return dense_block(x, g.param(store.at(name + ".weight")), g.param(store.at(name + ".bias")), act);
}

template <typename T>
Var<T> ln_apply(Graph<T>& g, ParameterStore<T>& store, const std::string& name, const Var<T>& x) {
  return layer_norm(x, g.param(store.at(name + ".gamma")), g.param(store.at(name + ".beta")));
}

template <typename T>
AttentionWeights<T> attention_weights(Graph<T>& g, ParameterStore<T>& store, const std::string& name) {
  return {g.param(store.at(name + ".qkv_weight")), g.param(store.at(name + ".qkv_bias")),
          g.param(store.at(name + ".out_weight")), g.param(store.at(name + ".out_bias"))};
}

template <typename T>
LstmWeights<T> lstm_weights(Graph<T>& g, ParameterStore<T>& store, const std::string& name) {
  return {g.param(store.at(name + ".input_weight")), g.param(store.at(name + ".hidden_weight")),
          g.param(store.at(name + ".bias"))};
}

/// N x 1 x ... -> N x C x ... by copying the single channel.
template <typename T>
Var<T> replicate_channels(const Var<T>& x, Index channels) {
  if (channels == 1) return x;
  const Index n = x.dim(0);
  const Index plane = x.size() / n;
  std::vector<Index> index(static_cast<std::size_t>(n * channels * plane));
  Shape shape = x.shape();
  shape[1] = channels;
  std::size_t k = 0;
  for (Index i = 0; i < n; ++i)
    for (Index c = 0; c < channels; ++c)
      for (Index p = 0; p < plane; ++p) index[k++] = i * plane + p;
  return gather(x, std::move(index), shape);
}

/// Shared 2D (N x C x H x W) or inflated 3D (N x C x D x H x W) encoder;
/// returns the final feature map before global pooling.
template <typename T>
Var<T> encoder_features(Graph<T>& g, ParameterStore<T>& store, const ModelSpec& spec, Var<T> x, bool volumetric) {
  const EncoderSpec& e = spec.encoder;
  auto conv = [&](const std::string& name, const Var<T>& in, Index stride, Index pad) {
    Var<T> k = g.param(store.at(name + ".weight"));
    if (!volumetric) return conv2d(in, k, stride, pad);
    const Index kd = k.dim(2);
    return conv3d(in, k, Triple{1, stride, stride}, Triple{kd / 2, pad, pad});
  };
  x = replicate_channels(x, e.in_channels);
  x = relu(bn_apply(g, store, "encoder.stem.bn", conv("encoder.stem.conv", x, 2, 3)));
  x = volumetric ? max_pool3d(x, Triple{1, 3, 3}, Triple{1, 2, 2}, Triple{0, 1, 1}) : max_pool2d(x, 3, 2, 1);
  Index in = e.stem_width;
  for (std::size_t st = 0; st < e.widths.size(); ++st) {
    const Index out = e.widths[st] * e.expansion;
    for (Index b = 0; b < e.blocks[st]; ++b) {
      const std::string p = "encoder.layer" + std::to_string(st + 1) + "." + std::to_string(b) + ".";
      const Index stride = (st > 0 && b == 0) ? 2 : 1;
      Var<T> y = relu(bn_apply(g, store, p + "bn1", conv(p + "conv1", x, 1, 0)));
      y = relu(bn_apply(g, store, p + "bn2", conv(p + "conv2", y, stride, 1)));
      y = bn_apply(g, store, p + "bn3", conv(p + "conv3", y, 1, 0));
      Var<T> shortcut = x;
      if (stride != 1 || in != out) shortcut = bn_apply(g, store, p + "downsample.bn", conv(p + "downsample.conv", x, stride, 0));
      x = relu(y + shortcut);
      in = out;
    }
  }
  return x;
}

}  // namespace detail

/// Squeeze-and-excitation over the slice axis.
///
/// features is (B*S) x F, rows sequence-major. Squeeze is the mean over F,
/// excitation is S -> ceil(S/r) (relu) -> S (sigmoid). Returns the B x S
/// weights and the reweighted rows.
template <typename T>
std::pair<Var<T>, Var<T>> se_attention(const Var<T>& features, Index batch, const Var<T>& fc1_w, const Var<T>& fc1_b,
                                       const Var<T>& fc2_w, const Var<T>& fc2_b) {
  const Index steps = features.value().rows() / batch;
  Var<T> squeeze = reshape(row_mean(features), Shape{batch, steps});
  Var<T> hidden = dense_block(squeeze, fc1_w, fc1_b, Activation::relu);
  Var<T> weights = dense_block(hidden, fc2_w, fc2_b, Activation::sigmoid);
  Var<T> reweighted = scale_rows(features, reshape(weights, Shape{batch * steps}));
  return {weights, reweighted};
}

/// A network built from a ModelSpec with its parameters.
template <typename T>
class Model {
 public:
  Model(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
    spec_.validate();
    const Index S = spec_.input.slices;
    switch (spec_.arch) {
      case Architecture::cnn_bilstm: {
        detail::add_encoder(store_, spec_, false, seed);
        const Index D = spec_.encoder.output_dim();
        const Index H = spec_.bilstm.hidden;
        detail::add_lstm(store_, "aggregator.lstm.fwd", D, H, seed);
        detail::add_lstm(store_, "aggregator.lstm.bwd", D, H, seed);
        const Index R = (S + spec_.bilstm.se_reduction - 1) / spec_.bilstm.se_reduction;
        detail::add_dense(store_, "aggregator.se.fc1", S, R, seed);
        detail::add_dense(store_, "aggregator.se.fc2", R, S, seed);
        detail::add_dense(store_, "head", 2 * H, 1, seed);
        break;
      }
      case Architecture::cnn_transformer: {
        detail::add_encoder(store_, spec_, false, seed);
        const Index D = spec_.encoder.output_dim();
        const Index T_ = S + 1;
        Rng rng(derive_seed(seed, "aggregator.tokens"));
        store_.add("aggregator.cls.token", init::normal<T>({1, D}, 0.02, rng));
        if (spec_.transformer.positional) store_.add("aggregator.pos.table", init::normal<T>({T_, D}, 0.02, rng));
        for (Index b = 0; b < spec_.transformer.blocks; ++b) {
          const std::string p = "aggregator.block" + std::to_string(b) + ".";
          detail::add_layer_norm(store_, p + "ln1", D);
          detail::add_attention(store_, p + "attn", D, seed);
          detail::add_layer_norm(store_, p + "ln2", D);
          detail::add_dense(store_, p + "fc1", D, spec_.transformer.mlp_dim, seed, 0.02);
          detail::add_dense(store_, p + "fc2", spec_.transformer.mlp_dim, D, seed, 0.02);
        }
        detail::add_layer_norm(store_, "aggregator.norm", D);
        detail::add_dense(store_, "head", D, 1, seed);
        break;
      }
      case Architecture::i3d: {
        detail::add_encoder(store_, spec_, true, seed);
        detail::add_dense(store_, "head", spec_.encoder.output_dim(), 1, seed);
        break;
      }
      case Architecture::vivit_fsa: {
        const VivitSpec& v = spec_.vivit;
        const Index N = S * patches_per_slice();
        detail::add_dense(store_, "vivit.patch_embed", v.patch * v.patch, v.dim, seed);
        Rng rng(derive_seed(seed, "vivit.pos"));
        store_.add("vivit.pos.table", init::normal<T>({N, v.dim}, 0.02, rng));
        for (Index b = 0; b < v.blocks; ++b) {
          const std::string p = "vivit.block" + std::to_string(b) + ".";
          detail::add_layer_norm(store_, p + "ln_s", v.dim);
          detail::add_attention(store_, p + "attn_s", v.dim, seed);
          detail::add_layer_norm(store_, p + "ln_t", v.dim);
          detail::add_attention(store_, p + "attn_t", v.dim, seed);
          detail::add_layer_norm(store_, p + "ln_mlp", v.dim);
          detail::add_dense(store_, p + "fc1", v.dim, v.mlp_dim, seed, 0.02);
          detail::add_dense(store_, p + "fc2", v.mlp_dim, v.dim, seed, 0.02);
        }
        detail::add_layer_norm(store_, "vivit.norm", v.dim);
        detail::add_dense(store_, "head", v.dim, 1, seed);
        break;
      }
    }
  }

  const ModelSpec& spec() const { return spec_; }
  ParameterStore<T>& store() { return store_; }
  const ParameterStore<T>& store() const { return store_; }

  /// Slice embeddings: N x H x W slices -> N x D (2.5D encoder).
  Var<T> encode(Graph<T>& g, const Var<T>& slices) {
    if (spec_.arch == Architecture::vivit_fsa || spec_.arch == Architecture::i3d)
      throw std::logic_error("encode: architecture has no 2D slice encoder");
    if (slices.value().rank() != 3 || slices.dim(1) != spec_.input.height || slices.dim(2) != spec_.input.width)
      throw ShapeError("encode: expected N x " + std::to_string(spec_.input.height) + " x " +
                       std::to_string(spec_.input.width) + " slices, got " + shape_string(slices.shape()));
    Var<T> x = reshape(slices, Shape{slices.dim(0), 1, slices.dim(1), slices.dim(2)});
    return global_avg_pool(detail::encoder_features(g, store_, spec_, x, false));
  }

  /// Final 2D feature maps before pooling, N x C x h x w.
  Var<T> slice_features(Graph<T>& g, const Var<T>& slices) {
    if (!spec_.uses_encoder() || spec_.arch == Architecture::i3d)
      throw std::logic_error("slice_features: architecture has no 2D slice encoder");
    Var<T> x = reshape(slices, Shape{slices.dim(0), 1, slices.dim(1), slices.dim(2)});
    return detail::encoder_features(g, store_, spec_, x, false);
  }

  /// Logits for a batch of volumes B x S x H x W; returns shape [B].
  Var<T> forward(Graph<T>& g, const Var<T>& volumes, ForwardTrace<T>* trace = nullptr) {
    const InputSpec& in = spec_.input;
    if (volumes.value().rank() != 4 || volumes.dim(1) != in.slices || volumes.dim(2) != in.height ||
        volumes.dim(3) != in.width)
      throw ShapeError("model input must be B x " + std::to_string(in.slices) + " x " + std::to_string(in.height) +
                       " x " + std::to_string(in.width) + ", got " + shape_string(volumes.shape()));
    const Index B = volumes.dim(0);
    switch (spec_.arch) {
      case Architecture::cnn_bilstm: return bilstm_head(g, embed(g, volumes, trace), B, trace);
      case Architecture::cnn_transformer: return transformer_head(g, embed(g, volumes, trace), B, trace);
      case Architecture::i3d: {
        Var<T> x = reshape(volumes, Shape{B, 1, in.slices, in.height, in.width});
        Var<T> pooled = global_avg_pool(detail::encoder_features(g, store_, spec_, x, true));
        return reshape(detail::dense_apply(g, store_, "head", pooled), Shape{B});
      }
      case Architecture::vivit_fsa: return vivit(g, volumes);
    }
    throw std::logic_error("unreachable");
  }

  /// Feature map of the inflated encoder, B x C x S x h x w (i3d only).
  Var<T> volumetric_features(Graph<T>& g, const Var<T>& volumes) {
    if (spec_.arch != Architecture::i3d) throw std::logic_error("volumetric_features: i3d only");
    const InputSpec& in = spec_.input;
    Var<T> x = reshape(volumes, Shape{volumes.dim(0), 1, in.slices, in.height, in.width});
    return detail::encoder_features(g, store_, spec_, x, true);
  }

  Index patches_per_slice() const {
    return (spec_.input.height / spec_.vivit.patch) * (spec_.input.width / spec_.vivit.patch);
  }

 private:
  Var<T> embed(Graph<T>& g, const Var<T>& volumes, ForwardTrace<T>* trace) {
    const InputSpec& in = spec_.input;
    Var<T> e = encode(g, reshape(volumes, Shape{volumes.dim(0) * in.slices, in.height, in.width}));
    if (trace) trace->embeddings = e.value();
    return e;
  }

  Var<T> bilstm_head(Graph<T>& g, const Var<T>& e, Index B, ForwardTrace<T>* trace) {
    const Index S = spec_.input.slices;
    Var<T> h = bilstm_forward(e, B, S, detail::lstm_weights(g, store_, "aggregator.lstm.fwd"),
                              detail::lstm_weights(g, store_, "aggregator.lstm.bwd"));
    auto [weights, reweighted] =
        se_attention<T>(h, B, g.param(store_.at("aggregator.se.fc1.weight")),
                        g.param(store_.at("aggregator.se.fc1.bias")), g.param(store_.at("aggregator.se.fc2.weight")),
                        g.param(store_.at("aggregator.se.fc2.bias")));
    if (trace) trace->slice_weights = weights.value().matrix();
    Var<T> pooled = group_mean_rows(reweighted, S);
    return reshape(detail::dense_apply(g, store_, "head", pooled), Shape{B});
  }

  Var<T> transformer_head(Graph<T>& g, const Var<T>& e, Index B, ForwardTrace<T>* trace) {
    const Index S = spec_.input.slices;
    const Index T_ = S + 1;
    const TransformerSpec& ts = spec_.transformer;
    Var<T> all = concat_rows<T>({g.param(store_.at("aggregator.cls.token")), e});
    std::vector<Index> order;
    for (Index b = 0; b < B; ++b) {
      order.push_back(0);
      for (Index s = 0; s < S; ++s) order.push_back(1 + b * S + s);
    }
    Var<T> x = gather_rows(all, order);
    if (ts.positional) {
      std::vector<Index> pos;
      for (Index b = 0; b < B; ++b)
        for (Index t = 0; t < T_; ++t) pos.push_back(t);
      x = x + gather_rows(g.param(store_.at("aggregator.pos.table")), pos);
    }
    for (Index b = 0; b < ts.blocks; ++b) {
      const std::string p = "aggregator.block" + std::to_string(b) + ".";
      const double rate = ts.blocks > 1 ? ts.drop_path * static_cast<double>(b) / static_cast<double>(ts.blocks - 1) : 0.0;
      AttentionMaps<T>* maps = (trace && b == ts.blocks - 1) ? &trace->attention : nullptr;
      Var<T> a = multi_head_attention(detail::ln_apply(g, store_, p + "ln1", x),
                                      detail::attention_weights(g, store_, p + "attn"), T_, ts.heads, maps);
      x = x + drop_path(a, rate, T_);
      Var<T> m = detail::dense_apply(g, store_, p + "fc1", detail::ln_apply(g, store_, p + "ln2", x), Activation::gelu);
      x = x + drop_path(detail::dense_apply(g, store_, p + "fc2", m), rate, T_);
    }
    std::vector<Index> cls;
    for (Index b = 0; b < B; ++b) cls.push_back(b * T_);
    Var<T> readout = gather_rows(detail::ln_apply(g, store_, "aggregator.norm", x), cls);
    return reshape(detail::dense_apply(g, store_, "head", readout), Shape{B});
  }

  Var<T> vivit(Graph<T>& g, const Var<T>& volumes) {
    const VivitSpec& v = spec_.vivit;
    const Index B = volumes.dim(0), S = spec_.input.slices, H = spec_.input.height, W = spec_.input.width;
    const Index pw = W / v.patch, P = patches_per_slice(), N = S * P, pp = v.patch * v.patch;
    std::vector<Index> index(static_cast<std::size_t>(B * N * pp));
    std::size_t k = 0;
    for (Index b = 0; b < B; ++b)
      for (Index s = 0; s < S; ++s)
        for (Index q = 0; q < P; ++q)
          for (Index dy = 0; dy < v.patch; ++dy)
            for (Index dx = 0; dx < v.patch; ++dx) {
              const Index y = (q / pw) * v.patch + dy, x = (q % pw) * v.patch + dx;
              index[k++] = ((b * S + s) * H + y) * W + x;
            }
    Var<T> tokens = gather(volumes, std::move(index), Shape{B * N, pp});
    Var<T> x = detail::dense_apply(g, store_, "vivit.patch_embed", tokens);
    std::vector<Index> pos, to_temporal(static_cast<std::size_t>(B * N)), to_spatial(static_cast<std::size_t>(B * N));
    for (Index b = 0; b < B; ++b)
      for (Index s = 0; s < S; ++s)
        for (Index q = 0; q < P; ++q) {
          pos.push_back(s * P + q);
          const Index spatial_row = b * N + s * P + q;
          const Index temporal_row = b * N + q * S + s;
          to_temporal[static_cast<std::size_t>(temporal_row)] = spatial_row;
          to_spatial[static_cast<std::size_t>(spatial_row)] = temporal_row;
        }
    x = x + gather_rows(g.param(store_.at("vivit.pos.table")), pos);
    for (Index b = 0; b < v.blocks; ++b) {
      const std::string p = "vivit.block" + std::to_string(b) + ".";
      x = x + multi_head_attention(detail::ln_apply(g, store_, p + "ln_s", x),
                                   detail::attention_weights(g, store_, p + "attn_s"), P, v.heads);
      Var<T> t = gather_rows(detail::ln_apply(g, store_, p + "ln_t", x), to_temporal);
      t = multi_head_attention(t, detail::attention_weights(g, store_, p + "attn_t"), S, v.heads);
      x = x + gather_rows(t, to_spatial);
      Var<T> m = detail::dense_apply(g, store_, p + "fc1", detail::ln_apply(g, store_, p + "ln_mlp", x), Activation::gelu);
      x = x + detail::dense_apply(g, store_, p + "fc2", m);
    }
    Var<T> pooled = detail::ln_apply(g, store_, "vivit.norm", group_mean_rows(x, N));
    return reshape(detail::dense_apply(g, store_, "head", pooled), Shape{B});
  }

  ModelSpec spec_;
  ParameterStore<T> store_;
};

}  // namespace volmil

#endif  // VOLMIL_MODELS_HPP_
