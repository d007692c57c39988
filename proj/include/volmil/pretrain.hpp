#ifndef VOLMIL_PRETRAIN_HPP_
#define VOLMIL_PRETRAIN_HPP_

#include "volmil/checkpoint.hpp"
#include "volmil/cohort.hpp"
#include "volmil/models.hpp"
#include "volmil/optim.hpp"

#include <string>
#include <vector>

#include "json.hpp"

namespace volmil {

/// Time-aware non-contrastive loss settings. The margin grows linearly with
/// the visit gap up to margin_max at delta_t_max days.
struct TincConfig {
  double margin_max = 1.0;
  double delta_t_max_days = 720.0;
  double lambda_variance = 1.0;
  double lambda_covariance = 1.0;
  double variance_target = 1.0;
  /// Distances are measured between L2-normalized projections.
  bool normalize = true;

  void validate() const;
  double margin(double delta_t_days) const;
};
void to_json(nlohmann::json& j, const TincConfig& c);
void from_json(const nlohmann::json& j, TincConfig& c);

template <typename T>
struct TincTerms {
  Var<T> total;
  Var<T> similarity;
  Var<T> variance;
  Var<T> covariance;
};

namespace detail {

/// Mean over dimensions of relu(target - sqrt(var + eps)) with the unbiased
/// batch variance.
template <typename T>
Var<T> variance_hinge(const Var<T>& z, double target) {
  const Index n = z.dim(0);
  Var<T> centered = add_row(z, scale(col_mean(z), T(-1)));
  Var<T> var = scale(col_mean(square(centered)), static_cast<T>(static_cast<double>(n) / static_cast<double>(n - 1)));
  Var<T> std = sqrt(add_scalar(var, T(1e-4)));
  return mean_all(relu(add_scalar(scale(std, T(-1)), static_cast<T>(target))));
}

/// Sum of squared off-diagonal covariance entries divided by the width.
template <typename T>
Var<T> covariance_penalty(const Var<T>& z) {
  const Index n = z.dim(0), p = z.dim(1);
  Var<T> centered = add_row(z, scale(col_mean(z), T(-1)));
  Var<T> cov = scale(matmul(transpose(centered), centered), static_cast<T>(1.0 / static_cast<double>(n - 1)));
  std::vector<Index> diag(static_cast<std::size_t>(p));
  for (Index j = 0; j < p; ++j) diag[static_cast<std::size_t>(j)] = j * p + j;
  Var<T> off = sum_all(square(cov)) - sum_all(square(gather(cov, std::move(diag), Shape{p})));
  return scale(off, static_cast<T>(1.0 / static_cast<double>(p)));
}

}  // namespace detail

/// similarity = mean_i relu(|z1_i - z2_i| - margin(dt_i)); the variance and
/// covariance terms are averaged over both branches.
template <typename T>
TincTerms<T> tinc_terms(const Var<T>& z1, const Var<T>& z2, const std::vector<double>& delta_t_days,
                        const TincConfig& cfg) {
  cfg.validate();
  if (z1.shape() != z2.shape() || z1.value().rank() != 2)
    throw ShapeError("tinc_loss: branches must be equal N x P matrices");
  const Index n = z1.dim(0);
  if (n < 2) throw PreconditionError("tinc_loss: need at least 2 pairs for the variance term");
  if (static_cast<Index>(delta_t_days.size()) != n) throw ShapeError("tinc_loss: one time gap per pair required");
  Tensor<T> margins({n});
  for (Index i = 0; i < n; ++i) {
    if (!(delta_t_days[static_cast<std::size_t>(i)] >= 0.0)) throw PreconditionError("tinc_loss: negative time gap");
    margins[i] = static_cast<T>(cfg.margin(delta_t_days[static_cast<std::size_t>(i)]));
  }
  Graph<T>& g = z1.graph();
  Var<T> a = cfg.normalize ? l2_normalize_rows(z1) : z1;
  Var<T> b = cfg.normalize ? l2_normalize_rows(z2) : z2;
  Var<T> sim = mean_all(relu(row_norm(a - b) - g.constant(std::move(margins))));
  Var<T> var = scale(detail::variance_hinge(z1, cfg.variance_target) + detail::variance_hinge(z2, cfg.variance_target),
                     T(0.5));
  Var<T> cov = scale(detail::covariance_penalty(z1) + detail::covariance_penalty(z2), T(0.5));
  Var<T> total = sim + scale(var, static_cast<T>(cfg.lambda_variance)) + scale(cov, static_cast<T>(cfg.lambda_covariance));
  return {total, sim, var, cov};
}

template <typename T>
Var<T> tinc_loss(const Var<T>& z1, const Var<T>& z2, const std::vector<double>& delta_t_days, const TincConfig& cfg) {
  return tinc_terms(z1, z2, delta_t_days, cfg).total;
}

/// Projector width: 4*D, capped at 256 for desk_scale.
Index projector_dim(const ModelSpec& spec);

/// Registers projector.fc1 (D -> P) and projector.fc2 (P -> P).
template <typename T>
void add_projection_head(ParameterStore<T>& store, Index in, Index width, std::uint64_t seed) {
  detail::add_dense(store, "projector.fc1", in, width, seed);
  detail::add_dense(store, "projector.fc2", width, width, seed);
}

template <typename T>
Var<T> projection_head(Graph<T>& g, ParameterStore<T>& store, const Var<T>& embeddings) {
  return detail::dense_apply(g, store, "projector.fc2",
                             detail::dense_apply(g, store, "projector.fc1", embeddings, Activation::relu));
}

/// Augmentations applied independently to each B-scan of a pair.
struct ContrastiveAugment {
  double crop_scale_min = 0.6;
  double crop_scale_max = 1.0;
  double p_flip = 0.5;
  double max_rotate_deg = 10.0;
  double brightness = 0.2;
  double contrast = 0.2;
  double max_noise_sigma = 0.05;

  void validate() const;
  static ContrastiveAugment none();
};
void to_json(nlohmann::json& j, const ContrastiveAugment& a);
void from_json(const nlohmann::json& j, ContrastiveAugment& a);

/// One B-scan (H x W) -> augmented B-scan of the same size. Crop area is a
/// uniform fraction of the slice at its original aspect, resized back
/// bilinearly; then rotation, flip, brightness/contrast around the mean and
/// Gaussian noise with a uniformly drawn sigma.
Tensor<float> contrastive_augment(const Tensor<float>& slice, Rng& rng, const ContrastiveAugment& policy);

struct PretrainConfig {
  Index epochs = 5;
  /// Pairs per optimization step.
  Index batch_size = 16;
  OptimizerConfig optimizer{OptimizerKind::adam, 1e-3, 0.9, 0.9, 0.999, 1e-8, 1e-6};
  TincConfig tinc;
  ContrastiveAugment augment;
  std::uint64_t seed = 0;

  void validate() const;
};
void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

struct PretrainEpoch {
  Index epoch = 0;
  double loss = 0.0;
  double similarity = 0.0;
  double variance = 0.0;
  double covariance = 0.0;
};

struct PretrainResult {
  /// encoder.* parameters and buffers; spec holds the ModelSpec used.
  Checkpoint encoder;
  std::vector<PretrainEpoch> history;
};
nlohmann::json history_json(const std::vector<PretrainEpoch>& history);

/// Optimizes the 2D slice encoder of `spec` with the TINC loss on visit
/// pairs of the given patients. An epoch draws one pair per scan, so each
/// patient contributes as many pairs as it has visits. Each pair uses one
/// B-scan index for both visits. Throws PreconditionError if fewer than two patients have two or
/// more visits; NumericalError on a non-finite loss.
PretrainResult pretrain_encoder(const std::vector<PatientTimeline>& patients, const PreprocessConfig& preprocess,
                                const ModelSpec& spec, const PretrainConfig& cfg);

/// Loads a pretrained encoder into `target`. 2.5D targets receive a bit
/// exact copy; i3d targets receive inflated kernels and copied batch-norm
/// statistics. With freeze_encoder the encoder parameters stop training.
/// Throws PreconditionError when the encoder specs differ, naming the first
/// offending layer. Returns one log line per tensor.
template <typename T>
std::vector<std::string> transfer_weights(const Checkpoint& encoder, Model<T>& target, bool freeze_encoder) {
  if (!target.spec().uses_encoder()) throw PreconditionError("transfer_weights: target has no convolutional encoder");
  ModelSpec source_spec;
  try {
    source_spec = encoder.spec.get<ModelSpec>();
  } catch (const ConfigError& e) {
    throw PreconditionError(std::string("transfer_weights: checkpoint spec is invalid: ") + e.what());
  }
  if (source_spec.arch == Architecture::i3d || !source_spec.uses_encoder())
    throw PreconditionError("transfer_weights: checkpoint does not hold a 2D slice encoder");
  ParameterStore<T> source;
  for (const TensorRecord& r : encoder.records) {
    Tensor<T> v(r.value.shape());
    for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<T>(r.value[i]);
    if (r.kind == TensorRecord::Kind::parameter)
      source.add(r.name, std::move(v));
    else
      source.add_buffer(r.name, std::move(v));
  }
  std::vector<std::string> log;
  copy_encoder(source, target.store(), &log);
  target.store().set_trainable("encoder.", !freeze_encoder);
  return log;
}

}  // namespace volmil

#endif  // VOLMIL_PRETRAIN_HPP_
