#include "volmil/pretrain.hpp"

#include "volmil/json_fields.hpp"
#include "volmil/optim_json.hpp"

#include <cmath>

namespace volmil {

using nlohmann::json;

void TincConfig::validate() const {
  if (!(margin_max >= 0.0) || !(delta_t_max_days > 0.0) || !(lambda_variance >= 0.0) || !(lambda_covariance >= 0.0) ||
      !(variance_target >= 0.0))
    throw ConfigError("tinc: coefficients must be >= 0 and delta_t_max_days > 0");
}

double TincConfig::margin(double delta_t_days) const {
  return margin_max * std::min(delta_t_days / delta_t_max_days, 1.0);
}

void to_json(json& j, const TincConfig& c) {
  j = {{"margin_max", c.margin_max},
       {"delta_t_max_days", c.delta_t_max_days},
       {"lambda_variance", c.lambda_variance},
       {"lambda_covariance", c.lambda_covariance},
       {"variance_target", c.variance_target},
       {"normalize", c.normalize}};
}

void from_json(const json& j, TincConfig& c) {
  FieldReader(j, "tinc")
      .get("margin_max", c.margin_max)
      .get("delta_t_max_days", c.delta_t_max_days)
      .get("lambda_variance", c.lambda_variance)
      .get("lambda_covariance", c.lambda_covariance)
      .get("variance_target", c.variance_target)
      .get("normalize", c.normalize)
      .finish();
  c.validate();
}

Index projector_dim(const ModelSpec& spec) {
  const Index wide = 4 * spec.encoder.output_dim();
  return spec.preset == "desk_scale" ? std::min<Index>(wide, 256) : wide;
}

void ContrastiveAugment::validate() const {
  if (!(crop_scale_min > 0.0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1.0))
    throw ConfigError("augment: need 0 < crop_scale_min <= crop_scale_max <= 1");
  if (p_flip < 0.0 || p_flip > 1.0 || max_rotate_deg < 0.0 || brightness < 0.0 || brightness >= 1.0 ||
      contrast < 0.0 || contrast >= 1.0 || max_noise_sigma < 0.0)
    throw ConfigError("augment: probabilities in [0,1], jitter in [0,1), magnitudes >= 0");
}

ContrastiveAugment ContrastiveAugment::none() { return {1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0}; }

void to_json(json& j, const ContrastiveAugment& a) {
  j = {{"crop_scale_min", a.crop_scale_min}, {"crop_scale_max", a.crop_scale_max}, {"p_flip", a.p_flip},
       {"max_rotate_deg", a.max_rotate_deg}, {"brightness", a.brightness},         {"contrast", a.contrast},
       {"max_noise_sigma", a.max_noise_sigma}};
}

void from_json(const json& j, ContrastiveAugment& a) {
  FieldReader(j, "augment")
      .get("crop_scale_min", a.crop_scale_min)
      .get("crop_scale_max", a.crop_scale_max)
      .get("p_flip", a.p_flip)
      .get("max_rotate_deg", a.max_rotate_deg)
      .get("brightness", a.brightness)
      .get("contrast", a.contrast)
      .get("max_noise_sigma", a.max_noise_sigma)
      .finish();
  a.validate();
}

Tensor<float> contrastive_augment(const Tensor<float>& slice, Rng& rng, const ContrastiveAugment& p) {
  if (slice.rank() != 2) throw ShapeError("contrastive_augment expects one H x W slice");
  const Index H = slice.dim(0), W = slice.dim(1);
  // Draws happen in a fixed order regardless of which effects are active.
  const double area = rng.uniform(p.crop_scale_min, p.crop_scale_max);
  const double side = std::sqrt(area);
  const Index ch = std::clamp<Index>(static_cast<Index>(std::lround(side * static_cast<double>(H))), 1, H);
  const Index cw = std::clamp<Index>(static_cast<Index>(std::lround(side * static_cast<double>(W))), 1, W);
  const Index y0 = static_cast<Index>(rng.below(static_cast<std::uint64_t>(H - ch + 1)));
  const Index x0 = static_cast<Index>(rng.below(static_cast<std::uint64_t>(W - cw + 1)));
  AugmentDraw draw;
  draw.rotate_deg = rng.uniform(-p.max_rotate_deg, p.max_rotate_deg);
  draw.flip = rng.bernoulli(p.p_flip);
  const double gain = 1.0 + rng.uniform(-p.brightness, p.brightness);
  const double stretch = 1.0 + rng.uniform(-p.contrast, p.contrast);
  const double sigma = rng.uniform(0.0, p.max_noise_sigma);

  Tensor<float> crop({ch, cw});
  for (Index y = 0; y < ch; ++y) std::copy_n(slice.data() + (y0 + y) * W + x0, cw, crop.data() + y * cw);
  Tensor<float> out = (ch == H && cw == W) ? crop : resize_bilinear(crop, H, W);
  out = apply_augment(Tensor<float>({1, H, W}, out.vec()), draw);
  const double mean = static_cast<double>(out.vec().mean());
  for (Index i = 0; i < out.size(); ++i) {
    const double v = (static_cast<double>(out[i]) * gain - mean * gain) * stretch + mean * gain;
    out[i] = static_cast<float>(v + (sigma > 0.0 ? rng.normal(0.0, sigma) : 0.0));
  }
  return Tensor<float>({H, W}, out.vec());
}

void PretrainConfig::validate() const {
  if (epochs < 1 || batch_size < 2) throw ConfigError("pretrain: need epochs >= 1 and batch_size >= 2");
  tinc.validate();
  augment.validate();
}

void to_json(json& j, const PretrainConfig& c) {
  j = {{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"optimizer", c.optimizer},
       {"tinc", c.tinc},     {"augment", c.augment},       {"seed", c.seed}};
}

void from_json(const json& j, PretrainConfig& c) {
  json optimizer = c.optimizer, tinc = c.tinc, augment = c.augment;
  FieldReader(j, "pretrain")
      .get("epochs", c.epochs)
      .get("batch_size", c.batch_size)
      .get("optimizer", optimizer)
      .get("tinc", tinc)
      .get("augment", augment)
      .get("seed", c.seed)
      .finish();
  from_json(optimizer, c.optimizer);
  from_json(tinc, c.tinc);
  from_json(augment, c.augment);
  c.validate();
}

json history_json(const std::vector<PretrainEpoch>& history) {
  json out = json::array();
  for (const PretrainEpoch& e : history)
    out.push_back({{"epoch", e.epoch},
                   {"loss", e.loss},
                   {"similarity", e.similarity},
                   {"variance", e.variance},
                   {"covariance", e.covariance}});
  return out;
}

PretrainResult pretrain_encoder(const std::vector<PatientTimeline>& patients, const PreprocessConfig& preprocess,
                                const ModelSpec& spec, const PretrainConfig& cfg) {
  cfg.validate();
  if (!spec.uses_encoder()) throw PreconditionError("pretrain: architecture has no convolutional encoder");
  ModelSpec source = spec;
  if (source.arch == Architecture::i3d) source.arch = Architecture::cnn_bilstm;
  source.validate();
  if (preprocess.out_h != source.input.height || preprocess.out_w != source.input.width)
    throw PreconditionError("pretrain: preprocessed slice size does not match the model input");

  std::vector<const PatientTimeline*> eligible;
  for (const PatientTimeline& p : patients)
    if (p.visits.size() >= 2) eligible.push_back(&p);
  if (eligible.size() < 2) throw PreconditionError("pretrain: need at least two patients with two or more visits");

  Model<float> model(source, derive_seed(cfg.seed, "pretrain.init"));
  ParameterStore<float>& store = model.store();
  store.set_trainable("aggregator.", false);
  store.set_trainable("head.", false);
  add_projection_head(store, source.encoder.output_dim(), projector_dim(source), derive_seed(cfg.seed, "projector"));
  Optimizer<float> opt(cfg.optimizer);

  // One pair per scan per epoch, anchored on its patient.
  std::vector<std::size_t> anchors;
  for (std::size_t p = 0; p < eligible.size(); ++p) anchors.insert(anchors.end(), eligible[p]->visits.size(), p);
  const Index per_epoch = static_cast<Index>(anchors.size()) / cfg.batch_size +
                          (static_cast<Index>(anchors.size()) % cfg.batch_size >= 2 ? 1 : 0);
  LRSchedule schedule{cfg.optimizer.learning_rate, 0.0, std::max<Index>(1, per_epoch * cfg.epochs), 0};
  const Index H = source.input.height, W = source.input.width, plane = H * W;
  PretrainResult result;
  std::int64_t step = 0;
  for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng order_rng(derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> order = anchors;
    order_rng.shuffle(order);
    PretrainEpoch log{epoch + 1};
    Index batches = 0;
    for (std::size_t start = 0; start + 2 <= order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const Index n = static_cast<Index>(end - start);
      Tensor<float> views({2 * n, H, W});
      std::vector<double> gaps(static_cast<std::size_t>(n));
#pragma omp parallel for schedule(dynamic)
      for (Index i = 0; i < n; ++i) {
        const std::size_t pos = start + static_cast<std::size_t>(i);
        const PatientTimeline& t = *eligible[order[pos]];
        Rng rng(derive_seed(derive_seed(cfg.seed, 2000 + static_cast<std::uint64_t>(epoch)), pos));
        const VisitPair pair = sample_visit_pair(t, rng);
        const Index slice = static_cast<Index>(rng.below(static_cast<std::uint64_t>(preprocess.n_slices)));
        gaps[static_cast<std::size_t>(i)] = static_cast<double>(pair.delta_t_days);
        const Index visits[2] = {pair.first, pair.second};
        for (int v = 0; v < 2; ++v) {
          const Tensor<float> vol = preprocess_visit(t.visits[static_cast<std::size_t>(visits[v])], preprocess);
          Tensor<float> s({H, W});
          std::copy_n(vol.data() + slice * plane, plane, s.data());
          const Tensor<float> a = contrastive_augment(s, rng, cfg.augment);
          std::copy_n(a.data(), plane, views.data() + (v * n + i) * plane);
        }
      }
      Graph<float> g(Mode::train, derive_seed(cfg.seed, static_cast<std::uint64_t>(step)));
      Var<float> z = projection_head(g, store, model.encode(g, g.constant(std::move(views))));
      std::vector<Index> first(static_cast<std::size_t>(n)), second(static_cast<std::size_t>(n));
      for (Index i = 0; i < n; ++i) first[static_cast<std::size_t>(i)] = i, second[static_cast<std::size_t>(i)] = n + i;
      TincTerms<float> terms = tinc_terms(gather_rows(z, first), gather_rows(z, second), gaps, cfg.tinc);
      const double loss = terms.total.value()[0];
      if (!std::isfinite(loss))
        throw NumericalError("pretrain: non-finite loss at epoch " + std::to_string(epoch + 1) + ", step " +
                             std::to_string(step + 1));
      g.backward(terms.total);
      opt.step(store, cosine_lr(schedule, step));
      ++step;
      ++batches;
      log.loss += loss;
      log.similarity += terms.similarity.value()[0];
      log.variance += terms.variance.value()[0];
      log.covariance += terms.covariance.value()[0];
    }
    const double inv = 1.0 / static_cast<double>(std::max<Index>(batches, 1));
    log.loss *= inv;
    log.similarity *= inv;
    log.variance *= inv;
    log.covariance *= inv;
    result.history.push_back(log);
  }
  result.encoder = snapshot(store, json(source), "encoder.");
  return result;
}

}  // namespace volmil
