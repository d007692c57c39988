#include "volmil/harness.hpp"

#include "volmil/accounting.hpp"
#include "volmil/binary_io.hpp"
#include "volmil/json_fields.hpp"
#include "volmil/optim_json.hpp"
#include "volmil/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

namespace volmil {

using nlohmann::json;

namespace {

constexpr Index kEvalBatch = 32;

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

Tensor<float> stack(const std::vector<LabelledExample>& examples, const std::vector<std::size_t>& idx, std::size_t begin,
                    std::size_t end) {
  const Tensor<float>& first = examples[idx[begin]].volume;
  Shape shape{static_cast<Index>(end - begin)};
  for (Index d : first.shape()) shape.push_back(d);
  Tensor<float> out(shape);
  const Index n = first.size();
  for (std::size_t i = begin; i < end; ++i) {
    const Tensor<float>& v = examples[idx[i]].volume;
    if (v.size() != n) throw ShapeError("examples differ in volume shape");
    std::copy_n(v.data(), n, out.data() + static_cast<Index>(i - begin) * n);
  }
  return out;
}

std::vector<int> labels_of(const std::vector<LabelledExample>& examples, const std::vector<std::size_t>& idx) {
  std::vector<int> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(examples[i].label);
  return out;
}

bool both_classes(const std::vector<int>& labels) {
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  return pos > 0 && pos < static_cast<std::ptrdiff_t>(labels.size());
}

InitMode init_from_string(const std::string& s) {
  if (s == "random") return InitMode::random;
  if (s == "tinc_checkpoint") return InitMode::tinc_checkpoint;
  throw ConfigError("unknown init '" + s + "' (expected random or tinc_checkpoint)");
}

EncoderMode encoder_mode_from_string(const std::string& s) {
  if (s == "end_to_end") return EncoderMode::end_to_end;
  if (s == "frozen") return EncoderMode::frozen;
  throw ConfigError("unknown encoder_mode '" + s + "' (expected end_to_end or frozen)");
}

/// Stratified subsample keeping at least one scan per present class.
std::vector<std::size_t> subsample(const std::vector<LabelledExample>& examples, const std::vector<std::size_t>& idx,
                                   double fraction, Rng& rng) {
  if (fraction >= 1.0) return idx;
  std::vector<std::size_t> pos, neg;
  for (std::size_t i : idx) (examples[i].label == 1 ? pos : neg).push_back(i);
  auto take = [&](std::vector<std::size_t>& v) {
    rng.shuffle(v);
    const auto keep = std::max<std::size_t>(v.empty() ? 0 : 1, static_cast<std::size_t>(std::lround(fraction * v.size())));
    v.resize(std::min(keep, v.size()));
  };
  take(pos);
  take(neg);
  std::vector<std::size_t> out = pos;
  out.insert(out.end(), neg.begin(), neg.end());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

std::string to_string(InitMode m) { return m == InitMode::random ? "random" : "tinc_checkpoint"; }
std::string to_string(EncoderMode m) { return m == EncoderMode::end_to_end ? "end_to_end" : "frozen"; }

void TrainConfig::validate() const {
  model.validate();
  if (batch_size < 1 || epochs < 1) throw ConfigError("train: need batch_size >= 1 and epochs >= 1");
  if (!(label_fraction > 0.0 && label_fraction <= 1.0)) throw ConfigError("train: label_fraction must be in (0,1]");
  if (init == InitMode::tinc_checkpoint && checkpoint.empty())
    throw ConfigError("train: init tinc_checkpoint requires a checkpoint path");
  if (!std::isfinite(pos_weight)) throw ConfigError("train: pos_weight must be finite");
}

TrainConfig default_train_config(Architecture arch, const std::string& preset) {
  TrainConfig c;
  c.model = model_preset(arch, preset);
  const bool desk = preset == "desk_scale";
  switch (arch) {
    case Architecture::cnn_bilstm:
      c.optimizer = {OptimizerKind::adam, desk ? 1e-3 : 1e-4, 0.9, 0.9, 0.999, 1e-8, 1e-6};
      c.batch_size = desk ? 10 : 20;
      break;
    case Architecture::i3d:
      c.optimizer = {OptimizerKind::adam, 1e-3, 0.9, 0.9, 0.999, 1e-8, 1e-6};
      c.batch_size = desk ? 32 : 64;
      break;
    case Architecture::cnn_transformer:
      c.optimizer = {OptimizerKind::sgd_momentum, desk ? 1e-2 : 1e-3, 0.9, 0.9, 0.999, 1e-8, 0.0};
      c.batch_size = desk ? 10 : 20;
      break;
    case Architecture::vivit_fsa:
      c.optimizer = {OptimizerKind::adam, desk ? 1e-4 : 1e-5, 0.9, 0.9, 0.999, 1e-8, 0.0};
      c.batch_size = desk ? 4 : 8;
      break;
  }
  return c;
}

void to_json(json& j, const TrainConfig& c) {
  j = {{"model", c.model},
       {"init", to_string(c.init)},
       {"checkpoint", c.checkpoint},
       {"encoder_mode", to_string(c.encoder_mode)},
       {"optimizer", c.optimizer},
       {"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"pos_weight", c.pos_weight},
       {"label_fraction", c.label_fraction},
       {"augment", c.augment},
       {"seed", c.seed}};
}

void from_json(const json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("train: expected a JSON object");
  json model = json::object();
  if (j.contains("model")) model = j.at("model");
  const ModelSpec spec = model.get<ModelSpec>();
  c = default_train_config(spec.arch, spec.preset);
  c.model = spec;
  std::string init = to_string(c.init), mode = to_string(c.encoder_mode);
  json optimizer = c.optimizer, augment = c.augment;
  FieldReader(j, "train")
      .get("model", model)
      .get("init", init)
      .get("checkpoint", c.checkpoint)
      .get("encoder_mode", mode)
      .get("optimizer", optimizer)
      .get("batch_size", c.batch_size)
      .get("epochs", c.epochs)
      .get("pos_weight", c.pos_weight)
      .get("label_fraction", c.label_fraction)
      .get("augment", augment)
      .get("seed", c.seed)
      .finish();
  c.init = init_from_string(init);
  c.encoder_mode = encoder_mode_from_string(mode);
  from_json(optimizer, c.optimizer);
  from_json(augment, c.augment);
  c.validate();
}

json log_json(const std::vector<EpochLog>& log) {
  json out = json::array();
  for (const EpochLog& e : log)
    out.push_back({{"epoch", e.epoch},
                   {"loss", e.loss},
                   {"learning_rate", e.learning_rate},
                   {"val_auroc", e.val_auroc ? json(*e.val_auroc) : json(nullptr)}});
  return out;
}

TrainResult train_model(const TrainConfig& cfg, const std::vector<LabelledExample>& examples,
                        const std::vector<std::size_t>& train, const std::vector<std::size_t>& val,
                        const Checkpoint* encoder) {
  cfg.validate();
  if (train.empty()) throw PreconditionError("train_model: empty training split");
  const std::vector<int> train_labels = labels_of(examples, train);
  const auto n_pos = std::count(train_labels.begin(), train_labels.end(), 1);
  const auto n_neg = static_cast<std::ptrdiff_t>(train_labels.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0) throw PreconditionError("train_model: training split needs both classes");
  const float pos_weight =
      static_cast<float>(cfg.pos_weight >= 0.0 ? cfg.pos_weight : static_cast<double>(n_neg) / static_cast<double>(n_pos));

  TrainResult result{Model<float>(cfg.model, derive_seed(cfg.seed, "init")), {}, {}};
  Model<float>& model = result.model;
  if (cfg.init == InitMode::tinc_checkpoint) {
    if (!encoder) throw PreconditionError("train_model: tinc_checkpoint init needs an encoder checkpoint");
    result.transfer_log = transfer_weights(*encoder, model, cfg.encoder_mode == EncoderMode::frozen);
  } else if (cfg.encoder_mode == EncoderMode::frozen) {
    model.store().set_trainable("encoder.", false);
  }

  Optimizer<float> opt(cfg.optimizer);
  const auto n = static_cast<Index>(train.size());
  const Index steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const LRSchedule schedule{cfg.optimizer.learning_rate, 0.0, steps_per_epoch * cfg.epochs, 0};
  const std::vector<int> val_labels = labels_of(examples, val);
  std::int64_t step = 0;
  for (Index epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = train;
    Rng order_rng(derive_seed(cfg.seed, 100 + static_cast<std::uint64_t>(epoch)));
    order_rng.shuffle(order);
    EpochLog log;
    log.epoch = epoch + 1;
    for (Index start = 0; start < n; start += cfg.batch_size) {
      const Index end = std::min(n, start + cfg.batch_size);
      Tensor<float> batch = stack(examples, order, static_cast<std::size_t>(start), static_cast<std::size_t>(end));
      std::vector<float> labels;
      for (Index i = start; i < end; ++i) labels.push_back(static_cast<float>(examples[order[static_cast<std::size_t>(i)]].label));
      const Index vol = batch.size() / (end - start);
      const Shape vshape(batch.shape().begin() + 1, batch.shape().end());
#pragma omp parallel for schedule(dynamic)
      for (Index i = 0; i < end - start; ++i) {
        Rng rng(derive_seed(derive_seed(cfg.seed, 200 + static_cast<std::uint64_t>(epoch)),
                            static_cast<std::uint64_t>(start + i)));
        Tensor<float> v(vshape);
        std::copy_n(batch.data() + i * vol, vol, v.data());
        const Tensor<float> a = augment_scan(v, rng, cfg.augment);
        std::copy_n(a.data(), vol, batch.data() + i * vol);
      }
      const double lr = cosine_lr(schedule, step);
      Graph<float> g(Mode::train, derive_seed(cfg.seed, 1000000 + static_cast<std::uint64_t>(step)));
      Var<float> loss = bce_with_logits(model.forward(g, g.constant(std::move(batch))), labels, pos_weight);
      const double value = loss.value()[0];
      const std::string where = "epoch " + std::to_string(epoch + 1) + ", step " + std::to_string(step + 1);
      if (!std::isfinite(value))
        throw TrainingAborted("train_model: non-finite loss at " + where, snapshot(model.store(), json(cfg.model)));
      g.backward(loss);
      try {
        opt.step(model.store(), lr);
      } catch (const NumericalError& e) {
        throw TrainingAborted(std::string("train_model: ") + e.what() + " at " + where,
                              snapshot(model.store(), json(cfg.model)));
      }
      log.loss += value * static_cast<double>(end - start);
      log.learning_rate = lr;
      ++step;
    }
    log.loss /= static_cast<double>(n);
    if (both_classes(val_labels)) log.val_auroc = auroc(predict_probabilities(model, examples, val), val_labels);
    result.log.push_back(log);
  }
  return result;
}

std::vector<double> predict_probabilities(Model<float>& model, const std::vector<LabelledExample>& examples,
                                          const std::vector<std::size_t>& idx) {
  std::vector<double> out;
  out.reserve(idx.size());
  for (std::size_t start = 0; start < idx.size(); start += kEvalBatch) {
    const std::size_t end = std::min(idx.size(), start + static_cast<std::size_t>(kEvalBatch));
    Graph<float> g(Mode::eval);
    const Tensor<float> logits = model.forward(g, g.constant(stack(examples, idx, start, end))).value();
    for (Index i = 0; i < logits.size(); ++i) out.push_back(sigmoid(static_cast<double>(logits[i])));
  }
  return out;
}

namespace {
void require_members(const std::vector<Model<float>*>& models) {
  if (models.empty()) throw PreconditionError("ensemble: no models");
  for (const Model<float>* m : models)
    if (!(m->spec() == models.front()->spec())) throw PreconditionError("ensemble: member model specs differ");
}
}  // namespace

double ensemble_predict(const std::vector<Model<float>*>& models, const Tensor<float>& volume) {
  require_members(models);
  Shape shape{1};
  for (Index d : volume.shape()) shape.push_back(d);
  const Tensor<float> batch(shape, volume.vec());
  double sum = 0.0;
  for (Model<float>* m : models) {
    Graph<float> g(Mode::eval);
    sum += sigmoid(static_cast<double>(m->forward(g, g.constant(batch)).value()[0]));
  }
  return sum / static_cast<double>(models.size());
}

std::vector<double> ensemble_probabilities(const std::vector<Model<float>*>& models,
                                           const std::vector<LabelledExample>& examples,
                                           const std::vector<std::size_t>& idx) {
  require_members(models);
  std::vector<double> sum(idx.size(), 0.0);
  for (Model<float>* m : models) {
    const auto p = predict_probabilities(*m, examples, idx);
    for (std::size_t i = 0; i < p.size(); ++i) sum[i] += p[i];
  }
  for (double& s : sum) s /= static_cast<double>(models.size());
  return sum;
}

void summarize(MetricsReport& r) {
  if (r.folds.empty()) throw PreconditionError("report: no folds");
  std::vector<double> a, p;
  for (const FoldMetrics& f : r.folds) {
    a.push_back(f.auroc);
    p.push_back(f.prauc);
  }
  r.auroc = mean_std(a);
  r.prauc = mean_std(p);
}

json report_json(const MetricsReport& r) {
  if (r.folds.empty()) throw PreconditionError("report: no folds");
  json folds = json::array();
  for (const FoldMetrics& f : r.folds)
    folds.push_back({{"fold", f.fold},
                     {"auroc", f.auroc},
                     {"prauc", f.prauc},
                     {"final_val_auroc", f.final_val_auroc ? json(*f.final_val_auroc) : json(nullptr)},
                     {"train_scans", f.train_scans},
                     {"train_positives", f.train_positives}});
  return {{"model", r.model},
          {"params", r.params},
          {"pretraining", r.pretraining},
          {"folds", std::move(folds)},
          {"auroc", {{"mean", r.auroc.mean}, {"std", r.auroc.std}}},
          {"prauc", {{"mean", r.prauc.mean}, {"std", r.prauc.std}}},
          {"ensemble", {{"auroc", r.ensemble_auroc}, {"prauc", r.ensemble_prauc}}},
          {"holdout", {{"scans", r.holdout_scans}, {"positives", r.holdout_positives}}},
          {"config_hash", r.config_hash},
          {"seed", r.seed},
          {"version", r.version}};
}

std::string report_text(const MetricsReport& r) {
  if (r.folds.empty()) throw PreconditionError("report: no folds");
  char params[32];
  std::snprintf(params, sizeof params, "%.2fM", static_cast<double>(r.params) / 1e6);
  char ens_a[16], ens_p[16];
  std::snprintf(ens_a, sizeof ens_a, "%.3f", r.ensemble_auroc);
  std::snprintf(ens_p, sizeof ens_p, "%.3f", r.ensemble_prauc);
  struct Row {
    std::string cells[5];
  };
  const std::vector<Row> rows{{{"Model", "#Params", "Pretraining", "AUROC", "PRAUC"}},
                              {{r.model, params, r.pretraining, format_mean_std(r.auroc), format_mean_std(r.prauc)}},
                              {{r.model + " (ensemble)", params, r.pretraining, ens_a, ens_p}}};
  // Display width counts the two-byte plus-minus sign once.
  auto width = [](const std::string& s) {
    std::size_t w = 0;
    for (unsigned char c : s) w += (c & 0xC0) != 0x80;
    return w;
  };
  std::size_t w[5] = {0, 0, 0, 0, 0};
  for (const Row& row : rows)
    for (int c = 0; c < 5; ++c) w[c] = std::max(w[c], width(row.cells[c]));
  std::ostringstream out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (int c = 0; c < 5; ++c) {
      const std::string& s = rows[i].cells[c];
      out << s << std::string(w[c] - width(s) + (c < 4 ? 2 : 0), ' ');
    }
    out << "\n";
    if (i == 0) {
      std::size_t total = 8;
      for (std::size_t x : w) total += x;
      out << std::string(total, '-') << "\n";
    }
  }
  out << "\nfold  auroc  prauc\n";
  for (const FoldMetrics& f : r.folds) {
    char line[64];
    std::snprintf(line, sizeof line, "%4lld  %.3f  %.3f\n", static_cast<long long>(f.fold), f.auroc, f.prauc);
    out << line;
  }
  out << "holdout scans " << r.holdout_scans << ", positives " << r.holdout_positives << "\n";
  return out.str();
}

void write_report(const MetricsReport& r, const std::filesystem::path& dir) {
  const std::string j = report_json(r).dump(2) + "\n";
  const std::string t = report_text(r);
  write_text_file(dir / "report.json", j);
  write_text_file(dir / "report.txt", t);
}

std::string predictions_csv(const std::vector<PredictionRow>& rows) {
  std::string out = "patient_id,visit_day,label,score,fold\n";
  char buf[64];
  for (const PredictionRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%.9g", r.score);
    out += r.patient_id + "," + std::to_string(r.visit_day) + "," + std::to_string(r.label) + "," + buf + "," + r.fold +
           "\n";
  }
  return out;
}

std::vector<std::size_t> examples_of(const std::vector<LabelledExample>& examples, const std::vector<std::string>& ids) {
  const std::set<std::string> wanted(ids.begin(), ids.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < examples.size(); ++i)
    if (wanted.count(examples[i].patient_id)) out.push_back(i);
  return out;
}

CrossvalResult run_crossval(const TrainConfig& cfg, const std::vector<LabelledExample>& examples,
                            const DatasetSplit& split, const Checkpoint* encoder, const std::string& config_hash) {
  cfg.validate();
  const Index k = static_cast<Index>(split.folds.size());
  if (k < 2) throw PreconditionError("run_crossval: need at least two folds");
  const std::set<std::string> holdout_ids(split.holdout.begin(), split.holdout.end());
  for (const auto& fold : split.folds)
    for (const std::string& id : fold)
      if (holdout_ids.count(id)) throw std::logic_error("run_crossval: holdout patient " + id + " appears in a fold");

  CrossvalResult out;
  out.holdout = examples_of(examples, split.holdout);
  const std::vector<int> holdout_labels = labels_of(examples, out.holdout);
  if (!both_classes(holdout_labels)) throw MetricUndefined("run_crossval: holdout needs both classes");

  MetricsReport& rep = out.report;
  rep.model = to_string(cfg.model.arch);
  rep.params = count_params(cfg.model);
  rep.pretraining = cfg.init == InitMode::random ? "none" : "TINC (" + to_string(cfg.encoder_mode) + ")";
  rep.holdout_scans = static_cast<Index>(out.holdout.size());
  rep.holdout_positives = std::count(holdout_labels.begin(), holdout_labels.end(), 1);
  rep.config_hash = config_hash;
  rep.seed = cfg.seed;
  rep.version = "volmil 1.0.0";

  std::vector<std::vector<double>> fold_scores;
  for (Index f = 0; f < k; ++f) {
    std::vector<std::string> train_ids;
    for (Index o = 0; o < k; ++o)
      if (o != f) train_ids.insert(train_ids.end(), split.folds[o].begin(), split.folds[o].end());
    std::vector<std::size_t> train = examples_of(examples, train_ids);
    const std::vector<std::size_t> val = examples_of(examples, split.folds[f]);
    for (const std::vector<std::size_t>* part : {static_cast<const std::vector<std::size_t>*>(&train), &val})
      for (std::size_t i : *part)
        if (holdout_ids.count(examples[i].patient_id))
          throw std::logic_error("run_crossval: holdout patient reached fold " + std::to_string(f));
    TrainConfig fold_cfg = cfg;
    fold_cfg.seed = derive_seed(cfg.seed, "fold" + std::to_string(f));
    Rng sub_rng(derive_seed(fold_cfg.seed, "label_subsample"));
    train = subsample(examples, train, cfg.label_fraction, sub_rng);
    TrainResult trained = [&] {
      try {
        return train_model(fold_cfg, examples, train, val, encoder);
      } catch (const TrainingAborted& e) {
        throw TrainingAborted("fold " + std::to_string(f) + ": " + e.what(), e.last_good());
      }
    }();
    if (f == 0) out.transfer_log = trained.transfer_log;
    const std::vector<double> scores = predict_probabilities(trained.model, examples, out.holdout);
    FoldMetrics m;
    m.fold = f;
    m.auroc = auroc(scores, holdout_labels);
    m.prauc = prauc(scores, holdout_labels);
    m.final_val_auroc = trained.log.empty() ? std::nullopt : trained.log.back().val_auroc;
    m.train_scans = static_cast<Index>(train.size());
    const std::vector<int> tl = labels_of(examples, train);
    m.train_positives = std::count(tl.begin(), tl.end(), 1);
    rep.folds.push_back(m);
    for (std::size_t i = 0; i < scores.size(); ++i) {
      const LabelledExample& e = examples[out.holdout[i]];
      out.predictions.push_back({e.patient_id, e.visit_day, e.label, scores[i], std::to_string(f)});
    }
    fold_scores.push_back(scores);
    out.logs.push_back(std::move(trained.log));
    out.models.push_back(std::move(trained.model));
  }
  std::vector<double> ensemble(out.holdout.size(), 0.0);
  for (const auto& s : fold_scores)
    for (std::size_t i = 0; i < s.size(); ++i) ensemble[i] += s[i];
  for (double& v : ensemble) v /= static_cast<double>(k);
  for (std::size_t i = 0; i < ensemble.size(); ++i) {
    const LabelledExample& e = examples[out.holdout[i]];
    out.predictions.push_back({e.patient_id, e.visit_day, e.label, ensemble[i], "ensemble"});
  }
  rep.ensemble_auroc = auroc(ensemble, holdout_labels);
  rep.ensemble_prauc = prauc(ensemble, holdout_labels);
  summarize(rep);
  return out;
}

double topk_overlap(const std::vector<double>& weights, const std::vector<Index>& lesion, Index top_k) {
  const auto S = static_cast<Index>(weights.size());
  if (top_k < 1 || top_k > S) throw PreconditionError("topk_overlap: need 1 <= top_k <= S");
  std::vector<char> is_lesion(static_cast<std::size_t>(S), 0);
  for (Index s : lesion) {
    if (s < 0 || s >= S) throw PreconditionError("topk_overlap: lesion slice out of range");
    is_lesion[static_cast<std::size_t>(s)] = 1;
  }
  std::vector<double> sorted = weights;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  const double cut = sorted[static_cast<std::size_t>(top_k - 1)];
  double hits = 0.0;
  Index above = 0, tied = 0, tied_lesion = 0;
  for (Index s = 0; s < S; ++s) {
    const double w = weights[static_cast<std::size_t>(s)];
    if (w > cut) {
      ++above;
      hits += is_lesion[static_cast<std::size_t>(s)];
    } else if (w == cut) {
      ++tied;
      tied_lesion += is_lesion[static_cast<std::size_t>(s)];
    }
  }
  hits += static_cast<double>(tied_lesion) * static_cast<double>(top_k - above) / static_cast<double>(tied);
  return hits / static_cast<double>(top_k);
}

std::vector<std::vector<double>> slice_attention(Model<float>& model, const std::vector<LabelledExample>& examples,
                                                 const std::vector<std::size_t>& idx) {
  const Architecture a = model.spec().arch;
  if (a != Architecture::cnn_bilstm && a != Architecture::cnn_transformer)
    throw PreconditionError("attention: " + to_string(a) + " exposes no slice attention trace");
  const Index S = model.spec().input.slices;
  std::vector<std::vector<double>> out;
  for (std::size_t start = 0; start < idx.size(); start += kEvalBatch) {
    const std::size_t end = std::min(idx.size(), start + static_cast<std::size_t>(kEvalBatch));
    Graph<float> g(Mode::eval);
    ForwardTrace<float> trace;
    model.forward(g, g.constant(stack(examples, idx, start, end)), &trace);
    for (std::size_t b = 0; b < end - start; ++b) {
      std::vector<double> w(static_cast<std::size_t>(S), 0.0);
      if (a == Architecture::cnn_bilstm) {
        for (Index s = 0; s < S; ++s) w[static_cast<std::size_t>(s)] = trace.slice_weights(static_cast<Index>(b), s);
      } else {
        const AttentionMaps<float>& maps = trace.attention;
        for (Index h = 0; h < maps.heads; ++h)
          for (Index s = 0; s < S; ++s)
            w[static_cast<std::size_t>(s)] += maps.at(static_cast<Index>(b), h)(0, s + 1) / static_cast<double>(maps.heads);
      }
      out.push_back(std::move(w));
    }
  }
  return out;
}

OverlapStats attention_overlap(Model<float>& model, const std::vector<LabelledExample>& examples,
                               const std::vector<std::size_t>& idx, const std::vector<std::vector<Index>>& lesions,
                               Index top_k) {
  if (idx.size() != lesions.size()) throw PreconditionError("attention_overlap: one lesion list per volume");
  const auto weights = slice_attention(model, examples, idx);
  OverlapStats st;
  const double S = static_cast<double>(model.spec().input.slices);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (lesions[i].empty()) continue;
    st.overlap += topk_overlap(weights[i], lesions[i], top_k);
    st.chance += static_cast<double>(lesions[i].size()) / S;
    ++st.volumes;
  }
  if (st.volumes == 0) throw PreconditionError("attention_overlap: no volumes with lesion slices");
  st.overlap /= static_cast<double>(st.volumes);
  st.chance /= static_cast<double>(st.volumes);
  return st;
}

double linear_probe_auroc(const Checkpoint& encoder, const std::vector<PatientTimeline>& cohort,
                          const CohortParams& params, const PreprocessConfig& preprocess, std::uint64_t seed,
                          double min_amplitude) {
  ModelSpec spec = encoder.spec.get<ModelSpec>();
  Model<float> model(spec, 0);
  transfer_weights(encoder, model, true);
  const Index S = preprocess.n_slices;

  struct Sample {
    std::size_t patient;
    int label;
    std::vector<float> feature;
  };
  std::vector<Sample> samples;
  for (std::size_t p = 0; p < cohort.size(); ++p) {
    const PatientTimeline& t = cohort[p];
    const std::vector<Index> lesion = lesion_slices_after_preprocess(t, preprocess);
    std::vector<std::size_t> visits;
    if (t.converter()) {
      for (std::size_t v = 0; v < t.visits.size(); ++v)
        if (lesion_amplitude_at(params, *t.conversion_day, t.visits[v].visit_day) >= min_amplitude) visits.push_back(v);
    } else if (!t.visits.empty()) {
      visits = {0, t.visits.size() / 2, t.visits.size() - 1};
    }
    for (std::size_t v : visits) {
      const Tensor<float> vol = preprocess_visit(t.visits[v], preprocess);
      Graph<float> g(Mode::eval);
      const Tensor<float> e = model.encode(g, g.constant(vol)).value();
      for (Index s = 0; s < S; ++s) {
        const bool in_lesion = std::find(lesion.begin(), lesion.end(), s) != lesion.end();
        Sample smp{p, in_lesion ? 1 : 0, std::vector<float>(e.data() + s * e.dim(1), e.data() + (s + 1) * e.dim(1))};
        samples.push_back(std::move(smp));
      }
    }
  }
  // Stratified patient halves.
  std::vector<std::size_t> conv, other;
  for (std::size_t p = 0; p < cohort.size(); ++p) (cohort[p].converter() ? conv : other).push_back(p);
  Rng rng(derive_seed(seed, "probe_split"));
  rng.shuffle(conv);
  rng.shuffle(other);
  std::set<std::size_t> fit_patients;
  for (std::size_t i = 0; i < conv.size(); i += 2) fit_patients.insert(conv[i]);
  for (std::size_t i = 0; i < other.size(); i += 2) fit_patients.insert(other[i]);

  const Index D = spec.encoder.output_dim();
  std::vector<const Sample*> fit, test;
  for (const Sample& s : samples) (fit_patients.count(s.patient) ? fit : test).push_back(&s);
  auto count_pos = [](const std::vector<const Sample*>& v) {
    return std::count_if(v.begin(), v.end(), [](const Sample* s) { return s->label == 1; });
  };
  const auto fit_pos = count_pos(fit), test_pos = count_pos(test);
  if (fit_pos == 0 || test_pos == 0 || fit_pos == static_cast<std::ptrdiff_t>(fit.size()) ||
      test_pos == static_cast<std::ptrdiff_t>(test.size()))
    throw MetricUndefined("linear_probe: both halves need lesion and non-lesion slices");

  // Standardize with fit statistics.
  std::vector<double> mean(static_cast<std::size_t>(D), 0.0), sd(static_cast<std::size_t>(D), 0.0);
  for (const Sample* s : fit)
    for (Index d = 0; d < D; ++d) mean[static_cast<std::size_t>(d)] += s->feature[static_cast<std::size_t>(d)];
  for (double& m : mean) m /= static_cast<double>(fit.size());
  for (const Sample* s : fit)
    for (Index d = 0; d < D; ++d)
      sd[static_cast<std::size_t>(d)] += std::pow(s->feature[static_cast<std::size_t>(d)] - mean[static_cast<std::size_t>(d)], 2);
  for (double& v : sd) v = std::sqrt(v / static_cast<double>(fit.size())) + 1e-6;
  auto design = [&](const std::vector<const Sample*>& v) {
    Tensor<double> x({static_cast<Index>(v.size()), D});
    for (std::size_t i = 0; i < v.size(); ++i)
      for (Index d = 0; d < D; ++d)
        x.at({static_cast<Index>(i), d}) =
            (v[i]->feature[static_cast<std::size_t>(d)] - mean[static_cast<std::size_t>(d)]) / sd[static_cast<std::size_t>(d)];
    return x;
  };
  const Tensor<double> xf = design(fit), xt = design(test);
  std::vector<double> yf;
  for (const Sample* s : fit) yf.push_back(s->label);
  const double pw = static_cast<double>(fit.size() - static_cast<std::size_t>(fit_pos)) / static_cast<double>(fit_pos);

  ParameterStore<double> store;
  store.add("w", Tensor<double>({1, D}));
  store.add("b", Tensor<double>({1}));
  Optimizer<double> opt({OptimizerKind::adam, 0.05, 0.9, 0.9, 0.999, 1e-8, 1e-4});
  for (int it = 0; it < 300; ++it) {
    Graph<double> g;
    Var<double> bias = g.param(store.at("b"));
    Var<double> logits = reshape(linear(g.constant(xf), g.param(store.at("w")), &bias), Shape{xf.dim(0)});
    Var<double> loss = bce_with_logits(logits, yf, pw);
    g.backward(loss);
    opt.step(store, 0.05);
  }
  const Tensor<double>& w = store.at("w").value;
  const double b = store.at("b").value[0];
  std::vector<double> scores;
  std::vector<int> labels;
  for (Index i = 0; i < xt.dim(0); ++i) {
    double z = b;
    for (Index d = 0; d < D; ++d) z += w[d] * xt.at({i, d});
    scores.push_back(z);
    labels.push_back(test[static_cast<std::size_t>(i)]->label);
  }
  return auroc(scores, labels);
}

}  // namespace volmil
