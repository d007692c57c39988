// Acceptance run: one PASS/FAIL line per criterion. Exit status is the
// number of failing criteria.
#include "volmil/accounting.hpp"
#include "volmil/binary_io.hpp"
#include "volmil/harness.hpp"
#include "volmil/metrics.hpp"
#include "volmil/pretrain.hpp"
#include "volmil/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <set>

#include "CLI11.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace volmil;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string sci(double a) { return fmt("%.3g", a); }

// ---------------------------------------------------------------- 1, 2

Verdict within(const std::vector<std::pair<std::string, std::pair<double, double>>>& rows) {
  Verdict v{true, ""};
  for (const auto& [name, vt] : rows) {
    const auto [value, target] = vt;
    const double rel = std::abs(value - target) / target;
    v.pass &= rel <= 0.15;
    v.detail += (v.detail.empty() ? "" : ", ") + name + " " + sci(value) + " vs " + sci(target) + " (" +
                fmt("%+.1f%%", 100.0 * (value - target) / target) + ")";
  }
  v.detail += "; bound +-15%";
  return v;
}

Verdict criterion_params() {
  return within({{"cnn_bilstm", {double(count_params(model_preset(Architecture::cnn_bilstm, "paper_scale"))), 34e6}},
                 {"cnn_transformer",
                  {double(count_params(model_preset(Architecture::cnn_transformer, "paper_scale"))), 108e6}}});
}

Verdict criterion_flops() {
  const ModelSpec b = model_preset(Architecture::cnn_bilstm, "paper_scale");
  const ModelSpec t = model_preset(Architecture::cnn_transformer, "paper_scale");
  Verdict v = within({{"cnn_bilstm", {double(count_flops(b)), 130e9}}, {"cnn_transformer", {double(count_flops(t)), 133e9}}});
  const bool input_ok = b.input.slices == 32 && b.input.height == 224 && b.input.width == 224 && t.input == b.input;
  v.pass &= input_ok;
  v.detail += input_ok ? "; input 32x224x224" : "; paper_scale input is not 32x224x224";
  return v;
}

// ---------------------------------------------------------------- 3

Verdict criterion_gradients() {
  std::vector<CheckResult> all = gradient_op_checks();
  const auto models = gradient_model_checks();
  all.insert(all.end(), models.begin(), models.end());
  Verdict v{true, ""};
  double worst = 0.0;
  std::string worst_name, failed;
  for (const CheckResult& c : all) {
    v.pass &= c.passed;
    if (!c.passed) failed += (failed.empty() ? "" : ", ") + c.name;
    const double ratio = c.bound > 0.0 ? c.value / c.bound : 0.0;
    if (ratio >= worst) worst = ratio, worst_name = c.name + " " + sci(c.value) + " <= " + sci(c.bound);
  }
  v.detail = std::to_string(all.size()) + " checks (" + std::to_string(models.size()) +
             " architectures), tightest: " + worst_name;
  if (!failed.empty()) v.detail += "; failed: " + failed;
  return v;
}

// ---------------------------------------------------------------- 4

Verdict criterion_inflation() {
  Rng rng(404);
  Index bad_sums = 0, entries = 0;
  for (Index depth = 1; depth <= 9; ++depth)
    for (int rep = 0; rep < 4; ++rep) {
      const Index o = 1 + static_cast<Index>(rng.below(6)), i = 1 + static_cast<Index>(rng.below(4));
      const Index kh = 1 + 2 * static_cast<Index>(rng.below(4)), kw = kh;
      Tensor<double> k({o, i, kh, kw});
      for (Index q = 0; q < k.size(); ++q) k[q] = rng.normal(0.0, 1.0) * std::pow(10.0, rng.uniform(-3.0, 3.0));
      const Tensor<double> k3 = inflate_kernel(k, depth);
      for (Index a = 0; a < o; ++a)
        for (Index b = 0; b < i; ++b)
          for (Index y = 0; y < kh * kw; ++y) {
            double sum = 0.0;
            for (Index d = 0; d < depth; ++d) sum += k3.at({a, b, d, y / kw, y % kw});
            bad_sums += sum != k.at({a, b, y / kw, y % kw});
            ++entries;
          }
    }

  const ModelSpec s2 = model_preset(Architecture::cnn_bilstm, "desk_scale");
  const ModelSpec s3 = model_preset(Architecture::i3d, "desk_scale");
  Model<double> m2(s2, 4041), m3(s3, 4042);
  // Non-trivial running statistics so batch norm contributes.
  for (Buffer<double>* b : m2.store().buffers())
    for (Index q = 0; q < b->value.size(); ++q)
      b->value[q] = b->name.ends_with("var") ? rng.uniform(0.25, 4.0) : rng.normal(0.0, 0.5);
  copy_encoder(m2.store(), m3.store());

  const Index B = 3, S = s3.input.slices, H = s3.input.height, W = s3.input.width;
  Tensor<double> vol({B, S, H, W}), plane({B, H, W});
  for (Index b = 0; b < B; ++b)
    for (Index y = 0; y < H * W; ++y) {
      plane[b * H * W + y] = rng.normal(0.5, 0.3);
      for (Index d = 0; d < S; ++d) vol[(b * S + d) * H * W + y] = plane[b * H * W + y];
    }
  Graph<double> g2(Mode::eval), g3(Mode::eval);
  const Tensor<double> f2 = m2.slice_features(g2, g2.constant(plane)).value();
  const Tensor<double> f3 = m3.volumetric_features(g3, g3.constant(vol)).value();
  // Depths whose receptive field never reaches the zero padding.
  Index blocks = 0;
  for (Index n : s3.encoder.blocks) blocks += n;
  const Index radius = s3.inflation.stem_depth / 2 + blocks * (s3.inflation.conv3_depth / 2);
  const Index C = f3.dim(1), D = f3.dim(2), hw = f3.dim(3) * f3.dim(4);
  double worst = 0.0;
  Index voxels = 0;
  for (Index b = 0; b < B; ++b)
    for (Index c = 0; c < C; ++c)
      for (Index d = radius; d < D - radius; ++d)
        for (Index p = 0; p < hw; ++p, ++voxels)
          worst = std::max(worst, std::abs(f3[((b * C + c) * D + d) * hw + p] - f2[(b * C + c) * hw + p]));
  const bool shapes = f2.dim(1) == C && f2.dim(2) * f2.dim(3) == hw && voxels > 0;
  return {bad_sums == 0 && shapes && worst <= 1e-6,
          std::to_string(entries) + " kernel entries, " + std::to_string(bad_sums) +
              " depth-sum mismatches; max activation diff " + sci(worst) + " <= 1e-06 over " + std::to_string(voxels) +
              " interior voxels"};
}

// ---------------------------------------------------------------- 5

double oracle_auroc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
        pairs += 1.0;
      }
  return wins / pairs;
}

// Precision at every cutoff of the (score desc, index asc) ranking, summed
// at the cutoffs that admit a positive.
double oracle_prauc(const std::vector<double>& s, const std::vector<int>& y) {
  const std::size_t n = s.size();
  double total = 0.0, positives = 0.0;
  for (int v : y) positives += v;
  for (std::size_t cut = 1; cut <= n; ++cut) {
    // The cut-th ranked item: the one with exactly cut-1 items ranked above it.
    std::size_t item = n;
    for (std::size_t i = 0; i < n && item == n; ++i) {
      std::size_t above = 0;
      for (std::size_t j = 0; j < n; ++j) above += s[j] > s[i] || (s[j] == s[i] && j < i);
      if (above == cut - 1) item = i;
    }
    if (!y[item]) continue;
    double tp = 0.0;
    for (std::size_t j = 0; j < n; ++j) tp += y[j] && (s[j] > s[item] || (s[j] == s[item] && j <= item));
    total += tp / static_cast<double>(cut);
  }
  return total / positives;
}

Verdict criterion_metrics() {
  Rng rng(505);
  int auroc_bad = 0, invariance_bad = 0, invariance_checked = 0, instances = 0;
  double prauc_worst = 0.0;
  const std::vector<std::function<double(double)>> transforms = {
      [](double x) { return std::exp(x); }, [](double x) { return x * x * x + x; },
      [](double x) { return std::atan(7.0 * x - 2.0); }, [](double x) { return 0.5 * x - 3.0; }};
  while (instances < 1000) {
    const std::size_t n = 2 + rng.below(199);
    const bool discrete = rng.bernoulli(0.5);
    const double prevalence = rng.uniform(0.02, 0.98);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = rng.bernoulli(prevalence) ? 1 : 0;
      s[i] = discrete ? static_cast<double>(rng.below(8)) / 8.0 : rng.uniform(-1.0, 1.0);
    }
    const auto pos = std::count(y.begin(), y.end(), 1);
    if (pos == 0 || pos == static_cast<long>(n)) continue;
    ++instances;
    const double a = auroc(s, y);
    auroc_bad += a != oracle_auroc(s, y);
    prauc_worst = std::max(prauc_worst, std::abs(prauc(s, y) - oracle_prauc(s, y)));
    for (const auto& f : transforms) {
      std::vector<double> t(n);
      for (std::size_t i = 0; i < n; ++i) t[i] = f(s[i]);
      // Only strictly order-preserving images count as monotone transforms.
      bool strict = true;
      for (std::size_t i = 0; i < n && strict; ++i)
        for (std::size_t j = 0; j < n && strict; ++j) strict = (s[i] < s[j]) == (t[i] < t[j]);
      if (!strict) continue;
      ++invariance_checked;
      invariance_bad += auroc(t, y) != a;
    }
  }
  return {auroc_bad == 0 && prauc_worst <= 1e-12 && invariance_bad == 0 && invariance_checked >= 3000,
          std::to_string(instances) + " instances: auroc exact mismatches " + std::to_string(auroc_bad) +
              ", prauc max diff " + sci(prauc_worst) + " <= 1e-12, monotone invariance " +
              std::to_string(invariance_checked - invariance_bad) + "/" + std::to_string(invariance_checked)};
}

// ---------------------------------------------------------------- 6

double oracle_mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double oracle_sample_std(const std::vector<double>& v) {
  const double m = oracle_mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

std::string split_violation(const std::vector<PatientTimeline>& patients, const DatasetSplit& s, int k) {
  std::set<std::string> conv, seen;
  for (const PatientTimeline& p : patients)
    if (p.converter()) conv.insert(p.patient_id);
  for (const std::string& id : s.holdout)
    if (!seen.insert(id).second) return "duplicate holdout patient";
  if (static_cast<int>(s.folds.size()) != k) return "wrong fold count";
  double fold_conv = 0.0;
  for (const auto& f : s.folds)
    for (const std::string& id : f) {
      if (!seen.insert(id).second) return "patient in two partitions";
      fold_conv += conv.count(id);
    }
  if (seen.size() != patients.size()) return "partitions do not cover the cohort";
  if (static_cast<long>(s.holdout.size()) != std::lround(0.2 * static_cast<double>(patients.size())))
    return "holdout size";
  for (const auto& f : s.folds) {
    const double c = static_cast<double>(std::count_if(f.begin(), f.end(), [&](const auto& id) { return conv.count(id) > 0; }));
    if (std::abs(c - fold_conv / k) > 1.0) return "fold converter count off the stratified target";
  }
  double hold_conv = 0.0;
  for (const std::string& id : s.holdout) hold_conv += conv.count(id);
  if (std::abs(hold_conv - 0.2 * static_cast<double>(conv.size())) > 1.0) return "holdout converter count";
  return "";
}

Verdict criterion_protocol() {
  Rng rng(606);
  int cohorts = 0;
  std::string violation;
  while (cohorts < 100 && violation.empty()) {
    const Index conv = 5 + static_cast<Index>(rng.below(60)), non = 5 + static_cast<Index>(rng.below(300));
    std::vector<PatientTimeline> patients(static_cast<std::size_t>(conv + non));
    for (Index i = 0; i < conv + non; ++i) {
      patients[static_cast<std::size_t>(i)].patient_id = patient_id_for(i);
      if (rng.bernoulli(static_cast<double>(conv) / static_cast<double>(conv + non)))
        patients[static_cast<std::size_t>(i)].conversion_day = 300;
    }
    Index c = 0;
    for (const auto& p : patients) c += p.converter();
    if (c < 5 || conv + non - c < 5) continue;
    ++cohorts;
    const std::uint64_t seed = rng.next_u64();
    const DatasetSplit s = split_dataset(patients, 0.2, 4, seed);
    violation = split_violation(patients, s, 4);
    const DatasetSplit again = split_dataset(patients, 0.2, 4, seed);
    if (violation.empty() && (again.holdout != s.holdout || again.folds != s.folds)) violation = "not deterministic";
  }
  if (!violation.empty()) return {false, "split cohort " + std::to_string(cohorts) + ": " + violation};

  CohortParams cp;
  cp.patients = 32;
  cp.seed = 6;
  const auto cohort = generate_cohort(cp);
  const auto examples = make_examples(cohort, PreprocessConfig{});
  const DatasetSplit split = split_dataset(cohort, 0.2, 4, 6);
  TrainConfig cfg = default_train_config(Architecture::cnn_bilstm, "desk_scale");
  cfg.epochs = 2;
  cfg.seed = 6;
  const CrossvalResult r = run_crossval(cfg, examples, split);

  std::map<std::string, std::vector<const PredictionRow*>> by_fold;
  for (const PredictionRow& row : r.predictions) by_fold[row.fold].push_back(&row);
  std::vector<double> aurocs, praucs;
  double worst = 0.0;
  for (int f = 0; f < 4; ++f) {
    std::vector<double> s;
    std::vector<int> y;
    for (const PredictionRow* row : by_fold[std::to_string(f)]) s.push_back(row->score), y.push_back(row->label);
    aurocs.push_back(oracle_auroc(s, y));
    praucs.push_back(oracle_prauc(s, y));
    if (f < static_cast<int>(r.report.folds.size()))
      worst = std::max({worst, std::abs(aurocs.back() - r.report.folds[f].auroc),
                        std::abs(praucs.back() - r.report.folds[f].prauc)});
  }
  std::vector<double> ensemble(by_fold["0"].size(), 0.0);
  std::vector<int> labels;
  bool aligned = by_fold["ensemble"].size() == ensemble.size();
  for (std::size_t i = 0; i < ensemble.size() && aligned; ++i) {
    for (int f = 0; f < 4; ++f) {
      const PredictionRow* row = by_fold[std::to_string(f)][i];
      aligned &= row->patient_id == by_fold["0"][i]->patient_id && row->visit_day == by_fold["0"][i]->visit_day;
      ensemble[i] += row->score / 4.0;
    }
    labels.push_back(by_fold["0"][i]->label);
    worst = std::max(worst, std::abs(ensemble[i] - by_fold["ensemble"][i]->score));
  }
  worst = std::max({worst, std::abs(oracle_mean(aurocs) - r.report.auroc.mean),
                    std::abs(oracle_sample_std(aurocs) - r.report.auroc.std),
                    std::abs(oracle_mean(praucs) - r.report.prauc.mean),
                    std::abs(oracle_sample_std(praucs) - r.report.prauc.std)});
  if (aligned) worst = std::max(worst, std::abs(oracle_auroc(ensemble, labels) - r.report.ensemble_auroc));
  const bool four = r.models.size() == 4 && r.report.folds.size() == 4 && r.logs.size() == 4;
  return {four && aligned && worst <= 1e-12,
          "100 split cohorts hold; crossval models " + std::to_string(r.models.size()) + ", report " +
              format_mean_std(r.report.auroc) + " AUROC, max diff to recomputed statistics " + sci(worst) +
              " <= 1e-12"};
}

// ---------------------------------------------------------------- 7, 8

struct EndToEnd {
  Verdict separability, attention;
};

EndToEnd criterion_end_to_end() {
  const CohortParams cp;
  const auto cohort = generate_cohort(cp);
  const PreprocessConfig pp;
  const auto examples = make_examples(cohort, pp);
  const DatasetSplit split = split_dataset(cohort, 0.2, 4, 0);
  const TrainConfig cfg = default_train_config(Architecture::cnn_bilstm, "desk_scale");
  CrossvalResult r = run_crossval(cfg, examples, split);

  Index positives = 0;
  for (const LabelledExample& e : examples) positives += e.label;
  EndToEnd out;
  out.separability = {r.report.auroc.mean >= 0.85,
                      "holdout AUROC over fold models " + format_mean_std(r.report.auroc) + " >= 0.85 (ensemble " +
                          fmt("%.3f", r.report.ensemble_auroc) + "); cohort " + std::to_string(cp.patients) +
                          " patients, " + std::to_string(examples.size()) + " scans, " +
                          fmt("%.1f%%", 100.0 * double(positives) / double(examples.size())) + " positive"};

  std::map<std::string, const PatientTimeline*> by_id;
  for (const PatientTimeline& t : cohort) by_id[t.patient_id] = &t;
  std::vector<std::size_t> idx;
  std::vector<std::vector<Index>> lesions;
  for (std::size_t i : r.holdout)
    if (examples[i].label) {
      idx.push_back(i);
      lesions.push_back(lesion_slices_after_preprocess(*by_id.at(examples[i].patient_id), pp));
    }
  double overlap = 0.0, chance = 0.0;
  std::string per_fold;
  for (Model<float>& m : r.models) {
    const OverlapStats o = attention_overlap(m, examples, idx, lesions, 4);
    overlap += o.overlap / static_cast<double>(r.models.size());
    chance = o.chance;
    per_fold += (per_fold.empty() ? "" : " ") + fmt("%.3f", o.overlap);
  }
  out.attention = {overlap >= 2.0 * chance,
                   "top-4 SE overlap " + fmt("%.3f", overlap) + " vs chance " + fmt("%.3f", chance) + " (ratio " +
                       fmt("%.2f", overlap / chance) + " >= 2) on " + std::to_string(idx.size()) +
                       " positive holdout volumes; per fold " + per_fold};
  return out;
}

// ---------------------------------------------------------------- 9

Verdict criterion_pretraining(const fs::path& work) {
  const CohortParams cp;
  const auto cohort = generate_cohort(cp);
  const PreprocessConfig pp;
  const auto examples = make_examples(cohort, pp);
  const DatasetSplit split = split_dataset(cohort, 0.2, 4, 0);
  const std::set<std::string> hold(split.holdout.begin(), split.holdout.end());
  std::vector<PatientTimeline> unlabeled;
  for (const PatientTimeline& t : cohort)
    if (!hold.count(t.patient_id)) unlabeled.push_back(t);
  const ModelSpec spec = model_preset(Architecture::cnn_bilstm, "desk_scale");
  const PretrainConfig pc;
  const PretrainResult pre = pretrain_encoder(unlabeled, pp, spec, pc);
  const double probe = linear_probe_auroc(pre.encoder, cohort, cp, pp, 0);

  json rows = json::array();
  double tinc = 0.0, random = 0.0;
  const int seeds = 3;
  for (int s = 0; s < seeds; ++s)
    for (InitMode init : {InitMode::random, InitMode::tinc_checkpoint}) {
      TrainConfig cfg = default_train_config(Architecture::cnn_bilstm, "desk_scale");
      cfg.seed = 100 + static_cast<std::uint64_t>(s);
      cfg.label_fraction = 0.1;
      cfg.init = init;
      if (init == InitMode::tinc_checkpoint) cfg.checkpoint = "pretrained encoder";
      const CrossvalResult r = run_crossval(cfg, examples, split, init == InitMode::random ? nullptr : &pre.encoder);
      (init == InitMode::random ? random : tinc) += r.report.auroc.mean / seeds;
      rows.push_back({{"seed", cfg.seed},
                      {"init", to_string(init)},
                      {"auroc", {{"mean", r.report.auroc.mean}, {"std", r.report.auroc.std}}},
                      {"ensemble_auroc", r.report.ensemble_auroc}});
    }
  const bool pass = tinc >= random - 0.02;
  const json report = {{"label_fraction", 0.1},
                       {"runs", rows},
                       {"mean_auroc", {{"random", random}, {"tinc", tinc}}},
                       {"margin", 0.02},
                       {"tinc_not_worse", pass},
                       {"linear_probe_auroc", probe},
                       {"pretrain_history", history_json(pre.history)}};
  fs::create_directories(work);
  write_text_file(work / "pretraining_comparison.json", report.dump(2) + "\n");
  std::string text = "seed  init             AUROC\n";
  for (const json& row : rows) {
    char buf[120];
    std::snprintf(buf, sizeof buf, "%4llu  %-15s  %.3f±%.3f (ensemble %.3f)\n",
                  static_cast<unsigned long long>(row.at("seed").get<std::uint64_t>()),
                  row.at("init").get<std::string>().c_str(), row.at("auroc").at("mean").get<double>(),
                  row.at("auroc").at("std").get<double>(), row.at("ensemble_auroc").get<double>());
    text += buf;
  }
  text += "mean random " + fmt("%.3f", random) + ", tinc " + fmt("%.3f", tinc) + "\n";
  write_text_file(work / "pretraining_comparison.txt", text);
  return {pass, "10% labels, 3 seeds: TINC " + fmt("%.3f", tinc) + " >= random " + fmt("%.3f", random) +
                    " - 0.02; linear probe " + fmt("%.3f", probe) + "; report " +
                    (work / "pretraining_comparison.txt").string()};
}

// ---------------------------------------------------------------- 10

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_binary_file(e.path());
  return out;
}

Verdict criterion_determinism(const fs::path& cli, const fs::path& work) {
  const std::vector<std::string> commands = {
      "--config small.json --out cohort synth",
      "--config small.json --out pre pretrain --cohort cohort --epochs 1",
      "--config small.json --out runs/random train --cohort cohort --epochs 1",
      "--config small.json --out runs/tinc train --cohort cohort --epochs 1 --init tinc_checkpoint "
      "--checkpoint pre/checkpoints/encoder.ckpt",
      "--config small.json --out evaluated eval --cohort cohort --checkpoints runs/tinc",
      "--config small.json --out inspected inspect --arch i3d"};
  std::map<std::string, std::string> trees[2];
  for (int run = 0; run < 2; ++run) {
    const fs::path dir = work / ("run" + std::to_string(run));
    fs::remove_all(dir);
    fs::create_directories(dir);
    write_text_file(dir / "small.json", R"({"seed": 10, "cohort": {"patients": 24}, "split": {"folds": 2}})");
    for (const std::string& c : commands) {
      const std::string line = "cd '" + dir.string() + "' && '" + cli.string() + "' " + c + " > /dev/null";
      if (std::system(line.c_str()) != 0) return {false, "command failed: volmil " + c};
    }
    trees[run] = tree_bytes(dir);
  }
  Index differing = 0;
  std::string first;
  for (const auto& [name, bytes] : trees[0]) {
    const auto it = trees[1].find(name);
    if (it == trees[1].end() || it->second != bytes) {
      ++differing;
      if (first.empty()) first = name;
    }
  }
  const bool same_names = trees[0].size() == trees[1].size();
  Index checkpoints = 0;
  for (const auto& [name, bytes] : trees[0]) checkpoints += name.ends_with(".ckpt");
  return {differing == 0 && same_names && checkpoints > 0,
          std::to_string(commands.size()) + " commands run twice: " + std::to_string(trees[0].size()) + " files (" +
              std::to_string(checkpoints) + " checkpoints), " + std::to_string(differing) + " differ" +
              (first.empty() ? "" : " (first: " + first + ")")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string cli, work = "acceptance_work";
  std::vector<int> only;
  app.add_option("--cli", cli, "Path to the volmil executable")->required();
  app.add_option("--work", work, "Scratch directory for outputs");
  app.add_option("--only", only, "Criteria to run (default: all)");
  CLI11_PARSE(app, argc, argv);

  const auto selected = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
  int failed = 0;
  auto report = [&](int id, const std::string& name, const Verdict& v, double seconds) {
    failed += !v.pass;
    std::printf("criterion %2d %s  %s: %s [%.1f s]\n", id, v.pass ? "PASS" : "FAIL", name.c_str(), v.detail.c_str(),
                seconds);
    std::fflush(stdout);
  };
  auto run = [&](int id, const std::string& name, const std::function<Verdict()>& f) {
    if (!selected(id)) return;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = f();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    report(id, name, v, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  };

  run(1, "parameter accounting", criterion_params);
  run(2, "FLOP accounting", criterion_flops);
  run(3, "gradient suite", criterion_gradients);
  run(4, "inflation equivalence", criterion_inflation);
  run(5, "metric oracles", criterion_metrics);
  run(6, "protocol fidelity", criterion_protocol);
  if (selected(7) || selected(8)) {
    const auto t0 = std::chrono::steady_clock::now();
    EndToEnd e;
    try {
      e = criterion_end_to_end();
    } catch (const std::exception& ex) {
      e.separability = e.attention = {false, std::string("exception: ") + ex.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (selected(7)) report(7, "synthetic separability", e.separability, s);
    if (selected(8)) report(8, "attention localization", e.attention, 0.0);
  }
  run(9, "pretraining benefit", [&] { return criterion_pretraining(fs::path(work) / "pretraining"); });
  run(10, "determinism", [&] { return criterion_determinism(fs::absolute(cli), fs::absolute(work) / "determinism"); });
  std::printf("%d criteria failed\n", failed);
  return failed;
}
