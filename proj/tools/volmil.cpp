#include "volmil/accounting.hpp"
#include "volmil/binary_io.hpp"
#include "volmil/harness.hpp"
#include "volmil/json_fields.hpp"
#include "volmil/metrics.hpp"
#include "volmil/pretrain.hpp"
#include "volmil/verify.hpp"

#include <omp.h>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>

#include "CLI11.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace volmil;

namespace {

constexpr const char* kVersion = "volmil 1.0.0";

struct SplitConfig {
  double holdout_frac = 0.2;
  int folds = 4;
};

/// Fully resolved view of every stage's settings.
struct RunConfig {
  std::uint64_t seed = 0;
  CohortParams cohort;
  PreprocessConfig preprocess;
  SplitConfig split;
  TrainConfig train;
  PretrainConfig pretrain;
};

json to_json(const RunConfig& c) {
  return {{"seed", c.seed},
          {"cohort", c.cohort},
          {"preprocess", c.preprocess},
          {"split", {{"holdout_frac", c.split.holdout_frac}, {"folds", c.split.folds}}},
          {"train", c.train},
          {"pretrain", c.pretrain}};
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string config_hash(const RunConfig& c) { return hex64(fnv1a64(to_json(c).dump())); }

struct Flags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  int threads = 0;
  std::string cohort;
  std::string arch;
  std::string preset;
  std::string init;
  std::string encoder_mode;
  std::string checkpoint;
  std::string checkpoints;
  std::optional<long long> epochs;
  std::optional<double> label_fraction;
  bool perturb_inflation = false;
};

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path);
  try {
    json j = json::parse(read_text_file(path));
    if (!j.is_object()) throw ConfigError("config " + path + ": expected a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
}

/// Config file first, then flags; the global seed drives every stage.
RunConfig resolve(const Flags& f, const std::string& stage) {
  json j = load_config_file(f.config);
  json train = json::object(), pretrain = json::object(), cohort = json::object(), preprocess = json::object(),
       split = json::object();
  std::uint64_t seed = 0;
  FieldReader(j, "config")
      .get("seed", seed)
      .get("cohort", cohort)
      .get("preprocess", preprocess)
      .get("split", split)
      .get("train", train)
      .get("pretrain", pretrain)
      .finish();
  if (f.seed) seed = *f.seed;
  if (!train.is_object() || !pretrain.is_object() || !cohort.is_object())
    throw ConfigError("config: train, pretrain and cohort must be objects");
  if (!train.contains("model")) train["model"] = json::object();
  if (!f.arch.empty()) train["model"]["arch"] = f.arch;
  if (!f.preset.empty()) train["model"]["preset"] = f.preset;
  if (!f.init.empty()) train["init"] = f.init;
  if (!f.encoder_mode.empty()) train["encoder_mode"] = f.encoder_mode;
  if (!f.checkpoint.empty()) train["checkpoint"] = f.checkpoint;
  if (f.label_fraction) train["label_fraction"] = *f.label_fraction;
  if (f.epochs) (stage == "pretrain" ? pretrain : train)["epochs"] = *f.epochs;
  train["seed"] = seed;
  pretrain["seed"] = seed;
  cohort["seed"] = seed;

  RunConfig c;
  c.seed = seed;
  c.cohort = cohort.get<CohortParams>();
  c.preprocess = preprocess.get<PreprocessConfig>();
  FieldReader(split, "split").get("holdout_frac", c.split.holdout_frac).get("folds", c.split.folds).finish();
  if (!(c.split.holdout_frac > 0.0 && c.split.holdout_frac < 1.0) || c.split.folds < 2)
    throw ConfigError("split: need 0 < holdout_frac < 1 and folds >= 2");
  c.train = train.get<TrainConfig>();
  c.pretrain = pretrain.get<PretrainConfig>();
  return c;
}

fs::path require_out(const Flags& f) {
  if (f.out.empty()) throw ConfigError("--out is required");
  std::error_code ec;
  fs::create_directories(f.out, ec);
  if (ec) throw IoError("cannot create output directory " + f.out + ": " + ec.message());
  return f.out;
}

void echo_config(const fs::path& out, const RunConfig& c, const std::string& command) {
  const json j = {{"command", command}, {"config", to_json(c)}, {"hash", config_hash(c)}, {"version", kVersion}};
  write_text_file(out / "config.json", j.dump(2) + "\n");
}

fs::path make_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create " + p.string() + ": " + ec.message());
  return p;
}

/// Cohort from --cohort; the manifest's generator parameters replace the config's.
std::vector<PatientTimeline> load_cohort(const Flags& f, RunConfig& c) {
  if (f.cohort.empty()) throw ConfigError("--cohort is required");
  if (!fs::exists(fs::path(f.cohort) / "cohort.json")) throw IoError("no cohort manifest in " + f.cohort);
  return read_cohort(f.cohort, &c.cohort);
}

void align_model_input(RunConfig& c) {
  ModelSpec& m = c.train.model;
  if (m.input.slices != c.preprocess.n_slices || m.input.height != c.preprocess.out_h ||
      m.input.width != c.preprocess.out_w)
    throw PreconditionError("model input " + std::to_string(m.input.slices) + "x" + std::to_string(m.input.height) +
                            "x" + std::to_string(m.input.width) + " does not match preprocessing " +
                            std::to_string(c.preprocess.n_slices) + "x" + std::to_string(c.preprocess.out_h) + "x" +
                            std::to_string(c.preprocess.out_w));
}

std::vector<PatientTimeline> non_holdout(const std::vector<PatientTimeline>& cohort, const DatasetSplit& split) {
  const std::set<std::string> hold(split.holdout.begin(), split.holdout.end());
  std::vector<PatientTimeline> out;
  for (const PatientTimeline& t : cohort)
    if (!hold.count(t.patient_id)) out.push_back(t);
  return out;
}

int cmd_synth(const Flags& f) {
  RunConfig c = resolve(f, "synth");
  const fs::path out = require_out(f);
  write_cohort(generate_cohort(c.cohort), c.cohort, out);
  echo_config(out, c, "synth");
  std::cout << "wrote " << c.cohort.patients << " patients to " << out.string() << "\n";
  return 0;
}

int cmd_pretrain(const Flags& f) {
  RunConfig c = resolve(f, "pretrain");
  const fs::path out = require_out(f);
  const auto cohort = load_cohort(f, c);
  align_model_input(c);
  const DatasetSplit split = split_dataset(cohort, c.split.holdout_frac, c.split.folds, c.seed);
  echo_config(out, c, "pretrain");
  // Holdout patients never reach pretraining.
  const PretrainResult r = pretrain_encoder(non_holdout(cohort, split), c.preprocess, c.train.model, c.pretrain);
  write_checkpoint(make_dir(out / "checkpoints") / "encoder.ckpt", r.encoder);
  const json log = {{"history", history_json(r.history)}, {"tinc", c.pretrain.tinc}, {"augment", c.pretrain.augment}};
  write_text_file(make_dir(out / "logs") / "pretrain.json", log.dump(2) + "\n");
  for (const PretrainEpoch& e : r.history) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "epoch %lld loss %.6f similarity %.6f variance %.6f covariance %.6f\n",
                  static_cast<long long>(e.epoch), e.loss, e.similarity, e.variance, e.covariance);
    std::cout << buf;
  }
  return 0;
}

std::optional<Checkpoint> encoder_for(const TrainConfig& t) {
  if (t.init != InitMode::tinc_checkpoint) return std::nullopt;
  if (!fs::exists(t.checkpoint)) throw IoError("encoder checkpoint not found: " + t.checkpoint);
  return read_checkpoint(t.checkpoint);
}

void write_comparison(const fs::path& out, const MetricsReport& mine, const RunConfig& c) {
  const fs::path parent = fs::absolute(out).parent_path();
  json rows = json::array();
  std::string text;
  for (const auto& entry : fs::directory_iterator(parent)) {
    if (!entry.is_directory() || fs::equivalent(entry.path(), out)) continue;
    const fs::path rep = entry.path() / "report.json", cfg = entry.path() / "config.json";
    if (!fs::exists(rep) || !fs::exists(cfg)) continue;
    json other, other_cfg;
    try {
      other = json::parse(read_text_file(rep));
      other_cfg = json::parse(read_text_file(cfg));
    } catch (const json::exception&) {
      continue;
    }
    if (other_cfg.value("command", "") != "train") continue;
    const json& ot = other_cfg.at("config").at("train");
    if (ot.at("model").at("arch") != to_string(c.train.model.arch) || ot.at("init") == to_string(c.train.init))
      continue;
    rows.push_back({{"run", entry.path().filename().string()},
                    {"pretraining", other.at("pretraining")},
                    {"auroc_mean", other.at("auroc").at("mean")},
                    {"ensemble_auroc", other.at("ensemble").at("auroc")}});
  }
  if (rows.empty()) return;
  std::sort(rows.begin(), rows.end(), [](const json& a, const json& b) { return a.at("run") < b.at("run"); });
  const json j = {{"this", {{"run", out.filename().string()},
                            {"pretraining", mine.pretraining},
                            {"auroc_mean", mine.auroc.mean},
                            {"ensemble_auroc", mine.ensemble_auroc}}},
                  {"siblings", rows}};
  char buf[200];
  std::snprintf(buf, sizeof buf, "%-20s %-22s %s\n", "run", "pretraining", "AUROC");
  text += buf;
  auto line = [&](const json& r) {
    std::snprintf(buf, sizeof buf, "%-20s %-22s %.3f (ensemble %.3f)\n", r.at("run").get<std::string>().c_str(),
                  r.at("pretraining").get<std::string>().c_str(), r.at("auroc_mean").get<double>(),
                  r.at("ensemble_auroc").get<double>());
    text += buf;
  };
  line(j.at("this"));
  for (const json& r : rows) line(r);
  write_text_file(out / "comparison.json", j.dump(2) + "\n");
  write_text_file(out / "comparison.txt", text);
  std::cout << "\n" << text;
}

int cmd_train(const Flags& f) {
  RunConfig c = resolve(f, "train");
  const fs::path out = require_out(f);
  const auto cohort = load_cohort(f, c);
  align_model_input(c);
  const auto encoder = encoder_for(c.train);
  echo_config(out, c, "train");
  const DatasetSplit split = split_dataset(cohort, c.split.holdout_frac, c.split.folds, c.seed);
  const auto examples = make_examples(cohort, c.preprocess);
  CrossvalResult r;
  try {
    r = run_crossval(c.train, examples, split, encoder ? &*encoder : nullptr, config_hash(c));
  } catch (const TrainingAborted& e) {
    write_checkpoint(make_dir(out / "checkpoints") / "last_good.ckpt", e.last_good());
    throw;
  }
  const fs::path ckpt = make_dir(out / "checkpoints"), logs = make_dir(out / "logs");
  for (std::size_t i = 0; i < r.models.size(); ++i) {
    write_checkpoint(ckpt / ("fold" + std::to_string(i) + ".ckpt"),
                     snapshot(r.models[i].store(), json(r.models[i].spec())));
    write_text_file(logs / ("fold" + std::to_string(i) + ".json"), log_json(r.logs[i]).dump(2) + "\n");
  }
  if (!r.transfer_log.empty()) {
    std::string t;
    for (const std::string& l : r.transfer_log) t += l + "\n";
    write_text_file(logs / "transfer.log", t);
    std::cout << "transfer: " << r.transfer_log.size() << " tensors (logs/transfer.log)\n";
  }
  json split_json = split;
  write_text_file(logs / "split.json", split_json.dump(2) + "\n");
  write_report(r.report, out);
  write_text_file(out / "predictions.csv", predictions_csv(r.predictions));
  std::cout << report_text(r.report);
  write_comparison(out, r.report, c);
  return 0;
}

int cmd_eval(const Flags& f) {
  if (f.checkpoints.empty()) throw ConfigError("--checkpoints (a train output directory) is required");
  const fs::path run = f.checkpoints;
  if (!fs::exists(run / "config.json")) throw IoError("no config.json in " + run.string());
  Flags resolved = f;
  // The training run's resolved config is the base; flags still win.
  const json run_cfg = json::parse(read_text_file(run / "config.json"));
  const fs::path tmp_cfg = require_out(f) / "config.base.json";
  write_text_file(tmp_cfg, run_cfg.at("config").dump());
  resolved.config = tmp_cfg.string();
  RunConfig c = resolve(resolved, "eval");
  fs::remove(tmp_cfg);
  const fs::path out = f.out;
  const auto cohort = load_cohort(f, c);
  std::vector<Model<float>> models;
  for (int i = 0;; ++i) {
    const fs::path p = run / "checkpoints" / ("fold" + std::to_string(i) + ".ckpt");
    if (!fs::exists(p)) break;
    const Checkpoint ck = read_checkpoint(p);
    models.emplace_back(ck.spec.get<ModelSpec>(), 0);
    restore(ck, models.back().store());
  }
  if (models.empty()) throw IoError("no fold checkpoints in " + (run / "checkpoints").string());
  c.train.model = models.front().spec();
  align_model_input(c);
  echo_config(out, c, "eval");
  const auto examples = make_examples(cohort, c.preprocess);
  std::vector<std::size_t> all(examples.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  std::vector<int> labels;
  for (const LabelledExample& e : examples) labels.push_back(e.label);

  MetricsReport rep;
  rep.model = to_string(c.train.model.arch);
  rep.params = count_params(c.train.model);
  const fs::path run_report = run / "report.json";
  rep.pretraining = fs::exists(run_report) ? json::parse(read_text_file(run_report)).value("pretraining", "unknown")
                                           : "unknown";
  rep.holdout_scans = static_cast<Index>(examples.size());
  rep.holdout_positives = std::count(labels.begin(), labels.end(), 1);
  rep.config_hash = config_hash(c);
  rep.seed = c.seed;
  rep.version = kVersion;
  std::vector<PredictionRow> rows;
  std::vector<Model<float>*> members;
  for (std::size_t k = 0; k < models.size(); ++k) {
    members.push_back(&models[k]);
    const auto p = predict_probabilities(models[k], examples, all);
    rep.folds.push_back({static_cast<Index>(k), auroc(p, labels), prauc(p, labels), std::nullopt, 0, 0});
    for (std::size_t i = 0; i < p.size(); ++i)
      rows.push_back({examples[i].patient_id, examples[i].visit_day, examples[i].label, p[i], std::to_string(k)});
  }
  const auto ens = ensemble_probabilities(members, examples, all);
  for (std::size_t i = 0; i < ens.size(); ++i)
    rows.push_back({examples[i].patient_id, examples[i].visit_day, examples[i].label, ens[i], "ensemble"});
  rep.ensemble_auroc = auroc(ens, labels);
  rep.ensemble_prauc = prauc(ens, labels);
  summarize(rep);
  write_report(rep, out);
  write_text_file(out / "predictions.csv", predictions_csv(rows));
  std::cout << report_text(rep);
  return 0;
}

int cmd_inspect(const Flags& f) {
  RunConfig c = resolve(f, "inspect");
  const ModelSpec& spec = c.train.model;
  std::cout << inspect_text(spec);
  if (!f.out.empty()) {
    const fs::path out = require_out(f);
    echo_config(out, c, "inspect");
    write_text_file(out / "inspect.json", inspect_json(spec).dump(2) + "\n");
    write_text_file(out / "inspect.txt", inspect_text(spec));
  }
  return 0;
}

int cmd_verify(const Flags& f) {
  const auto suites = run_verify({f.perturb_inflation, f.seed.value_or(0)});
  const std::string text = verify_text(suites);
  std::cout << text;
  if (!f.out.empty()) write_text_file(require_out(f) / "verify.txt", text);
  const bool ok = std::all_of(suites.begin(), suites.end(), [](const SuiteResult& s) { return s.passed(); });
  std::cout << (ok ? "verify: all suites passed\n" : "verify: FAILED\n");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Volumetric multiple-instance learning toolkit"};
  app.require_subcommand(1);
  Flags f;
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "Seed for every stage")->group("Global");
  app.add_option("--config", f.config, "JSON config file")->group("Global");
  app.add_option("--out", f.out, "Output directory")->group("Global");
  app.add_option("--threads", f.threads, "OpenMP threads (0 keeps the default)")->group("Global");
  app.fallthrough();

  struct Command {
    const char* name;
    const char* help;
    int (*run)(const Flags&);
  };
  const Command commands[] = {{"synth", "Generate a synthetic cohort directory", cmd_synth},
                              {"pretrain", "TINC-pretrain the slice encoder", cmd_pretrain},
                              {"train", "Cross-validate an architecture and write reports", cmd_train},
                              {"eval", "Re-score a trained checkpoint set on a cohort", cmd_eval},
                              {"inspect", "Parameter and FLOP table", cmd_inspect},
                              {"verify", "Gradient, inflation, metric and determinism suites", cmd_verify}};
  std::map<std::string, CLI::App*> subs;
  long long epochs = 0;
  double label_fraction = 1.0;
  std::vector<CLI::Option*> epoch_opts;
  CLI::Option* fraction_opt = nullptr;
  for (const Command& c : commands) {
    CLI::App* s = app.add_subcommand(c.name, c.help);
    subs[c.name] = s;
    const std::string n = c.name;
    if (n == "pretrain" || n == "train" || n == "eval") s->add_option("--cohort", f.cohort, "Cohort directory");
    if (n != "synth" && n != "verify") {
      s->add_option("--arch", f.arch, "cnn_bilstm | cnn_transformer | i3d | vivit_fsa");
      s->add_option("--preset", f.preset, "desk_scale | paper_scale");
    }
    if (n == "train") {
      s->add_option("--init", f.init, "random | tinc_checkpoint");
      s->add_option("--encoder-mode", f.encoder_mode, "end_to_end | frozen");
      s->add_option("--checkpoint", f.checkpoint, "Encoder checkpoint for tinc_checkpoint init");
      fraction_opt = s->add_option("--label-fraction", label_fraction, "Fraction of labelled training scans kept");
    }
    if (n == "train" || n == "pretrain") {
      epoch_opts.push_back(s->add_option("--epochs", epochs, "Override the stage's epoch count"));
    }
    if (n == "eval") s->add_option("--checkpoints", f.checkpoints, "Train output directory holding checkpoints/");
    if (n == "verify")
      s->add_flag("--perturb-inflation", f.perturb_inflation, "Negative control: corrupt one inflated kernel");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  if (seed_opt->count() > 0) f.seed = seed;
  for (const CLI::Option* o : epoch_opts)
    if (o->count() > 0) f.epochs = epochs;
  if (fraction_opt && fraction_opt->count() > 0) f.label_fraction = label_fraction;
  if (f.threads > 0) omp_set_num_threads(f.threads);

  try {
    for (const Command& c : commands)
      if (subs[c.name]->parsed()) return c.run(f);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 5;
  } catch (const PreconditionError& e) {
    std::cerr << "precondition failed: " << e.what() << "\n";
    return 4;
  } catch (const ShapeError& e) {
    std::cerr << "shape mismatch: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
