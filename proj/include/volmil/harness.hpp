#ifndef VOLMIL_HARNESS_HPP_
#define VOLMIL_HARNESS_HPP_

#include "volmil/checkpoint.hpp"
#include "volmil/cohort.hpp"
#include "volmil/metrics.hpp"
#include "volmil/models.hpp"
#include "volmil/optim.hpp"

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace volmil {

enum class InitMode { random, tinc_checkpoint };
enum class EncoderMode { end_to_end, frozen };

struct TrainConfig {
  ModelSpec model;
  InitMode init = InitMode::random;
  /// Encoder checkpoint path, required when init is tinc_checkpoint.
  std::string checkpoint;
  EncoderMode encoder_mode = EncoderMode::end_to_end;
  OptimizerConfig optimizer;
  Index batch_size = 10;
  Index epochs = 12;
  /// Negative selects N_neg / N_pos of the training split.
  double pos_weight = -1.0;
  /// Stratified fraction of each fold's training scans that keep labels.
  double label_fraction = 1.0;
  AugmentPolicy augment;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Optimizer kind, schedule shape and weight decay per architecture; desk
/// presets halve batch sizes.
TrainConfig default_train_config(Architecture arch, const std::string& preset = "desk_scale");
void to_json(nlohmann::json& j, const TrainConfig& c);
/// Starts from default_train_config of the arch/preset named in "model".
void from_json(const nlohmann::json& j, TrainConfig& c);
std::string to_string(InitMode m);
std::string to_string(EncoderMode m);

struct EpochLog {
  Index epoch = 0;
  double loss = 0.0;
  double learning_rate = 0.0;
  std::optional<double> val_auroc;
};
nlohmann::json log_json(const std::vector<EpochLog>& log);

/// Non-finite loss or gradient. Carries the parameters from before the
/// failing step.
class TrainingAborted : public NumericalError {
 public:
  TrainingAborted(const std::string& what, Checkpoint last_good)
      : NumericalError(what), last_good_(std::move(last_good)) {}
  const Checkpoint& last_good() const { return last_good_; }

 private:
  Checkpoint last_good_;
};

struct TrainResult {
  Model<float> model;
  std::vector<EpochLog> log;
  std::vector<std::string> transfer_log;
};

/// Mini-batch training of cfg.model on examples[train] with the preset
/// optimizer and a cosine schedule; returns the final-epoch model. Logs the
/// validation AUROC when `val` holds both classes. `encoder` is required
/// for tinc_checkpoint initialization.
TrainResult train_model(const TrainConfig& cfg, const std::vector<LabelledExample>& examples,
                        const std::vector<std::size_t>& train, const std::vector<std::size_t>& val,
                        const Checkpoint* encoder = nullptr);

/// Sigmoid outputs in evaluation mode.
std::vector<double> predict_probabilities(Model<float>& model, const std::vector<LabelledExample>& examples,
                                          const std::vector<std::size_t>& idx);

/// Mean of member sigmoid outputs for one S x H x W volume.
double ensemble_predict(const std::vector<Model<float>*>& models, const Tensor<float>& volume);
std::vector<double> ensemble_probabilities(const std::vector<Model<float>*>& models,
                                           const std::vector<LabelledExample>& examples,
                                           const std::vector<std::size_t>& idx);

struct FoldMetrics {
  Index fold = 0;
  double auroc = 0.0;
  double prauc = 0.0;
  std::optional<double> final_val_auroc;
  Index train_scans = 0;
  Index train_positives = 0;
};

struct MetricsReport {
  std::string model;
  std::int64_t params = 0;
  std::string pretraining;
  std::vector<FoldMetrics> folds;
  MeanStd auroc;
  MeanStd prauc;
  double ensemble_auroc = 0.0;
  double ensemble_prauc = 0.0;
  Index holdout_scans = 0;
  Index holdout_positives = 0;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::string version;
};

/// Fills mean and sample std from the per-fold rows.
void summarize(MetricsReport& r);
nlohmann::json report_json(const MetricsReport& r);
/// Table with model, #params, pretraining, AUROC and PRAUC as mean±std.
std::string report_text(const MetricsReport& r);
/// Writes report.json and report.txt into dir. Rejects an empty fold list.
void write_report(const MetricsReport& r, const std::filesystem::path& dir);

struct PredictionRow {
  std::string patient_id;
  int visit_day = 0;
  int label = 0;
  double score = 0.0;
  /// Fold index, or "ensemble".
  std::string fold;
};
std::string predictions_csv(const std::vector<PredictionRow>& rows);

struct CrossvalResult {
  MetricsReport report;
  std::vector<Model<float>> models;
  std::vector<std::vector<EpochLog>> logs;
  std::vector<PredictionRow> predictions;
  std::vector<std::string> transfer_log;
  /// Holdout example indices in evaluation order.
  std::vector<std::size_t> holdout;
};

/// Trains one model per fold (fold i validates, the others train), scores
/// the holdout with each and with their mean-probability ensemble. Throws
/// std::logic_error if holdout patients reach training or validation.
CrossvalResult run_crossval(const TrainConfig& cfg, const std::vector<LabelledExample>& examples,
                            const DatasetSplit& split, const Checkpoint* encoder = nullptr,
                            const std::string& config_hash = "");

/// Example indices whose patient is in `ids`.
std::vector<std::size_t> examples_of(const std::vector<LabelledExample>& examples, const std::vector<std::string>& ids);

/// Expected fraction of the top_k weights that fall on lesion slices, with
/// ties at the cut shared uniformly.
double topk_overlap(const std::vector<double>& weights, const std::vector<Index>& lesion, Index top_k);

struct OverlapStats {
  double overlap = 0.0;
  double chance = 0.0;
  Index volumes = 0;
};

/// Per-slice attention: SE weights (cnn_bilstm) or classification-token
/// attention averaged over heads (cnn_transformer). Throws
/// PreconditionError for architectures without a trace.
std::vector<std::vector<double>> slice_attention(Model<float>& model, const std::vector<LabelledExample>& examples,
                                                 const std::vector<std::size_t>& idx);

/// Mean top-k overlap over the given volumes and its chance level
/// lesion_count / S.
OverlapStats attention_overlap(Model<float>& model, const std::vector<LabelledExample>& examples,
                               const std::vector<std::size_t>& idx, const std::vector<std::vector<Index>>& lesions,
                               Index top_k);

/// Logistic regression on frozen slice embeddings, lesion slices against
/// all others, fit on half of the patients and scored on the rest.
/// Lesion slices count only once the lesion amplitude reaches min_amplitude.
double linear_probe_auroc(const Checkpoint& encoder, const std::vector<PatientTimeline>& cohort,
                          const CohortParams& params, const PreprocessConfig& preprocess, std::uint64_t seed,
                          double min_amplitude = 0.2);

}  // namespace volmil

#endif  // VOLMIL_HARNESS_HPP_
