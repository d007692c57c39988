#ifndef VOLMIL_COHORT_HPP_
#define VOLMIL_COHORT_HPP_

#include "volmil/rng.hpp"
#include "volmil/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace volmil {

/// One volume: S slices of H x W intensities, a reference surface row per
/// (slice, column), and the acquisition day.
struct VolumeScan {
  Tensor<float> voxels;           // S x H x W
  std::vector<std::int32_t> surface;  // S x W, row-major, values in [0, H)
  int visit_day = 0;

  Index slices() const { return voxels.dim(0); }
  Index height() const { return voxels.dim(1); }
  Index width() const { return voxels.dim(2); }
  std::int32_t surface_at(Index s, Index w) const { return surface[static_cast<std::size_t>(s * width() + w)]; }
  float at(Index s, Index h, Index w) const { return voxels[(s * height() + h) * width() + w]; }
};

/// Planted biomarker of a converter: contiguous raw slice range and the
/// lateral / depth placement of the blob.
struct LesionSite {
  Index first_slice = 0;
  Index slice_count = 0;
  double center_col = 0.0;
  double depth_below_surface = 0.0;
};

struct PatientTimeline {
  std::string patient_id;
  std::vector<VolumeScan> visits;  // strictly increasing visit_day
  std::optional<int> conversion_day;
  std::optional<LesionSite> lesion;

  bool converter() const { return conversion_day.has_value(); }
};

struct CohortParams {
  Index patients = 100;
  double converter_fraction = 0.24;
  int visit_interval_days = 30;
  int visit_count = 25;
  int conversion_day_min = 60;
  int conversion_day_max = 900;
  Index slices = 20;
  Index height = 36;
  Index width = 36;
  Index lesion_slices = 2;
  /// Lesions are confined to this many central slices.
  Index lesion_window = 16;
  double lesion_amplitude = 0.5;
  /// Saturation rate of lesion amplitude, per day after onset.
  double lesion_growth_rate = 0.02;
  int onset_lead_days = 210;
  double noise_level = 0.05;
  std::uint64_t seed = 0;

  /// Throws ConfigError on invalid values.
  void validate() const;
  /// Number of converters generated for these params: round(fraction * N).
  Index converter_count() const;
};

void to_json(nlohmann::json& j, const CohortParams& p);
/// Missing keys keep their defaults; unknown keys are rejected.
void from_json(const nlohmann::json& j, CohortParams& p);

/// Visit schedule of one patient without volumes.
struct PatientPlan {
  std::string patient_id;
  std::vector<int> visit_days;
  std::optional<int> conversion_day;
  std::optional<LesionSite> lesion;
};

std::string patient_id_for(Index index);

/// Visit days, converter assignment, conversion days and lesion placement.
std::vector<PatientPlan> plan_cohort(const CohortParams& params);

/// Lesion amplitude at `visit_day`, zero earlier than the onset lead time
/// before conversion.
double lesion_amplitude_at(const CohortParams& params, int conversion_day, int visit_day);

std::vector<PatientTimeline> generate_cohort(const CohortParams& params);

struct LabelledExample {
  std::string patient_id;
  Index visit_index = 0;
  int visit_day = 0;
  int label = 0;
  Tensor<float> volume;  // preprocessed, filled by make_examples
};

/// Positive iff 0 < conversion_day - day <= window_days; scans on or after
/// conversion are dropped. `volume` is left empty.
std::vector<LabelledExample> label_scans(const PatientTimeline& timeline, int window_days = 183);

/// Shifts each column so the surface lands on `target_row`; vacated rows
/// are zero.
VolumeScan flatten_volume(const VolumeScan& v, Index target_row);

/// First slice of the central block of `n_slices` out of `total`.
Index central_block_start(Index total, Index n_slices);

/// Bilinear resize with half-pixel centers; same-size input is identity.
Tensor<float> resize_bilinear(const Tensor<float>& slice /* H x W */, Index out_h, Index out_w);

/// Central contiguous block, per-slice bilinear resize, per-volume min-max
/// to [0,1] (constant volume maps to 0). Output n_slices x out_h x out_w.
Tensor<float> preprocess_scan(const VolumeScan& v, Index n_slices, Index out_h, Index out_w);

struct PreprocessConfig {
  Index n_slices = 16;
  Index out_h = 32;
  Index out_w = 32;
  /// Flattening target; negative selects 3/10 of the raw height.
  Index target_row = -1;
  int window_days = 183;
};

void to_json(nlohmann::json& j, const PreprocessConfig& p);
void from_json(const nlohmann::json& j, PreprocessConfig& p);

/// Flattening followed by preprocess_scan with the configured geometry.
Tensor<float> preprocess_visit(const VolumeScan& raw, const PreprocessConfig& cfg);

/// Labels, flattens and preprocesses every eligible scan of the timelines.
std::vector<LabelledExample> make_examples(const std::vector<PatientTimeline>& cohort, const PreprocessConfig& cfg);

/// Preprocessed slice indices covered by a timeline's lesion.
std::vector<Index> lesion_slices_after_preprocess(const PatientTimeline& timeline, const PreprocessConfig& cfg);

struct AugmentPolicy {
  double p_translate = 0.5;
  double max_translate_frac = 0.05;
  double p_rotate = 0.5;
  double max_rotate_deg = 5.0;
  double p_flip = 0.5;

  static AugmentPolicy none() { return {0.0, 0.0, 0.0, 0.0, 0.0}; }
};
void to_json(nlohmann::json& j, const AugmentPolicy& p);
void from_json(const nlohmann::json& j, AugmentPolicy& p);

/// A concrete transform: rotation about the slice center, then integer
/// translation, then optional horizontal flip.
struct AugmentDraw {
  double rotate_deg = 0.0;
  int shift_x = 0;
  int shift_y = 0;
  bool flip = false;
};

AugmentDraw draw_augment(Rng& rng, const AugmentPolicy& policy, Index height, Index width);
/// Same transform on every slice of an S x H x W tensor; zero fill.
Tensor<float> apply_augment(const Tensor<float>& t, const AugmentDraw& draw);
Tensor<float> augment_scan(const Tensor<float>& t, Rng& rng, const AugmentPolicy& policy);

struct DatasetSplit {
  std::vector<std::string> holdout;
  std::vector<std::vector<std::string>> folds;
};

void to_json(nlohmann::json& j, const DatasetSplit& s);

/// Patient-level split stratified on the converter flag. Each non-empty
/// stratum must leave at least k patients for the folds.
DatasetSplit split_dataset(const std::vector<PatientTimeline>& patients, double holdout_frac = 0.2, int k = 4,
                           std::uint64_t seed = 0);

struct VisitPair {
  Index first = 0;
  Index second = 0;
  int delta_t_days = 0;
};

/// Two distinct visits drawn uniformly without replacement.
VisitPair sample_visit_pair(const PatientTimeline& timeline, Rng& rng);

inline constexpr int kCohortFormatVersion = 1;

/// Directory layout: cohort.json manifest, one subdirectory per patient,
/// per visit a little-endian float32 raw array and a JSON sidecar.
void write_cohort(const std::vector<PatientTimeline>& cohort, const CohortParams& params,
                  const std::filesystem::path& dir);
std::vector<PatientTimeline> read_cohort(const std::filesystem::path& dir, CohortParams* params = nullptr);

}  // namespace volmil

#endif  // VOLMIL_COHORT_HPP_
