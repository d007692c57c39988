#include "volmil/cohort.hpp"

#include "volmil/errors.hpp"
#include "volmil/json_fields.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace volmil {

namespace {

constexpr float kSurfaceIntensity = 1.0f;
constexpr float kTissueCeiling = 0.9f;

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("cohort params: " + what);
}

struct Anatomy {
  double base_row = 0.0;
  double curvature = 0.0;
  double tilt = 0.0;
  double wobble_amp = 0.0;
  double wobble_phase = 0.0;
};

std::uint64_t patient_stream(const CohortParams& p, Index index, std::uint64_t purpose) {
  return derive_seed(derive_seed(p.seed, static_cast<std::uint64_t>(index)), purpose);
}

Anatomy draw_anatomy(const CohortParams& p, Rng& rng) {
  const double hs = static_cast<double>(p.height) / 36.0;
  Anatomy a;
  a.base_row = 0.3 * static_cast<double>(p.height) + rng.uniform(-2.0, 2.0) * hs;
  a.curvature = rng.uniform(1.0, 4.0) * hs;
  a.tilt = rng.uniform(-2.0, 2.0) * hs;
  a.wobble_amp = rng.uniform(0.0, 1.0) * hs;
  a.wobble_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  return a;
}

std::vector<std::int32_t> surface_map(const CohortParams& p, const Anatomy& a, int visit_shift) {
  std::vector<std::int32_t> surface(static_cast<std::size_t>(p.slices * p.width));
  const double half_w = 0.5 * static_cast<double>(p.width - 1);
  const auto max_row = static_cast<double>(p.height) * 0.6;
  for (Index s = 0; s < p.slices; ++s) {
    const double sf = (static_cast<double>(s) + 0.5) / static_cast<double>(p.slices) - 0.5;
    for (Index w = 0; w < p.width; ++w) {
      const double u = half_w > 0 ? (static_cast<double>(w) - half_w) / std::max(half_w, 1.0) : 0.0;
      double row = a.base_row + a.curvature * u * u + a.tilt * sf +
                   a.wobble_amp * std::sin(2.0 * std::numbers::pi * sf + a.wobble_phase) + visit_shift;
      row = std::clamp(std::round(row), 1.0, std::max(1.0, max_row));
      surface[static_cast<std::size_t>(s * p.width + w)] =
          static_cast<std::int32_t>(std::min<double>(row, static_cast<double>(p.height - 1)));
    }
  }
  return surface;
}

float tissue_intensity(double depth, double height) {
  if (depth < 0) return 0.05f;
  return static_cast<float>(0.15 + 0.45 * std::exp(-depth / (0.25 * height)) +
                            0.25 * std::exp(-std::pow(depth - 0.35 * height, 2) / (2.0 * std::pow(0.04 * height, 2))));
}

VolumeScan synthesize_visit(const CohortParams& p, Index patient, const PatientPlan& plan, const Anatomy& anatomy,
                            Index visit) {
  Rng rng(patient_stream(p, patient, 100 + static_cast<std::uint64_t>(visit)));
  VolumeScan v;
  v.visit_day = plan.visit_days[static_cast<std::size_t>(visit)];
  v.surface = surface_map(p, anatomy, rng.uniform_int(-1, 1));
  v.voxels = Tensor<float>({p.slices, p.height, p.width});
  const double H = static_cast<double>(p.height);
  double amp = 0.0;
  if (plan.conversion_day) amp = lesion_amplitude_at(p, *plan.conversion_day, v.visit_day);
  const double sigma_h = 1.2 * H / 36.0;
  const double sigma_w = static_cast<double>(p.width) / 12.0;
  for (Index s = 0; s < p.slices; ++s) {
    const bool lesion_slice = amp > 0.0 && plan.lesion && s >= plan.lesion->first_slice &&
                              s < plan.lesion->first_slice + plan.lesion->slice_count;
    for (Index h = 0; h < p.height; ++h) {
      for (Index w = 0; w < p.width; ++w) {
        const int surf = v.surface[static_cast<std::size_t>(s * p.width + w)];
        const double depth = static_cast<double>(h - surf);
        float value;
        if (h == surf) {
          value = kSurfaceIntensity;
        } else {
          double x = tissue_intensity(depth, H) + p.noise_level * rng.normal();
          if (lesion_slice && depth > 0) {
            const double dr = depth - plan.lesion->depth_below_surface;
            const double dc = static_cast<double>(w) - plan.lesion->center_col;
            x += amp * std::exp(-dr * dr / (2.0 * sigma_h * sigma_h) - dc * dc / (2.0 * sigma_w * sigma_w));
          }
          value = std::clamp(static_cast<float>(x), 0.0f, kTissueCeiling);
        }
        v.voxels[(s * p.height + h) * p.width + w] = value;
      }
    }
  }
  return v;
}

}  // namespace

void CohortParams::validate() const {
  require(patients > 0, "patient count must be positive");
  require(std::isfinite(converter_fraction) && converter_fraction >= 0.0 && converter_fraction <= 1.0,
          "converter fraction must be in [0,1]");
  require(visit_interval_days > 0 && visit_count > 0, "visit interval and count must be positive");
  require(conversion_day_min >= 0 && conversion_day_max >= conversion_day_min, "invalid conversion day range");
  require(slices > 0 && height >= 8 && width > 0, "volume dims must be positive (height >= 8)");
  require(lesion_slices >= 0 && lesion_slices <= lesion_window && lesion_window <= slices,
          "need 0 <= lesion slices <= lesion window <= slices");
  require(std::isfinite(lesion_amplitude) && lesion_amplitude >= 0.0, "lesion amplitude must be finite, >= 0");
  require(std::isfinite(lesion_growth_rate) && lesion_growth_rate > 0.0, "lesion growth rate must be finite, > 0");
  require(onset_lead_days > 0, "onset lead time must be positive");
  require(std::isfinite(noise_level) && noise_level >= 0.0, "noise level must be finite, >= 0");
}

Index CohortParams::converter_count() const {
  return static_cast<Index>(std::llround(converter_fraction * static_cast<double>(patients)));
}

void to_json(nlohmann::json& j, const CohortParams& p) {
  j = {{"patients", p.patients},
       {"converter_fraction", p.converter_fraction},
       {"visit_interval_days", p.visit_interval_days},
       {"visit_count", p.visit_count},
       {"conversion_day_min", p.conversion_day_min},
       {"conversion_day_max", p.conversion_day_max},
       {"slices", p.slices},
       {"height", p.height},
       {"width", p.width},
       {"lesion_slices", p.lesion_slices},
       {"lesion_window", p.lesion_window},
       {"lesion_amplitude", p.lesion_amplitude},
       {"lesion_growth_rate", p.lesion_growth_rate},
       {"onset_lead_days", p.onset_lead_days},
       {"noise_level", p.noise_level},
       {"seed", p.seed}};
}

void from_json(const nlohmann::json& j, CohortParams& p) {
  FieldReader(j, "cohort")
      .get("patients", p.patients)
      .get("converter_fraction", p.converter_fraction)
      .get("visit_interval_days", p.visit_interval_days)
      .get("visit_count", p.visit_count)
      .get("conversion_day_min", p.conversion_day_min)
      .get("conversion_day_max", p.conversion_day_max)
      .get("slices", p.slices)
      .get("height", p.height)
      .get("width", p.width)
      .get("lesion_slices", p.lesion_slices)
      .get("lesion_window", p.lesion_window)
      .get("lesion_amplitude", p.lesion_amplitude)
      .get("lesion_growth_rate", p.lesion_growth_rate)
      .get("onset_lead_days", p.onset_lead_days)
      .get("noise_level", p.noise_level)
      .get("seed", p.seed)
      .finish();
}

std::string patient_id_for(Index index) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "P%05lld", static_cast<long long>(index));
  return buf;
}

double lesion_amplitude_at(const CohortParams& params, int conversion_day, int visit_day) {
  const int onset = conversion_day - params.onset_lead_days;
  if (visit_day < onset) return 0.0;
  return params.lesion_amplitude * (1.0 - std::exp(-params.lesion_growth_rate * (visit_day - onset)));
}

std::vector<PatientPlan> plan_cohort(const CohortParams& params) {
  params.validate();
  std::vector<Index> order(static_cast<std::size_t>(params.patients));
  for (Index i = 0; i < params.patients; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng assign(derive_seed(params.seed, "converters"));
  assign.shuffle(order);
  std::vector<char> is_converter(order.size(), 0);
  for (Index c = 0; c < params.converter_count(); ++c) is_converter[static_cast<std::size_t>(order[static_cast<std::size_t>(c)])] = 1;

  const Index window_start = central_block_start(params.slices, params.lesion_window);
  std::vector<PatientPlan> plans(static_cast<std::size_t>(params.patients));
  for (Index i = 0; i < params.patients; ++i) {
    PatientPlan& plan = plans[static_cast<std::size_t>(i)];
    plan.patient_id = patient_id_for(i);
    for (int v = 0; v < params.visit_count; ++v) plan.visit_days.push_back(v * params.visit_interval_days);
    if (!is_converter[static_cast<std::size_t>(i)]) continue;
    Rng rng(patient_stream(params, i, 0));
    plan.conversion_day = rng.uniform_int(params.conversion_day_min, params.conversion_day_max);
    LesionSite site;
    site.slice_count = params.lesion_slices;
    site.first_slice = window_start + static_cast<Index>(rng.below(static_cast<std::uint64_t>(params.lesion_window - params.lesion_slices + 1)));
    site.center_col = rng.uniform(0.3, 0.7) * static_cast<double>(params.width - 1);
    site.depth_below_surface = rng.uniform(2.0, 4.0) * static_cast<double>(params.height) / 36.0;
    plan.lesion = site;
  }
  return plans;
}

std::vector<PatientTimeline> generate_cohort(const CohortParams& params) {
  const std::vector<PatientPlan> plans = plan_cohort(params);
  std::vector<PatientTimeline> cohort(plans.size());
  const auto n = static_cast<std::int64_t>(plans.size());
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < n; ++i) {
    const PatientPlan& plan = plans[static_cast<std::size_t>(i)];
    Rng anatomy_rng(patient_stream(params, i, 1));
    const Anatomy anatomy = draw_anatomy(params, anatomy_rng);
    PatientTimeline& t = cohort[static_cast<std::size_t>(i)];
    t.patient_id = plan.patient_id;
    t.conversion_day = plan.conversion_day;
    t.lesion = plan.lesion;
    for (Index v = 0; v < static_cast<Index>(plan.visit_days.size()); ++v)
      t.visits.push_back(synthesize_visit(params, i, plan, anatomy, v));
  }
  return cohort;
}

std::vector<LabelledExample> label_scans(const PatientTimeline& timeline, int window_days) {
  std::vector<LabelledExample> out;
  for (Index v = 0; v < static_cast<Index>(timeline.visits.size()); ++v) {
    const int day = timeline.visits[static_cast<std::size_t>(v)].visit_day;
    int label = 0;
    if (timeline.conversion_day) {
      const int gap = *timeline.conversion_day - day;
      if (gap <= 0) continue;
      label = gap <= window_days ? 1 : 0;
    }
    out.push_back({timeline.patient_id, v, day, label, {}});
  }
  return out;
}

VolumeScan flatten_volume(const VolumeScan& v, Index target_row) {
  const Index S = v.slices(), H = v.height(), W = v.width();
  if (target_row < 0 || target_row >= H) throw std::invalid_argument("flatten_volume: target_row outside [0, H)");
  if (static_cast<Index>(v.surface.size()) != S * W) throw ShapeError("flatten_volume: surface map must be S x W");
  VolumeScan out;
  out.visit_day = v.visit_day;
  out.voxels = Tensor<float>(v.voxels.shape());
  out.surface.assign(v.surface.size(), static_cast<std::int32_t>(target_row));
  for (Index s = 0; s < S; ++s)
    for (Index w = 0; w < W; ++w) {
      const Index shift = target_row - v.surface_at(s, w);
      for (Index h = 0; h < H; ++h) {
        const Index src = h - shift;
        if (src >= 0 && src < H) out.voxels[(s * H + h) * W + w] = v.at(s, src, w);
      }
    }
  return out;
}

Index central_block_start(Index total, Index n_slices) {
  if (n_slices > total || n_slices <= 0) throw std::invalid_argument("central block larger than the volume");
  return (total - n_slices) / 2;
}

Tensor<float> resize_bilinear(const Tensor<float>& slice, Index out_h, Index out_w) {
  const Index H = slice.dim(0), W = slice.dim(1);
  if (H == out_h && W == out_w) return slice;
  Tensor<float> out({out_h, out_w});
  auto coord = [](Index dst, Index in, Index outn, Index& lo, Index& hi, double& frac) {
    double src = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    lo = static_cast<Index>(std::floor(src));
    hi = std::min(lo + 1, in - 1);
    frac = src - static_cast<double>(lo);
  };
  for (Index y = 0; y < out_h; ++y) {
    Index y0, y1;
    double fy;
    coord(y, H, out_h, y0, y1, fy);
    for (Index x = 0; x < out_w; ++x) {
      Index x0, x1;
      double fx;
      coord(x, W, out_w, x0, x1, fx);
      const double top = (1 - fx) * slice[y0 * W + x0] + fx * slice[y0 * W + x1];
      const double bottom = (1 - fx) * slice[y1 * W + x0] + fx * slice[y1 * W + x1];
      out[y * out_w + x] = static_cast<float>((1 - fy) * top + fy * bottom);
    }
  }
  return out;
}

Tensor<float> preprocess_scan(const VolumeScan& v, Index n_slices, Index out_h, Index out_w) {
  if (n_slices > v.slices()) throw std::invalid_argument("preprocess_scan: n_slices exceeds slice count");
  const Index start = central_block_start(v.slices(), n_slices);
  const Index H = v.height(), W = v.width();
  Tensor<float> out({n_slices, out_h, out_w});
  for (Index s = 0; s < n_slices; ++s) {
    Tensor<float> slice({H, W});
    std::copy_n(v.voxels.data() + (start + s) * H * W, H * W, slice.data());
    const Tensor<float> r = resize_bilinear(slice, out_h, out_w);
    std::copy_n(r.data(), out_h * out_w, out.data() + s * out_h * out_w);
  }
  const float lo = out.vec().minCoeff(), hi = out.vec().maxCoeff();
  if (hi > lo) {
    out.vec() = (out.vec().array() - lo) / (hi - lo);
    out.vec() = out.vec().cwiseMax(0.0f).cwiseMin(1.0f);
  } else {
    out.fill(0.0f);
  }
  return out;
}

void to_json(nlohmann::json& j, const PreprocessConfig& p) {
  j = {{"n_slices", p.n_slices}, {"out_h", p.out_h}, {"out_w", p.out_w}, {"target_row", p.target_row},
       {"window_days", p.window_days}};
}

void from_json(const nlohmann::json& j, PreprocessConfig& p) {
  FieldReader(j, "preprocess")
      .get("n_slices", p.n_slices)
      .get("out_h", p.out_h)
      .get("out_w", p.out_w)
      .get("target_row", p.target_row)
      .get("window_days", p.window_days)
      .finish();
}

std::vector<LabelledExample> make_examples(const std::vector<PatientTimeline>& cohort, const PreprocessConfig& cfg) {
  std::vector<LabelledExample> out;
  std::vector<const PatientTimeline*> owner;
  for (const PatientTimeline& t : cohort)
    for (LabelledExample& e : label_scans(t, cfg.window_days)) {
      out.push_back(std::move(e));
      owner.push_back(&t);
    }
  const auto n = static_cast<std::int64_t>(out.size());
#pragma omp parallel for schedule(dynamic)
  for (std::int64_t i = 0; i < n; ++i) {
    LabelledExample& e = out[static_cast<std::size_t>(i)];
    const VolumeScan& raw = owner[static_cast<std::size_t>(i)]->visits[static_cast<std::size_t>(e.visit_index)];
    e.volume = preprocess_visit(raw, cfg);
  }
  return out;
}

Tensor<float> preprocess_visit(const VolumeScan& raw, const PreprocessConfig& cfg) {
  const Index target = cfg.target_row >= 0 ? cfg.target_row : raw.height() * 3 / 10;
  return preprocess_scan(flatten_volume(raw, target), cfg.n_slices, cfg.out_h, cfg.out_w);
}

std::vector<Index> lesion_slices_after_preprocess(const PatientTimeline& timeline, const PreprocessConfig& cfg) {
  std::vector<Index> out;
  if (!timeline.lesion || timeline.visits.empty()) return out;
  const Index start = central_block_start(timeline.visits.front().slices(), cfg.n_slices);
  for (Index s = timeline.lesion->first_slice; s < timeline.lesion->first_slice + timeline.lesion->slice_count; ++s)
    if (s >= start && s < start + cfg.n_slices) out.push_back(s - start);
  return out;
}

void to_json(nlohmann::json& j, const AugmentPolicy& p) {
  j = {{"p_translate", p.p_translate}, {"max_translate_frac", p.max_translate_frac}, {"p_rotate", p.p_rotate},
       {"max_rotate_deg", p.max_rotate_deg}, {"p_flip", p.p_flip}};
}

void from_json(const nlohmann::json& j, AugmentPolicy& p) {
  FieldReader(j, "augment")
      .get("p_translate", p.p_translate)
      .get("max_translate_frac", p.max_translate_frac)
      .get("p_rotate", p.p_rotate)
      .get("max_rotate_deg", p.max_rotate_deg)
      .get("p_flip", p.p_flip)
      .finish();
  for (double q : {p.p_translate, p.p_rotate, p.p_flip})
    if (q < 0.0 || q > 1.0) throw ConfigError("augment: probabilities must lie in [0,1]");
  if (p.max_translate_frac < 0.0 || p.max_translate_frac >= 0.5 || p.max_rotate_deg < 0.0)
    throw ConfigError("augment: need 0 <= max_translate_frac < 0.5 and max_rotate_deg >= 0");
}

AugmentDraw draw_augment(Rng& rng, const AugmentPolicy& policy, Index height, Index width) {
  AugmentDraw d;
  if (rng.bernoulli(policy.p_rotate)) d.rotate_deg = rng.uniform(-policy.max_rotate_deg, policy.max_rotate_deg);
  if (rng.bernoulli(policy.p_translate)) {
    const int mx = static_cast<int>(std::lround(policy.max_translate_frac * static_cast<double>(width)));
    const int my = static_cast<int>(std::lround(policy.max_translate_frac * static_cast<double>(height)));
    d.shift_x = rng.uniform_int(-mx, mx);
    d.shift_y = rng.uniform_int(-my, my);
  }
  d.flip = rng.bernoulli(policy.p_flip);
  return d;
}

Tensor<float> apply_augment(const Tensor<float>& t, const AugmentDraw& draw) {
  const Index S = t.dim(0), H = t.dim(1), W = t.dim(2);
  Tensor<float> cur = t;
  if (draw.rotate_deg != 0.0) {
    Tensor<float> rot(t.shape());
    const double a = draw.rotate_deg * std::numbers::pi / 180.0;
    const double c = std::cos(a), s = std::sin(a);
    const double cy = 0.5 * static_cast<double>(H - 1), cx = 0.5 * static_cast<double>(W - 1);
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) {
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        const double sy = c * dy - s * dx + cy, sx = s * dy + c * dx + cx;
        const double fy = std::floor(sy), fx = std::floor(sx);
        const auto y0 = static_cast<Index>(fy), x0 = static_cast<Index>(fx);
        const double wy = sy - fy, wx = sx - fx;
        for (Index sl = 0; sl < S; ++sl) {
          auto px = [&](Index yy, Index xx) -> double {
            if (yy < 0 || yy >= H || xx < 0 || xx >= W) return 0.0;
            return cur[(sl * H + yy) * W + xx];
          };
          const double v = (1 - wy) * ((1 - wx) * px(y0, x0) + wx * px(y0, x0 + 1)) +
                           wy * ((1 - wx) * px(y0 + 1, x0) + wx * px(y0 + 1, x0 + 1));
          rot[(sl * H + y) * W + x] = static_cast<float>(v);
        }
      }
    cur = std::move(rot);
  }
  if (draw.shift_x != 0 || draw.shift_y != 0) {
    Tensor<float> moved(t.shape());
    for (Index sl = 0; sl < S; ++sl)
      for (Index y = 0; y < H; ++y)
        for (Index x = 0; x < W; ++x) {
          const Index sy = y - draw.shift_y, sx = x - draw.shift_x;
          if (sy >= 0 && sy < H && sx >= 0 && sx < W) moved[(sl * H + y) * W + x] = cur[(sl * H + sy) * W + sx];
        }
    cur = std::move(moved);
  }
  if (draw.flip) {
    for (Index sl = 0; sl < S; ++sl)
      for (Index y = 0; y < H; ++y) {
        float* row = cur.data() + (sl * H + y) * W;
        std::reverse(row, row + W);
      }
  }
  return cur;
}

Tensor<float> augment_scan(const Tensor<float>& t, Rng& rng, const AugmentPolicy& policy) {
  return apply_augment(t, draw_augment(rng, policy, t.dim(1), t.dim(2)));
}

void to_json(nlohmann::json& j, const DatasetSplit& s) { j = {{"holdout", s.holdout}, {"folds", s.folds}}; }

DatasetSplit split_dataset(const std::vector<PatientTimeline>& patients, double holdout_frac, int k,
                           std::uint64_t seed) {
  if (k < 1) throw PreconditionError("split_dataset: k must be >= 1");
  if (!(holdout_frac >= 0.0 && holdout_frac < 1.0)) throw PreconditionError("split_dataset: holdout_frac must be in [0,1)");
  std::vector<std::string> conv, non;
  for (const PatientTimeline& p : patients) (p.converter() ? conv : non).push_back(p.patient_id);
  const auto N = static_cast<double>(patients.size());
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(conv);
  rng.shuffle(non);

  const auto n_hold = static_cast<std::size_t>(std::llround(holdout_frac * N));
  std::size_t hold_conv = std::min(conv.size(), static_cast<std::size_t>(std::llround(holdout_frac * static_cast<double>(conv.size()))));
  hold_conv = std::min(hold_conv, n_hold);
  std::size_t hold_non = std::min(non.size(), n_hold - hold_conv);
  hold_conv = std::min(conv.size(), n_hold - hold_non);

  const auto uk = static_cast<std::size_t>(k);
  for (const auto* stratum : {&conv, &non}) {
    const std::size_t held = stratum == &conv ? hold_conv : hold_non;
    if (!stratum->empty() && stratum->size() - held < uk)
      throw PreconditionError("split_dataset: fewer than k=" + std::to_string(k) + " " +
                              (stratum == &conv ? "converter" : "non-converter") + " patients left for folds");
  }

  DatasetSplit split;
  split.holdout.insert(split.holdout.end(), conv.begin(), conv.begin() + static_cast<std::ptrdiff_t>(hold_conv));
  split.holdout.insert(split.holdout.end(), non.begin(), non.begin() + static_cast<std::ptrdiff_t>(hold_non));
  std::sort(split.holdout.begin(), split.holdout.end());
  split.folds.assign(uk, {});
  std::size_t slot = 0;
  for (std::size_t i = hold_conv; i < conv.size(); ++i) split.folds[slot++ % uk].push_back(conv[i]);
  for (std::size_t i = hold_non; i < non.size(); ++i) split.folds[slot++ % uk].push_back(non[i]);
  for (auto& f : split.folds) std::sort(f.begin(), f.end());
  return split;
}

VisitPair sample_visit_pair(const PatientTimeline& timeline, Rng& rng) {
  const auto n = static_cast<std::uint64_t>(timeline.visits.size());
  if (n < 2) throw PreconditionError("sample_visit_pair: timeline " + timeline.patient_id + " has fewer than 2 visits");
  const auto a = static_cast<Index>(rng.below(n));
  auto b = static_cast<Index>(rng.below(n - 1));
  if (b >= a) ++b;
  const int dt = std::abs(timeline.visits[static_cast<std::size_t>(a)].visit_day -
                          timeline.visits[static_cast<std::size_t>(b)].visit_day);
  return {a, b, dt};
}

}  // namespace volmil
