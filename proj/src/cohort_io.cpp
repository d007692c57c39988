#include "volmil/cohort.hpp"

#include "volmil/binary_io.hpp"
#include "volmil/errors.hpp"

#include <cstdio>
#include <fstream>

namespace volmil {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string visit_stem(Index v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "visit_%03lld", static_cast<long long>(v));
  return buf;
}

json lesion_json(const std::optional<LesionSite>& l) {
  if (!l) return nullptr;
  return {{"first_slice", l->first_slice}, {"slice_count", l->slice_count}, {"center_col", l->center_col},
          {"depth_below_surface", l->depth_below_surface}};
}

std::optional<LesionSite> lesion_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  LesionSite l;
  l.first_slice = j.at("first_slice").get<Index>();
  l.slice_count = j.at("slice_count").get<Index>();
  l.center_col = j.at("center_col").get<double>();
  l.depth_below_surface = j.at("depth_below_surface").get<double>();
  return l;
}

}  // namespace

void write_cohort(const std::vector<PatientTimeline>& cohort, const CohortParams& params, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create cohort directory " + dir.string() + ": " + ec.message());
  json manifest;
  manifest["format_version"] = kCohortFormatVersion;
  manifest["seed"] = params.seed;
  manifest["params"] = params;
  json patients = json::array();
  for (const PatientTimeline& t : cohort) {
    const fs::path pdir = dir / t.patient_id;
    fs::create_directories(pdir, ec);
    if (ec) throw IoError("cannot create " + pdir.string() + ": " + ec.message());
    json conv = t.conversion_day ? json(*t.conversion_day) : json(nullptr);
    for (Index v = 0; v < static_cast<Index>(t.visits.size()); ++v) {
      const VolumeScan& scan = t.visits[static_cast<std::size_t>(v)];
      const std::string stem = visit_stem(v);
      write_binary_file(pdir / (stem + ".f32"), encode_f32_le(scan.voxels.data(), scan.voxels.size()));
      json surface = json::array();
      for (Index s = 0; s < scan.slices(); ++s) {
        json row = json::array();
        for (Index w = 0; w < scan.width(); ++w) row.push_back(scan.surface_at(s, w));
        surface.push_back(std::move(row));
      }
      const json sidecar = {{"dims", {scan.slices(), scan.height(), scan.width()}},
                            {"visit_day", scan.visit_day},
                            {"conversion_day", conv},
                            {"surface", std::move(surface)}};
      write_text_file(pdir / (stem + ".json"), sidecar.dump(1) + "\n");
    }
    patients.push_back({{"patient_id", t.patient_id},
                        {"conversion_day", conv},
                        {"lesion", lesion_json(t.lesion)},
                        {"visits", t.visits.size()}});
  }
  manifest["patients"] = std::move(patients);
  write_text_file(dir / "cohort.json", manifest.dump(2) + "\n");
}

std::vector<PatientTimeline> read_cohort(const fs::path& dir, CohortParams* params) {
  const fs::path manifest_path = dir / "cohort.json";
  json manifest;
  try {
    manifest = json::parse(read_text_file(manifest_path));
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  try {
    if (manifest.at("format_version").get<int>() != kCohortFormatVersion)
      throw IoError("unsupported cohort format version in " + manifest_path.string());
    if (params) *params = manifest.at("params").get<CohortParams>();
    std::vector<PatientTimeline> cohort;
    for (const json& p : manifest.at("patients")) {
      PatientTimeline t;
      t.patient_id = p.at("patient_id").get<std::string>();
      if (!p.at("conversion_day").is_null()) t.conversion_day = p.at("conversion_day").get<int>();
      t.lesion = lesion_from(p.at("lesion"));
      const auto n = p.at("visits").get<Index>();
      for (Index v = 0; v < n; ++v) {
        const fs::path base = dir / t.patient_id / visit_stem(v);
        const json side = json::parse(read_text_file(fs::path(base.string() + ".json")));
        const auto dims = side.at("dims").get<std::vector<Index>>();
        if (dims.size() != 3) throw IoError("bad dims in " + base.string() + ".json");
        VolumeScan scan;
        scan.visit_day = side.at("visit_day").get<int>();
        const std::string bytes = read_binary_file(fs::path(base.string() + ".f32"));
        scan.voxels = Tensor<float>({dims[0], dims[1], dims[2]});
        decode_f32_le(bytes, scan.voxels.data(), scan.voxels.size(), base.string() + ".f32");
        for (const json& row : side.at("surface"))
          for (const json& value : row) scan.surface.push_back(value.get<std::int32_t>());
        if (static_cast<Index>(scan.surface.size()) != dims[0] * dims[2])
          throw IoError("surface map size mismatch in " + base.string() + ".json");
        t.visits.push_back(std::move(scan));
      }
      cohort.push_back(std::move(t));
    }
    return cohort;
  } catch (const json::exception& e) {
    throw IoError("malformed cohort in " + dir.string() + ": " + e.what());
  }
}

}  // namespace volmil
