#include "volmil/model_spec.hpp"

#include "volmil/errors.hpp"
#include "volmil/json_fields.hpp"
#include "volmil/rng.hpp"

namespace volmil {

using nlohmann::json;

std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::cnn_bilstm: return "cnn_bilstm";
    case Architecture::cnn_transformer: return "cnn_transformer";
    case Architecture::i3d: return "i3d";
    case Architecture::vivit_fsa: return "vivit_fsa";
  }
  return "unknown";
}

Architecture architecture_from_string(const std::string& name) {
  for (Architecture a : {Architecture::cnn_bilstm, Architecture::cnn_transformer, Architecture::i3d,
                         Architecture::vivit_fsa})
    if (to_string(a) == name) return a;
  throw ConfigError("unknown architecture '" + name + "'");
}

ModelSpec model_preset(Architecture arch, const std::string& preset) {
  ModelSpec s;
  s.arch = arch;
  s.preset = preset;
  if (preset == "paper_scale") {
    s.input = {32, 224, 224};
    s.encoder = {3, 64, {64, 128, 256, 512}, {3, 4, 6, 3}, 4};
    s.bilstm = {512, 4};
    s.transformer = {4, 2, 1024, 0.1, true};
    s.inflation = {5, 3};
    s.vivit = {16, 768, 4, 12, 3072};
  } else if (preset != "desk_scale") {
    throw ConfigError("unknown preset '" + preset + "' (expected paper_scale or desk_scale)");
  }
  return s;
}

void ModelSpec::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("model spec: " + what);
  };
  require(input.slices > 0 && input.height > 0 && input.width > 0, "input dims must be positive");
  if (uses_encoder()) {
    require(encoder.in_channels > 0 && encoder.stem_width > 0 && encoder.expansion > 0, "encoder dims must be positive");
    require(!encoder.widths.empty() && encoder.widths.size() == encoder.blocks.size(),
            "encoder widths and blocks must be non-empty and of equal length");
    for (std::size_t i = 0; i < encoder.widths.size(); ++i)
      require(encoder.widths[i] > 0 && encoder.blocks[i] > 0, "encoder stage widths and block counts must be positive");
  }
  switch (arch) {
    case Architecture::cnn_bilstm:
      require(bilstm.hidden > 0 && bilstm.se_reduction >= 1, "bilstm hidden must be positive and reduction >= 1");
      break;
    case Architecture::cnn_transformer:
      require(transformer.blocks > 0 && transformer.heads > 0 && transformer.mlp_dim > 0, "transformer dims must be positive");
      require(encoder.output_dim() % transformer.heads == 0, "token dim must be divisible by the head count");
      require(transformer.drop_path >= 0.0 && transformer.drop_path < 1.0, "drop path rate must be in [0,1)");
      break;
    case Architecture::i3d:
      require(inflation.stem_depth >= 1 && inflation.conv3_depth >= 1, "inflation depths must be >= 1");
      break;
    case Architecture::vivit_fsa:
      require(vivit.patch > 0 && vivit.dim > 0 && vivit.blocks > 0 && vivit.heads > 0 && vivit.mlp_dim > 0,
              "vivit dims must be positive");
      require(input.height % vivit.patch == 0 && input.width % vivit.patch == 0,
              "input height and width must be divisible by the patch size");
      require(vivit.dim % vivit.heads == 0, "vivit dim must be divisible by the head count");
      break;
  }
}

void to_json(json& j, const ModelSpec& s) {
  j = json::object();
  j["arch"] = to_string(s.arch);
  j["preset"] = s.preset;
  j["input"] = {{"slices", s.input.slices}, {"height", s.input.height}, {"width", s.input.width}};
  if (s.uses_encoder())
    j["encoder"] = {{"in_channels", s.encoder.in_channels}, {"stem_width", s.encoder.stem_width},
                    {"widths", s.encoder.widths},           {"blocks", s.encoder.blocks},
                    {"expansion", s.encoder.expansion}};
  switch (s.arch) {
    case Architecture::cnn_bilstm:
      j["bilstm"] = {{"hidden", s.bilstm.hidden}, {"se_reduction", s.bilstm.se_reduction}};
      break;
    case Architecture::cnn_transformer:
      j["transformer"] = {{"blocks", s.transformer.blocks},
                          {"heads", s.transformer.heads},
                          {"mlp_dim", s.transformer.mlp_dim},
                          {"drop_path", s.transformer.drop_path},
                          {"positional", s.transformer.positional}};
      break;
    case Architecture::i3d:
      j["inflation"] = {{"stem_depth", s.inflation.stem_depth}, {"conv3_depth", s.inflation.conv3_depth}};
      break;
    case Architecture::vivit_fsa:
      j["vivit"] = {{"patch", s.vivit.patch}, {"dim", s.vivit.dim}, {"blocks", s.vivit.blocks},
                    {"heads", s.vivit.heads}, {"mlp_dim", s.vivit.mlp_dim}};
      break;
  }
}

void from_json(const json& j, ModelSpec& s) {
  if (!j.is_object()) throw ConfigError("model: expected a JSON object");
  std::string arch = "cnn_bilstm", preset = "desk_scale";
  if (j.contains("arch")) arch = j.at("arch").get<std::string>();
  if (j.contains("preset")) preset = j.at("preset").get<std::string>();
  s = model_preset(architecture_from_string(arch), preset);
  json input = json::object(), encoder = json::object(), bilstm = json::object(), transformer = json::object(),
       inflation = json::object(), vivit = json::object();
  FieldReader(j, "model")
      .get("arch", arch)
      .get("preset", preset)
      .get("input", input)
      .get("encoder", encoder)
      .get("bilstm", bilstm)
      .get("transformer", transformer)
      .get("inflation", inflation)
      .get("vivit", vivit)
      .finish();
  FieldReader(input, "model.input")
      .get("slices", s.input.slices)
      .get("height", s.input.height)
      .get("width", s.input.width)
      .finish();
  FieldReader(encoder, "model.encoder")
      .get("in_channels", s.encoder.in_channels)
      .get("stem_width", s.encoder.stem_width)
      .get("widths", s.encoder.widths)
      .get("blocks", s.encoder.blocks)
      .get("expansion", s.encoder.expansion)
      .finish();
  FieldReader(bilstm, "model.bilstm").get("hidden", s.bilstm.hidden).get("se_reduction", s.bilstm.se_reduction).finish();
  FieldReader(transformer, "model.transformer")
      .get("blocks", s.transformer.blocks)
      .get("heads", s.transformer.heads)
      .get("mlp_dim", s.transformer.mlp_dim)
      .get("drop_path", s.transformer.drop_path)
      .get("positional", s.transformer.positional)
      .finish();
  FieldReader(inflation, "model.inflation")
      .get("stem_depth", s.inflation.stem_depth)
      .get("conv3_depth", s.inflation.conv3_depth)
      .finish();
  FieldReader(vivit, "model.vivit")
      .get("patch", s.vivit.patch)
      .get("dim", s.vivit.dim)
      .get("blocks", s.vivit.blocks)
      .get("heads", s.vivit.heads)
      .get("mlp_dim", s.vivit.mlp_dim)
      .finish();
  s.validate();
}

std::uint64_t spec_hash(const ModelSpec& s) { return fnv1a64(json(s).dump()); }

}  // namespace volmil
