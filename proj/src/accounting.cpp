#include "volmil/accounting.hpp"

#include "volmil/conv.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

namespace volmil {

namespace {

using i64 = std::int64_t;

std::string dims(std::initializer_list<Index> d) {
  std::string s;
  for (Index v : d) s += (s.empty() ? "" : "x") + std::to_string(v);
  return s;
}

struct Planner {
  std::vector<LayerCost> rows;
  void add(std::string name, std::string kind, i64 params, i64 macs, std::string out) {
    rows.push_back({std::move(name), std::move(kind), params, macs, std::move(out)});
  }
};

/// Appends the encoder for one slice (2D) or one volume (3D, depth `depth`).
/// `repeat` multiplies MACs (slices per volume for the 2D path).
Index plan_encoder(Planner& pl, const ModelSpec& spec, bool volumetric, i64 repeat) {
  const EncoderSpec& e = spec.encoder;
  const Index depth = volumetric ? spec.input.slices : 1;
  const Index kd_stem = volumetric ? spec.inflation.stem_depth : 1;
  const Index kd3 = volumetric ? spec.inflation.conv3_depth : 1;
  Index h = conv_out_extent(spec.input.height, 7, 2, 3);
  Index w = conv_out_extent(spec.input.width, 7, 2, 3);
  auto shape = [&](Index c) { return volumetric ? dims({c, depth, h, w}) : dims({c, h, w}); };
  auto conv = [&](const std::string& name, Index cin, Index cout, Index kd, Index k) {
    const i64 params = static_cast<i64>(cout) * cin * kd * k * k;
    const i64 macs = params * depth * h * w * repeat;
    pl.add(name, volumetric ? "conv3d" : "conv2d", params, macs, shape(cout));
  };
  auto bn = [&](const std::string& name, Index c) { pl.add(name, "batch_norm", 2 * static_cast<i64>(c), 0, shape(c)); };

  conv("encoder.stem.conv", e.in_channels, e.stem_width, kd_stem, 7);
  bn("encoder.stem.bn", e.stem_width);
  h = conv_out_extent(h, 3, 2, 1);
  w = conv_out_extent(w, 3, 2, 1);
  pl.add("encoder.stem.pool", "max_pool", 0, 0, shape(e.stem_width));

  Index in = e.stem_width;
  for (std::size_t st = 0; st < e.widths.size(); ++st) {
    const Index width = e.widths[st];
    const Index out = width * e.expansion;
    for (Index b = 0; b < e.blocks[st]; ++b) {
      const std::string p = "encoder.layer" + std::to_string(st + 1) + "." + std::to_string(b) + ".";
      const Index stride = (st > 0 && b == 0) ? 2 : 1;
      conv(p + "conv1", in, width, 1, 1);
      bn(p + "bn1", width);
      h = conv_out_extent(h, 3, stride, 1);
      w = conv_out_extent(w, 3, stride, 1);
      conv(p + "conv2", width, width, kd3, 3);
      bn(p + "bn2", width);
      conv(p + "conv3", width, out, 1, 1);
      bn(p + "bn3", out);
      if (stride != 1 || in != out) {
        conv(p + "downsample.conv", in, out, 1, 1);
        bn(p + "downsample.bn", out);
      }
      in = out;
    }
  }
  pl.add("encoder.pool", "global_avg_pool", 0, 0, dims({in}));
  return in;
}

void plan_attention(Planner& pl, const std::string& name, Index tokens, Index groups, Index d) {
  const i64 rows = static_cast<i64>(tokens) * groups;
  const i64 params = 4 * static_cast<i64>(d) * d + 4 * static_cast<i64>(d);
  const i64 macs = rows * 4 * d * d + 2 * static_cast<i64>(groups) * tokens * tokens * d;
  pl.add(name, "attention", params, macs, dims({static_cast<Index>(rows), d}));
}

void plan_dense(Planner& pl, const std::string& name, Index rows, Index in, Index out) {
  pl.add(name, "dense", static_cast<i64>(in) * out + out, static_cast<i64>(rows) * in * out, dims({rows, out}));
}

void plan_norm(Planner& pl, const std::string& name, Index rows, Index d) {
  pl.add(name, "layer_norm", 2 * static_cast<i64>(d), 0, dims({rows, d}));
}

}  // namespace

std::vector<LayerCost> layer_plan(const ModelSpec& spec) {
  spec.validate();
  Planner pl;
  const Index S = spec.input.slices;
  switch (spec.arch) {
    case Architecture::cnn_bilstm: {
      const Index D = plan_encoder(pl, spec, false, S);
      const Index H = spec.bilstm.hidden;
      for (const char* dir : {"fwd", "bwd"})
        pl.add(std::string("aggregator.lstm.") + dir, "lstm", 4 * static_cast<i64>(H) * (D + H) + 4 * H,
               static_cast<i64>(S) * 4 * H * (D + H), dims({S, H}));
      const Index R = (S + spec.bilstm.se_reduction - 1) / spec.bilstm.se_reduction;
      plan_dense(pl, "aggregator.se.fc1", 1, S, R);
      plan_dense(pl, "aggregator.se.fc2", 1, R, S);
      plan_dense(pl, "head", 1, 2 * H, 1);
      break;
    }
    case Architecture::cnn_transformer: {
      const Index D = plan_encoder(pl, spec, false, S);
      const Index T = S + 1;
      const Index M = spec.transformer.mlp_dim;
      pl.add("aggregator.cls", "token", D, 0, dims({1, D}));
      if (spec.transformer.positional) pl.add("aggregator.pos", "embedding", static_cast<i64>(T) * D, 0, dims({T, D}));
      for (Index b = 0; b < spec.transformer.blocks; ++b) {
        const std::string p = "aggregator.block" + std::to_string(b) + ".";
        plan_norm(pl, p + "ln1", T, D);
        plan_attention(pl, p + "attn", T, 1, D);
        plan_norm(pl, p + "ln2", T, D);
        plan_dense(pl, p + "fc1", T, D, M);
        plan_dense(pl, p + "fc2", T, M, D);
      }
      plan_norm(pl, "aggregator.norm", T, D);
      plan_dense(pl, "head", 1, D, 1);
      break;
    }
    case Architecture::i3d: {
      const Index D = plan_encoder(pl, spec, true, 1);
      plan_dense(pl, "head", 1, D, 1);
      break;
    }
    case Architecture::vivit_fsa: {
      const VivitSpec& v = spec.vivit;
      const Index P = (spec.input.height / v.patch) * (spec.input.width / v.patch);
      const Index N = S * P;
      plan_dense(pl, "vivit.patch_embed", N, v.patch * v.patch, v.dim);
      pl.add("vivit.pos", "embedding", static_cast<i64>(N) * v.dim, 0, dims({N, v.dim}));
      for (Index b = 0; b < v.blocks; ++b) {
        const std::string p = "vivit.block" + std::to_string(b) + ".";
        plan_norm(pl, p + "ln_s", N, v.dim);
        plan_attention(pl, p + "attn_s", P, S, v.dim);
        plan_norm(pl, p + "ln_t", N, v.dim);
        plan_attention(pl, p + "attn_t", S, P, v.dim);
        plan_norm(pl, p + "ln_mlp", N, v.dim);
        plan_dense(pl, p + "fc1", N, v.dim, v.mlp_dim);
        plan_dense(pl, p + "fc2", N, v.mlp_dim, v.dim);
      }
      plan_norm(pl, "vivit.norm", 1, v.dim);
      plan_dense(pl, "head", 1, v.dim, 1);
      break;
    }
  }
  return pl.rows;
}

std::int64_t count_params(const ModelSpec& spec) {
  i64 n = 0;
  for (const auto& r : layer_plan(spec)) n += r.params;
  return n;
}

std::int64_t count_flops(const ModelSpec& spec) {
  i64 n = 0;
  for (const auto& r : layer_plan(spec)) n += r.macs;
  return n;
}

std::int64_t count_encoder_flops(const ModelSpec& spec) {
  i64 n = 0;
  for (const auto& r : layer_plan(spec))
    if (r.name.rfind("encoder.", 0) == 0) n += r.macs;
  return n;
}

nlohmann::json inspect_json(const ModelSpec& spec) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& r : layer_plan(spec))
    layers.push_back({{"name", r.name}, {"kind", r.kind}, {"params", r.params}, {"flops", r.macs}, {"output", r.output}});
  return {{"spec", spec},
          {"params", count_params(spec)},
          {"flops", count_flops(spec)},
          {"flop_convention", "one FLOP per multiply-accumulate"},
          {"layers", std::move(layers)}};
}

std::string inspect_text(const ModelSpec& spec) {
  const auto rows = layer_plan(spec);
  std::size_t wn = 5, wk = 4, wo = 6;
  for (const auto& r : rows) {
    wn = std::max(wn, r.name.size());
    wk = std::max(wk, r.kind.size());
    wo = std::max(wo, r.output.size());
  }
  std::ostringstream out;
  char line[512];
  std::snprintf(line, sizeof line, "%-*s  %-*s  %-*s  %14s  %18s\n", static_cast<int>(wn), "layer", static_cast<int>(wk),
                "kind", static_cast<int>(wo), "output", "params", "flops");
  out << line;
  out << std::string(wn + wk + wo + 14 + 18 + 8, '-') << "\n";
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-*s  %-*s  %-*s  %14lld  %18lld\n", static_cast<int>(wn), r.name.c_str(),
                  static_cast<int>(wk), r.kind.c_str(), static_cast<int>(wo), r.output.c_str(),
                  static_cast<long long>(r.params), static_cast<long long>(r.macs));
    out << line;
  }
  out << std::string(wn + wk + wo + 14 + 18 + 8, '-') << "\n";
  std::snprintf(line, sizeof line, "%-*s  %14lld  %18lld\n", static_cast<int>(wn + wk + wo + 4), "total",
                static_cast<long long>(count_params(spec)), static_cast<long long>(count_flops(spec)));
  out << line;
  const double flops = static_cast<double>(count_flops(spec));
  const bool giga = flops >= 1e9;
  std::snprintf(line, sizeof line, "arch %s, preset %s, input %lldx%lldx%lld, %.2fM params, %.2f%s FLOPs\n",
                to_string(spec.arch).c_str(), spec.preset.c_str(), static_cast<long long>(spec.input.slices),
                static_cast<long long>(spec.input.height), static_cast<long long>(spec.input.width),
                static_cast<double>(count_params(spec)) / 1e6, flops / (giga ? 1e9 : 1e6), giga ? "G" : "M");
  out << line;
  return out.str();
}

}  // namespace volmil
