#include "volmil/verify.hpp"

#include "volmil/binary_io.hpp"
#include "volmil/gradcheck.hpp"
#include "volmil/harness.hpp"
#include "volmil/pretrain.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <sstream>

namespace volmil {

namespace {

using Builder = std::function<Var<double>(Graph<double>&, const Var<double>&)>;

Tensor<double> normal_tensor(Shape shape, Rng& rng, double scale = 1.0, double offset = 0.0) {
  Tensor<double> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = offset + rng.normal(0.0, scale);
  return t;
}

Tensor<double> uniform_tensor(Shape shape, Rng& rng, double lo, double hi) {
  Tensor<double> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

CheckResult from_report(const std::string& name, const GradCheckReport& r, double tol) {
  CheckResult c{name, r.passed && r.checked > 0 && r.max_rel_error <= tol, r.max_rel_error, tol, ""};
  c.detail = std::to_string(r.checked) + " entries, " + std::to_string(r.skipped_nonsmooth) + " kink skips";
  if (!c.passed) c.detail += "; worst " + r.worst_entry;
  return c;
}

/// Loss = sum(op(x) * R) with a fixed random R so every output entry matters.
struct OpChecker {
  Rng rng{7};
  std::vector<CheckResult> out;

  void run(const std::string& name, double tol, ParameterStore<double>& store, const Tensor<double>& input,
           const std::function<Var<double>(Graph<double>&, const Var<double>&)>& op) {
    Tensor<double> probe;
    {
      Graph<double> g(Mode::train, 1);
      probe = op(g, g.constant(input)).value();
    }
    const Tensor<double> weights = normal_tensor(probe.shape(), rng);
    GradCheckConfig cfg;
    cfg.tolerance = tol;
    const auto r = grad_check(store, input, [&](Graph<double>& g, const Var<double>& x) {
      return sum_all(op(g, x) * g.constant(weights));
    }, cfg);
    out.push_back(from_report(name, r, tol));
  }

  void run(const std::string& name, double tol, const Tensor<double>& input,
           const std::function<Var<double>(Graph<double>&, const Var<double>&)>& op) {
    ParameterStore<double> none;
    run(name, tol, none, input, op);
  }
};

ModelSpec small_spec(Architecture a) {
  ModelSpec s = model_preset(a, "desk_scale");
  s.input = {4, 32, 32};
  s.transformer.drop_path = 0.0;
  return s;
}

double pairwise_auroc(const std::vector<double>& s, const std::vector<int>& y) {
  double wins = 0.0, pos = 0.0, neg = 0.0;
  for (int v : y) (v ? pos : neg) += 1.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
  return wins / (pos * neg);
}

// Cutoff sweep over the (score desc, index asc) ranking.
double cutoff_prauc(const std::vector<double>& s, const std::vector<int>& y) {
  const std::size_t n = s.size();
  std::vector<std::size_t> rank(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < n; ++j) ahead += s[j] > s[i] || (s[j] == s[i] && j < i);
    rank[i] = ahead;
  }
  double total = 0.0;
  for (int v : y) total += v;
  double ap = 0.0, prev = 0.0;
  for (std::size_t k = 1; k <= n; ++k) {
    double tp = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (rank[i] < k) tp += y[i];
    ap += (tp / total - prev) * tp / static_cast<double>(k);
    prev = tp / total;
  }
  return ap;
}

std::string directory_bytes(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += std::filesystem::relative(f, dir).string() + "\n" + read_binary_file(f);
  return all;
}

}  // namespace

bool SuiteResult::passed() const {
  return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

std::vector<CheckResult> gradient_op_checks() {
  OpChecker c;
  Rng& rng = c.rng;
  const double loose = 1e-5, tight = 1e-6;
  const Tensor<double> m35 = normal_tensor({3, 5}, rng);

  {
    ParameterStore<double> s;
    s.add("a", normal_tensor({3, 5}, rng));
    c.run("add", loose, s, m35, [&](Graph<double>& g, const Var<double>& x) { return x + g.param(s.at("a")); });
    c.run("subtract", loose, s, m35, [&](Graph<double>& g, const Var<double>& x) { return x - g.param(s.at("a")); });
    c.run("multiply", loose, s, m35, [&](Graph<double>& g, const Var<double>& x) { return x * g.param(s.at("a")); });
    c.run("concat_cols", loose, s, m35,
          [&](Graph<double>& g, const Var<double>& x) { return concat_cols<double>({x, g.param(s.at("a"))}); });
    c.run("concat_rows", loose, s, m35,
          [&](Graph<double>& g, const Var<double>& x) { return concat_rows<double>({g.param(s.at("a")), x}); });
  }
  c.run("scale", loose, m35, [](Graph<double>&, const Var<double>& x) { return scale(x, 1.7); });
  c.run("add_scalar", loose, m35, [](Graph<double>&, const Var<double>& x) { return square(add_scalar(x, 0.3)); });
  c.run("relu", loose, m35, [](Graph<double>&, const Var<double>& x) { return relu(x); });
  c.run("sigmoid", loose, m35, [](Graph<double>&, const Var<double>& x) { return sigmoid(x); });
  c.run("tanh", loose, m35, [](Graph<double>&, const Var<double>& x) { return tanh(x); });
  c.run("gelu", loose, m35, [](Graph<double>&, const Var<double>& x) { return gelu(x); });
  c.run("square", loose, m35, [](Graph<double>&, const Var<double>& x) { return square(x); });
  c.run("sqrt", loose, uniform_tensor({3, 5}, rng, 0.5, 2.0), [](Graph<double>&, const Var<double>& x) { return sqrt(x); });
  c.run("reshape", loose, m35, [](Graph<double>&, const Var<double>& x) { return square(reshape(x, Shape{5, 3})); });
  c.run("transpose", loose, m35, [](Graph<double>&, const Var<double>& x) { return square(transpose(x)); });
  c.run("slice_cols", loose, m35, [](Graph<double>&, const Var<double>& x) { return square(slice_cols(x, 1, 3)); });
  c.run("gather_rows", loose, m35,
        [](Graph<double>&, const Var<double>& x) { return square(gather_rows(x, {2, 0, 2, 1})); });
  c.run("gather", loose, m35,
        [](Graph<double>&, const Var<double>& x) { return square(gather(x, {14, 3, 3, 7, 0, 9}, Shape{2, 3})); });
  c.run("sum_all", loose, m35, [](Graph<double>&, const Var<double>& x) { return square(sum_all(x)); });
  c.run("mean_all", loose, m35, [](Graph<double>&, const Var<double>& x) { return square(mean_all(square(x))); });
  c.run("row_mean", loose, m35, [](Graph<double>&, const Var<double>& x) { return square(row_mean(x)); });
  c.run("col_mean", loose, m35, [](Graph<double>&, const Var<double>& x) { return square(col_mean(x)); });
  c.run("group_mean_rows", loose, normal_tensor({4, 3}, rng),
        [](Graph<double>&, const Var<double>& x) { return square(group_mean_rows(x, 2)); });
  {
    ParameterStore<double> s;
    s.add("row", normal_tensor({5}, rng));
    s.add("w", normal_tensor({3}, rng));
    c.run("add_row", loose, s, m35, [&](Graph<double>& g, const Var<double>& x) { return square(add_row(x, g.param(s.at("row")))); });
    c.run("scale_rows", loose, s, m35, [&](Graph<double>& g, const Var<double>& x) { return scale_rows(x, g.param(s.at("w"))); });
  }
  {
    ParameterStore<double> s;
    s.add("b", normal_tensor({5, 4}, rng));
    s.add("bt", normal_tensor({4, 5}, rng));
    s.add("bias", normal_tensor({4}, rng));
    c.run("matmul", tight, s, m35, [&](Graph<double>& g, const Var<double>& x) { return matmul(x, g.param(s.at("b"))); });
    c.run("matmul_nt", tight, s, m35, [&](Graph<double>& g, const Var<double>& x) { return matmul_nt(x, g.param(s.at("bt"))); });
    c.run("linear", tight, s, m35, [&](Graph<double>& g, const Var<double>& x) {
      Var<double> b = g.param(s.at("bias"));
      return linear(x, g.param(s.at("bt")), &b);
    });
    const std::pair<Activation, const char*> acts[] = {{Activation::none, "none"},
                                                       {Activation::relu, "relu"},
                                                       {Activation::gelu, "gelu"},
                                                       {Activation::sigmoid, "sigmoid"},
                                                       {Activation::tanh, "tanh"}};
    for (const auto& [act, act_name] : acts)
      c.run(std::string("dense_block/") + act_name, tight, s, m35, [&](Graph<double>& g, const Var<double>& x) {
        return dense_block(x, g.param(s.at("bt")), g.param(s.at("bias")), act);
      });
  }
  c.run("softmax_rows", loose, m35, [](Graph<double>&, const Var<double>& x) { return softmax_rows(x); });
  c.run("row_norm", loose, m35, [](Graph<double>&, const Var<double>& x) { return row_norm(x); });
  c.run("l2_normalize_rows", loose, m35, [](Graph<double>&, const Var<double>& x) { return l2_normalize_rows(x); });
  {
    ParameterStore<double> s;
    s.add("gamma", normal_tensor({3}, rng, 0.3, 1.0));
    s.add("beta", normal_tensor({3}, rng));
    s.add("ln_gamma", normal_tensor({5}, rng, 0.3, 1.0));
    s.add("ln_beta", normal_tensor({5}, rng));
    Tensor<double> mean({3}), var({3}, 1.0);
    c.run("batch_norm", loose, s, normal_tensor({4, 3, 2, 2}, rng), [&](Graph<double>& g, const Var<double>& x) {
      return batch_norm(x, g.param(s.at("gamma")), g.param(s.at("beta")), NormStats<double>{&mean, &var});
    });
    c.run("layer_norm", loose, s, m35, [&](Graph<double>& g, const Var<double>& x) {
      return layer_norm(x, g.param(s.at("ln_gamma")), g.param(s.at("ln_beta")));
    });
  }
  c.run("drop_path", loose, normal_tensor({8, 3}, rng),
        [](Graph<double>&, const Var<double>& x) { return square(drop_path(x, 0.5, 2)); });
  {
    ParameterStore<double> s;
    s.add("wq", normal_tensor({4, 4}, rng, 0.5));
    s.add("wk", normal_tensor({4, 4}, rng, 0.5));
    s.add("wv", normal_tensor({4, 4}, rng, 0.5));
    s.add("qkv_w", normal_tensor({12, 4}, rng, 0.5));
    s.add("qkv_b", normal_tensor({12}, rng, 0.1));
    s.add("out_w", normal_tensor({4, 4}, rng, 0.5));
    s.add("out_b", normal_tensor({4}, rng, 0.1));
    const Tensor<double> tokens = normal_tensor({6, 4}, rng);
    c.run("grouped_attention", loose, s, tokens, [&](Graph<double>& g, const Var<double>& x) {
      return grouped_attention(matmul_nt(x, g.param(s.at("wq"))), matmul_nt(x, g.param(s.at("wk"))),
                               matmul_nt(x, g.param(s.at("wv"))), 3, 2);
    });
    c.run("multi_head_attention", loose, s, tokens, [&](Graph<double>& g, const Var<double>& x) {
      return multi_head_attention(x, AttentionWeights<double>{g.param(s.at("qkv_w")), g.param(s.at("qkv_b")),
                                                              g.param(s.at("out_w")), g.param(s.at("out_b"))},
                                  3, 2);
    });
  }
  {
    ParameterStore<double> s;
    for (const char* d : {"f", "b"}) {
      s.add(std::string(d) + ".wx", normal_tensor({20, 6}, rng, 0.4));
      s.add(std::string(d) + ".wh", normal_tensor({20, 5}, rng, 0.4));
      s.add(std::string(d) + ".bias", normal_tensor({20}, rng, 0.4));
    }
    auto bind = [&](Graph<double>& g, const std::string& d) {
      return LstmWeights<double>{g.param(s.at(d + ".wx")), g.param(s.at(d + ".wh")), g.param(s.at(d + ".bias"))};
    };
    c.run("bilstm_forward", loose, s, normal_tensor({8, 6}, rng), [&](Graph<double>& g, const Var<double>& x) {
      return bilstm_forward(x, 2, 4, bind(g, "f"), bind(g, "b"));
    });
  }
  {
    ParameterStore<double> s;
    s.add("k2", normal_tensor({3, 2, 3, 3}, rng));
    s.add("k3", normal_tensor({2, 3, 3, 2, 3}, rng));
    c.run("conv2d", loose, s, normal_tensor({2, 2, 5, 5}, rng),
          [&](Graph<double>& g, const Var<double>& x) { return conv2d(x, g.param(s.at("k2")), 2, 1); });
    c.run("conv3d", loose, s, normal_tensor({1, 3, 4, 5, 4}, rng),
          [&](Graph<double>& g, const Var<double>& x) { return conv3d(x, g.param(s.at("k3")), {1, 2, 2}, {1, 1, 1}); });
  }
  const Tensor<double> map2 = normal_tensor({2, 2, 6, 6}, rng), map3 = normal_tensor({1, 2, 4, 5, 5}, rng);
  c.run("max_pool2d", loose, map2, [](Graph<double>&, const Var<double>& x) { return max_pool2d(x, 3, 2, 1); });
  c.run("avg_pool2d", loose, map2, [](Graph<double>&, const Var<double>& x) { return avg_pool2d(x, 3, 2, 1); });
  c.run("max_pool3d", loose, map3,
        [](Graph<double>&, const Var<double>& x) { return max_pool3d(x, {1, 3, 3}, {1, 2, 2}, {0, 1, 1}); });
  c.run("avg_pool3d", loose, map3,
        [](Graph<double>&, const Var<double>& x) { return avg_pool3d(x, {2, 3, 3}, {1, 2, 2}, {0, 1, 1}); });
  c.run("global_avg_pool", loose, map2, [](Graph<double>&, const Var<double>& x) { return global_avg_pool(x); });

  // Scalar losses are checked directly.
  auto scalar_case = [&](const std::string& name, double tol, const Tensor<double>& input, const Builder& loss) {
    ParameterStore<double> none;
    GradCheckConfig cfg;
    cfg.tolerance = tol;
    c.out.push_back(from_report(name, grad_check(none, input, loss, cfg), tol));
  };
  const std::vector<double> labels{1, 0, 0, 1, 0, 1};
  scalar_case("bce_with_logits", tight, normal_tensor({6}, rng, 2.0),
              [&](Graph<double>&, const Var<double>& x) { return bce_with_logits(x, labels, 2.5); });
  const std::vector<double> gaps{0, 90, 360, 720, 1000};
  for (bool normalize : {true, false}) {
    TincConfig cfg;
    cfg.normalize = normalize;
    cfg.margin_max = normalize ? 0.5 : 1.0;
    scalar_case(std::string("tinc_loss/") + (normalize ? "normalized" : "raw"), loose, normal_tensor({10, 4}, rng),
                [&, cfg](Graph<double>&, const Var<double>& x) {
                  return tinc_loss(gather_rows(x, {0, 1, 2, 3, 4}), gather_rows(x, {5, 6, 7, 8, 9}), gaps, cfg);
                });
  }
  return c.out;
}

std::vector<CheckResult> gradient_model_checks() {
  std::vector<CheckResult> out;
  for (Architecture a : {Architecture::cnn_bilstm, Architecture::cnn_transformer, Architecture::i3d,
                         Architecture::vivit_fsa}) {
    Model<double> m(small_spec(a), 40);
    Rng rng(41);
    GradCheckConfig cfg;
    cfg.max_entries_per_tensor = 6;
    cfg.tolerance = 1e-5;
    // Round-off of the central difference is about 1e-11; smaller gradients
    // are held to an absolute error of 1e-10.
    cfg.abs_floor = 1e-5;
    const Tensor<double> input = normal_tensor({2, 4, 32, 32}, rng);
    const std::vector<double> labels{1.0, 0.0};
    const auto r = grad_check(m.store(), input, [&](Graph<double>& g, const Var<double>& x) {
      return bce_with_logits(m.forward(g, x), labels, 2.0);
    }, cfg);
    out.push_back(from_report("model/" + to_string(a), r, cfg.tolerance));
  }
  return out;
}

std::vector<CheckResult> inflation_checks(bool perturb_kernel) {
  std::vector<CheckResult> out;
  {
    Index mismatches = 0, total = 0;
    for (Index depth : {1, 2, 3, 5, 7}) {
      Rng rng(static_cast<std::uint64_t>(depth));
      const auto k = normal_tensor({4, 3, 7, 7}, rng);
      const auto kd = inflate_kernel(k, depth);
      for (Index oi = 0; oi < 12; ++oi)
        for (Index p = 0; p < 49; ++p) {
          double sum = 0.0;
          for (Index d = 0; d < depth; ++d) sum += kd[(oi * depth + d) * 49 + p];
          mismatches += sum != k[oi * 49 + p];
          ++total;
        }
    }
    out.push_back({"inflate_kernel depth sums", mismatches == 0, static_cast<double>(mismatches), 0.0,
                   std::to_string(total) + " kernel entries over depths 1,2,3,5,7"});
  }

  const ModelSpec src_spec = model_preset(Architecture::cnn_bilstm, "desk_scale");
  const ModelSpec dst_spec = model_preset(Architecture::i3d, "desk_scale");
  Model<double> src(src_spec, 21), dst(dst_spec, 22);
  Rng rng(31);
  for (Buffer<double>* b : src.store().buffers()) {
    const bool is_var = b->name.size() > 3 && b->name.compare(b->name.size() - 3, 3, "var") == 0;
    for (Index i = 0; i < b->value.size(); ++i) b->value[i] = is_var ? rng.uniform(0.5, 2.0) : rng.normal(0.0, 0.3);
  }
  copy_encoder(src.store(), dst.store());
  if (perturb_kernel) {
    Tensor<double>& k = dst.store().at("encoder.stem.conv.weight").value;
    for (Index i = 0; i < k.size(); ++i) k[i] += 1e-3;
  }

  {
    Index mismatches = 0, tensors = 0;
    for (const Parameter<double>* p : src.store().parameters()) {
      if (p->name.rfind("encoder.", 0) != 0 || p->value.rank() != 4) continue;
      const Tensor<double>& k3 = dst.store().at(p->name).value;
      const Index depth = k3.dim(2), plane = p->value.dim(2) * p->value.dim(3);
      for (Index oi = 0; oi < p->value.dim(0) * p->value.dim(1); ++oi)
        for (Index q = 0; q < plane; ++q) {
          double sum = 0.0;
          for (Index d = 0; d < depth; ++d) sum += k3[(oi * depth + d) * plane + q];
          mismatches += sum != p->value[oi * plane + q];
        }
      ++tensors;
    }
    out.push_back({"transferred kernels depth-sum to the source", mismatches == 0, static_cast<double>(mismatches), 0.0,
                   std::to_string(tensors) + " convolution kernels"});
  }

  const Index B = 2, S = 16, H = 32, W = 32;
  Tensor<double> vol({B, S, H, W});
  for (Index b = 0; b < B; ++b)
    for (Index y = 0; y < H * W; ++y) {
      const double v = rng.uniform();
      for (Index s = 0; s < S; ++s) vol[(b * S + s) * H * W + y] = v;
    }
  Graph<double> g3(Mode::eval);
  const Tensor<double> f3 = dst.volumetric_features(g3, g3.constant(vol)).value();
  Tensor<double> slices({B, H, W});
  for (Index b = 0; b < B; ++b) std::copy_n(vol.data() + b * S * H * W, H * W, slices.data() + b * H * W);
  Graph<double> g2(Mode::eval);
  const Tensor<double> f2 = src.slice_features(g2, g2.constant(slices)).value();
  const Index C = f3.dim(1), D = f3.dim(2), HW = f3.dim(3) * f3.dim(4);
  // Depth receptive radius: stem 2 plus one per 3x3 block.
  const Index radius = 2 + 4;
  double worst = 0.0;
  for (Index b = 0; b < B; ++b)
    for (Index c = 0; c < C; ++c)
      for (Index d = radius; d < D - radius; ++d)
        for (Index p = 0; p < HW; ++p)
          worst = std::max(worst, std::abs(f3[((b * C + c) * D + d) * HW + p] - f2[(b * C + c) * HW + p]));
  out.push_back({"3D activations equal 2D at interior depths", worst <= 1e-6, worst, 1e-6,
                 "depths [" + std::to_string(radius) + "," + std::to_string(D - radius) + ") of " + std::to_string(D)});
  return out;
}

std::vector<CheckResult> metric_checks(int instances, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "verify.metrics"));
  Index auroc_mismatch = 0, monotone_mismatch = 0;
  double prauc_worst = 0.0;
  for (int t = 0; t < instances; ++t) {
    const auto n = static_cast<std::size_t>(2 + rng.below(199));
    const double p = rng.uniform(0.05, 0.95);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = t % 2 == 0 ? static_cast<double>(rng.below(8)) : rng.uniform();
      y[i] = rng.bernoulli(p) ? 1 : 0;
    }
    y[0] = 1;
    y[1] = 0;
    const double a = auroc(s, y);
    auroc_mismatch += a != pairwise_auroc(s, y);
    prauc_worst = std::max(prauc_worst, std::abs(prauc(s, y) - cutoff_prauc(s, y)));
    if (t % 2 == 0) {
      std::vector<double> e = s, f = s;
      for (double& v : e) v = std::exp(v);
      for (double& v : f) v = 3.0 * v - 7.0;
      monotone_mismatch += (auroc(e, y) != a) + (auroc(f, y) != a);
    }
  }
  const std::string n = std::to_string(instances) + " instances, N <= 200";
  return {{"auroc equals the pairwise oracle", auroc_mismatch == 0, static_cast<double>(auroc_mismatch), 0.0, n},
          {"prauc equals the cutoff sweep", prauc_worst <= 1e-12, prauc_worst, 1e-12, n},
          {"auroc invariant under exp and affine maps", monotone_mismatch == 0, static_cast<double>(monotone_mismatch),
           0.0, n}};
}

std::vector<CheckResult> determinism_checks(std::uint64_t seed) {
  std::vector<CheckResult> out;
  CohortParams params;
  params.patients = 6;
  params.visit_count = 4;
  params.height = 16;
  params.width = 16;
  params.seed = seed;
  const auto base = std::filesystem::temp_directory_path() / ("volmil_verify_" + std::to_string(seed));
  std::filesystem::remove_all(base);
  write_cohort(generate_cohort(params), params, base / "a");
  write_cohort(generate_cohort(params), params, base / "b");
  const bool same_cohort = directory_bytes(base / "a") == directory_bytes(base / "b");
  std::filesystem::remove_all(base);
  out.push_back({"cohort synthesis is byte-identical", same_cohort, same_cohort ? 0.0 : 1.0, 0.0, "two runs"});

  Rng rng(derive_seed(seed, "verify.toy"));
  std::vector<LabelledExample> examples;
  for (Index p = 0; p < 8; ++p) {
    LabelledExample e;
    e.patient_id = patient_id_for(p);
    e.label = p % 2;
    e.volume = Tensor<float>({4, 16, 16});
    for (Index i = 0; i < e.volume.size(); ++i) e.volume[i] = static_cast<float>(rng.uniform() + 0.5 * e.label);
    examples.push_back(std::move(e));
  }
  TrainConfig cfg = default_train_config(Architecture::cnn_bilstm);
  cfg.model.input = {4, 16, 16};
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.seed = seed;
  const std::vector<std::size_t> all{0, 1, 2, 3, 4, 5, 6, 7};
  std::string bytes[2], logs[2];
  for (int run = 0; run < 2; ++run) {
    TrainResult r = train_model(cfg, examples, all, all);
    bytes[run] = encode_checkpoint(snapshot(r.model.store(), nlohmann::json(r.model.spec())));
    logs[run] = log_json(r.log).dump();
  }
  const bool same = bytes[0] == bytes[1] && logs[0] == logs[1];
  out.push_back({"training checkpoints and logs are byte-identical", same, same ? 0.0 : 1.0, 0.0,
                 std::to_string(bytes[0].size()) + " checkpoint bytes"});
  return out;
}

std::vector<SuiteResult> run_verify(const VerifyOptions& options) {
  using Clock = std::chrono::steady_clock;
  std::vector<SuiteResult> suites;
  auto timed = [&](const std::string& name, const std::function<std::vector<CheckResult>()>& f) {
    const auto t0 = Clock::now();
    SuiteResult s{name, f(), 0.0};
    s.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    suites.push_back(std::move(s));
  };
  timed("gradients", [] {
    auto ops = gradient_op_checks();
    auto models = gradient_model_checks();
    ops.insert(ops.end(), models.begin(), models.end());
    return ops;
  });
  timed("inflation", [&] { return inflation_checks(options.perturb_inflation); });
  timed("metrics", [&] { return metric_checks(1000, options.seed); });
  timed("determinism", [&] { return determinism_checks(options.seed); });
  return suites;
}

std::string verify_text(const std::vector<SuiteResult>& suites) {
  std::ostringstream out;
  char buf[256];
  for (const SuiteResult& s : suites) {
    std::snprintf(buf, sizeof buf, "%s %s (%zu checks, %.1f s)\n", s.passed() ? "PASS" : "FAIL", s.name.c_str(),
                  s.checks.size(), s.seconds);
    out << buf;
    for (const CheckResult& c : s.checks)
      if (!c.passed) {
        std::snprintf(buf, sizeof buf, "  FAIL %s: %.3g > %.3g (", c.name.c_str(), c.value, c.bound);
        out << buf << c.detail << ")\n";
      }
  }
  return out.str();
}

}  // namespace volmil
