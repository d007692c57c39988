#include "doctest.h"

#include "volmil/gradcheck.hpp"
#include "volmil/layers.hpp"
#include "volmil/optim.hpp"

#include <cmath>
#include <numbers>

using namespace volmil;

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, scale);
  return t;
}

// Direct-summation cross-correlation, N x C x D x H x W.
Tensor<double> naive_conv3d(const Tensor<double>& x, const Tensor<double>& k, Triple s, Triple p) {
  const Index N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const Index O = k.dim(0), kd = k.dim(2), kh = k.dim(3), kw = k.dim(4);
  const Index Do = (D + 2 * p[0] - kd) / s[0] + 1, Ho = (H + 2 * p[1] - kh) / s[1] + 1,
              Wo = (W + 2 * p[2] - kw) / s[2] + 1;
  Tensor<double> y({N, O, Do, Ho, Wo});
  for (Index n = 0; n < N; ++n)
    for (Index o = 0; o < O; ++o)
      for (Index a = 0; a < Do; ++a)
        for (Index b = 0; b < Ho; ++b)
          for (Index e = 0; e < Wo; ++e) {
            double acc = 0;
            for (Index c = 0; c < C; ++c)
              for (Index i = 0; i < kd; ++i)
                for (Index j = 0; j < kh; ++j)
                  for (Index l = 0; l < kw; ++l) {
                    const Index zd = a * s[0] - p[0] + i, zh = b * s[1] - p[1] + j, zw = e * s[2] - p[2] + l;
                    if (zd < 0 || zd >= D || zh < 0 || zh >= H || zw < 0 || zw >= W) continue;
                    acc += x.at({n, c, zd, zh, zw}) * k.at({o, c, i, j, l});
                  }
            y.at({n, o, a, b, e}) = acc;
          }
  return y;
}

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Plain recurrence for one LSTM direction over a single sequence (S x D).
RowMatrix<double> naive_lstm(const RowMatrix<double>& seq, const Tensor<double>& wx, const Tensor<double>& wh,
                             const Tensor<double>& b, bool reverse) {
  const Index S = seq.rows(), H = wh.dim(1);
  RowMatrix<double> out(S, H);
  ColVector<double> h = ColVector<double>::Zero(H), c = ColVector<double>::Zero(H);
  for (Index k = 0; k < S; ++k) {
    const Index t = reverse ? S - 1 - k : k;
    ColVector<double> z = wx.matrix() * seq.row(t).transpose() + wh.matrix() * h + b.vec();
    for (Index u = 0; u < H; ++u) {
      const double i = sigm(z[u]), f = sigm(z[H + u]), g = std::tanh(z[2 * H + u]), o = sigm(z[3 * H + u]);
      c[u] = f * c[u] + i * g;
      h[u] = o * std::tanh(c[u]);
    }
    out.row(t) = h.transpose();
  }
  return out;
}

struct LstmFixture {
  ParameterStore<double> store;
  LstmFixture(Index D, Index H, Rng& rng) {
    for (const char* dir : {"fwd", "bwd"}) {
      store.add(std::string(dir) + ".wx", random_tensor({4 * H, D}, rng, 0.4));
      store.add(std::string(dir) + ".wh", random_tensor({4 * H, H}, rng, 0.4));
      store.add(std::string(dir) + ".b", random_tensor({4 * H}, rng, 0.4));
    }
  }
  LstmWeights<double> bind(Graph<double>& g, const std::string& dir) {
    return {g.param(store.at(dir + ".wx")), g.param(store.at(dir + ".wh")), g.param(store.at(dir + ".b"))};
  }
};

}  // namespace

TEST_SUITE("conv") {
  TEST_CASE("1x1 identity kernel reproduces the input") {
    Rng rng(3);
    Graph<double> g;
    auto x = g.constant(random_tensor({2, 3, 5, 4}, rng));
    Tensor<double> k({3, 3, 1, 1});
    for (Index c = 0; c < 3; ++c) k.at({c, c, 0, 0}) = 1.0;
    auto y = conv2d(x, g.constant(k), 1, 0);
    CHECK(y.value() == x.value());
  }

  TEST_CASE("2x2 all-ones kernel sums the input") {
    Graph<double> g;
    auto x = g.constant(Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4}));
    auto y = conv2d(x, g.constant(Tensor<double>({1, 1, 2, 2}, 1.0)), 1, 0);
    REQUIRE(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.value()[0] == 10.0);
  }

  TEST_CASE("output shape follows floor((in + 2p - k) / s) + 1") {
    Graph<float> g;
    auto x = g.constant(Tensor<float>({1, 3, 224, 224}));
    auto y = conv2d(x, g.constant(Tensor<float>({4, 3, 7, 7})), 2, 3);
    CHECK(y.shape() == Shape{1, 4, 112, 112});
  }

  TEST_CASE("conv2d and conv3d match direct summation") {
    Rng rng(11);
    Graph<double> g;
    auto x = random_tensor({3, 2, 5, 7, 6}, rng);
    auto k = random_tensor({4, 2, 3, 3, 2}, rng);
    auto y = conv3d(g.constant(x), g.constant(k), {2, 1, 2}, {1, 1, 0});
    CHECK(max_abs_diff(y.value(), naive_conv3d(x, k, {2, 1, 2}, {1, 1, 0})) < 1e-12);

    auto x2 = random_tensor({2, 3, 6, 6}, rng);
    auto k2 = random_tensor({5, 3, 3, 3}, rng);
    auto y2 = conv2d(g.constant(x2), g.constant(k2), 2, 1);
    auto ref = naive_conv3d(x2.reshaped({2, 3, 1, 6, 6}), k2.reshaped({5, 3, 1, 3, 3}), {1, 2, 2}, {0, 1, 1});
    CHECK(max_abs_diff(y2.value(), ref.reshaped(y2.shape())) < 1e-12);
  }

  TEST_CASE("depth-1 kernel equals conv2d on every depth slice") {
    Rng rng(5);
    Graph<double> g;
    auto x = random_tensor({1, 2, 4, 6, 6}, rng);
    auto k = random_tensor({3, 2, 1, 3, 3}, rng);
    auto y = conv3d(g.constant(x), g.constant(k), {1, 1, 1}, {0, 1, 1});
    for (Index d = 0; d < 4; ++d) {
      Tensor<double> slice({1, 2, 6, 6});
      for (Index c = 0; c < 2; ++c)
        for (Index h = 0; h < 6; ++h)
          for (Index w = 0; w < 6; ++w) slice.at({0, c, h, w}) = x.at({0, c, d, h, w});
      auto y2 = conv2d(g.constant(slice), g.constant(k.reshaped({3, 2, 3, 3})), 1, 1);
      for (Index o = 0; o < 3; ++o)
        for (Index h = 0; h < 6; ++h)
          for (Index w = 0; w < 6; ++w) CHECK(y.value().at({0, o, d, h, w}) == doctest::Approx(y2.value().at({0, o, h, w})).epsilon(1e-12));
    }
  }

  TEST_CASE("depth-constant input with valid depth extent gives equal output slices") {
    Rng rng(8);
    Graph<double> g;
    Tensor<double> x({1, 2, 6, 5, 5});
    auto base = random_tensor({2, 5, 5}, rng);
    for (Index c = 0; c < 2; ++c)
      for (Index d = 0; d < 6; ++d)
        for (Index h = 0; h < 5; ++h)
          for (Index w = 0; w < 5; ++w) x.at({0, c, d, h, w}) = base.at({c, h, w});
    auto y = conv3d(g.constant(x), g.constant(random_tensor({2, 2, 3, 3, 3}, rng)), {1, 1, 1}, {0, 1, 1});
    REQUIRE(y.dim(2) == 4);
    for (Index d = 1; d < 4; ++d)
      for (Index o = 0; o < 2; ++o)
        for (Index h = 0; h < 5; ++h)
          for (Index w = 0; w < 5; ++w)
            CHECK(std::abs(y.value().at({0, o, d, h, w}) - y.value().at({0, o, 0, h, w})) < 1e-12);
  }

  TEST_CASE("all-zero kernel gives all-zero output") {
    Rng rng(1);
    Graph<double> g;
    auto y = conv3d(g.constant(random_tensor({1, 2, 3, 4, 4}, rng)), g.constant(Tensor<double>({3, 2, 3, 3, 3})),
                    {1, 1, 1}, {1, 1, 1});
    CHECK(y.value().vec().cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("channel mismatch is rejected") {
    Graph<double> g;
    CHECK_THROWS_AS(conv2d(g.constant(Tensor<double>({1, 2, 4, 4})), g.constant(Tensor<double>({1, 3, 3, 3})), 1, 0),
                    ShapeError);
  }

  TEST_CASE("conv gradients pass finite differences") {
    Rng rng(21);
    ParameterStore<double> store;
    store.add("k2", random_tensor({3, 2, 3, 3}, rng));
    store.add("k3", random_tensor({2, 3, 3, 2, 3}, rng));
    auto weights2 = random_tensor({2, 3, 3, 3}, rng);
    auto r2 = grad_check(store, random_tensor({2, 2, 5, 5}, rng), [&](Graph<double>& g, const Var<double>& x) {
      auto y = conv2d(x, g.param(store.at("k2")), 2, 1);
      return sum_all(y * g.constant(weights2));
    });
    CHECK(r2.passed);
    CHECK(r2.max_rel_error <= 1e-5);
    auto weights3 = random_tensor({1, 2, 4, 3, 2}, rng);
    auto r3 = grad_check(store, random_tensor({1, 3, 4, 5, 4}, rng), [&](Graph<double>& g, const Var<double>& x) {
      auto y = conv3d(x, g.param(store.at("k3")), {1, 2, 2}, {1, 1, 1});
      return sum_all(y * g.constant(weights3));
    });
    CHECK(r3.passed);
    CHECK(r3.max_rel_error <= 1e-5);
  }
}

TEST_SUITE("dense") {
  TEST_CASE("identity weights and zero bias reproduce the input") {
    Rng rng(2);
    Graph<double> g;
    auto x = g.constant(random_tensor({3, 4}, rng));
    Tensor<double> eye({4, 4});
    eye.matrix().setIdentity();
    auto y = dense_block(x, g.constant(eye), g.constant(Tensor<double>({4})), Activation::none);
    CHECK(y.value() == x.value());
  }

  TEST_CASE("sigmoid of zero is one half") {
    Graph<double> g;
    auto y = sigmoid(g.constant(Tensor<double>({5})));
    for (Index i = 0; i < 5; ++i) CHECK(y.value()[i] == 0.5);
  }

  TEST_CASE("random dense layer matches a triple-loop oracle") {
    Rng rng(4);
    Graph<double> g;
    auto x = random_tensor({6, 5}, rng), w = random_tensor({7, 5}, rng), b = random_tensor({7}, rng);
    auto y = dense_block(g.constant(x), g.constant(w), g.constant(b), Activation::tanh);
    double worst = 0;
    for (Index i = 0; i < 6; ++i)
      for (Index o = 0; o < 7; ++o) {
        double acc = b[o];
        for (Index k = 0; k < 5; ++k) acc += x.at({i, k}) * w.at({o, k});
        worst = std::max(worst, std::abs(std::tanh(acc) - y.value().at({i, o})));
      }
    CHECK(worst <= 1e-12);
  }

  TEST_CASE("inner dimension mismatch is rejected") {
    Graph<double> g;
    CHECK_THROWS_AS(linear(g.constant(Tensor<double>({2, 3})), g.constant(Tensor<double>({4, 5}))), ShapeError);
  }

  TEST_CASE("dense_block gradients pass finite differences at 1e-6") {
    Rng rng(9);
    ParameterStore<double> store;
    store.add("w", random_tensor({4, 6}, rng));
    store.add("b", random_tensor({4}, rng));
    auto weights = random_tensor({3, 4}, rng);
    for (Activation act : {Activation::none, Activation::gelu, Activation::sigmoid, Activation::tanh, Activation::relu}) {
      auto r = grad_check(store, random_tensor({3, 6}, rng), [&](Graph<double>& g, const Var<double>& x) {
        return sum_all(dense_block(x, g.param(store.at("w")), g.param(store.at("b")), act) * g.constant(weights));
      }, {.tolerance = 1e-6});
      CHECK(r.passed);
      CHECK(r.max_rel_error <= 1e-6);
    }
  }
}

TEST_SUITE("pool") {
  TEST_CASE("global average of a constant map is that constant") {
    Graph<double> g;
    auto y = global_avg_pool(g.constant(Tensor<double>({1, 3, 4, 5}, 2.5)));
    REQUIRE(y.shape() == Shape{1, 3});
    for (Index i = 0; i < 3; ++i) CHECK(y.value()[i] == doctest::Approx(2.5).epsilon(1e-15));
  }

  TEST_CASE("2x2 max pool of [[1,2],[3,4]] is 4") {
    Graph<double> g;
    auto y = max_pool2d(g.constant(Tensor<double>({1, 1, 2, 2}, {1, 2, 3, 4})), 2, 2, 0);
    CHECK(y.value()[0] == 4.0);
  }

  TEST_CASE("global average pooling yields one value per channel") {
    Graph<float> g;
    auto y = global_avg_pool(g.constant(Tensor<float>({1, 2048, 7, 7})));
    CHECK(y.shape() == Shape{1, 2048});
  }

  TEST_CASE("windows larger than the input are rejected") {
    Graph<double> g;
    CHECK_THROWS_AS(max_pool2d(g.constant(Tensor<double>({1, 1, 2, 2})), 3, 1, 0), ShapeError);
    CHECK_THROWS_AS(avg_pool2d(g.constant(Tensor<double>({1, 1, 2, 2})), 4, 1, 0), ShapeError);
  }

  TEST_CASE("pooling gradients pass finite differences") {
    Rng rng(13);
    ParameterStore<double> store;
    auto w = random_tensor({1, 2, 3, 3}, rng);
    auto r = grad_check(store, random_tensor({1, 2, 5, 5}, rng), [&](Graph<double>& g, const Var<double>& x) {
      return sum_all(max_pool2d(x, 3, 2, 1) * g.constant(w)) + sum_all(avg_pool2d(x, 3, 2, 1) * g.constant(w)) +
             sum_all(global_avg_pool(x));
    });
    CHECK(r.passed);
  }
}

TEST_SUITE("bilstm") {
  TEST_CASE("paper_scale shapes: 32 x 2048 -> 32 x 1024") {
    Rng rng(1);
    Graph<float> g;
    auto seq = g.constant(Tensor<float>({32, 2048}, 0.01f));
    LstmWeights<float> f{g.constant(Tensor<float>({2048, 2048}, 0.001f)), g.constant(Tensor<float>({2048, 512}, 0.001f)),
                         g.constant(Tensor<float>({2048}))};
    auto y = bilstm_forward(seq, 1, 32, f, f);
    CHECK(y.shape() == Shape{32, 1024});
    CHECK(y.value().all_finite());
  }

  TEST_CASE("single step: both directions see the same input") {
    Rng rng(6);
    LstmFixture fx(3, 4, rng);
    Graph<double> g;
    auto x = random_tensor({1, 3}, rng);
    auto y = bilstm_forward(g.constant(x), 1, 1, fx.bind(g, "fwd"), fx.bind(g, "bwd"));
    auto ref_f = naive_lstm(x.matrix(), fx.store.at("fwd.wx").value, fx.store.at("fwd.wh").value, fx.store.at("fwd.b").value, false);
    auto ref_b = naive_lstm(x.matrix(), fx.store.at("bwd.wx").value, fx.store.at("bwd.wh").value, fx.store.at("bwd.b").value, false);
    CHECK((y.value().matrix().leftCols(4) - ref_f).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((y.value().matrix().rightCols(4) - ref_b).cwiseAbs().maxCoeff() < 1e-14);
  }

  TEST_CASE("matches the direct recurrence and mirrors under sequence reversal") {
    Rng rng(7);
    const Index S = 6, D = 5, H = 3;
    LstmFixture fx(D, H, rng);
    auto x = random_tensor({2 * S, D}, rng);  // two sequences
    Graph<double> g;
    auto y = bilstm_forward(g.constant(x), 2, S, fx.bind(g, "fwd"), fx.bind(g, "bwd"));
    for (Index b = 0; b < 2; ++b) {
      RowMatrix<double> seq = x.matrix().middleRows(b * S, S);
      auto ref_f = naive_lstm(seq, fx.store.at("fwd.wx").value, fx.store.at("fwd.wh").value, fx.store.at("fwd.b").value, false);
      auto ref_b = naive_lstm(seq, fx.store.at("bwd.wx").value, fx.store.at("bwd.wh").value, fx.store.at("bwd.b").value, true);
      CHECK((y.value().matrix().block(b * S, 0, S, H) - ref_f).cwiseAbs().maxCoeff() < 1e-13);
      CHECK((y.value().matrix().block(b * S, H, S, H) - ref_b).cwiseAbs().maxCoeff() < 1e-13);
    }
    // With identical weights in both directions, the forward half on the
    // reversed input equals the reversed backward half on the original.
    ParameterStore<double> tied;
    tied.add("wx", fx.store.at("fwd.wx").value);
    tied.add("wh", fx.store.at("fwd.wh").value);
    tied.add("b", fx.store.at("fwd.b").value);
    RowMatrix<double> seq = x.matrix().topRows(S);
    Tensor<double> rev({S, D});
    rev.matrix() = seq.colwise().reverse();
    Tensor<double> orig({S, D});
    orig.matrix() = seq;
    Graph<double> g2;
    LstmWeights<double> w{g2.param(tied.at("wx")), g2.param(tied.at("wh")), g2.param(tied.at("b"))};
    auto y_orig = bilstm_forward(g2.constant(orig), 1, S, w, w);
    auto y_rev = bilstm_forward(g2.constant(rev), 1, S, w, w);
    RowMatrix<double> back_reversed = y_orig.value().matrix().rightCols(H).colwise().reverse();
    CHECK((y_rev.value().matrix().leftCols(H) - back_reversed).cwiseAbs().maxCoeff() < 1e-14);
  }

  TEST_CASE("gradients pass finite differences (S=4, D=8, H=6)") {
    Rng rng(17);
    LstmFixture fx(8, 6, rng);
    auto weights = random_tensor({4, 12}, rng);
    auto r = grad_check(fx.store, random_tensor({4, 8}, rng), [&](Graph<double>& g, const Var<double>& x) {
      return sum_all(bilstm_forward(x, 1, 4, fx.bind(g, "fwd"), fx.bind(g, "bwd")) * g.constant(weights));
    });
    CHECK(r.passed);
    CHECK(r.max_rel_error <= 1e-5);
  }
}

TEST_SUITE("attention") {
  struct MhaFixture {
    ParameterStore<double> store;
    MhaFixture(Index D, Rng& rng) {
      store.add("qkv.w", random_tensor({3 * D, D}, rng, 0.5));
      store.add("qkv.b", random_tensor({3 * D}, rng, 0.5));
      store.add("out.w", random_tensor({D, D}, rng, 0.5));
      store.add("out.b", random_tensor({D}, rng, 0.5));
    }
    AttentionWeights<double> bind(Graph<double>& g) {
      return {g.param(store.at("qkv.w")), g.param(store.at("qkv.b")), g.param(store.at("out.w")),
              g.param(store.at("out.b"))};
    }
  };

  TEST_CASE("single token attends to itself: output is the projected value") {
    Rng rng(1);
    MhaFixture fx(4, rng);
    Graph<double> g;
    auto x = random_tensor({1, 4}, rng);
    AttentionMaps<double> maps;
    auto y = multi_head_attention(g.constant(x), fx.bind(g), 1, 2, &maps);
    for (const auto& m : maps.maps) CHECK(m(0, 0) == doctest::Approx(1.0));
    const auto& W = fx.store.at("qkv.w").value.matrix();
    const auto& B = fx.store.at("qkv.b").value.vec();
    ColVector<double> v = W.middleRows(8, 4) * x.vec() + B.segment(8, 4);
    ColVector<double> expect = fx.store.at("out.w").value.matrix() * v + fx.store.at("out.b").value.vec();
    CHECK((y.value().vec() - expect).cwiseAbs().maxCoeff() < 1e-12);
  }

  TEST_CASE("identical tokens give uniform attention rows") {
    Rng rng(2);
    MhaFixture fx(6, rng);
    Graph<double> g;
    Tensor<double> x({5, 6});
    auto row = random_tensor({6}, rng);
    for (Index t = 0; t < 5; ++t) x.matrix().row(t) = row.vec().transpose();
    AttentionMaps<double> maps;
    multi_head_attention(g.constant(x), fx.bind(g), 5, 3, &maps);
    for (const auto& m : maps.maps) CHECK((m.array() - 0.2).abs().maxCoeff() < 1e-14);
  }

  TEST_CASE("random 3-token case matches explicit QKV computation; rows sum to one") {
    Rng rng(3);
    const Index D = 4, T = 3, heads = 2, dh = 2;
    MhaFixture fx(D, rng);
    auto x = random_tensor({T, D}, rng);
    Graph<double> g;
    AttentionMaps<double> maps;
    auto y = multi_head_attention(g.constant(x), fx.bind(g), T, heads, &maps);
    const auto& W = fx.store.at("qkv.w").value.matrix();
    const auto& B = fx.store.at("qkv.b").value.vec();
    RowMatrix<double> concat(T, D);
    for (Index h = 0; h < heads; ++h) {
      for (Index i = 0; i < T; ++i) {
        std::vector<double> logits(T);
        for (Index j = 0; j < T; ++j) {
          double s = 0;
          for (Index u = 0; u < dh; ++u) {
            const Index col = h * dh + u;
            const double q = W.row(col).dot(x.matrix().row(i)) + B[col];
            const double k = W.row(D + col).dot(x.matrix().row(j)) + B[D + col];
            s += q * k;
          }
          logits[j] = s / std::sqrt(static_cast<double>(dh));
        }
        double z = 0;
        for (double l : logits) z += std::exp(l);
        double row_sum = 0;
        for (Index j = 0; j < T; ++j) row_sum += maps.at(0, h)(i, j);
        CHECK(std::abs(row_sum - 1.0) <= 1e-12);
        for (Index u = 0; u < dh; ++u) {
          const Index col = h * dh + u;
          double acc = 0;
          for (Index j = 0; j < T; ++j) {
            const double v = W.row(2 * D + col).dot(x.matrix().row(j)) + B[2 * D + col];
            acc += std::exp(logits[j]) / z * v;
          }
          concat(i, col) = acc;
        }
      }
    }
    RowMatrix<double> expect = concat * fx.store.at("out.w").value.matrix().transpose();
    expect.rowwise() += fx.store.at("out.b").value.vec().transpose();
    CHECK((y.value().matrix() - expect).cwiseAbs().maxCoeff() <= 1e-10);
  }

  TEST_CASE("width not divisible by head count is rejected") {
    Rng rng(4);
    MhaFixture fx(5, rng);
    Graph<double> g;
    CHECK_THROWS_AS(multi_head_attention(g.constant(random_tensor({2, 5}, rng)), fx.bind(g), 2, 2), ShapeError);
  }

  TEST_CASE("grouped attention gradients pass finite differences") {
    Rng rng(5);
    MhaFixture fx(4, rng);
    auto w = random_tensor({6, 4}, rng);
    auto r = grad_check(fx.store, random_tensor({6, 4}, rng), [&](Graph<double>& g, const Var<double>& x) {
      return sum_all(multi_head_attention(x, fx.bind(g), 3, 2) * g.constant(w));
    });
    CHECK(r.passed);
    CHECK(r.max_rel_error <= 1e-5);
  }
}

TEST_SUITE("norm_and_droppath") {
  TEST_CASE("drop path with rate 0 is the identity in training") {
    Rng rng(1);
    Graph<double> g(Mode::train, 3);
    auto x = g.constant(random_tensor({4, 3}, rng));
    CHECK(drop_path(x, 0.0, 2).value() == x.value());
  }

  TEST_CASE("drop path zeroes whole groups and rescales survivors") {
    Graph<double> g(Mode::train, 42);
    auto x = g.constant(Tensor<double>({400, 2}, 1.0));
    auto y = drop_path(x, 0.25, 4);
    Index dropped = 0;
    for (Index grp = 0; grp < 100; ++grp) {
      const double v = y.value().at({grp * 4, 0});
      for (Index r = 0; r < 4; ++r)
        for (Index c = 0; c < 2; ++c) CHECK(y.value().at({grp * 4 + r, c}) == v);
      if (v == 0.0) ++dropped;
      else CHECK(v == doctest::Approx(1.0 / 0.75));
    }
    CHECK(dropped > 10);
    CHECK(dropped < 45);
  }

  TEST_CASE("layer norm of a constant vector is zero before the affine") {
    Graph<double> g;
    auto y = layer_norm(g.constant(Tensor<double>({2, 5}, 3.0)), g.constant(Tensor<double>({5}, 1.0)),
                        g.constant(Tensor<double>({5})));
    CHECK(y.value().vec().cwiseAbs().maxCoeff() == 0.0);
  }

  TEST_CASE("evaluation mode is deterministic across calls") {
    Rng rng(2);
    auto x = random_tensor({8, 3}, rng);
    auto run = [&] {
      Graph<double> g(Mode::eval, rng.next_u64());
      return drop_path(layer_norm(g.constant(x), g.constant(Tensor<double>({3}, 1.0)), g.constant(Tensor<double>({3}))), 0.5, 2).value();
    };
    CHECK(run() == run());
  }

  TEST_CASE("normalization gradients pass finite differences") {
    Rng rng(19);
    ParameterStore<double> store;
    store.add("gamma", random_tensor({3}, rng));
    store.add("beta", random_tensor({3}, rng));
    Buffer<double>& rm = store.add_buffer("rm", Tensor<double>({3}));
    Buffer<double>& rv = store.add_buffer("rv", Tensor<double>({3}, 1.0));
    auto w = random_tensor({2, 3, 2, 2}, rng);
    auto bn = grad_check(store, random_tensor({2, 3, 2, 2}, rng), [&](Graph<double>& g, const Var<double>& x) {
      return sum_all(batch_norm(x, g.param(store.at("gamma")), g.param(store.at("beta")), {&rm.value, &rv.value}) *
                     g.constant(w));
    });
    CHECK(bn.passed);
    auto wl = random_tensor({4, 3}, rng);
    auto ln = grad_check(store, random_tensor({4, 3}, rng), [&](Graph<double>& g, const Var<double>& x) {
      return sum_all(layer_norm(x, g.param(store.at("gamma")), g.param(store.at("beta"))) * g.constant(wl));
    });
    CHECK(ln.passed);
  }

  TEST_CASE("batch norm eval uses running statistics") {
    Graph<double> g(Mode::eval);
    Tensor<double> mean({1}, 2.0), var({1}, 4.0);
    auto y = batch_norm(g.constant(Tensor<double>({2, 1, 1, 1}, {2.0, 4.0})), g.constant(Tensor<double>({1}, 1.0)),
                        g.constant(Tensor<double>({1})), {&mean, &var}, 0.0);
    CHECK(y.value()[0] == 0.0);
    CHECK(y.value()[1] == doctest::Approx(1.0));
  }
}

TEST_SUITE("bce") {
  TEST_CASE("logit 0, label 1 gives ln 2") {
    Graph<double> g;
    auto l = bce_with_logits(g.constant(Tensor<double>({1})), {1.0});
    CHECK(l.value()[0] == doctest::Approx(std::numbers::ln2).epsilon(1e-15));
  }

  TEST_CASE("large logits are stable") {
    Graph<double> g;
    auto l = bce_with_logits(g.constant(Tensor<double>({1}, 50.0)), {1.0});
    CHECK(std::isfinite(l.value()[0]));
    CHECK(l.value()[0] <= 1e-20);
    auto l2 = bce_with_logits(g.constant(Tensor<double>({2}, {-100.0, 100.0})), {1.0, 0.0});
    CHECK(l2.value()[0] == doctest::Approx(100.0));
  }

  TEST_CASE("labels outside {0,1} are rejected") {
    Graph<double> g;
    CHECK_THROWS_AS(bce_with_logits(g.constant(Tensor<double>({1})), {0.5}), std::invalid_argument);
  }

  TEST_CASE("gradient matches central differences at 1e-6") {
    Rng rng(23);
    ParameterStore<double> store;
    auto r = grad_check(store, random_tensor({7}, rng, 2.0), [&](Graph<double>&, const Var<double>& x) {
      return bce_with_logits(x, {1, 0, 0, 1, 0, 1, 1}, 3.5);
    }, {.tolerance = 1e-6});
    CHECK(r.passed);
    CHECK(r.max_rel_error <= 1e-6);
  }
}

TEST_SUITE("optimizer") {
  TEST_CASE("zero gradients and zero weight decay leave parameters unchanged") {
    for (auto kind : {OptimizerKind::adam, OptimizerKind::sgd_momentum}) {
      ParameterStore<double> store;
      store.add("w", Tensor<double>({3}, {1.0, -2.0, 0.5}));
      Optimizer<double> opt({.kind = kind, .learning_rate = 0.1});
      opt.step(store, 0.1);
      CHECK(store.at("w").value == Tensor<double>({3}, {1.0, -2.0, 0.5}));
      CHECK(opt.steps() == 1);
    }
  }

  TEST_CASE("Adam first step moves by lr * g / (|g| + eps)") {
    ParameterStore<double> store;
    auto& p = store.add("w", Tensor<double>({3}, {1.0, 1.0, 1.0}));
    p.grad = Tensor<double>({3}, {0.5, -2.0, 1e-3});
    Optimizer<double> opt({.kind = OptimizerKind::adam, .learning_rate = 0.01, .epsilon = 1e-8});
    opt.step(store, 0.01);
    const double g[3] = {0.5, -2.0, 1e-3};
    for (int i = 0; i < 3; ++i)
      CHECK(p.value[i] == doctest::Approx(1.0 - 0.01 * g[i] / (std::abs(g[i]) + 1e-8)).epsilon(1e-12));
    CHECK(p.grad.vec().isZero());
  }

  TEST_CASE("SGD with momentum 0 is plain gradient descent; weight decay adds to the gradient") {
    ParameterStore<double> store;
    auto& p = store.add("w", Tensor<double>({2}, {1.0, 2.0}));
    Optimizer<double> opt({.kind = OptimizerKind::sgd_momentum, .momentum = 0.0, .weight_decay = 0.1});
    for (int step = 0; step < 2; ++step) {
      p.grad = Tensor<double>({2}, {1.0, -1.0});
      const double w0 = p.value[0], w1 = p.value[1];
      opt.step(store, 0.5);
      CHECK(p.value[0] == doctest::Approx(w0 - 0.5 * (1.0 + 0.1 * w0)));
      CHECK(p.value[1] == doctest::Approx(w1 - 0.5 * (-1.0 + 0.1 * w1)));
    }
  }

  TEST_CASE("NaN gradient aborts the step and leaves parameters untouched") {
    ParameterStore<double> store;
    auto& p = store.add("encoder.w", Tensor<double>({2}, {1.0, 2.0}));
    p.grad = Tensor<double>({2}, {std::nan(""), 0.0});
    Optimizer<double> opt({});
    CHECK_THROWS_AS(opt.step(store, 0.1), NumericalError);
    CHECK(p.value == Tensor<double>({2}, {1.0, 2.0}));
    CHECK(opt.steps() == 0);
  }

  TEST_CASE("frozen parameters are not updated") {
    ParameterStore<double> store;
    auto& p = store.add("w", Tensor<double>({1}, {1.0}));
    p.trainable = false;
    p.grad = Tensor<double>({1}, {1.0});
    Optimizer<double> opt({.kind = OptimizerKind::sgd_momentum});
    opt.step(store, 1.0);
    CHECK(p.value[0] == 1.0);
  }
}

TEST_SUITE("cosine_lr") {
  TEST_CASE("endpoints and midpoint") {
    LRSchedule s{.base_lr = 1e-3, .min_lr = 0.0, .total_steps = 100};
    CHECK(cosine_lr(s, 0) == 1e-3);
    CHECK(cosine_lr(s, 100) == 0.0);
    CHECK(cosine_lr(s, 50) == doctest::Approx(5e-4).epsilon(1e-12));
    CHECK(cosine_lr(s, 250) == 0.0);
  }

  TEST_CASE("linear warmup then cosine from base_lr") {
    LRSchedule s{.base_lr = 1.0, .min_lr = 0.1, .total_steps = 20, .warmup_steps = 4};
    CHECK(cosine_lr(s, 2) == doctest::Approx(0.5));
    CHECK(cosine_lr(s, 4) == doctest::Approx(1.0));
    CHECK(cosine_lr(s, 12) == doctest::Approx(0.55));
  }

  TEST_CASE("invalid schedules are rejected") {
    CHECK_THROWS(cosine_lr({.base_lr = 1.0, .min_lr = 2.0, .total_steps = 10}, 0));
    CHECK_THROWS(cosine_lr({.base_lr = 1.0, .total_steps = 0}, 0));
  }
}

TEST_SUITE("grad_check") {
  TEST_CASE("active drop path is rejected as non-deterministic") {
    Rng rng(1);
    ParameterStore<double> store;
    CHECK_THROWS_AS(grad_check(store, random_tensor({64, 2}, rng),
                               [&](Graph<double>& g, const Var<double>& x) {
                                 // Fresh stream per call so repeated forwards differ.
                                 Graph<double>* gp = &g;
                                 static std::uint64_t counter = 0;
                                 gp->rng() = Rng(++counter);
                                 return sum_all(drop_path(x, 0.5, 1));
                               }),
                    std::logic_error);
  }

  TEST_CASE("a wrong backward rule is caught") {
    Rng rng(2);
    ParameterStore<double> store;
    auto r = grad_check(store, random_tensor({4}, rng), [&](Graph<double>& g, const Var<double>& x) {
      // value x^2 but recorded derivative 3x
      auto y = map_unary(x, [](double v) { return v * v; }, [](double v, double) { return 3.0 * v; });
      (void)g;
      return sum_all(y);
    });
    CHECK_FALSE(r.passed);
  }
}

TEST_CASE("32-bit and 64-bit forwards agree within 1e-4 relative") {
  Rng rng(31);
  auto x = random_tensor({2, 3, 8, 8}, rng);
  auto k = random_tensor({4, 3, 3, 3}, rng, 0.3);
  auto w = random_tensor({5, 4}, rng, 0.3);
  auto run = [&]<typename T>(T) {
    Graph<T> g;
    auto y = relu(conv2d(g.constant(x.template cast<T>()), g.constant(k.template cast<T>()), 1, 1));
    auto p = global_avg_pool(y);
    return sigmoid(linear(p, g.constant(w.template cast<T>()))).value().template cast<double>();
  };
  auto d = run(0.0);
  auto f = run(0.0f);
  for (Index i = 0; i < d.size(); ++i) CHECK(std::abs(d[i] - f[i]) <= 1e-4 * std::abs(d[i]));
}
