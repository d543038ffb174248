#include <cmath>

#include <gtest/gtest.h>

#include "coattn/coattention.hpp"

using namespace coattn;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Direct xᵀWy per output element.
Tensor bilinear_oracle(const Tensor& fm, const Tensor& w, const Tensor& fn) {
  const std::size_t C = fm.dim(0), HW = fm.dim(1);
  Tensor p({HW, HW});
  for (std::size_t i = 0; i < HW; ++i)
    for (std::size_t j = 0; j < HW; ++j)
      for (std::size_t a = 0; a < C; ++a)
        for (std::size_t b = 0; b < C; ++b) p.at(i, j) += fm.at(a, i) * w.at(a, b) * fn.at(b, j);
  return p;
}

Tensor symmetric_part(const Tensor& w) {
  Tensor s(w.shape());
  for (std::size_t a = 0; a < w.dim(0); ++a)
    for (std::size_t b = 0; b < w.dim(1); ++b) s.at(a, b) = 0.5 * (w.at(a, b) + w.at(b, a));
  return s;
}

}  // namespace

TEST(Affinity, HandCases) {
  Graph g;
  Var i2 = g.constant(Tensor::identity(2));
  EXPECT_EQ(affinity(i2, i2, i2).value(), Tensor::identity(2));
  Rng rng(1);
  Var f = g.constant(random_tensor({3, 4}, rng));
  EXPECT_EQ(affinity(f, f, g.constant(Tensor({3, 3}))).value(), Tensor({4, 4}, 0.0));
}

TEST(Affinity, MatchesBilinearOracle) {
  Rng rng(2);
  for (int t = 0; t < 10; ++t) {
    const Tensor fm = random_tensor({3, 4}, rng), fn = random_tensor({3, 4}, rng);
    const Tensor w = random_tensor({3, 3}, rng);
    const Tensor sym = symmetric_part(w);
    Graph g;
    // Symmetric W: the plain product F_mᵀ W F_n.
    EXPECT_LT(max_abs_diff(affinity(g.constant(fm), g.constant(fn), g.constant(sym)).value(),
                           bilinear_oracle(fm, sym, fn)),
              1e-12);
    // General W: only the symmetric part contributes.
    EXPECT_LT(max_abs_diff(affinity(g.constant(fm), g.constant(fn), g.constant(w)).value(),
                           bilinear_oracle(fm, sym, fn)),
              1e-12);
  }
}

TEST(Affinity, SwapGivesExactTranspose) {
  Rng rng(3);
  const Tensor fm = random_tensor({5, 6}, rng), fn = random_tensor({5, 6}, rng), w = random_tensor({5, 5}, rng);
  Graph g;
  const Tensor p = affinity(g.constant(fm), g.constant(fn), g.constant(w)).value();
  const Tensor q = affinity(g.constant(fn), g.constant(fm), g.constant(w)).value();
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(p.at(i, j), q.at(j, i));
}

TEST(Affinity, ShapeErrors) {
  Graph g;
  EXPECT_THROW(affinity(g.constant(Tensor({3, 4})), g.constant(Tensor({3, 5})), g.constant(Tensor({3, 3}))),
               DimensionError);
  EXPECT_THROW(affinity(g.constant(Tensor({3, 4})), g.constant(Tensor({3, 4})), g.constant(Tensor({2, 2}))),
               DimensionError);
}

TEST(CoattentionMaps, ZeroAndLargeDiagonal) {
  Graph g;
  const auto z = coattention_maps(g.constant(Tensor({4, 4})));
  EXPECT_EQ(z.attn_m.value(), Tensor({4, 4}, 0.25));
  EXPECT_EQ(z.attn_n.value(), Tensor({4, 4}, 0.25));
  Tensor diag = Tensor::identity(3);
  for (auto& v : diag.data()) v *= 100.0;
  const auto d = coattention_maps(g.constant(diag));
  EXPECT_LT(max_abs_diff(d.attn_m.value(), Tensor::identity(3)), 1e-40);
  EXPECT_THROW(coattention_maps(g.constant(Tensor({3, 4}))), DimensionError);
}

TEST(CoattentionMaps, ColumnsAreDistributions) {
  Rng rng(4);
  for (int t = 0; t < 30; ++t) {
    Graph g;
    const auto maps = coattention_maps(g.constant(random_tensor({7, 7}, rng, -50, 50)));
    for (const Tensor* a : {&maps.attn_m.value(), &maps.attn_n.value()})
      for (std::size_t j = 0; j < 7; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < 7; ++i) s += a->at(i, j);
        EXPECT_NEAR(s, 1.0, 1e-9);
      }
  }
}

TEST(AttentionSummaries, IdentityAndUniform) {
  Rng rng(5);
  const Tensor fm = random_tensor({3, 4}, rng), fn = random_tensor({3, 4}, rng);
  Graph g;
  Var vm = g.constant(fm), vn = g.constant(fn);
  const auto id = attention_summaries(vm, vn, g.constant(Tensor::identity(4)), g.constant(Tensor::identity(4)), 2, 2);
  EXPECT_EQ(id.coatt_m.value(), fn.reshaped({3, 2, 2}));
  EXPECT_EQ(id.coatt_n.value(), fm.reshaped({3, 2, 2}));
  const auto u = attention_summaries(vm, vn, g.constant(Tensor({4, 4}, 0.25)), g.constant(Tensor({4, 4}, 0.25)), 2, 2);
  for (std::size_t c = 0; c < 3; ++c) {
    const double mean = (fn.at(c, 0) + fn.at(c, 1) + fn.at(c, 2) + fn.at(c, 3)) / 4.0;
    for (std::size_t p = 0; p < 4; ++p) EXPECT_NEAR(u.coatt_m.value()[c * 4 + p], mean, 1e-15);
  }
  EXPECT_THROW(attention_summaries(vm, vn, g.constant(Tensor::identity(4)), g.constant(Tensor::identity(4)), 3, 2),
               DimensionError);
}

TEST(AttentionSummaries, LoopOracleAndConvexEnvelope) {
  Rng rng(6);
  const std::size_t C = 3, HW = 6;
  const Tensor fm = random_tensor({C, HW}, rng), fn = random_tensor({C, HW}, rng);
  Graph g;
  const auto maps = coattention_maps(g.constant(random_tensor({HW, HW}, rng, -3, 3)));
  const auto s = attention_summaries(g.constant(fm), g.constant(fn), maps.attn_m, maps.attn_n, 2, 3);
  const Tensor& an = maps.attn_n.value();
  for (std::size_t c = 0; c < C; ++c) {
    double lo = 1e9, hi = -1e9;
    for (std::size_t i = 0; i < HW; ++i) lo = std::min(lo, fn.at(c, i)), hi = std::max(hi, fn.at(c, i));
    for (std::size_t j = 0; j < HW; ++j) {
      double ref = 0.0;
      for (std::size_t i = 0; i < HW; ++i) ref += fn.at(c, i) * an.at(i, j);
      const double got = s.coatt_m.value()[c * HW + j];
      EXPECT_NEAR(got, ref, 1e-14);
      EXPECT_GE(got, lo - 1e-12);
      EXPECT_LE(got, hi + 1e-12);
    }
  }
}

TEST(Gate, HandCasesAndOracle) {
  Rng rng(7);
  const Tensor f = random_tensor({4, 3, 3}, rng);
  Graph g;
  EXPECT_EQ(class_agnostic_gate(g.constant(f), g.constant(Tensor({1, 4}))).value(), Tensor({3, 3}, 0.5));

  const Tensor pick = Tensor::matrix({{0.0, 50.0, 0.0, 0.0}});
  const Tensor b = class_agnostic_gate(g.constant(f), g.constant(pick)).value();
  for (std::size_t p = 0; p < 9; ++p) EXPECT_EQ(b[p] > 0.5, f[9 + p] > 0.0);

  const Tensor w = random_tensor({1, 4}, rng);
  const Tensor r = class_agnostic_gate(g.constant(f), g.constant(w)).value();
  for (std::size_t p = 0; p < 9; ++p) {
    double dot = 0.0;
    for (std::size_t c = 0; c < 4; ++c) dot += w[c] * f[c * 9 + p];
    EXPECT_NEAR(r[p], 1.0 / (1.0 + std::exp(-dot)), 1e-15);
    EXPECT_GT(r[p], 0.0);
    EXPECT_LT(r[p], 1.0);
  }
  EXPECT_THROW(class_agnostic_gate(g.constant(f), g.constant(Tensor({1, 3}))), DimensionError);
  EXPECT_THROW(GateParams(Tensor({2, 4})), DimensionError);
}

TEST(ContrastiveAttention, Complement) {
  Graph g;
  EXPECT_EQ(contrastive_attention(g.constant(Tensor({2, 2}, 0.3))).value(), Tensor({2, 2}, 0.7));
  Rng rng(8);
  const Tensor b = random_tensor({3, 3}, rng, 0.0, 1.0);
  const Tensor c = contrastive_attention(g.constant(b)).value();
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(b[i] + c[i], 1.0);
  // Exact round trip needs b representable after 1 − (1 − b); dyadic values are.
  const Tensor d = Tensor::matrix({{0.25, 0.5}, {0.125, 0.0}});
  EXPECT_EQ(contrastive_attention(contrastive_attention(g.constant(d))).value(), d);
  EXPECT_THROW(contrastive_attention(g.constant(Tensor({2, 2}, 1.5))), ContractError);
  EXPECT_THROW(contrastive_attention(g.constant(Tensor({2, 2}, -0.1))), ContractError);
}

TEST(ContrastiveFeatures, OnesZerosAndOracle) {
  Rng rng(9);
  const Tensor f = random_tensor({2, 3, 3}, rng), a = random_tensor({3, 3}, rng, 0, 1);
  Graph g;
  EXPECT_EQ(contrastive_features(g.constant(f), g.constant(Tensor({3, 3}, 1.0))).value(), f);
  EXPECT_EQ(contrastive_features(g.constant(f), g.constant(Tensor({3, 3}, 0.0))).value(), Tensor({2, 3, 3}, 0.0));
  const Tensor out = contrastive_features(g.constant(f), g.constant(a)).value();
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t p = 0; p < 9; ++p) EXPECT_EQ(out[c * 9 + p], f[c * 9 + p] * a[p]);
  EXPECT_THROW(contrastive_features(g.constant(f), g.constant(Tensor({3, 2}))), DimensionError);
}

TEST(ForwardPair, IdenticalInputsAreSymmetric) {
  Rng rng(10);
  const Tensor f = random_tensor({4, 3, 3}, rng);
  Graph g;
  Var v = g.constant(f);
  const auto out = forward_pair(v, v, g.constant(random_tensor({4, 4}, rng)), g.constant(random_tensor({1, 4}, rng)));
  EXPECT_EQ(out.coatt_m.value(), out.coatt_n.value());
  EXPECT_EQ(out.gate_m.value(), out.gate_n.value());
  EXPECT_EQ(out.contrast_m.value(), out.contrast_n.value());
}

TEST(ForwardPair, SwappedArgumentsMirrorExactly) {
  Rng rng(11);
  for (int t = 0; t < 5; ++t) {
    const Tensor fm = random_tensor({4, 3, 3}, rng), fn = random_tensor({4, 3, 3}, rng);
    const Tensor w = random_tensor({4, 4}, rng), wb = random_tensor({1, 4}, rng);
    Graph g;
    const auto a = forward_pair(g.constant(fm), g.constant(fn), g.constant(w), g.constant(wb));
    const auto b = forward_pair(g.constant(fn), g.constant(fm), g.constant(w), g.constant(wb));
    EXPECT_EQ(a.attn_m.value(), b.attn_n.value());
    EXPECT_EQ(a.coatt_m.value(), b.coatt_n.value());
    EXPECT_EQ(a.coatt_n.value(), b.coatt_m.value());
    EXPECT_EQ(a.gate_m.value(), b.gate_n.value());
    EXPECT_EQ(a.contrast_m.value(), b.contrast_n.value());
    EXPECT_EQ(a.contrast_n.value(), b.contrast_m.value());
  }
}

TEST(ForwardPair, OutputShapesAndGateRange) {
  Rng rng(12);
  Graph g;
  const auto out = forward_pair(g.constant(random_tensor({4, 2, 3}, rng)), g.constant(random_tensor({4, 2, 3}, rng)),
                                g.constant(random_tensor({4, 4}, rng)), g.constant(random_tensor({1, 4}, rng)));
  EXPECT_EQ(out.attn_m.shape(), (Shape{6, 6}));
  EXPECT_EQ(out.coatt_m.shape(), (Shape{4, 2, 3}));
  EXPECT_EQ(out.gate_n.shape(), (Shape{2, 3}));
  for (double v : out.gate_m.value().data()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  EXPECT_THROW(forward_pair(g.constant(Tensor({4, 2, 3})), g.constant(Tensor({4, 3, 2})), g.constant(Tensor({4, 4})),
                            g.constant(Tensor({1, 4}))),
               DimensionError);
}

TEST(ForwardPair, DomainLookup) {
  Rng rng(13);
  const auto single = AffinityParams::init({"synth"}, 4, rng);
  ASSERT_EQ(single.by_pair.size(), 1u);
  const auto three = AffinityParams::init({"a", "b"}, 4, rng);
  EXPECT_EQ(three.by_pair.size(), 3u);
  EXPECT_EQ(&three.lookup("a", "b"), &three.lookup("b", "a"));
  EXPECT_THROW(three.lookup("a", "c"), ConfigError);
  EXPECT_LE(max_abs_diff(single.lookup("synth", "synth"), Tensor::identity(4)), 0.01);

  const Tensor fm = random_tensor({4, 2, 2}, rng), fn = random_tensor({4, 2, 2}, rng);
  Graph g;
  Var wb = g.constant(random_tensor({1, 4}, rng));
  std::map<std::string, Var> by_pair{{"synth|synth", g.constant(single.lookup("synth", "synth"))}};
  const auto via_lookup = forward_pair(g.constant(fm), g.constant(fn), "synth", "synth", by_pair, wb);
  const auto direct = forward_pair(g.constant(fm), g.constant(fn), by_pair.begin()->second, wb);
  EXPECT_EQ(via_lookup.coatt_m.value(), direct.coatt_m.value());
  EXPECT_THROW(forward_pair(g.constant(fm), g.constant(fn), "synth", "other", by_pair, wb), ConfigError);
}

TEST(ForwardPair, EndToEndGradient) {
  Rng rng(14);
  const Tensor fm = random_tensor({4, 4, 4}, rng), fn = random_tensor({4, 4, 4}, rng);
  const Tensor w = random_tensor({4, 4}, rng), wb = random_tensor({1, 4}, rng);
  auto readout = [](const CoAttnOutput& o) {
    return add(add(sum(o.coatt_m), sum(sigmoid(o.contrast_n))), add(sum(o.contrast_m), sum(o.gate_n)));
  };
  Graph g;
  std::vector<Var> in{g.parameter(fm), g.parameter(fn), g.parameter(w), g.parameter(wb)};
  g.backward(readout(forward_pair(in[0], in[1], in[2], in[3])));
  const std::vector<Tensor> xs{fm, fn, w, wb};
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const Tensor fd = finite_diff_grad([&](const Tensor& x) {
      std::vector<Tensor> ys = xs;
      ys[k] = x;
      Graph h;
      return readout(forward_pair(h.constant(ys[0]), h.constant(ys[1]), h.constant(ys[2]), h.constant(ys[3])))
          .value()
          .item();
    }, xs[k]);
    EXPECT_LT(max_relative_error(g.grad(in[k]), fd), 1e-4) << "input " << k;
  }
}
