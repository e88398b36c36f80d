#include <gtest/gtest.h>

#include <cmath>

#include "mbl/nn.hpp"

using namespace mbl;

namespace {

ParamSet scalar_net(float w1, float w2) {
  ParamSet p;
  p.add("n.w1", Tag::vision, Tensor::matrix(1, 1, {w1}));
  p.add("n.b1", Tag::vision, Tensor::vector({0}));
  p.add("n.w2", Tag::vision, Tensor::matrix(1, 1, {w2}));
  p.add("n.b2", Tag::vision, Tensor::vector({0}));
  return p;
}

const MlpSlice kScalar{"n", 2, false};

void add_random_mlp(ParamSet& p, Rng& rng, const std::string& prefix, Tag tag, std::size_t in, std::size_t hidden,
                    std::size_t out) {
  p.add(prefix + ".w1", tag, random_matrix(rng, hidden, in));
  Tensor b1 = Tensor::zeros({hidden});
  for (float& v : b1.data) v = static_cast<float>(rng.normal(0, 0.1));
  p.add(prefix + ".b1", tag, b1);
  p.add(prefix + ".w2", tag, random_matrix(rng, out, hidden));
  Tensor b2 = Tensor::zeros({out});
  for (float& v : b2.data) v = static_cast<float>(rng.normal(0, 0.1));
  p.add(prefix + ".b2", tag, b2);
}

std::vector<double> random_vec(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

}  // namespace

TEST(MlpForward, IdentityNetMapsZeroToZero) {
  ParamSet p;
  Tensor eye = Tensor::zeros({3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye.at(i, i) = 1.0f;
  p.add("n.w1", Tag::vision, eye);
  p.add("n.b1", Tag::vision, Tensor::zeros({3}));
  p.add("n.w2", Tag::vision, eye);
  p.add("n.b2", Tag::vision, Tensor::zeros({3}));
  const auto y = mlp_forward(p, kScalar, Tensor::zeros({3}));
  for (float v : y.data) EXPECT_EQ(v, 0.0f);
}

TEST(MlpForward, ScalarNetMatchesClosedForm) {
  const auto y = mlp_forward(scalar_net(1, 2), kScalar, Tensor::vector({0.5f}));
  EXPECT_NEAR(y.data[0], 2.0 * std::tanh(0.5), 1e-6);
  EXPECT_NEAR(y.data[0], 0.9242, 1e-4);
}

TEST(MlpForward, ProjectionOutputHasUnitNorm) {
  Rng prng(42), xrng(7);
  ParamSet p;
  add_random_mlp(p, prng, "h", Tag::vision, 16, 32, 16);
  const MlpSlice head{"h", 2, true};
  Tensor x = Tensor::zeros({16});
  for (float& v : x.data) v = static_cast<float>(xrng.normal());
  const auto y = mlp_forward(p, head, x);
  EXPECT_TRUE(y.all_finite());
  EXPECT_NEAR(l2_norm<float>(y.data), 1.0, 1e-6);
}

TEST(MlpForward, DimensionMismatchNamesTensor) {
  try {
    mlp_forward(scalar_net(1, 2), kScalar, Tensor::vector({1, 2}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("n.w1"), std::string::npos);
  }
}

TEST(MlpBackward, ZeroUpstreamGivesZeroGradients) {
  const auto g = mlp_backward(scalar_net(1, 2), kScalar, Tensor::vector({0.5f}), Tensor::vector({0.0f}));
  for (const auto& [_, p] : g) {
    for (float v : p.value.data) EXPECT_EQ(v, 0.0f);
  }
}

TEST(MlpBackward, ScalarChainRule) {
  const auto g = mlp_backward(scalar_net(1, 2), kScalar, Tensor::vector({0.5f}), Tensor::vector({1.0f}));
  EXPECT_NEAR(g.at("n.w2").data[0], std::tanh(0.5), 1e-6);
  EXPECT_NEAR(g.at("n.w2").data[0], 0.4621, 1e-4);
  const double sech2 = 1.0 - std::tanh(0.5) * std::tanh(0.5);
  EXPECT_NEAR(g.at("n.w1").data[0], 2.0 * sech2 * 0.5, 1e-6);
}

TEST(MlpBackward, FrozenEntriesAbsent) {
  const auto g = mlp_backward(scalar_net(1, 2), kScalar, Tensor::vector({0.5f}), Tensor::vector({1.0f}),
                              FreezeMask{Tag::vision});
  EXPECT_TRUE(g.empty());
}

TEST(MlpBackward, UpstreamWidthMismatch) {
  EXPECT_THROW(mlp_backward(scalar_net(1, 2), kScalar, Tensor::vector({0.5f}), Tensor::vector({1.0f, 2.0f})),
               ShapeError);
}

TEST(Gradcheck, LinearQuadraticIsExact) {
  // L(w) = (w x - t)^2 with x = 1.5, t = 0.25, w = 0.75; dL/dw = 2 (w x - t) x.
  ParamSet p;
  p.add("w", Tag::vision, Tensor::vector({0.75f}));
  ParamSet g;
  g.add("w", Tag::vision, Tensor::vector({static_cast<float>(2.0 * (0.75 * 1.5 - 0.25) * 1.5)}));
  auto loss = [](const ParamSet& q) {
    const double r = static_cast<double>(q.at("w").data[0]) * 1.5 - 0.25;
    return r * r;
  };
  EXPECT_LT(finite_diff_gradcheck(p, g, loss), 1e-6);
}

TEST(Gradcheck, RejectsZeroStep) {
  ParamSet p;
  p.add("w", Tag::vision, Tensor::vector({1}));
  GradcheckOptions opt;
  opt.eps = 0.0;
  EXPECT_THROW(finite_diff_gradcheck(p, p, [](const ParamSet&) { return 0.0; }, opt), PreconditionError);
}

TEST(Gradcheck, NonFiniteLossRaises) {
  ParamSet p;
  p.add("w", Tag::vision, Tensor::vector({1}));
  EXPECT_THROW(finite_diff_gradcheck(p, p, [](const ParamSet&) { return std::nan(""); }), NumericError);
}

TEST(Gradcheck, RandomTwoLayerNetUnderLinearProbe) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    ParamSet p;
    add_random_mlp(p, rng, "h", Tag::vision, 6, 8, 5);
    const MlpSlice head{"h", 2, true};
    const auto x = random_vec(rng, 6);
    const auto up = random_vec(rng, 5);
    auto loss = [&](const ParamSet& q) {
      const auto t = mlp_trace<double>(q, head, std::span<const double>(x));
      return dot<double>(t.output, up);
    };
    GradBuffer grads(p, FreezeMask::none());
    const auto t = mlp_trace<double>(p, head, std::span<const double>(x));
    mlp_backprop<double>(p, head, t, std::span<const double>(up), grads);
    EXPECT_LT(finite_diff_gradcheck(p, grads.to_params(), loss), 1e-4) << "seed " << seed;
  }
}

TEST(Gradcheck, ContrastiveTwoTowerBatchFour) {
  Rng rng(42);
  ParamSet p;
  add_random_mlp(p, rng, "img", Tag::vision, 6, 8, 4);
  add_random_mlp(p, rng, "txt", Tag::text, 5, 8, 4);
  const MlpSlice img{"img", 2, true}, txt{"txt", 2, true};
  std::vector<std::vector<double>> xs, ts;
  for (int i = 0; i < 4; ++i) {
    xs.push_back(random_vec(rng, 6));
    ts.push_back(random_vec(rng, 5));
  }
  auto forward = [&](const ParamSet& q, GradBuffer* grads) {
    std::vector<MlpTrace<double>> ti, tt;
    std::vector<Vec<double>> ei, et;
    for (int i = 0; i < 4; ++i) {
      ti.push_back(mlp_trace<double>(q, img, std::span<const double>(xs[i])));
      tt.push_back(mlp_trace<double>(q, txt, std::span<const double>(ts[i])));
      ei.push_back(ti.back().output);
      et.push_back(tt.back().output);
    }
    auto r = info_nce<double>(ei, et, 0.07);
    if (grads) {
      for (int i = 0; i < 4; ++i) {
        mlp_backprop<double>(q, img, ti[i], std::span<const double>(r.grad_image[i]), *grads);
        mlp_backprop<double>(q, txt, tt[i], std::span<const double>(r.grad_text[i]), *grads);
      }
    }
    return r.loss;
  };
  GradBuffer grads(p, FreezeMask::none());
  forward(p, &grads);
  EXPECT_LT(finite_diff_gradcheck(p, grads.to_params(), [&](const ParamSet& q) { return forward(q, nullptr); }),
            1e-4);
}

TEST(SgdStep, Arithmetic) {
  ParamSet p, g;
  p.add("w", Tag::vision, Tensor::vector({1.0f}));
  g.add("w", Tag::vision, Tensor::vector({0.5f}));
  EXPECT_FLOAT_EQ(sgd_step(p, g, 0.1f, FreezeMask::none()).at("w").data[0], 0.95f);
}

TEST(SgdStep, ZeroGradientsLeaveParamsBitwise) {
  Rng rng(1);
  ParamSet p;
  add_random_mlp(p, rng, "h", Tag::vision, 4, 4, 4);
  EXPECT_TRUE(bitwise_equal(sgd_step(p, p.zeros_like(), 0.1f, FreezeMask::none()), p));
}

TEST(SgdStep, UnknownGradientNameRejected) {
  ParamSet p, g;
  p.add("w", Tag::vision, Tensor::vector({1.0f}));
  g.add("x", Tag::vision, Tensor::vector({1.0f}));
  EXPECT_THROW(sgd_step(p, g, 0.1f, FreezeMask::none()), ConsistencyError);
}

TEST(SgdStep, FrozenTagsInvariantOverManySteps) {
  Rng rng(9);
  ParamSet p;
  add_random_mlp(p, rng, "v", Tag::vision, 4, 4, 4);
  add_random_mlp(p, rng, "t", Tag::text, 4, 4, 4);
  ParamSet g = p.zeros_like();
  for (auto& [_, e] : g) {
    for (float& v : e.value.data) v = static_cast<float>(rng.normal());
  }
  for (const FreezeMask& mask : {FreezeMask{Tag::text}, FreezeMask{Tag::vision}}) {
    ParamSet q = p;
    for (int i = 0; i < 50; ++i) q = sgd_step(q, g, 0.05f, mask);
    for (Tag t : mask.frozen_tags()) EXPECT_TRUE(tag_bitwise_equal(p, q, t));
  }
}

TEST(Cosine, Examples) {
  EXPECT_DOUBLE_EQ(cosine_similarity({1, 2, 3}, {1, 2, 3}), 1.0);
  EXPECT_DOUBLE_EQ(cosine_similarity({1, 0}, {0, 1}), 0.0);
  EXPECT_NEAR(cosine_similarity({1, 2, 3}, {4, 5, 6}), 32.0 / (std::sqrt(14.0) * std::sqrt(77.0)), 1e-12);
  EXPECT_NEAR(cosine_similarity({1, 2, 3}, {4, 5, 6}), 0.9746, 1e-4);
  EXPECT_THROW(cosine_similarity({0, 0}, {1, 0}), DegenerateError);
}

TEST(Cosine, ScaleInvariantAndBounded) {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    std::vector<float> a(8), b(8);
    for (auto& v : a) v = static_cast<float>(rng.normal());
    for (auto& v : b) v = static_cast<float>(rng.normal());
    const float c = static_cast<float>(rng.uniform(0.01, 100));
    std::vector<float> ca = a;
    for (auto& v : ca) v *= c;
    EXPECT_NEAR(cosine_similarity(a, ca), 1.0, 1e-6);
    const double s = cosine_similarity(a, b);
    EXPECT_GE(s, -1.0);
    EXPECT_LE(s, 1.0);
  }
}

TEST(InfoNce, UniformSimilaritiesGiveLogB) {
  const auto e = Tensor::matrix(4, 2, {1, 0, 1, 0, 1, 0, 1, 0});
  EXPECT_NEAR(info_nce_loss(e, e, 0.07f).loss, std::log(4.0), 1e-9);
}

TEST(InfoNce, MatchedOrthogonalPairsApproachZero) {
  Tensor e = Tensor::zeros({3, 3});
  for (std::size_t i = 0; i < 3; ++i) e.at(i, i) = 1.0f;
  const double loss = info_nce_loss(e, e, 0.01f).loss;
  EXPECT_GE(loss, 0.0);
  EXPECT_LT(loss, 1e-20);
}

TEST(InfoNce, BatchOfOneIsDegenerate) {
  const auto e = Tensor::matrix(1, 2, {1, 0});
  EXPECT_THROW(info_nce_loss(e, e, 0.07f), PreconditionError);
}

TEST(SoftmaxCrossEntropy, TwoEqualLogits) {
  Vec<double> d;
  EXPECT_NEAR(softmax_cross_entropy<double>(std::vector<double>{0.0, 0.0}, 0, &d), std::log(2.0), 1e-12);
  EXPECT_NEAR(d[0], -0.5, 1e-12);
  EXPECT_NEAR(d[1], 0.5, 1e-12);
}
