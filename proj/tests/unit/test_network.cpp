#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "../support/gradcheck.hpp"
#include "advlab/network.hpp"

using namespace advlab;
using advlab::testing::random_tensor;
using advlab::testing::Rng;

namespace {

// Scalar-loop reference for c_n = f(concat(l_n, g)) on one batch item.
std::vector<double> loop_scores(const TensorD& local, Index b, const TensorD& global, const TensorD* hidden_w,
                                const TensorD* hidden_b, const TensorD& out_w, double out_b) {
  const Index N = local.dim(1), D = local.dim(2), Dg = global.dim(1);
  std::vector<double> scores(std::size_t(N), 0.0);
  for (Index n = 0; n < N; ++n) {
    std::vector<double> z;
    for (Index d = 0; d < D; ++d) z.push_back(local[(b * N + n) * D + d]);
    for (Index d = 0; d < Dg; ++d) z.push_back(global[b * Dg + d]);
    if (hidden_w) {
      const Index H = hidden_w->dim(1);
      std::vector<double> h(std::size_t(H), 0.0);
      for (Index j = 0; j < H; ++j) {
        double acc = (*hidden_b)[j];
        for (std::size_t i = 0; i < z.size(); ++i) acc += z[i] * (*hidden_w)[Index(i) * H + j];
        h[std::size_t(j)] = std::max(acc, 0.0);
      }
      z = h;
    }
    double c = out_b;
    for (std::size_t i = 0; i < z.size(); ++i) c += z[i] * out_w[Index(i)];
    scores[std::size_t(n)] = c;
  }
  return scores;
}

struct PoolFixture {
  Tape<double> tape;
  Var<double> local;
  Var<double> scores;
};

}  // namespace

TEST(Network, MnistZeroImageGivesUniformSoftmax) {
  auto net = build_mnist_cnn<double>(false, 11);
  TensorD logits = net.logits(TensorD({2, 1, 28, 28}));
  ASSERT_EQ(logits.shape(), (Shape{2, 10}));
  for (Index i = 1; i < logits.size(); ++i) EXPECT_EQ(logits[i], logits[0]);
  Tape<double> tape;
  auto p = softmax(tape.constant(logits));
  for (Index i = 0; i < p.value().size(); ++i) EXPECT_NEAR(p.value()[i], 0.1, 1e-12);
}

TEST(Network, MnistParameterCountMatchesHandCount) {
  // conv 5x5 1->32, conv 5x5 32->64, dense 7*7*64->1024, dense 1024->10
  const Index conv1 = 1 * 32 * 5 * 5 + 32;
  const Index conv2 = 32 * 64 * 5 * 5 + 64;
  const Index fc1 = 7 * 7 * 64 * 1024 + 1024;
  const Index fc2 = 1024 * 10 + 10;
  ASSERT_EQ(conv1 + conv2 + fc1 + fc2, 3274634);
  EXPECT_EQ(build_mnist_cnn<float>(false, 0).parameter_count(), 3274634);
}

TEST(Network, MnistAttentionWeightsCoverLastConvGrid) {
  Rng rng(5);
  auto net = build_mnist_cnn<double>(true, 2);
  ASSERT_EQ(net.local_grid(), std::make_pair(Index(7), Index(7)));
  TensorD x({3, 1, 28, 28});
  for (Index i = 0; i < x.size(); ++i) x[i] = advlab::testing::uniform(rng, 0.0, 1.0);
  Tape<double> tape;
  auto out = net.forward(tape, tape.constant(x));
  ASSERT_TRUE(out.attention_weights);
  const TensorD& w = out.attention_weights->value();
  ASSERT_EQ(w.shape(), (Shape{3, 49}));
  ASSERT_EQ(out.local_features->shape(), (Shape{3, 49, 64}));
  ASSERT_EQ(out.global_feature.shape(), (Shape{3, 1024}));
  ASSERT_EQ(out.logits.shape(), (Shape{3, 10}));
  const TensorD& l = out.local_features->value();
  for (Index b = 0; b < 3; ++b) {
    double total = 0.0;
    for (Index n = 0; n < 49; ++n) {
      EXPECT_GE(w[b * 49 + n], 0.0);
      total += w[b * 49 + n];
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
    for (Index d = 0; d < 64; ++d) {
      double h = 0.0;
      for (Index n = 0; n < 49; ++n) h += w[b * 49 + n] * l[(b * 49 + n) * 64 + d];
      EXPECT_NEAR(out.descriptor.value()[b * 64 + d], h, 1e-12);
    }
  }
}

TEST(Network, MiniResnetHas64Locations) {
  Rng rng(8);
  TensorD x = random_tensor(rng, {2, 3, 32, 32});
  for (bool attention : {false, true}) {
    auto net = build_mini_resnet<double>(attention, {8, 8, 16, 32}, 4);
    ASSERT_EQ(net.local_grid(), std::make_pair(Index(8), Index(8)));
    Tape<double> tape;
    auto out = net.forward(tape, tape.constant(x));
    ASSERT_EQ(out.local_features->shape(), (Shape{2, 64, 32}));
    ASSERT_EQ(out.logits.shape(), (Shape{2, 10}));
    if (attention) {
      ASSERT_EQ(out.global_feature.shape(), (Shape{2, 32}));
      const TensorD& w = out.attention_weights->value();
      for (Index b = 0; b < 2; ++b) {
        double total = 0.0;
        for (Index n = 0; n < 64; ++n) total += w[b * 64 + n];
        EXPECT_NEAR(total, 1.0, 1e-6);
      }
    } else {
      EXPECT_FALSE(out.attention_weights);
      const TensorD& l = out.local_features->value();
      for (Index b = 0; b < 2; ++b) {
        for (Index d = 0; d < 32; ++d) {
          double mean = 0.0;
          for (Index n = 0; n < 64; ++n) mean += l[(b * 64 + n) * 32 + d];
          EXPECT_NEAR(out.descriptor.value()[b * 32 + d], mean / 64.0, 1e-12);
        }
      }
    }
  }
}

TEST(Network, MiniResnetRejectsBadWidths) {
  EXPECT_THROW(mini_resnet_spec(false, {8, 8, 16}), ShapeError);
  EXPECT_THROW(mini_resnet_spec(false, {8, 0, 16, 32}), ShapeError);
  EXPECT_THROW(mini_resnet_spec(true, {8, 8, 16, 32}, {3, 30, 30}), ShapeError);
}

TEST(Network, IncompatibleLayerChainRejectedAtBuild) {
  NetworkSpec s;
  s.input = {1, 8, 8};
  s.trunk = {{LayerKind::Conv, 4, 3, 1, 1}};
  s.global_head = {{LayerKind::Dense, 10}};
  EXPECT_THROW(Network<double>::build(s, 0), ShapeError);
  s.global_head = {{LayerKind::MaxPool, 0, 16, 16, 0}, {LayerKind::Flatten}};
  EXPECT_THROW(Network<double>::build(s, 0), ShapeError);
}

TEST(Network, FromParametersRejectsWrongShapes) {
  auto net = build_mnist_cnn<double>(false, 1);
  auto params = net.parameters();
  params[0].value = TensorD({32, 1, 3, 3});
  EXPECT_THROW(Network<double>::from_parameters(net.spec(), params), ShapeError);
  params.pop_back();
  EXPECT_THROW(Network<double>::from_parameters(net.spec(), params), ShapeError);
}

TEST(Network, ForwardIsDeterministic) {
  Rng rng(9);
  auto net = build_mini_resnet<float>(true, {4, 4, 8, 8}, 3);
  TensorF x = random_tensor(rng, {2, 3, 32, 32}).cast<float>();
  EXPECT_EQ(net.logits(x), net.logits(x));
  EXPECT_EQ(build_mini_resnet<float>(true, {4, 4, 8, 8}, 3).logits(x), net.logits(x));
}

TEST(Network, WithoutAttentionReducesToPlainClassifierOnG) {
  Rng rng(10);
  NetworkSpec with = mini_resnet_spec(true, {4, 4, 8, 8});
  auto att = Network<double>::build(with, 6);
  NetworkSpec without = with;
  without.attention.reset();
  std::vector<Parameter<double>> shared;
  for (const auto& p : att.parameters()) {
    if (p.name.rfind("attention.", 0) != 0) shared.push_back(p);
  }
  auto plain = Network<double>::from_parameters(without, shared);
  TensorD x = random_tensor(rng, {2, 3, 32, 32});

  Tape<double> tape;
  auto out = att.forward(tape, tape.constant(x));
  auto w = tape.constant(shared[shared.size() - 2].value);
  auto b = tape.constant(shared.back().value);
  TensorD reference = linear(out.global_feature, w, std::optional(b)).value();
  EXPECT_EQ(plain.logits(x), reference);
}

TEST(Network, ParameterGradientsMatchFiniteDifferences) {
  Rng rng(12);
  NetworkSpec spec = mini_resnet_spec(true, {2, 2, 3, 3}, {2, 8, 8}, 3);
  auto net = Network<double>::build(spec, 4);
  TensorD x = random_tensor(rng, {2, 2, 8, 8});
  auto loss_of = [&](const Network<double>& n) {
    Tape<double> tape;
    auto out = n.forward(tape, tape.constant(x));
    return sum(mul(out.logits, out.logits)).value()[0];
  };
  Tape<double> tape;
  auto out = net.forward(tape, tape.constant(x), true);
  tape.backward(sum(mul(out.logits, out.logits)));

  auto central = [&](std::size_t k, Index i, double h) {
    auto plus = net, minus = net;
    plus.parameters()[k].value[i] += h;
    minus.parameters()[k].value[i] -= h;
    return (loss_of(plus) - loss_of(minus)) / (2 * h);
  };
  double worst = 0.0;
  int checked = 0;
  for (std::size_t k = 0; k < net.parameters().size(); ++k) {
    const TensorD& g = *out.params[k].grad();
    for (int probe = 0; probe < 6; ++probe) {
      const Index i = advlab::testing::rand_dim(rng, 0, g.size() - 1);
      const double numeric = central(k, i, 1e-5);
      // A probe whose interval straddles a relu or maxpool kink is not differentiable there.
      if (advlab::testing::rel_error(numeric, central(k, i, 5e-6)) > 1e-6) continue;
      worst = std::max(worst, advlab::testing::rel_error(g[i], numeric));
      ++checked;
    }
  }
  EXPECT_GT(checked, int(net.parameters().size()) * 3);
  EXPECT_LT(worst, 1e-4);
}

TEST(AttentionScores, ZeroOutputWeightsGiveUniformAttention) {
  Rng rng(1);
  Tape<double> tape;
  auto local = tape.constant(random_tensor(rng, {2, 5, 3}));
  auto global = tape.constant(random_tensor(rng, {2, 4}));
  EstimatorParams<double> p;
  p.hidden_weight = tape.constant(random_tensor(rng, {7, 6}));
  p.hidden_bias = tape.constant(random_tensor(rng, {6}));
  p.out_weight = tape.constant(TensorD({6, 1}));
  p.out_bias = tape.constant(TensorD({1}, {0.7}));
  auto c = attention_scores(local, global, p);
  for (Index i = 0; i < c.value().size(); ++i) EXPECT_EQ(c.value()[i], 0.7);
  auto pooled = attention_pool(local, c);
  for (Index i = 0; i < 10; ++i) EXPECT_NEAR(pooled.weights.value()[i], 0.2, 1e-15);

  auto lin = linear_attention_scores(local, global, tape.constant(TensorD({7, 1})), tape.constant(TensorD({1})));
  auto lin_pooled = attention_pool(local, lin);
  for (Index i = 0; i < 10; ++i) EXPECT_NEAR(lin_pooled.weights.value()[i], 0.2, 1e-15);
}

TEST(AttentionScores, PermutingLocationsPermutesScores) {
  Rng rng(2);
  const Index N = 6, D = 3, Dg = 2;
  TensorD local = random_tensor(rng, {1, N, D});
  std::vector<Index> perm(N);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  TensorD permuted({1, N, D});
  for (Index n = 0; n < N; ++n) {
    for (Index d = 0; d < D; ++d) permuted[n * D + d] = local[perm[std::size_t(n)] * D + d];
  }
  Tape<double> tape;
  auto global = tape.constant(random_tensor(rng, {1, Dg}));
  EstimatorParams<double> p;
  p.hidden_weight = tape.constant(random_tensor(rng, {D + Dg, 4}));
  p.hidden_bias = tape.constant(random_tensor(rng, {4}));
  p.out_weight = tape.constant(random_tensor(rng, {4, 1}));
  p.out_bias = tape.constant(random_tensor(rng, {1}));
  const TensorD a = attention_scores(tape.constant(local), global, p).value();
  const TensorD b = attention_scores(tape.constant(permuted), global, p).value();
  for (Index n = 0; n < N; ++n) EXPECT_EQ(b[n], a[perm[std::size_t(n)]]);
}

TEST(AttentionScores, SingleLocationGetsFullWeight) {
  Rng rng(3);
  Tape<double> tape;
  auto local = tape.constant(random_tensor(rng, {3, 1, 4}));
  auto scores = tape.constant(TensorD({3, 1}, {-40.0, 0.0, 17.5}));
  auto pooled = attention_pool(local, scores);
  for (Index b = 0; b < 3; ++b) EXPECT_EQ(pooled.weights.value()[b], 1.0);
  for (Index i = 0; i < 12; ++i) EXPECT_NEAR(pooled.descriptor.value()[i], local.value()[i], 1e-15);
}

TEST(AttentionScores, EstimatorWidthMismatchRejected) {
  Tape<double> tape;
  auto local = tape.constant(TensorD({1, 4, 3}));
  auto global = tape.constant(TensorD({1, 2}));
  EXPECT_THROW(linear_attention_scores(local, global, tape.constant(TensorD({4, 1})), tape.constant(TensorD({1}))),
               ShapeError);
  EstimatorParams<double> p;
  p.hidden_weight = tape.constant(TensorD({6, 8}));
  p.hidden_bias = tape.constant(TensorD({8}));
  p.out_weight = tape.constant(TensorD({8, 1}));
  p.out_bias = tape.constant(TensorD({1}));
  EXPECT_THROW(attention_scores(local, global, p), ShapeError);
}

TEST(AttentionScores, MlpMatchesScalarLoop) {
  Rng rng(4);
  const Index B = 2, N = 5, D = 3, Dg = 4, H = 6;
  TensorD local = random_tensor(rng, {B, N, D});
  TensorD global = random_tensor(rng, {B, Dg});
  TensorD hw = random_tensor(rng, {D + Dg, H}), hb = random_tensor(rng, {H});
  TensorD ow = random_tensor(rng, {H, 1}), ob = random_tensor(rng, {1});
  Tape<double> tape;
  EstimatorParams<double> p;
  p.hidden_weight = tape.constant(hw);
  p.hidden_bias = tape.constant(hb);
  p.out_weight = tape.constant(ow);
  p.out_bias = tape.constant(ob);
  const TensorD c = attention_scores(tape.constant(local), tape.constant(global), p).value();
  for (Index b = 0; b < B; ++b) {
    auto ref = loop_scores(local, b, global, &hw, &hb, ow, ob[0]);
    for (Index n = 0; n < N; ++n) EXPECT_NEAR(c[b * N + n], ref[std::size_t(n)], 1e-6);
  }
}

TEST(AttentionScores, LinearMatchesScalarLoop) {
  Rng rng(5);
  const Index B = 3, N = 4, D = 5, Dg = 2;
  TensorD local = random_tensor(rng, {B, N, D});
  TensorD global = random_tensor(rng, {B, Dg});
  TensorD w = random_tensor(rng, {D + Dg, 1}), bias = random_tensor(rng, {1});
  Tape<double> tape;
  const TensorD c =
      linear_attention_scores(tape.constant(local), tape.constant(global), tape.constant(w), tape.constant(bias))
          .value();
  for (Index b = 0; b < B; ++b) {
    auto ref = loop_scores(local, b, global, nullptr, nullptr, w, bias[0]);
    for (Index n = 0; n < N; ++n) EXPECT_NEAR(c[b * N + n], ref[std::size_t(n)], 1e-6);
  }
}

TEST(AttentionScores, IdentityPassthroughMlpEqualsLinear) {
  // relu(z) - relu(-z) = z, so hidden [I, -I] with output [w; -w] is linear in z.
  Rng rng(6);
  const Index D = 3, Dg = 2, W = D + Dg;
  TensorD local = random_tensor(rng, {2, 4, D});
  TensorD global = random_tensor(rng, {2, Dg});
  TensorD w = random_tensor(rng, {W, 1}), bias = random_tensor(rng, {1});
  TensorD hw({W, 2 * W}), ow({2 * W, 1});
  for (Index i = 0; i < W; ++i) {
    hw[i * 2 * W + i] = 1.0;
    hw[i * 2 * W + W + i] = -1.0;
    ow[i] = w[i];
    ow[W + i] = -w[i];
  }
  Tape<double> tape;
  auto l = tape.constant(local);
  auto g = tape.constant(global);
  EstimatorParams<double> p;
  p.hidden_weight = tape.constant(hw);
  p.hidden_bias = tape.constant(TensorD({2 * W}));
  p.out_weight = tape.constant(ow);
  p.out_bias = tape.constant(bias);
  const TensorD mlp = attention_scores(l, g, p).value();
  const TensorD lin = linear_attention_scores(l, g, tape.constant(w), tape.constant(bias)).value();
  for (Index i = 0; i < mlp.size(); ++i) EXPECT_NEAR(mlp[i], lin[i], 1e-12);
}

TEST(AttentionPool, UniformScoresGiveMeanOfRows) {
  Rng rng(7);
  Tape<double> tape;
  auto local = tape.constant(random_tensor(rng, {1, 4, 3}));
  auto pooled = attention_pool(local, tape.constant(TensorD::constant({1, 4}, 2.5)));
  for (Index d = 0; d < 3; ++d) {
    double mean = 0.0;
    for (Index n = 0; n < 4; ++n) mean += local.value()[n * 3 + d];
    EXPECT_NEAR(pooled.descriptor.value()[d], mean / 4.0, 1e-12);
  }
}

TEST(AttentionPool, LargeScoreSaturatesToThatRow) {
  Rng rng(8);
  Tape<double> tape;
  auto local = tape.constant(random_tensor(rng, {1, 6, 4}));
  TensorD s({1, 6});
  s[0] = 50.0;
  auto pooled = attention_pool(local, tape.constant(s));
  for (Index d = 0; d < 4; ++d) EXPECT_NEAR(pooled.descriptor.value()[d], local.value()[d], 1e-6);
}

TEST(AttentionPool, MatchesScalarLoopWeightedSum) {
  Rng rng(9);
  const Index B = 2, N = 7, D = 5;
  TensorD local = random_tensor(rng, {B, N, D});
  TensorD scores = random_tensor(rng, {B, N});
  Tape<double> tape;
  auto pooled = attention_pool(tape.constant(local), tape.constant(scores));
  for (Index b = 0; b < B; ++b) {
    double z = 0.0;
    for (Index n = 0; n < N; ++n) z += std::exp(scores[b * N + n]);
    for (Index d = 0; d < D; ++d) {
      double h = 0.0;
      for (Index n = 0; n < N; ++n) h += std::exp(scores[b * N + n]) / z * local[(b * N + n) * D + d];
      EXPECT_NEAR(pooled.descriptor.value()[b * D + d], h, 1e-6);
    }
  }
}

TEST(AttentionPool, WeightsAreShiftInvariantAndDescriptorLinear) {
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    TensorD local = random_tensor(rng, {2, 5, 3});
    TensorD scores = random_tensor(rng, {2, 5});
    const double shift = advlab::testing::uniform(rng, -10.0, 10.0);
    const double alpha = advlab::testing::uniform(rng, -3.0, 3.0);
    TensorD shifted = scores;
    shifted.array() += shift;
    TensorD scaled = local;
    scaled.array() *= alpha;
    Tape<double> tape;
    auto base = attention_pool(tape.constant(local), tape.constant(scores));
    auto moved = attention_pool(tape.constant(local), tape.constant(shifted));
    auto lin = attention_pool(tape.constant(scaled), tape.constant(scores));
    double total = 0.0;
    for (Index i = 0; i < 10; ++i) {
      EXPECT_GE(base.weights.value()[i], 0.0);
      EXPECT_NEAR(moved.weights.value()[i], base.weights.value()[i], 1e-12);
      total += base.weights.value()[i];
    }
    EXPECT_NEAR(total, 2.0, 1e-6);
    for (Index i = 0; i < 6; ++i) {
      EXPECT_NEAR(lin.descriptor.value()[i], alpha * base.descriptor.value()[i], 1e-12);
    }
  }
}
