#include <gtest/gtest.h>

#include <random>

#include "fisherprune/trace.hpp"
#include "test_support.hpp"

using namespace fisherprune;
using fptest::random_tensor;

namespace {

Dataset noise_data(const NetGraph& g, std::size_t n, std::uint64_t seed, double lo = -1.0) {
  std::mt19937_64 rng(seed);
  Dataset d;
  d.shape = g.input;
  d.classes = g.classes;
  d.images = random_tensor({n, g.input.c, g.input.h, g.input.w}, rng, lo, 1.0);
  for (std::size_t s = 0; s < n; ++s) d.labels.push_back(static_cast<int>(s % g.classes));
  return d;
}

std::vector<std::size_t> all_of(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

}  // namespace

TEST(Seed, DenseSelectAllEqualsActivation) {
  const NetGraph g = fptest::small_cnn(1);
  std::mt19937_64 rng(2);
  const ForwardResult fr = forward(g, random_tensor({3, 2, 8, 8}, rng));
  const Tensor seed = seed_utility(g, fr.cache, all_of(10));
  EXPECT_EQ(seed, fr.cache.outputs[g.last_hidden_index()]);
  EXPECT_THROW(seed_utility(g, fr.cache, {}), Error);
}

TEST(Seed, ConvNeuronIsOneHotAtArgmax) {
  NetGraph g;
  g.input = {1, 4, 4};
  g.classes = 2;
  g.nodes = {conv_node("conv", kInputId, 3, 3, 1, 1), simple_node("relu", LayerKind::ReLU, {"conv"}),
             simple_node("flat", LayerKind::Flatten, {"relu"}), dense_node("fc", "flat", 2),
             simple_node("prob", LayerKind::Softmax, {"fc"})};
  g.last_hidden = "relu";
  g.validate();
  initialize_weights(g, 3);
  std::mt19937_64 rng(4);
  const ForwardResult fr = forward(g, random_tensor({1, 1, 4, 4}, rng));
  const Tensor seed = seed_utility(g, fr.cache, {1});
  const Tensor& act = fr.cache.outputs[1];
  std::size_t arg = 0;
  for (std::size_t k = 1; k < 16; ++k)
    if (act[16 + k] > act[16 + arg]) arg = k;
  const double best = act[16 + arg];
  for (std::size_t k = 0; k < seed.size(); ++k) EXPECT_EQ(seed[k], k == 16 + arg ? best : 0.0);
}

TEST(DeconvStep, IdentityConvPassesThrough) {
  NetGraph g;
  g.input = {1, 3, 3};
  g.classes = 2;
  g.nodes = {conv_node("conv", kInputId, 1, 1), simple_node("flat", LayerKind::Flatten, {"conv"}),
             dense_node("fc", "flat", 2), simple_node("prob", LayerKind::Softmax, {"fc"})};
  g.last_hidden = "flat";
  g.validate();
  initialize_weights(g, 1);
  g.node("conv").weight.fill(1.0);
  std::mt19937_64 rng(5);
  const ForwardResult fr = forward(g, random_tensor({1, 1, 3, 3}, rng));
  const Tensor u = random_tensor({1, 3, 3}, rng);
  EXPECT_EQ(deconv_step(g, 0, u, fr.cache, 0)[0], u);
}

TEST(DeconvStep, ConcatSplitThenStackIsIdentity) {
  const NetGraph g = fptest::gradcheck_net(2);
  std::mt19937_64 rng(6);
  const ForwardResult fr = forward(g, random_tensor({1, 1, 6, 6}, rng));
  const std::size_t cat = g.index_of("cat");
  const Tensor u = random_tensor({4, 6, 6}, rng);
  const auto parts = deconv_step(g, cat, u, fr.cache, 0);
  ASSERT_EQ(parts.size(), 2u);
  std::vector<double> stacked(parts[0].storage());
  stacked.insert(stacked.end(), parts[1].storage().begin(), parts[1].storage().end());
  EXPECT_EQ(stacked, u.storage());
}

TEST(DeconvStep, ConvReluPoolChainMatchesManualComposition) {
  const NetGraph g = fptest::small_cnn(7);
  std::mt19937_64 rng(8);
  const ForwardResult fr = forward(g, random_tensor({2, 2, 8, 8}, rng));
  const Tensor u = random_tensor({4, 4, 4}, rng);
  // p1 <- r1 <- c1 for sample 1.
  Tensor field = deconv_step(g, g.index_of("p1"), u, fr.cache, 1)[0];
  field = deconv_step(g, g.index_of("r1"), field, fr.cache, 1)[0];
  field = deconv_step(g, g.index_of("c1"), field, fr.cache, 1)[0];

  const PoolSwitches& all = fr.cache.switches[g.index_of("p1")];
  PoolSwitches sw;
  sw.input_shape = {4, 8, 8};
  sw.output_shape = {4, 4, 4};
  for (std::size_t k = 0; k < 64; ++k) sw.index.push_back(all.index[64 + k] - 256);
  const Tensor manual =
      conv2d_transpose(rectify(unpool(u, sw, {4, 8, 8})), g.node("c1").conv_weights(), 8, 8);
  ASSERT_EQ(field.shape(), manual.shape());
  EXPECT_LT(fptest::max_abs_diff(field, manual), 1e-12);
}

TEST(DeconvStep, MissingSwitchesIsAnError) {
  const NetGraph g = fptest::small_cnn(7);
  std::mt19937_64 rng(8);
  ForwardResult fr = forward(g, random_tensor({1, 2, 8, 8}, rng));
  fr.cache.switches[g.index_of("p1")] = PoolSwitches{};
  EXPECT_THROW(deconv_step(g, g.index_of("p1"), Tensor({4, 4, 4}), fr.cache, 0), Error);
}

TEST(DenseAsConv, IdentityDenseDeconvIsIdentity) {
  NetGraph g;
  g.input = {4, 1, 1};
  g.classes = 2;
  g.nodes = {dense_node("eye", kInputId, 4), dense_node("fc", "eye", 2),
             simple_node("prob", LayerKind::Softmax, {"fc"})};
  g.last_hidden = "eye";
  g.validate();
  initialize_weights(g, 1);
  auto& eye = g.node("eye");
  eye.weight.fill(0.0);
  for (std::size_t i = 0; i < 4; ++i) eye.weight[i * 4 + i] = 1.0;
  std::mt19937_64 rng(9);
  const ForwardResult fr = forward(g, random_tensor({1, 4, 1, 1}, rng));
  const Tensor u = random_tensor({4, 1, 1}, rng);
  EXPECT_EQ(deconv_step(g, 0, u, fr.cache, 0)[0], u);
}

TEST(DenseAsConv, KernelIsReshapedWeightRow) {
  NetGraph g;
  g.input = {1, 4, 4};
  g.classes = 2;
  g.nodes = {pool_node("pool", kInputId, 2, 2), simple_node("flat", LayerKind::Flatten, {"pool"}),
             dense_node("fc1", "flat", 3), simple_node("relu", LayerKind::ReLU, {"fc1"}),
             dense_node("fc2", "relu", 2), simple_node("prob", LayerKind::Softmax, {"fc2"})};
  g.last_hidden = "relu";
  g.validate();
  initialize_weights(g, 2);
  const std::size_t fc1 = g.index_of("fc1");
  const ConvWeights view = dense_as_conv(g, fc1);
  ASSERT_EQ(view.kernel.shape(), (Shape{3, 1, 2, 2}));
  const Tensor& W = g.nodes[fc1].weight;
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(view.kernel.at(o, 0, r, c), W[o * 4 + r * 2 + c]);

  // Adjoint of the view against the original linear map.
  std::mt19937_64 rng(10);
  const Tensor x = random_tensor({1, 2, 2}, rng), y = random_tensor({3, 1, 1}, rng);
  const Tensor Wx = dense_forward(x, W, Tensor({3}));
  const Tensor ty = conv2d_transpose(y, view, 2, 2);
  EXPECT_NEAR(dot(Wx.values(), y.values()), dot(x.values(), ty.values()), 1e-12);
}

TEST(TraceUtility, MatrixChainOnLinearPath) {
  // Non-negative inputs and weights keep every rectification the identity,
  // so the field below fc2 is W2^T seed averaged over samples.
  NetGraph g;
  g.input = {3, 1, 1};
  g.classes = 2;
  g.nodes = {dense_node("fc1", kInputId, 4), simple_node("r1", LayerKind::ReLU, {"fc1"}),
             dense_node("fc2", "r1", 5), simple_node("r2", LayerKind::ReLU, {"fc2"}),
             dense_node("out", "r2", 2), simple_node("prob", LayerKind::Softmax, {"out"})};
  g.last_hidden = "r2";
  g.validate();
  initialize_weights(g, 3);
  for (auto& n : g.nodes)
    for (double& w : n.weight.values()) w = std::abs(w);
  const Dataset d = noise_data(g, 6, 11, 0.0);
  const std::vector<std::size_t> sel = {0, 2, 3};
  const UtilityMap um = trace_utility(g, d, sel);

  const ForwardResult fr = forward(g, d.images);
  const Tensor& W2 = g.node("fc2").weight;
  std::vector<double> mid(4, 0.0);  // averaged W2^T seed
  for (std::size_t s = 0; s < 6; ++s) {
    std::vector<double> seed(5, 0.0);
    for (std::size_t j : sel) seed[j] = fr.cache.outputs[g.index_of("r2")][s * 5 + j];
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t o = 0; o < 5; ++o) mid[i] += W2[o * 4 + i] * seed[o] / 6.0;
  }
  const std::size_t fc1 = g.index_of("fc1");
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(um.fields[g.index_of("r1")][i], mid[i], 1e-12);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(um.fields[fc1][i], mid[i], 1e-12);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(um.channel_scores[fc1][i], mid[i], 1e-12);
}

TEST(TraceUtility, ZeroDownstreamSliceGivesZeroUtility) {
  NetGraph g = fptest::small_cnn(12);
  auto& c2 = g.node("c2");
  for (std::size_t f = 0; f < c2.filters; ++f)
    for (std::size_t k = 0; k < 9; ++k) c2.weight[(f * c2.channels + 0) * 9 + k] = 0.0;
  const Dataset d = noise_data(g, 8, 13);
  const UtilityMap um = trace_utility(g, d, all_of(10));
  const std::size_t c1 = g.index_of("c1");
  EXPECT_EQ(um.channel_scores[c1][0], 0.0);
  const std::size_t C = um.fields[c1].dim(0), S = um.fields[c1].size() / C;
  for (std::size_t k = 0; k < S; ++k) EXPECT_EQ(um.fields[c1][k], 0.0);
  for (std::size_t c = 1; c < 4; ++c) EXPECT_NE(um.channel_scores[c1][c], 0.0);
}

TEST(TraceUtility, LinearInTheSeed) {
  const NetGraph g = fptest::small_modular(14);
  std::mt19937_64 rng(15);
  const ForwardResult fr = forward(g, random_tensor({3, 2, 8, 8}, rng));
  const std::vector<std::size_t> sel = {0, 1, 2, 3, 4, 5, 6, 7};
  std::vector<Tensor> once, twice;
  trace_cache(g, fr.cache, sel, nullptr, once);
  LDAScores two;
  two.v.assign(8, 2.0);
  two.column_to_neuron = sel;
  trace_cache(g, fr.cache, sel, &two, twice);
  for (std::size_t i = 0; i < once.size(); ++i) {
    if (once[i].empty()) continue;
    for (std::size_t k = 0; k < once[i].size(); ++k) EXPECT_NEAR(twice[i][k], 2.0 * once[i][k], 1e-12);
  }
}

TEST(TraceUtility, TwinBranchesReceiveIdenticalScores) {
  NetGraph g;
  g.input = {2, 6, 6};
  g.classes = 2;
  g.nodes = {conv_node("a", kInputId, 3, 3, 1, 1), simple_node("ar", LayerKind::ReLU, {"a"}),
             conv_node("b", kInputId, 3, 3, 1, 1), simple_node("br", LayerKind::ReLU, {"b"}),
             simple_node("cat", LayerKind::Concat, {"ar", "br"}), pool_node("pool", "cat", 2, 2),
             simple_node("flat", LayerKind::Flatten, {"pool"}), dense_node("fc1", "flat", 4),
             simple_node("fc1_relu", LayerKind::ReLU, {"fc1"}), dense_node("fc2", "fc1_relu", 2),
             simple_node("prob", LayerKind::Softmax, {"fc2"})};
  g.last_hidden = "fc1_relu";
  g.validate();
  initialize_weights(g, 16);
  g.node("b").weight = g.node("a").weight;
  // fc1 columns for branch b mirror those of branch a.
  auto& fc1 = g.node("fc1");
  const std::size_t half = fc1.channels / 2;
  for (std::size_t o = 0; o < 4; ++o)
    for (std::size_t k = 0; k < half; ++k) fc1.weight[o * fc1.channels + half + k] = fc1.weight[o * fc1.channels + k];
  const Dataset d = noise_data(g, 5, 17);
  const UtilityMap um = trace_utility(g, d, all_of(4));
  for (std::size_t c = 0; c < 3; ++c)
    EXPECT_NEAR(um.channel_scores[g.index_of("a")][c], um.channel_scores[g.index_of("b")][c], 1e-12);
}

TEST(TraceUtility, IgnoresWeightsBelowOnceCached) {
  const NetGraph g = fptest::small_cnn(18);
  std::mt19937_64 rng(19);
  const ForwardResult fr = forward(g, random_tensor({4, 2, 8, 8}, rng));
  const std::vector<std::size_t> sel = {1, 3, 5, 7};
  std::vector<Tensor> before, after;
  trace_cache(g, fr.cache, sel, nullptr, before);
  NetGraph edited = g;
  for (double& w : edited.node("c1").weight.values()) w *= -3.0;  // upstream of c2
  trace_cache(edited, fr.cache, sel, nullptr, after);
  for (const char* id : {"c2", "r2", "p1", "r1"}) {
    const std::size_t i = g.index_of(id);
    EXPECT_EQ(before[i], after[i]) << id;
  }
}

TEST(TraceUtility, GroupWiseTracingReachesEveryBranch) {
  const NetGraph g = fptest::small_modular(20);
  const Dataset d = noise_data(g, 6, 21);
  const UtilityMap um = trace_utility(g, d, all_of(8));
  for (const char* id : {"stem", "b1", "b2_reduce", "b2", "b3_reduce", "b3", "fc1"})
    EXPECT_TRUE(um.traced(g.index_of(id))) << id;
  EXPECT_FALSE(um.traced(g.index_of("fc2")));
  EXPECT_EQ(um.samples, 6u);
}

TEST(TraceUtility, ChunkingDoesNotChangeTheResult) {
  const NetGraph g = fptest::small_modular(22);
  const Dataset d = noise_data(g, 9, 23);
  TraceOptions a, b;
  a.chunk = 2;
  b.chunk = 64;
  const UtilityMap ua = trace_utility(g, d, all_of(8), nullptr, a);
  const UtilityMap ub = trace_utility(g, d, all_of(8), nullptr, b);
  for (std::size_t i = 0; i < ua.fields.size(); ++i) {
    if (ua.fields[i].empty()) continue;
    EXPECT_LT(fptest::max_abs_diff(ua.fields[i], ub.fields[i]), 1e-12);
  }
}
