#include <gtest/gtest.h>

#include <random>

#include "fisherprune/kernels.hpp"
#include "test_support.hpp"

using namespace fisherprune;
using fptest::random_tensor;

namespace {

ConvWeights weights(Tensor k, Tensor b, std::size_t stride = 1, std::size_t pad = 0) {
  return ConvWeights{std::move(k), std::move(b), stride, pad};
}

double rel_error(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

}  // namespace

TEST(Tensor, ShapeAndReshape) {
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  t.at(1, 2, 3) = 5.0;
  EXPECT_EQ(t[23], 5.0);
  const Tensor r = t.reshaped({6, 4});
  EXPECT_EQ(r[23], 5.0);
  EXPECT_THROW(t.reshaped({5, 5}), Error);
  EXPECT_THROW(Tensor({2, 0}), Error);
  EXPECT_TRUE(Tensor().empty());
}

TEST(Conv, ScalarMultiplyAdd) {
  const Tensor x({1, 1, 1}, std::vector<double>{2});
  const Tensor y = conv2d_forward(x, weights(Tensor({1, 1, 1, 1}, std::vector<double>{3}), Tensor::vector({1})));
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(y[0], 7.0);
}

TEST(Conv, SumOfOnes) {
  const Tensor y = conv2d_forward(Tensor({1, 3, 3}, 1.0), weights(Tensor({1, 1, 3, 3}, 1.0), Tensor::vector({0})));
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(y[0], 9.0);
}

TEST(Conv, MatchesDirectLoop) {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({2, 5, 5}, rng);
  const ConvWeights w = weights(random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng), 1, 1);
  const Tensor y = conv2d_forward(x, w);
  const Tensor ref = fptest::naive_conv(x, w);
  ASSERT_EQ(y.shape(), ref.shape());
  EXPECT_LT(fptest::max_abs_diff(y, ref), 1e-12);
}

TEST(Conv, StridedAndBatchedMatchDirectLoop) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t C = fptest::uniform_index(rng, 1, 3), F = fptest::uniform_index(rng, 1, 4);
    const std::size_t k = fptest::uniform_index(rng, 1, 4), s = fptest::uniform_index(rng, 1, 3);
    const std::size_t pad = fptest::uniform_index(rng, 0, k - 1);
    const std::size_t H = fptest::uniform_index(rng, k, 9), W = fptest::uniform_index(rng, k, 9);
    const ConvWeights w = weights(random_tensor({F, C, k, k}, rng), random_tensor({F}, rng), s, pad);
    const Tensor xb = random_tensor({2, C, H, W}, rng);
    const Tensor yb = conv2d_forward(xb, w);
    for (std::size_t n = 0; n < 2; ++n) {
      Tensor xs({C, H, W});
      std::copy_n(xb.data() + n * xs.size(), xs.size(), xs.data());
      const Tensor ref = fptest::naive_conv(xs, w);
      ASSERT_EQ(yb.dim(1), ref.dim(0));
      for (std::size_t e = 0; e < ref.size(); ++e) EXPECT_NEAR(yb[n * ref.size() + e], ref[e], 1e-12);
    }
  }
}

TEST(Conv, ShapeErrors) {
  const ConvWeights w = weights(Tensor({1, 2, 3, 3}, 1.0), Tensor::vector({0}));
  EXPECT_THROW(conv2d_forward(Tensor({3, 5, 5}), w), Error);  // channel mismatch
  EXPECT_THROW(conv2d_forward(Tensor({2, 2, 2}), w), Error);  // kernel larger than input
  EXPECT_THROW(conv2d_forward(Tensor({2, 5}), w), Error);
}

TEST(Conv, FloorExtentForOddStride) {
  // 7x7 stride-2 pad-3 on 224 gives 112.
  EXPECT_EQ(conv_out_extent(224, 7, 2, 3, "height"), 112u);
}

TEST(ConvTranspose, ScalarAdjoint) {
  const ConvWeights w = weights(Tensor({1, 1, 1, 1}, std::vector<double>{3}), Tensor::vector({5}));
  const Tensor u = conv2d_transpose(Tensor({1, 1, 1}, std::vector<double>{6}), w);
  ASSERT_EQ(u.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(u[0], 18.0);
}

TEST(ConvTranspose, BroadcastsKernel) {
  const ConvWeights w = weights(Tensor({1, 1, 3, 3}, 1.0), Tensor::vector({0}));
  const Tensor u = conv2d_transpose(Tensor({1, 1, 1}, 1.0), w);
  ASSERT_EQ(u.shape(), (Shape{1, 3, 3}));
  for (double v : u.values()) EXPECT_EQ(v, 1.0);
}

TEST(ConvTranspose, AdjointIdentityRandomShapes) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t C = fptest::uniform_index(rng, 1, 4), F = fptest::uniform_index(rng, 1, 4);
    const std::size_t kh = fptest::uniform_index(rng, 1, 4), kw = fptest::uniform_index(rng, 1, 4);
    const std::size_t s = fptest::uniform_index(rng, 1, 3);
    const std::size_t pad = fptest::uniform_index(rng, 0, std::min(kh, kw) - 1);
    const std::size_t H = fptest::uniform_index(rng, kh, 10), W = fptest::uniform_index(rng, kw, 10);
    const ConvWeights w = weights(random_tensor({F, C, kh, kw}, rng), random_tensor({F}, rng), s, pad);
    const ConvWeights nobias = weights(w.kernel, Tensor({F}), s, pad);
    const Tensor x = random_tensor({C, H, W}, rng);
    const Tensor fx = conv2d_forward(x, nobias);
    const Tensor y = random_tensor(fx.shape(), rng);
    const Tensor ty = conv2d_transpose(y, w, H, W);
    ASSERT_EQ(ty.shape(), x.shape());
    EXPECT_LT(rel_error(dot(fx.values(), y.values()), dot(x.values(), ty.values())), 1e-10) << "trial " << trial;
  }
}

TEST(Conv, Linearity) {
  std::mt19937_64 rng(5);
  const ConvWeights w = weights(random_tensor({2, 2, 3, 3}, rng), Tensor({2}), 1, 1);
  const Tensor a = random_tensor({2, 6, 6}, rng), b = random_tensor({2, 6, 6}, rng);
  Tensor sum = a;
  for (std::size_t k = 0; k < sum.size(); ++k) sum[k] = 2.5 * a[k] + b[k];
  const Tensor lhs = conv2d_forward(sum, w);
  const Tensor fa = conv2d_forward(a, w), fb = conv2d_forward(b, w);
  for (std::size_t k = 0; k < lhs.size(); ++k) EXPECT_NEAR(lhs[k], 2.5 * fa[k] + fb[k], 1e-12);

  // In the kernel as well.
  const ConvWeights w2 = weights(random_tensor({2, 2, 3, 3}, rng), Tensor({2}), 1, 1);
  Tensor ksum = w.kernel;
  for (std::size_t k = 0; k < ksum.size(); ++k) ksum[k] = w.kernel[k] - 3.0 * w2.kernel[k];
  const Tensor lk = conv2d_forward(a, weights(ksum, Tensor({2}), 1, 1));
  const Tensor f2 = conv2d_forward(a, w2);
  for (std::size_t k = 0; k < lk.size(); ++k) EXPECT_NEAR(lk[k], fa[k] - 3.0 * f2[k], 1e-12);
}

TEST(Conv, Deterministic) {
  std::mt19937_64 rng(6);
  const ConvWeights w = weights(random_tensor({4, 3, 3, 3}, rng), random_tensor({4}, rng), 2, 1);
  const Tensor x = random_tensor({2, 3, 9, 9}, rng);
  EXPECT_EQ(conv2d_forward(x, w), conv2d_forward(x, w));
}

TEST(Conv, WeightGradientMatchesInnerProduct) {
  // d<conv(x;K), dy>/dK is linear in dy; check against perturbation of K.
  std::mt19937_64 rng(8);
  const ConvWeights w = weights(random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng), 1, 1);
  const Tensor x = random_tensor({2, 2, 5, 5}, rng);
  const Tensor dy = random_tensor(conv2d_forward(x, w).shape(), rng);
  const auto [dK, db] = conv2d_weight_grad(x, dy, w);
  const Tensor dir = random_tensor(w.kernel.shape(), rng);
  Tensor shifted = w.kernel;
  for (std::size_t k = 0; k < shifted.size(); ++k) shifted[k] += dir[k];
  const Tensor y0 = conv2d_forward(x, w), y1 = conv2d_forward(x, weights(shifted, w.bias, 1, 1));
  double lhs = 0.0;
  for (std::size_t k = 0; k < y0.size(); ++k) lhs += (y1[k] - y0[k]) * dy[k];
  EXPECT_LT(rel_error(lhs, dot(dK.values(), dir.values())), 1e-10);
  double dbsum = 0.0;
  for (double v : dy.values()) dbsum += v;
  double dbtotal = 0.0;
  for (double v : db.values()) dbtotal += v;
  EXPECT_NEAR(dbsum, dbtotal, 1e-10);
}

TEST(MaxPool, PicksMaxAndSwitch) {
  const Tensor x({1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  const auto [y, sw] = maxpool_forward(x, 2, 2);
  ASSERT_EQ(y.size(), 1u);
  EXPECT_EQ(y[0], 4.0);
  EXPECT_EQ(sw.index[0], 3u);
}

TEST(MaxPool, ConstantInputTiesGoToFirstIndex) {
  const Tensor x({1, 4, 4}, 1.5);
  const auto [y, sw] = maxpool_forward(x, 2, 2);
  ASSERT_EQ(y.size(), 4u);
  const std::vector<std::size_t> first = {0, 2, 8, 10};
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(y[k], 1.5);
    EXPECT_EQ(sw.index[k], first[k]);
  }
}

TEST(MaxPool, NonTilingShapeRejected) {
  EXPECT_THROW(maxpool_forward(Tensor({1, 5, 5}), 2, 2), Error);
}

TEST(MaxPool, UnpoolRoundTrip) {
  std::mt19937_64 rng(9);
  const Tensor x = random_tensor({1, 8, 8}, rng);
  const auto [y, sw] = maxpool_forward(x, 2, 2);
  const Tensor u = unpool(y, sw, x.shape());
  std::vector<bool> winner(x.size(), false);
  for (std::size_t i : sw.index) winner[i] = true;
  for (std::size_t k = 0; k < x.size(); ++k) EXPECT_EQ(u[k], winner[k] ? x[k] : 0.0);
  // Every winner is the max of its window.
  for (std::size_t a = 0; a < 4; ++a)
    for (std::size_t b = 0; b < 4; ++b) {
      double m = -1e300;
      for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) m = std::max(m, x.at(0, 2 * a + i, 2 * b + j));
      EXPECT_EQ(y.at(0, a, b), m);
    }
}

TEST(MaxPool, UnpoolZeroAndIndicator) {
  std::mt19937_64 rng(10);
  const Tensor x = random_tensor({2, 4, 4}, rng);
  const auto [y, sw] = maxpool_forward(x, 2, 2);
  const Tensor z = unpool(Tensor(y.shape()), sw, x.shape());
  for (double v : z.values()) EXPECT_EQ(v, 0.0);
  const Tensor ind = unpool(Tensor(y.shape(), 1.0), sw, x.shape());
  double total = 0.0;
  for (double v : ind.values()) total += v;
  EXPECT_EQ(total, static_cast<double>(y.size()));
  for (std::size_t i : sw.index) EXPECT_EQ(ind[i], 1.0);
}

TEST(Rectify, Examples) {
  const Tensor r = rectify(Tensor::vector({-1, 0, 2}));
  EXPECT_EQ(r, Tensor::vector({0, 0, 2}));
  const Tensor neg = rectify(Tensor::vector({-3, -0.5}));
  for (double v : neg.values()) EXPECT_EQ(v, 0.0);
  std::mt19937_64 rng(12);
  const Tensor x = random_tensor({20}, rng);
  EXPECT_EQ(rectify(rectify(x)), rectify(x));
}

TEST(Dense, IdentityZeroAndLoopOracle) {
  std::mt19937_64 rng(13);
  const Tensor x = random_tensor({5}, rng);
  Tensor eye({5, 5});
  for (std::size_t i = 0; i < 5; ++i) eye[i * 5 + i] = 1.0;
  EXPECT_EQ(dense_forward(x, eye, Tensor({5})), x);
  const Tensor b = random_tensor({3}, rng);
  EXPECT_EQ(dense_forward(x, Tensor({3, 5}), b), b);

  const Tensor W = random_tensor({4, 5}, rng), bb = random_tensor({4}, rng);
  const Tensor y = dense_forward(x, W, bb);
  for (std::size_t o = 0; o < 4; ++o) {
    double s = bb[o];
    for (std::size_t i = 0; i < 5; ++i) s += W[o * 5 + i] * x[i];
    EXPECT_NEAR(y[o], s, 1e-12);
  }
  EXPECT_THROW(dense_forward(random_tensor({4}, rng), W, bb), Error);
}

TEST(Dense, TransposeIsAdjoint) {
  std::mt19937_64 rng(14);
  const Tensor W = random_tensor({6, 7}, rng);
  const Tensor x = random_tensor({3, 7}, rng), dy = random_tensor({3, 6}, rng);
  const Tensor y = dense_forward_batch(x, W, Tensor({6}));
  const Tensor tx = dense_transpose_batch(dy, W);
  EXPECT_LT(rel_error(dot(y.values(), dy.values()), dot(x.values(), tx.values())), 1e-12);
}
