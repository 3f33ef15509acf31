// Copyright (c) 2026 The rkd authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "rkd/ops.hpp"

using rkd::Tensor;

TEST(Conv2d, IdentityOneByOne) {
  // 1x1 weight = identity over channels -> output equals input
  rkd::Rng rng(1);
  auto x = rkdtest::random_tensor<float>({2, 2, 5, 5}, rng);
  auto w = Tensor<float>::zeros({2, 2, 1, 1});
  w.data()[0 * 2 + 0] = 1.f;  // [co=0, ci=0]
  w.data()[1 * 2 + 1] = 1.f;  // [co=1, ci=1]
  auto y = rkd::conv2d(x, w, 1, 0);
  ASSERT_EQ(y.shape(), x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) EXPECT_FLOAT_EQ(y.values()[i], x.values()[i]);
}

TEST(Conv2d, AllOnesSmallCase) {
  auto x = Tensor<float>::full({1, 1, 3, 3}, 1.f);
  auto w = Tensor<float>::full({1, 1, 3, 3}, 1.f);
  auto y = rkd::conv2d(x, w, 1, 0);
  ASSERT_EQ(y.shape(), (rkd::Shape{1, 1, 1, 1}));
  EXPECT_FLOAT_EQ(y.values()[0], 9.f);
}

TEST(Conv2d, MatchesIm2colOracle) {
  rkd::Rng rng(3);
  const struct {
    rkd::Shape in, w;
    int64_t stride, pad;
  } cases[] = {
      {{2, 3, 9, 9}, {4, 3, 3, 3}, 1, 1},
      {{1, 2, 8, 8}, {5, 2, 2, 2}, 2, 0},
      {{3, 4, 7, 7}, {2, 4, 1, 1}, 1, 0},
      {{2, 1, 10, 10}, {3, 1, 5, 5}, 1, 2},
      {{1, 3, 12, 12}, {4, 3, 4, 4}, 2, 1},
  };
  for (const auto& c : cases) {
    auto x = rkdtest::random_tensor<double>(c.in, rng);
    auto w = rkdtest::random_tensor<double>(c.w, rng);
    auto b = rkdtest::random_tensor<double>({c.w[0]}, rng);
    auto got = rkd::conv2d(x, w, b, c.stride, c.pad);
    auto want = rkdtest::conv2d_oracle(x, w, b, c.stride, c.pad);
    ASSERT_EQ(got.shape(), want.shape());
    for (int64_t i = 0; i < got.numel(); ++i)
      EXPECT_LT(rkdtest::rel_err(got.values()[i], want.values()[i]), 1e-6);
  }
}

TEST(Conv2d, OneByOneEqualsPerPixelMatmul) {
  // stride 1, padding 0, 1x1 kernel == per-pixel channel matmul
  rkd::Rng rng(5);
  auto x = rkdtest::random_tensor<double>({2, 3, 6, 6}, rng);
  auto w = rkdtest::random_tensor<double>({4, 3, 1, 1}, rng);
  auto got = rkd::conv2d(x, w, 1, 0);
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t co = 0; co < 4; ++co)
      for (int64_t p = 0; p < 36; ++p) {
        double want = 0;
        for (int64_t ci = 0; ci < 3; ++ci)
          want += w.values()[co * 3 + ci] * x.values()[(n * 3 + ci) * 36 + p];
        EXPECT_LT(rkdtest::rel_err(got.values()[(n * 4 + co) * 36 + p], want), 1e-9);
      }
}

TEST(Conv2d, ErrorsNameBothShapes) {
  auto x = Tensor<float>::zeros({1, 3, 8, 8});
  auto w = Tensor<float>::zeros({4, 2, 3, 3});
  try {
    rkd::conv2d(x, w, 1, 1);
    FAIL() << "expected ShapeError";
  } catch (const rkd::ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[1,3,8,8]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4,2,3,3]"), std::string::npos) << msg;
  }
}

TEST(Conv2d, NonIntegralOutputExtentIsAnError) {
  auto x = Tensor<float>::zeros({1, 1, 7, 7});
  auto w = Tensor<float>::zeros({1, 1, 2, 2});
  EXPECT_THROW(rkd::conv2d(x, w, 2, 0), rkd::ShapeError);  // (7-2)/2 not integral
  EXPECT_NO_THROW(rkd::conv2d(x, w, 1, 0));                // 6 = exact
}

TEST(SoftmaxCrossEntropy, UniformLogits) {
  auto z = Tensor<double>::zeros({3, 4});
  auto y = rkd::one_hot<double>({0, 1, 3}, 4);
  auto loss = rkd::softmax_cross_entropy(z, y);
  EXPECT_NEAR(loss.item(), std::log(4.0), 1e-12);
}

TEST(SoftmaxCrossEntropy, SaturatedMargin) {
  auto z = Tensor<double>::zeros({1, 3});
  z.data()[1] = 50.0;  // true class dominates by 50
  auto y = rkd::one_hot<double>({1}, 3);
  auto loss = rkd::softmax_cross_entropy(z, y);
  EXPECT_LT(loss.item(), 1e-20);
  EXPECT_GE(loss.item(), 0.0);
}

TEST(SoftmaxCrossEntropy, MatchesDirectFormula) {
  rkd::Rng rng(11);
  auto z = rkdtest::random_tensor<double>({6, 9}, rng, 3.0);
  std::vector<int> labels;
  for (int i = 0; i < 6; ++i) labels.push_back(static_cast<int>(rng.below(9)));
  auto y = rkd::one_hot<double>(labels, 9);
  auto got = rkd::softmax_cross_entropy(z, y);
  // direct -sum y log softmax, no max-subtraction tricks
  double want = 0;
  for (int i = 0; i < 6; ++i) {
    double denom = 0;
    for (int c = 0; c < 9; ++c) denom += std::exp(z.values()[i * 9 + c]);
    want += -std::log(std::exp(z.values()[i * 9 + labels[i]]) / denom);
  }
  want /= 6.0;
  EXPECT_LT(std::abs(got.item() - want), 1e-10);
}

TEST(SoftmaxCrossEntropy, RejectsNonOneHot) {
  auto z = Tensor<double>::zeros({1, 3});
  auto y = Tensor<double>::from({1, 3}, {0.5, 0.5, 0.0});
  EXPECT_THROW(rkd::softmax_cross_entropy(z, y), rkd::ShapeError);
  auto y2 = Tensor<double>::from({1, 3}, {1.0, 1.0, 0.0});
  EXPECT_THROW(rkd::softmax_cross_entropy(z, y2), rkd::ShapeError);
}

TEST(Softmax, RowsAreDistributions) {
  rkd::Rng rng(13);
  auto z = rkdtest::random_tensor<float>({8, 10}, rng, 4.0);
  auto p = rkd::softmax_rows(z);
  for (int64_t i = 0; i < 8; ++i) {
    double sum = 0;
    for (int64_t c = 0; c < 10; ++c) {
      EXPECT_GE(p.values()[i * 10 + c], 0.f);
      sum += p.values()[i * 10 + c];
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(AvgPool, DownsampleByTwo) {
  auto x = Tensor<float>::from({1, 1, 2, 2}, {1, 2, 3, 4});
  auto y = rkd::avg_pool2d(x, 2, 2, 0);
  ASSERT_EQ(y.shape(), (rkd::Shape{1, 1, 1, 1}));
  EXPECT_FLOAT_EQ(y.values()[0], 2.5f);
}

TEST(GlobalAvgPool, Means) {
  auto x = Tensor<float>::from({1, 2, 1, 2}, {1, 3, 10, 20});
  auto y = rkd::global_avg_pool(x);
  ASSERT_EQ(y.shape(), (rkd::Shape{1, 2}));
  EXPECT_FLOAT_EQ(y.values()[0], 2.f);
  EXPECT_FLOAT_EQ(y.values()[1], 15.f);
}

TEST(Ops, AddSubShapeMismatch) {
  auto a = Tensor<float>::zeros({2, 2});
  auto b = Tensor<float>::zeros({2, 3});
  EXPECT_THROW(rkd::add(a, b), rkd::ShapeError);
  EXPECT_THROW(rkd::sub(a, b), rkd::ShapeError);
}

TEST(BatchNorm, NormalizesBatchStatistics) {
  rkd::Rng rng(17);
  auto x = rkdtest::random_tensor<double>({4, 3, 5, 5}, rng, 2.5);
  auto gamma = Tensor<double>::full({3}, 1.0);
  auto beta = Tensor<double>::zeros({3});
  auto rm = Tensor<double>::zeros({3});
  auto rv = Tensor<double>::full({3}, 1.0);
  auto y = rkd::batch_norm2d(x, gamma, beta, rm, rv, /*training=*/true);
  // per-channel mean ~0 and var ~1 after normalization
  for (int64_t c = 0; c < 3; ++c) {
    double mean = 0, var = 0;
    for (int64_t n = 0; n < 4; ++n)
      for (int64_t i = 0; i < 25; ++i) mean += y.values()[(n * 3 + c) * 25 + i];
    mean /= 100;
    for (int64_t n = 0; n < 4; ++n)
      for (int64_t i = 0; i < 25; ++i) {
        const double d = y.values()[(n * 3 + c) * 25 + i] - mean;
        var += d * d;
      }
    var /= 100;
    EXPECT_NEAR(mean, 0.0, 1e-10);
    EXPECT_NEAR(var, 1.0, 1e-3);
  }
  // running stats moved toward batch stats with momentum 0.1
  EXPECT_NE(rm.values()[0], 0.0);
}

TEST(BatchNorm, EvalModeIsAffine) {
  rkd::Rng rng(19);
  auto gamma = Tensor<double>::full({2}, 1.5);
  auto beta = Tensor<double>::full({2}, 0.25);
  auto rm = Tensor<double>::from({2}, {0.5, -0.5});
  auto rv = Tensor<double>::from({2}, {4.0, 1.0});
  auto x = rkdtest::random_tensor<double>({1, 2, 2, 2}, rng);
  auto y = rkd::batch_norm2d(x, gamma, beta, rm, rv, /*training=*/false);
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t i = 0; i < 4; ++i) {
      const double xhat = (x.values()[c * 4 + i] - rm.values()[c]) /
                          std::sqrt(rv.values()[c] + 1e-5);
      EXPECT_NEAR(y.values()[c * 4 + i], 1.5 * xhat + 0.25, 1e-12);
    }
  // eval mode must not touch running stats
  EXPECT_DOUBLE_EQ(rm.values()[0], 0.5);
  EXPECT_DOUBLE_EQ(rv.values()[0], 4.0);
}

TEST(SquaredL2Mean, BatchMeanReduction) {
  auto a = Tensor<double>::full({1, 1, 2, 2}, 1.0);
  auto b = Tensor<double>::zeros({1, 1, 2, 2});
  EXPECT_DOUBLE_EQ(rkd::squared_l2_mean(a, b).item(), 4.0);
  // two identical samples -> same per-sample distance
  auto a2 = Tensor<double>::full({2, 1, 2, 2}, 1.0);
  auto b2 = Tensor<double>::zeros({2, 1, 2, 2});
  EXPECT_DOUBLE_EQ(rkd::squared_l2_mean(a2, b2).item(), 4.0);
}
