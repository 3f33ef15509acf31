// Copyright (c) 2026 The rkd authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "helpers.hpp"
#include "rkd/network.hpp"

using rkd::Tensor;

namespace {

rkd::NetworkSpec tiny_spec() { return rkd::reference_spec("tinyres8"); }

}  // namespace

TEST(Network, TapsMatchInference) {
  auto spec = tiny_spec();
  auto net = rkd::build_network<float>(spec, 7);
  rkd::Rng rng(3);
  auto x = rkdtest::random_tensor<float>({2, 1, 32, 32}, rng);
  rkd::NoGradGuard ng;
  auto fr = rkd::forward_with_taps(net, x, false);
  const auto taps = rkd::infer_tap_shapes(spec);
  ASSERT_EQ(fr.taps.size(), taps.size());
  for (size_t i = 0; i < taps.size(); ++i) {
    EXPECT_EQ(fr.taps[i].dim(1), taps[i].channels);
    EXPECT_EQ(fr.taps[i].dim(2), taps[i].height);
    EXPECT_EQ(fr.taps[i].dim(3), taps[i].width);
  }
  EXPECT_EQ(fr.logits.shape(), (rkd::Shape{2, 10}));
}

TEST(Network, LogitsRowsFormDistributionsAfterSoftmax) {
  auto net = rkd::build_network<float>(tiny_spec(), 11);
  rkd::Rng rng(5);
  auto x = rkdtest::random_tensor<float>({3, 1, 32, 32}, rng);
  rkd::NoGradGuard ng;
  auto fr = rkd::forward_with_taps(net, x, false);
  auto p = rkd::softmax_rows(fr.logits);
  for (int64_t i = 0; i < 3; ++i) {
    double sum = 0;
    for (int64_t c = 0; c < 10; ++c) sum += p.values()[i * 10 + c];
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(Network, DuplicatedSampleGivesIdenticalRowsInEval) {
  auto net = rkd::build_network<float>(tiny_spec(), 13);
  rkd::Rng rng(9);
  auto one = rkdtest::random_tensor<float>({1, 1, 32, 32}, rng);
  std::vector<float> dup(one.values());
  dup.insert(dup.end(), one.values().begin(), one.values().end());
  auto batch = Tensor<float>::from({2, 1, 32, 32}, std::move(dup));
  rkd::NoGradGuard ng;
  auto fr = rkd::forward_with_taps(net, batch, false);
  for (const auto& tap : fr.taps) {
    const int64_t per = tap.numel() / 2;
    for (int64_t e = 0; e < per; ++e)
      EXPECT_FLOAT_EQ(tap.values()[e], tap.values()[per + e]);
  }
  for (int64_t c = 0; c < 10; ++c)
    EXPECT_FLOAT_EQ(fr.logits.values()[c], fr.logits.values()[10 + c]);
}

TEST(Network, EvalForwardIsPureFunction) {
  auto net = rkd::build_network<float>(tiny_spec(), 21);
  rkd::Rng rng(17);
  auto x = rkdtest::random_tensor<float>({2, 1, 32, 32}, rng);
  rkd::NoGradGuard ng;
  auto a = rkd::forward_with_taps(net, x, false);
  auto b = rkd::forward_with_taps(net, x, false);
  EXPECT_EQ(a.logits.values(), b.logits.values());
  const uint64_t cks = rkd::state_checksum(net);
  rkd::forward_with_taps(net, x, false);
  EXPECT_EQ(rkd::state_checksum(net), cks);  // eval mode mutates nothing
}

TEST(Network, SeededBuildIsDeterministic) {
  auto a = rkd::build_network<float>(tiny_spec(), 33);
  auto b = rkd::build_network<float>(tiny_spec(), 33);
  EXPECT_EQ(rkd::state_checksum(a), rkd::state_checksum(b));
  auto c = rkd::build_network<float>(tiny_spec(), 34);
  EXPECT_NE(rkd::state_checksum(a), rkd::state_checksum(c));
}

TEST(Network, BatchMismatchRaises) {
  auto net = rkd::build_network<float>(tiny_spec(), 1);
  auto bad = Tensor<float>::zeros({1, 3, 32, 32});
  EXPECT_THROW(rkd::forward_with_taps(net, bad, false), rkd::ShapeError);
}

TEST(Network, BatchnormToggleChangesParameterSet) {
  auto with_bn = rkd::build_network<float>(tiny_spec(), 3, true);
  auto without_bn = rkd::build_network<float>(tiny_spec(), 3, false);
  EXPECT_GT(rkd::parameters(with_bn).size(), rkd::parameters(without_bn).size());
  rkd::Rng rng(2);
  auto x = rkdtest::random_tensor<float>({1, 1, 32, 32}, rng);
  rkd::NoGradGuard ng;
  EXPECT_NO_THROW(rkd::forward_with_taps(without_bn, x, false));
}

TEST(Adapter, IdentityPassThroughOnMatchingWidths) {
  auto a = rkd::make_adapters<float>({16, 32}, {16, 32}, 5);
  rkd::Rng rng(1);
  auto tap = rkdtest::random_tensor<float>({2, 16, 4, 4}, rng);
  auto out = rkd::adapt_feature(tap, a, 0);
  EXPECT_EQ(out.values(), tap.values());
}

TEST(Adapter, MapsToTeacherWidth) {
  auto a = rkd::make_adapters<float>({2, 8}, {3, 8}, 5);
  rkd::Rng rng(1);
  auto tap = rkdtest::random_tensor<float>({4, 2, 5, 5}, rng);
  auto out = rkd::adapt_feature(tap, a, 0);
  EXPECT_EQ(out.shape(), (rkd::Shape{4, 3, 5, 5}));
}

TEST(Adapter, MatchesPerPixelMatmulOracle) {
  auto a = rkd::make_adapters<double>({3, 8}, {5, 8}, 77);
  rkd::Rng rng(4);
  auto tap = rkdtest::random_tensor<double>({2, 3, 4, 4}, rng);
  auto got = rkd::adapt_feature(tap, a, 0);
  auto want = rkdtest::conv2d_oracle(tap, a.weights[0], Tensor<double>{}, 1, 0);
  for (int64_t i = 0; i < got.numel(); ++i)
    EXPECT_LT(rkdtest::rel_err(got.values()[i], want.values()[i]), 1e-6);
}

TEST(Adapter, LevelOutOfRange) {
  auto a = rkd::make_adapters<float>({4}, {4}, 5);
  auto tap = Tensor<float>::zeros({1, 4, 2, 2});
  EXPECT_THROW(rkd::adapt_feature(tap, a, 1), rkd::ShapeError);
  EXPECT_THROW(rkd::adapt_feature(tap, a, -1), rkd::ShapeError);
}

// Progressive-style builds override block input widths; identity shortcuts
// that stop matching must be rejected up front.
TEST(Network, BlockInputOverrides) {
  auto spec = tiny_spec();
  // teacher-width inputs for blocks 1..3 (taps of tinyres16 == tinyres8 widths)
  auto net = rkd::build_network<float>(spec, 3, true, {0, 16, 32, 64});
  rkd::Rng rng(8);
  rkd::NoGradGuard ng;
  auto x = rkdtest::random_tensor<float>({2, 1, 32, 32}, rng);
  auto f0 = rkd::forward_block(net, 0, x, false);
  EXPECT_EQ(f0.dim(1), 16);
  auto f1 = rkd::forward_block(net, 1, f0, false);
  EXPECT_EQ(f1.dim(1), 32);

  rkd::NetworkSpec bad;
  bad.input_shape = {1, 8, 8};
  bad.classes = 2;
  bad.blocks = {{rkd::LayerSpec::conv(4, 3, 1, 1)},
                {rkd::LayerSpec::residual(4, 1, rkd::Shortcut::Identity)}};
  EXPECT_NO_THROW(rkd::build_network<float>(bad, 1));
  EXPECT_THROW(rkd::build_network<float>(bad, 1, true, {0, 6}), rkd::ShapeError);
}
