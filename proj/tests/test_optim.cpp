// Copyright (c) 2026 The rkd authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "rkd/optim.hpp"
#include "rkd/ops.hpp"

using rkd::Tensor;

namespace {

// Puts the given values into p.grad by building sum-style losses is
// overkill for optimizer tests; poke the grad buffer directly.
void set_grad(Tensor<double>& p, double g) {
  p.node()->ensure_grad();
  for (auto& v : p.node()->grad) v = g;
}

}  // namespace

TEST(Sgd, NullStepLeavesParamsUntouched) {
  auto p = Tensor<double>::full({3}, 1.25, true);
  rkd::SgdMomentum<double> opt({p}, 0.9);
  set_grad(p, 0.0);
  opt.step(0.1);
  for (double v : p.values()) EXPECT_DOUBLE_EQ(v, 1.25);
  // zero lr with nonzero grad: velocity updates, params don't move
  set_grad(p, 1.0);
  opt.step(0.0);
  for (double v : p.values()) EXPECT_DOUBLE_EQ(v, 1.25);
}

TEST(Sgd, HeavyBallRule) {
  // p=1, g=1, v=0, lr=0.1, momentum=0.9 -> v=1, p=0.9
  auto p = Tensor<double>::full({1}, 1.0, true);
  rkd::SgdMomentum<double> opt({p}, 0.9);
  set_grad(p, 1.0);
  opt.step(0.1);
  EXPECT_NEAR(p.values()[0], 0.9, 1e-15);
  // second identical step: v = 0.9*1 + 1 = 1.9, p = 0.9 - 0.19 = 0.71
  set_grad(p, 1.0);
  opt.step(0.1);
  EXPECT_NEAR(p.values()[0], 0.71, 1e-15);
}

TEST(Sgd, MissingGradNamesParameter) {
  auto p = Tensor<double>::full({2}, 1.0, true);
  p.set_name("b0.l0.conv.w");
  rkd::SgdMomentum<double> opt({p}, 0.9);
  try {
    opt.step(0.1);
    FAIL() << "expected error";
  } catch (const rkd::ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("b0.l0.conv.w"), std::string::npos);
  }
}

TEST(Sgd, MomentumRangeValidated) {
  auto p = Tensor<double>::full({1}, 1.0, true);
  EXPECT_THROW(rkd::SgdMomentum<double>({p}, 1.0), rkd::ConfigError);
  EXPECT_THROW(rkd::SgdMomentum<double>({p}, -0.1), rkd::ConfigError);
}

TEST(LrSchedule, StepDecay) {
  rkd::LrSchedule s{0.1, 30, 0.1};
  EXPECT_DOUBLE_EQ(s.lr(0), 0.1);
  EXPECT_DOUBLE_EQ(s.lr(29), 0.1);
  EXPECT_DOUBLE_EQ(s.lr(30), 0.01);
  EXPECT_DOUBLE_EQ(s.lr(60), 0.001);
  EXPECT_NEAR(s.lr(90), 0.0001, 1e-18);
}

TEST(LrSchedule, ConstantWhenDisabled) {
  rkd::LrSchedule s{0.05, 0, 0.1};
  EXPECT_DOUBLE_EQ(s.lr(0), 0.05);
  EXPECT_DOUBLE_EQ(s.lr(1000), 0.05);
}
