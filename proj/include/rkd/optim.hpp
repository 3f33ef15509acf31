// Copyright (c) 2026 The rkd authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "rkd/tensor.hpp"

namespace rkd {

// Step learning-rate schedule: base scaled by `factor` every `decay_every`
// epochs. decay_every <= 0 means a constant rate.
struct LrSchedule {
  double base = 0.1;
  int decay_every = 30;
  double factor = 0.1;

  double lr(int epoch) const {
    if (decay_every <= 0) return base;
    double v = base;
    for (int e = decay_every; e <= epoch; e += decay_every) v *= factor;
    return v;
  }
};

// Heavy-ball SGD: v <- momentum*v + g; p <- p - lr*v.
template <typename S>
class SgdMomentum {
 public:
  SgdMomentum(std::vector<Tensor<S>> params, double momentum = 0.9)
      : params_(std::move(params)), momentum_(momentum) {
    if (momentum_ < 0.0 || momentum_ >= 1.0)
      throw ConfigError("sgd: momentum must lie in [0,1), got " + std::to_string(momentum_));
    velocity_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i)
      velocity_[i].assign(static_cast<size_t>(params_[i].numel()), S(0));
  }

  void step(double lr) {
    if (lr <= 0.0 && lr != 0.0) throw ConfigError("sgd: learning rate must be non-negative");
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor<S>& p = params_[i];
      if (!p.has_grad())
        throw ShapeError("sgd: parameter '" + (p.name().empty() ? ("#" + std::to_string(i)) : p.name()) +
                         "' has no gradient");
      const std::vector<S>& g = p.grad();
      std::vector<S>& v = velocity_[i];
      S* pv = p.data();
      const S m = static_cast<S>(momentum_);
      const S step_lr = static_cast<S>(lr);
      for (size_t j = 0; j < v.size(); ++j) {
        v[j] = m * v[j] + g[j];
        pv[j] -= step_lr * v[j];
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const std::vector<Tensor<S>>& params() const { return params_; }

 private:
  std::vector<Tensor<S>> params_;
  std::vector<std::vector<S>> velocity_;
  double momentum_;
};

}  // namespace rkd
