// Copyright (c) 2026 The rkd authors
// SPDX-License-Identifier: Apache-2.0
//
// Test-only oracles, kept independent from the library's compute paths:
// conv via explicit im2col + naive matmul, gradients via central finite
// differences.

#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "rkd/ops.hpp"
#include "rkd/rng.hpp"
#include "rkd/tensor.hpp"

namespace rkdtest {

inline double rel_err(double a, double b, double floor = 1e-8) {
  const double denom = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / denom;
}

// im2col: columns [Cin*kh*kw, Hout*Wout] per batch element, then a naive
// triple-loop matmul against the [Cout, Cin*kh*kw] weight matrix.
template <typename S>
rkd::Tensor<S> conv2d_oracle(const rkd::Tensor<S>& input, const rkd::Tensor<S>& weight,
                             const rkd::Tensor<S>& bias, int64_t stride, int64_t padding) {
  const int64_t N = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int64_t Cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  const int64_t Hout = (H + 2 * padding - kh) / stride + 1;
  const int64_t Wout = (W + 2 * padding - kw) / stride + 1;
  const int64_t K = Cin * kh * kw;
  const int64_t P = Hout * Wout;

  rkd::Tensor<S> out = rkd::Tensor<S>::zeros({N, Cout, Hout, Wout});
  std::vector<S> col(static_cast<size_t>(K * P));
  for (int64_t n = 0; n < N; ++n) {
    // materialize the column matrix
    for (int64_t ci = 0; ci < Cin; ++ci)
      for (int64_t i = 0; i < kh; ++i)
        for (int64_t j = 0; j < kw; ++j) {
          const int64_t krow = (ci * kh + i) * kw + j;
          for (int64_t oh = 0; oh < Hout; ++oh)
            for (int64_t ow = 0; ow < Wout; ++ow) {
              const int64_t ih = oh * stride - padding + i;
              const int64_t iw = ow * stride - padding + j;
              S v = 0;
              if (ih >= 0 && ih < H && iw >= 0 && iw < W)
                v = input.data()[((n * Cin + ci) * H + ih) * W + iw];
              col[static_cast<size_t>(krow * P + oh * Wout + ow)] = v;
            }
        }
    // naive matmul: [Cout, K] x [K, P]
    for (int64_t co = 0; co < Cout; ++co)
      for (int64_t p = 0; p < P; ++p) {
        S acc = bias.defined() ? bias.data()[co] : S(0);
        for (int64_t k = 0; k < K; ++k)
          acc += weight.data()[co * K + k] * col[static_cast<size_t>(k * P + p)];
        out.data()[(n * Cout + co) * P + p] = acc;
      }
  }
  return out;
}

template <typename S>
rkd::Tensor<S> random_tensor(rkd::Shape shape, rkd::Rng& rng, double scale = 1.0,
                             bool requires_grad = false) {
  auto t = rkd::Tensor<S>::randn(std::move(shape), rng, scale, requires_grad);
  return t;
}

// Values bounded away from zero, for ops with kinks (relu).
template <typename S>
rkd::Tensor<S> random_tensor_off_zero(rkd::Shape shape, rkd::Rng& rng,
                                      bool requires_grad = false) {
  std::vector<S> d(static_cast<size_t>(rkd::shape_numel(shape)));
  for (auto& v : d) {
    const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    v = static_cast<S>(sign * rng.uniform(0.2, 1.2));
  }
  return rkd::Tensor<S>::from(std::move(shape), std::move(d), requires_grad);
}

struct GradCheckResult {
  double max_rel_err = 0.0;
  int64_t checked = 0;
};

// Central finite differences at 64-bit against the autograd result. The
// forward closure rebuilds the graph from the (mutated-in-place) parameters.
inline GradCheckResult grad_check(std::vector<rkd::Tensor<double>> params,
                                  const std::function<rkd::Tensor<double>()>& forward,
                                  double step = 1e-5) {
  for (auto& p : params) p.zero_grad();
  rkd::Tensor<double> loss = forward();
  rkd::backward(loss);

  std::vector<std::vector<double>> analytic;
  for (auto& p : params)
    analytic.push_back(p.has_grad() ? p.grad() : std::vector<double>(p.numel(), 0.0));

  GradCheckResult res;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    double* data = params[pi].data();
    for (int64_t e = 0; e < params[pi].numel(); ++e) {
      const double orig = data[e];
      data[e] = orig + step;
      const double up = forward().item();
      data[e] = orig - step;
      const double down = forward().item();
      data[e] = orig;
      const double numeric = (up - down) / (2.0 * step);
      // The 1e-3 floor turns the comparison absolute for near-zero gradients,
      // where central differences only resolve down to ~1e-11.
      res.max_rel_err = std::max(
          res.max_rel_err, rel_err(analytic[pi][static_cast<size_t>(e)], numeric, 1e-3));
      ++res.checked;
    }
  }
  return res;
}

}  // namespace rkdtest
