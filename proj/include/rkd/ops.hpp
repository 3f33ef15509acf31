// Copyright (c) 2026 The rkd authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable ops over Tensor<S>. Forward kernels are plain loops arranged
// so the innermost dimension is contiguous (they vectorize under -O3); every
// parallel region assigns each output element to exactly one thread with a
// fixed reduction order, so results do not depend on the thread count.

#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "rkd/tensor.hpp"

namespace rkd {
namespace detail {

inline int64_t conv_extent(int64_t in, int64_t pad, int64_t k, int64_t stride,
                           const char* what) {
  int64_t span = in + 2 * pad - k;
  if (span < 0 || span % stride != 0)
    throw ShapeError(std::string(what) + ": output extent (" + std::to_string(in) + " + 2*" +
                     std::to_string(pad) + " - " + std::to_string(k) + ")/" +
                     std::to_string(stride) + " + 1 is not a positive integer");
  return span / stride + 1;
}

// Valid output range [lo, hi] for which is*stride - pad + k_off lands in [0, in).
inline void valid_out_range(int64_t out, int64_t in, int64_t pad, int64_t k_off, int64_t stride,
                            int64_t& lo, int64_t& hi) {
  int64_t t = pad - k_off;
  lo = t <= 0 ? 0 : (t + stride - 1) / stride;
  int64_t u = in - 1 + pad - k_off;
  hi = u < 0 ? -1 : std::min(out - 1, u / stride);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: cross-correlation, NCHW layout.
// input [N,Cin,H,W], weight [Cout,Cin,kh,kw], optional bias [Cout].
//
// The stride-1 path copies planes into zero-padded scratch whose row stride
// equals the padded output's, so every kernel tap becomes one constant-offset
// saxpy over a whole plane (the pad columns compute scratch values that are
// dropped on writeback). Strided convs take the general per-row path.
// ---------------------------------------------------------------------------
namespace detail {

struct ConvGeom {
  int64_t N, Cin, Cout, H, W, kh, kw, pad, Hout, Wout;
  int64_t rp;        // padded row stride
  int64_t rows_in;   // rows per padded input plane, incl. one guard row
  int64_t plen;      // padded output plane length = Hout * rp
  int64_t pb_plane;  // padded input plane length = rows_in * rp
};

inline ConvGeom conv_geom(int64_t N, int64_t Cin, int64_t Cout, int64_t H, int64_t W,
                          int64_t kh, int64_t kw, int64_t pad, int64_t Hout, int64_t Wout) {
  ConvGeom g{N, Cin, Cout, H, W, kh, kw, pad, Hout, Wout, 0, 0, 0, 0};
  g.rp = std::max(W + 2 * pad, Wout + kw - 1);
  g.rows_in = std::max(H + 2 * pad, Hout + kh - 1) + 1;
  g.plen = Hout * g.rp;
  g.pb_plane = g.rows_in * g.rp;
  return g;
}

// All input planes, zero-padded, shared read-only across threads.
template <typename S>
std::vector<S> pack_inputs(const S* in, const ConvGeom& g) {
  std::vector<S> pb(static_cast<size_t>(g.N * g.Cin * g.pb_plane), S(0));
#pragma omp parallel for schedule(static)
  for (int64_t nc = 0; nc < g.N * g.Cin; ++nc) {
    const S* plane = in + nc * g.H * g.W;
    S* dst = pb.data() + nc * g.pb_plane;
    for (int64_t ih = 0; ih < g.H; ++ih)
      std::copy(plane + ih * g.W, plane + (ih + 1) * g.W,
                dst + (ih + g.pad) * g.rp + g.pad);
  }
  return pb;
}

// Grad-out planes restrided to rp with zeroed pad columns.
template <typename S>
std::vector<S> pack_grad_out(const S* g_out, const ConvGeom& g) {
  std::vector<S> gpo(static_cast<size_t>(g.N * g.Cout * g.plen), S(0));
#pragma omp parallel for schedule(static)
  for (int64_t nc = 0; nc < g.N * g.Cout; ++nc) {
    const S* plane = g_out + nc * g.Hout * g.Wout;
    S* dst = gpo.data() + nc * g.plen;
    for (int64_t oh = 0; oh < g.Hout; ++oh)
      std::copy(plane + oh * g.Wout, plane + (oh + 1) * g.Wout, dst + oh * g.rp);
  }
  return gpo;
}

template <typename S>
void conv_fwd_s1(const S* in, const S* w, const S* b, S* out, const ConvGeom& g) {
  const std::vector<S> pb = pack_inputs(in, g);
  const int64_t co_pairs = (g.Cout + 1) / 2;  // two output channels share input reads
#pragma omp parallel
  {
    std::vector<S> po0(static_cast<size_t>(g.plen)), po1(static_cast<size_t>(g.plen));
#pragma omp for schedule(static)
    for (int64_t task = 0; task < g.N * co_pairs; ++task) {
      const int64_t n = task / co_pairs;
      const int64_t co = (task % co_pairs) * 2;
      const bool dual = co + 1 < g.Cout;
      std::fill(po0.begin(), po0.end(), S(0));
      if (dual) std::fill(po1.begin(), po1.end(), S(0));
      S* dst0 = po0.data();
      S* dst1 = po1.data();
      for (int64_t ci = 0; ci < g.Cin; ++ci) {
        const S* base = pb.data() + (n * g.Cin + ci) * g.pb_plane;
        const S* wb0 = w + (co * g.Cin + ci) * g.kh * g.kw;
        const S* wb1 = wb0 + g.Cin * g.kh * g.kw;
        for (int64_t i = 0; i < g.kh; ++i)
          for (int64_t j = 0; j < g.kw; ++j) {
            const S* src = base + i * g.rp + j;
            const S wv0 = wb0[i * g.kw + j];
            if (dual) {
              const S wv1 = wb1[i * g.kw + j];
              for (int64_t q = 0; q < g.plen; ++q) {
                const S v = src[q];
                dst0[q] += wv0 * v;
                dst1[q] += wv1 * v;
              }
            } else {
              for (int64_t q = 0; q < g.plen; ++q) dst0[q] += wv0 * src[q];
            }
          }
      }
      for (int64_t half = 0; half < (dual ? 2 : 1); ++half) {
        const S* src = half == 0 ? po0.data() : po1.data();
        S* out_plane = out + (n * g.Cout + co + half) * g.Hout * g.Wout;
        const S bv = b ? b[co + half] : S(0);
        for (int64_t oh = 0; oh < g.Hout; ++oh) {
          const S* row = src + oh * g.rp;
          S* orow = out_plane + oh * g.Wout;
          for (int64_t ow = 0; ow < g.Wout; ++ow) orow[ow] = row[ow] + bv;
        }
      }
    }
  }
}

template <typename S>
void conv_bwd_input_s1(const S* g_out, const S* w, S* gin, const ConvGeom& g) {
  const std::vector<S> gpo = pack_grad_out(g_out, g);
#pragma omp parallel
  {
    std::vector<S> gpb(static_cast<size_t>(g.pb_plane));
#pragma omp for schedule(static)
    for (int64_t nc = 0; nc < g.N * g.Cin; ++nc) {
      const int64_t n = nc / g.Cin, ci = nc % g.Cin;
      std::fill(gpb.begin(), gpb.end(), S(0));
      for (int64_t co = 0; co + 1 < g.Cout; co += 2) {
        const S* src0 = gpo.data() + (n * g.Cout + co) * g.plen;
        const S* src1 = src0 + g.plen;
        const S* wb0 = w + (co * g.Cin + ci) * g.kh * g.kw;
        const S* wb1 = wb0 + g.Cin * g.kh * g.kw;
        for (int64_t i = 0; i < g.kh; ++i)
          for (int64_t j = 0; j < g.kw; ++j) {
            const S wv0 = wb0[i * g.kw + j];
            const S wv1 = wb1[i * g.kw + j];
            S* dst = gpb.data() + i * g.rp + j;
            for (int64_t q = 0; q < g.plen; ++q) dst[q] += wv0 * src0[q] + wv1 * src1[q];
          }
      }
      if (g.Cout % 2) {
        const int64_t co = g.Cout - 1;
        const S* src = gpo.data() + (n * g.Cout + co) * g.plen;
        const S* wbase = w + (co * g.Cin + ci) * g.kh * g.kw;
        for (int64_t i = 0; i < g.kh; ++i)
          for (int64_t j = 0; j < g.kw; ++j) {
            const S wv = wbase[i * g.kw + j];
            S* dst = gpb.data() + i * g.rp + j;
            for (int64_t q = 0; q < g.plen; ++q) dst[q] += wv * src[q];
          }
      }
      S* gplane = gin + nc * g.H * g.W;
      for (int64_t ih = 0; ih < g.H; ++ih) {
        const S* row = gpb.data() + (ih + g.pad) * g.rp + g.pad;
        S* grow = gplane + ih * g.W;
        for (int64_t iw = 0; iw < g.W; ++iw) grow[iw] += row[iw];
      }
    }
  }
}

// Dot product with fixed 8-lane grouping: the deterministic reassociation
// lets the compiler vectorize what a strict left-fold reduction cannot.
template <typename S>
S lane_dot(const S* a, const S* b, int64_t n) {
  S lanes[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int64_t q = 0;
  for (; q + 8 <= n; q += 8)
    for (int64_t l = 0; l < 8; ++l) lanes[l] += a[q + l] * b[q + l];
  S acc = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) +
          ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
  for (; q < n; ++q) acc += a[q] * b[q];
  return acc;
}

template <typename S>
void conv_bwd_weight_s1(const S* in, const S* g_out, S* gw, const ConvGeom& g) {
  const std::vector<S> pb = pack_inputs(in, g);
  const std::vector<S> gpo = pack_grad_out(g_out, g);
#pragma omp parallel for schedule(static)
  for (int64_t co = 0; co < g.Cout; ++co) {
    for (int64_t n = 0; n < g.N; ++n) {
      const S* gbase = gpo.data() + (n * g.Cout + co) * g.plen;
      for (int64_t ci = 0; ci < g.Cin; ++ci) {
        const S* base = pb.data() + (n * g.Cin + ci) * g.pb_plane;
        S* gw_base = gw + (co * g.Cin + ci) * g.kh * g.kw;
        for (int64_t i = 0; i < g.kh; ++i)
          for (int64_t j = 0; j < g.kw; ++j)
            gw_base[i * g.kw + j] += lane_dot(gbase, base + i * g.rp + j, g.plen);
      }
    }
  }
}

// General strided kernels (the cold path).
template <typename S>
void conv_fwd_general(const S* in, const S* w, const S* b, S* out, const ConvGeom& g,
                      int64_t stride) {
#pragma omp parallel for schedule(static)
  for (int64_t nc = 0; nc < g.N * g.Cout; ++nc) {
    const int64_t n = nc / g.Cout, co = nc % g.Cout;
    S* out_plane = out + nc * g.Hout * g.Wout;
    if (b) {
      const S bv = b[co];
      for (int64_t i = 0; i < g.Hout * g.Wout; ++i) out_plane[i] = bv;
    }
    for (int64_t ci = 0; ci < g.Cin; ++ci) {
      const S* in_plane = in + (n * g.Cin + ci) * g.H * g.W;
      const S* wbase = w + (co * g.Cin + ci) * g.kh * g.kw;
      for (int64_t i = 0; i < g.kh; ++i)
        for (int64_t j = 0; j < g.kw; ++j) {
          const S wv = wbase[i * g.kw + j];
          int64_t lo, hi;
          valid_out_range(g.Wout, g.W, g.pad, j, stride, lo, hi);
          if (hi < lo) continue;
          for (int64_t oh = 0; oh < g.Hout; ++oh) {
            const int64_t ih = oh * stride - g.pad + i;
            if (ih < 0 || ih >= g.H) continue;
            const S* in_row = in_plane + ih * g.W;
            S* out_row = out_plane + oh * g.Wout;
            for (int64_t ow = lo; ow <= hi; ++ow)
              out_row[ow] += wv * in_row[ow * stride - g.pad + j];
          }
        }
    }
  }
}

template <typename S>
void conv_bwd_weight_general(const S* in, const S* g_out, S* gw, const ConvGeom& g,
                             int64_t stride) {
#pragma omp parallel for schedule(static)
  for (int64_t co = 0; co < g.Cout; ++co) {
    for (int64_t n = 0; n < g.N; ++n) {
      const S* g_plane = g_out + (n * g.Cout + co) * g.Hout * g.Wout;
      for (int64_t ci = 0; ci < g.Cin; ++ci) {
        const S* in_plane = in + (n * g.Cin + ci) * g.H * g.W;
        S* gw_base = gw + (co * g.Cin + ci) * g.kh * g.kw;
        for (int64_t i = 0; i < g.kh; ++i)
          for (int64_t j = 0; j < g.kw; ++j) {
            int64_t lo, hi;
            valid_out_range(g.Wout, g.W, g.pad, j, stride, lo, hi);
            if (hi < lo) continue;
            S acc = 0;
            for (int64_t oh = 0; oh < g.Hout; ++oh) {
              const int64_t ih = oh * stride - g.pad + i;
              if (ih < 0 || ih >= g.H) continue;
              const S* g_row = g_plane + oh * g.Wout;
              const S* in_row = in_plane + ih * g.W;
              for (int64_t ow = lo; ow <= hi; ++ow)
                acc += g_row[ow] * in_row[ow * stride - g.pad + j];
            }
            gw_base[i * g.kw + j] += acc;
          }
      }
    }
  }
}

template <typename S>
void conv_bwd_input_general(const S* g_out, const S* w, S* gin, const ConvGeom& g,
                            int64_t stride) {
#pragma omp parallel for schedule(static)
  for (int64_t nci = 0; nci < g.N * g.Cin; ++nci) {
    const int64_t n = nci / g.Cin, ci = nci % g.Cin;
    S* gin_plane = gin + nci * g.H * g.W;
    for (int64_t co = 0; co < g.Cout; ++co) {
      const S* g_plane = g_out + (n * g.Cout + co) * g.Hout * g.Wout;
      const S* wbase = w + (co * g.Cin + ci) * g.kh * g.kw;
      for (int64_t i = 0; i < g.kh; ++i)
        for (int64_t j = 0; j < g.kw; ++j) {
          const S wv = wbase[i * g.kw + j];
          int64_t lo, hi;
          valid_out_range(g.Wout, g.W, g.pad, j, stride, lo, hi);
          if (hi < lo) continue;
          for (int64_t oh = 0; oh < g.Hout; ++oh) {
            const int64_t ih = oh * stride - g.pad + i;
            if (ih < 0 || ih >= g.H) continue;
            const S* g_row = g_plane + oh * g.Wout;
            S* gin_row = gin_plane + ih * g.W;
            for (int64_t ow = lo; ow <= hi; ++ow)
              gin_row[ow * stride - g.pad + j] += wv * g_row[ow];
          }
        }
    }
  }
}

}  // namespace detail

template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias,
                 int64_t stride, int64_t padding) {
  if (input.ndim() != 4 || weight.ndim() != 4)
    throw ShapeError("conv2d: expected 4-d input and weight, got " + shape_str(input.shape()) +
                     " and " + shape_str(weight.shape()));
  if (stride < 1) throw ShapeError("conv2d: stride must be positive");
  if (padding < 0) throw ShapeError("conv2d: padding must be non-negative");
  const int64_t N = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int64_t Cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != Cin)
    throw ShapeError("conv2d: weight expects " + std::to_string(weight.dim(1)) +
                     " input channels but input has " + std::to_string(Cin) + " (input " +
                     shape_str(input.shape()) + ", weight " + shape_str(weight.shape()) + ")");
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != Cout))
    throw ShapeError("conv2d: bias shape " + shape_str(bias.shape()) + " does not match Cout=" +
                     std::to_string(Cout));
  const int64_t Hout = detail::conv_extent(H, padding, kh, stride, "conv2d height");
  const int64_t Wout = detail::conv_extent(W, padding, kw, stride, "conv2d width");

  const detail::ConvGeom geom =
      detail::conv_geom(N, Cin, Cout, H, W, kh, kw, padding, Hout, Wout);
  Tensor<S> out = Tensor<S>::zeros({N, Cout, Hout, Wout});
  {
    const S* b = bias.defined() ? bias.data() : nullptr;
    if (stride == 1)
      detail::conv_fwd_s1(input.data(), weight.data(), b, out.data(), geom);
    else
      detail::conv_fwd_general(input.data(), weight.data(), b, out.data(), geom, stride);
  }

  if (detail::tracing<S>({&input, &weight, &bias})) {
    auto in_n = input.node();
    auto w_n = weight.node();
    auto b_n = bias.defined() ? bias.node() : nullptr;
    out.node()->requires_grad = true;
    out.node()->parents = {in_n, w_n};
    if (b_n) out.node()->parents.push_back(b_n);
    const int64_t s = stride;
    out.node()->backward_fn = [=](TensorNode<S>& self) {
      const S* g = self.grad.data();
      if (b_n && b_n->requires_grad) {
        b_n->ensure_grad();
        for (int64_t co = 0; co < Cout; ++co) {
          S acc = 0;
          for (int64_t n = 0; n < N; ++n) {
            const S* gp = g + (n * Cout + co) * Hout * Wout;
            for (int64_t i = 0; i < Hout * Wout; ++i) acc += gp[i];
          }
          b_n->grad[co] += acc;
        }
      }
      if (w_n->requires_grad) {
        w_n->ensure_grad();
        if (s == 1)
          detail::conv_bwd_weight_s1(in_n->value.data(), g, w_n->grad.data(), geom);
        else
          detail::conv_bwd_weight_general(in_n->value.data(), g, w_n->grad.data(), geom, s);
      }
      if (in_n->requires_grad) {
        in_n->ensure_grad();
        if (s == 1)
          detail::conv_bwd_input_s1(g, w_n->value.data(), in_n->grad.data(), geom);
        else
          detail::conv_bwd_input_general(g, w_n->value.data(), in_n->grad.data(), geom, s);
      }
    };
  }
  return out;
}

template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight, int64_t stride,
                 int64_t padding) {
  return conv2d(input, weight, Tensor<S>{}, stride, padding);
}

// ---------------------------------------------------------------------------
// linear: out = input @ weight^T + bias.  input [N,In], weight [Out,In].
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> linear(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias) {
  if (input.ndim() != 2 || weight.ndim() != 2)
    throw ShapeError("linear: expected 2-d input and weight, got " + shape_str(input.shape()) +
                     " and " + shape_str(weight.shape()));
  const int64_t N = input.dim(0), In = input.dim(1), Out = weight.dim(0);
  if (weight.dim(1) != In)
    throw ShapeError("linear: weight expects " + std::to_string(weight.dim(1)) +
                     " features but input has " + std::to_string(In));
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != Out))
    throw ShapeError("linear: bias shape " + shape_str(bias.shape()) + " does not match Out=" +
                     std::to_string(Out));

  Tensor<S> out = Tensor<S>::zeros({N, Out});
  const S* in = input.data();
  const S* w = weight.data();
  const S* b = bias.defined() ? bias.data() : nullptr;
  S* o = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t n = 0; n < N; ++n) {
    const S* in_row = in + n * In;
    S* out_row = o + n * Out;
    for (int64_t k = 0; k < Out; ++k) {
      const S* w_row = w + k * In;
      S acc = b ? b[k] : S(0);
      for (int64_t i = 0; i < In; ++i) acc += in_row[i] * w_row[i];
      out_row[k] = acc;
    }
  }

  if (detail::tracing<S>({&input, &weight, &bias})) {
    auto in_n = input.node();
    auto w_n = weight.node();
    auto b_n = bias.defined() ? bias.node() : nullptr;
    out.node()->requires_grad = true;
    out.node()->parents = {in_n, w_n};
    if (b_n) out.node()->parents.push_back(b_n);
    out.node()->backward_fn = [=](TensorNode<S>& self) {
      const S* g = self.grad.data();
      if (b_n && b_n->requires_grad) {
        b_n->ensure_grad();
        for (int64_t k = 0; k < Out; ++k) {
          S acc = 0;
          for (int64_t n = 0; n < N; ++n) acc += g[n * Out + k];
          b_n->grad[k] += acc;
        }
      }
      if (w_n->requires_grad) {
        w_n->ensure_grad();
        const S* in = in_n->value.data();
        S* gw = w_n->grad.data();
#pragma omp parallel for schedule(static)
        for (int64_t k = 0; k < Out; ++k) {
          S* gw_row = gw + k * In;
          for (int64_t n = 0; n < N; ++n) {
            const S gv = g[n * Out + k];
            const S* in_row = in + n * In;
            for (int64_t i = 0; i < In; ++i) gw_row[i] += gv * in_row[i];
          }
        }
      }
      if (in_n->requires_grad) {
        in_n->ensure_grad();
        const S* w = w_n->value.data();
        S* gin = in_n->grad.data();
#pragma omp parallel for schedule(static)
        for (int64_t n = 0; n < N; ++n) {
          S* gin_row = gin + n * In;
          const S* g_row = g + n * Out;
          for (int64_t k = 0; k < Out; ++k) {
            const S gv = g_row[k];
            const S* w_row = w + k * In;
            for (int64_t i = 0; i < In; ++i) gin_row[i] += gv * w_row[i];
          }
        }
      }
    };
  }
  return out;
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S* xi = x.data();
  S* o = out.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) o[i] = xi[i] > S(0) ? xi[i] : S(0);
  if (detail::tracing<S>({&x})) {
    auto x_n = x.node();
    out.node()->requires_grad = true;
    out.node()->parents = {x_n};
    out.node()->backward_fn = [=](TensorNode<S>& self) {
      if (!x_n->requires_grad) return;
      x_n->ensure_grad();
      const S* g = self.grad.data();
      const S* xv = x_n->value.data();
      S* gx = x_n->grad.data();
      for (int64_t i = 0; i < n; ++i)
        if (xv[i] > S(0)) gx[i] += g[i];
    };
  }
  return out;
}

// Average pooling with a fixed divisor k*k (padding, when present, counts as
// zeros in the average).
template <typename S>
Tensor<S> avg_pool2d(const Tensor<S>& x, int64_t k, int64_t stride, int64_t padding) {
  if (x.ndim() != 4) throw ShapeError("avg_pool2d: expected 4-d input, got " + shape_str(x.shape()));
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Hout = detail::conv_extent(H, padding, k, stride, "avg_pool2d height");
  const int64_t Wout = detail::conv_extent(W, padding, k, stride, "avg_pool2d width");
  const S inv = S(1) / static_cast<S>(k * k);

  Tensor<S> out = Tensor<S>::zeros({N, C, Hout, Wout});
  const S* xi = x.data();
  S* o = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const S* in_plane = xi + nc * H * W;
    S* out_plane = o + nc * Hout * Wout;
    for (int64_t oh = 0; oh < Hout; ++oh) {
      for (int64_t ow = 0; ow < Wout; ++ow) {
        S acc = 0;
        for (int64_t i = 0; i < k; ++i) {
          const int64_t ih = oh * stride - padding + i;
          if (ih < 0 || ih >= H) continue;
          for (int64_t j = 0; j < k; ++j) {
            const int64_t iw = ow * stride - padding + j;
            if (iw < 0 || iw >= W) continue;
            acc += in_plane[ih * W + iw];
          }
        }
        out_plane[oh * Wout + ow] = acc * inv;
      }
    }
  }

  if (detail::tracing<S>({&x})) {
    auto x_n = x.node();
    out.node()->requires_grad = true;
    out.node()->parents = {x_n};
    const int64_t s = stride, p = padding;
    out.node()->backward_fn = [=](TensorNode<S>& self) {
      if (!x_n->requires_grad) return;
      x_n->ensure_grad();
      const S* g = self.grad.data();
      S* gx = x_n->grad.data();
#pragma omp parallel for schedule(static)
      for (int64_t nc = 0; nc < N * C; ++nc) {
        const S* g_plane = g + nc * Hout * Wout;
        S* gx_plane = gx + nc * H * W;
        for (int64_t oh = 0; oh < Hout; ++oh) {
          for (int64_t ow = 0; ow < Wout; ++ow) {
            const S gv = g_plane[oh * Wout + ow] * inv;
            for (int64_t i = 0; i < k; ++i) {
              const int64_t ih = oh * s - p + i;
              if (ih < 0 || ih >= H) continue;
              for (int64_t j = 0; j < k; ++j) {
                const int64_t iw = ow * s - p + j;
                if (iw < 0 || iw >= W) continue;
                gx_plane[ih * W + iw] += gv;
              }
            }
          }
        }
      }
    };
  }
  return out;
}

// [N,C,H,W] -> [N,C] spatial mean.
template <typename S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
  if (x.ndim() != 4)
    throw ShapeError("global_avg_pool: expected 4-d input, got " + shape_str(x.shape()));
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  const S inv = S(1) / static_cast<S>(HW);
  Tensor<S> out = Tensor<S>::zeros({N, C});
  const S* xi = x.data();
  S* o = out.data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const S* plane = xi + nc * HW;
    S acc = 0;
    for (int64_t i = 0; i < HW; ++i) acc += plane[i];
    o[nc] = acc * inv;
  }
  if (detail::tracing<S>({&x})) {
    auto x_n = x.node();
    out.node()->requires_grad = true;
    out.node()->parents = {x_n};
    out.node()->backward_fn = [=](TensorNode<S>& self) {
      if (!x_n->requires_grad) return;
      x_n->ensure_grad();
      const S* g = self.grad.data();
      S* gx = x_n->grad.data();
      for (int64_t nc = 0; nc < N * C; ++nc) {
        const S gv = g[nc] * inv;
        S* plane = gx + nc * HW;
        for (int64_t i = 0; i < HW; ++i) plane[i] += gv;
      }
    };
  }
  return out;
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* av = a.data();
  const S* bv = b.data();
  S* o = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) o[i] = av[i] + bv[i];
  if (detail::tracing<S>({&a, &b})) {
    auto a_n = a.node();
    auto b_n = b.node();
    out.node()->requires_grad = true;
    out.node()->parents = {a_n, b_n};
    out.node()->backward_fn = [=](TensorNode<S>& self) {
      detail::accumulate(*a_n, self.grad.data());
      detail::accumulate(*b_n, self.grad.data());
    };
  }
  return out;
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* av = a.data();
  const S* bv = b.data();
  S* o = out.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) o[i] = av[i] - bv[i];
  if (detail::tracing<S>({&a, &b})) {
    auto a_n = a.node();
    auto b_n = b.node();
    out.node()->requires_grad = true;
    out.node()->parents = {a_n, b_n};
    out.node()->backward_fn = [=](TensorNode<S>& self) {
      detail::accumulate(*a_n, self.grad.data());
      if (b_n->requires_grad) {
        b_n->ensure_grad();
        const S* g = self.grad.data();
        for (int64_t i = 0; i < n; ++i) b_n->grad[i] -= g[i];
      }
    };
  }
  return out;
}

// Batch-mean squared l2 distance: (1/N) * sum over all elements of (a-b)^2,
// where N is the leading (batch) extent.
template <typename S>
Tensor<S> squared_l2_mean(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("squared_l2_mean: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  if (a.ndim() < 1) throw ShapeError("squared_l2_mean: input must have a batch dimension");
  const int64_t n = a.numel();
  const S inv_batch = S(1) / static_cast<S>(a.dim(0));
  const S* av = a.data();
  const S* bv = b.data();
  S acc = 0;
  for (int64_t i = 0; i < n; ++i) {
    const S d = av[i] - bv[i];
    acc += d * d;
  }
  Tensor<S> out = Tensor<S>::scalar(acc * inv_batch);
  if (detail::tracing<S>({&a, &b})) {
    auto a_n = a.node();
    auto b_n = b.node();
    out.node()->requires_grad = true;
    out.node()->parents = {a_n, b_n};
    out.node()->backward_fn = [=](TensorNode<S>& self) {
      const S g = self.grad[0] * S(2) * inv_batch;
      const S* av = a_n->value.data();
      const S* bv = b_n->value.data();
      if (a_n->requires_grad) {
        a_n->ensure_grad();
        for (int64_t i = 0; i < n; ++i) a_n->grad[i] += g * (av[i] - bv[i]);
      }
      if (b_n->requires_grad) {
        b_n->ensure_grad();
        for (int64_t i = 0; i < n; ++i) b_n->grad[i] -= g * (av[i] - bv[i]);
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy with one-hot labels, mean over the batch.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> softmax_cross_entropy(const Tensor<S>& logits, const Tensor<S>& labels) {
  if (logits.ndim() != 2 || labels.ndim() != 2 || logits.shape() != labels.shape())
    throw ShapeError("softmax_cross_entropy: logits " + shape_str(logits.shape()) +
                     " and labels " + shape_str(labels.shape()) + " must be matching 2-d");
  const int64_t N = logits.dim(0), C = logits.dim(1);
  const S* y = labels.data();
  for (int64_t i = 0; i < N; ++i) {
    S sum = 0;
    bool onehot = true;
    for (int64_t c = 0; c < C; ++c) {
      const S v = y[i * C + c];
      sum += v;
      if (std::abs(static_cast<double>(v)) > 1e-6 &&
          std::abs(static_cast<double>(v) - 1.0) > 1e-6)
        onehot = false;
    }
    if (!onehot || std::abs(static_cast<double>(sum) - 1.0) > 1e-6)
      throw ShapeError("softmax_cross_entropy: label row " + std::to_string(i) +
                       " is not one-hot");
  }

  const S* z = logits.data();
  S total = 0;
  for (int64_t i = 0; i < N; ++i) {
    const S* row = z + i * C;
    S m = row[0];
    for (int64_t c = 1; c < C; ++c) m = std::max(m, row[c]);
    S lse = 0;
    for (int64_t c = 0; c < C; ++c) lse += std::exp(row[c] - m);
    lse = m + std::log(lse);
    S picked = 0;
    for (int64_t c = 0; c < C; ++c) picked += y[i * C + c] * row[c];
    total += lse - picked;
  }
  Tensor<S> out = Tensor<S>::scalar(total / static_cast<S>(N));

  if (detail::tracing<S>({&logits})) {
    auto z_n = logits.node();
    auto y_n = labels.node();
    out.node()->requires_grad = true;
    out.node()->parents = {z_n, y_n};
    out.node()->backward_fn = [=](TensorNode<S>& self) {
      if (!z_n->requires_grad) return;
      z_n->ensure_grad();
      const S g = self.grad[0] / static_cast<S>(N);
      const S* z = z_n->value.data();
      const S* y = y_n->value.data();
      S* gz = z_n->grad.data();
      for (int64_t i = 0; i < N; ++i) {
        const S* row = z + i * C;
        S m = row[0];
        for (int64_t c = 1; c < C; ++c) m = std::max(m, row[c]);
        S denom = 0;
        for (int64_t c = 0; c < C; ++c) denom += std::exp(row[c] - m);
        for (int64_t c = 0; c < C; ++c)
          gz[i * C + c] += g * (std::exp(row[c] - m) / denom - y[i * C + c]);
      }
    };
  }
  return out;
}

// Row softmax, inference only (records no graph).
template <typename S>
Tensor<S> softmax_rows(const Tensor<S>& logits) {
  if (logits.ndim() != 2)
    throw ShapeError("softmax_rows: expected 2-d logits, got " + shape_str(logits.shape()));
  const int64_t N = logits.dim(0), C = logits.dim(1);
  Tensor<S> out = Tensor<S>::zeros({N, C});
  const S* z = logits.data();
  S* o = out.data();
  for (int64_t i = 0; i < N; ++i) {
    const S* row = z + i * C;
    S* orow = o + i * C;
    S m = row[0];
    for (int64_t c = 1; c < C; ++c) m = std::max(m, row[c]);
    S denom = 0;
    for (int64_t c = 0; c < C; ++c) {
      orow[c] = std::exp(row[c] - m);
      denom += orow[c];
    }
    for (int64_t c = 0; c < C; ++c) orow[c] /= denom;
  }
  return out;
}

template <typename S>
Tensor<S> one_hot(const std::vector<int>& labels, int64_t classes) {
  Tensor<S> out = Tensor<S>::zeros({static_cast<int64_t>(labels.size()), classes});
  S* o = out.data();
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes)
      throw ShapeError("one_hot: label " + std::to_string(labels[i]) + " out of range for " +
                       std::to_string(classes) + " classes");
    o[i * classes + labels[i]] = S(1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization over [N,C,H,W] with per-channel affine parameters.
// `running_mean`/`running_var` are state buffers mutated in training mode.
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> batch_norm2d(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta,
                       Tensor<S>& running_mean, Tensor<S>& running_var, bool training,
                       double momentum = 0.1, double eps = 1e-5) {
  if (x.ndim() != 4) throw ShapeError("batch_norm2d: expected 4-d input, got " + shape_str(x.shape()));
  const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C ||
      running_var.numel() != C)
    throw ShapeError("batch_norm2d: parameter extents do not match " + std::to_string(C) +
                     " channels");
  const int64_t M = N * HW;

  std::vector<S> mean(C), invstd(C);
  if (training) {
    S* rm = running_mean.data();
    S* rv = running_var.data();
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < C; ++c) {
      const S* xv = x.data();
      S acc = 0;
      for (int64_t n = 0; n < N; ++n) {
        const S* plane = xv + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) acc += plane[i];
      }
      const S mu = acc / static_cast<S>(M);
      S var = 0;
      for (int64_t n = 0; n < N; ++n) {
        const S* plane = xv + (n * C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) {
          const S d = plane[i] - mu;
          var += d * d;
        }
      }
      var /= static_cast<S>(M);
      mean[c] = mu;
      invstd[c] = S(1) / std::sqrt(var + static_cast<S>(eps));
      rm[c] = static_cast<S>((1.0 - momentum) * rm[c] + momentum * mu);
      rv[c] = static_cast<S>((1.0 - momentum) * rv[c] + momentum * var);
    }
  } else {
    const S* rm = running_mean.data();
    const S* rv = running_var.data();
    for (int64_t c = 0; c < C; ++c) {
      mean[c] = rm[c];
      invstd[c] = S(1) / std::sqrt(rv[c] + static_cast<S>(eps));
    }
  }

  Tensor<S> out = Tensor<S>::zeros(x.shape());
  {
    const S* xv = x.data();
    const S* gm = gamma.data();
    const S* bt = beta.data();
    S* o = out.data();
#pragma omp parallel for schedule(static)
    for (int64_t nc = 0; nc < N * C; ++nc) {
      const int64_t c = nc % C;
      const S mu = mean[c], is = invstd[c], gv = gm[c], bv = bt[c];
      const S* plane = xv + nc * HW;
      S* oplane = o + nc * HW;
      for (int64_t i = 0; i < HW; ++i) oplane[i] = (plane[i] - mu) * is * gv + bv;
    }
  }

  if (detail::tracing<S>({&x, &gamma, &beta})) {
    auto x_n = x.node();
    auto g_n = gamma.node();
    auto b_n = beta.node();
    out.node()->requires_grad = true;
    out.node()->parents = {x_n, g_n, b_n};
    const bool train_stats = training;
    out.node()->backward_fn = [=](TensorNode<S>& self) {
      const S* g = self.grad.data();
      const S* xv = x_n->value.data();
      const S* gm = g_n->value.data();
      std::vector<S> sum_dy(C, S(0)), sum_dy_xhat(C, S(0));
#pragma omp parallel for schedule(static)
      for (int64_t c = 0; c < C; ++c) {
        const S mu = mean[c], is = invstd[c];
        S a = 0, b = 0;
        for (int64_t n = 0; n < N; ++n) {
          const S* gp = g + (n * C + c) * HW;
          const S* xp = xv + (n * C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) {
            a += gp[i];
            b += gp[i] * (xp[i] - mu) * is;
          }
        }
        sum_dy[c] = a;
        sum_dy_xhat[c] = b;
      }
      if (g_n->requires_grad) {
        g_n->ensure_grad();
        for (int64_t c = 0; c < C; ++c) g_n->grad[c] += sum_dy_xhat[c];
      }
      if (b_n->requires_grad) {
        b_n->ensure_grad();
        for (int64_t c = 0; c < C; ++c) b_n->grad[c] += sum_dy[c];
      }
      if (x_n->requires_grad) {
        x_n->ensure_grad();
        S* gx = x_n->grad.data();
        const S invM = S(1) / static_cast<S>(M);
#pragma omp parallel for schedule(static)
        for (int64_t nc = 0; nc < N * C; ++nc) {
          const int64_t c = nc % C;
          const S mu = mean[c], is = invstd[c], gscale = gm[c] * is;
          const S* gp = g + nc * HW;
          const S* xp = xv + nc * HW;
          S* gxp = gx + nc * HW;
          if (train_stats) {
            const S mean_dy = sum_dy[c] * invM;
            const S mean_dy_xhat = sum_dy_xhat[c] * invM;
            for (int64_t i = 0; i < HW; ++i) {
              const S xhat = (xp[i] - mu) * is;
              gxp[i] += gscale * (gp[i] - mean_dy - xhat * mean_dy_xhat);
            }
          } else {
            for (int64_t i = 0; i < HW; ++i) gxp[i] += gscale * gp[i];
          }
        }
      }
    };
  }
  return out;
}

}  // namespace rkd
