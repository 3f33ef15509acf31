// Copyright (c) 2026 The rkd authors
// SPDX-License-Identifier: Apache-2.0
//
// Builds runnable networks from NetworkSpec. A built network is a list of
// blocks, each a list of concrete layers; residual blocks expand to their
// main path + shortcut. Forward passes expose the K per-block feature maps.

#pragma once

#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "rkd/netspec.hpp"
#include "rkd/ops.hpp"

namespace rkd {

template <typename S>
struct BuiltLayer {
  LayerKind kind = LayerKind::Relu;
  // conv
  Tensor<S> w, b;
  int64_t stride = 1, padding = 0;
  // batchnorm
  Tensor<S> gamma, beta, run_mean, run_var;
  // avgpool
  int64_t pool_k = 1;
  // residual block
  std::vector<BuiltLayer<S>> main_path, shortcut_path;
};

template <typename S>
struct Network {
  NetworkSpec spec;
  bool use_batchnorm = true;
  std::vector<int64_t> block_input_channels;  // actual input widths per block
  std::vector<std::vector<BuiltLayer<S>>> blocks;
  Tensor<S> fc_w, fc_b;  // classifier over the pooled final tap

  int64_t tap_count() const { return static_cast<int64_t>(blocks.size()); }
};

namespace detail {

template <typename S>
Tensor<S> kaiming_conv(int64_t cout, int64_t cin, int64_t kh, int64_t kw, Rng& rng) {
  const double fan_in = static_cast<double>(cin * kh * kw);
  Tensor<S> t = Tensor<S>::randn({cout, cin, kh, kw}, rng, std::sqrt(2.0 / fan_in));
  t.set_requires_grad(true);
  return t;
}

template <typename S>
Tensor<S> kaiming_linear(int64_t out, int64_t in, Rng& rng) {
  Tensor<S> t = Tensor<S>::randn({out, in}, rng, std::sqrt(2.0 / static_cast<double>(in)));
  t.set_requires_grad(true);
  return t;
}

template <typename S>
Tensor<S> param_zeros(Shape shape) {
  Tensor<S> t = Tensor<S>::zeros(std::move(shape));
  t.set_requires_grad(true);
  return t;
}

template <typename S>
BuiltLayer<S> make_conv_layer(int64_t cin, int64_t cout, int64_t k, int64_t stride,
                              int64_t padding, bool bias, Rng& rng, const std::string& name) {
  BuiltLayer<S> l;
  l.kind = LayerKind::Conv;
  l.w = kaiming_conv<S>(cout, cin, k, k, rng);
  l.w.set_name(name + ".w");
  l.stride = stride;
  l.padding = padding;
  if (bias) {
    l.b = param_zeros<S>({cout});
    l.b.set_name(name + ".b");
  }
  return l;
}

template <typename S>
BuiltLayer<S> make_bn_layer(int64_t c, const std::string& name) {
  BuiltLayer<S> l;
  l.kind = LayerKind::BatchNorm;
  l.gamma = Tensor<S>::full({c}, S(1));
  l.gamma.set_requires_grad(true);
  l.gamma.set_name(name + ".gamma");
  l.beta = param_zeros<S>({c});
  l.beta.set_name(name + ".beta");
  l.run_mean = Tensor<S>::zeros({c});
  l.run_mean.set_name(name + ".run_mean");
  l.run_var = Tensor<S>::full({c}, S(1));
  l.run_var.set_name(name + ".run_var");
  return l;
}

}  // namespace detail

// Builds a network with seeded Kaiming initialization. `block_input_channels`
// optionally overrides the input width of blocks >= 1 (progressive training
// feeds teacher-width fused features between blocks).
template <typename S>
Network<S> build_network(const NetworkSpec& spec, uint64_t seed, bool use_batchnorm = true,
                         std::vector<int64_t> block_input_channels = {}) {
  infer_tap_shapes(spec);  // validate before allocating anything
  if (!block_input_channels.empty()) {
    // Overridden block inputs must still satisfy the residual-shortcut rule.
    for (size_t bi = 1; bi < spec.blocks.size() && bi < block_input_channels.size(); ++bi) {
      int64_t c = block_input_channels[bi];
      for (size_t li = 0; li < spec.blocks[bi].size(); ++li) {
        const LayerSpec& l = spec.blocks[bi][li];
        if (l.kind == LayerKind::Conv) c = l.channels;
        if (l.kind == LayerKind::ResidualBlock) {
          if ((l.channels != c || l.stride != 1) && l.shortcut != Shortcut::Projection)
            throw ShapeError("spec: layer " + detail::layer_id(bi, li) +
                             ": identity shortcut is invalid with overridden block input width " +
                             std::to_string(c));
          c = l.channels;
        }
      }
    }
  }
  Network<S> net;
  net.spec = spec;
  net.use_batchnorm = use_batchnorm;
  Rng rng(derive_seed(seed, "init"));

  int64_t c = spec.input_shape[0];
  for (size_t bi = 0; bi < spec.blocks.size(); ++bi) {
    if (!block_input_channels.empty() && bi < block_input_channels.size() && bi > 0)
      c = block_input_channels[bi];
    net.block_input_channels.push_back(c);
    std::vector<BuiltLayer<S>> blk;
    for (size_t li = 0; li < spec.blocks[bi].size(); ++li) {
      const LayerSpec& l = spec.blocks[bi][li];
      const std::string id = detail::layer_id(bi, li);
      switch (l.kind) {
        case LayerKind::Conv: {
          BuiltLayer<S> bl = detail::make_conv_layer<S>(c, l.channels, l.kernel_h, l.stride,
                                                        l.padding, l.bias || !use_batchnorm, rng,
                                                        id + ".conv");
          c = l.channels;
          blk.push_back(std::move(bl));
          break;
        }
        case LayerKind::BatchNorm: {
          if (!use_batchnorm) break;  // dropped entirely when disabled
          blk.push_back(detail::make_bn_layer<S>(c, id + ".bn"));
          break;
        }
        case LayerKind::Relu: {
          BuiltLayer<S> bl;
          bl.kind = LayerKind::Relu;
          blk.push_back(std::move(bl));
          break;
        }
        case LayerKind::AvgPool: {
          BuiltLayer<S> bl;
          bl.kind = LayerKind::AvgPool;
          bl.pool_k = l.kernel_h;
          bl.stride = l.stride;
          bl.padding = l.padding;
          blk.push_back(std::move(bl));
          break;
        }
        case LayerKind::ResidualBlock: {
          BuiltLayer<S> bl;
          bl.kind = LayerKind::ResidualBlock;
          const int64_t cin = c, cout = l.channels, s = l.stride;
          const bool project = (cin != cout) || (s != 1);
          const bool conv_bias = !use_batchnorm;
          auto& mp = bl.main_path;
          if (s > 1) {
            BuiltLayer<S> pool;
            pool.kind = LayerKind::AvgPool;
            pool.pool_k = s;
            pool.stride = s;
            mp.push_back(std::move(pool));
          }
          mp.push_back(detail::make_conv_layer<S>(cin, cout, 3, 1, 1, conv_bias, rng,
                                                  id + ".conv1"));
          if (use_batchnorm) mp.push_back(detail::make_bn_layer<S>(cout, id + ".bn1"));
          {
            BuiltLayer<S> r;
            r.kind = LayerKind::Relu;
            mp.push_back(std::move(r));
          }
          mp.push_back(detail::make_conv_layer<S>(cout, cout, 3, 1, 1, conv_bias, rng,
                                                  id + ".conv2"));
          if (use_batchnorm) mp.push_back(detail::make_bn_layer<S>(cout, id + ".bn2"));
          if (project) {
            auto& sp = bl.shortcut_path;
            if (s > 1) {
              BuiltLayer<S> pool;
              pool.kind = LayerKind::AvgPool;
              pool.pool_k = s;
              pool.stride = s;
              sp.push_back(std::move(pool));
            }
            sp.push_back(detail::make_conv_layer<S>(cin, cout, 1, 1, 0, conv_bias, rng,
                                                    id + ".proj"));
            if (use_batchnorm) sp.push_back(detail::make_bn_layer<S>(cout, id + ".projbn"));
          }
          c = cout;
          blk.push_back(std::move(bl));
          break;
        }
        case LayerKind::Linear:
          throw ShapeError("spec: layer " + id + ": linear layers are only supported as the classifier");
      }
    }
    net.blocks.push_back(std::move(blk));
  }

  net.fc_w = detail::kaiming_linear<S>(spec.classes, c, rng);
  net.fc_w.set_name("fc.w");
  net.fc_b = detail::param_zeros<S>({spec.classes});
  net.fc_b.set_name("fc.b");
  return net;
}

namespace detail {

template <typename S>
Tensor<S> forward_layer(BuiltLayer<S>& l, const Tensor<S>& x, bool training) {
  switch (l.kind) {
    case LayerKind::Conv:
      return conv2d(x, l.w, l.b, l.stride, l.padding);
    case LayerKind::BatchNorm:
      return batch_norm2d(x, l.gamma, l.beta, l.run_mean, l.run_var, training);
    case LayerKind::Relu:
      return relu(x);
    case LayerKind::AvgPool:
      return avg_pool2d(x, l.pool_k, l.stride, l.padding);
    case LayerKind::ResidualBlock: {
      Tensor<S> m = x;
      for (auto& sub : l.main_path) m = forward_layer(sub, m, training);
      Tensor<S> sc = x;
      for (auto& sub : l.shortcut_path) sc = forward_layer(sub, sc, training);
      return relu(add(m, sc));
    }
    default:
      throw ShapeError("forward: unsupported layer kind");
  }
}

}  // namespace detail

// Runs one block; `x` is the block's input feature map.
template <typename S>
Tensor<S> forward_block(Network<S>& net, int64_t block, const Tensor<S>& x, bool training) {
  if (block < 0 || block >= net.tap_count())
    throw ShapeError("forward_block: block index " + std::to_string(block) + " out of range");
  Tensor<S> h = x;
  for (auto& l : net.blocks[static_cast<size_t>(block)]) h = detail::forward_layer(l, h, training);
  return h;
}

template <typename S>
struct ForwardResult {
  std::vector<Tensor<S>> taps;  // K block outputs, in order
  Tensor<S> logits;
};

template <typename S>
Tensor<S> classifier_logits(Network<S>& net, const Tensor<S>& final_tap) {
  return linear(global_avg_pool(final_tap), net.fc_w, net.fc_b);
}

template <typename S>
ForwardResult<S> forward_with_taps(Network<S>& net, const Tensor<S>& batch, bool training) {
  if (batch.ndim() != 4 || batch.dim(1) != net.spec.input_shape[0] ||
      batch.dim(2) != net.spec.input_shape[1] || batch.dim(3) != net.spec.input_shape[2])
    throw ShapeError("forward: batch shape " + shape_str(batch.shape()) +
                     " does not match spec input " + shape_str(net.spec.input_shape));
  ForwardResult<S> r;
  Tensor<S> h = batch;
  for (int64_t b = 0; b < net.tap_count(); ++b) {
    h = forward_block(net, b, h, training);
    r.taps.push_back(h);
  }
  r.logits = classifier_logits(net, h);
  return r;
}

// ---------------------------------------------------------------------------
// Parameter traversal
// ---------------------------------------------------------------------------
namespace detail {

template <typename S, typename Fn>
void visit_layer_state(BuiltLayer<S>& l, Fn&& fn) {
  if (l.w.defined()) fn(l.w, /*trainable=*/true);
  if (l.b.defined()) fn(l.b, true);
  if (l.gamma.defined()) fn(l.gamma, true);
  if (l.beta.defined()) fn(l.beta, true);
  if (l.run_mean.defined()) fn(l.run_mean, false);
  if (l.run_var.defined()) fn(l.run_var, false);
  for (auto& sub : l.main_path) visit_layer_state(sub, fn);
  for (auto& sub : l.shortcut_path) visit_layer_state(sub, fn);
}

template <typename S, typename Fn>
void visit_network_state(Network<S>& net, Fn&& fn) {
  for (auto& blk : net.blocks)
    for (auto& l : blk) visit_layer_state(l, fn);
  fn(net.fc_w, true);
  fn(net.fc_b, true);
}

}  // namespace detail

// Trainable parameters (excludes batchnorm running statistics).
template <typename S>
std::vector<Tensor<S>> parameters(Network<S>& net) {
  std::vector<Tensor<S>> out;
  detail::visit_network_state(net, [&](Tensor<S>& t, bool trainable) {
    if (trainable) out.push_back(t);
  });
  return out;
}

// Feature-extractor parameters only: the classifier is excluded from
// distillation, so mimic/residual phases optimize these.
template <typename S>
std::vector<Tensor<S>> feature_parameters(Network<S>& net) {
  std::vector<Tensor<S>> out;
  for (auto& blk : net.blocks)
    for (auto& l : blk)
      detail::visit_layer_state(l, [&](Tensor<S>& t, bool trainable) {
        if (trainable) out.push_back(t);
      });
  return out;
}

// Trainable parameters of one block (classifier excluded).
template <typename S>
std::vector<Tensor<S>> block_parameters(Network<S>& net, int64_t block) {
  std::vector<Tensor<S>> out;
  for (auto& l : net.blocks.at(static_cast<size_t>(block)))
    detail::visit_layer_state(l, [&](Tensor<S>& t, bool trainable) {
      if (trainable) out.push_back(t);
    });
  return out;
}

// All named state including running statistics, in deterministic order.
template <typename S>
std::vector<Tensor<S>> named_state(Network<S>& net) {
  std::vector<Tensor<S>> out;
  detail::visit_network_state(net, [&](Tensor<S>& t, bool) { out.push_back(t); });
  return out;
}

// FNV-1a over the raw bytes of all state; used by freeze-contract checks.
template <typename S>
uint64_t state_checksum(Network<S>& net) {
  uint64_t h = 0xcbf29ce484222325ULL;
  detail::visit_network_state(net, [&](Tensor<S>& t, bool) {
    const unsigned char* p = reinterpret_cast<const unsigned char*>(t.data());
    const size_t n = t.values().size() * sizeof(S);
    for (size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  });
  return h;
}

// ---------------------------------------------------------------------------
// Adapters: per-tap 1x1 convs into the teacher's channel space. A level with
// an undefined weight passes features through unchanged (widths already match).
// ---------------------------------------------------------------------------
template <typename S>
struct AdapterSet {
  std::vector<Tensor<S>> weights;  // one slot per tap level

  int64_t levels() const { return static_cast<int64_t>(weights.size()); }
  bool has(int64_t level) const {
    return level >= 0 && level < levels() && weights[static_cast<size_t>(level)].defined();
  }
};

template <typename S>
AdapterSet<S> make_adapters(const std::vector<int64_t>& model_widths,
                            const std::vector<int64_t>& teacher_widths, uint64_t seed,
                            const std::string& owner = "adapter") {
  if (model_widths.size() != teacher_widths.size())
    throw ShapeError("make_adapters: tap counts differ (" + std::to_string(model_widths.size()) +
                     " vs " + std::to_string(teacher_widths.size()) + ")");
  AdapterSet<S> a;
  Rng rng(derive_seed(seed, "adapters"));
  for (size_t i = 0; i < model_widths.size(); ++i) {
    if (model_widths[i] == teacher_widths[i]) {
      a.weights.emplace_back();  // identity
    } else {
      Tensor<S> w = detail::kaiming_conv<S>(teacher_widths[i], model_widths[i], 1, 1, rng);
      w.set_name(owner + "." + std::to_string(i) + ".w");
      a.weights.push_back(std::move(w));
    }
  }
  return a;
}

template <typename S>
Tensor<S> adapt_feature(const Tensor<S>& tap, const AdapterSet<S>& adapters, int64_t level) {
  if (level < 0 || level >= adapters.levels())
    throw ShapeError("adapt_feature: level " + std::to_string(level) + " out of range [0," +
                     std::to_string(adapters.levels()) + ")");
  if (!adapters.has(level)) return tap;
  return conv2d(tap, adapters.weights[static_cast<size_t>(level)], 1, 0);
}

template <typename S>
std::vector<Tensor<S>> adapter_parameters(AdapterSet<S>& a) {
  std::vector<Tensor<S>> out;
  for (auto& w : a.weights)
    if (w.defined()) out.push_back(w);
  return out;
}

}  // namespace rkd
