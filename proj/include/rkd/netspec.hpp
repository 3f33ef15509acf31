// Copyright (c) 2026 The rkd authors
// SPDX-License-Identifier: Apache-2.0
//
// Declarative architecture descriptions: K blocks of layers plus an implicit
// global-average-pool + linear classifier. Shape inference is total on valid
// specs, so a spec that validates here always builds and runs.

#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rkd/errors.hpp"
#include "rkd/ops.hpp"

namespace rkd {

enum class LayerKind { Conv, BatchNorm, Relu, AvgPool, ResidualBlock, Linear };
enum class Shortcut { Identity, Projection };

struct LayerSpec {
  LayerKind kind = LayerKind::Conv;
  int64_t channels = 0;  // conv / residual-block output channels
  int64_t kernel_h = 1, kernel_w = 1;
  int64_t stride = 1;
  int64_t padding = 0;
  bool bias = true;                          // conv only
  Shortcut shortcut = Shortcut::Identity;    // residual-block only

  static LayerSpec conv(int64_t ch, int64_t k, int64_t stride, int64_t padding,
                        bool bias = true) {
    LayerSpec l;
    l.kind = LayerKind::Conv;
    l.channels = ch;
    l.kernel_h = l.kernel_w = k;
    l.stride = stride;
    l.padding = padding;
    l.bias = bias;
    return l;
  }
  static LayerSpec batchnorm() {
    LayerSpec l;
    l.kind = LayerKind::BatchNorm;
    return l;
  }
  static LayerSpec relu() {
    LayerSpec l;
    l.kind = LayerKind::Relu;
    return l;
  }
  static LayerSpec avgpool(int64_t k, int64_t stride, int64_t padding = 0) {
    LayerSpec l;
    l.kind = LayerKind::AvgPool;
    l.kernel_h = l.kernel_w = k;
    l.stride = stride;
    l.padding = padding;
    return l;
  }
  static LayerSpec residual(int64_t ch, int64_t stride, Shortcut sc) {
    LayerSpec l;
    l.kind = LayerKind::ResidualBlock;
    l.channels = ch;
    l.kernel_h = l.kernel_w = 3;
    l.stride = stride;
    l.padding = 1;
    l.shortcut = sc;
    return l;
  }
};

struct NetworkSpec {
  Shape input_shape;  // [C, H, W]
  std::vector<std::vector<LayerSpec>> blocks;
  int64_t classes = 0;

  int64_t tap_count() const { return static_cast<int64_t>(blocks.size()); }
};

struct TapShape {
  int64_t channels, height, width;
  bool operator==(const TapShape&) const = default;
};

namespace detail {

inline std::string layer_id(size_t block, size_t layer) {
  return "b" + std::to_string(block) + ".l" + std::to_string(layer);
}

inline const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Relu: return "relu";
    case LayerKind::AvgPool: return "avgpool";
    case LayerKind::ResidualBlock: return "residual-block";
    case LayerKind::Linear: return "linear";
  }
  return "?";
}

}  // namespace detail

// Walks a spec and returns the K tap shapes. Throws ShapeError naming the
// first offending layer.
inline std::vector<TapShape> infer_tap_shapes(const NetworkSpec& spec) {
  if (spec.input_shape.size() != 3)
    throw ShapeError("spec: input_shape must be [C,H,W], got " + shape_str(spec.input_shape));
  if (spec.blocks.empty()) throw ShapeError("spec: at least one block is required");
  if (spec.classes < 2) throw ShapeError("spec: classes must be >= 2");

  int64_t c = spec.input_shape[0], h = spec.input_shape[1], w = spec.input_shape[2];
  if (c < 1 || h < 1 || w < 1) throw ShapeError("spec: input extents must be positive");

  std::vector<TapShape> taps;
  for (size_t bi = 0; bi < spec.blocks.size(); ++bi) {
    if (spec.blocks[bi].empty())
      throw ShapeError("spec: block " + std::to_string(bi) + " is empty");
    for (size_t li = 0; li < spec.blocks[bi].size(); ++li) {
      const LayerSpec& l = spec.blocks[bi][li];
      const std::string id = detail::layer_id(bi, li);
      try {
        switch (l.kind) {
          case LayerKind::Conv:
            if (l.channels < 1) throw ShapeError("conv channels must be positive");
            h = detail::conv_extent(h, l.padding, l.kernel_h, l.stride, "height");
            w = detail::conv_extent(w, l.padding, l.kernel_w, l.stride, "width");
            c = l.channels;
            break;
          case LayerKind::BatchNorm:
          case LayerKind::Relu:
            break;
          case LayerKind::AvgPool:
            h = detail::conv_extent(h, l.padding, l.kernel_h, l.stride, "height");
            w = detail::conv_extent(w, l.padding, l.kernel_w, l.stride, "width");
            break;
          case LayerKind::ResidualBlock: {
            if (l.channels < 1) throw ShapeError("residual-block channels must be positive");
            const bool reshapes = (l.channels != c) || (l.stride != 1);
            if (reshapes && l.shortcut != Shortcut::Projection)
              throw ShapeError("residual-block changes channels/stride and needs a projection shortcut");
            if (l.stride > 1) {
              h = detail::conv_extent(h, 0, l.stride, l.stride, "height");
              w = detail::conv_extent(w, 0, l.stride, l.stride, "width");
            }
            c = l.channels;
            break;
          }
          case LayerKind::Linear:
            throw ShapeError("linear layers are only supported as the classifier");
        }
      } catch (const ShapeError& e) {
        throw ShapeError("spec: layer " + id + " (" + detail::kind_name(l.kind) + "): " + e.what());
      }
      if (h < 1 || w < 1)
        throw ShapeError("spec: layer " + id + " produces non-positive spatial extent");
    }
    taps.push_back({c, h, w});
  }
  return taps;
}

inline std::vector<int64_t> tap_channels(const NetworkSpec& spec) {
  std::vector<int64_t> out;
  for (const TapShape& t : infer_tap_shapes(spec)) out.push_back(t.channels);
  return out;
}

// ---------------------------------------------------------------------------
// JSON serialization:
// {"input_shape":[C,H,W], "blocks":[[{"kind":...},...],...], "classes":N}
// ---------------------------------------------------------------------------
inline void to_json(nlohmann::json& j, const LayerSpec& l) {
  j = nlohmann::json{{"kind", detail::kind_name(l.kind)}};
  switch (l.kind) {
    case LayerKind::Conv:
      j["channels"] = l.channels;
      j["kernel"] = {l.kernel_h, l.kernel_w};
      j["stride"] = l.stride;
      j["padding"] = l.padding;
      j["bias"] = l.bias;
      break;
    case LayerKind::AvgPool:
      j["kernel"] = {l.kernel_h, l.kernel_w};
      j["stride"] = l.stride;
      j["padding"] = l.padding;
      break;
    case LayerKind::ResidualBlock:
      j["channels"] = l.channels;
      j["stride"] = l.stride;
      j["shortcut"] = l.shortcut == Shortcut::Projection ? "projection" : "identity";
      break;
    default:
      break;
  }
}

inline void from_json(const nlohmann::json& j, LayerSpec& l) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "conv") {
    l.kind = LayerKind::Conv;
    l.channels = j.at("channels").get<int64_t>();
    auto k = j.at("kernel");
    l.kernel_h = k.at(0).get<int64_t>();
    l.kernel_w = k.at(1).get<int64_t>();
    l.stride = j.value("stride", int64_t{1});
    l.padding = j.value("padding", int64_t{0});
    l.bias = j.value("bias", true);
  } else if (kind == "batchnorm") {
    l.kind = LayerKind::BatchNorm;
  } else if (kind == "relu") {
    l.kind = LayerKind::Relu;
  } else if (kind == "avgpool") {
    l.kind = LayerKind::AvgPool;
    auto k = j.at("kernel");
    l.kernel_h = k.at(0).get<int64_t>();
    l.kernel_w = k.at(1).get<int64_t>();
    l.stride = j.value("stride", int64_t{1});
    l.padding = j.value("padding", int64_t{0});
  } else if (kind == "residual-block") {
    l.kind = LayerKind::ResidualBlock;
    l.channels = j.at("channels").get<int64_t>();
    l.kernel_h = l.kernel_w = 3;
    l.padding = 1;
    l.stride = j.value("stride", int64_t{1});
    const std::string sc = j.value("shortcut", std::string("identity"));
    if (sc == "projection")
      l.shortcut = Shortcut::Projection;
    else if (sc == "identity")
      l.shortcut = Shortcut::Identity;
    else
      throw ConfigError("spec: unknown shortcut kind '" + sc + "'");
  } else {
    throw ConfigError("spec: unknown layer kind '" + kind + "'");
  }
}

inline void to_json(nlohmann::json& j, const NetworkSpec& s) {
  j = nlohmann::json{{"input_shape", s.input_shape}, {"blocks", s.blocks}, {"classes", s.classes}};
}

inline void from_json(const nlohmann::json& j, NetworkSpec& s) {
  s.input_shape = j.at("input_shape").get<Shape>();
  s.blocks = j.at("blocks").get<std::vector<std::vector<LayerSpec>>>();
  s.classes = j.at("classes").get<int64_t>();
}

inline NetworkSpec load_spec(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open spec file: " + path);
  nlohmann::json j;
  try {
    f >> j;
    return j.get<NetworkSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("failed to parse spec " + path + ": " + e.what());
  }
}

inline void save_spec(const NetworkSpec& spec, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write spec file: " + path);
  f << nlohmann::json(spec).dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Reference architectures. Downsampling always happens through stride-s
// average pooling followed by stride-1 convs, so every conv extent divides
// exactly; this keeps the per-layer MAC counts of the classic residual
// topologies while honoring the exact-divisibility contract of conv2d.
// ---------------------------------------------------------------------------
namespace detail {

inline std::vector<LayerSpec> tiny_stem(int64_t width) {
  return {LayerSpec::conv(width, 3, 1, 1, false), LayerSpec::batchnorm(), LayerSpec::relu()};
}

inline NetworkSpec make_tinyres(int64_t blocks_per_stage) {
  NetworkSpec s;
  s.input_shape = {1, 32, 32};
  s.classes = 10;
  const int64_t widths[4] = {16, 32, 64, 128};
  for (int stage = 0; stage < 4; ++stage) {
    std::vector<LayerSpec> blk;
    if (stage == 0) blk = tiny_stem(widths[0]);
    for (int64_t r = 0; r < blocks_per_stage; ++r) {
      const bool entry = (r == 0);
      const int64_t stride = (entry && stage > 0) ? 2 : 1;
      const Shortcut sc = (entry && stage > 0) ? Shortcut::Projection : Shortcut::Identity;
      blk.push_back(LayerSpec::residual(widths[stage], stride, sc));
    }
    s.blocks.push_back(std::move(blk));
  }
  return s;
}

inline NetworkSpec make_resnet(const std::vector<int64_t>& stage_blocks) {
  NetworkSpec s;
  s.input_shape = {3, 224, 224};
  s.classes = 1000;
  const int64_t widths[4] = {64, 128, 256, 512};
  for (size_t stage = 0; stage < 4; ++stage) {
    std::vector<LayerSpec> blk;
    if (stage == 0) {
      blk.push_back(LayerSpec::avgpool(2, 2));
      blk.push_back(LayerSpec::avgpool(2, 2));
      blk.push_back(LayerSpec::conv(widths[0], 7, 1, 3, false));
      blk.push_back(LayerSpec::batchnorm());
      blk.push_back(LayerSpec::relu());
    }
    for (int64_t r = 0; r < stage_blocks[stage]; ++r) {
      const bool entry = (r == 0);
      const int64_t stride = (entry && stage > 0) ? 2 : 1;
      const Shortcut sc = (entry && stage > 0) ? Shortcut::Projection : Shortcut::Identity;
      blk.push_back(LayerSpec::residual(widths[stage], stride, sc));
    }
    s.blocks.push_back(std::move(blk));
  }
  return s;
}

}  // namespace detail

inline NetworkSpec reference_spec(const std::string& name) {
  if (name == "tinyres8") return detail::make_tinyres(1);
  if (name == "tinyres16") return detail::make_tinyres(2);
  if (name == "resnet18") return detail::make_resnet({2, 2, 2, 2});
  if (name == "resnet34") return detail::make_resnet({3, 4, 6, 3});
  throw ConfigError("unknown reference spec '" + name + "'");
}

}  // namespace rkd
