// Copyright (c) 2026 The rkd authors
// SPDX-License-Identifier: Apache-2.0
//
// MAC-convention cost accounting and cost-preserving model separation.
// Convention: conv costs Cout*Cin*kh*kw*Hout*Wout, linear costs in*out,
// batchnorm/relu/pooling cost 0. One GFLOP here means 1e9 MACs.

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "rkd/netspec.hpp"

namespace rkd {

struct CostReport {
  std::vector<std::pair<std::string, int64_t>> per_layer;  // conv/linear entries only
  int64_t total_macs = 0;
  double total_gflops = 0.0;
};

// MACs for a single conv or linear layer given its input (C,H,W). Linear
// layers read `input.channels` as the incoming feature width.
inline int64_t layer_flops(const LayerSpec& l, const TapShape& input) {
  switch (l.kind) {
    case LayerKind::Conv: {
      const int64_t hout = detail::conv_extent(input.height, l.padding, l.kernel_h, l.stride, "height");
      const int64_t wout = detail::conv_extent(input.width, l.padding, l.kernel_w, l.stride, "width");
      return l.channels * input.channels * l.kernel_h * l.kernel_w * hout * wout;
    }
    case LayerKind::Linear:
      return input.channels * l.channels;
    default:
      return 0;  // batchnorm/relu/pooling are free under the MAC convention
  }
}

inline CostReport network_flops(const NetworkSpec& spec) {
  infer_tap_shapes(spec);  // validate
  CostReport r;
  int64_t c = spec.input_shape[0], h = spec.input_shape[1], w = spec.input_shape[2];
  auto emit = [&](const std::string& id, int64_t macs) {
    r.per_layer.emplace_back(id, macs);
    r.total_macs += macs;
  };
  for (size_t bi = 0; bi < spec.blocks.size(); ++bi) {
    for (size_t li = 0; li < spec.blocks[bi].size(); ++li) {
      const LayerSpec& l = spec.blocks[bi][li];
      const std::string id = detail::layer_id(bi, li);
      switch (l.kind) {
        case LayerKind::Conv:
          emit(id + ".conv", layer_flops(l, {c, h, w}));
          h = detail::conv_extent(h, l.padding, l.kernel_h, l.stride, "height");
          w = detail::conv_extent(w, l.padding, l.kernel_w, l.stride, "width");
          c = l.channels;
          break;
        case LayerKind::AvgPool:
          h = detail::conv_extent(h, l.padding, l.kernel_h, l.stride, "height");
          w = detail::conv_extent(w, l.padding, l.kernel_w, l.stride, "width");
          break;
        case LayerKind::ResidualBlock: {
          const int64_t cin = c;
          if (l.stride > 1) {
            h /= l.stride;
            w /= l.stride;
          }
          emit(id + ".conv1", l.channels * cin * int64_t{9} * h * w);
          emit(id + ".conv2", l.channels * l.channels * int64_t{9} * h * w);
          if (cin != l.channels || l.stride != 1)
            emit(id + ".proj", l.channels * cin * h * w);
          c = l.channels;
          break;
        }
        default:
          break;
      }
    }
  }
  emit("fc", c * spec.classes);
  r.total_gflops = static_cast<double>(r.total_macs) / 1e9;
  return r;
}

// ---------------------------------------------------------------------------
// Model separation: one spec -> student + assistant at cost ratio p.
// Interior widths scale by sqrt(p) / sqrt(1-p); topology is untouched.
// ---------------------------------------------------------------------------
struct SeparationPlan {
  struct Row {
    std::string id;
    int64_t channels, channels_student, channels_assistant;
  };
  double ratio = 0.0;
  std::vector<Row> layers;
  NetworkSpec spec_student, spec_assistant;
  int64_t cost_orig = 0, cost_student = 0, cost_assistant = 0;
};

namespace detail {

inline int64_t scale_width(int64_t c, double factor) {
  return static_cast<int64_t>(std::floor(static_cast<double>(c) * factor + 0.5));
}

}  // namespace detail

inline SeparationPlan separate(const NetworkSpec& spec, double p) {
  if (!(p > 0.0 && p < 1.0))
    throw ConfigError("separate: ratio must lie in (0,1), got " + std::to_string(p));
  infer_tap_shapes(spec);

  SeparationPlan plan;
  plan.ratio = p;
  plan.spec_student = spec;
  plan.spec_assistant = spec;
  const double fs = std::sqrt(p), fa = std::sqrt(1.0 - p);

  for (size_t bi = 0; bi < spec.blocks.size(); ++bi) {
    for (size_t li = 0; li < spec.blocks[bi].size(); ++li) {
      const LayerSpec& l = spec.blocks[bi][li];
      if (l.kind != LayerKind::Conv && l.kind != LayerKind::ResidualBlock) continue;
      const std::string id = detail::layer_id(bi, li);
      const int64_t cs = detail::scale_width(l.channels, fs);
      const int64_t ca = detail::scale_width(l.channels, fa);
      if (cs < 1 || ca < 1)
        throw ConfigError("separate: layer " + id + " with " + std::to_string(l.channels) +
                          " channels rounds to 0 at ratio " + std::to_string(p) +
                          "; use a larger base width");
      plan.layers.push_back({id, l.channels, cs, ca});
      plan.spec_student.blocks[bi][li].channels = cs;
      plan.spec_assistant.blocks[bi][li].channels = ca;
    }
  }

  // Derived specs keep the original topology, so they must still validate.
  infer_tap_shapes(plan.spec_student);
  infer_tap_shapes(plan.spec_assistant);
  plan.cost_orig = network_flops(spec).total_macs;
  plan.cost_student = network_flops(plan.spec_student).total_macs;
  plan.cost_assistant = network_flops(plan.spec_assistant).total_macs;
  return plan;
}

inline void to_json(nlohmann::json& j, const SeparationPlan& p) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& r : p.layers)
    layers.push_back({{"id", r.id},
                      {"C", r.channels},
                      {"C_S", r.channels_student},
                      {"C_A", r.channels_assistant}});
  j = nlohmann::json{{"ratio", p.ratio},
                     {"layers", layers},
                     {"spec_S", p.spec_student},
                     {"spec_A", p.spec_assistant},
                     {"cost", {{"orig", p.cost_orig}, {"S", p.cost_student}, {"A", p.cost_assistant}}}};
}

inline void from_json(const nlohmann::json& j, SeparationPlan& p) {
  p.ratio = j.at("ratio").get<double>();
  p.layers.clear();
  for (const auto& r : j.at("layers")) {
    p.layers.push_back({r.at("id").get<std::string>(), r.at("C").get<int64_t>(),
                        r.at("C_S").get<int64_t>(), r.at("C_A").get<int64_t>()});
  }
  p.spec_student = j.at("spec_S").get<NetworkSpec>();
  p.spec_assistant = j.at("spec_A").get<NetworkSpec>();
  p.cost_orig = j.at("cost").at("orig").get<int64_t>();
  p.cost_student = j.at("cost").at("S").get<int64_t>();
  p.cost_assistant = j.at("cost").at("A").get<int64_t>();
}

}  // namespace rkd
