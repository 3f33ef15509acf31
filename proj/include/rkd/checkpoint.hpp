// Copyright (c) 2026 The rkd authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoints are directories holding manifest.json + weights.bin. Weights
// are little-endian 32-bit floats regardless of compute precision; the
// manifest records name/shape/offset/length for every tensor plus the
// embedded NetworkSpec.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "rkd/network.hpp"

namespace rkd {

inline constexpr const char* kCheckpointMagic = "RKDCKPT1";

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  NetworkSpec spec;
  bool batchnorm = true;
  std::string config_hash;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

inline uint64_t fnv1a(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hash_hex(const std::string& s) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(s)));
  return buf;
}

template <typename S>
void save_checkpoint(Network<S>& net, const std::string& dir,
                     const std::string& config_hash = "",
                     const std::vector<std::pair<std::string, Tensor<S>>>& extras = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  std::vector<std::pair<std::string, Tensor<S>>> tensors;
  for (Tensor<S>& t : named_state(net)) tensors.emplace_back(t.name(), t);
  for (const auto& [name, t] : extras) tensors.emplace_back(name, t);

  nlohmann::json manifest;
  manifest["magic"] = kCheckpointMagic;
  manifest["spec"] = net.spec;
  manifest["batchnorm"] = net.use_batchnorm;
  manifest["config_hash"] = config_hash;

  std::ofstream wf(dir + "/weights.bin", std::ios::binary);
  if (!wf) throw CheckpointError("cannot write " + dir + "/weights.bin");
  nlohmann::json tlist = nlohmann::json::array();
  int64_t offset = 0;
  std::vector<float> buf;
  for (const auto& [name, t] : tensors) {
    const int64_t bytes = t.numel() * 4;
    tlist.push_back({{"name", name},
                     {"shape", t.shape()},
                     {"dtype", "f32"},
                     {"offset", offset},
                     {"length", bytes}});
    buf.resize(static_cast<size_t>(t.numel()));
    const S* src = t.data();
    for (int64_t i = 0; i < t.numel(); ++i) buf[static_cast<size_t>(i)] = static_cast<float>(src[i]);
    wf.write(reinterpret_cast<const char*>(buf.data()), bytes);
    offset += bytes;
  }
  manifest["tensors"] = std::move(tlist);

  std::ofstream mf(dir + "/manifest.json");
  if (!mf) throw CheckpointError("cannot write " + dir + "/manifest.json");
  mf << manifest.dump(2) << "\n";
}

inline Checkpoint load_checkpoint(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) throw CheckpointError("cannot open " + dir + "/manifest.json");
  nlohmann::json manifest;
  try {
    mf >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed manifest in " + dir + ": " + e.what());
  }
  if (manifest.value("magic", std::string{}) != kCheckpointMagic)
    throw CheckpointError(dir + ": bad checkpoint magic (expected " +
                          std::string(kCheckpointMagic) + ")");

  Checkpoint ckpt;
  try {
    ckpt.spec = manifest.at("spec").get<NetworkSpec>();
    ckpt.batchnorm = manifest.value("batchnorm", true);
    ckpt.config_hash = manifest.value("config_hash", std::string{});
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed manifest in " + dir + ": " + e.what());
  }

  std::ifstream wf(dir + "/weights.bin", std::ios::binary | std::ios::ate);
  if (!wf) throw CheckpointError("cannot open " + dir + "/weights.bin");
  const int64_t file_bytes = static_cast<int64_t>(wf.tellg());

  int64_t expected_offset = 0;
  for (const auto& tj : manifest.at("tensors")) {
    CheckpointEntry e;
    e.name = tj.at("name").get<std::string>();
    e.shape = tj.at("shape").get<Shape>();
    const int64_t offset = tj.at("offset").get<int64_t>();
    const int64_t length = tj.at("length").get<int64_t>();
    if (tj.value("dtype", std::string{"f32"}) != "f32")
      throw CheckpointError(dir + ": tensor " + e.name + " has unsupported dtype");
    if (offset != expected_offset)
      throw CheckpointError(dir + ": tensor " + e.name + " offset " + std::to_string(offset) +
                            " is not contiguous (expected " + std::to_string(expected_offset) + ")");
    if (shape_numel(e.shape) * 4 != length)
      throw CheckpointError(dir + ": tensor " + e.name + " length " + std::to_string(length) +
                            " does not match shape " + shape_str(e.shape));
    expected_offset = offset + length;
    e.data.resize(static_cast<size_t>(length / 4));
    wf.seekg(offset);
    if (!wf.read(reinterpret_cast<char*>(e.data.data()), length))
      throw CheckpointError(dir + ": weights.bin truncated while reading " + e.name);
    ckpt.entries.push_back(std::move(e));
  }
  if (expected_offset != file_bytes)
    throw CheckpointError(dir + ": weights.bin holds " + std::to_string(file_bytes) +
                          " bytes but manifest describes " + std::to_string(expected_offset));
  return ckpt;
}

// Rebuilds the network recorded in a checkpoint and restores its state
// bit-exactly. Extra tensors (adapters, classifiers) stay in the checkpoint
// for the caller.
template <typename S>
Network<S> restore_network(const Checkpoint& ckpt) {
  Network<S> net = build_network<S>(ckpt.spec, /*seed=*/0, ckpt.batchnorm);
  for (Tensor<S>& t : named_state(net)) {
    const CheckpointEntry* e = ckpt.find(t.name());
    if (!e)
      throw CheckpointError("checkpoint is missing tensor '" + t.name() + "'");
    if (e->shape != t.shape())
      throw CheckpointError("checkpoint tensor '" + t.name() + "' has shape " +
                            shape_str(e->shape) + ", expected " + shape_str(t.shape()));
    S* dst = t.data();
    for (size_t i = 0; i < e->data.size(); ++i) dst[i] = static_cast<S>(e->data[i]);
  }
  return net;
}

// Restores an adapter set saved under `<prefix>.<level>.w` names.
template <typename S>
AdapterSet<S> restore_adapters(const Checkpoint& ckpt, const std::string& prefix,
                               int64_t levels) {
  AdapterSet<S> a;
  for (int64_t i = 0; i < levels; ++i) {
    const CheckpointEntry* e = ckpt.find(prefix + "." + std::to_string(i) + ".w");
    if (!e) {
      a.weights.emplace_back();
      continue;
    }
    std::vector<S> data(e->data.begin(), e->data.end());
    Tensor<S> w = Tensor<S>::from(e->shape, std::move(data));
    w.set_name(e->name);
    a.weights.push_back(std::move(w));
  }
  return a;
}

template <typename S>
std::vector<std::pair<std::string, Tensor<S>>> adapter_extras(const AdapterSet<S>& a,
                                                              const std::string& prefix) {
  std::vector<std::pair<std::string, Tensor<S>>> out;
  for (size_t i = 0; i < a.weights.size(); ++i)
    if (a.weights[i].defined())
      out.emplace_back(prefix + "." + std::to_string(i) + ".w", a.weights[i]);
  return out;
}

}  // namespace rkd
