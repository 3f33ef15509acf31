// Copyright (c) 2026 The rkd authors
// SPDX-License-Identifier: Apache-2.0
//
// Dataset ingestion (IDX and CIFAR binary), deterministic synthetic data,
// and seeded batch iteration. All ingestion paths produce raw 8-bit pixels
// which are then normalized per channel with statistics from the training
// split.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "rkd/errors.hpp"
#include "rkd/rng.hpp"
#include "rkd/tensor.hpp"

namespace rkd {

struct ChannelStats {
  std::vector<float> mean, stddev;  // per channel
};

struct Dataset {
  int64_t channels = 0, height = 0, width = 0;
  int64_t classes = 0;
  std::vector<float> images;  // [n, C, H, W], normalized
  std::vector<int> labels;    // [n], each in [0, classes)
  ChannelStats stats;         // the statistics the images were normalized with

  int64_t size() const { return static_cast<int64_t>(labels.size()); }
  int64_t sample_elems() const { return channels * height * width; }
};

// Unnormalized pixels as loaded from disk or produced by the generator.
struct RawDataset {
  int64_t channels = 0, height = 0, width = 0;
  std::vector<uint8_t> pixels;  // [n, C, H, W]
  std::vector<int> labels;

  int64_t size() const { return static_cast<int64_t>(labels.size()); }
};

inline ChannelStats compute_stats(const RawDataset& raw) {
  ChannelStats s;
  const int64_t c = raw.channels, hw = raw.height * raw.width, n = raw.size();
  s.mean.assign(static_cast<size_t>(c), 0.f);
  s.stddev.assign(static_cast<size_t>(c), 1.f);
  if (n == 0) return s;
  for (int64_t ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const uint8_t* plane = raw.pixels.data() + (i * c + ch) * hw;
      for (int64_t k = 0; k < hw; ++k) acc += plane[k] / 255.0;
    }
    const double mu = acc / static_cast<double>(n * hw);
    double var = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const uint8_t* plane = raw.pixels.data() + (i * c + ch) * hw;
      for (int64_t k = 0; k < hw; ++k) {
        const double d = plane[k] / 255.0 - mu;
        var += d * d;
      }
    }
    var /= static_cast<double>(n * hw);
    s.mean[static_cast<size_t>(ch)] = static_cast<float>(mu);
    s.stddev[static_cast<size_t>(ch)] = static_cast<float>(var > 1e-12 ? std::sqrt(var) : 1.0);
  }
  return s;
}

inline Dataset normalize_dataset(const RawDataset& raw, const ChannelStats& stats,
                                 int64_t classes) {
  Dataset ds;
  ds.channels = raw.channels;
  ds.height = raw.height;
  ds.width = raw.width;
  ds.classes = classes;
  ds.labels = raw.labels;
  ds.stats = stats;
  ds.images.resize(raw.pixels.size());
  const int64_t c = raw.channels, hw = raw.height * raw.width, n = raw.size();
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const uint8_t* src = raw.pixels.data() + (i * c + ch) * hw;
      float* dst = ds.images.data() + (i * c + ch) * hw;
      const float mu = stats.mean[static_cast<size_t>(ch)];
      const float sd = stats.stddev[static_cast<size_t>(ch)];
      for (int64_t k = 0; k < hw; ++k) dst[k] = (src[k] / 255.0f - mu) / sd;
    }
  }
  for (int lbl : ds.labels)
    if (lbl < 0 || lbl >= classes)
      throw DataFormatError(DataFormatError::Kind::BadValue,
                            "label " + std::to_string(lbl) + " out of range for " +
                                std::to_string(classes) + " classes");
  return ds;
}

// ---------------------------------------------------------------------------
// IDX format (big-endian headers, unsigned byte data)
// ---------------------------------------------------------------------------
namespace detail {

inline uint32_t read_be32(std::istream& f, const std::string& path) {
  unsigned char b[4];
  if (!f.read(reinterpret_cast<char*>(b), 4))
    throw DataFormatError(DataFormatError::Kind::Truncated, path + ": truncated header");
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

inline void write_be32(std::ostream& f, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  f.write(reinterpret_cast<char*>(b), 4);
}

}  // namespace detail

struct IdxImages {
  int64_t count = 0, height = 0, width = 0;
  std::vector<uint8_t> pixels;  // [count, H, W]
};

inline IdxImages read_idx_images(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataFormatError(DataFormatError::Kind::Truncated, "cannot open " + path);
  const uint32_t magic = detail::read_be32(f, path);
  if (magic != 0x00000803u)
    throw DataFormatError(DataFormatError::Kind::BadMagic,
                          path + ": bad IDX image magic " + std::to_string(magic));
  IdxImages img;
  img.count = detail::read_be32(f, path);
  img.height = detail::read_be32(f, path);
  img.width = detail::read_be32(f, path);
  const int64_t total = img.count * img.height * img.width;
  img.pixels.resize(static_cast<size_t>(total));
  if (!f.read(reinterpret_cast<char*>(img.pixels.data()), total))
    throw DataFormatError(DataFormatError::Kind::Truncated,
                          path + ": truncated image data (expected " + std::to_string(total) +
                              " bytes)");
  return img;
}

inline std::vector<uint8_t> read_idx_labels(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataFormatError(DataFormatError::Kind::Truncated, "cannot open " + path);
  const uint32_t magic = detail::read_be32(f, path);
  if (magic != 0x00000801u)
    throw DataFormatError(DataFormatError::Kind::BadMagic,
                          path + ": bad IDX label magic " + std::to_string(magic));
  const uint32_t count = detail::read_be32(f, path);
  std::vector<uint8_t> labels(count);
  if (!f.read(reinterpret_cast<char*>(labels.data()), count))
    throw DataFormatError(DataFormatError::Kind::Truncated, path + ": truncated label data");
  return labels;
}

inline void write_idx_images(const std::string& path, const IdxImages& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataFormatError(DataFormatError::Kind::Truncated, "cannot write " + path);
  detail::write_be32(f, 0x00000803u);
  detail::write_be32(f, static_cast<uint32_t>(img.count));
  detail::write_be32(f, static_cast<uint32_t>(img.height));
  detail::write_be32(f, static_cast<uint32_t>(img.width));
  f.write(reinterpret_cast<const char*>(img.pixels.data()),
          static_cast<std::streamsize>(img.pixels.size()));
}

inline void write_idx_labels(const std::string& path, const std::vector<uint8_t>& labels) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataFormatError(DataFormatError::Kind::Truncated, "cannot write " + path);
  detail::write_be32(f, 0x00000801u);
  detail::write_be32(f, static_cast<uint32_t>(labels.size()));
  f.write(reinterpret_cast<const char*>(labels.data()),
          static_cast<std::streamsize>(labels.size()));
}

// One IDX split (image file + label file) as a raw dataset.
inline RawDataset load_idx_pair(const std::string& images_path, const std::string& labels_path) {
  IdxImages img = read_idx_images(images_path);
  std::vector<uint8_t> labels = read_idx_labels(labels_path);
  if (img.count != static_cast<int64_t>(labels.size()))
    throw DataFormatError(DataFormatError::Kind::CountMismatch,
                          images_path + " holds " + std::to_string(img.count) + " images but " +
                              labels_path + " holds " + std::to_string(labels.size()) +
                              " labels");
  RawDataset raw;
  raw.channels = 1;
  raw.height = img.height;
  raw.width = img.width;
  raw.pixels = std::move(img.pixels);
  raw.labels.assign(labels.begin(), labels.end());
  return raw;
}

// ---------------------------------------------------------------------------
// CIFAR binary format: 3073-byte records, 1 label byte + 3072 pixel bytes
// laid out as R,G,B 32x32 planes.
// ---------------------------------------------------------------------------
inline RawDataset load_cifar_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw DataFormatError(DataFormatError::Kind::Truncated, "cannot open " + path);
  const int64_t record = 3073;
  const int64_t bytes = static_cast<int64_t>(f.tellg());
  if (bytes == 0 || bytes % record != 0)
    throw DataFormatError(DataFormatError::Kind::Truncated,
                          path + ": size " + std::to_string(bytes) +
                              " is not a multiple of the 3073-byte record");
  const int64_t n = bytes / record;
  f.seekg(0);
  RawDataset raw;
  raw.channels = 3;
  raw.height = 32;
  raw.width = 32;
  raw.pixels.resize(static_cast<size_t>(n * 3072));
  raw.labels.resize(static_cast<size_t>(n));
  std::vector<uint8_t> rec(record);
  for (int64_t i = 0; i < n; ++i) {
    if (!f.read(reinterpret_cast<char*>(rec.data()), record))
      throw DataFormatError(DataFormatError::Kind::Truncated, path + ": short read");
    if (rec[0] > 9)
      throw DataFormatError(DataFormatError::Kind::BadValue,
                            path + ": record " + std::to_string(i) + " has label " +
                                std::to_string(rec[0]) + " > 9");
    raw.labels[static_cast<size_t>(i)] = rec[0];
    std::memcpy(raw.pixels.data() + i * 3072, rec.data() + 1, 3072);
  }
  return raw;
}

// ---------------------------------------------------------------------------
// Directory-level loading. IDX directories use the conventional MNIST file
// names; CIFAR directories hold data_batch_1..5.bin and test_batch.bin.
// ---------------------------------------------------------------------------
struct DatasetSplits {
  Dataset train, test;
};

namespace detail {

inline void append_raw(RawDataset& dst, RawDataset&& src) {
  if (dst.size() == 0) {
    dst = std::move(src);
    return;
  }
  if (dst.channels != src.channels || dst.height != src.height || dst.width != src.width)
    throw DataFormatError(DataFormatError::Kind::BadValue, "mismatched shapes across files");
  dst.pixels.insert(dst.pixels.end(), src.pixels.begin(), src.pixels.end());
  dst.labels.insert(dst.labels.end(), src.labels.begin(), src.labels.end());
}

inline int64_t label_classes(const RawDataset& raw) {
  int maxl = 1;
  for (int l : raw.labels) maxl = std::max(maxl, l);
  return maxl + 1;
}

}  // namespace detail

inline RawDataset load_raw_split(const std::string& dir, const std::string& format,
                                 const std::string& split) {
  if (format == "idx") {
    if (split == "train")
      return load_idx_pair(dir + "/train-images-idx3-ubyte", dir + "/train-labels-idx1-ubyte");
    return load_idx_pair(dir + "/t10k-images-idx3-ubyte", dir + "/t10k-labels-idx1-ubyte");
  }
  if (format == "cifar-binary") {
    RawDataset raw;
    if (split == "train") {
      for (int i = 1; i <= 5; ++i)
        detail::append_raw(raw, load_cifar_file(dir + "/data_batch_" + std::to_string(i) + ".bin"));
    } else {
      raw = load_cifar_file(dir + "/test_batch.bin");
    }
    return raw;
  }
  throw ConfigError("unknown dataset format '" + format + "' (expected idx or cifar-binary)");
}

// Loads one split; normalization statistics always come from the train split.
inline Dataset load_dataset(const std::string& dir, const std::string& format,
                            const std::string& split = "train") {
  RawDataset train_raw = load_raw_split(dir, format, "train");
  const ChannelStats stats = compute_stats(train_raw);
  const int64_t classes = detail::label_classes(train_raw);
  if (split == "train") return normalize_dataset(train_raw, stats, classes);
  RawDataset raw = load_raw_split(dir, format, split);
  return normalize_dataset(raw, stats, classes);
}

inline DatasetSplits load_dataset_splits(const std::string& dir, const std::string& format) {
  RawDataset train_raw = load_raw_split(dir, format, "train");
  RawDataset test_raw = load_raw_split(dir, format, "test");
  const ChannelStats stats = compute_stats(train_raw);
  const int64_t classes =
      std::max(detail::label_classes(train_raw), detail::label_classes(test_raw));
  DatasetSplits s;
  s.train = normalize_dataset(train_raw, stats, classes);
  s.test = normalize_dataset(test_raw, stats, classes);
  return s;
}

// Keep at most `per_class` samples of each class (first occurrences, stable).
inline Dataset subset_per_class(const Dataset& ds, int64_t per_class) {
  if (per_class <= 0) return ds;
  Dataset out;
  out.channels = ds.channels;
  out.height = ds.height;
  out.width = ds.width;
  out.classes = ds.classes;
  out.stats = ds.stats;
  std::vector<int64_t> kept(static_cast<size_t>(ds.classes), 0);
  const int64_t elems = ds.sample_elems();
  for (int64_t i = 0; i < ds.size(); ++i) {
    const int lbl = ds.labels[static_cast<size_t>(i)];
    if (kept[static_cast<size_t>(lbl)] >= per_class) continue;
    ++kept[static_cast<size_t>(lbl)];
    out.labels.push_back(lbl);
    const float* src = ds.images.data() + i * elems;
    out.images.insert(out.images.end(), src, src + elems);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data: class-conditional blob patterns plus per-sample noise.
// Class patterns depend only on `seed`; sample noise additionally depends on
// `stream`, so train/eval splits share class structure but not samples.
// ---------------------------------------------------------------------------
inline RawDataset make_synthetic_raw(uint64_t seed, int64_t classes, int64_t per_class,
                                     int64_t channels, int64_t height, int64_t width,
                                     uint64_t stream = 0) {
  if (classes < 2) throw ConfigError("make_synthetic: need at least 2 classes");
  if (per_class < 1 || channels < 1 || height < 1 || width < 1)
    throw ConfigError("make_synthetic: extents must be positive");

  // Per-class smooth mean patterns: a few seeded Gaussian bumps per channel.
  Rng pattern_rng(derive_seed(seed, "syn,pattern"));
  const int bumps = 3;
  const int64_t chw = channels * height * width;
  std::vector<float> patterns(static_cast<size_t>(classes * chw), 0.f);
  for (int64_t k = 0; k < classes; ++k) {
    for (int64_t c = 0; c < channels; ++c) {
      float* plane = patterns.data() + (k * channels + c) * height * width;
      for (int bump = 0; bump < bumps; ++bump) {
        const double cy = pattern_rng.uniform(0.15, 0.85) * height;
        const double cx = pattern_rng.uniform(0.15, 0.85) * width;
        const double sigma = pattern_rng.uniform(0.08, 0.22) * std::min(height, width);
        const double amp = pattern_rng.uniform(0.35, 0.9);
        for (int64_t y = 0; y < height; ++y)
          for (int64_t x = 0; x < width; ++x) {
            const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
            plane[y * width + x] +=
                static_cast<float>(amp * std::exp(-d2 / (2.0 * sigma * sigma)));
          }
      }
    }
  }

  Rng noise_rng(derive_seed(seed, "syn,noise", stream));
  RawDataset raw;
  raw.channels = channels;
  raw.height = height;
  raw.width = width;
  raw.pixels.resize(static_cast<size_t>(classes * per_class * chw));
  raw.labels.resize(static_cast<size_t>(classes * per_class));
  int64_t idx = 0;
  for (int64_t k = 0; k < classes; ++k) {
    const float* pat = patterns.data() + k * chw;
    for (int64_t s = 0; s < per_class; ++s, ++idx) {
      raw.labels[static_cast<size_t>(idx)] = static_cast<int>(k);
      uint8_t* px = raw.pixels.data() + idx * chw;
      for (int64_t e = 0; e < chw; ++e) {
        const double v = 0.1 + pat[e] + noise_rng.normal(0.0, 0.18);
        const double q = std::floor(v * 255.0 + 0.5);
        px[e] = static_cast<uint8_t>(std::clamp(q, 0.0, 255.0));
      }
    }
  }
  return raw;
}

inline Dataset make_synthetic(uint64_t seed, int64_t classes, int64_t per_class,
                              int64_t channels, int64_t height, int64_t width,
                              uint64_t stream = 0) {
  RawDataset raw = make_synthetic_raw(seed, classes, per_class, channels, height, width, stream);
  return normalize_dataset(raw, compute_stats(raw), classes);
}

// Held-out split drawn from the same class patterns, normalized with the
// training split's statistics.
inline Dataset make_synthetic_eval(uint64_t seed, int64_t classes, int64_t per_class,
                                   int64_t channels, int64_t height, int64_t width,
                                   const ChannelStats& train_stats) {
  RawDataset raw =
      make_synthetic_raw(seed, classes, per_class, channels, height, width, /*stream=*/1);
  return normalize_dataset(raw, train_stats, classes);
}

// ---------------------------------------------------------------------------
// Batch iteration: every epoch visits each sample exactly once; the
// permutation is a pure function of (epoch_seed, epoch).
// ---------------------------------------------------------------------------
inline std::vector<std::vector<int64_t>> epoch_batches(int64_t n, int64_t batch_size,
                                                       uint64_t epoch_seed, int64_t epoch,
                                                       bool shuffle) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  if (shuffle) {
    Rng rng(derive_seed(epoch_seed, "shuffle", static_cast<uint64_t>(epoch)));
    rng.shuffle(order);
  }
  std::vector<std::vector<int64_t>> batches;
  for (int64_t start = 0; start < n; start += batch_size) {
    const int64_t end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

// Assemble one image batch. Optional deterministic horizontal flip for
// training-time augmentation.
template <typename S>
Tensor<S> make_batch(const Dataset& ds, const std::vector<int64_t>& indices,
                     bool hflip = false, Rng* flip_rng = nullptr) {
  const int64_t elems = ds.sample_elems();
  std::vector<S> data(static_cast<size_t>(indices.size()) * elems);
  for (size_t bi = 0; bi < indices.size(); ++bi) {
    const float* src = ds.images.data() + indices[bi] * elems;
    S* dst = data.data() + bi * elems;
    const bool flip = hflip && flip_rng && flip_rng->uniform() < 0.5;
    if (!flip) {
      for (int64_t e = 0; e < elems; ++e) dst[e] = static_cast<S>(src[e]);
    } else {
      for (int64_t c = 0; c < ds.channels; ++c)
        for (int64_t y = 0; y < ds.height; ++y)
          for (int64_t x = 0; x < ds.width; ++x)
            dst[(c * ds.height + y) * ds.width + x] =
                static_cast<S>(src[(c * ds.height + y) * ds.width + (ds.width - 1 - x)]);
    }
  }
  return Tensor<S>::from({static_cast<int64_t>(indices.size()), ds.channels, ds.height, ds.width},
                         std::move(data));
}

inline std::vector<int> batch_labels(const Dataset& ds, const std::vector<int64_t>& indices) {
  std::vector<int> out(indices.size());
  for (size_t i = 0; i < indices.size(); ++i) out[i] = ds.labels[static_cast<size_t>(indices[i])];
  return out;
}

}  // namespace rkd
