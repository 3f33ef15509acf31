// Copyright (c) 2026 The rkd authors
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: a single JSON document, optionally overridden by CLI
// flags. The resolved document is copied next to every artifact a command
// writes, so runs stay reproducible and diffable.

#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "rkd/checkpoint.hpp"
#include "rkd/data.hpp"
#include "rkd/distill.hpp"

namespace rkd {

struct DataConfig {
  std::string kind = "synthetic";  // synthetic | idx | cifar-binary
  std::string path;
  int64_t classes = 10;
  int64_t per_class = 200;
  int64_t eval_per_class = 40;
  Shape size = {1, 32, 32};
  int64_t subset_per_class = 0;       // cap train samples per class (file formats)
  int64_t eval_subset_per_class = 0;  // cap eval samples per class (file formats)
};

struct RunConfig {
  uint64_t seed = 1;
  bool batchnorm = true;
  bool classifier_finetune = false;
  bool hflip = false;
  DataConfig dataset;

  std::string teacher_spec;  // spec path for train-teacher
  std::string base_spec;     // base spec + ratio for distillation...
  double ratio = 0.0;
  std::string student_spec, assistant_spec;  // ...or explicit derived specs

  std::string variant = "integrated";
  int epochs = 10;
  int64_t batch_size = 64;
  LrSchedule sched{0.1, 30, 0.1};

  std::string teacher_checkpoint, student_checkpoint, assistant_checkpoint;
  std::string output_dir = "out";

  nlohmann::json resolved;  // the exact document the run is configured from

  TrainSettings train_settings() const {
    TrainSettings s;
    s.epochs = epochs;
    s.batch_size = batch_size;
    s.sched = sched;
    s.seed = seed;
    s.hflip = hflip;
    return s;
  }
};

inline void from_json(const nlohmann::json& j, DataConfig& d) {
  d.kind = j.value("kind", std::string("synthetic"));
  d.path = j.value("path", std::string{});
  d.classes = j.value("classes", int64_t{10});
  d.per_class = j.value("per_class", int64_t{200});
  d.eval_per_class = j.value("eval_per_class", int64_t{40});
  if (j.contains("size")) d.size = j.at("size").get<Shape>();
  d.subset_per_class = j.value("subset_per_class", int64_t{0});
  d.eval_subset_per_class = j.value("eval_subset_per_class", int64_t{0});
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig c;
  c.resolved = j;
  c.seed = j.value("seed", uint64_t{1});
  c.batchnorm = j.value("batchnorm", true);
  c.classifier_finetune = j.value("classifier_finetune", false);
  c.hflip = j.value("hflip", false);
  if (j.contains("dataset")) c.dataset = j.at("dataset").get<DataConfig>();
  c.teacher_spec = j.value("teacher_spec", std::string{});
  c.base_spec = j.value("base_spec", std::string{});
  c.ratio = j.value("ratio", 0.0);
  c.student_spec = j.value("student_spec", std::string{});
  c.assistant_spec = j.value("assistant_spec", std::string{});
  c.variant = j.value("variant", std::string("integrated"));
  c.epochs = j.value("epochs", 10);
  c.batch_size = j.value("batch_size", int64_t{64});
  if (j.contains("lr")) {
    const auto& l = j.at("lr");
    c.sched.base = l.value("base", 0.1);
    c.sched.decay_every = l.value("decay_every", 30);
    c.sched.factor = l.value("factor", 0.1);
  }
  c.teacher_checkpoint = j.value("teacher_checkpoint", std::string{});
  c.student_checkpoint = j.value("student_checkpoint", std::string{});
  c.assistant_checkpoint = j.value("assistant_checkpoint", std::string{});
  c.output_dir = j.value("output_dir", std::string("out"));
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("failed to parse config " + path + ": " + e.what());
  }
  return parse_run_config(j);
}

// Exactly one of {base spec + ratio, explicit student spec} must be present
// for a distillation run.
inline void validate_distill_sources(const RunConfig& c) {
  const bool base = !c.base_spec.empty() || c.ratio != 0.0;
  const bool explicit_specs = !c.student_spec.empty() || !c.assistant_spec.empty();
  if (base == explicit_specs)
    throw ConfigError(
        "distillation needs exactly one of: (base_spec + ratio) or explicit "
        "student_spec/assistant_spec");
  if (base && (c.base_spec.empty() || !(c.ratio > 0.0 && c.ratio < 1.0)))
    throw ConfigError("base_spec and a ratio in (0,1) are both required");
  if (explicit_specs && c.student_spec.empty())
    throw ConfigError("student_spec is required when assistant_spec is given");
}

struct LoadedData {
  Dataset train, eval;
};

inline LoadedData load_data(const DataConfig& d, uint64_t seed) {
  LoadedData out;
  if (d.kind == "synthetic") {
    if (d.size.size() != 3) throw ConfigError("dataset.size must be [C,H,W]");
    const uint64_t dseed = derive_seed(seed, "data");
    out.train = make_synthetic(dseed, d.classes, d.per_class, d.size[0], d.size[1], d.size[2]);
    out.eval = make_synthetic_eval(dseed, d.classes, d.eval_per_class, d.size[0], d.size[1],
                                   d.size[2], out.train.stats);
    return out;
  }
  if (d.kind == "idx" || d.kind == "cifar-binary") {
    if (d.path.empty()) throw ConfigError("dataset.path is required for format " + d.kind);
    DatasetSplits splits = load_dataset_splits(d.path, d.kind);
    out.train = d.subset_per_class > 0 ? subset_per_class(splits.train, d.subset_per_class)
                                       : std::move(splits.train);
    out.eval = d.eval_subset_per_class > 0
                   ? subset_per_class(splits.test, d.eval_subset_per_class)
                   : std::move(splits.test);
    return out;
  }
  throw ConfigError("unknown dataset kind '" + d.kind + "'");
}

inline std::string config_hash(const RunConfig& c) { return hash_hex(c.resolved.dump()); }

// Every command that writes artifacts drops the exact resolved config next
// to them.
inline void write_resolved_config(const RunConfig& c, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream f(dir + "/resolved_config.json");
  if (!f) throw ConfigError("cannot write " + dir + "/resolved_config.json");
  f << c.resolved.dump(2) << "\n";
}

}  // namespace rkd
