// Copyright (c) 2026 The rkd authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line harness: separation planning, teacher training, distillation,
// evaluation, and feature export. Exit codes: 0 success, 1 runtime failure,
// 2 usage error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "rkd/checkpoint.hpp"
#include "rkd/config.hpp"
#include "rkd/distill.hpp"
#include "rkd/flops.hpp"

namespace {

using Scalar = float;

struct CommonFlags {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> variant;
};

rkd::RunConfig resolve_config(const CommonFlags& f) {
  rkd::RunConfig cfg =
      f.config_path.empty() ? rkd::parse_run_config(nlohmann::json::object())
                            : rkd::load_run_config(f.config_path);
  if (f.seed) {
    cfg.seed = *f.seed;
    cfg.resolved["seed"] = *f.seed;
  }
  if (f.out) {
    cfg.output_dir = *f.out;
    cfg.resolved["output_dir"] = *f.out;
  }
  if (f.variant) {
    cfg.variant = *f.variant;
    cfg.resolved["variant"] = *f.variant;
  }
  return cfg;
}

std::ofstream open_metrics(const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream f(dir + "/metrics.jsonl", std::ios::trunc);
  if (!f) throw rkd::ConfigError("cannot write " + dir + "/metrics.jsonl");
  return f;
}

int cmd_separate(const std::string& spec_path, double ratio, const std::string& out_path) {
  rkd::NetworkSpec spec = rkd::load_spec(spec_path);
  rkd::SeparationPlan plan = rkd::separate(spec, ratio);
  nlohmann::json j = plan;
  if (!out_path.empty()) {
    std::ofstream f(out_path);
    if (!f) throw rkd::ConfigError("cannot write " + out_path);
    f << j.dump(2) << "\n";
  }
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_train_teacher(const CommonFlags& flags) {
  rkd::RunConfig cfg = resolve_config(flags);
  if (cfg.teacher_spec.empty()) throw rkd::ConfigError("config needs teacher_spec");
  rkd::NetworkSpec spec = rkd::load_spec(cfg.teacher_spec);
  rkd::LoadedData data = rkd::load_data(cfg.dataset, cfg.seed);

  rkd::write_resolved_config(cfg, cfg.output_dir);
  std::ofstream mf = open_metrics(cfg.output_dir);
  rkd::MetricsWriter writer;
  writer.stream = &mf;

  rkd::Network<Scalar> teacher = rkd::train_teacher<Scalar>(
      spec, data.train, data.eval, cfg.train_settings(), cfg.batchnorm, &writer);
  rkd::save_checkpoint(teacher, cfg.output_dir + "/teacher", rkd::config_hash(cfg));
  std::cout << "teacher checkpoint written to " << cfg.output_dir << "/teacher\n";
  return 0;
}

int cmd_distill(const CommonFlags& flags) {
  rkd::RunConfig cfg = resolve_config(flags);
  if (cfg.teacher_checkpoint.empty()) throw rkd::ConfigError("config needs teacher_checkpoint");
  rkd::validate_distill_sources(cfg);
  const bool with_assistant = cfg.resolved.value("with_assistant", true);

  rkd::Checkpoint tc = rkd::load_checkpoint(cfg.teacher_checkpoint);
  rkd::Network<Scalar> teacher = rkd::restore_network<Scalar>(tc);

  rkd::NetworkSpec spec_student;
  std::optional<rkd::NetworkSpec> spec_assistant;
  if (!cfg.base_spec.empty()) {
    rkd::SeparationPlan plan = rkd::separate(rkd::load_spec(cfg.base_spec), cfg.ratio);
    spec_student = plan.spec_student;
    if (with_assistant) spec_assistant = plan.spec_assistant;
  } else {
    spec_student = rkd::load_spec(cfg.student_spec);
    if (with_assistant && !cfg.assistant_spec.empty())
      spec_assistant = rkd::load_spec(cfg.assistant_spec);
  }

  rkd::LoadedData data = rkd::load_data(cfg.dataset, cfg.seed);
  rkd::write_resolved_config(cfg, cfg.output_dir);
  std::ofstream mf = open_metrics(cfg.output_dir);
  rkd::MetricsWriter writer;
  writer.stream = &mf;

  rkd::DistillResult<Scalar> result = rkd::run_distillation<Scalar>(
      teacher, spec_student, spec_assistant ? &*spec_assistant : nullptr, data.train, data.eval,
      rkd::variant_from(cfg.variant), cfg.train_settings(), cfg.batchnorm,
      cfg.classifier_finetune, &writer);

  auto extras = rkd::adapter_extras(result.student_adapters, "adapter");
  extras.emplace_back("classifier.w", result.classifier_w);
  extras.emplace_back("classifier.b", result.classifier_b);
  rkd::save_checkpoint(result.student, cfg.output_dir + "/student", rkd::config_hash(cfg), extras);
  if (result.has_assistant) {
    rkd::save_checkpoint(result.assistant, cfg.output_dir + "/assistant", rkd::config_hash(cfg),
                         rkd::adapter_extras(result.assistant_adapters, "adapter"));
  }
  std::cout << "distillation artifacts written to " << cfg.output_dir << "\n";
  return 0;
}

// Restores the evaluated system from checkpoints named in the config.
struct LoadedSystem {
  rkd::Network<Scalar> teacher;
  rkd::Network<Scalar> student, assistant;
  rkd::AdapterSet<Scalar> student_adapters, assistant_adapters;
  bool has_student = false, has_assistant = false;
  rkd::StudentSystem<Scalar> sys;
};

LoadedSystem load_system(const rkd::RunConfig& cfg) {
  if (cfg.teacher_checkpoint.empty()) throw rkd::ConfigError("config needs teacher_checkpoint");
  LoadedSystem ls;
  rkd::Checkpoint tc = rkd::load_checkpoint(cfg.teacher_checkpoint);
  ls.teacher = rkd::restore_network<Scalar>(tc);
  if (cfg.student_checkpoint.empty()) return ls;

  ls.has_student = true;
  rkd::Checkpoint sc = rkd::load_checkpoint(cfg.student_checkpoint);
  ls.student = rkd::restore_network<Scalar>(sc);
  const int64_t K = ls.student.tap_count();
  ls.student_adapters = rkd::restore_adapters<Scalar>(sc, "adapter", K);
  ls.sys.student = &ls.student;
  ls.sys.student_adapters = &ls.student_adapters;
  const rkd::CheckpointEntry* cw = sc.find("classifier.w");
  const rkd::CheckpointEntry* cb = sc.find("classifier.b");
  if (cw && cb) {
    ls.sys.classifier_w =
        rkd::Tensor<Scalar>::from(cw->shape, std::vector<Scalar>(cw->data.begin(), cw->data.end()));
    ls.sys.classifier_b =
        rkd::Tensor<Scalar>::from(cb->shape, std::vector<Scalar>(cb->data.begin(), cb->data.end()));
  } else {
    ls.sys.classifier_w = ls.teacher.fc_w.detach();
    ls.sys.classifier_b = ls.teacher.fc_b.detach();
  }
  if (!cfg.assistant_checkpoint.empty()) {
    ls.has_assistant = true;
    rkd::Checkpoint ac = rkd::load_checkpoint(cfg.assistant_checkpoint);
    ls.assistant = rkd::restore_network<Scalar>(ac);
    ls.assistant_adapters = rkd::restore_adapters<Scalar>(ac, "adapter", K);
    ls.sys.assistant = &ls.assistant;
    ls.sys.assistant_adapters = &ls.assistant_adapters;
  }
  ls.sys.routing = rkd::variant_from(cfg.variant) == rkd::Variant::Progressive
                       ? rkd::FusionRouting::PerBlock
                       : rkd::FusionRouting::FinalSum;
  return ls;
}

int cmd_eval(const CommonFlags& flags) {
  rkd::RunConfig cfg = resolve_config(flags);
  LoadedSystem ls = load_system(cfg);
  rkd::LoadedData data = rkd::load_data(cfg.dataset, cfg.seed);
  rkd::MetricsRecord r = rkd::evaluate<Scalar>(ls.teacher, ls.has_student ? &ls.sys : nullptr,
                                               data.eval, cfg.batch_size);
  r.phase = "eval";
  std::cout << nlohmann::json(r).dump() << "\n";
  return 0;
}

int cmd_export_features(const CommonFlags& flags, int64_t level_1based,
                        const std::string& out_path) {
  rkd::RunConfig cfg = resolve_config(flags);
  LoadedSystem ls = load_system(cfg);
  rkd::LoadedData data = rkd::load_data(cfg.dataset, cfg.seed);
  const rkd::Dataset& ds = data.eval;

  const int64_t K = ls.teacher.tap_count();
  const int64_t level = (level_1based <= 0 ? K : level_1based) - 1;
  if (level < 0 || level >= K)
    throw rkd::ConfigError("level must lie in [1," + std::to_string(K) + "]");

  std::ofstream f(out_path);
  if (!f) throw rkd::ConfigError("cannot write " + out_path);

  rkd::NoGradGuard ng;
  bool wrote_header = false;
  int64_t sample_id = 0;
  for (const auto& idx : rkd::epoch_batches(ds.size(), cfg.batch_size, 0, 0, false)) {
    rkd::Tensor<Scalar> x = rkd::make_batch<Scalar>(ds, idx);
    rkd::Tensor<Scalar> feat;
    if (ls.has_student) {
      feat = rkd::fused_feature_at(ls.sys, x, level);
    } else {
      feat = rkd::forward_with_taps(ls.teacher, x, false).taps[static_cast<size_t>(level)];
    }
    const int64_t elems = feat.numel() / static_cast<int64_t>(idx.size());
    if (!wrote_header) {
      f << "id,label";
      for (int64_t e = 0; e < elems; ++e) f << ",f" << e;
      f << "\n";
      wrote_header = true;
    }
    const std::vector<int> labels = rkd::batch_labels(ds, idx);
    for (size_t i = 0; i < idx.size(); ++i, ++sample_id) {
      f << sample_id << "," << labels[i];
      const Scalar* row = feat.data() + static_cast<int64_t>(i) * elems;
      for (int64_t e = 0; e < elems; ++e) f << "," << row[e];
      f << "\n";
    }
  }
  std::cout << "features written to " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"residual knowledge distillation toolkit"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string spec_path, out_path;
  double ratio = 0.0;
  int64_t level = 0;

  CLI::App* sep = app.add_subcommand("separate", "split a spec into student + assistant");
  sep->add_option("--spec", spec_path, "network spec JSON")->required();
  sep->add_option("--ratio", ratio, "student cost share in (0,1)")->required();
  sep->add_option("--out", out_path, "plan output path");

  auto add_common = [&](CLI::App* c) {
    c->add_option("--config", flags.config_path, "run config JSON")->required();
    c->add_option("--seed", [&flags](const std::vector<std::string>& v) {
      flags.seed = std::stoull(v.at(0));
      return true;
    }, "override config seed");
  };
  auto add_outdir = [&](CLI::App* c) {
    c->add_option("--out", [&flags](const std::vector<std::string>& v) {
      flags.out = v.at(0);
      return true;
    }, "override output_dir");
  };

  CLI::App* tt = app.add_subcommand("train-teacher", "train the teacher network");
  add_common(tt);
  add_outdir(tt);

  CLI::App* di = app.add_subcommand("distill", "run a distillation schedule");
  add_common(di);
  add_outdir(di);
  di->add_option("--variant", [&flags](const std::vector<std::string>& v) {
    flags.variant = v.at(0);
    return true;
  }, "plain | progressive | integrated");

  CLI::App* ev = app.add_subcommand("eval", "evaluate checkpoints on the eval split");
  add_common(ev);

  CLI::App* ex = app.add_subcommand("export-features", "write per-sample features as CSV");
  add_common(ex);
  ex->add_option("--level", level, "tap level, 1-based (default: final)");
  ex->add_option("--out", out_path, "CSV output path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (sep->parsed()) return cmd_separate(spec_path, ratio, out_path);
    if (tt->parsed()) return cmd_train_teacher(flags);
    if (di->parsed()) return cmd_distill(flags);
    if (ev->parsed()) return cmd_eval(flags);
    if (ex->parsed()) return cmd_export_features(flags, level, out_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
