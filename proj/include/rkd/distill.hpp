// Copyright (c) 2026 The rkd authors
// SPDX-License-Identifier: Apache-2.0
//
// Feature-map distillation: teacher training, the mimic and residual losses,
// the plain / progressive / integrated schedules, fused inference over
// student+assistant features, and evaluation metrics.
//
// Frozen models (the teacher everywhere, the student during assistant
// phases) run in eval mode under NoGradGuard, and their per-sample features
// over the training set are computed once and cached; training then reads
// constant targets out of the cache.

#pragma once

#include <functional>
#include <type_traits>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rkd/data.hpp"
#include "rkd/network.hpp"
#include "rkd/optim.hpp"

namespace rkd {

enum class Variant { Plain, Progressive, Integrated };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::Plain: return "plain";
    case Variant::Progressive: return "progressive";
    case Variant::Integrated: return "integrated";
  }
  return "?";
}

inline Variant variant_from(const std::string& s) {
  if (s == "plain") return Variant::Plain;
  if (s == "progressive") return Variant::Progressive;
  if (s == "integrated") return Variant::Integrated;
  throw ConfigError("unknown variant '" + s + "' (expected plain|progressive|integrated)");
}

// How student/assistant features combine at inference time. Plain and
// integrated schedules sum the final taps; the progressive schedule routes
// the fused feature of block i into block i+1 of both models.
enum class FusionRouting { FinalSum, PerBlock };

struct MetricsRecord {
  int epoch = 0;
  std::string phase;
  double top1 = 0, top5 = 0;
  double feature_l2 = 0;
  double train_loss = 0;
};

inline void to_json(nlohmann::json& j, const MetricsRecord& r) {
  j = nlohmann::json{{"epoch", r.epoch},         {"phase", r.phase},
                     {"top1", r.top1},           {"top5", r.top5},
                     {"feature_l2", r.feature_l2}, {"train_loss", r.train_loss}};
}

// Collects records and, when a stream is attached, appends one JSON line per
// record, flushed immediately.
struct MetricsWriter {
  std::vector<MetricsRecord> records;
  std::ostream* stream = nullptr;

  void emit(const MetricsRecord& r) {
    records.push_back(r);
    if (stream) {
      *stream << nlohmann::json(r).dump() << "\n";
      stream->flush();
    }
  }
};

struct TrainSettings {
  int epochs = 10;
  int64_t batch_size = 64;
  LrSchedule sched{0.1, 30, 0.1};
  uint64_t seed = 1;
  double momentum = 0.9;
  bool hflip = false;
};

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

// Eq-style mimic loss: batch-mean squared l2 between the teacher feature and
// the (already adapted) student feature.
template <typename S>
Tensor<S> student_mimic_loss(const Tensor<S>& teacher_tap, const Tensor<S>& student_adapted) {
  return squared_l2_mean(teacher_tap, student_adapted);
}

// Residual loss over the given levels: sum_i ||(f_i^T - f_i^S) - f_i^A||^2
// (batch mean). Teacher and student taps must be detached; only the
// assistant side carries gradient.
template <typename S>
Tensor<S> assistant_residual_loss(const std::vector<Tensor<S>>& teacher_taps,
                                  const std::vector<Tensor<S>>& student_taps_adapted,
                                  const std::vector<Tensor<S>>& assistant_taps_adapted,
                                  const std::vector<int64_t>& levels) {
  if (levels.empty()) throw ShapeError("assistant_residual_loss: no levels given");
  Tensor<S> total;
  for (int64_t lvl : levels) {
    if (lvl < 0 || lvl >= static_cast<int64_t>(teacher_taps.size()))
      throw ShapeError("assistant_residual_loss: level " + std::to_string(lvl) + " out of range");
    const auto& ft = teacher_taps[static_cast<size_t>(lvl)];
    const auto& fs = student_taps_adapted[static_cast<size_t>(lvl)];
    const auto& fa = assistant_taps_adapted[static_cast<size_t>(lvl)];
    if (ft.shape() != fs.shape() || ft.shape() != fa.shape())
      throw ShapeError("assistant_residual_loss: shape mismatch at level " + std::to_string(lvl) +
                       ": T " + shape_str(ft.shape()) + ", S " + shape_str(fs.shape()) + ", A " +
                       shape_str(fa.shape()));
    Tensor<S> term = squared_l2_mean(sub(ft, fs), fa);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Frozen-model feature caches
// ---------------------------------------------------------------------------
template <typename S>
struct FeatureCache {
  Shape sample_shape;  // [C,H,W]
  std::vector<S> data; // [n, C, H, W]
  int64_t count = 0;

  void init(Shape shape, int64_t n) {
    sample_shape = std::move(shape);
    count = n;
    data.assign(static_cast<size_t>(n * shape_numel(sample_shape)), S(0));
  }

  void store(int64_t index, const S* src) {
    const int64_t elems = shape_numel(sample_shape);
    std::copy(src, src + elems, data.begin() + index * elems);
  }

  void store_batch(const std::vector<int64_t>& indices, const Tensor<S>& batch) {
    const int64_t elems = shape_numel(sample_shape);
    for (size_t i = 0; i < indices.size(); ++i)
      store(indices[i], batch.data() + static_cast<int64_t>(i) * elems);
  }

  Tensor<S> batch(const std::vector<int64_t>& indices) const {
    const int64_t elems = shape_numel(sample_shape);
    std::vector<S> out(indices.size() * static_cast<size_t>(elems));
    for (size_t i = 0; i < indices.size(); ++i) {
      const S* src = data.data() + indices[i] * elems;
      std::copy(src, src + elems, out.data() + static_cast<int64_t>(i) * elems);
    }
    Shape s = sample_shape;
    s.insert(s.begin(), static_cast<int64_t>(indices.size()));
    return Tensor<S>::from(std::move(s), std::move(out));
  }

  // In-place: this <- this - other (residual targets).
  void subtract(const FeatureCache& other) {
    for (size_t i = 0; i < data.size(); ++i) data[i] -= other.data[i];
  }
};

namespace detail {

template <typename S>
std::vector<std::vector<int64_t>> eval_order_batches(int64_t n, int64_t batch_size) {
  return epoch_batches(n, batch_size, 0, 0, /*shuffle=*/false);
}

// Runs a frozen network over the dataset once and caches the requested
// adapted tap levels (adapter absent => raw taps).
template <typename S>
std::vector<FeatureCache<S>> cache_taps(Network<S>& net,
                                        std::type_identity_t<const AdapterSet<S>*> adapters,
                                        const Dataset& ds, int64_t batch_size,
                                        const std::vector<int64_t>& levels) {
  NoGradGuard ng;
  std::vector<FeatureCache<S>> caches(levels.size());
  bool first = true;
  for (const auto& idx : eval_order_batches<S>(ds.size(), batch_size)) {
    Tensor<S> x = make_batch<S>(ds, idx);
    ForwardResult<S> fr = forward_with_taps(net, x, /*training=*/false);
    for (size_t li = 0; li < levels.size(); ++li) {
      Tensor<S> tap = fr.taps[static_cast<size_t>(levels[li])];
      if (adapters) tap = adapt_feature(tap, *adapters, levels[li]);
      if (first) {
        Shape per_sample(tap.shape().begin() + 1, tap.shape().end());
        caches[li].init(per_sample, ds.size());
      }
      caches[li].store_batch(idx, tap);
    }
    first = false;
  }
  return caches;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Fused inference and evaluation
// ---------------------------------------------------------------------------
template <typename S>
struct StudentSystem {
  Network<S>* student = nullptr;
  const AdapterSet<S>* student_adapters = nullptr;
  Network<S>* assistant = nullptr;  // may be null
  const AdapterSet<S>* assistant_adapters = nullptr;
  Tensor<S> classifier_w, classifier_b;  // teacher-space classifier
  FusionRouting routing = FusionRouting::FinalSum;
};

template <typename S>
struct InferenceResult {
  Tensor<S> probabilities;  // [N, classes], rows sum to 1
  Tensor<S> fused_feature;  // final feature in teacher space
};

// Fused feature at one level under the system's routing (assistant optional).
template <typename S>
Tensor<S> fused_feature_at(StudentSystem<S>& sys, const Tensor<S>& batch, int64_t level) {
  NoGradGuard ng;
  const int64_t K = sys.student->tap_count();
  if (level < 0 || level >= K)
    throw ShapeError("fused_feature_at: level " + std::to_string(level) + " out of range");
  if (sys.routing == FusionRouting::PerBlock) {
    Tensor<S> h = batch;
    for (int64_t i = 0; i <= level; ++i) {
      Tensor<S> fs = adapt_feature(forward_block(*sys.student, i, h, false),
                                   *sys.student_adapters, i);
      if (sys.assistant) {
        Tensor<S> fa = adapt_feature(forward_block(*sys.assistant, i, h, false),
                                     *sys.assistant_adapters, i);
        h = add(fs, fa);
      } else {
        h = fs;
      }
    }
    return h;
  }
  ForwardResult<S> fs = forward_with_taps(*sys.student, batch, false);
  Tensor<S> f = adapt_feature(fs.taps[static_cast<size_t>(level)], *sys.student_adapters, level);
  if (sys.assistant) {
    ForwardResult<S> fa = forward_with_taps(*sys.assistant, batch, false);
    f = add(f, adapt_feature(fa.taps[static_cast<size_t>(level)], *sys.assistant_adapters, level));
  }
  return f;
}

template <typename S>
InferenceResult<S> fused_inference(StudentSystem<S>& sys, const Tensor<S>& batch) {
  NoGradGuard ng;
  InferenceResult<S> r;
  r.fused_feature = fused_feature_at(sys, batch, sys.student->tap_count() - 1);
  Tensor<S> logits = linear(global_avg_pool(r.fused_feature), sys.classifier_w, sys.classifier_b);
  r.probabilities = softmax_rows(logits);
  return r;
}

namespace detail {

// Rank of the true label among the logits; deterministic under ties.
template <typename S>
int64_t label_rank(const S* row, int64_t classes, int label) {
  const S v = row[label];
  int64_t rank = 0;
  for (int64_t c = 0; c < classes; ++c) {
    if (row[c] > v || (row[c] == v && c < label)) ++rank;
  }
  return rank;
}

}  // namespace detail

// Top-1 / top-5 accuracy plus the mean per-sample squared l2 distance between
// the teacher's final tap and the evaluated final feature. With no student
// system the teacher evaluates itself (feature_l2 == 0).
template <typename S>
MetricsRecord evaluate(Network<S>& teacher, StudentSystem<S>* sys, const Dataset& ds,
                       int64_t batch_size) {
  if (ds.size() == 0) throw ConfigError("evaluate: dataset is empty");
  NoGradGuard ng;
  const int64_t topk = std::min<int64_t>(5, ds.classes);
  int64_t hit1 = 0, hitk = 0;
  double feat_acc = 0.0;
  for (const auto& idx : detail::eval_order_batches<S>(ds.size(), batch_size)) {
    Tensor<S> x = make_batch<S>(ds, idx);
    ForwardResult<S> tfr = forward_with_taps(teacher, x, false);
    Tensor<S> f_teacher = tfr.taps.back();
    Tensor<S> probs, f_eval;
    if (sys) {
      InferenceResult<S> ir = fused_inference(*sys, x);
      probs = ir.probabilities;
      f_eval = ir.fused_feature;
    } else {
      probs = softmax_rows(tfr.logits);
      f_eval = f_teacher;
    }
    if (f_eval.shape() != f_teacher.shape())
      throw ShapeError("evaluate: fused feature " + shape_str(f_eval.shape()) +
                       " does not match teacher tap " + shape_str(f_teacher.shape()));
    const std::vector<int> labels = batch_labels(ds, idx);
    const int64_t B = static_cast<int64_t>(idx.size());
    for (int64_t i = 0; i < B; ++i) {
      const int64_t rank =
          detail::label_rank(probs.data() + i * ds.classes, ds.classes, labels[static_cast<size_t>(i)]);
      if (rank < 1) ++hit1;
      if (rank < topk) ++hitk;
    }
    const S* a = f_teacher.data();
    const S* b = f_eval.data();
    double acc = 0.0;
    for (int64_t e = 0; e < f_teacher.numel(); ++e) {
      const double d = static_cast<double>(a[e]) - static_cast<double>(b[e]);
      acc += d * d;
    }
    feat_acc += acc;
  }
  MetricsRecord r;
  r.top1 = 100.0 * static_cast<double>(hit1) / static_cast<double>(ds.size());
  r.top5 = 100.0 * static_cast<double>(hitk) / static_cast<double>(ds.size());
  r.feature_l2 = feat_acc / static_cast<double>(ds.size());
  return r;
}

// ---------------------------------------------------------------------------
// Teacher training (cross-entropy, SGD momentum, step schedule)
// ---------------------------------------------------------------------------
template <typename S>
Network<S> train_teacher(const NetworkSpec& spec, const Dataset& train, const Dataset& eval_ds,
                         const TrainSettings& settings, bool use_batchnorm = true,
                         MetricsWriter* writer = nullptr) {
  if (train.classes != spec.classes)
    throw ConfigError("train_teacher: dataset has " + std::to_string(train.classes) +
                      " classes but spec expects " + std::to_string(spec.classes));
  Network<S> net = build_network<S>(spec, derive_seed(settings.seed, "teacher-init"), use_batchnorm);
  SgdMomentum<S> opt(parameters(net), settings.momentum);
  const uint64_t shuffle_seed = derive_seed(settings.seed, "teacher-shuffle");
  for (int epoch = 0; epoch < settings.epochs; ++epoch) {
    const double lr = settings.sched.lr(epoch);
    Rng flip_rng(derive_seed(settings.seed, "teacher-flip", static_cast<uint64_t>(epoch)));
    double loss_acc = 0.0;
    for (const auto& idx : epoch_batches(train.size(), settings.batch_size, shuffle_seed, epoch, true)) {
      Tensor<S> x = make_batch<S>(train, idx, settings.hflip, &flip_rng);
      Tensor<S> y = one_hot<S>(batch_labels(train, idx), train.classes);
      ForwardResult<S> fr = forward_with_taps(net, x, /*training=*/true);
      Tensor<S> loss = softmax_cross_entropy(fr.logits, y);
      opt.zero_grad();
      backward(loss);
      opt.step(lr);
      loss_acc += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
    }
    if (writer) {
      MetricsRecord r = evaluate<S>(net, nullptr, eval_ds, settings.batch_size);
      r.epoch = epoch;
      r.phase = "teacher";
      r.train_loss = loss_acc / static_cast<double>(train.size());
      writer->emit(r);
    }
  }
  opt.zero_grad();  // hand back a grad-free network
  return net;
}

// ---------------------------------------------------------------------------
// Distillation runs
// ---------------------------------------------------------------------------
template <typename S>
struct DistillResult {
  Network<S> student;
  Network<S> assistant;
  bool has_assistant = false;
  AdapterSet<S> student_adapters, assistant_adapters;
  Tensor<S> classifier_w, classifier_b;
  FusionRouting routing = FusionRouting::FinalSum;
  std::vector<MetricsRecord> metrics;

  StudentSystem<S> system() {
    StudentSystem<S> sys;
    sys.student = &student;
    sys.student_adapters = &student_adapters;
    if (has_assistant) {
      sys.assistant = &assistant;
      sys.assistant_adapters = &assistant_adapters;
    }
    sys.classifier_w = classifier_w;
    sys.classifier_b = classifier_b;
    sys.routing = routing;
    return sys;
  }
};

namespace detail {

// One SGD phase over `epochs`; `batch_loss(indices) -> scalar loss` builds
// the graph for one batch. Emits one metrics row per epoch via `snapshot`.
template <typename S, typename LossFn, typename SnapshotFn>
void run_phase(const std::string& phase, const TrainSettings& settings, int64_t n_train,
               std::vector<Tensor<S>> params, LossFn&& batch_loss, SnapshotFn&& snapshot,
               MetricsWriter* writer) {
  SgdMomentum<S> opt(std::move(params), settings.momentum);
  const uint64_t shuffle_seed = derive_seed(settings.seed, "shuffle:" + phase);
  for (int epoch = 0; epoch < settings.epochs; ++epoch) {
    const double lr = settings.sched.lr(epoch);
    double loss_acc = 0.0;
    for (const auto& idx : epoch_batches(n_train, settings.batch_size, shuffle_seed, epoch, true)) {
      Tensor<S> loss = batch_loss(idx);
      opt.zero_grad();
      backward(loss);
      opt.step(lr);
      loss_acc += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
    }
    if (writer) {
      MetricsRecord r = snapshot();
      r.epoch = epoch;
      r.phase = phase;
      r.train_loss = loss_acc / static_cast<double>(n_train);
      writer->emit(r);
    }
  }
  opt.zero_grad();  // trained phases end grad-free
}

template <typename S>
std::vector<Tensor<S>> with_adapter(std::vector<Tensor<S>> params, AdapterSet<S>& a,
                                    const std::vector<int64_t>& levels) {
  for (int64_t lvl : levels)
    if (a.has(lvl)) params.push_back(a.weights[static_cast<size_t>(lvl)]);
  return params;
}

inline std::vector<int64_t> all_levels(int64_t k) {
  std::vector<int64_t> v(static_cast<size_t>(k));
  for (int64_t i = 0; i < k; ++i) v[static_cast<size_t>(i)] = i;
  return v;
}

}  // namespace detail

// Runs one distillation schedule against a trained, frozen teacher.
// `spec_assistant == nullptr` trains the student alone (the no-assistant
// baseline); the teacher is bit-identical before and after.
template <typename S>
DistillResult<S> run_distillation(Network<S>& teacher, const NetworkSpec& spec_student,
                                  const NetworkSpec* spec_assistant, const Dataset& train,
                                  const Dataset& eval_ds, Variant variant,
                                  const TrainSettings& settings, bool use_batchnorm = true,
                                  bool classifier_finetune = false,
                                  MetricsWriter* writer = nullptr) {
  const int64_t K = teacher.tap_count();
  if (spec_student.tap_count() != K)
    throw ConfigError("run_distillation: student has " + std::to_string(spec_student.tap_count()) +
                      " blocks but teacher has " + std::to_string(K));
  if (spec_assistant && spec_assistant->tap_count() != K)
    throw ConfigError("run_distillation: assistant has " +
                      std::to_string(spec_assistant->tap_count()) + " blocks but teacher has " +
                      std::to_string(K));

  const std::vector<TapShape> teacher_taps = infer_tap_shapes(teacher.spec);
  const std::vector<TapShape> student_taps = infer_tap_shapes(spec_student);
  for (int64_t i = 0; i < K; ++i) {
    const auto& tt = teacher_taps[static_cast<size_t>(i)];
    const auto& st = student_taps[static_cast<size_t>(i)];
    if (tt.height != st.height || tt.width != st.width)
      throw ConfigError("run_distillation: tap " + std::to_string(i) +
                        " spatial size differs between teacher (" + std::to_string(tt.height) +
                        "x" + std::to_string(tt.width) + ") and student (" +
                        std::to_string(st.height) + "x" + std::to_string(st.width) + ")");
  }

  std::vector<int64_t> teacher_widths, student_widths, assistant_widths;
  for (const auto& t : teacher_taps) teacher_widths.push_back(t.channels);
  for (const auto& t : student_taps) student_widths.push_back(t.channels);
  if (spec_assistant)
    for (const auto& t : infer_tap_shapes(*spec_assistant)) assistant_widths.push_back(t.channels);

  DistillResult<S> result;
  result.routing = variant == Variant::Progressive ? FusionRouting::PerBlock
                                                   : FusionRouting::FinalSum;
  result.has_assistant = spec_assistant != nullptr;

  // Progressive routing feeds teacher-width fused features into blocks >= 1.
  std::vector<int64_t> block_inputs;
  if (variant == Variant::Progressive) {
    block_inputs.push_back(0);  // block 0 reads the image
    for (int64_t i = 0; i + 1 < K; ++i) block_inputs.push_back(teacher_widths[static_cast<size_t>(i)]);
  }

  result.student = build_network<S>(spec_student, derive_seed(settings.seed, "student-init"),
                                    use_batchnorm, block_inputs);
  result.student_adapters = make_adapters<S>(student_widths, teacher_widths,
                                             derive_seed(settings.seed, "student-adapters"),
                                             "adapter");
  if (spec_assistant) {
    result.assistant = build_network<S>(*spec_assistant,
                                        derive_seed(settings.seed, "assistant-init"),
                                        use_batchnorm, block_inputs);
    result.assistant_adapters = make_adapters<S>(assistant_widths, teacher_widths,
                                                 derive_seed(settings.seed, "assistant-adapters"),
                                                 "adapter");
  }
  result.classifier_w = teacher.fc_w.detach();
  result.classifier_w.set_name("classifier.w");
  result.classifier_b = teacher.fc_b.detach();
  result.classifier_b.set_name("classifier.b");

  StudentSystem<S> sys = result.system();
  StudentSystem<S> sys_solo = sys;  // student-only view for pre-assistant metrics
  sys_solo.assistant = nullptr;
  sys_solo.assistant_adapters = nullptr;
  // Rows emitted during student phases evaluate the student alone (the
  // assistant has not trained yet); assistant-phase rows evaluate the fused
  // system.
  auto snapshot_solo = [&]() { return evaluate<S>(teacher, &sys_solo, eval_ds, settings.batch_size); };
  auto snapshot = [&]() { return evaluate<S>(teacher, &sys, eval_ds, settings.batch_size); };

  const int64_t final_level = K - 1;

  if (variant == Variant::Plain || variant == Variant::Integrated) {
    // Teacher targets: final tap always; all taps when the assistant later
    // trains with multi-level supervision.
    const std::vector<int64_t> cache_levels =
        (variant == Variant::Integrated && spec_assistant) ? detail::all_levels(K)
                                                           : std::vector<int64_t>{final_level};
    std::vector<FeatureCache<S>> t_cache =
        detail::cache_taps(teacher, nullptr, train, settings.batch_size, cache_levels);
    const size_t final_ci = cache_levels.size() - 1;  // final level is last in cache_levels

    // Phase 1: student mimics the teacher's final feature map end to end.
    detail::run_phase<S>(
        "student", settings, train.size(),
        detail::with_adapter(feature_parameters(result.student), result.student_adapters, {final_level}),
        [&](const std::vector<int64_t>& idx) {
          Tensor<S> x = make_batch<S>(train, idx);
          ForwardResult<S> fr = forward_with_taps(result.student, x, true);
          Tensor<S> fs = adapt_feature(fr.taps.back(), result.student_adapters, final_level);
          return student_mimic_loss(t_cache[final_ci].batch(idx), fs);
        },
        snapshot_solo, writer);

    if (spec_assistant) {
      // Residual targets per level: f^T - adapted f^S, with the student frozen.
      const std::vector<int64_t> levels = variant == Variant::Integrated
                                              ? detail::all_levels(K)
                                              : std::vector<int64_t>{final_level};
      std::vector<FeatureCache<S>> s_cache = detail::cache_taps(
          result.student, &result.student_adapters, train, settings.batch_size, cache_levels);
      for (size_t i = 0; i < t_cache.size(); ++i) t_cache[i].subtract(s_cache[i]);
      std::vector<FeatureCache<S>>& residual = t_cache;

      detail::run_phase<S>(
          "assistant", settings, train.size(),
          detail::with_adapter(feature_parameters(result.assistant), result.assistant_adapters, levels),
          [&](const std::vector<int64_t>& idx) {
            Tensor<S> x = make_batch<S>(train, idx);
            ForwardResult<S> fr = forward_with_taps(result.assistant, x, true);
            Tensor<S> loss;
            for (size_t li = 0; li < levels.size(); ++li) {
              Tensor<S> fa =
                  adapt_feature(fr.taps[static_cast<size_t>(levels[li])],
                                result.assistant_adapters, levels[li]);
              Tensor<S> term = squared_l2_mean(residual[li].batch(idx), fa);
              loss = loss.defined() ? add(loss, term) : term;
            }
            return loss;
          },
          snapshot, writer);
    }
  } else {
    // Progressive: block by block; the fused feature of block i feeds block
    // i+1 of both models.
    std::vector<FeatureCache<S>> t_cache = detail::cache_taps(
        teacher, nullptr, train, settings.batch_size, detail::all_levels(K));
    FeatureCache<S> fused_input;  // inputs for block i (undefined when i == 0)
    for (int64_t blk = 0; blk < K; ++blk) {
      auto input_batch = [&](const std::vector<int64_t>& idx) {
        return blk == 0 ? make_batch<S>(train, idx) : fused_input.batch(idx);
      };
      const std::string tag = "_block_" + std::to_string(blk + 1);

      detail::run_phase<S>(
          "student" + tag, settings, train.size(),
          detail::with_adapter(block_parameters(result.student, blk), result.student_adapters,
                               {blk}),
          [&](const std::vector<int64_t>& idx) {
            Tensor<S> tap = forward_block(result.student, blk, input_batch(idx), true);
            Tensor<S> fs = adapt_feature(tap, result.student_adapters, blk);
            return student_mimic_loss(t_cache[static_cast<size_t>(blk)].batch(idx), fs);
          },
          snapshot_solo, writer);

      // Adapted student features for this block over the train set.
      FeatureCache<S> s_block;
      {
        NoGradGuard ng;
        bool first = true;
        for (const auto& idx : detail::eval_order_batches<S>(train.size(), settings.batch_size)) {
          Tensor<S> fs = adapt_feature(forward_block(result.student, blk, input_batch(idx), false),
                                       result.student_adapters, blk);
          if (first) {
            Shape per(fs.shape().begin() + 1, fs.shape().end());
            s_block.init(per, train.size());
            first = false;
          }
          s_block.store_batch(idx, fs);
        }
      }

      if (spec_assistant) {
        FeatureCache<S> residual = t_cache[static_cast<size_t>(blk)];
        residual.subtract(s_block);
        detail::run_phase<S>(
            "assistant" + tag, settings, train.size(),
            detail::with_adapter(block_parameters(result.assistant, blk),
                                 result.assistant_adapters, {blk}),
            [&](const std::vector<int64_t>& idx) {
              Tensor<S> tap = forward_block(result.assistant, blk, input_batch(idx), true);
              Tensor<S> fa = adapt_feature(tap, result.assistant_adapters, blk);
              return squared_l2_mean(residual.batch(idx), fa);
            },
            snapshot, writer);
      }

      if (blk + 1 < K) {
        // Fused feature = adapted student (+ adapted assistant) in teacher space.
        if (spec_assistant) {
          NoGradGuard ng;
          FeatureCache<S> fused = s_block;
          for (const auto& idx : detail::eval_order_batches<S>(train.size(), settings.batch_size)) {
            Tensor<S> fa = adapt_feature(
                forward_block(result.assistant, blk, input_batch(idx), false),
                result.assistant_adapters, blk);
            Tensor<S> fs = s_block.batch(idx);
            fused.store_batch(idx, add(fs, fa));
          }
          fused_input = std::move(fused);
        } else {
          fused_input = std::move(s_block);
        }
      }
    }
  }

  // Optional fresh classifier trained on fused features (cross-entropy).
  if (classifier_finetune) {
    FeatureCache<S> pooled;
    {
      NoGradGuard ng;
      bool first = true;
      for (const auto& idx : detail::eval_order_batches<S>(train.size(), settings.batch_size)) {
        Tensor<S> f = fused_feature_at(sys, make_batch<S>(train, idx), final_level);
        Tensor<S> p = global_avg_pool(f);
        if (first) {
          pooled.init({p.dim(1)}, train.size());
          first = false;
        }
        pooled.store_batch(idx, p);
      }
    }
    Rng rng(derive_seed(settings.seed, "finetune-init"));
    Tensor<S> w = detail::kaiming_linear<S>(train.classes, pooled.sample_shape[0], rng);
    w.set_name("classifier.w");
    Tensor<S> b = detail::param_zeros<S>({train.classes});
    b.set_name("classifier.b");
    detail::run_phase<S>(
        "classifier", settings, train.size(), {w, b},
        [&](const std::vector<int64_t>& idx) {
          Tensor<S> y = one_hot<S>(batch_labels(train, idx), train.classes);
          return softmax_cross_entropy(linear(pooled.batch(idx), w, b), y);
        },
        [&]() {
          MetricsRecord r;
          StudentSystem<S> tuned = sys;
          tuned.classifier_w = w;
          tuned.classifier_b = b;
          r = evaluate<S>(teacher, &tuned, eval_ds, settings.batch_size);
          return r;
        },
        writer);
    result.classifier_w = w.detach();
    result.classifier_w.set_name("classifier.w");
    result.classifier_b = b.detach();
    result.classifier_b.set_name("classifier.b");
  }

  if (writer) result.metrics = writer->records;
  return result;
}

}  // namespace rkd
