// Copyright (c) 2026 The rkd authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "helpers.hpp"
#include "rkd/distill.hpp"
#include "rkd/flops.hpp"

using rkd::Tensor;

namespace {

// Two-block toy family: fast enough for many short runs.
rkd::NetworkSpec toy_spec() {
  rkd::NetworkSpec s;
  s.input_shape = {1, 16, 16};
  s.classes = 4;
  s.blocks = {
      {rkd::LayerSpec::conv(8, 3, 1, 1, false), rkd::LayerSpec::batchnorm(), rkd::LayerSpec::relu(),
       rkd::LayerSpec::residual(8, 1, rkd::Shortcut::Identity)},
      {rkd::LayerSpec::residual(16, 2, rkd::Shortcut::Projection)},
  };
  return s;
}

struct ToySetup {
  rkd::Dataset train, eval;
  rkd::NetworkSpec teacher_spec, student_spec, assistant_spec;
  rkd::Network<float> teacher;
  rkd::TrainSettings settings;
};

ToySetup make_setup(uint64_t seed, int teacher_epochs = 2, int distill_epochs = 3) {
  ToySetup s;
  s.train = rkd::make_synthetic(seed, 4, 12, 1, 16, 16);
  // eval split shares the train normalization statistics
  s.eval = rkd::make_synthetic_eval(seed, 4, 6, 1, 16, 16, s.train.stats);
  s.teacher_spec = toy_spec();
  auto plan = rkd::separate(s.teacher_spec, 0.8);
  s.student_spec = plan.spec_student;
  s.assistant_spec = plan.spec_assistant;
  s.settings.epochs = teacher_epochs;
  s.settings.batch_size = 16;
  s.settings.sched = {0.05, 0, 0.1};
  s.settings.seed = seed;
  s.teacher = rkd::train_teacher<float>(s.teacher_spec, s.train, s.eval, s.settings);
  // feature-map losses sum over C*H*W elements, so distillation phases run at
  // a much smaller rate than cross-entropy training
  s.settings.epochs = distill_epochs;
  s.settings.sched = {1e-4, 0, 0.1};
  return s;
}

}  // namespace

TEST(TrainTeacher, ZeroLearningRateFreezesParameters) {
  auto train = rkd::make_synthetic(3, 4, 8, 1, 16, 16);
  auto eval = rkd::make_synthetic_eval(3, 4, 4, 1, 16, 16, train.stats);
  rkd::TrainSettings st;
  st.epochs = 1;
  st.batch_size = 8;
  st.sched = {0.0, 0, 0.1};
  st.seed = 5;
  // bn running stats do move in train mode, so compare trainable params only
  auto net = rkd::build_network<float>(toy_spec(), rkd::derive_seed(5, "teacher-init"));
  std::vector<std::vector<float>> before;
  for (auto& p : rkd::parameters(net)) before.push_back(p.values());
  auto trained = rkd::train_teacher<float>(toy_spec(), train, eval, st);
  auto after = rkd::parameters(trained);
  ASSERT_EQ(before.size(), after.size());
  for (size_t i = 0; i < after.size(); ++i) EXPECT_EQ(before[i], after[i].values());
}

TEST(TrainTeacher, LossDecreasesOnLearnableData) {
  auto train = rkd::make_synthetic(7, 4, 20, 1, 16, 16);
  auto eval = rkd::make_synthetic_eval(7, 4, 8, 1, 16, 16, train.stats);
  rkd::TrainSettings st;
  st.epochs = 8;
  st.batch_size = 16;
  st.sched = {0.05, 0, 0.1};
  st.seed = 11;
  rkd::MetricsWriter w;
  rkd::train_teacher<float>(toy_spec(), train, eval, st, true, &w);
  ASSERT_EQ(w.records.size(), 8u);
  EXPECT_LT(w.records.back().train_loss, w.records.front().train_loss);
}

TEST(TrainTeacher, ClassCountMismatchRejected) {
  auto train = rkd::make_synthetic(3, 6, 4, 1, 16, 16);  // 6 classes vs spec's 4
  rkd::TrainSettings st;
  EXPECT_THROW(rkd::train_teacher<float>(toy_spec(), train, train, st), rkd::ConfigError);
}

TEST(Distill, TeacherBitIdenticalAcrossAllVariants) {
  auto s = make_setup(21);
  const uint64_t teacher_before = rkd::state_checksum(s.teacher);
  for (auto variant : {rkd::Variant::Plain, rkd::Variant::Progressive, rkd::Variant::Integrated}) {
    rkd::run_distillation<float>(s.teacher, s.student_spec, &s.assistant_spec, s.train, s.eval,
                                 variant, s.settings);
    EXPECT_EQ(rkd::state_checksum(s.teacher), teacher_before)
        << "teacher drifted in " << rkd::variant_name(variant);
  }
}

TEST(Distill, StudentFrozenDuringAssistantPhase) {
  auto s = make_setup(23);
  // baseline: student phase only
  auto baseline = rkd::run_distillation<float>(s.teacher, s.student_spec, nullptr, s.train,
                                               s.eval, rkd::Variant::Plain, s.settings);
  // full plain run: phase 1 is identical, phase 2 must not touch the student
  auto full = rkd::run_distillation<float>(s.teacher, s.student_spec, &s.assistant_spec, s.train,
                                           s.eval, rkd::Variant::Plain, s.settings);
  EXPECT_EQ(rkd::state_checksum(baseline.student), rkd::state_checksum(full.student));
  // adapters belong to the student side and must also be frozen
  ASSERT_EQ(baseline.student_adapters.levels(), full.student_adapters.levels());
  for (int64_t l = 0; l < full.student_adapters.levels(); ++l)
    if (full.student_adapters.has(l))
      EXPECT_EQ(baseline.student_adapters.weights[l].values(),
                full.student_adapters.weights[l].values());
}

TEST(Distill, GradientIsolationDuringAssistantTraining) {
  auto s = make_setup(25, 1, 1);
  auto student = rkd::build_network<float>(s.student_spec, 3);
  auto assistant = rkd::build_network<float>(s.assistant_spec, 4);
  auto widths_t = rkd::tap_channels(s.teacher_spec);
  auto sa = rkd::make_adapters<float>(rkd::tap_channels(s.student_spec), widths_t, 5);
  auto aa = rkd::make_adapters<float>(rkd::tap_channels(s.assistant_spec), widths_t, 6);

  rkd::Rng rng(9);
  auto x = rkdtest::random_tensor<float>({4, 1, 16, 16}, rng);
  std::vector<Tensor<float>> t_taps, s_taps;
  {
    rkd::NoGradGuard ng;  // frozen models run without graph recording
    auto tf = rkd::forward_with_taps(s.teacher, x, false);
    auto sf = rkd::forward_with_taps(student, x, false);
    for (int64_t i = 0; i < 2; ++i) {
      t_taps.push_back(tf.taps[i]);
      s_taps.push_back(rkd::adapt_feature(sf.taps[i], sa, i));
    }
  }
  auto af = rkd::forward_with_taps(assistant, x, true);
  std::vector<Tensor<float>> a_taps;
  for (int64_t i = 0; i < 2; ++i) a_taps.push_back(rkd::adapt_feature(af.taps[i], aa, i));
  auto loss = rkd::assistant_residual_loss(t_taps, s_taps, a_taps, {0, 1});
  rkd::backward(loss);

  for (auto& p : rkd::parameters(s.teacher)) EXPECT_FALSE(p.has_grad());
  for (auto& p : rkd::parameters(student)) EXPECT_FALSE(p.has_grad());
  // every feature parameter of the assistant learns; its classifier is
  // excluded from distillation and stays untouched
  size_t with_grad = 0;
  for (auto& p : rkd::feature_parameters(assistant)) with_grad += p.has_grad() ? 1 : 0;
  EXPECT_EQ(with_grad, rkd::feature_parameters(assistant).size());
  EXPECT_FALSE(assistant.fc_w.has_grad());
  EXPECT_FALSE(assistant.fc_b.has_grad());
}

TEST(Distill, AssistantDisabledEqualsBaselineMetrics) {
  auto s = make_setup(27);
  rkd::MetricsWriter base_w, integ_w;
  rkd::run_distillation<float>(s.teacher, s.student_spec, nullptr, s.train, s.eval,
                               rkd::Variant::Plain, s.settings, true, false, &base_w);
  rkd::run_distillation<float>(s.teacher, s.student_spec, nullptr, s.train, s.eval,
                               rkd::Variant::Integrated, s.settings, true, false, &integ_w);
  ASSERT_EQ(base_w.records.size(), integ_w.records.size());
  for (size_t i = 0; i < base_w.records.size(); ++i)
    EXPECT_EQ(nlohmann::json(base_w.records[i]).dump(), nlohmann::json(integ_w.records[i]).dump());
}

TEST(Distill, AllVariantsCompleteAndEmitPhases) {
  auto s = make_setup(29);
  {
    rkd::MetricsWriter w;
    rkd::run_distillation<float>(s.teacher, s.student_spec, &s.assistant_spec, s.train, s.eval,
                                 rkd::Variant::Plain, s.settings, true, false, &w);
    ASSERT_FALSE(w.records.empty());
    EXPECT_EQ(w.records.front().phase, "student");
    EXPECT_EQ(w.records.back().phase, "assistant");
  }
  {
    rkd::MetricsWriter w;
    rkd::run_distillation<float>(s.teacher, s.student_spec, &s.assistant_spec, s.train, s.eval,
                                 rkd::Variant::Integrated, s.settings, true, false, &w);
    EXPECT_EQ(w.records.back().phase, "assistant");
  }
  {
    rkd::MetricsWriter w;
    rkd::run_distillation<float>(s.teacher, s.student_spec, &s.assistant_spec, s.train, s.eval,
                                 rkd::Variant::Progressive, s.settings, true, false, &w);
    EXPECT_EQ(w.records.front().phase, "student_block_1");
    EXPECT_EQ(w.records.back().phase, "assistant_block_2");
  }
}

TEST(Distill, MismatchedBlockCountRejected) {
  auto s = make_setup(31, 1, 1);
  rkd::NetworkSpec deeper = s.student_spec;
  deeper.blocks.push_back({rkd::LayerSpec::residual(16, 1, rkd::Shortcut::Identity)});
  EXPECT_THROW(rkd::run_distillation<float>(s.teacher, deeper, nullptr, s.train, s.eval,
                                            rkd::Variant::Plain, s.settings),
               rkd::ConfigError);
}

TEST(Distill, DeterministicMetricsAcrossRuns) {
  auto s = make_setup(33);
  rkd::MetricsWriter a, b;
  rkd::run_distillation<float>(s.teacher, s.student_spec, &s.assistant_spec, s.train, s.eval,
                               rkd::Variant::Integrated, s.settings, true, false, &a);
  rkd::run_distillation<float>(s.teacher, s.student_spec, &s.assistant_spec, s.train, s.eval,
                               rkd::Variant::Integrated, s.settings, true, false, &b);
  ASSERT_EQ(a.records.size(), b.records.size());
  for (size_t i = 0; i < a.records.size(); ++i)
    EXPECT_EQ(nlohmann::json(a.records[i]).dump(), nlohmann::json(b.records[i]).dump());
}

TEST(FusedInference, ZeroAssistantIsAdditiveIdentity) {
  auto s = make_setup(35, 1, 1);
  // batchnorm off so that zeroed parameters force a zero assistant output
  auto result = rkd::run_distillation<float>(s.teacher, s.student_spec, &s.assistant_spec,
                                             s.train, s.eval, rkd::Variant::Plain, s.settings,
                                             /*use_batchnorm=*/false);
  for (auto& p : rkd::parameters(result.assistant))
    std::fill(p.mutable_values().begin(), p.mutable_values().end(), 0.f);
  for (auto& w : result.assistant_adapters.weights)
    if (w.defined()) std::fill(w.mutable_values().begin(), w.mutable_values().end(), 0.f);

  auto sys_fused = result.system();
  rkd::StudentSystem<float> sys_solo = sys_fused;
  sys_solo.assistant = nullptr;
  sys_solo.assistant_adapters = nullptr;

  auto x = rkd::make_batch<float>(s.eval, {0, 1, 2, 3});
  auto fused = rkd::fused_inference(sys_fused, x);
  auto solo = rkd::fused_inference(sys_solo, x);
  ASSERT_EQ(fused.probabilities.shape(), solo.probabilities.shape());
  for (int64_t i = 0; i < fused.probabilities.numel(); ++i)
    EXPECT_FLOAT_EQ(fused.probabilities.values()[i], solo.probabilities.values()[i]);
}

TEST(FusedInference, PredictionRowsAreDistributions) {
  auto s = make_setup(37, 1, 2);
  auto result = rkd::run_distillation<float>(s.teacher, s.student_spec, &s.assistant_spec,
                                             s.train, s.eval, rkd::Variant::Integrated, s.settings);
  auto sys = result.system();
  auto x = rkd::make_batch<float>(s.eval, {0, 1, 2});
  auto out = rkd::fused_inference(sys, x);
  for (int64_t i = 0; i < 3; ++i) {
    double sum = 0;
    for (int64_t c = 0; c < 4; ++c) {
      EXPECT_GE(out.probabilities.values()[i * 4 + c], 0.f);
      sum += out.probabilities.values()[i * 4 + c];
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(Evaluate, TopKContractsAndSelfDistanceZero) {
  auto s = make_setup(39, 2, 1);
  // 4-class data: top-"5" is capped at the class count -> always 100%
  auto r = rkd::evaluate<float>(s.teacher, nullptr, s.eval, 8);
  EXPECT_DOUBLE_EQ(r.top5, 100.0);
  EXPECT_DOUBLE_EQ(r.feature_l2, 0.0);  // teacher against itself
  EXPECT_GE(r.top1, 0.0);
  EXPECT_LE(r.top1, r.top5);
  EXPECT_THROW(rkd::evaluate<float>(s.teacher, nullptr, rkd::Dataset{}, 8), rkd::ConfigError);
}

TEST(Distill, ClassifierFinetuneProducesFreshClassifier) {
  auto s = make_setup(41, 1, 2);
  auto plain = rkd::run_distillation<float>(s.teacher, s.student_spec, &s.assistant_spec, s.train,
                                            s.eval, rkd::Variant::Plain, s.settings, true, false);
  auto tuned = rkd::run_distillation<float>(s.teacher, s.student_spec, &s.assistant_spec, s.train,
                                            s.eval, rkd::Variant::Plain, s.settings, true, true);
  // without finetune the classifier is the teacher's, with finetune it moved
  EXPECT_EQ(plain.classifier_w.values(), s.teacher.fc_w.values());
  EXPECT_NE(tuned.classifier_w.values(), s.teacher.fc_w.values());
}
