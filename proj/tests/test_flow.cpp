#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "zorder/flow.hpp"

using namespace zorder;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.blocks = 2;
  cfg.layout_blocks = 2;
  return cfg;
}

TrainConfig quick_train() {
  TrainConfig tc;
  tc.batch_size = 4;
  tc.learning_rate = 1e-3;
  tc.seed = 3;
  return tc;
}

std::vector<StepMetrics> run(const std::vector<SyntheticScene>& scenes, const TrainConfig& tc, int steps,
                             ZOrderModel<float>* out = nullptr) {
  ZOrderModel<float> local(tiny_config(), tc.flags());
  ZOrderModel<float>& model = out ? *out : local;
  auto cfg = tc;
  cfg.steps = steps;
  return train(model, make_examples<float>(scenes, model.config(), tc.flags()), cfg);
}

}  // namespace

TEST(Flow, InterpolationEndpoints) {
  std::mt19937_64 rng(1);
  const Matrix<double> x0 = random_normal<double>(4, 3, 1.0, rng);
  const Matrix<double> x1 = random_normal<double>(4, 3, 1.0, rng);
  EXPECT_EQ(interpolate(x0, x1, 0.0), x0);
  EXPECT_EQ(interpolate(x0, x1, 1.0), x1);
  EXPECT_TRUE(interpolate(x0, x1, 0.25).isApprox(0.75 * x0 + 0.25 * x1));
  EXPECT_THROW(interpolate(x0, x1, 1.5), Error);
  EXPECT_THROW(interpolate(x0, x1, -0.01), Error);
}

TEST(Flow, LossAndGradient) {
  std::mt19937_64 rng(2);
  const Matrix<double> x0 = random_normal<double>(5, 3, 1.0, rng);
  const Matrix<double> x1 = random_normal<double>(5, 3, 1.0, rng);
  Matrix<double> d;
  EXPECT_EQ(flow_loss<double>(x1 - x0, x0, x1, &d), 0.0);
  EXPECT_TRUE(d.isZero(0));
  const Matrix<double> v = Matrix<double>::Zero(5, 3);
  EXPECT_NEAR(flow_loss(v, x0, x1, &d), (x1 - x0).squaredNorm() / 15, 1e-14);
  EXPECT_TRUE(d.isApprox(-(x1 - x0) * (2.0 / 15)));
  EXPECT_DOUBLE_EQ(total_loss(1.0, 2.0, 0.5), 2.0);
  EXPECT_THROW(total_loss(std::nan(""), 0, 0.5), Error);
  EXPECT_THROW(total_loss(1.0, std::numeric_limits<double>::infinity(), 0.5), Error);
}

TEST(Flow, TrainingIsDeterministic) {
  const auto scenes = generate_dataset(4, 1, {});
  ZOrderModel<float> a(tiny_config(), {}), b(tiny_config(), {});
  const auto ta = run(scenes, quick_train(), 3, &a);
  const auto tb = run(scenes, quick_train(), 3, &b);
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t k = 0; k < ta.size(); ++k) {
    EXPECT_EQ(ta[k].l_flow, tb[k].l_flow);
    EXPECT_EQ(ta[k].l_align, tb[k].l_align);
  }
  for (std::size_t p = 0; p < a.params().size(); ++p) EXPECT_EQ(a.params()[p].value, b.params()[p].value);
}

TEST(Flow, TrainingIsThreadCountInvariant) {
  const auto scenes = generate_dataset(4, 1, {});
  setenv("ZORDER_THREADS", "1", 1);
  const auto serial = run(scenes, quick_train(), 2);
  setenv("ZORDER_THREADS", "3", 1);
  const auto threaded = run(scenes, quick_train(), 2);
  unsetenv("ZORDER_THREADS");
  for (std::size_t k = 0; k < serial.size(); ++k) EXPECT_EQ(serial[k].total, threaded[k].total);
}

TEST(Flow, AlignmentLossOffWithoutQueriedLoss) {
  const auto scenes = generate_dataset(4, 2, {});
  auto tc = quick_train();
  tc.queried_loss = false;
  for (const auto& m : run(scenes, tc, 3)) {
    EXPECT_EQ(m.l_align, 0.0);
    EXPECT_EQ(m.total, m.l_flow);
  }
  tc.queried_loss = true;
  for (const auto& m : run(scenes, tc, 2)) EXPECT_GT(m.l_align, 0.0);
}

TEST(Flow, OverfitsFourScenes) {
  const auto scenes = generate_dataset(4, 4, {});
  const auto trace = run(scenes, quick_train(), 200);
  auto mean = [&](std::size_t from, std::size_t to) {
    double s = 0;
    for (std::size_t k = from; k < to; ++k) s += trace[k].total;
    return s / double(to - from);
  };
  EXPECT_LT(mean(180, 200), mean(0, 20));
}

TEST(Flow, NonFiniteParametersAbortTraining) {
  const auto scenes = generate_dataset(2, 5, {});
  ZOrderModel<float> model(tiny_config(), {});
  model.params().find("unpatch.bias")->value(0, 0) = std::numeric_limits<float>::quiet_NaN();
  Trainer<float> trainer(model, quick_train());
  const auto data = make_examples<float>(scenes, model.config(), model.flags());
  try {
    trainer.step(data);
    FAIL() << "expected a training error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
  }
}

TEST(Flow, ConfigValidation) {
  TrainConfig tc;
  tc.learning_rate = 0;
  EXPECT_THROW(tc.validate(), Error);
  tc = {};
  tc.guidance_fraction = 1.5;
  EXPECT_THROW(tc.validate(), Error);
  SamplerConfig sc;
  sc.num_steps = 0;
  EXPECT_THROW(sc.validate(), Error);
}

TEST(Flow, LossCsvFormat) {
  std::ostringstream os;
  write_loss_header(os);
  write_loss_row(os, {7, 0.25, 0.5, 0.5});
  EXPECT_EQ(os.str(), "step,l_flow,l_align,total\n7,0.25,0.5,0.5\n");
}

TEST(Sampler, GuidedStepCounts) {
  SamplerConfig sc;
  EXPECT_EQ(sc.guided_steps(), 9);
  sc.guidance_fraction = 0;
  EXPECT_EQ(sc.guided_steps(), 0);
  sc.guidance_fraction = 1;
  EXPECT_EQ(sc.guided_steps(), 28);
  sc.num_steps = 10;
  sc.guidance_fraction = 0.3;
  EXPECT_EQ(sc.guided_steps(), 3);
}

TEST(Sampler, LayoutStageRunsOnFirstNineOf28Steps) {
  const auto scene = generate_scene(6, {});
  ZOrderModel<float> model(tiny_config(), {});
  std::vector<SamplerStep> steps;
  sample_image(model, scene.layout, {}, [&](const SamplerStep& s) { steps.push_back(s); });
  ASSERT_EQ(steps.size(), 28u);
  for (const auto& s : steps) {
    EXPECT_EQ(s.layout_active, s.step <= 9) << s.step;
    EXPECT_EQ(s.layout_ran, s.step <= 9) << s.step;
    EXPECT_DOUBLE_EQ(s.t, (s.step - 1) / 28.0);
  }
}

TEST(Sampler, ZeroFractionNeverRunsLayoutStage) {
  const auto scene = generate_scene(6, {});
  ZOrderModel<float> model(tiny_config(), {});
  SamplerConfig sc;
  sc.guidance_fraction = 0;
  int ran = 0;
  sample_image(model, scene.layout, sc, [&](const SamplerStep& s) { ran += s.layout_active || s.layout_ran; });
  EXPECT_EQ(ran, 0);
}

TEST(Sampler, SameSeedSameImage) {
  const auto scene = generate_scene(8, {});
  ZOrderModel<float> model(tiny_config(), {});
  SamplerConfig sc;
  sc.seed = 42;
  const auto a = sample_image(model, scene.layout, sc);
  const auto b = sample_image(model, scene.layout, sc);
  EXPECT_EQ(a.rgb, b.rgb);
  sc.seed = 43;
  EXPECT_NE(a.rgb, sample_image(model, scene.layout, sc).rgb);
}

TEST(Sampler, RejectsMismatchedLayout) {
  auto scene = generate_scene(8, {});
  ZOrderModel<float> model(tiny_config(), {});
  scene.layout.instances[0].occluders.push_back(scene.layout.instances[0].id);
  EXPECT_THROW(sample_image(model, scene.layout, {}), Error);
}
