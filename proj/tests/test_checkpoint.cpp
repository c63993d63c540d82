#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include <unistd.h>

#include "zorder/pipeline.hpp"

using namespace zorder;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.blocks = 2;
  cfg.layout_blocks = 2;
  return cfg;
}

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("zorder_ckpt_" + std::to_string(::getpid()) + "_" + name);
}

void scramble(ParamStore<float>& store, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& p : store) p.value = random_normal<float>(p.value.rows(), p.value.cols(), 1.0, rng);
}

}  // namespace

TEST(Checkpoint, RoundTripRestoresEveryParameter) {
  ZOrderModel<float> a(tiny_config(), {});
  scramble(a.params(), 1);
  const auto path = temp_path("roundtrip.ckpt");
  save_checkpoint(a.params(), path, {{"note", "x"}});
  ZOrderModel<float> b(tiny_config(), {});
  load_checkpoint(b.params(), path);
  for (std::size_t k = 0; k < a.params().size(); ++k) EXPECT_EQ(a.params()[k].value, b.params()[k].value) << a.params()[k].name;
  EXPECT_EQ(read_checkpoint_sidecar(path)["note"], "x");
  fs::remove(path);
  fs::remove(sidecar_path(path));
}

TEST(Checkpoint, DoubleModelStoresSinglePrecision) {
  ZOrderModel<double> a(tiny_config(), {});
  const auto path = temp_path("double.ckpt");
  save_checkpoint(a.params(), path);
  ZOrderModel<double> b(tiny_config(), {});
  for (auto& p : b.params()) p.value.setZero();
  load_checkpoint(b.params(), path);
  for (std::size_t k = 0; k < a.params().size(); ++k)
    EXPECT_EQ(a.params()[k].value.cast<float>().cast<double>(), b.params()[k].value);
  fs::remove(path);
  fs::remove(sidecar_path(path));
}

TEST(Checkpoint, ShapeMismatchIsRejected) {
  ZOrderModel<float> a(tiny_config(), {});
  const auto path = temp_path("shape.ckpt");
  save_checkpoint(a.params(), path);
  ModelConfig wide = tiny_config();
  wide.dim = 32;
  ZOrderModel<float> b(wide, {});
  EXPECT_THROW(load_checkpoint(b.params(), path), ParseError);
  ModelConfig deep = tiny_config();
  deep.blocks = 3;
  ZOrderModel<float> c(deep, {});
  try {
    load_checkpoint(c.params(), path);
    FAIL() << "expected a missing-parameter error";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("block2"), std::string::npos) << e.what();
  }
  fs::remove(path);
  fs::remove(sidecar_path(path));
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  ZOrderModel<float> a(tiny_config(), {});
  const auto path = temp_path("corrupt.ckpt");
  save_checkpoint(a.params(), path);
  const auto size = fs::file_size(path);
  fs::resize_file(path, size - 7);
  EXPECT_THROW(load_checkpoint(a.params(), path), ParseError);
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE";
  }
  EXPECT_THROW(load_checkpoint(a.params(), path), ParseError);
  EXPECT_THROW(load_checkpoint(a.params(), temp_path("absent.ckpt")), ParseError);
  fs::remove(path);
  fs::remove(sidecar_path(path));
}

TEST(Checkpoint, ModelReloadReproducesSamples) {
  RunConfig cfg;
  cfg.model = tiny_config();
  cfg.train.steps = 2;
  cfg.train.batch_size = 2;
  cfg.train.learning_rate = 1e-3;
  cfg.train.occlusion_cond = false;
  const auto scenes = generate_dataset(2, 3, {});
  const auto model = train_model<float>(cfg, scenes);
  const auto path = temp_path("model.ckpt");
  save_model(*model, cfg, path);
  RunConfig loaded_cfg;
  const auto loaded = load_model<float>(path, &loaded_cfg);
  EXPECT_EQ(to_json(loaded_cfg), to_json(cfg));
  EXPECT_FALSE(loaded->flags().occlusion_cond);
  EXPECT_EQ(sample_image(*model, scenes[0].layout, {}).rgb, sample_image(*loaded, scenes[0].layout, {}).rgb);
  fs::remove(path);
  fs::remove(sidecar_path(path));
}

TEST(Pipeline, AblationNames) {
  const TrainConfig base;
  EXPECT_FALSE(apply_ablation(base, "no_occlusion_cond").occlusion_cond);
  EXPECT_FALSE(apply_ablation(base, "no_inst_decouple").instance_decouple);
  EXPECT_FALSE(apply_ablation(base, "no_learned_sigma").learned_sigma);
  EXPECT_FALSE(apply_ablation(base, "no_queried_loss").queried_loss);
  EXPECT_TRUE(apply_ablation(base, "full").occlusion_cond);
  EXPECT_THROW(apply_ablation(base, "bogus"), Error);
}
