#pragma once

// End-to-end helpers shared by the CLI and the acceptance runner: train a
// model on a scene set, sample held-out layouts and score them.

#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "zorder/checkpoint.hpp"
#include "zorder/flow.hpp"
#include "zorder/metrics.hpp"
#include "zorder/parallel.hpp"

namespace zorder {

/// Named ablation variants.
inline TrainConfig apply_ablation(TrainConfig cfg, const std::string& name) {
  if (name == "full" || name.empty()) return cfg;
  if (name == "no_occlusion_cond") cfg.occlusion_cond = false;
  else if (name == "no_inst_decouple") cfg.instance_decouple = false;
  else if (name == "no_learned_sigma") cfg.learned_sigma = false;
  else if (name == "no_queried_loss") cfg.queried_loss = false;
  else throw Error("unknown ablation " + name +
                   " (expected full, no_occlusion_cond, no_inst_decouple, no_learned_sigma, no_queried_loss)");
  return cfg;
}

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SamplerConfig sampler;
};

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"model", c.model}, {"train", c.train}, {"sampler", c.sampler}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {}) {
  try {
    if (j.contains("model")) base.model = j.at("model").get<ModelConfig>();
    if (j.contains("train")) base.train = j.at("train").get<TrainConfig>();
    if (j.contains("sampler")) base.sampler = j.at("sampler").get<SamplerConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  return base;
}

/// Trains a fresh model; `log` receives the CSV loss trace when given.
template <class S>
std::unique_ptr<ZOrderModel<S>> train_model(const RunConfig& cfg, const std::vector<SyntheticScene>& scenes,
                                            std::ostream* log = nullptr,
                                            const std::function<void(const StepMetrics&)>& on_step = {}) {
  auto model = std::make_unique<ZOrderModel<S>>(cfg.model, cfg.train.flags());
  const auto data = make_examples<S>(scenes, cfg.model, cfg.train.flags());
  if (log) write_loss_header(*log);
  train<S>(*model, data, cfg.train, [&](const StepMetrics& m) {
    if (log) write_loss_row(*log, m);
    if (on_step) on_step(m);
  });
  return model;
}

/// Samples every scene's layout (seeded per scene id) and scores the result.
template <class S>
std::vector<SceneMetrics> evaluate_model(const ZOrderModel<S>& model, const std::vector<SyntheticScene>& scenes,
                                         const SamplerConfig& sampler, std::vector<Image>* images = nullptr) {
  std::vector<SceneMetrics> out(scenes.size());
  std::vector<Image> imgs(scenes.size());
  parallel_for(int(scenes.size()), [&](int k) {
    const auto& s = scenes[std::size_t(k)];
    SamplerConfig sc = sampler;
    sc.seed = scene_seed(sampler.seed, std::uint64_t(s.id));
    try {
      imgs[std::size_t(k)] = sample_image(model, s.layout, sc);
      out[std::size_t(k)] = evaluate_scene(imgs[std::size_t(k)], s.layout, s.id);
    } catch (const std::exception& e) {
      throw Error("scene " + std::to_string(s.id) + ": " + e.what());
    }
  });
  if (images) *images = std::move(imgs);
  return out;
}

template <class S>
void save_model(const ZOrderModel<S>& model, const RunConfig& cfg, const std::filesystem::path& path) {
  save_checkpoint(model.params(), path, to_json(cfg));
}

template <class S>
std::unique_ptr<ZOrderModel<S>> load_model(const std::filesystem::path& path, RunConfig* cfg_out = nullptr) {
  const RunConfig cfg = run_config_from_json(read_checkpoint_sidecar(path));
  auto model = std::make_unique<ZOrderModel<S>>(cfg.model, cfg.train.flags());
  load_checkpoint(model->params(), path);
  if (cfg_out) *cfg_out = cfg;
  return model;
}

}  // namespace zorder
