#pragma once

// Rectified-flow objective, Adam training loop and the Euler sampler with a
// layout guidance window.

#include <cmath>
#include <functional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "zorder/image.hpp"
#include "zorder/model.hpp"
#include "zorder/parallel.hpp"
#include "zorder/synth.hpp"

namespace zorder {

template <class S>
Matrix<S> interpolate(const Matrix<S>& x0, const Matrix<S>& x1, double t) {
  require(x0.rows() == x1.rows() && x0.cols() == x1.cols(), "interpolate: shape mismatch");
  if (!(t >= 0.0 && t <= 1.0)) throw Error("interpolate: t out of range [0,1]");
  return S(t) * x1 + S(1.0 - t) * x0;
}

/// Mean squared error against the target velocity x1 - x0.
template <class S>
S flow_loss(const Matrix<S>& v_pred, const Matrix<S>& x0, const Matrix<S>& x1, Matrix<S>* d_v = nullptr) {
  require(v_pred.rows() == x0.rows() && v_pred.cols() == x0.cols() && x0.rows() == x1.rows() && x0.cols() == x1.cols(),
          "flow_loss: shape mismatch");
  const Matrix<S> diff = v_pred - (x1 - x0);
  const S n = S(diff.size());
  if (d_v) *d_v = diff * (S(2) / n);
  return diff.squaredNorm() / n;
}

inline double total_loss(double l_flow, double l_align, double lambda) {
  if (!std::isfinite(l_flow)) throw Error("total_loss: non-finite l_flow");
  if (!std::isfinite(l_align)) throw Error("total_loss: non-finite l_align");
  return l_flow + lambda * l_align;
}

struct TrainConfig {
  double lambda_align = 0.5;
  int steps = 5000;
  int batch_size = 16;
  double learning_rate = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  bool learned_sigma = true;
  double fixed_sigma_value = 5.0;
  bool queried_loss = true;
  bool occlusion_cond = true;
  bool instance_decouple = true;
  double guidance_fraction = 0.3;  // layout stage trained on t < guidance_fraction, matching the sampler

  void validate() const {
    require(lambda_align >= 0, "TrainConfig: lambda_align must be >= 0");
    require(fixed_sigma_value >= 0, "TrainConfig: fixed_sigma_value must be >= 0");
    require(steps >= 0 && batch_size >= 1, "TrainConfig: steps >= 0 and batch_size >= 1 required");
    require(learning_rate > 0, "TrainConfig: learning_rate must be positive");
    require(guidance_fraction >= 0 && guidance_fraction <= 1, "TrainConfig: guidance_fraction must lie in [0,1]");
  }

  LayoutFlags flags() const {
    LayoutFlags f;
    f.learned_sigma = learned_sigma;
    f.fixed_sigma_value = fixed_sigma_value;
    f.occlusion_cond = occlusion_cond;
    f.instance_decouple = instance_decouple;
    return f;
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainConfig, lambda_align, steps, batch_size, learning_rate,
                                                adam_beta1, adam_beta2, adam_eps, seed, learned_sigma,
                                                fixed_sigma_value, queried_loss, occlusion_cond, instance_decouple,
                                                guidance_fraction)

struct SamplerConfig {
  int num_steps = 28;
  double guidance_fraction = 0.3;
  std::uint64_t seed = 0;

  void validate() const {
    require(num_steps >= 1, "SamplerConfig: num_steps must be >= 1");
    require(guidance_fraction >= 0 && guidance_fraction <= 1, "SamplerConfig: guidance_fraction must lie in [0,1]");
  }
  /// Number of leading Euler steps that run the layout stage.
  int guided_steps() const { return int(std::ceil(guidance_fraction * num_steps - 1e-9)); }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SamplerConfig, num_steps, guidance_fraction, seed)

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, image_size, patch, channels, dim, heads, blocks, ff_mult,
                                                caption_vocab, prompt_vocab, caption_tokens, prompt_tokens,
                                                layout_blocks, align_block, density_init, init_seed)

template <class S>
class Adam {
 public:
  Adam(const ParamStore<S>& store, double lr, double beta1, double beta2, double eps)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), m_(store.zero_grads()), v_(store.zero_grads()) {}

  void step(ParamStore<S>& store, const Grads<S>& g) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, double(t_));
    const double c2 = 1.0 - std::pow(b2_, double(t_));
    for (auto& p : store) {
      auto& m = m_[p.index];
      auto& v = v_[p.index];
      const auto& gi = g[p.index];
      m = S(b1_) * m + S(1 - b1_) * gi;
      v = S(b2_) * v + S(1 - b2_) * gi.cwiseProduct(gi);
      p.value.array() -= S(lr_) * (m.array() / S(c1)) / ((v.array() / S(c2)).sqrt() + S(eps_));
    }
  }

  long iterations() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  Grads<S> m_, v_;
};

/// One training pair: conditioning plus the clean latent.
template <class S>
struct TrainExample {
  SceneCondition cond;
  Matrix<S> x1;
};

template <class S>
std::vector<TrainExample<S>> make_examples(const std::vector<SyntheticScene>& scenes, const ModelConfig& cfg,
                                           const LayoutFlags& flags) {
  std::vector<TrainExample<S>> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes)
    out.push_back({make_condition(s.layout, cfg.grid(), flags), image_to_latent(s.image).template cast<S>()});
  return out;
}

struct StepMetrics {
  long step = 0;
  double l_flow = 0;
  double l_align = 0;
  double total = 0;
};

/// Loss and parameter gradients of one (scene, t, noise) draw.
template <class S>
struct SampleResult {
  double l_flow = 0;
  double l_align = 0;
  bool has_align = false;
  Grads<S> grads;
};

template <class S>
SampleResult<S> sample_loss_and_grad(const ZOrderModel<S>& model, const TrainExample<S>& ex, const Matrix<S>& x0,
                                     double t, const TrainConfig& cfg, double grad_scale) {
  SampleResult<S> r;
  const Matrix<S> z_t = interpolate(x0, ex.x1, t);
  ForwardOptions opt;
  opt.layout_active = t < cfg.guidance_fraction;
  opt.alignment = cfg.queried_loss;
  typename ZOrderModel<S>::Cache cache;
  const auto out = model.forward(z_t, t, ex.cond, opt, &cache);
  Matrix<S> d_v;
  r.l_flow = double(flow_loss(out.velocity, x0, ex.x1, &d_v));
  d_v *= S(grad_scale);
  std::vector<Matrix<S>> d_probs;
  if (!out.masks.empty()) {
    std::vector<TokenMask> targets;
    for (const auto& inst : ex.cond.instances) targets.push_back(select_supervision_mask(t, inst.modal, inst.amodal));
    r.l_align = double(alignment_loss(out.masks, targets, &d_probs));
    r.has_align = true;
    for (auto& d : d_probs) d *= S(cfg.lambda_align * grad_scale);
  }
  r.grads = model.params().zero_grads();
  model.backward(cache, ex.cond, d_v, r.has_align ? &d_probs : nullptr, r.grads);
  return r;
}

template <class S>
class Trainer {
 public:
  Trainer(ZOrderModel<S>& model, const TrainConfig& cfg)
      : model_(model),
        cfg_(cfg),
        adam_(model.params(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
        rng_(cfg.seed) {
    cfg_.validate();
    model_.set_flags(cfg_.flags());
  }

  /// One optimizer update on a batch drawn from `data`. Draws (scene, t, noise)
  /// serially from the trainer stream, then evaluates samples in parallel and
  /// sums gradients in batch order.
  StepMetrics step(const std::vector<TrainExample<S>>& data) {
    require(!data.empty(), "train_step: empty dataset");
    const int B = cfg_.batch_size;
    const auto& mc = model_.config();
    std::vector<std::size_t> idx(static_cast<std::size_t>(B));
    std::vector<double> ts(static_cast<std::size_t>(B));
    std::vector<Matrix<S>> x0(static_cast<std::size_t>(B));
    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int b = 0; b < B; ++b) {
      idx[std::size_t(b)] = pick(rng_);
      ts[std::size_t(b)] = unif(rng_);
      Matrix<S> noise(mc.pixels(), mc.channels);
      for (Eigen::Index k = 0; k < noise.size(); ++k) noise.data()[k] = S(normal(rng_));
      x0[std::size_t(b)] = std::move(noise);
    }
    std::vector<SampleResult<S>> results(static_cast<std::size_t>(B));
    parallel_for(B, [&](int b) {
      const auto i = std::size_t(b);
      results[i] = sample_loss_and_grad(model_, data[idx[i]], x0[i], ts[i], cfg_, 1.0 / B);
    });

    StepMetrics m;
    m.step = adam_.iterations() + 1;
    Grads<S> g = std::move(results[0].grads);
    for (std::size_t b = 0; b < results.size(); ++b) {
      if (b > 0)
        for (std::size_t p = 0; p < g.size(); ++p) g[p] += results[b].grads[p];
      m.l_flow += results[b].l_flow;
      if (results[b].has_align) m.l_align += results[b].l_align;
    }
    m.l_flow /= B;
    // The gradient carries lambda * l_align / B per sample; report the same batch mean.
    m.l_align /= B;
    if (!std::isfinite(m.l_flow)) throw Error("train_step: non-finite l_flow at step " + std::to_string(m.step));
    if (!std::isfinite(m.l_align)) throw Error("train_step: non-finite l_align at step " + std::to_string(m.step));
    m.total = total_loss(m.l_flow, m.l_align, cfg_.lambda_align);
    for (const auto& gi : g)
      if (!gi.allFinite()) throw Error("train_step: non-finite gradient at step " + std::to_string(m.step));
    adam_.step(model_.params(), g);
    return m;
  }

  const TrainConfig& config() const { return cfg_; }

 private:
  ZOrderModel<S>& model_;
  TrainConfig cfg_;
  Adam<S> adam_;
  std::mt19937_64 rng_;
};

/// Runs cfg.steps updates; `on_step` sees every step's metrics.
template <class S>
std::vector<StepMetrics> train(ZOrderModel<S>& model, const std::vector<TrainExample<S>>& data, const TrainConfig& cfg,
                               const std::function<void(const StepMetrics&)>& on_step = {}) {
  Trainer<S> trainer(model, cfg);
  std::vector<StepMetrics> trace;
  trace.reserve(std::size_t(cfg.steps));
  for (int k = 0; k < cfg.steps; ++k) {
    trace.push_back(trainer.step(data));
    if (on_step) on_step(trace.back());
  }
  return trace;
}

inline void write_loss_header(std::ostream& os) { os << "step,l_flow,l_align,total\n"; }

inline void write_loss_row(std::ostream& os, const StepMetrics& m) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%ld,%.9g,%.9g,%.9g\n", m.step, m.l_flow, m.l_align, m.total);
  os << buf;
}

struct SamplerStep {
  int step = 0;           // 1-based
  double t = 0;           // time at which the velocity is evaluated
  bool layout_active = false;
  bool layout_ran = false;  // the model actually merged a composite output in some block
};

template <class S>
Matrix<S> sample(const ZOrderModel<S>& model, const SceneCondition& cond, const SamplerConfig& cfg,
                 const std::function<void(const SamplerStep&)>& hook = {}) {
  cfg.validate();
  const auto& mc = model.config();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix<S> x(mc.pixels(), mc.channels);
  for (Eigen::Index k = 0; k < x.size(); ++k) x.data()[k] = S(normal(rng));
  const int K = cfg.num_steps;
  const int guided = cfg.guided_steps();
  const S dt = S(1.0 / K);
  for (int k = 1; k <= K; ++k) {
    SamplerStep info;
    info.step = k;
    info.t = double(k - 1) / K;
    info.layout_active = k <= guided;
    ForwardOptions opt;
    opt.layout_active = info.layout_active;
    typename ZOrderModel<S>::Cache cache;
    const auto out = model.forward(x, info.t, cond, opt, &cache);
    for (const auto& bc : cache.blocks) info.layout_ran = info.layout_ran || bc.composite;
    x += dt * out.velocity;
    if (hook) hook(info);
  }
  return x;
}

template <class S>
Image sample_image(const ZOrderModel<S>& model, const SceneLayout& layout, const SamplerConfig& cfg,
                   const std::function<void(const SamplerStep&)>& hook = {}) {
  const auto report = validate_layout(layout);
  if (!report.valid()) throw Error("sample: invalid layout: " + report.errors.front().kind);
  const auto& mc = model.config();
  if (layout.width != mc.image_size || layout.height != mc.image_size)
    throw Error("sample: layout size does not match the model resolution");
  const auto cond = make_condition(layout, model.grid(), model.flags());
  return latent_to_image(sample(model, cond, cfg, hook), layout.width, layout.height);
}

}  // namespace zorder
