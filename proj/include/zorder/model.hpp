#pragma once

// Toy occlusion-aware diffusion transformer.
//
//   image (32x32x3) -> 4x4 patches -> tokens (8x8 grid, D channels)
//   + learned positional table + timestep embedding
//   for each block:
//     Z = global_block(X, prompt tokens)
//     layout stage (when active): per-instance decoupled attention inside the
//       box, volumetric composite ordered by the occluder sets, X' = Z + Z_out
//   final norm -> per-token linear -> patches -> velocity image
//
// The queried alignment head reads the instance layers of one block.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "zorder/alignment.hpp"
#include "zorder/attention.hpp"
#include "zorder/compositor.hpp"
#include "zorder/grid.hpp"
#include "zorder/layout.hpp"
#include "zorder/nn.hpp"

namespace zorder {

struct ModelConfig {
  int image_size = 32;
  int patch = 4;
  int channels = 3;
  int dim = 64;
  int heads = 4;
  int blocks = 4;
  int ff_mult = 2;
  int caption_vocab = 16;
  int prompt_vocab = 2;
  int caption_tokens = 4;
  int prompt_tokens = 8;
  int layout_blocks = 4;  // the first N blocks carry the decouple/composite stage
  int align_block = 0;
  double density_init = 5.0;  // initial per-channel density before any training
  std::uint64_t init_seed = 0;

  TokenGrid grid() const { return {image_size / patch, image_size / patch}; }
  int patch_values() const { return patch * patch * channels; }
  int pixels() const { return image_size * image_size; }
};

/// Switches that define the ablation variants; shared by training and inference.
struct LayoutFlags {
  bool learned_sigma = true;
  double fixed_sigma_value = 5.0;
  bool occlusion_cond = true;
  bool instance_decouple = true;
  bool transitive_occluders = false;
};

struct InstanceCondition {
  int id = 0;
  int caption = 0;
  std::vector<int> omega;
  TokenMask box_mask;
  std::vector<int> occluders;  // ids
  TokenMask modal;
  TokenMask amodal;
};

struct SceneCondition {
  int prompt = 0;
  std::vector<InstanceCondition> instances;  // ascending id
};

inline SceneCondition make_condition(const SceneLayout& layout, const TokenGrid& grid, const LayoutFlags& flags) {
  SceneCondition sc;
  sc.prompt = layout.global_prompt;
  auto graph = OcclusionGraph::from_layout(layout);
  for (const auto& inst : layout.instances) {
    InstanceCondition ic;
    ic.id = inst.id;
    ic.caption = inst.caption;
    ic.omega = tokens_in_box(inst.box, grid);
    ic.box_mask = rasterize_box(inst.box, grid);
    if (flags.occlusion_cond) {
      auto occ = graph.occluder_set(inst.id, flags.transitive_occluders ? OccluderMode::transitive : OccluderMode::direct);
      ic.occluders.assign(occ.begin(), occ.end());
    }
    ic.modal = inst.modal_mask.size() ? downsample_mask(inst.modal_mask, grid) : TokenMask(grid);
    ic.amodal = inst.amodal_mask.size() ? downsample_mask(inst.amodal_mask, grid) : TokenMask(grid);
    sc.instances.push_back(std::move(ic));
  }
  std::sort(sc.instances.begin(), sc.instances.end(),
            [](const InstanceCondition& a, const InstanceCondition& b) { return a.id < b.id; });
  return sc;
}

/// Image tensors are (pixels x channels), row-major over pixels.
template <class S>
Matrix<S> patchify(const Matrix<S>& image, const ModelConfig& cfg) {
  const TokenGrid g = cfg.grid();
  const int P = cfg.patch;
  const int C = cfg.channels;
  Matrix<S> out(g.size(), cfg.patch_values());
  for (int r = 0; r < g.h; ++r)
    for (int c = 0; c < g.w; ++c)
      for (int py = 0; py < P; ++py)
        for (int px = 0; px < P; ++px)
          for (int ch = 0; ch < C; ++ch)
            out(r * g.w + c, (py * P + px) * C + ch) = image((r * P + py) * cfg.image_size + c * P + px, ch);
  return out;
}

template <class S>
Matrix<S> unpatchify(const Matrix<S>& tokens, const ModelConfig& cfg) {
  const TokenGrid g = cfg.grid();
  const int P = cfg.patch;
  const int C = cfg.channels;
  Matrix<S> image(cfg.pixels(), C);
  for (int r = 0; r < g.h; ++r)
    for (int c = 0; c < g.w; ++c)
      for (int py = 0; py < P; ++py)
        for (int px = 0; px < P; ++px)
          for (int ch = 0; ch < C; ++ch)
            image((r * P + py) * cfg.image_size + c * P + px, ch) = tokens(r * g.w + c, (py * P + px) * C + ch);
  return image;
}

template <class S>
struct InstanceStageParams {
  LayerNorm<S> norm;
  AttentionParams<S> attn;
  Linear<S> density;
};

template <class S>
struct ModelOutput {
  Matrix<S> velocity;                  // pixels x channels
  std::vector<MaskPrediction<S>> masks;  // one per instance when the alignment head ran
};

struct ForwardOptions {
  bool layout_active = true;  // decouple/composite stage on (inside the guidance window)
  bool alignment = false;     // evaluate the alignment head
};

template <class S>
class ZOrderModel {
 public:
  ZOrderModel(const ModelConfig& cfg, const LayoutFlags& flags) : cfg_(cfg), flags_(flags) {
    require(cfg.image_size % cfg.patch == 0, "model: image size must be a multiple of the patch size");
    require(cfg.layout_blocks >= 0 && cfg.layout_blocks <= cfg.blocks, "model: layout_blocks out of range");
    require(cfg.align_block >= 0 && cfg.align_block < std::max(1, cfg.layout_blocks), "model: align_block must carry the layout stage");
    std::mt19937_64 rng(cfg.init_seed);
    const int D = cfg.dim;
    const int L = cfg.grid().size();
    const double s_in = 1.0 / std::sqrt(double(D));
    patch_embed_ = Linear<S>::create(store_, "patch_embed", cfg.patch_values(), D, 1.0 / std::sqrt(cfg.patch_values()), rng);
    pos_ = &store_.add("pos_embed", random_normal<S>(L, D, 0.02, rng));
    time_in_ = Linear<S>::create(store_, "time_embed.in", 2 * kTimeFrequencies, D, 1.0 / std::sqrt(2.0 * kTimeFrequencies), rng);
    time_out_ = Linear<S>::create(store_, "time_embed.out", D, D, s_in, rng);
    caption_table_ = &store_.add("caption_table", random_normal<S>(cfg.caption_vocab * cfg.caption_tokens, D, 1.0, rng));
    prompt_table_ = &store_.add("prompt_table", random_normal<S>(cfg.prompt_vocab * cfg.prompt_tokens, D, 1.0, rng));
    for (int b = 0; b < cfg.blocks; ++b) {
      const std::string name = "block" + std::to_string(b);
      blocks_.push_back(GlobalBlockParams<S>::create(store_, name, D, cfg.heads, cfg.ff_mult * D, s_in, rng));
      if (b < cfg.layout_blocks) {
        InstanceStageParams<S> st;
        st.norm = LayerNorm<S>::create(store_, name + ".inst_norm", D);
        st.attn = AttentionParams<S>::create(store_, name + ".inst_attn", D, cfg.heads, s_in, rng);
        st.density = Linear<S>::create(store_, name + ".density", D, D, 0.02, rng);
        st.density.bias->value.setConstant(S(inverse_softplus(cfg.density_init)));
        stages_.push_back(std::move(st));
      }
    }
    time_text_ = TimeTextParams<S>::create(store_, "time_text", D, s_in, rng);
    query_ = Linear<S>::create(store_, "align.query", D, D, s_in, rng);
    mask_head_ = MaskPredictorParams<S>::create(store_, "align.mask_head", rng);
    final_norm_ = LayerNorm<S>::create(store_, "final_norm", D);
    unpatch_ = Linear<S>::create(store_, "unpatch", D, cfg.patch_values(), 0.02, rng);
  }

  ZOrderModel(const ZOrderModel&) = delete;
  ZOrderModel& operator=(const ZOrderModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  const LayoutFlags& flags() const { return flags_; }
  void set_flags(const LayoutFlags& f) { flags_ = f; }
  ParamStore<S>& params() { return store_; }
  const ParamStore<S>& params() const { return store_; }
  TokenGrid grid() const { return cfg_.grid(); }

  struct BlockCache {
    GlobalBlockCache<S> global;
    bool stage = false;     // decouple ran in this block
    bool composite = false; // composite merged into the residual stream
    LayerNormCache<S> inst_norm;
    std::vector<DecoupleCache<S>> decouple;
    std::vector<CompositeLayer<S>> layers;
    std::vector<Matrix<S>> density_pre;  // 1 x D linear outputs
    CompositeForward<S> comp;
  };

  struct Cache {
    double t = 0;
    Matrix<S> patches;
    Matrix<S> time_features, time_hidden, time_act;
    std::vector<BlockCache> blocks;
    std::vector<TimeTextCache<S>> time_text;
    std::vector<RowVector<S>> e;
    std::vector<Matrix<S>> captions;  // caption token rows per instance
    bool alignment = false;
    std::vector<RowVector<S>> query;
    std::vector<SimilarityMap<S>> sim;
    std::vector<MaskPredictorCache<S>> mask_cache;
    std::vector<MaskPrediction<S>> masks;
    LayerNormCache<S> final_norm;
    Matrix<S> final_x;
  };

  ModelOutput<S> forward(const Matrix<S>& z_t, double t, const SceneCondition& cond, const ForwardOptions& opt,
                         Cache* cache = nullptr) const {
    require(z_t.rows() == cfg_.pixels() && z_t.cols() == cfg_.channels, "model: latent shape mismatch");
    Cache local;
    Cache& c = cache ? *cache : local;
    c = Cache{};
    c.t = t;
    const int L = grid().size();
    const std::size_t n = cond.instances.size();
    const bool decouple = flags_.instance_decouple && cfg_.layout_blocks > 0 && n > 0;
    const bool layout = decouple && opt.layout_active;
    const bool align = decouple && opt.alignment;
    c.alignment = align;

    c.patches = patchify(z_t, cfg_);
    Matrix<S> x = patch_embed_.forward(c.patches);
    x += pos_->value;
    c.time_features = sinusoidal_embedding<S>(t);
    c.time_hidden = time_in_.forward(c.time_features);
    c.time_act = c.time_hidden.unaryExpr([](S v) { return gelu(v); });
    const Matrix<S> temb = time_out_.forward(c.time_act);
    x.rowwise() += temb.row(0);

    if (cond.prompt < 0 || cond.prompt >= cfg_.prompt_vocab) throw Error("model: prompt id out of range");
    const Matrix<S> prompt = prompt_table_->value.middleRows(cond.prompt * cfg_.prompt_tokens, cfg_.prompt_tokens);

    if (decouple && (layout || align)) {
      for (const auto& inst : cond.instances) {
        if (inst.caption < 0 || inst.caption >= cfg_.caption_vocab) throw Error("model: caption id out of range");
        Matrix<S> cap = caption_table_->value.middleRows(inst.caption * cfg_.caption_tokens, cfg_.caption_tokens);
        RowVector<S> pooled = cap.colwise().mean();
        TimeTextCache<S> tc;
        c.e.push_back(time_text_forward(time_text_, t, pooled, &tc));
        c.time_text.push_back(std::move(tc));
        c.captions.push_back(std::move(cap));
      }
    }

    c.blocks.resize(std::size_t(cfg_.blocks));
    for (int b = 0; b < cfg_.blocks; ++b) {
      BlockCache& bc = c.blocks[std::size_t(b)];
      Matrix<S> z = global_block_forward(blocks_[std::size_t(b)], x, prompt, &bc.global);
      const bool carries = b < cfg_.layout_blocks;
      const bool run_stage = carries && (layout || (align && b == cfg_.align_block));
      if (!run_stage) {
        x = std::move(z);
        continue;
      }
      const auto& st = stages_[std::size_t(b)];
      bc.stage = true;
      bc.composite = layout;
      Matrix<S> zn = st.norm.forward(z, &bc.inst_norm);
      bc.decouple.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto& inst = cond.instances[i];
        auto layer = decouple_instance_forward(zn, inst.omega, c.captions[i], st.attn, inst.box_mask, inst.id,
                                               &bc.decouple[i]);
        CompositeLayer<S> cl;
        cl.id = inst.id;
        cl.z_hat = std::move(layer.z_hat);
        cl.box_mask = inst.box_mask;
        if (flags_.occlusion_cond) cl.occluders = inst.occluders;
        if (flags_.learned_sigma) {
          Matrix<S> act = Matrix<S>(c.e[i]).unaryExpr([](S v) { return silu(v); });
          Matrix<S> pre = st.density.forward(act);
          cl.sigma = pre.unaryExpr([](S v) { return softplus(v); });
          bc.density_pre.push_back(std::move(pre));
        } else {
          cl.sigma = RowVector<S>::Constant(cfg_.dim, S(flags_.fixed_sigma_value));
        }
        bc.layers.push_back(std::move(cl));
      }
      if (layout) {
        bc.comp = composite_forward(bc.layers, L, cfg_.dim);
        x = z + bc.comp.out;
      } else {
        x = std::move(z);
      }
      if (align && b == cfg_.align_block) {
        for (std::size_t i = 0; i < n; ++i) {
          RowVector<S> q = project_query(c.e[i], query_);
          c.sim.push_back(similarity_map(bc.layers[i].z_hat, q, grid()));
          MaskPredictorCache<S> mc;
          c.masks.push_back(predict_mask_forward(c.sim.back(), mask_head_, &mc));
          c.mask_cache.push_back(std::move(mc));
          c.query.push_back(std::move(q));
        }
      }
    }

    c.final_x = final_norm_.forward(x, &c.final_norm);
    ModelOutput<S> out;
    out.velocity = unpatchify(unpatch_.forward(c.final_x), cfg_);
    out.masks = c.masks;
    return out;
  }

  /// Accumulates parameter gradients for upstream gradients on the velocity and
  /// (optionally) on the alignment-head probabilities.
  void backward(const Cache& c, const SceneCondition& cond, const Matrix<S>& d_velocity,
                const std::vector<Matrix<S>>* d_mask_probs, Grads<S>& g) const {
    const std::size_t n = cond.instances.size();
    Matrix<S> d_tokens = patchify(d_velocity, cfg_);
    Matrix<S> d_final = unpatch_.backward(c.final_x, d_tokens, g);
    Matrix<S> dx = final_norm_.backward(c.final_norm, d_final, g);

    std::vector<RowVector<S>> d_e(c.e.size(), RowVector<S>::Zero(cfg_.dim));
    Matrix<S> d_prompt = Matrix<S>::Zero(cfg_.prompt_tokens, cfg_.dim);

    for (int b = cfg_.blocks - 1; b >= 0; --b) {
      const BlockCache& bc = c.blocks[std::size_t(b)];
      Matrix<S> dz = dx;
      if (bc.stage) {
        const auto& st = stages_[std::size_t(b)];
        std::vector<Matrix<S>> d_zhat(n, Matrix<S>::Zero(grid().size(), cfg_.dim));
        std::vector<RowVector<S>> d_sigma(n, RowVector<S>::Zero(cfg_.dim));
        if (bc.composite) {
          auto cg = composite_grad(bc.layers, bc.comp, dx);
          d_zhat = std::move(cg.d_z_hat);
          d_sigma = std::move(cg.d_sigma);
        }
        if (c.alignment && b == cfg_.align_block && d_mask_probs) {
          for (std::size_t i = 0; i < n; ++i) {
            RowVector<S> d_s = predict_mask_backward(mask_head_, c.mask_cache[i], c.masks[i], (*d_mask_probs)[i], g);
            RowVector<S> dq = similarity_backward(bc.layers[i].z_hat, c.query[i], cond.instances[i].omega, d_s, d_zhat[i]);
            d_e[i] += projection_backward(c.e[i], query_, c.query[i], dq, false, g);
          }
        }
        Matrix<S> d_zn = Matrix<S>::Zero(grid().size(), cfg_.dim);
        for (std::size_t i = 0; i < n; ++i) {
          if (bc.composite && flags_.learned_sigma)
            d_e[i] += projection_backward(c.e[i], st.density, RowVector<S>(bc.density_pre[i]), d_sigma[i], true, g);
          Matrix<S> d_cap = decouple_instance_backward(st.attn, bc.decouple[i], d_zhat[i], d_zn, g);
          if (d_cap.rows() > 0)
            g[caption_table_->index].middleRows(cond.instances[i].caption * cfg_.caption_tokens, cfg_.caption_tokens) += d_cap;
        }
        dz += st.norm.backward(bc.inst_norm, d_zn, g);
      }
      auto [d_in, d_p] = global_block_backward(blocks_[std::size_t(b)], bc.global, dz, g);
      d_prompt += d_p;
      dx = std::move(d_in);
    }
    g[prompt_table_->index].middleRows(cond.prompt * cfg_.prompt_tokens, cfg_.prompt_tokens) += d_prompt;

    for (std::size_t i = 0; i < c.e.size(); ++i) {
      if (d_e[i].isZero(0)) continue;
      RowVector<S> d_pooled = time_text_backward(time_text_, c.time_text[i], d_e[i], g);
      g[caption_table_->index]
          .middleRows(cond.instances[i].caption * cfg_.caption_tokens, cfg_.caption_tokens)
          .rowwise() += d_pooled / S(cfg_.caption_tokens);
    }

    g[pos_->index] += dx;
    patch_embed_.backward_params_only(c.patches, dx, g);
    Matrix<S> d_temb = dx.colwise().sum();
    Matrix<S> d_act = time_out_.backward(c.time_act, d_temb, g);
    Matrix<S> d_hidden = (d_act.array() * c.time_hidden.unaryExpr([](S v) { return gelu_grad(v); }).array()).matrix();
    time_in_.backward_params_only(c.time_features, d_hidden, g);
  }

  /// Parameter-name groups, used to check that every group receives gradient.
  static std::string group_of(const std::string& name) {
    if (name.find("inst_attn") != std::string::npos) return "instance_attention";
    if (name.find("density") != std::string::npos) return "density_projection";
    if (name.find(".attn") != std::string::npos) return "global_attention";
    if (name.find("align.query") == 0) return "query_projection";
    if (name.find("align.mask_head") == 0) return "mask_predictor";
    if (name.find("caption_table") == 0 || name.find("prompt_table") == 0) return "embeddings";
    if (name.find("time_text") == 0) return "time_text";
    return "backbone";
  }

 private:
  static double inverse_softplus(double y) { return y > 30 ? y : std::log(std::expm1(y)); }

  ModelConfig cfg_;
  LayoutFlags flags_;
  ParamStore<S> store_;
  Linear<S> patch_embed_;
  Param<S>* pos_ = nullptr;
  Linear<S> time_in_, time_out_;
  Param<S>* caption_table_ = nullptr;
  Param<S>* prompt_table_ = nullptr;
  std::vector<GlobalBlockParams<S>> blocks_;
  std::vector<InstanceStageParams<S>> stages_;
  TimeTextParams<S> time_text_;
  Linear<S> query_;
  MaskPredictorParams<S> mask_head_;
  LayerNorm<S> final_norm_;
  Linear<S> unpatch_;
};

}  // namespace zorder
