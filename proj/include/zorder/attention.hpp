#pragma once

// Multi-modal joint attention (image + text streams with separate projections),
// the global transformer block, and per-instance decoupled attention.

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "zorder/compositor.hpp"
#include "zorder/core.hpp"
#include "zorder/nn.hpp"

namespace zorder {

template <class S>
struct TextEmbedding {
  Matrix<S> tokens;  // n x D
  RowVector<S> pooled() const { return tokens.colwise().mean(); }
};

template <class S>
struct AttentionParams {
  Linear<S> q_img, k_img, v_img, o_img;
  Linear<S> q_txt, k_txt, v_txt, o_txt;
  int heads = 1;

  static AttentionParams create(ParamStore<S>& store, const std::string& name, int dim, int heads, double stddev,
                                std::mt19937_64& rng) {
    require(heads > 0 && dim % heads == 0, "attention: dim must be divisible by head count");
    AttentionParams a;
    a.heads = heads;
    a.q_img = Linear<S>::create(store, name + ".q_img", dim, dim, stddev, rng);
    a.k_img = Linear<S>::create(store, name + ".k_img", dim, dim, stddev, rng);
    a.v_img = Linear<S>::create(store, name + ".v_img", dim, dim, stddev, rng);
    a.o_img = Linear<S>::create(store, name + ".o_img", dim, dim, stddev, rng);
    a.q_txt = Linear<S>::create(store, name + ".q_txt", dim, dim, stddev, rng);
    a.k_txt = Linear<S>::create(store, name + ".k_txt", dim, dim, stddev, rng);
    a.v_txt = Linear<S>::create(store, name + ".v_txt", dim, dim, stddev, rng);
    a.o_txt = Linear<S>::create(store, name + ".o_txt", dim, dim, stddev, rng);
    return a;
  }

  int dim() const { return q_img.in(); }
};

template <class S>
struct AttentionCache {
  Matrix<S> z, c;
  Matrix<S> q, k, v;          // q: queries x D, k/v: (m+n) x D
  std::vector<Matrix<S>> attn;  // per head, queries x (m+n)
  Matrix<S> o;                // queries x D
  Eigen::Index m = 0, n = 0;
  bool text_queries = true;
};

template <class S>
struct AttentionOutput {
  Matrix<S> z;  // updated visual stream, m x D
  Matrix<S> c;  // updated text stream, n x D (empty when text queries are skipped)
};

/// Joint softmax attention over [z; c]. With text_queries = false only the
/// visual rows are queried; the text stream still supplies keys and values.
template <class S>
AttentionOutput<S> mm_attention_forward(const AttentionParams<S>& p, const Matrix<S>& z, const Matrix<S>& c,
                                        bool text_queries, AttentionCache<S>* cache = nullptr) {
  const int D = p.dim();
  if ((z.rows() > 0 && z.cols() != D) || c.cols() != D) throw Error("mm_attention: dimension mismatch");
  if (c.rows() < 1) throw Error("mm_attention: text stream must be non-empty");
  const Eigen::Index m = z.rows();
  const Eigen::Index n = c.rows();
  const Eigen::Index nq = m + (text_queries ? n : 0);
  const Eigen::Index N = m + n;

  Matrix<S> q(nq, D), k(N, D), v(N, D);
  if (m > 0) {
    q.topRows(m) = p.q_img.forward(z);
    k.topRows(m) = p.k_img.forward(z);
    v.topRows(m) = p.v_img.forward(z);
  }
  if (text_queries) q.bottomRows(n) = p.q_txt.forward(c);
  k.bottomRows(n) = p.k_txt.forward(c);
  v.bottomRows(n) = p.v_txt.forward(c);

  const int dh = D / p.heads;
  const S scale = S(1) / std::sqrt(S(dh));
  Matrix<S> o(nq, D);
  std::vector<Matrix<S>> attn(std::size_t(p.heads));
  for (int h = 0; h < p.heads; ++h) {
    Matrix<S> s = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * scale;
    for (Eigen::Index r = 0; r < nq; ++r) {
      const S mx = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - mx).exp().matrix();
      s.row(r) /= s.row(r).sum();
    }
    o.middleCols(h * dh, dh).noalias() = s * v.middleCols(h * dh, dh);
    attn[std::size_t(h)] = std::move(s);
  }

  AttentionOutput<S> out;
  out.z = m > 0 ? p.o_img.forward(o.topRows(m)) : Matrix<S>(0, D);
  if (text_queries) out.c = p.o_txt.forward(o.bottomRows(n));
  if (cache) {
    cache->z = z;
    cache->c = c;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->attn = std::move(attn);
    cache->o = std::move(o);
    cache->m = m;
    cache->n = n;
    cache->text_queries = text_queries;
  }
  return out;
}

template <class S>
AttentionOutput<S> mm_attention(const AttentionParams<S>& p, const Matrix<S>& z, const Matrix<S>& c) {
  return mm_attention_forward(p, z, c, true);
}

/// Returns (dz, dc). `dc_out` is ignored when the forward pass skipped text queries.
template <class S>
std::pair<Matrix<S>, Matrix<S>> mm_attention_backward(const AttentionParams<S>& p, const AttentionCache<S>& cache,
                                                      const Matrix<S>& dz_out, const Matrix<S>& dc_out, Grads<S>& g) {
  const int D = p.dim();
  const Eigen::Index m = cache.m;
  const Eigen::Index n = cache.n;
  const Eigen::Index nq = cache.q.rows();
  const int dh = D / p.heads;
  const S scale = S(1) / std::sqrt(S(dh));

  Matrix<S> d_o = Matrix<S>::Zero(nq, D);
  if (m > 0) d_o.topRows(m) = p.o_img.backward(cache.o.topRows(m), dz_out, g);
  if (cache.text_queries && dc_out.size() > 0) d_o.bottomRows(n) = p.o_txt.backward(cache.o.bottomRows(n), dc_out, g);

  Matrix<S> dq(nq, D), dk(m + n, D), dv(m + n, D);
  for (int h = 0; h < p.heads; ++h) {
    const Matrix<S>& a = cache.attn[std::size_t(h)];
    const auto doh = d_o.middleCols(h * dh, dh);
    dv.middleCols(h * dh, dh).noalias() = a.transpose() * doh;
    Matrix<S> da = doh * cache.v.middleCols(h * dh, dh).transpose();
    const Eigen::Matrix<S, Eigen::Dynamic, 1> row_dot = (da.array() * a.array()).rowwise().sum();
    Matrix<S> ds = (a.array() * (da.array().colwise() - row_dot.array())).matrix() * scale;
    dq.middleCols(h * dh, dh).noalias() = ds * cache.k.middleCols(h * dh, dh);
    dk.middleCols(h * dh, dh).noalias() = ds.transpose() * cache.q.middleCols(h * dh, dh);
  }

  Matrix<S> dz = Matrix<S>::Zero(m, D);
  Matrix<S> dc = Matrix<S>::Zero(n, D);
  if (m > 0) {
    dz += p.q_img.backward(cache.z, dq.topRows(m), g);
    dz += p.k_img.backward(cache.z, dk.topRows(m), g);
    dz += p.v_img.backward(cache.z, dv.topRows(m), g);
  }
  if (cache.text_queries) dc += p.q_txt.backward(cache.c, dq.bottomRows(n), g);
  dc += p.k_txt.backward(cache.c, dk.bottomRows(n), g);
  dc += p.v_txt.backward(cache.c, dv.bottomRows(n), g);
  return {std::move(dz), std::move(dc)};
}

// ---------------------------------------------------------------------------
// Global block: pre-norm joint attention against the prompt tokens, then a
// GELU feed-forward, each wrapped in a residual connection.

template <class S>
struct GlobalBlockParams {
  LayerNorm<S> norm_attn;
  AttentionParams<S> attn;
  LayerNorm<S> norm_ff;
  Linear<S> ff_in, ff_out;

  static GlobalBlockParams create(ParamStore<S>& store, const std::string& name, int dim, int heads, int ff_dim,
                                  double stddev, std::mt19937_64& rng) {
    GlobalBlockParams b;
    b.norm_attn = LayerNorm<S>::create(store, name + ".norm_attn", dim);
    b.attn = AttentionParams<S>::create(store, name + ".attn", dim, heads, stddev, rng);
    b.norm_ff = LayerNorm<S>::create(store, name + ".norm_ff", dim);
    b.ff_in = Linear<S>::create(store, name + ".ff_in", dim, ff_dim, stddev, rng);
    b.ff_out = Linear<S>::create(store, name + ".ff_out", ff_dim, dim, stddev, rng);
    return b;
  }
};

template <class S>
struct GlobalBlockCache {
  LayerNormCache<S> norm_attn, norm_ff;
  AttentionCache<S> attn;
  Matrix<S> x_ff_in;  // normalized input to the feed-forward
  Matrix<S> pre_act;  // ff_in output
  Matrix<S> act;      // GELU(pre_act)
};

template <class S>
Matrix<S> global_block_forward(const GlobalBlockParams<S>& b, const Matrix<S>& z, const Matrix<S>& prompt,
                               GlobalBlockCache<S>* cache = nullptr) {
  LayerNormCache<S> ln1, ln2;
  AttentionCache<S> ac;
  Matrix<S> zn = b.norm_attn.forward(z, cache ? &ln1 : nullptr);
  auto att = mm_attention_forward(b.attn, zn, prompt, false, cache ? &ac : nullptr);
  Matrix<S> x1 = z + att.z;
  Matrix<S> xn = b.norm_ff.forward(x1, cache ? &ln2 : nullptr);
  Matrix<S> pre = b.ff_in.forward(xn);
  Matrix<S> act = pre.unaryExpr([](S v) { return gelu(v); });
  Matrix<S> out = x1 + b.ff_out.forward(act);
  if (cache) {
    cache->norm_attn = std::move(ln1);
    cache->norm_ff = std::move(ln2);
    cache->attn = std::move(ac);
    cache->x_ff_in = std::move(xn);
    cache->pre_act = std::move(pre);
    cache->act = std::move(act);
  }
  return out;
}

template <class S>
Matrix<S> global_block(const Matrix<S>& z, const TextEmbedding<S>& prompt, const GlobalBlockParams<S>& b) {
  return global_block_forward(b, z, prompt.tokens);
}

/// Returns (dz, dprompt).
template <class S>
std::pair<Matrix<S>, Matrix<S>> global_block_backward(const GlobalBlockParams<S>& b, const GlobalBlockCache<S>& c,
                                                      const Matrix<S>& d_out, Grads<S>& g) {
  Matrix<S> d_act = b.ff_out.backward(c.act, d_out, g);
  Matrix<S> d_pre = (d_act.array() * c.pre_act.unaryExpr([](S v) { return gelu_grad(v); }).array()).matrix();
  Matrix<S> d_xn = b.ff_in.backward(c.x_ff_in, d_pre, g);
  Matrix<S> d_x1 = d_out + b.norm_ff.backward(c.norm_ff, d_xn, g);
  auto [d_zn, d_prompt] = mm_attention_backward(b.attn, c.attn, d_x1, Matrix<S>(), g);
  Matrix<S> dz = d_x1 + b.norm_attn.backward(c.norm_attn, d_zn, g);
  return {std::move(dz), std::move(d_prompt)};
}

// ---------------------------------------------------------------------------
// Decoupled instance attention: tokens inside the box attend only to each
// other and to the instance caption; everything outside the box is zero.

template <class S>
struct DecoupleCache {
  std::vector<int> omega;
  AttentionCache<S> attn;
};

template <class S>
InstanceFeatureLayer<S> decouple_instance_forward(const Matrix<S>& z, const std::vector<int>& omega,
                                                  const Matrix<S>& caption, const AttentionParams<S>& p,
                                                  const TokenMask& box_mask, int id,
                                                  DecoupleCache<S>* cache = nullptr) {
  const Eigen::Index L = z.rows();
  const Eigen::Index D = z.cols();
  InstanceFeatureLayer<S> layer;
  layer.id = id;
  layer.omega = omega;
  layer.box_mask = box_mask;
  layer.z_hat = Matrix<S>::Zero(L, D);
  if (cache) cache->omega = omega;
  if (omega.empty()) return layer;
  Matrix<S> local(Eigen::Index(omega.size()), D);
  for (std::size_t r = 0; r < omega.size(); ++r) {
    if (omega[r] < 0 || omega[r] >= L) throw Error("decouple_instance: token index out of range");
    local.row(Eigen::Index(r)) = z.row(omega[r]);
  }
  auto out = mm_attention_forward(p, local, caption, false, cache ? &cache->attn : nullptr);
  for (std::size_t r = 0; r < omega.size(); ++r) layer.z_hat.row(omega[r]) = out.z.row(Eigen::Index(r));
  return layer;
}

template <class S>
InstanceFeatureLayer<S> decouple_instance(const Matrix<S>& z, const std::vector<int>& omega,
                                          const TextEmbedding<S>& caption, const AttentionParams<S>& p,
                                          const TokenGrid& grid, int id = 0) {
  TokenMask mask(grid);
  for (int u : omega) mask.bits[std::size_t(u)] = 1;
  return decouple_instance_forward(z, omega, caption.tokens, p, mask, id);
}

/// Accumulates dL/dz into `dz` (only rows in omega) and returns dL/dcaption.
template <class S>
Matrix<S> decouple_instance_backward(const AttentionParams<S>& p, const DecoupleCache<S>& cache,
                                     const Matrix<S>& d_zhat, Matrix<S>& dz, Grads<S>& g) {
  const Eigen::Index D = d_zhat.cols();
  if (cache.omega.empty()) return Matrix<S>::Zero(cache.attn.c.rows(), D);
  Matrix<S> d_local(Eigen::Index(cache.omega.size()), D);
  for (std::size_t r = 0; r < cache.omega.size(); ++r) d_local.row(Eigen::Index(r)) = d_zhat.row(cache.omega[r]);
  auto [d_in, d_caption] = mm_attention_backward(p, cache.attn, d_local, Matrix<S>(), g);
  for (std::size_t r = 0; r < cache.omega.size(); ++r) dz.row(cache.omega[r]) += d_in.row(Eigen::Index(r));
  return d_caption;
}

}  // namespace zorder
