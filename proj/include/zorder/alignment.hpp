#pragma once

// Instance conditioning (time-text embedding, query and density projections)
// and the queried alignment head: cosine similarity map -> small CNN -> 2-way
// softmax, supervised by token-level instance masks.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "zorder/core.hpp"
#include "zorder/grid.hpp"
#include "zorder/nn.hpp"

namespace zorder {

inline constexpr int kTimeFrequencies = 128;
inline constexpr double kSimilarityEps = 1e-8;
inline constexpr double kLogClamp = 1e-7;
inline constexpr double kAmodalWindow = 0.3;

/// [cos(f_k * 1000 t), sin(f_k * 1000 t)] with geometric frequencies f_k = 10000^(-k/128).
template <class S>
RowVector<S> sinusoidal_embedding(double t, int frequencies = kTimeFrequencies) {
  RowVector<S> e(2 * frequencies);
  for (int k = 0; k < frequencies; ++k) {
    const double f = std::exp(-std::log(10000.0) * double(k) / frequencies);
    const double a = 1000.0 * t * f;
    e[k] = S(std::cos(a));
    e[frequencies + k] = S(std::sin(a));
  }
  return e;
}

template <class S>
struct TimeTextParams {
  Linear<S> time_proj;  // 2*frequencies -> D
  Linear<S> text_proj;  // D -> D
  Linear<S> out;        // D -> D, after GELU

  static TimeTextParams create(ParamStore<S>& store, const std::string& name, int dim, double stddev,
                               std::mt19937_64& rng) {
    TimeTextParams p;
    p.time_proj = Linear<S>::create(store, name + ".time_proj", 2 * kTimeFrequencies, dim, stddev, rng);
    p.text_proj = Linear<S>::create(store, name + ".text_proj", dim, dim, stddev, rng);
    p.out = Linear<S>::create(store, name + ".out", dim, dim, stddev, rng);
    return p;
  }
};

template <class S>
struct TimeTextCache {
  Matrix<S> time_features;  // 1 x 2F
  Matrix<S> pooled;         // 1 x D
  Matrix<S> hidden;         // pre-GELU
  Matrix<S> act;
};

template <class S>
RowVector<S> time_text_forward(const TimeTextParams<S>& p, double t, const RowVector<S>& pooled,
                               TimeTextCache<S>* cache = nullptr) {
  if (!(t >= 0.0 && t <= 1.0)) throw Error("time_text_embed: t must lie in [0, 1]");
  Matrix<S> tf = sinusoidal_embedding<S>(t);
  Matrix<S> y = pooled;
  Matrix<S> hidden = p.time_proj.forward(tf) + p.text_proj.forward(y);
  Matrix<S> act = hidden.unaryExpr([](S v) { return gelu(v); });
  RowVector<S> e = p.out.forward(act);
  if (cache) *cache = {std::move(tf), std::move(y), std::move(hidden), std::move(act)};
  return e;
}

template <class S>
RowVector<S> time_text_embed(double t, const RowVector<S>& pooled, const TimeTextParams<S>& p) {
  return time_text_forward(p, t, pooled);
}

/// Returns dL/dpooled.
template <class S>
RowVector<S> time_text_backward(const TimeTextParams<S>& p, const TimeTextCache<S>& c, const RowVector<S>& d_e,
                                Grads<S>& g) {
  Matrix<S> d_act = p.out.backward(c.act, d_e, g);
  Matrix<S> d_hidden = (d_act.array() * c.hidden.unaryExpr([](S v) { return gelu_grad(v); }).array()).matrix();
  p.time_proj.backward_params_only(c.time_features, d_hidden, g);
  return p.text_proj.backward(c.pooled, d_hidden, g);
}

/// q = Linear(SiLU(e)).
template <class S>
RowVector<S> project_query(const RowVector<S>& e, const Linear<S>& proj) {
  Matrix<S> x = Matrix<S>(e).unaryExpr([](S v) { return silu(v); });
  return proj.forward(x);
}

/// sigma = Softplus(Linear(SiLU(e))).
template <class S>
RowVector<S> project_density(const RowVector<S>& e, const Linear<S>& proj) {
  Matrix<S> x = Matrix<S>(e).unaryExpr([](S v) { return silu(v); });
  return proj.forward(x).unaryExpr([](S v) { return softplus(v); });
}

/// Backward of y = act(Linear(SiLU(e))) for act = identity (query) or softplus (density).
/// `pre` is the Linear output; returns dL/de.
template <class S>
RowVector<S> projection_backward(const RowVector<S>& e, const Linear<S>& proj, const RowVector<S>& pre,
                                 const RowVector<S>& d_out, bool softplus_act, Grads<S>& g) {
  Matrix<S> x = Matrix<S>(e).unaryExpr([](S v) { return silu(v); });
  Matrix<S> d_pre = d_out;
  if (softplus_act) d_pre.array() *= pre.unaryExpr([](S v) { return sigmoid(v); }).array();
  Matrix<S> dx = proj.backward(x, d_pre, g);
  return (dx.array() * Matrix<S>(e).unaryExpr([](S v) { return silu_grad(v); }).array()).matrix();
}

// ---------------------------------------------------------------------------
// Similarity map

template <class S>
struct SimilarityMap {
  TokenGrid grid;
  RowVector<S> values;  // L entries, row-major over the grid
};

template <class S>
SimilarityMap<S> similarity_map(const Matrix<S>& z_hat, const RowVector<S>& q, const TokenGrid& grid,
                                S eps = S(kSimilarityEps)) {
  const S qn = q.norm();
  if (!(qn > S(0))) throw Error("similarity_map: zero query vector");
  if (z_hat.rows() != grid.size() || z_hat.cols() != q.size()) throw Error("similarity_map: shape mismatch");
  SimilarityMap<S> s{grid, RowVector<S>(grid.size())};
  for (int u = 0; u < grid.size(); ++u) {
    const S zn = z_hat.row(u).norm();
    s.values[u] = z_hat.row(u).dot(q) / ((zn + eps) * qn);
  }
  return s;
}

/// Backward of similarity_map restricted to `rows` (tokens whose features are live).
/// Adds into d_zhat and returns dL/dq.
template <class S>
RowVector<S> similarity_backward(const Matrix<S>& z_hat, const RowVector<S>& q, const std::vector<int>& rows,
                                 const RowVector<S>& d_s, Matrix<S>& d_zhat, S eps = S(kSimilarityEps)) {
  const S qn = q.norm();
  RowVector<S> dq = RowVector<S>::Zero(q.size());
  for (int u : rows) {
    const auto z = z_hat.row(u);
    const S zn = z.norm();
    const S a = z.dot(q);
    const S den = (zn + eps) * qn;
    const S gs = d_s[u];
    if (gs == S(0)) continue;
    // ds/dz = q/den - a*qn/den^2 * z/|z|
    RowVector<S> dz = q / den;
    if (zn > S(0)) dz -= (a * qn / (den * den)) * (z / zn);
    d_zhat.row(u) += gs * dz;
    // ds/dq = z/den - a*(|z|+eps)/den^2 * q/|q|
    dq += gs * (z / den - (a * (zn + eps) / (den * den)) * (q / qn));
  }
  return dq;
}

// ---------------------------------------------------------------------------
// Mask predictor: 3x3 conv (1->32) GELU, 3x3 conv (32->16) GELU, 1x1 conv (16->2), softmax.
// Convolutions are im2col + Linear; weights are (in_channels * 9) x out_channels.

template <class S>
struct MaskPredictorParams {
  Linear<S> conv1, conv2, conv3;

  static MaskPredictorParams create(ParamStore<S>& store, const std::string& name, std::mt19937_64& rng) {
    MaskPredictorParams p;
    p.conv1 = Linear<S>::create(store, name + ".conv1", 9, 32, std::sqrt(2.0 / 9), rng);
    p.conv2 = Linear<S>::create(store, name + ".conv2", 32 * 9, 16, std::sqrt(2.0 / (32 * 9)), rng);
    p.conv3 = Linear<S>::create(store, name + ".conv3", 16, 2, std::sqrt(1.0 / 16), rng);
    return p;
  }
};

namespace detail {

/// (H*W) x (C*9) patch matrix with zero padding 1; column = c*9 + ky*3 + kx.
template <class S>
Matrix<S> im2col3x3(const Matrix<S>& x, const TokenGrid& g) {
  const Eigen::Index C = x.cols();
  Matrix<S> cols = Matrix<S>::Zero(g.size(), C * 9);
  for (int r = 0; r < g.h; ++r)
    for (int c = 0; c < g.w; ++c)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const int rr = r + ky - 1;
          const int cc = c + kx - 1;
          if (rr < 0 || rr >= g.h || cc < 0 || cc >= g.w) continue;
          const int src = rr * g.w + cc;
          for (Eigen::Index ch = 0; ch < C; ++ch) cols(r * g.w + c, ch * 9 + ky * 3 + kx) = x(src, ch);
        }
  return cols;
}

template <class S>
Matrix<S> col2im3x3(const Matrix<S>& d_cols, Eigen::Index C, const TokenGrid& g) {
  Matrix<S> dx = Matrix<S>::Zero(g.size(), C);
  for (int r = 0; r < g.h; ++r)
    for (int c = 0; c < g.w; ++c)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const int rr = r + ky - 1;
          const int cc = c + kx - 1;
          if (rr < 0 || rr >= g.h || cc < 0 || cc >= g.w) continue;
          const int src = rr * g.w + cc;
          for (Eigen::Index ch = 0; ch < C; ++ch) dx(src, ch) += d_cols(r * g.w + c, ch * 9 + ky * 3 + kx);
        }
  return dx;
}

}  // namespace detail

template <class S>
struct MaskPrediction {
  TokenGrid grid;
  Matrix<S> probs;  // L x 2: (background, foreground)
};

template <class S>
struct MaskPredictorCache {
  Matrix<S> cols1, pre1, act1, cols2, pre2, act2;
};

template <class S>
MaskPrediction<S> predict_mask_forward(const SimilarityMap<S>& s, const MaskPredictorParams<S>& p,
                                       MaskPredictorCache<S>* cache = nullptr) {
  const TokenGrid& g = s.grid;
  Matrix<S> input = s.values.transpose();
  Matrix<S> cols1 = detail::im2col3x3(input, g);
  Matrix<S> pre1 = p.conv1.forward(cols1);
  Matrix<S> act1 = pre1.unaryExpr([](S v) { return gelu(v); });
  Matrix<S> cols2 = detail::im2col3x3(act1, g);
  Matrix<S> pre2 = p.conv2.forward(cols2);
  Matrix<S> act2 = pre2.unaryExpr([](S v) { return gelu(v); });
  Matrix<S> logits = p.conv3.forward(act2);
  MaskPrediction<S> out{g, Matrix<S>(g.size(), 2)};
  for (int u = 0; u < g.size(); ++u) {
    const S mx = std::max(logits(u, 0), logits(u, 1));
    const S e0 = std::exp(logits(u, 0) - mx);
    const S e1 = std::exp(logits(u, 1) - mx);
    out.probs(u, 0) = e0 / (e0 + e1);
    out.probs(u, 1) = e1 / (e0 + e1);
  }
  if (cache) *cache = {std::move(cols1), std::move(pre1), std::move(act1), std::move(cols2), std::move(pre2), std::move(act2)};
  return out;
}

template <class S>
MaskPrediction<S> predict_mask(const SimilarityMap<S>& s, const MaskPredictorParams<S>& p) {
  return predict_mask_forward(s, p);
}

/// Backward from dL/dprobs to dL/dsimilarity.
template <class S>
RowVector<S> predict_mask_backward(const MaskPredictorParams<S>& p, const MaskPredictorCache<S>& c,
                                   const MaskPrediction<S>& pred, const Matrix<S>& d_probs, Grads<S>& g) {
  const TokenGrid& grid = pred.grid;
  Matrix<S> d_logits(grid.size(), 2);
  for (int u = 0; u < grid.size(); ++u) {
    const S p0 = pred.probs(u, 0);
    const S p1 = pred.probs(u, 1);
    const S dot = d_probs(u, 0) * p0 + d_probs(u, 1) * p1;
    d_logits(u, 0) = p0 * (d_probs(u, 0) - dot);
    d_logits(u, 1) = p1 * (d_probs(u, 1) - dot);
  }
  Matrix<S> d_act2 = p.conv3.backward(c.act2, d_logits, g);
  Matrix<S> d_pre2 = (d_act2.array() * c.pre2.unaryExpr([](S v) { return gelu_grad(v); }).array()).matrix();
  Matrix<S> d_cols2 = p.conv2.backward(c.cols2, d_pre2, g);
  Matrix<S> d_act1 = detail::col2im3x3(d_cols2, 32, grid);
  Matrix<S> d_pre1 = (d_act1.array() * c.pre1.unaryExpr([](S v) { return gelu_grad(v); }).array()).matrix();
  Matrix<S> d_cols1 = p.conv1.backward(c.cols1, d_pre1, g);
  return detail::col2im3x3(d_cols1, 1, grid).transpose();
}

// ---------------------------------------------------------------------------
// Loss

/// Cross-entropy averaged over every pixel of every instance; probabilities
/// are clamped to [1e-7, 1 - 1e-7] before the log.
template <class S>
S alignment_loss(const std::vector<MaskPrediction<S>>& preds, const std::vector<TokenMask>& targets,
                 std::vector<Matrix<S>>* d_probs = nullptr) {
  if (preds.empty()) throw Error("alignment_loss: empty instance list");
  if (preds.size() != targets.size()) throw Error("alignment_loss: prediction/target count mismatch");
  std::size_t total = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].probs.rows() != targets[i].grid.size()) throw Error("alignment_loss: shape mismatch");
    total += std::size_t(preds[i].probs.rows());
  }
  const S lo = S(kLogClamp);
  const S hi = S(1) - S(kLogClamp);
  const S inv_n = S(1) / S(total);
  S loss = 0;
  if (d_probs) d_probs->clear();
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& pr = preds[i].probs;
    Matrix<S> dp = Matrix<S>::Zero(pr.rows(), 2);
    for (Eigen::Index u = 0; u < pr.rows(); ++u) {
      const bool fg = targets[i][int(u)];
      const int col = fg ? 1 : 0;
      const S raw = pr(u, col);
      const S p = std::clamp(raw, lo, hi);
      loss -= std::log(p);
      if (raw > lo && raw < hi) dp(u, col) = -inv_n / raw;
    }
    if (d_probs) d_probs->push_back(std::move(dp));
  }
  return loss * inv_n;
}

/// Amodal targets in the high-noise window t < 0.3, modal afterwards.
inline const TokenMask& select_supervision_mask(double t, const TokenMask& modal, const TokenMask& amodal,
                                                double window = kAmodalWindow) {
  require(modal.grid == amodal.grid, "select_supervision_mask: shape mismatch");
  return t < window ? amodal : modal;
}

}  // namespace zorder
