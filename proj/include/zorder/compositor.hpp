#pragma once

// Volumetric Z-order compositor over per-instance feature layers.
//
// Every instance i carries a per-channel density sigma_i. Inside its box the
// opacity is 1 - exp(-sigma_i); the transmittance is attenuated by the summed
// density of the occluders covering the token; the rendering weight is T * alpha.
// Tokens with positive total weight get a normalized weighted average, tokens
// with zero total weight fall back to a plain mean of the covering layers.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <vector>

#include "zorder/core.hpp"
#include "zorder/grid.hpp"

namespace zorder {

inline constexpr double kCompositeEps = 1e-8;

template <class S>
void check_density(const RowVector<S>& sigma) {
  for (Eigen::Index d = 0; d < sigma.size(); ++d)
    if (!std::isfinite(double(sigma[d])) || sigma[d] < S(0)) throw Error("density must be finite and non-negative");
}

template <class S>
Matrix<S> opacity(const RowVector<S>& sigma, const TokenMask& box_mask) {
  check_density(sigma);
  const int L = box_mask.grid.size();
  RowVector<S> a = (S(1) - (-sigma.array()).exp()).matrix();
  Matrix<S> alpha = Matrix<S>::Zero(L, sigma.size());
  for (int u = 0; u < L; ++u)
    if (box_mask[u]) alpha.row(u) = a;
  return alpha;
}

template <class S>
struct OccluderTerm {
  RowVector<S> sigma;
  TokenMask box_mask;
};

/// exp(-sum_j sigma_j * mask_j); identically one for an empty occluder list.
template <class S>
Matrix<S> transmittance(const std::vector<OccluderTerm<S>>& occluders, int L, int D) {
  Matrix<S> log_t = Matrix<S>::Zero(L, D);
  for (const auto& occ : occluders) {
    check_density(occ.sigma);
    if (occ.sigma.size() != D || occ.box_mask.grid.size() != L) throw Error("transmittance: dimension mismatch");
    for (int u = 0; u < L; ++u)
      if (occ.box_mask[u]) log_t.row(u) -= occ.sigma;
  }
  return log_t.array().exp().matrix();
}

template <class S>
Matrix<S> render_weights(const Matrix<S>& alpha, const Matrix<S>& trans) {
  return (alpha.array() * trans.array()).matrix();
}

template <class S>
struct InstanceFeatureLayer {
  int id = 0;
  Matrix<S> z_hat;  // L x D, zero outside omega
  std::vector<int> omega;
  TokenMask box_mask;
};

namespace detail {

inline std::vector<std::size_t> id_order(const std::vector<int>& ids) {
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ids[a] < ids[b]; });
  return order;
}

}  // namespace detail

/// Hybrid aggregation of `layers` under precomputed rendering `weights`.
template <class S>
Matrix<S> composite(const std::vector<InstanceFeatureLayer<S>>& layers, const std::vector<Matrix<S>>& weights,
                    S eps = S(kCompositeEps)) {
  require(layers.size() == weights.size(), "composite: layer/weight count mismatch");
  require(eps > S(0), "composite: eps must be positive");
  if (layers.empty()) return {};
  const Eigen::Index L = layers.front().z_hat.rows();
  const Eigen::Index D = layers.front().z_hat.cols();
  std::vector<int> ids;
  for (const auto& l : layers) {
    require(l.z_hat.rows() == L && l.z_hat.cols() == D, "composite: layer shape mismatch");
    ids.push_back(l.id);
  }
  for (const auto& w : weights) require(w.rows() == L && w.cols() == D, "composite: weight shape mismatch");
  const auto order = detail::id_order(ids);

  Matrix<S> wsum = Matrix<S>::Zero(L, D);
  Matrix<S> num = Matrix<S>::Zero(L, D);
  Matrix<S> fallback = Matrix<S>::Zero(L, D);
  std::vector<int> cover(std::size_t(L), 0);
  for (std::size_t k : order) {
    wsum += weights[k];
    num.array() += weights[k].array() * layers[k].z_hat.array();
    for (Eigen::Index u = 0; u < L; ++u)
      if (layers[k].box_mask[int(u)]) {
        fallback.row(u) += layers[k].z_hat.row(u);
        ++cover[std::size_t(u)];
      }
  }
  Matrix<S> out(L, D);
  for (Eigen::Index u = 0; u < L; ++u) {
    const S inv_cover = S(1) / S(std::max(1, cover[std::size_t(u)]));
    for (Eigen::Index d = 0; d < D; ++d)
      out(u, d) = wsum(u, d) > S(0) ? num(u, d) / (wsum(u, d) + eps) : fallback(u, d) * inv_cover;
  }
  return out;
}

template <class S>
Matrix<S> residual_merge(const Matrix<S>& z_in, const Matrix<S>& z_out) {
  if (z_in.rows() != z_out.rows() || z_in.cols() != z_out.cols()) throw Error("residual_merge: shape mismatch");
  return z_in + z_out;
}

/// One instance as seen by the full opacity -> transmittance -> composite chain.
template <class S>
struct CompositeLayer {
  int id = 0;
  Matrix<S> z_hat;
  TokenMask box_mask;
  RowVector<S> sigma;
  std::vector<int> occluders;  // ids of instances in front
};

template <class S>
struct CompositeForward {
  Matrix<S> out;
  std::vector<Matrix<S>> alpha;
  std::vector<Matrix<S>> trans;
  std::vector<Matrix<S>> weight;
  Matrix<S> weight_sum;
  std::vector<int> cover;                        // |S_p| per token
  std::vector<std::vector<std::size_t>> occ_idx;  // occluder positions in the input list
};

template <class S>
CompositeForward<S> composite_forward(const std::vector<CompositeLayer<S>>& layers, int L, int D,
                                      S eps = S(kCompositeEps)) {
  CompositeForward<S> f;
  std::map<int, std::size_t> pos;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    if (!pos.emplace(layers[k].id, k).second) throw Error("composite: duplicate instance id");
    if (layers[k].z_hat.rows() != L || layers[k].z_hat.cols() != D || layers[k].sigma.size() != D ||
        layers[k].box_mask.grid.size() != L)
      throw Error("composite: dimension mismatch");
  }
  std::vector<InstanceFeatureLayer<S>> feature_layers;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& l = layers[k];
    std::vector<OccluderTerm<S>> occ;
    std::vector<std::size_t> idx;
    std::vector<int> sorted_occ = l.occluders;
    std::sort(sorted_occ.begin(), sorted_occ.end());
    for (int o : sorted_occ) {
      auto it = pos.find(o);
      if (it == pos.end()) throw Error("composite: unknown occluder id " + std::to_string(o));
      if (o == l.id) throw Error("composite: self-occlusion");
      occ.push_back({layers[it->second].sigma, layers[it->second].box_mask});
      idx.push_back(it->second);
    }
    f.alpha.push_back(opacity(l.sigma, l.box_mask));
    f.trans.push_back(transmittance(occ, L, D));
    f.weight.push_back(render_weights(f.alpha.back(), f.trans.back()));
    f.occ_idx.push_back(std::move(idx));
    feature_layers.push_back({l.id, l.z_hat, l.box_mask.indices(), l.box_mask});
  }
  if (layers.empty()) {
    f.out = Matrix<S>::Zero(L, D);
    f.weight_sum = Matrix<S>::Zero(L, D);
    f.cover.assign(std::size_t(L), 0);
    return f;
  }
  f.out = composite(feature_layers, f.weight, eps);
  f.weight_sum = Matrix<S>::Zero(L, D);
  std::vector<int> ids;
  for (const auto& l : layers) ids.push_back(l.id);
  for (std::size_t k : detail::id_order(ids)) f.weight_sum += f.weight[k];
  f.cover.assign(std::size_t(L), 0);
  for (const auto& l : layers)
    for (int u = 0; u < L; ++u) f.cover[std::size_t(u)] += l.box_mask[u] ? 1 : 0;
  return f;
}

template <class S>
struct CompositeGradient {
  std::vector<Matrix<S>> d_z_hat;
  std::vector<RowVector<S>> d_sigma;
};

/// Analytic backward pass of composite_forward. The branch chosen per token-channel
/// in the forward pass is held fixed, so the fallback mean contributes no density gradient.
template <class S>
CompositeGradient<S> composite_grad(const std::vector<CompositeLayer<S>>& layers, const CompositeForward<S>& fwd,
                                    const Matrix<S>& upstream, S eps = S(kCompositeEps)) {
  const Eigen::Index L = fwd.out.rows();
  const Eigen::Index D = fwd.out.cols();
  if (upstream.rows() != L || upstream.cols() != D) throw Error("composite_grad: shape mismatch");
  const std::size_t n = layers.size();
  CompositeGradient<S> g;
  g.d_z_hat.assign(n, Matrix<S>::Zero(L, D));
  g.d_sigma.assign(n, RowVector<S>::Zero(D));
  if (n == 0) return g;

  const auto active = (fwd.weight_sum.array() > S(0)).template cast<S>();
  const Matrix<S> inv_den = (S(1) / (fwd.weight_sum.array() + eps)).matrix();
  Matrix<S> fallback_scale(L, D);
  for (Eigen::Index u = 0; u < L; ++u)
    fallback_scale.row(u).setConstant(S(1) / S(std::max(1, fwd.cover[std::size_t(u)])));

  std::vector<Matrix<S>> g_w(n);
  for (std::size_t i = 0; i < n; ++i) {
    g_w[i] = (upstream.array() * active * (layers[i].z_hat.array() - fwd.out.array()) * inv_den.array()).matrix();
    Matrix<S> dz = (upstream.array() * active * fwd.weight[i].array() * inv_den.array()).matrix();
    for (Eigen::Index u = 0; u < L; ++u)
      if (layers[i].box_mask[int(u)])
        dz.row(u).array() +=
            upstream.row(u).array() * (S(1) - active.row(u)) * fallback_scale.row(u).array();
    g.d_z_hat[i] = std::move(dz);
  }
  for (std::size_t i = 0; i < n; ++i) {
    // through alpha_i
    const RowVector<S> decay = (-layers[i].sigma.array()).exp().matrix();
    for (Eigen::Index u = 0; u < L; ++u) {
      if (!layers[i].box_mask[int(u)]) continue;
      g.d_sigma[i].array() += g_w[i].row(u).array() * fwd.trans[i].row(u).array() * decay.array();
    }
    // through T_i, attributed to each occluder
    for (std::size_t j : fwd.occ_idx[i]) {
      for (Eigen::Index u = 0; u < L; ++u) {
        if (!layers[j].box_mask[int(u)]) continue;
        g.d_sigma[j].array() -= g_w[i].row(u).array() * fwd.weight[i].row(u).array();
      }
    }
  }
  return g;
}

}  // namespace zorder
