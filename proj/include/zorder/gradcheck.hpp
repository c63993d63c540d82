#pragma once

// Randomized finite-difference checks of the hand-written backward passes for
// the compositor and the alignment head.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "zorder/alignment.hpp"
#include "zorder/compositor.hpp"
#include "zorder/grid.hpp"
#include "zorder/nn.hpp"

namespace zorder {

struct CompositeCase {
  int L = 0, D = 0;
  TokenGrid grid;
  std::vector<CompositeLayer<double>> layers;
};

struct CaseOptions {
  int max_instances = 4;
  int max_side = 8;  // grid side; L <= max_side^2
  int max_dim = 8;
  double max_sigma = 3.0;
  double zero_sigma_prob = 0.15;  // per instance, all-zero density (exercises the fallback branch)
  double min_sigma = 0.0;
};

/// Random boxes on a random grid, features zero outside each box, random
/// densities and random (possibly cyclic) occluder lists.
inline CompositeCase random_composite_case(std::mt19937_64& rng, const CaseOptions& opt = {}) {
  CompositeCase c;
  std::uniform_int_distribution<int> side(1, opt.max_side);
  c.grid = TokenGrid(side(rng), side(rng));
  c.L = c.grid.size();
  c.D = std::uniform_int_distribution<int>(1, opt.max_dim)(rng);
  const int n = std::uniform_int_distribution<int>(0, opt.max_instances)(rng);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<int> ids;
  for (int i = 0; i < n; ++i) ids.push_back(i * 3 + std::uniform_int_distribution<int>(0, 2)(rng));
  std::shuffle(ids.begin(), ids.end(), rng);
  for (int i = 0; i < n; ++i) {
    CompositeLayer<double> l;
    l.id = ids[std::size_t(i)];
    const int r0 = std::uniform_int_distribution<int>(0, c.grid.h - 1)(rng);
    const int c0 = std::uniform_int_distribution<int>(0, c.grid.w - 1)(rng);
    const int r1 = std::uniform_int_distribution<int>(r0 + 1, c.grid.h)(rng);
    const int c1 = std::uniform_int_distribution<int>(c0 + 1, c.grid.w)(rng);
    l.box_mask = TokenMask(c.grid);
    for (int r = r0; r < r1; ++r)
      for (int cc = c0; cc < c1; ++cc) l.box_mask.bits[std::size_t(flatten(r, cc, c.grid))] = 1;
    l.z_hat = Matrix<double>::Zero(c.L, c.D);
    for (int u = 0; u < c.L; ++u)
      if (l.box_mask[u])
        for (int d = 0; d < c.D; ++d) l.z_hat(u, d) = normal(rng);
    l.sigma = RowVector<double>(c.D);
    const bool zero = unit(rng) < opt.zero_sigma_prob;
    for (int d = 0; d < c.D; ++d) l.sigma[d] = zero ? 0.0 : opt.min_sigma + (opt.max_sigma - opt.min_sigma) * unit(rng);
    c.layers.push_back(std::move(l));
  }
  for (auto& l : c.layers)
    for (const auto& o : c.layers)
      if (o.id != l.id && unit(rng) < 0.4) l.occluders.push_back(o.id);
  return c;
}

/// |a - n| / max(|a|, |n|, floor).
inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central difference of f with respect to *x.
inline double central_difference(double* x, double h, const std::function<double()>& f) {
  const double saved = *x;
  *x = saved + h;
  const double up = f();
  *x = saved - h;
  const double down = f();
  *x = saved;
  return (up - down) / (2 * h);
}

inline constexpr double kFdStep = 1e-5;
inline constexpr double kGradFloor = 1e-6;

template <class T>
std::vector<CompositeLayer<T>> cast_layers(const std::vector<CompositeLayer<double>>& layers) {
  std::vector<CompositeLayer<T>> out;
  for (const auto& l : layers)
    out.push_back({l.id, l.z_hat.template cast<T>(), l.box_mask, l.sigma.template cast<T>(), l.occluders});
  return out;
}

/// Max relative error of composite_grad (double) against central differences
/// of sum(R .* composite) over every feature and density entry. The reference
/// is evaluated in extended precision: densities of instances that cover a
/// token alone have gradients of order eps, which double-precision
/// differences cannot resolve. Densities stay away from zero so that no probe
/// crosses the branch boundary.
inline double composite_grad_error(std::uint64_t seed) {
  using Ext = long double;
  std::mt19937_64 rng(seed);
  CaseOptions opt;
  opt.zero_sigma_prob = 0.0;
  opt.min_sigma = 0.05;
  CompositeCase c;
  do c = random_composite_case(rng, opt);
  while (c.layers.size() < 3);
  const Matrix<double> R = random_normal<double>(c.L, c.D, 1.0, rng);
  const Matrix<Ext> R_ext = R.cast<Ext>();
  const auto fwd = composite_forward(c.layers, c.L, c.D);
  const auto g = composite_grad(c.layers, fwd, R);

  auto ext = cast_layers<Ext>(c.layers);
  const Ext h = Ext(kFdStep);
  auto probe = [&](Ext* x) {
    const Ext saved = *x;
    *x = saved + h;
    const Matrix<Ext> up = composite_forward(ext, c.L, c.D, Ext(kCompositeEps)).out;
    *x = saved - h;
    const Matrix<Ext> down = composite_forward(ext, c.L, c.D, Ext(kCompositeEps)).out;
    *x = saved;
    return double((R_ext.array() * (up - down).array()).sum() / (2 * h));
  };
  double worst = 0;
  for (std::size_t i = 0; i < ext.size(); ++i) {
    auto& l = ext[i];
    for (int u = 0; u < c.L; ++u) {
      if (!l.box_mask[u]) continue;
      for (int d = 0; d < c.D; ++d)
        worst = std::max(worst, relative_error(g.d_z_hat[i](u, d), probe(&l.z_hat(u, d)), kGradFloor));
    }
    for (int d = 0; d < c.D; ++d) worst = std::max(worst, relative_error(g.d_sigma[i][d], probe(&l.sigma[d]), kGradFloor));
  }
  return worst;
}

/// Standalone alignment head over random instance layers: time-text embedding,
/// query projection, similarity map, mask predictor and the masked
/// cross-entropy, all in double precision.
struct AlignmentFixture {
  static constexpr int kDim = 8;
  TokenGrid grid{6, 6};
  ParamStore<double> store;
  TimeTextParams<double> tt;
  Linear<double> query;
  MaskPredictorParams<double> head;
  std::vector<Matrix<double>> z_hat;
  std::vector<std::vector<int>> omega;
  std::vector<RowVector<double>> pooled;
  std::vector<TokenMask> targets;
  double t = 0.4;

  explicit AlignmentFixture(std::uint64_t seed, int instances = 2) {
    std::mt19937_64 rng(seed);
    tt = TimeTextParams<double>::create(store, "tt", kDim, 0.3, rng);
    query = Linear<double>::create(store, "query", kDim, kDim, 0.4, rng);
    head = MaskPredictorParams<double>::create(store, "head", rng);
    for (auto& p : store) p.value += random_normal<double>(p.value.rows(), p.value.cols(), 0.05, rng);
    std::uniform_int_distribution<int> pick(0, grid.size() - 1);
    std::bernoulli_distribution coin(0.5);
    for (int i = 0; i < instances; ++i) {
      Matrix<double> z = Matrix<double>::Zero(grid.size(), kDim);
      std::vector<int> om;
      TokenMask target(grid);
      for (int u = 0; u < grid.size(); ++u) {
        if (coin(rng)) {
          om.push_back(u);
          z.row(u) = random_normal<double>(1, kDim, 1.0, rng);
        }
        target.bits[std::size_t(u)] = coin(rng) ? 1 : 0;
      }
      z_hat.push_back(std::move(z));
      omega.push_back(std::move(om));
      pooled.push_back(random_normal<double>(1, kDim, 1.0, rng));
      targets.push_back(std::move(target));
    }
  }

  double loss() const { return run(nullptr, nullptr); }

  /// Returns the loss; fills parameter gradients and per-instance feature gradients.
  double run(Grads<double>* g, std::vector<Matrix<double>>* d_zhat) const {
    std::vector<TimeTextCache<double>> tcs(z_hat.size());
    std::vector<RowVector<double>> es, qs;
    std::vector<MaskPredictorCache<double>> mcs(z_hat.size());
    std::vector<MaskPrediction<double>> preds;
    for (std::size_t i = 0; i < z_hat.size(); ++i) {
      es.push_back(time_text_forward(tt, t, pooled[i], &tcs[i]));
      qs.push_back(project_query(es.back(), query));
      preds.push_back(predict_mask_forward(similarity_map(z_hat[i], qs.back(), grid), head, &mcs[i]));
    }
    std::vector<Matrix<double>> d_probs;
    const double l = alignment_loss(preds, targets, g ? &d_probs : nullptr);
    if (g) {
      d_zhat->assign(z_hat.size(), Matrix<double>::Zero(grid.size(), kDim));
      for (std::size_t i = 0; i < z_hat.size(); ++i) {
        const RowVector<double> d_s = predict_mask_backward(head, mcs[i], preds[i], d_probs[i], *g);
        const RowVector<double> dq = similarity_backward(z_hat[i], qs[i], omega[i], d_s, (*d_zhat)[i]);
        const RowVector<double> de = projection_backward(es[i], query, qs[i], dq, false, *g);
        time_text_backward(tt, tcs[i], de, *g);
      }
    }
    return l;
  }
};

/// Max relative error of the alignment-head backward pass against central
/// differences over all parameters and the live instance features.
inline double alignment_grad_error(std::uint64_t seed) {
  AlignmentFixture f(seed);
  Grads<double> g = f.store.zero_grads();
  std::vector<Matrix<double>> d_zhat;
  f.run(&g, &d_zhat);
  auto loss = [&] { return f.loss(); };
  double worst = 0;
  for (auto& p : f.store)
    for (Eigen::Index k = 0; k < p.value.size(); ++k) {
      const double num = central_difference(p.value.data() + k, kFdStep, loss);
      worst = std::max(worst, relative_error(g[p.index].data()[k], num, kGradFloor));
    }
  for (std::size_t i = 0; i < f.z_hat.size(); ++i)
    for (int u : f.omega[i])
      for (int d = 0; d < AlignmentFixture::kDim; ++d) {
        const double num = central_difference(&f.z_hat[i](u, d), kFdStep, loss);
        worst = std::max(worst, relative_error(d_zhat[i](u, d), num, kGradFloor));
      }
  return worst;
}

}  // namespace zorder
