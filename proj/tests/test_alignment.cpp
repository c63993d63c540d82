#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support/head_overfit.hpp"
#include "support/oracles.hpp"
#include "zorder/alignment.hpp"

using namespace zorder;
using namespace zorder::testing;

TEST(Alignment, GradientMatchesFiniteDifferences) {
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) worst = std::max(worst, alignment_grad_error(seed));
  EXPECT_LT(worst, 1e-4);
}

TEST(Alignment, UniformPredictorLossIsLn2) {
  const TokenGrid g(3, 4);
  std::mt19937_64 rng(1);
  std::vector<MaskPrediction<double>> preds;
  std::vector<TokenMask> targets;
  for (int i = 0; i < 3; ++i) {
    preds.push_back({g, Matrix<double>::Constant(g.size(), 2, 0.5)});
    TokenMask t(g);
    for (auto& b : t.bits) b = rng() % 2;
    targets.push_back(t);
  }
  EXPECT_NEAR(alignment_loss(preds, targets), std::log(2.0), 1e-9);
}

TEST(Alignment, LossGradientAndClamp) {
  const TokenGrid g(1, 2);
  TokenMask t(g);
  t.bits = {1, 0};
  Matrix<double> probs(2, 2);
  probs << 0.2, 0.8, 1.0, 0.0;  // token 1 is a clamped perfect background prediction
  std::vector<Matrix<double>> d;
  const double l = alignment_loss<double>({{g, probs}}, {t}, &d);
  EXPECT_NEAR(l, (-std::log(0.8) - std::log(1.0 - kLogClamp)) / 2, 1e-12);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_NEAR(d[0](0, 1), -0.5 / 0.8, 1e-12);
  EXPECT_EQ(d[0](1, 0), 0.0);
  EXPECT_EQ(d[0](0, 0), 0.0);
}

TEST(Alignment, LossRejectsMismatches) {
  const TokenGrid g(2, 2);
  EXPECT_THROW(alignment_loss<double>({}, {}), Error);
  EXPECT_THROW(alignment_loss<double>({{g, Matrix<double>::Constant(4, 2, 0.5)}}, {}), Error);
  EXPECT_THROW(alignment_loss<double>({{g, Matrix<double>::Constant(3, 2, 0.5)}}, {TokenMask(g)}), Error);
}

TEST(Alignment, SimilarityIsCosine) {
  const TokenGrid g(1, 3);
  Matrix<double> z(3, 2);
  z << 1, 0, 0, 2, 0, 0;
  RowVector<double> q(2);
  q << 3, 0;
  const auto s = similarity_map<double>(z, q, g);
  EXPECT_NEAR(s.values[0], 1.0, 1e-7);
  EXPECT_NEAR(s.values[1], 0.0, 1e-12);
  EXPECT_EQ(s.values[2], 0.0);
  for (int u = 0; u < 3; ++u) EXPECT_LE(std::abs(s.values[u]), 1.0);
  EXPECT_THROW(similarity_map<double>(z, RowVector<double>::Zero(2), g), Error);
}

TEST(Alignment, MaskPredictionIsDistribution) {
  std::mt19937_64 rng(2);
  ParamStore<double> store;
  const auto head = MaskPredictorParams<double>::create(store, "head", rng);
  const TokenGrid g(5, 7);
  const SimilarityMap<double> s{g, random_normal<double>(1, g.size(), 0.5, rng)};
  const auto p = predict_mask(s, head);
  EXPECT_EQ(p.probs.rows(), g.size());
  for (int u = 0; u < g.size(); ++u) {
    EXPECT_GE(p.probs(u, 0), 0.0);
    EXPECT_NEAR(p.probs.row(u).sum(), 1.0, 1e-12);
  }
}

TEST(Alignment, SupervisionWindow) {
  const TokenGrid g(2, 2);
  TokenMask modal(g), amodal(g);
  modal.bits = {1, 0, 0, 0};
  amodal.bits = {1, 1, 0, 0};
  EXPECT_EQ(&select_supervision_mask(0.0, modal, amodal), &amodal);
  EXPECT_EQ(&select_supervision_mask(0.29, modal, amodal), &amodal);
  EXPECT_EQ(&select_supervision_mask(0.3, modal, amodal), &modal);
  EXPECT_EQ(&select_supervision_mask(0.9, modal, amodal), &modal);
  EXPECT_THROW(select_supervision_mask(0.5, modal, TokenMask(TokenGrid(1, 4))), Error);
}

TEST(Alignment, TimeEmbedding) {
  const auto e0 = sinusoidal_embedding<double>(0.0);
  EXPECT_EQ(e0.size(), 2 * kTimeFrequencies);
  for (int k = 0; k < kTimeFrequencies; ++k) {
    EXPECT_EQ(e0[k], 1.0);
    EXPECT_EQ(e0[kTimeFrequencies + k], 0.0);
  }
  const auto e = sinusoidal_embedding<double>(0.37);
  for (int k = 0; k < kTimeFrequencies; ++k)
    EXPECT_NEAR(e[k] * e[k] + e[kTimeFrequencies + k] * e[kTimeFrequencies + k], 1.0, 1e-12);
  std::mt19937_64 rng(3);
  ParamStore<double> store;
  const auto tt = TimeTextParams<double>::create(store, "tt", 8, 0.2, rng);
  EXPECT_THROW(time_text_embed<double>(1.5, RowVector<double>::Zero(8), tt), Error);
  EXPECT_THROW(time_text_embed<double>(-0.1, RowVector<double>::Zero(8), tt), Error);
}

TEST(Alignment, DensityProjectionIsPositive) {
  std::mt19937_64 rng(4);
  ParamStore<double> store;
  const auto proj = Linear<double>::create(store, "density", 8, 8, 2.0, rng);
  for (int k = 0; k < 20; ++k) {
    const RowVector<double> e = random_normal<double>(1, 8, 3.0, rng);
    EXPECT_TRUE((project_density(e, proj).array() > 0).all());
  }
}

TEST(Alignment, HeadAloneOverfitsOneScene) {
  const auto r = overfit_alignment_head(1, 500);
  EXPECT_LT(r.last_loss, r.first_loss);
  EXPECT_GE(r.accuracy, 0.99);
}
