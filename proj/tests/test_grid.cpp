#include <gtest/gtest.h>

#include <random>

#include "zorder/grid.hpp"

using namespace zorder;

TEST(Grid, CoordRowMajor) {
  const TokenGrid g(8, 8);
  EXPECT_EQ(coord(0, g), std::make_pair(0, 0));
  EXPECT_EQ(coord(63, g), std::make_pair(7, 7));
  EXPECT_EQ(coord(18, g), std::make_pair(2, 2));
  EXPECT_THROW(coord(64, g), Error);
  EXPECT_THROW(coord(-1, g), Error);
  const TokenGrid r(3, 5);
  for (int u = 0; u < r.size(); ++u) {
    const auto [row, col] = coord(u, r);
    EXPECT_EQ(flatten(row, col, r), u);
  }
}

TEST(Grid, TokensInBox) {
  const TokenGrid g(8, 8);
  EXPECT_EQ(tokens_in_box({0, 0, 1, 1}, g).size(), 64u);
  EXPECT_EQ(tokens_in_box({0.25, 0.25, 0.5, 0.5}, g), (std::vector<int>{18, 19, 26, 27}));
  EXPECT_TRUE(tokens_in_box({0.01, 0.01, 0.02, 0.02}, g).empty());
}

TEST(Grid, RasterizeBox) {
  const TokenGrid g(8, 8);
  const auto full = rasterize_box({0, 0, 1, 1}, g);
  EXPECT_EQ(full.count(), 64);
  EXPECT_EQ(rasterize_box({0.01, 0.01, 0.02, 0.02}, g).count(), 0);
  const auto m = rasterize_box({0.25, 0.25, 0.5, 0.5}, g);
  EXPECT_EQ(m.indices(), (std::vector<int>{18, 19, 26, 27}));
}

TEST(Grid, BoxMonotonicityAndPopcount) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  const TokenGrid g(8, 6);
  for (int k = 0; k < 300; ++k) {
    double a = u(rng), b = u(rng), c = u(rng), d = u(rng);
    BoundingBox outer{std::min(a, b), std::min(c, d), std::max(a, b), std::max(c, d)};
    BoundingBox inner{outer.x_min + u(rng) * outer.width() / 2, outer.y_min + u(rng) * outer.height() / 2,
                      outer.x_max - u(rng) * outer.width() / 2, outer.y_max - u(rng) * outer.height() / 2};
    const auto in = tokens_in_box(inner, g);
    const auto out = tokens_in_box(outer, g);
    for (int t : in) EXPECT_TRUE(std::binary_search(out.begin(), out.end(), t));
    EXPECT_EQ(rasterize_box(outer, g).count(), int(out.size()));
  }
}

TEST(Grid, DownsampleMajorityWithTieToSet) {
  const TokenGrid g(2, 2);
  PixelMask ones(4, 4), zeros(4, 4);
  for (std::size_t i = 0; i < 16; ++i) ones.set_index(i, true);
  EXPECT_EQ(downsample_mask(ones, g).count(), 4);
  EXPECT_EQ(downsample_mask(zeros, g).count(), 0);
  PixelMask half(4, 4);
  half.set(0, 0);
  half.set(1, 0);  // 2 of the 4 pixels of token 0
  half.set(2, 2);  // 1 of the 4 pixels of token 3
  const auto m = downsample_mask(half, g);
  EXPECT_TRUE(m[0]);
  EXPECT_FALSE(m[1]);
  EXPECT_FALSE(m[3]);
}

TEST(Grid, DownsampleUnevenPartition) {
  // 5x5 pixels over a 2x2 grid: rows/cols split as [0,2) and [2,5).
  PixelMask p(5, 5);
  for (int y = 2; y < 5; ++y)
    for (int x = 2; x < 5; ++x) p.set(x, y);
  const auto m = downsample_mask(p, TokenGrid(2, 2));
  EXPECT_EQ(m.indices(), std::vector<int>{3});
}
