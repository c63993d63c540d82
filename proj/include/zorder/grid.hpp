#pragma once

// Pixel space <-> token grid <-> flat token index.

#include <cstdint>
#include <utility>
#include <vector>

#include "zorder/core.hpp"
#include "zorder/layout.hpp"

namespace zorder {

struct TokenGrid {
  int h = 1;
  int w = 1;

  TokenGrid() = default;
  TokenGrid(int rows, int cols) : h(rows), w(cols) { require(rows >= 1 && cols >= 1, "TokenGrid: empty grid"); }

  int size() const { return h * w; }
  bool operator==(const TokenGrid&) const = default;
};

struct TokenMask {
  TokenGrid grid;
  std::vector<std::uint8_t> bits;

  TokenMask() = default;
  explicit TokenMask(TokenGrid g) : grid(g), bits(std::size_t(g.size()), 0) {}

  bool operator[](int u) const { return bits[std::size_t(u)] != 0; }
  int count() const {
    int n = 0;
    for (auto b : bits) n += b;
    return n;
  }
  std::vector<int> indices() const {
    std::vector<int> out;
    for (int u = 0; u < grid.size(); ++u)
      if (bits[std::size_t(u)]) out.push_back(u);
    return out;
  }
  bool operator==(const TokenMask&) const = default;
};

/// Row-major (row, col) of token `u`.
inline std::pair<int, int> coord(int u, const TokenGrid& grid) {
  if (u < 0 || u >= grid.size()) throw Error("coord: token index out of range");
  return {u / grid.w, u % grid.w};
}

inline int flatten(int row, int col, const TokenGrid& grid) { return row * grid.w + col; }

/// Ascending token indices whose centers fall in the half-open box.
inline std::vector<int> tokens_in_box(const BoundingBox& box, const TokenGrid& grid) {
  std::vector<int> out;
  for (int r = 0; r < grid.h; ++r) {
    double cy = (r + 0.5) / grid.h;
    if (cy < box.y_min || cy >= box.y_max) continue;
    for (int c = 0; c < grid.w; ++c) {
      double cx = (c + 0.5) / grid.w;
      if (cx >= box.x_min && cx < box.x_max) out.push_back(flatten(r, c, grid));
    }
  }
  return out;
}

inline TokenMask rasterize_box(const BoundingBox& box, const TokenGrid& grid) {
  TokenMask m(grid);
  for (int u : tokens_in_box(box, grid)) m.bits[std::size_t(u)] = 1;
  return m;
}

/// Majority vote over the pixels each token covers; exact halves count as set.
inline TokenMask downsample_mask(const PixelMask& pixels, const TokenGrid& grid) {
  TokenMask m(grid);
  const int W = pixels.width();
  const int H = pixels.height();
  for (int r = 0; r < grid.h; ++r) {
    int y0 = int((long long)r * H / grid.h);
    int y1 = int((long long)(r + 1) * H / grid.h);
    for (int c = 0; c < grid.w; ++c) {
      int x0 = int((long long)c * W / grid.w);
      int x1 = int((long long)(c + 1) * W / grid.w);
      int total = 0;
      int set = 0;
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
          ++total;
          set += pixels.at(x, y) ? 1 : 0;
        }
      m.bits[std::size_t(flatten(r, c, grid))] = (total > 0 && 2 * set >= total) ? 1 : 0;
    }
  }
  return m;
}

}  // namespace zorder
