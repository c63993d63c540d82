#pragma once

// Hand-built scenes for the metric tests and the acceptance runner.

#include <utility>
#include <vector>

#include "zorder/layout.hpp"
#include "zorder/synth.hpp"

namespace zorder::testing {

inline PixelMask block(int w, int h, int x0, int y0, int x1, int y1) {
  PixelMask m(w, h);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m.set(x, y);
  return m;
}

inline Image paint(const SceneLayout& layout, const std::vector<std::pair<int, PixelMask>>& strokes) {
  Image img(layout.width, layout.height, kBackgrounds[std::size_t(layout.global_prompt)]);
  for (const auto& [id, m] : strokes)
    for (std::size_t p = 0; p < m.size(); ++p)
      if (m[p]) img.set(int(p), caption_rgb(layout.find(id)->caption));
  return img;
}

/// 8x8 scene: A (id 0, red) in front of B (id 1, blue). A's full extent is its
/// box minus pixel (5,5), so B stays visible there inside the box intersection.
inline SceneLayout front_back_fixture() {
  SceneLayout s;
  s.width = s.height = 8;
  InstanceAnnotation a{0, {0, 0, 0.75, 0.75}, {}, {}, caption_id(0, ShapeKind::rectangle), {}};
  InstanceAnnotation b{1, {0.5, 0.5, 1, 1}, {}, {}, caption_id(2, ShapeKind::rectangle), {0}};
  a.amodal_mask = block(8, 8, 0, 0, 6, 6);
  a.amodal_mask.set(5, 5, false);
  a.modal_mask = a.amodal_mask;
  b.amodal_mask = block(8, 8, 4, 4, 8, 8);
  b.modal_mask = b.amodal_mask;
  for (std::size_t p = 0; p < 64; ++p)
    if (a.amodal_mask[p]) b.modal_mask.set_index(p, false);
  s.instances = {a, b};
  return s;
}

}  // namespace zorder::testing
