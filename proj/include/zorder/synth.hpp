#pragma once

// Procedural layered-shapes scenes with exact ground truth: image, modal and
// amodal masks, occlusion edges and categorical captions.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "zorder/image.hpp"
#include "zorder/layout.hpp"

namespace zorder {

enum class ShapeKind { rectangle = 0, circle = 1 };

inline constexpr std::array<Rgb, 8> kPalette = {{
    {230, 30, 30},    // red
    {30, 180, 40},    // green
    {30, 60, 230},    // blue
    {240, 235, 30},   // yellow
    {220, 40, 220},   // magenta
    {30, 220, 230},   // cyan
    {250, 250, 250},  // white
    {10, 10, 10},     // black
}};
inline constexpr std::array<const char*, 8> kColorNames = {"red", "green", "blue", "yellow",
                                                           "magenta", "cyan", "white", "black"};
inline constexpr std::array<Rgb, 2> kBackgrounds = {{{110, 110, 110}, {160, 160, 160}}};
inline constexpr int kCaptionCount = 16;
inline constexpr int kPromptCount = 2;

inline int caption_id(int color, ShapeKind kind) { return color * 2 + int(kind); }
inline int caption_color(int caption) { return caption / 2; }
inline ShapeKind caption_kind(int caption) { return ShapeKind(caption % 2); }
inline Rgb caption_rgb(int caption) { return kPalette.at(std::size_t(caption_color(caption))); }

inline nlohmann::json palette_json() {
  nlohmann::json j;
  j["captions"] = nlohmann::json::array();
  for (int c = 0; c < kCaptionCount; ++c) {
    const Rgb rgb = caption_rgb(c);
    j["captions"].push_back({{"caption", c},
                             {"color", kColorNames[std::size_t(caption_color(c))]},
                             {"kind", caption_kind(c) == ShapeKind::rectangle ? "rectangle" : "circle"},
                             {"rgb", {rgb.r, rgb.g, rgb.b}}});
  }
  j["prompts"] = nlohmann::json::array();
  for (int p = 0; p < kPromptCount; ++p) {
    const Rgb bg = kBackgrounds[std::size_t(p)];
    j["prompts"].push_back({{"prompt", p}, {"background", {bg.r, bg.g, bg.b}}});
  }
  return j;
}

struct ShapeSpec {
  ShapeKind kind = ShapeKind::rectangle;
  int color = 0;
  BoundingBox box;
  int depth_rank = 0;  // smaller is nearer
};

struct SynthConfig {
  int n_min = 2;
  int n_max = 4;
  int min_overlap_pairs = 1;
  int image_size = 32;
  int min_side = 8;   // pixels
  int max_side = 20;  // pixels
  int min_visible_pixels = 16;
  int max_attempts = 1000;
};

inline nlohmann::json to_json(const SynthConfig& c) {
  return {{"n_min", c.n_min},       {"n_max", c.n_max},       {"min_overlap_pairs", c.min_overlap_pairs},
          {"image_size", c.image_size}, {"min_side", c.min_side}, {"max_side", c.max_side},
          {"min_visible_pixels", c.min_visible_pixels}};
}

struct SyntheticScene {
  int id = 0;
  Image image;
  SceneLayout layout;
  bool operator==(const SyntheticScene&) const = default;
};

/// Full-extent raster of one shape. Circles are ellipses inscribed in the box.
inline PixelMask shape_mask(const ShapeSpec& s, int width, int height) {
  PixelMask box = rasterize_box_pixels(s.box, width, height);
  if (s.kind == ShapeKind::rectangle) return box;
  PixelMask m(width, height);
  const double cx = 0.5 * (s.box.x_min + s.box.x_max) * width;
  const double cy = 0.5 * (s.box.y_min + s.box.y_max) * height;
  const double rx = 0.5 * s.box.width() * width;
  const double ry = 0.5 * s.box.height() * height;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double dx = (x + 0.5 - cx) / rx;
      const double dy = (y + 0.5 - cy) / ry;
      if (dx * dx + dy * dy <= 1.0 && box.at(x, y)) m.set(x, y);
    }
  return m;
}

struct RenderResult {
  Image image;
  std::vector<PixelMask> modal;
  std::vector<PixelMask> amodal;
};

/// Painter's algorithm: far to near, each pixel owned by the nearest covering shape.
inline RenderResult render_scene(const std::vector<ShapeSpec>& shapes, int size, Rgb background = kBackgrounds[0]) {
  RenderResult r;
  r.image = Image(size, size, background);
  std::vector<std::size_t> order(shapes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return shapes[a].depth_rank > shapes[b].depth_rank; });
  std::vector<int> owner(std::size_t(size) * size, -1);
  for (const auto& s : shapes) r.amodal.push_back(shape_mask(s, size, size));
  for (std::size_t k : order) {
    for (int i = 0; i < size * size; ++i)
      if (r.amodal[k][std::size_t(i)]) owner[std::size_t(i)] = int(k);
  }
  for (std::size_t k = 0; k < shapes.size(); ++k) r.modal.emplace_back(size, size);
  for (int i = 0; i < size * size; ++i) {
    const int o = owner[std::size_t(i)];
    if (o < 0) continue;
    r.modal[std::size_t(o)].set_index(std::size_t(i), true);
    r.image.set(i, kPalette.at(std::size_t(shapes[std::size_t(o)].color)));
  }
  return r;
}

/// Edge (i, j) iff i is nearer than j and their full-extent masks share a pixel.
inline OcclusionGraph derive_occlusion_edges(const std::vector<ShapeSpec>& shapes, int size) {
  OcclusionGraph g;
  std::vector<PixelMask> amodal;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    g.add_node(int(i));
    amodal.push_back(shape_mask(shapes[i], size, size));
  }
  for (std::size_t i = 0; i < shapes.size(); ++i)
    for (std::size_t j = 0; j < shapes.size(); ++j)
      if (i != j && shapes[i].depth_rank < shapes[j].depth_rank && !(amodal[i] & amodal[j]).empty())
        g.add_edge(int(i), int(j));
  return g;
}

inline SceneLayout build_layout(const std::vector<ShapeSpec>& shapes, const RenderResult& render, int prompt) {
  SceneLayout layout;
  layout.width = render.image.width;
  layout.height = render.image.height;
  layout.global_prompt = prompt;
  const auto graph = derive_occlusion_edges(shapes, render.image.width);
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    InstanceAnnotation inst;
    inst.id = int(i);
    inst.box = shapes[i].box;
    inst.caption = caption_id(shapes[i].color, shapes[i].kind);
    inst.modal_mask = render.modal[i];
    inst.amodal_mask = render.amodal[i];
    auto occ = graph.occluder_set(int(i));
    inst.occluders.assign(occ.begin(), occ.end());
    layout.instances.push_back(std::move(inst));
  }
  return layout;
}

inline int count_overlapping_box_pairs(const std::vector<ShapeSpec>& shapes) {
  int n = 0;
  for (std::size_t i = 0; i < shapes.size(); ++i)
    for (std::size_t j = i + 1; j < shapes.size(); ++j)
      if (intersection_region(shapes[i].box, shapes[j].box)) ++n;
  return n;
}

/// Every instance keeps a visible footprint, and every occlusion edge has at
/// least one visible front pixel inside the shared full-extent region.
inline bool scene_observable(const std::vector<ShapeSpec>& shapes, const RenderResult& r, const OcclusionGraph& g,
                             int min_visible) {
  for (const auto& m : r.modal)
    if (int(m.count()) < min_visible) return false;
  for (const auto& [front, back] : g.edges()) {
    const PixelMask shared = r.amodal[std::size_t(front)] & r.amodal[std::size_t(back)];
    if ((shared & r.modal[std::size_t(front)]).empty()) return false;
  }
  (void)shapes;
  return true;
}

inline SyntheticScene generate_scene(std::uint64_t seed, const SynthConfig& cfg, int scene_id = 0) {
  if (!(1 <= cfg.n_min && cfg.n_min <= cfg.n_max && cfg.n_max <= 6)) throw Error("generate_scene: need 1 <= n_min <= n_max <= 6");
  if (cfg.max_side > cfg.image_size || cfg.min_side < 1 || cfg.min_side > cfg.max_side)
    throw Error("generate_scene: invalid shape size range");
  std::mt19937_64 rng(seed);
  const int size = cfg.image_size;
  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    const int n = std::uniform_int_distribution<int>(cfg.n_min, cfg.n_max)(rng);
    std::vector<int> colors(kPalette.size());
    std::iota(colors.begin(), colors.end(), 0);
    std::shuffle(colors.begin(), colors.end(), rng);
    std::vector<int> ranks(static_cast<std::size_t>(n));
    std::iota(ranks.begin(), ranks.end(), 0);
    std::shuffle(ranks.begin(), ranks.end(), rng);
    const int prompt = std::uniform_int_distribution<int>(0, kPromptCount - 1)(rng);

    std::vector<ShapeSpec> shapes;
    std::uniform_int_distribution<int> side(cfg.min_side, cfg.max_side);
    for (int i = 0; i < n; ++i) {
      ShapeSpec s;
      s.kind = std::bernoulli_distribution(0.5)(rng) ? ShapeKind::circle : ShapeKind::rectangle;
      s.color = colors[std::size_t(i)];
      const int w = side(rng);
      const int h = s.kind == ShapeKind::circle ? w : side(rng);
      const int x0 = std::uniform_int_distribution<int>(0, size - w)(rng);
      const int y0 = std::uniform_int_distribution<int>(0, size - h)(rng);
      s.box = {double(x0) / size, double(y0) / size, double(x0 + w) / size, double(y0 + h) / size};
      s.depth_rank = ranks[std::size_t(i)];
      shapes.push_back(s);
    }
    if (count_overlapping_box_pairs(shapes) < cfg.min_overlap_pairs) continue;
    RenderResult render = render_scene(shapes, size, kBackgrounds[std::size_t(prompt)]);
    const auto graph = derive_occlusion_edges(shapes, size);
    if (!scene_observable(shapes, render, graph, cfg.min_visible_pixels)) continue;
    SyntheticScene scene;
    scene.id = scene_id;
    scene.layout = build_layout(shapes, render, prompt);
    scene.image = std::move(render.image);
    return scene;
  }
  throw Error("generate_scene: rejection budget exhausted");
}

/// Independent per-scene seed stream (splitmix64 of the dataset seed and index).
inline std::uint64_t scene_seed(std::uint64_t dataset_seed, std::uint64_t index) {
  std::uint64_t z = dataset_seed + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::vector<SyntheticScene> generate_dataset(int count, std::uint64_t seed, const SynthConfig& cfg) {
  std::vector<SyntheticScene> scenes;
  scenes.reserve(std::size_t(count));
  for (int k = 0; k < count; ++k) scenes.push_back(generate_scene(scene_seed(seed, std::uint64_t(k)), cfg, k));
  return scenes;
}

// ---------------------------------------------------------------------------
// Dataset directory: manifest.json, palette.json, scene_<id>.json, scene_<id>.png

inline std::string scene_stem(int id) {
  std::ostringstream s;
  s << "scene_" << std::setw(5) << std::setfill('0') << id;
  return s.str();
}

namespace detail {
inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out << text;
}
inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("missing file " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}
}  // namespace detail

inline void export_dataset(const std::vector<SyntheticScene>& scenes, const std::filesystem::path& dir,
                           const nlohmann::json& config_echo = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["count"] = scenes.size();
  manifest["scene_ids"] = nlohmann::json::array();
  for (const auto& s : scenes) manifest["scene_ids"].push_back(s.id);
  manifest["config"] = config_echo;
  detail::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  detail::write_text(dir / "palette.json", palette_json().dump(2) + "\n");
  for (const auto& s : scenes) {
    detail::write_text(dir / (scene_stem(s.id) + ".json"), serialize_layout(s.layout) + "\n");
    write_png(dir / (scene_stem(s.id) + ".png"), s.image);
  }
}

inline std::vector<SyntheticScene> import_dataset(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(detail::read_text(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("corrupt manifest.json in " + dir.string() + ": " + e.what());
  }
  if (!manifest.contains("scene_ids") || !manifest["scene_ids"].is_array())
    throw ParseError("manifest.json: missing field scene_ids");
  std::vector<SyntheticScene> scenes;
  for (const auto& jid : manifest["scene_ids"]) {
    const int id = jid.get<int>();
    SyntheticScene s;
    s.id = id;
    try {
      s.layout = parse_layout(detail::read_text(dir / (scene_stem(id) + ".json")));
      s.image = read_png(dir / (scene_stem(id) + ".png"));
    } catch (const std::exception& e) {
      throw ParseError("scene " + std::to_string(id) + ": " + e.what());
    }
    if (s.image.width != s.layout.width || s.image.height != s.layout.height)
      throw ParseError("scene " + std::to_string(id) + ": image size does not match layout");
    scenes.push_back(std::move(s));
  }
  if (manifest.contains("count") && manifest["count"].get<std::size_t>() != scenes.size())
    throw ParseError("manifest.json: count does not match scene_ids");
  return scenes;
}

}  // namespace zorder
