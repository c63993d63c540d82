#pragma once

// Layout condition types: per-instance mask, amodal box, occluders and caption,
// plus the scene-wide prompt. Also the occlusion graph and the JSON wire format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "zorder/core.hpp"

namespace zorder {

struct BoundingBox {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 1.0;
  double y_max = 1.0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }

  bool finite() const {
    return std::isfinite(x_min) && std::isfinite(y_min) && std::isfinite(x_max) && std::isfinite(y_max);
  }
  bool ordered() const { return x_min < x_max && y_min < y_max; }
  bool in_unit_square() const { return x_min >= 0.0 && y_min >= 0.0 && x_max <= 1.0 && y_max <= 1.0; }
  bool valid() const { return finite() && ordered() && in_unit_square(); }

  /// True when `other` lies inside this box (closed containment).
  bool contains(const BoundingBox& other) const {
    return other.x_min >= x_min && other.y_min >= y_min && other.x_max <= x_max && other.y_max <= y_max;
  }

  bool operator==(const BoundingBox&) const = default;
};

/// Axis-aligned intersection, or nullopt when it has no area.
inline std::optional<BoundingBox> intersection_region(const BoundingBox& a, const BoundingBox& b) {
  BoundingBox r{std::max(a.x_min, b.x_min), std::max(a.y_min, b.y_min), std::min(a.x_max, b.x_max),
                std::min(a.y_max, b.y_max)};
  if (!(r.x_min < r.x_max && r.y_min < r.y_max)) return std::nullopt;
  return r;
}

/// Binary pixel grid, row-major.
class PixelMask {
 public:
  PixelMask() = default;
  PixelMask(int width, int height) : width_(width), height_(height), bits_(std::size_t(width) * height, 0) {
    require(width >= 0 && height >= 0, "PixelMask: negative size");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return bits_.size(); }

  bool at(int x, int y) const { return bits_[std::size_t(y) * width_ + x] != 0; }
  void set(int x, int y, bool v = true) { bits_[std::size_t(y) * width_ + x] = v ? 1 : 0; }
  bool operator[](std::size_t i) const { return bits_[i] != 0; }
  void set_index(std::size_t i, bool v) { bits_[i] = v ? 1 : 0; }

  std::size_t count() const { return std::size_t(std::count(bits_.begin(), bits_.end(), std::uint8_t{1})); }
  bool empty() const { return count() == 0; }

  bool same_shape(const PixelMask& o) const { return width_ == o.width_ && height_ == o.height_; }

  bool subset_of(const PixelMask& o) const {
    if (!same_shape(o)) return false;
    for (std::size_t i = 0; i < bits_.size(); ++i)
      if (bits_[i] && !o.bits_[i]) return false;
    return true;
  }

  PixelMask operator&(const PixelMask& o) const { return combine(o, [](bool a, bool b) { return a && b; }); }
  PixelMask operator|(const PixelMask& o) const { return combine(o, [](bool a, bool b) { return a || b; }); }

  bool operator==(const PixelMask&) const = default;

  /// Row-major run-length code: alternating run lengths starting with a 0-run.
  std::string to_rle() const {
    std::ostringstream out;
    std::uint8_t current = 0;
    std::size_t run = 0;
    bool first = true;
    auto flush = [&] {
      if (!first) out << ',';
      out << run;
      first = false;
    };
    for (std::uint8_t b : bits_) {
      if (b != current) {
        flush();
        current = b;
        run = 0;
      }
      ++run;
    }
    flush();
    return out.str();
  }

  static PixelMask from_rle(std::string_view rle, int width, int height) {
    PixelMask m(width, height);
    std::size_t pos = 0;
    std::uint8_t value = 0;
    std::size_t start = 0;
    while (start <= rle.size()) {
      std::size_t end = rle.find(',', start);
      if (end == std::string_view::npos) end = rle.size();
      std::string_view tok = rle.substr(start, end - start);
      if (tok.empty() || tok.find_first_not_of("0123456789") != std::string_view::npos)
        throw ParseError("invalid RLE token '" + std::string(tok) + "'");
      std::size_t run = std::stoull(std::string(tok));
      if (pos + run > m.size()) throw ParseError("RLE runs exceed mask size");
      std::fill_n(m.bits_.begin() + std::ptrdiff_t(pos), run, value);
      pos += run;
      value ^= 1;
      start = end + 1;
    }
    if (pos != m.size()) throw ParseError("RLE runs do not cover the mask");
    return m;
  }

 private:
  template <class F>
  PixelMask combine(const PixelMask& o, F f) const {
    require(same_shape(o), "PixelMask: shape mismatch");
    PixelMask r(width_, height_);
    for (std::size_t i = 0; i < bits_.size(); ++i) r.bits_[i] = f(bits_[i] != 0, o.bits_[i] != 0) ? 1 : 0;
    return r;
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// Pixel-resolution raster of a box: pixel centers inside the half-open box.
inline PixelMask rasterize_box_pixels(const BoundingBox& box, int width, int height) {
  PixelMask m(width, height);
  for (int y = 0; y < height; ++y) {
    double cy = (y + 0.5) / height;
    if (cy < box.y_min || cy >= box.y_max) continue;
    for (int x = 0; x < width; ++x) {
      double cx = (x + 0.5) / width;
      if (cx >= box.x_min && cx < box.x_max) m.set(x, y);
    }
  }
  return m;
}

struct InstanceAnnotation {
  int id = 0;
  BoundingBox box;
  PixelMask modal_mask;
  PixelMask amodal_mask;
  int caption = 0;
  std::vector<int> occluders;

  bool operator==(const InstanceAnnotation&) const = default;
};

struct SceneLayout {
  int width = 0;
  int height = 0;
  int global_prompt = 0;
  std::vector<InstanceAnnotation> instances;

  const InstanceAnnotation* find(int id) const {
    for (const auto& inst : instances)
      if (inst.id == id) return &inst;
    return nullptr;
  }

  bool operator==(const SceneLayout&) const = default;
};

enum class OccluderMode { direct, transitive };

/// Directed "front occludes back" relation over instance ids.
class OcclusionGraph {
 public:
  OcclusionGraph() = default;
  explicit OcclusionGraph(std::set<int> nodes) : nodes_(std::move(nodes)) {}

  static OcclusionGraph from_layout(const SceneLayout& layout) {
    OcclusionGraph g;
    for (const auto& inst : layout.instances) g.nodes_.insert(inst.id);
    for (const auto& inst : layout.instances)
      for (int front : inst.occluders) g.edges_.insert({front, inst.id});
    return g;
  }

  void add_node(int id) { nodes_.insert(id); }

  void add_edge(int front, int back) {
    require(front != back, "OcclusionGraph: self-edge");
    nodes_.insert(front);
    nodes_.insert(back);
    edges_.insert({front, back});
  }

  bool has_node(int id) const { return nodes_.count(id) != 0; }
  bool has_edge(int front, int back) const { return edges_.count({front, back}) != 0; }
  const std::set<std::pair<int, int>>& edges() const { return edges_; }
  const std::set<int>& nodes() const { return nodes_; }

  std::set<int> occluder_set(int id, OccluderMode mode = OccluderMode::direct) const {
    if (!has_node(id)) throw Error("occluder_set: unknown instance id " + std::to_string(id));
    std::set<int> out;
    if (mode == OccluderMode::direct) {
      for (const auto& [front, back] : edges_)
        if (back == id) out.insert(front);
      return out;
    }
    std::vector<int> stack{id};
    std::set<int> seen{id};
    while (!stack.empty()) {
      int cur = stack.back();
      stack.pop_back();
      for (const auto& [front, back] : edges_) {
        if (back != cur || seen.count(front)) continue;
        seen.insert(front);
        out.insert(front);
        stack.push_back(front);
      }
    }
    out.erase(id);
    return out;
  }

  bool has_cycle() const {
    std::map<int, int> state;  // 0 unvisited, 1 on stack, 2 done
    std::function<bool(int)> visit = [&](int n) {
      state[n] = 1;
      for (const auto& [front, back] : edges_) {
        if (front != n) continue;
        int s = state[back];
        if (s == 1) return true;
        if (s == 0 && visit(back)) return true;
      }
      state[n] = 2;
      return false;
    };
    for (int n : nodes_)
      if (state[n] == 0 && visit(n)) return true;
    return false;
  }

 private:
  std::set<int> nodes_;
  std::set<std::pair<int, int>> edges_;
};

struct Finding {
  std::string kind;
  int instance = -1;
  std::string detail;
};

struct ValidationReport {
  std::vector<Finding> errors;
  std::vector<Finding> warnings;

  bool valid() const { return errors.empty(); }
  bool empty() const { return errors.empty() && warnings.empty(); }
  bool has_error(std::string_view kind) const {
    return std::any_of(errors.begin(), errors.end(), [&](const Finding& f) { return f.kind == kind; });
  }
  bool has_warning(std::string_view kind) const {
    return std::any_of(warnings.begin(), warnings.end(), [&](const Finding& f) { return f.kind == kind; });
  }
};

inline ValidationReport validate_layout(const SceneLayout& layout) {
  ValidationReport r;
  auto err = [&](std::string kind, int id, std::string detail = {}) {
    r.errors.push_back({std::move(kind), id, std::move(detail)});
  };
  if (layout.width <= 0 || layout.height <= 0) err("bad image size", -1);

  std::set<int> ids;
  for (const auto& inst : layout.instances)
    if (!ids.insert(inst.id).second) err("duplicate id", inst.id);

  for (const auto& inst : layout.instances) {
    const auto& b = inst.box;
    if (!b.finite())
      err("box not finite", inst.id);
    else if (!b.ordered())
      err("box not ordered", inst.id);
    else if (!b.in_unit_square())
      err("box out of bounds", inst.id);

    for (int o : inst.occluders) {
      if (o == inst.id)
        err("self-occlusion", inst.id);
      else if (!ids.count(o))
        err("dangling occluder", inst.id, std::to_string(o));
    }

    bool modal_ok = inst.modal_mask.width() == layout.width && inst.modal_mask.height() == layout.height;
    bool amodal_ok = inst.amodal_mask.width() == layout.width && inst.amodal_mask.height() == layout.height;
    if (!modal_ok || !amodal_ok) {
      err("mask size mismatch", inst.id);
      continue;
    }
    if (!inst.modal_mask.subset_of(inst.amodal_mask)) err("modal not within amodal", inst.id);
    if (b.valid() && !inst.amodal_mask.subset_of(rasterize_box_pixels(b, layout.width, layout.height)))
      err("amodal outside box", inst.id);
  }

  OcclusionGraph g;
  for (int id : ids) g.add_node(id);
  for (const auto& inst : layout.instances)
    for (int o : inst.occluders)
      if (o != inst.id && ids.count(o)) g.add_edge(o, inst.id);
  if (g.has_cycle()) r.warnings.push_back({"cyclic occlusion", -1, {}});
  return r;
}

// ---------------------------------------------------------------------------
// JSON wire format

namespace detail {

inline const nlohmann::json& field(const nlohmann::json& obj, const char* name) {
  if (!obj.is_object()) throw ParseError(std::string("expected object containing ") + name);
  auto it = obj.find(name);
  if (it == obj.end()) throw ParseError(std::string("missing field ") + name);
  return *it;
}

inline int int_field(const nlohmann::json& obj, const char* name) {
  const auto& v = field(obj, name);
  if (!v.is_number_integer()) throw ParseError(std::string("field ") + name + " must be an integer");
  return v.get<int>();
}

}  // namespace detail

inline nlohmann::json layout_to_json(const SceneLayout& layout) {
  nlohmann::json j;
  j["width"] = layout.width;
  j["height"] = layout.height;
  j["global_prompt"] = layout.global_prompt;
  j["instances"] = nlohmann::json::array();
  for (const auto& inst : layout.instances) {
    nlohmann::json ji;
    ji["id"] = inst.id;
    ji["box"] = {inst.box.x_min, inst.box.y_min, inst.box.x_max, inst.box.y_max};
    ji["caption"] = inst.caption;
    ji["occluders"] = inst.occluders;
    ji["modal_mask"] = inst.modal_mask.to_rle();
    ji["amodal_mask"] = inst.amodal_mask.to_rle();
    j["instances"].push_back(std::move(ji));
  }
  return j;
}

inline SceneLayout layout_from_json(const nlohmann::json& j) {
  using detail::field;
  using detail::int_field;
  SceneLayout layout;
  layout.width = int_field(j, "width");
  layout.height = int_field(j, "height");
  if (layout.width <= 0 || layout.height <= 0) throw ParseError("field width/height must be positive");
  layout.global_prompt = int_field(j, "global_prompt");
  const auto& insts = field(j, "instances");
  if (!insts.is_array()) throw ParseError("field instances must be an array");
  for (const auto& ji : insts) {
    InstanceAnnotation inst;
    inst.id = int_field(ji, "id");
    const auto& box = field(ji, "box");
    if (!box.is_array() || box.size() != 4 || !std::all_of(box.begin(), box.end(), [](auto& v) { return v.is_number(); }))
      throw ParseError("field box must be an array of 4 numbers");
    inst.box = {box[0].get<double>(), box[1].get<double>(), box[2].get<double>(), box[3].get<double>()};
    inst.caption = int_field(ji, "caption");
    const auto& occ = field(ji, "occluders");
    if (!occ.is_array()) throw ParseError("field occluders must be an array");
    for (const auto& o : occ) {
      if (!o.is_number_integer()) throw ParseError("field occluders must hold integers");
      inst.occluders.push_back(o.get<int>());
    }
    for (const char* name : {"modal_mask", "amodal_mask"}) {
      const auto& m = field(ji, name);
      if (!m.is_string()) throw ParseError(std::string("field ") + name + " must be a string");
      try {
        auto mask = PixelMask::from_rle(m.get<std::string>(), layout.width, layout.height);
        (std::string_view(name) == "modal_mask" ? inst.modal_mask : inst.amodal_mask) = std::move(mask);
      } catch (const ParseError& e) {
        throw ParseError(std::string("field ") + name + ": " + e.what());
      }
    }
    layout.instances.push_back(std::move(inst));
  }
  return layout;
}

inline std::string serialize_layout(const SceneLayout& layout) { return layout_to_json(layout).dump(); }

inline SceneLayout parse_layout(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed layout JSON: ") + e.what());
  }
  return layout_from_json(j);
}

}  // namespace zorder
