#pragma once

// Layout fidelity metrics for generated images: palette-oracle segmentation,
// mIoU, overlap-restricted mIoU, occlusion-order F1, depth-order disagreement
// and existence rate, plus CSV/JSON report emission.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "zorder/image.hpp"
#include "zorder/layout.hpp"
#include "zorder/synth.hpp"

namespace zorder {

inline constexpr double kSegmentThreshold = 60.0;
inline constexpr double kExistenceIou = 0.5;

struct SegmentationResult {
  std::vector<int> ids;           // aligned with the layout instance list
  std::vector<PixelMask> masks;   // predicted mask per instance
  PixelMask unassigned;

  const PixelMask& mask_of(int id) const {
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (ids[i] == id) return masks[i];
    throw Error("segmentation: unknown instance id " + std::to_string(id));
  }
};

/// Assigns every pixel to the instance with the nearest caption color when
/// that distance is within `threshold`; ties go to the lower instance id.
inline SegmentationResult segment_instances(const Image& image, const SceneLayout& layout,
                                            double threshold = kSegmentThreshold) {
  const int W = image.width;
  const int H = image.height;
  SegmentationResult seg;
  seg.unassigned = PixelMask(W, H);
  std::vector<std::size_t> order(layout.instances.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    order[i] = i;
    seg.ids.push_back(layout.instances[i].id);
    seg.masks.emplace_back(W, H);
  }
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return layout.instances[a].id < layout.instances[b].id; });
  const double limit = threshold * threshold;
  for (int p = 0; p < W * H; ++p) {
    const Rgb c = image.at(p);
    double best = limit;
    std::optional<std::size_t> owner;
    for (std::size_t k : order) {
      const Rgb ref = caption_rgb(layout.instances[k].caption);
      const double dr = double(c.r) - ref.r, dg = double(c.g) - ref.g, db = double(c.b) - ref.b;
      const double d = dr * dr + dg * dg + db * db;
      if (d < best || (!owner && d == best)) {
        best = d;
        owner = k;
      }
    }
    if (owner)
      seg.masks[*owner].set_index(std::size_t(p), true);
    else
      seg.unassigned.set_index(std::size_t(p), true);
  }
  return seg;
}

/// IoU with the convention that two empty masks agree perfectly.
inline double iou(const PixelMask& a, const PixelMask& b) {
  const std::size_t uni = (a | b).count();
  if (uni == 0) return 1.0;
  return double((a & b).count()) / double(uni);
}

inline double miou(const std::vector<PixelMask>& pred, const std::vector<PixelMask>& target) {
  if (pred.size() != target.size()) throw Error("miou: instance count mismatch");
  if (pred.empty()) return 1.0;
  double sum = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) sum += iou(pred[i], target[i]);
  return sum / double(pred.size());
}

/// Unordered instance pairs (lower id first) whose boxes overlap with positive area.
inline std::vector<std::pair<int, int>> overlapping_pairs(const SceneLayout& layout) {
  std::vector<std::pair<int, int>> out;
  for (const auto& a : layout.instances)
    for (const auto& b : layout.instances)
      if (a.id < b.id && intersection_region(a.box, b.box)) out.emplace_back(a.id, b.id);
  std::sort(out.begin(), out.end());
  return out;
}

inline std::optional<double> o_miou(const SegmentationResult& seg, const SceneLayout& layout) {
  const auto pairs = overlapping_pairs(layout);
  if (pairs.empty()) return std::nullopt;
  double sum = 0;
  int entries = 0;
  for (const auto& [a, b] : pairs) {
    const auto* ia = layout.find(a);
    const auto* ib = layout.find(b);
    const PixelMask region = rasterize_box_pixels(*intersection_region(ia->box, ib->box), layout.width, layout.height);
    for (const auto* inst : {ia, ib}) {
      sum += iou(seg.mask_of(inst->id) & region, inst->modal_mask & region);
      ++entries;
    }
  }
  return sum / entries;
}

using EdgeSet = std::set<std::pair<int, int>>;  // (front, back)

/// Region in which the front/back relation of a pair is judged: the shared
/// full-extent area when amodal masks are present, else the box intersection.
inline PixelMask pair_region(const InstanceAnnotation& a, const InstanceAnnotation& b, int W, int H) {
  if (a.amodal_mask.size() == std::size_t(W) * H && b.amodal_mask.size() == std::size_t(W) * H)
    return a.amodal_mask & b.amodal_mask;
  const auto box = intersection_region(a.box, b.box);
  return box ? rasterize_box_pixels(*box, W, H) : PixelMask(W, H);
}

/// Predicted front instance for every overlapping pair; nullopt on ties
/// (including both owning zero pixels).
inline std::map<std::pair<int, int>, std::optional<int>> predict_pair_order(const SegmentationResult& seg,
                                                                            const SceneLayout& layout) {
  std::map<std::pair<int, int>, std::optional<int>> out;
  for (const auto& [a, b] : overlapping_pairs(layout)) {
    const PixelMask region = pair_region(*layout.find(a), *layout.find(b), layout.width, layout.height);
    const std::size_t na = (seg.mask_of(a) & region).count();
    const std::size_t nb = (seg.mask_of(b) & region).count();
    out[{a, b}] = na > nb ? std::optional<int>(a) : nb > na ? std::optional<int>(b) : std::nullopt;
  }
  return out;
}

inline EdgeSet predicted_edges(const SegmentationResult& seg, const SceneLayout& layout) {
  EdgeSet edges;
  for (const auto& [pair, front] : predict_pair_order(seg, layout))
    if (front) edges.insert(*front == pair.first ? pair : std::make_pair(pair.second, pair.first));
  return edges;
}

inline EdgeSet true_edges(const SceneLayout& layout) {
  EdgeSet edges;
  for (const auto& inst : layout.instances)
    for (int o : inst.occluders) edges.insert({o, inst.id});
  return edges;
}

inline double occlusion_f1(const EdgeSet& pred, const EdgeSet& truth) {
  if (pred.empty() && truth.empty()) return 1.0;
  std::size_t hit = 0;
  for (const auto& e : pred) hit += truth.count(e);
  if (hit == 0) return 0.0;
  const double p = double(hit) / double(pred.size());
  const double r = double(hit) / double(truth.size());
  return 2 * p * r / (p + r);
}

/// Pair key (lower id first) -> front id.
using PairOrder = std::map<std::pair<int, int>, std::optional<int>>;

/// Fraction of ground-truth ordered pairs whose predicted front differs; a
/// missing prediction counts as a disagreement.
inline std::optional<double> depth_whdr(const PairOrder& pred, const PairOrder& truth) {
  int n = 0, wrong = 0;
  for (const auto& [pair, front] : truth) {
    if (!front) continue;
    ++n;
    const auto it = pred.find(pair);
    if (it == pred.end() || it->second != front) ++wrong;
  }
  if (n == 0) return std::nullopt;
  return double(wrong) / n;
}

/// Ground-truth order of every overlapping pair that carries an occlusion edge.
inline PairOrder true_pair_order(const SceneLayout& layout) {
  PairOrder out;
  const EdgeSet edges = true_edges(layout);
  for (const auto& [a, b] : overlapping_pairs(layout)) {
    if (edges.count({a, b})) out[{a, b}] = a;
    else if (edges.count({b, a})) out[{a, b}] = b;
  }
  return out;
}

inline double existence_rate(const SegmentationResult& seg, const SceneLayout& layout) {
  if (layout.instances.empty()) return 1.0;
  int present = 0;
  for (const auto& inst : layout.instances) present += iou(seg.mask_of(inst.id), inst.modal_mask) >= kExistenceIou;
  return double(present) / double(layout.instances.size());
}

struct SceneMetrics {
  int scene_id = 0;
  double miou = 0;
  std::optional<double> o_miou;
  double occ_f1 = 0;
  std::optional<double> dep_whdr;
  double existence_rate = 0;
};

inline SceneMetrics evaluate_scene(const Image& image, const SceneLayout& layout, int scene_id = 0) {
  if (image.width != layout.width || image.height != layout.height)
    throw Error("evaluate: image size does not match layout for scene " + std::to_string(scene_id));
  const auto seg = segment_instances(image, layout);
  std::vector<PixelMask> target;
  for (const auto& inst : layout.instances) target.push_back(inst.modal_mask);
  SceneMetrics m;
  m.scene_id = scene_id;
  m.miou = miou(seg.masks, target);
  m.o_miou = o_miou(seg, layout);
  m.occ_f1 = occlusion_f1(predicted_edges(seg, layout), true_edges(layout));
  m.dep_whdr = depth_whdr(predict_pair_order(seg, layout), true_pair_order(layout));
  m.existence_rate = existence_rate(seg, layout);
  return m;
}

struct MetricAggregate {
  std::optional<double> miou, o_miou, occ_f1, dep_whdr, existence_rate;
};

/// Unweighted mean of the non-null per-scene values, folded in scene order.
inline MetricAggregate aggregate(const std::vector<SceneMetrics>& scenes) {
  auto mean = [&](auto get) -> std::optional<double> {
    double sum = 0;
    int n = 0;
    for (const auto& s : scenes)
      if (const std::optional<double> v = get(s)) {
        sum += *v;
        ++n;
      }
    if (n == 0) return std::nullopt;
    return sum / n;
  };
  MetricAggregate a;
  a.miou = mean([](const SceneMetrics& s) { return std::optional<double>(s.miou); });
  a.o_miou = mean([](const SceneMetrics& s) { return s.o_miou; });
  a.occ_f1 = mean([](const SceneMetrics& s) { return std::optional<double>(s.occ_f1); });
  a.dep_whdr = mean([](const SceneMetrics& s) { return s.dep_whdr; });
  a.existence_rate = mean([](const SceneMetrics& s) { return std::optional<double>(s.existence_rate); });
  return a;
}

namespace detail {
inline std::string format_real(std::optional<double> v) {
  if (!v) return "";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, *v);
  return std::string(buf, res.ptr);
}
inline nlohmann::json json_real(std::optional<double> v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }
}  // namespace detail

inline const char* kReportColumns = "scene_id,miou,o_miou,occ_f1,dep_whdr,existence_rate";

/// Writes `path` as CSV (per-scene rows then an aggregate row named "mean")
/// and the same values as JSON next to it with a .json extension. Null
/// values are empty CSV cells and JSON nulls.
inline void write_report(const std::vector<SceneMetrics>& scenes, const std::filesystem::path& path) {
  std::ofstream csv(path, std::ios::binary);
  if (!csv) throw Error("cannot write report " + path.string());
  csv << kReportColumns << "\n";
  nlohmann::json j;
  j["columns"] = {"scene_id", "miou", "o_miou", "occ_f1", "dep_whdr", "existence_rate"};
  j["scenes"] = nlohmann::json::array();
  using detail::format_real;
  using detail::json_real;
  for (const auto& s : scenes) {
    csv << s.scene_id << "," << format_real(s.miou) << "," << format_real(s.o_miou) << "," << format_real(s.occ_f1)
        << "," << format_real(s.dep_whdr) << "," << format_real(s.existence_rate) << "\n";
    j["scenes"].push_back({{"scene_id", s.scene_id},
                           {"miou", s.miou},
                           {"o_miou", json_real(s.o_miou)},
                           {"occ_f1", s.occ_f1},
                           {"dep_whdr", json_real(s.dep_whdr)},
                           {"existence_rate", s.existence_rate}});
  }
  if (!scenes.empty()) {
    const auto a = aggregate(scenes);
    csv << "mean," << format_real(a.miou) << "," << format_real(a.o_miou) << "," << format_real(a.occ_f1) << ","
        << format_real(a.dep_whdr) << "," << format_real(a.existence_rate) << "\n";
    j["aggregate"] = {{"miou", json_real(a.miou)},
                      {"o_miou", json_real(a.o_miou)},
                      {"occ_f1", json_real(a.occ_f1)},
                      {"dep_whdr", json_real(a.dep_whdr)},
                      {"existence_rate", json_real(a.existence_rate)}};
  } else {
    j["aggregate"] = nullptr;
  }
  if (!csv) throw Error("failed writing report " + path.string());
  auto json_path = path;
  json_path.replace_extension(".json");
  std::ofstream js(json_path, std::ios::binary);
  if (!js) throw Error("cannot write report " + json_path.string());
  js << j.dump(2) << "\n";
}

}  // namespace zorder
