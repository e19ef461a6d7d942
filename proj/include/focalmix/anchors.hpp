#pragma once

// Multi-level cubic anchors, IoU, target assignment, box coding and NMS.
//
// Linear anchor index: levels in configuration order, then z, y, x
// (row-major) within each level's cell grid:
//   index = level_offset[l] + (z * Hl + y) * Wl + x,   Dl = D / stride_l, ...
// Anchor (l, z, y, x) is the cube centred at ((z+.5)s, (y+.5)s, (x+.5)s)
// with edge base_edge_l.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "focalmix/error.hpp"
#include "focalmix/volume.hpp"

namespace focalmix {

struct LevelSpec {
  int stride = 2;
  double base_edge = 4.0;

  bool operator==(const LevelSpec&) const = default;
};

struct AnchorLocation {
  int level = 0;
  int z = 0, y = 0, x = 0;
  bool operator==(const AnchorLocation&) const = default;
};

class AnchorGrid {
 public:
  AnchorGrid() = default;

  AnchorGrid(Shape3 patch_shape, std::vector<LevelSpec> levels)
      : patch_shape_(patch_shape), levels_(std::move(levels)) {
    detail::require(!levels_.empty(), "anchor grid needs at least one level");
    std::size_t offset = 0;
    for (const auto& l : levels_) {
      detail::require(l.stride > 0 && (l.stride & (l.stride - 1)) == 0,
                      "anchor stride must be a power of two");
      detail::require(l.base_edge > 0.0, "anchor base edge must be positive");
      Shape3 dims{};
      for (int a = 0; a < 3; ++a) {
        detail::require(patch_shape_[a] > 0 && patch_shape_[a] % l.stride == 0,
                        "anchor stride " + std::to_string(l.stride) +
                            " does not divide patch dimension " +
                            std::to_string(patch_shape_[a]));
        dims[a] = patch_shape_[a] / l.stride;
      }
      level_dims_.push_back(dims);
      level_offsets_.push_back(offset);
      offset += voxel_count(dims);
    }
    total_count_ = offset;
  }

  const Shape3& patch_shape() const { return patch_shape_; }
  const std::vector<LevelSpec>& levels() const { return levels_; }
  std::size_t level_count() const { return levels_.size(); }
  const Shape3& level_dims(std::size_t l) const { return level_dims_[l]; }
  std::size_t level_offset(std::size_t l) const { return level_offsets_[l]; }
  std::size_t level_size(std::size_t l) const { return voxel_count(level_dims_[l]); }
  std::size_t total_count() const { return total_count_; }

  int max_stride() const {
    int s = 1;
    for (const auto& l : levels_) s = std::max(s, l.stride);
    return s;
  }

  std::size_t index(const AnchorLocation& loc) const {
    const auto& d = level_dims_[loc.level];
    return level_offsets_[loc.level] +
           (static_cast<std::size_t>(loc.z) * d[1] + static_cast<std::size_t>(loc.y)) * d[2] +
           static_cast<std::size_t>(loc.x);
  }

  AnchorLocation locate(std::size_t i) const {
    std::size_t l = 0;
    while (l + 1 < levels_.size() && i >= level_offsets_[l + 1]) ++l;
    std::size_t r = i - level_offsets_[l];
    const auto& d = level_dims_[l];
    AnchorLocation loc;
    loc.level = static_cast<int>(l);
    loc.x = static_cast<int>(r % d[2]);
    r /= d[2];
    loc.y = static_cast<int>(r % d[1]);
    loc.z = static_cast<int>(r / d[1]);
    return loc;
  }

  Box3D anchor(const AnchorLocation& loc) const {
    const auto& l = levels_[loc.level];
    const double s = l.stride;
    return Box3D{{(loc.z + 0.5) * s, (loc.y + 0.5) * s, (loc.x + 0.5) * s}, l.base_edge};
  }
  Box3D anchor(std::size_t i) const { return anchor(locate(i)); }

 private:
  Shape3 patch_shape_{0, 0, 0};
  std::vector<LevelSpec> levels_;
  std::vector<Shape3> level_dims_;
  std::vector<std::size_t> level_offsets_;
  std::size_t total_count_ = 0;
};

inline AnchorGrid build_anchor_grid(const Shape3& patch_shape, const std::vector<LevelSpec>& levels) {
  return AnchorGrid(patch_shape, levels);
}

inline double overlap_1d(double alo, double ahi, double blo, double bhi) {
  return std::max(0.0, std::min(ahi, bhi) - std::max(alo, blo));
}

inline double intersection_volume(const Box3D& a, const Box3D& b) {
  double v = 1.0;
  for (int k = 0; k < 3; ++k) {
    v *= overlap_1d(a.lo(k), a.hi(k), b.lo(k), b.hi(k));
    if (v == 0.0) return 0.0;
  }
  return v;
}

inline double iou3d(const Box3D& a, const Box3D& b) {
  const double inter = intersection_volume(a, b);
  if (inter <= 0.0) return 0.0;
  const double uni = a.volume() + b.volume() - inter;
  return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

/// (dz, dy, dx, dd): centre shift over anchor edge, then log edge ratio.
using BoxOffsets = std::array<double, 4>;

inline BoxOffsets encode_box(const Box3D& anchor, const Box3D& gt) {
  return {(gt.center[0] - anchor.center[0]) / anchor.edge,
          (gt.center[1] - anchor.center[1]) / anchor.edge,
          (gt.center[2] - anchor.center[2]) / anchor.edge, std::log(gt.edge / anchor.edge)};
}

inline Box3D decode_box(const Box3D& anchor, const BoxOffsets& d) {
  return Box3D{{anchor.center[0] + d[0] * anchor.edge, anchor.center[1] + d[1] * anchor.edge,
                anchor.center[2] + d[2] * anchor.edge},
               anchor.edge * std::exp(d[3])};
}

struct AssignParams {
  double positive_iou = 0.3;
  double negative_iou = 0.1;
};

/// Per-anchor training targets. `train[i] == 0` marks an ignored anchor.
struct AnchorTargets {
  std::vector<double> cls;
  std::vector<BoxOffsets> reg;
  std::vector<std::uint8_t> has_reg;
  std::vector<std::uint8_t> train;

  AnchorTargets() = default;
  explicit AnchorTargets(std::size_t n) : cls(n, 0.0), reg(n, BoxOffsets{}), has_reg(n, 0), train(n, 1) {}

  std::size_t size() const { return cls.size(); }
  bool operator==(const AnchorTargets&) const = default;
};

/// Max-IoU assignment: > positive_iou -> y=1 with offsets to the argmax box,
/// < negative_iou -> y=0, otherwise ignored. Ties go to the earlier gt box.
inline AnchorTargets assign_targets(const AnchorGrid& grid, std::span<const Box3D> gt,
                                    const AssignParams& p = {}) {
  const std::size_t n = grid.total_count();
  AnchorTargets t(n);
  if (gt.empty()) return t;

  std::vector<double> best(n, 0.0);
  std::vector<int> arg(n, -1);
  for (std::size_t l = 0; l < grid.level_count(); ++l) {
    const auto& spec = grid.levels()[l];
    const auto& dims = grid.level_dims(l);
    const double s = spec.stride;
    const double half = 0.5 * spec.base_edge;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      // Cells whose anchor cube can overlap box g.
      std::array<int, 3> lo{}, hi{};
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::max(0, static_cast<int>(std::floor((gt[g].lo(a) - half) / s - 0.5)));
        hi[a] = std::min(dims[a] - 1, static_cast<int>(std::ceil((gt[g].hi(a) + half) / s - 0.5)));
      }
      for (int z = lo[0]; z <= hi[0]; ++z)
        for (int y = lo[1]; y <= hi[1]; ++y)
          for (int x = lo[2]; x <= hi[2]; ++x) {
            const AnchorLocation loc{static_cast<int>(l), z, y, x};
            const std::size_t i = grid.index(loc);
            const double v = iou3d(grid.anchor(loc), gt[g]);
            if (v > best[i]) {
              best[i] = v;
              arg[i] = static_cast<int>(g);
            }
          }
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (best[i] > p.positive_iou) {
      t.cls[i] = 1.0;
      t.reg[i] = encode_box(grid.anchor(i), gt[arg[i]]);
      t.has_reg[i] = 1;
    } else if (!(best[i] < p.negative_iou)) {
      t.train[i] = 0;
    }
  }
  return t;
}

struct Detection {
  Box3D box;
  double score = 0.0;
  std::size_t anchor_index = 0;

  bool operator==(const Detection&) const = default;
};

/// Greedy NMS: highest score first (lower anchor index on ties); a box is
/// suppressed iff its IoU with some kept box exceeds `iou_threshold`.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold = 0.1) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.anchor_index < b.anchor_index;
  });
  std::vector<Detection> kept;
  for (const auto& d : dets) {
    bool keep = true;
    for (const auto& k : kept)
      if (iou3d(d.box, k.box) > iou_threshold) {
        keep = false;
        break;
      }
    if (keep) kept.push_back(d);
  }
  return kept;
}

struct DecodeParams {
  double min_score = 0.0;
  std::size_t pre_nms_top_k = 1000;
  double nms_iou = 0.1;
  std::size_t max_detections = 100;
};

/// Turns per-anchor scores and offsets into post-NMS detections.
inline std::vector<Detection> decode_detections(const AnchorGrid& grid, std::span<const double> scores,
                                                std::span<const BoxOffsets> offsets,
                                                const DecodeParams& p = {}) {
  detail::require(scores.size() == grid.total_count() && offsets.size() == grid.total_count(),
                  "score/offset arrays must match the anchor grid");
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (scores[i] >= p.min_score) order.push_back(i);
  const std::size_t k = std::min(p.pre_nms_top_k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  order.resize(k);
  std::vector<Detection> dets;
  dets.reserve(k);
  for (std::size_t i : order) {
    Box3D b = decode_box(grid.anchor(i), offsets[i]);
    dets.push_back(Detection{b, std::clamp(scores[i], 0.0, 1.0), i});
  }
  auto kept = nms(std::move(dets), p.nms_iou);
  if (kept.size() > p.max_detections) kept.resize(p.max_detections);
  return kept;
}

/// One JSON object per line: {"scan_id", "center":[z,y,x], "edge", "score"}.
inline void write_detections_jsonl(std::ostream& os, const std::string& scan_id,
                                   std::span<const Detection> dets) {
  for (const auto& d : dets) {
    nlohmann::json j = {{"scan_id", scan_id},
                        {"center", {d.box.center[0], d.box.center[1], d.box.center[2]}},
                        {"edge", d.box.edge},
                        {"score", d.score}};
    os << j.dump() << '\n';
  }
}

}  // namespace focalmix
