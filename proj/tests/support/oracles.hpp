#pragma once

// Slow reference implementations used to cross-check the library. They are
// written from the definitions, without reusing library helpers beyond the
// plain data types.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "focalmix/anchors.hpp"
#include "focalmix/eval.hpp"
#include "focalmix/rng.hpp"
#include "focalmix/volume.hpp"

namespace oracle {

using focalmix::Box3D;
using focalmix::Detection;

// Length of [a0,a1] ∩ [b0,b1] as |A| + |B| - |A ∪ B|, with the union
// measured by merging the two intervals.
inline double interval_overlap(double a0, double a1, double b0, double b1) {
  if (a0 > b0) {
    std::swap(a0, b0);
    std::swap(a1, b1);
  }
  const double uni = b0 >= a1 ? (a1 - a0) + (b1 - b0) : std::max(a1, b1) - a0;
  return std::max(0.0, (a1 - a0) + (b1 - b0) - uni);
}

inline double iou(const Box3D& a, const Box3D& b) {
  double inter = 1.0;
  for (int k = 0; k < 3; ++k) {
    const double h1 = a.edge / 2.0, h2 = b.edge / 2.0;
    inter *= interval_overlap(a.center[k] - h1, a.center[k] + h1, b.center[k] - h2, b.center[k] + h2);
  }
  const double va = a.edge * a.edge * a.edge, vb = b.edge * b.edge * b.edge;
  return inter / (va + vb - inter);
}

// Exact IoU for boxes with integer corners, by counting unit cells.
inline double voxel_iou(const Box3D& a, const Box3D& b) {
  auto inside = [](const Box3D& box, int z, int y, int x) {
    const std::array<double, 3> c{z + 0.5, y + 0.5, x + 0.5};
    for (int k = 0; k < 3; ++k)
      if (std::abs(c[k] - box.center[k]) >= box.edge / 2.0) return false;
    return true;
  };
  int lo = 1 << 20, hi = -(1 << 20);
  for (const Box3D* p : {&a, &b})
    for (int k = 0; k < 3; ++k) {
      lo = std::min(lo, static_cast<int>(std::floor(p->center[k] - p->edge / 2.0)) - 1);
      hi = std::max(hi, static_cast<int>(std::ceil(p->center[k] + p->edge / 2.0)) + 1);
    }
  long both = 0, either = 0;
  for (int z = lo; z < hi; ++z)
    for (int y = lo; y < hi; ++y)
      for (int x = lo; x < hi; ++x) {
        const bool ia = inside(a, z, y, x), ib = inside(b, z, y, x);
        both += ia && ib;
        either += ia || ib;
      }
  return either == 0 ? 0.0 : static_cast<double>(both) / static_cast<double>(either);
}

struct Assignment {
  std::vector<double> cls;
  std::vector<std::array<double, 4>> reg;
  std::vector<int> has_reg;
  std::vector<int> train;
};

// Every anchor against every box.
inline Assignment assign(const focalmix::Shape3& patch, const std::vector<focalmix::LevelSpec>& levels,
                         const std::vector<Box3D>& gt, double pos, double neg) {
  Assignment r;
  for (const auto& l : levels)
    for (int z = 0; z < patch[0] / l.stride; ++z)
      for (int y = 0; y < patch[1] / l.stride; ++y)
        for (int x = 0; x < patch[2] / l.stride; ++x) {
          const Box3D anc{{(2 * z + 1) * l.stride / 2.0, (2 * y + 1) * l.stride / 2.0, (2 * x + 1) * l.stride / 2.0},
                          l.base_edge};
          double best = 0.0;
          int arg = -1;
          for (std::size_t g = 0; g < gt.size(); ++g) {
            const double v = iou(anc, gt[g]);
            if (v > best) {
              best = v;
              arg = static_cast<int>(g);
            }
          }
          std::array<double, 4> off{};
          if (best > pos) {
            const auto& g = gt[static_cast<std::size_t>(arg)];
            for (int k = 0; k < 3; ++k) off[k] = (g.center[k] - anc.center[k]) / anc.edge;
            off[3] = std::log(g.edge) - std::log(anc.edge);
          }
          r.cls.push_back(best > pos ? 1.0 : 0.0);
          r.reg.push_back(off);
          r.has_reg.push_back(best > pos ? 1 : 0);
          r.train.push_back(best > pos || best < neg ? 1 : 0);
        }
  return r;
}

// Greedy NMS output characterised as the unique subset S where every member
// has no higher-priority member of S overlapping it above thr, and every
// non-member has one. Found by enumerating all subsets (n <= 12).
inline std::vector<std::size_t> nms(const std::vector<Detection>& dets, double thr) {
  const std::size_t n = dets.size();
  auto before = [&](std::size_t a, std::size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    if (dets[a].anchor_index != dets[b].anchor_index) return dets[a].anchor_index < dets[b].anchor_index;
    return a < b;
  };
  std::vector<std::size_t> found;
  int matches = 0;
  for (unsigned mask = 0; mask < (1u << n); ++mask) {
    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i) {
      bool covered = false;
      for (std::size_t j = 0; j < n; ++j)
        if (j != i && (mask >> j & 1u) && before(j, i) && iou(dets[i].box, dets[j].box) > thr) covered = true;
      const bool in = mask >> i & 1u;
      ok = in != covered;
    }
    if (ok) {
      ++matches;
      found.clear();
      for (std::size_t i = 0; i < n; ++i)
        if (mask >> i & 1u) found.push_back(i);
    }
  }
  if (matches != 1) found.assign(1, std::numeric_limits<std::size_t>::max());
  std::sort(found.begin(), found.end(), [&](std::size_t a, std::size_t b) { return before(a, b); });
  return found;
}

struct Point {
  double fps;
  double recall;
};

// Re-matches the detections at or above every candidate threshold from
// scratch and records (FPs per scan, recall). Equal-FP points keep the
// largest recall.
inline std::vector<Point> froc(const std::vector<std::vector<Detection>>& dets,
                               const std::vector<std::vector<Box3D>>& gts) {
  std::vector<double> thresholds;
  std::size_t lesions = 0;
  for (const auto& g : gts) lesions += g.size();
  for (const auto& s : dets)
    for (const auto& d : s) thresholds.push_back(d.score);
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  thresholds.insert(thresholds.begin(), std::numeric_limits<double>::infinity());

  std::vector<Point> pts;
  for (double t : thresholds) {
    std::size_t tp = 0, fp = 0;
    for (std::size_t s = 0; s < dets.size(); ++s) {
      std::vector<std::size_t> order;
      for (std::size_t i = 0; i < dets[s].size(); ++i)
        if (dets[s][i].score >= t) order.push_back(i);
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return dets[s][a].score > dets[s][b].score; });
      std::vector<bool> hit(gts[s].size(), false);
      for (std::size_t i : order) {
        const auto& c = dets[s][i].box.center;
        int pick = -1;
        double pick_d = 0.0;
        bool dup = false;
        for (std::size_t g = 0; g < gts[s].size(); ++g) {
          const auto& gc = gts[s][g].center;
          const double d = std::hypot(c[0] - gc[0], c[1] - gc[1], c[2] - gc[2]);
          if (d > gts[s][g].edge / 2.0) continue;
          if (hit[g]) {
            dup = true;
          } else if (pick < 0 || d < pick_d) {
            pick = static_cast<int>(g);
            pick_d = d;
          }
        }
        if (pick >= 0) {
          hit[static_cast<std::size_t>(pick)] = true;
          ++tp;
        } else if (!dup) {
          ++fp;
        }
      }
    }
    const Point p{static_cast<double>(fp) / static_cast<double>(dets.size()),
                  static_cast<double>(tp) / static_cast<double>(lesions)};
    if (!pts.empty() && pts.back().fps == p.fps)
      pts.back().recall = std::max(pts.back().recall, p.recall);
    else
      pts.push_back(p);
  }
  return pts;
}

inline double cpm(const std::vector<Point>& pts) {
  const double rates[] = {1.0 / 8, 1.0 / 4, 1.0 / 2, 1.0, 2.0, 4.0, 8.0};
  double sum = 0.0;
  for (double r : rates) {
    // first point strictly beyond r
    const auto it = std::upper_bound(pts.begin(), pts.end(), r, [](double v, const Point& p) { return v < p.fps; });
    if (it == pts.begin()) continue;
    const Point& a = *(it - 1);
    if (it == pts.end() || a.fps == r) {
      sum += a.recall;
      continue;
    }
    sum += a.recall + (it->recall - a.recall) * (r - a.fps) / (it->fps - a.fps);
  }
  return 100.0 * sum / 7.0;
}

// Random instances ----------------------------------------------------------

inline Box3D random_box(focalmix::Rng& rng, double extent, double min_edge, double max_edge) {
  const double e = rng.uniform(min_edge, max_edge);
  return Box3D{{rng.uniform(0.0, extent), rng.uniform(0.0, extent), rng.uniform(0.0, extent)}, e};
}

inline Box3D random_integer_box(focalmix::Rng& rng, int extent, int max_edge) {
  const int e = static_cast<int>(rng.integer(1, max_edge));
  Box3D b;
  b.edge = e;
  for (int k = 0; k < 3; ++k) b.center[k] = static_cast<double>(rng.integer(0, extent)) + e / 2.0;
  return b;
}

// Detection sets with frequent score ties and clustered boxes.
inline std::vector<Detection> random_detections(focalmix::Rng& rng, std::size_t n, double extent) {
  std::vector<Detection> d;
  for (std::size_t i = 0; i < n; ++i) {
    Detection x;
    x.box = random_box(rng, extent, 2.0, 8.0);
    x.score = static_cast<double>(rng.integer(1, 6)) / 6.0;
    x.anchor_index = static_cast<std::size_t>(rng.integer(0, 50));
    d.push_back(x);
  }
  return d;
}

struct EvalInstance {
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<Box3D>> gts;
};

// <= 5 scans, <= 4 lesions and <= 10 detections per scan; at least one lesion.
inline EvalInstance random_eval_instance(focalmix::Rng& rng) {
  EvalInstance inst;
  const int n_scans = static_cast<int>(rng.integer(1, 5));
  for (int s = 0; s < n_scans; ++s) {
    std::vector<Box3D> g;
    const int n_l = static_cast<int>(rng.integer(0, 4));
    for (int i = 0; i < n_l; ++i) g.push_back(random_box(rng, 20.0, 3.0, 8.0));
    std::vector<Detection> d;
    const int n_d = static_cast<int>(rng.integer(0, 10));
    for (int i = 0; i < n_d; ++i) {
      Detection x;
      if (!g.empty() && rng.uniform() < 0.6) {
        const auto& t = g[static_cast<std::size_t>(rng.below(g.size()))];
        for (int k = 0; k < 3; ++k) x.box.center[k] = t.center[k] + rng.uniform(-0.5, 0.5) * t.edge;
        x.box.edge = t.edge;
      } else {
        x.box = random_box(rng, 20.0, 3.0, 8.0);
      }
      x.score = static_cast<double>(rng.integer(1, 8)) / 8.0;
      d.push_back(x);
    }
    inst.gts.push_back(g);
    inst.dets.push_back(d);
  }
  if (inst.gts[0].empty()) inst.gts[0].push_back(random_box(rng, 20.0, 3.0, 8.0));
  return inst;
}

}  // namespace oracle
