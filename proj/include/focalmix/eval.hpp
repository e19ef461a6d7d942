#pragma once

// FROC / CPM evaluation with a centre-within-radius hit rule.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <vector>

#include <json.hpp>

#include "focalmix/anchors.hpp"
#include "focalmix/error.hpp"
#include "focalmix/volume.hpp"

namespace focalmix {

enum class Outcome { TruePositive, FalsePositive, Ignored };

struct ScanMatch {
  std::vector<Detection> detections;  // sorted by descending score
  std::vector<Outcome> outcomes;      // parallel to detections
  std::vector<bool> gt_hit;
};

struct MatchResult {
  std::vector<ScanMatch> scans;
  std::size_t n_lesions = 0;
};

inline double center_distance(const Vec3& a, const Vec3& b) {
  double d2 = 0.0;
  for (int k = 0; k < 3; ++k) d2 += (a[k] - b[k]) * (a[k] - b[k]);
  return std::sqrt(d2);
}

/// Greedy per-scan matching in descending score. A detection whose centre is
/// within edge/2 of an unhit lesion centre is a TP (nearest such lesion is
/// marked hit); one that only reaches already-hit lesions, or falls inside an
/// ignore region, is Ignored; anything else is a FP.
inline ScanMatch match_scan(std::vector<Detection> dets, std::span<const Box3D> gts,
                            std::span<const Box3D> ignore_regions = {}) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection& a, const Detection& b) { return a.score > b.score; });
  ScanMatch m;
  m.gt_hit.assign(gts.size(), false);
  for (const auto& d : dets) {
    int best = -1;
    double best_dist = std::numeric_limits<double>::infinity();
    bool near_hit = false;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double dist = center_distance(d.box.center, gts[g].center);
      if (dist > 0.5 * gts[g].edge) continue;
      if (m.gt_hit[g]) {
        near_hit = true;
      } else if (dist < best_dist) {
        best_dist = dist;
        best = static_cast<int>(g);
      }
    }
    Outcome o;
    if (best >= 0) {
      m.gt_hit[best] = true;
      o = Outcome::TruePositive;
    } else if (near_hit) {
      o = Outcome::Ignored;
    } else {
      o = Outcome::FalsePositive;
      for (const auto& r : ignore_regions)
        if (center_distance(d.box.center, r.center) <= 0.5 * r.edge) {
          o = Outcome::Ignored;
          break;
        }
    }
    m.detections.push_back(d);
    m.outcomes.push_back(o);
  }
  return m;
}

inline MatchResult match_detections(std::span<const std::vector<Detection>> dets,
                                    std::span<const std::vector<Box3D>> gts,
                                    std::span<const std::vector<Box3D>> ignore_regions = {}) {
  if (dets.size() != gts.size()) throw ConfigError("detections and ground truth cover different scan counts");
  MatchResult r;
  for (std::size_t s = 0; s < dets.size(); ++s) {
    std::span<const Box3D> ign;
    if (s < ignore_regions.size()) ign = ignore_regions[s];
    r.scans.push_back(match_scan(dets[s], gts[s], ign));
    r.n_lesions += gts[s].size();
  }
  return r;
}

struct FrocPoint {
  double threshold = 0.0;
  double fps_per_scan = 0.0;
  double recall = 0.0;
};

struct FrocCurve {
  std::vector<FrocPoint> points;  // ascending fps_per_scan, recall non-decreasing
  std::size_t n_scans = 0;
  std::size_t n_lesions = 0;
};

/// Sweeps the score threshold over every distinct detection score. The curve
/// starts at (0, 0) (threshold above every score); points sharing an
/// fps_per_scan collapse to the one with the highest recall.
inline FrocCurve froc(const MatchResult& m) {
  if (m.scans.empty()) throw ConfigError("FROC needs at least one scan");
  if (m.n_lesions == 0) throw ConfigError("FROC needs at least one lesion");
  struct Scored {
    double score;
    Outcome outcome;
  };
  std::vector<Scored> all;
  for (const auto& s : m.scans)
    for (std::size_t i = 0; i < s.detections.size(); ++i)
      if (s.outcomes[i] != Outcome::Ignored) all.push_back({s.detections[i].score, s.outcomes[i]});
  std::stable_sort(all.begin(), all.end(), [](const Scored& a, const Scored& b) { return a.score > b.score; });

  FrocCurve c;
  c.n_scans = m.scans.size();
  c.n_lesions = m.n_lesions;
  const double ns = static_cast<double>(c.n_scans);
  const double nl = static_cast<double>(c.n_lesions);
  c.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < all.size();) {
    const double thr = all[i].score;
    for (; i < all.size() && all[i].score == thr; ++i)
      (all[i].outcome == Outcome::TruePositive ? tp : fp) += 1;
    const FrocPoint p{thr, static_cast<double>(fp) / ns, static_cast<double>(tp) / nl};
    if (p.fps_per_scan == c.points.back().fps_per_scan)
      c.points.back() = p;  // same FP level, recall can only have grown
    else
      c.points.push_back(p);
  }
  return c;
}

inline constexpr std::array<double, 7> kCpmRates{0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0};

/// Recall at `rate` FPs/scan: interpolated between the last point at or
/// below the rate and the first point above it; the last point's recall
/// when none lies above; 0 when none lies at or below.
inline double recall_at(const FrocCurve& c, double rate) {
  const auto& p = c.points;
  std::size_t lo = p.size();
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i].fps_per_scan <= rate) lo = i;
  if (lo == p.size()) return 0.0;
  if (lo + 1 >= p.size() || p[lo].fps_per_scan == rate) return p[lo].recall;
  const auto& a = p[lo];
  const auto& b = p[lo + 1];
  const double t = (rate - a.fps_per_scan) / (b.fps_per_scan - a.fps_per_scan);
  return a.recall + t * (b.recall - a.recall);
}

inline std::array<double, 7> recalls_at_cpm_rates(const FrocCurve& c) {
  std::array<double, 7> r{};
  for (std::size_t i = 0; i < kCpmRates.size(); ++i) r[i] = recall_at(c, kCpmRates[i]);
  return r;
}

/// Mean of `recalls` (fractions) as a percentage.
inline double cpm_from_recalls(std::span<const double> recalls) {
  if (recalls.empty()) return 0.0;
  double s = 0.0;
  for (double r : recalls) s += r;
  return 100.0 * s / static_cast<double>(recalls.size());
}

/// Competition performance metric in percent.
inline double cpm(const FrocCurve& c) {
  const auto r = recalls_at_cpm_rates(c);
  return cpm_from_recalls(r);
}

inline void write_froc_csv(std::ostream& os, const FrocCurve& c) {
  os << "threshold,fps_per_scan,recall\n";
  for (const auto& p : c.points) {
    nlohmann::json row = {p.threshold, p.fps_per_scan, p.recall};
    if (std::isinf(p.threshold)) os << "inf";
    else os << row[0].dump();
    os << ',' << row[1].dump() << ',' << row[2].dump() << '\n';
  }
}

inline nlohmann::json cpm_summary(const FrocCurve& c) {
  const auto r = recalls_at_cpm_rates(c);
  return {{"cpm", cpm(c)},
          {"fp_rates", kCpmRates},
          {"recalls_at", r},
          {"n_scans", c.n_scans},
          {"n_lesions", c.n_lesions}};
}

}  // namespace focalmix
