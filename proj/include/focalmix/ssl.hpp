#pragma once

// Semi-supervised building blocks: anchor-level target prediction by
// ensembling over cube symmetries, sharpening, and image-/object-level MixUp.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "focalmix/anchors.hpp"
#include "focalmix/detector.hpp"
#include "focalmix/error.hpp"
#include "focalmix/inference.hpp"
#include "focalmix/parallel.hpp"
#include "focalmix/rng.hpp"
#include "focalmix/transforms.hpp"
#include "focalmix/volume.hpp"

namespace focalmix {

struct SSLConfig {
  int K = 4;
  double T = 0.7;
  double eta = 0.2;
  int labeled_per_batch = 4;
  int unlabeled_per_batch = 4;
  double object_conf_threshold = 0.8;
  std::uint64_t seed = 0;

  void validate() const {
    detail::require(K >= 1, "K must be >= 1");
    detail::require(T > 0.0 && T <= 1.0, "T must lie in (0,1]");
    detail::require(eta > 0.0, "eta must be positive");
    detail::require(labeled_per_batch >= 1, "labeled_per_batch must be >= 1");
    detail::require(unlabeled_per_batch >= 0, "unlabeled_per_batch must be >= 0");
    detail::require(object_conf_threshold >= 0.0 && object_conf_threshold <= 1.0,
                    "object_conf_threshold must lie in [0,1]");
  }
};

enum class Source { Labeled, Unlabeled };

struct TrainingSample {
  Volume3D patch;
  AnchorTargets targets;
  Source source = Source::Labeled;
  std::vector<Box3D> objects;  // annotated boxes, or confident detections
};

/// Two-class temperature sharpening: y^(1/T) / (y^(1/T) + (1-y)^(1/T)).
inline double sharpen(double y, double T) {
  if (!(y >= 0.0 && y <= 1.0)) throw ContractError("sharpen expects a probability");
  if (!(T > 0.0)) throw ContractError("sharpen expects T > 0");
  if (y == 0.0 || y == 1.0) return y;
  // Ratio form keeps precision for small T.
  const double r = std::exp((std::log1p(-y) - std::log(y)) / T);
  return 1.0 / (1.0 + r);
}

/// Draws K distinct group elements (with replacement once K exceeds 48).
inline std::vector<CubeTransform> sample_transforms(int K, Rng& rng) {
  const auto& g = enumerate_group();
  std::vector<CubeTransform> out;
  if (K <= static_cast<int>(g.size())) {
    std::vector<std::size_t> idx(g.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (int k = 0; k < K; ++k) {
      const std::size_t j = k + static_cast<std::size_t>(rng.below(idx.size() - k));
      std::swap(idx[k], idx[j]);
      out.push_back(g[idx[k]]);
    }
  } else {
    for (int k = 0; k < K; ++k) out.push_back(g[rng.below(g.size())]);
  }
  return out;
}

struct EnsemblePrediction {
  std::vector<double> probs;           // anchor-wise mean probability
  std::vector<BoxOffsets> offsets;     // anchor-wise mean offsets, original frame
};

/// Average of per-anchor predictions over the transformed copies of `patch`,
/// each mapped back to the original anchor layout.
template <typename T>
EnsemblePrediction ensemble_predict(const ModelState<T>& s, const Volume3D& patch, const AnchorGrid& grid,
                                    std::span<const CubeTransform> transforms) {
  if (transforms.empty()) throw ConfigError("ensemble needs at least one transform");
  if (patch.shape != grid.patch_shape()) throw ConfigError("patch does not match the anchor grid");
  const std::size_t n = grid.total_count();
  std::vector<DetectorOutput> outs(transforms.size());
  std::vector<std::vector<std::size_t>> perms(transforms.size());
  parallel_for(transforms.size(), [&](std::size_t k) {
    const Volume3D v = transforms[k].is_identity() ? patch : apply_to_volume(transforms[k], patch);
    outs[k] = forward_any(s, v);
    perms[k] = apply_to_anchor_index(transforms[k], grid);
  });
  EnsemblePrediction e;
  e.probs.assign(n, 0.0);
  e.offsets.assign(n, BoxOffsets{});
  for (std::size_t k = 0; k < transforms.size(); ++k) {
    const CubeTransform back = inverse(transforms[k]);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = perms[k][i];
      e.probs[j] += outs[k].probs[i];
      const BoxOffsets o = apply_to_offsets(back, outs[k].offsets[i]);
      for (int c = 0; c < 4; ++c) e.offsets[j][c] += o[c];
    }
  }
  const double inv = 1.0 / static_cast<double>(transforms.size());
  for (std::size_t i = 0; i < n; ++i) {
    e.probs[i] *= inv;
    for (int c = 0; c < 4; ++c) e.offsets[i][c] *= inv;
  }
  return e;
}

/// Sharpened ensemble targets; every anchor trains, none regress.
inline AnchorTargets targets_from_ensemble(const EnsemblePrediction& e, double T) {
  AnchorTargets t(e.probs.size());
  for (std::size_t i = 0; i < e.probs.size(); ++i) t.cls[i] = sharpen(std::clamp(e.probs[i], 0.0, 1.0), T);
  return t;
}

template <typename T>
AnchorTargets predict_targets(const ModelState<T>& s, const Volume3D& patch, const AnchorGrid& grid,
                              const SSLConfig& cfg, Rng& rng) {
  const auto ts = sample_transforms(cfg.K, rng);
  return targets_from_ensemble(ensemble_predict(s, patch, grid, ts), cfg.T);
}

/// max(lambda, 1 - lambda) with lambda ~ Beta(eta, eta).
inline double sample_mix_weight(double eta, Rng& rng) {
  if (!(eta > 0.0)) throw ContractError("eta must be positive");
  const double l = rng.beta(eta, eta);
  return std::max(l, 1.0 - l);
}

/// lam * a + (1 - lam) * b on voxels and classification targets. An anchor
/// trains only if it trains in both inputs; regression targets and objects
/// come from `a`, which dominates since lam >= 0.5.
inline TrainingSample image_mixup(const TrainingSample& a, const TrainingSample& b, double lam) {
  if (a.patch.shape != b.patch.shape) throw ConfigError("image_mixup: patch shapes differ");
  if (a.targets.size() != b.targets.size()) throw ConfigError("image_mixup: anchor grids differ");
  TrainingSample out = a;
  const double mu = 1.0 - lam;
  if (mu == 0.0) return out;  // b contributes nothing, not even its ignore mask
  for (std::size_t i = 0; i < out.patch.voxels.size(); ++i)
    out.patch.voxels[i] = static_cast<float>(lam * a.patch.voxels[i] + mu * b.patch.voxels[i]);
  auto& t = out.targets;
  for (std::size_t i = 0; i < t.size(); ++i) {
    t.cls[i] = lam * a.targets.cls[i] + mu * b.targets.cls[i];
    t.train[i] = a.targets.train[i] && b.targets.train[i];
    if (!t.train[i]) t.has_reg[i] = 0;
  }
  return out;
}

namespace detail {

inline double trilinear(const Volume3D& v, double z, double y, double x) {
  auto axis = [](double c, int n, int& i0, int& i1, double& f) {
    c = std::clamp(c, 0.0, static_cast<double>(n - 1));
    i0 = static_cast<int>(std::floor(c));
    i1 = std::min(i0 + 1, n - 1);
    f = c - i0;
  };
  int z0, z1, y0, y1, x0, x1;
  double fz, fy, fx;
  axis(z, v.shape[0], z0, z1, fz);
  axis(y, v.shape[1], y0, y1, fy);
  axis(x, v.shape[2], x0, x1, fx);
  const double c00 = v.at(z0, y0, x0) * (1 - fx) + v.at(z0, y0, x1) * fx;
  const double c01 = v.at(z0, y1, x0) * (1 - fx) + v.at(z0, y1, x1) * fx;
  const double c10 = v.at(z1, y0, x0) * (1 - fx) + v.at(z1, y0, x1) * fx;
  const double c11 = v.at(z1, y1, x0) * (1 - fx) + v.at(z1, y1, x1) * fx;
  const double c0 = c00 * (1 - fy) + c01 * fy;
  const double c1 = c10 * (1 - fy) + c11 * fy;
  return c0 * (1 - fz) + c1 * fz;
}

}  // namespace detail

/// Voxels of `host` whose centres fall inside its cube are replaced by
/// lam * host + (1 - lam) * donor, where the donor cube is trilinearly
/// resampled onto the host cube.
inline void blend_object(Volume3D& dst, const Box3D& host, const Volume3D& donor_volume, const Box3D& donor,
                         double lam) {
  const double scale = donor.edge / host.edge;
  std::array<int, 3> lo{}, hi{};
  for (int a = 0; a < 3; ++a) {
    lo[a] = std::max(0, static_cast<int>(std::ceil(host.lo(a) - 0.5)));
    hi[a] = std::min(dst.shape[a] - 1, static_cast<int>(std::floor(host.hi(a) - 0.5)));
  }
  for (int z = lo[0]; z <= hi[0]; ++z)
    for (int y = lo[1]; y <= hi[1]; ++y)
      for (int x = lo[2]; x <= hi[2]; ++x) {
        // Donor position in continuous coordinates, shifted to sample space.
        const double pz = donor.lo(0) + (z + 0.5 - host.lo(0)) * scale - 0.5;
        const double py = donor.lo(1) + (y + 0.5 - host.lo(1)) * scale - 0.5;
        const double px = donor.lo(2) + (x + 0.5 - host.lo(2)) * scale - 0.5;
        const double d = detail::trilinear(donor_volume, pz, py, px);
        float& v = dst.at(z, y, x);
        v = static_cast<float>(lam * v + (1.0 - lam) * d);
      }
}

/// For every object in the batch, blends in a donor object drawn uniformly
/// from the other objects of the batch. Donors are read from the volumes as
/// they were on entry. Targets are left unchanged.
inline void object_mixup(std::vector<TrainingSample>& batch, const std::function<double()>& mix_weight, Rng& rng) {
  struct Ref {
    std::size_t sample, object;
  };
  std::vector<Ref> refs;
  for (std::size_t s = 0; s < batch.size(); ++s)
    for (std::size_t o = 0; o < batch[s].objects.size(); ++o) refs.push_back({s, o});
  if (refs.size() < 2) return;

  std::vector<Volume3D> snapshot;
  snapshot.reserve(batch.size());
  for (const auto& b : batch) snapshot.push_back(b.patch);

  for (std::size_t r = 0; r < refs.size(); ++r) {
    std::size_t d = static_cast<std::size_t>(rng.below(refs.size() - 1));
    if (d >= r) ++d;
    const double lam = mix_weight();
    const auto& host = batch[refs[r].sample].objects[refs[r].object];
    const auto& donor = batch[refs[d].sample].objects[refs[d].object];
    blend_object(batch[refs[r].sample].patch, host, snapshot[refs[d].sample], donor, lam);
  }
}

/// Keeps scans with at least one post-NMS detection scoring >= threshold.
template <typename T>
std::vector<LabeledScan> select_unlabeled(const ModelState<T>& s, std::span<const LabeledScan> pool,
                                          double threshold, const DecodeParams& dp = {}) {
  std::vector<std::uint8_t> keep(pool.size(), 0);
  parallel_for(pool.size(), [&](std::size_t i) {
    const auto dets = detect(s, pool[i].volume, dp);
    keep[i] = std::any_of(dets.begin(), dets.end(), [&](const Detection& d) { return d.score >= threshold; });
  });
  std::vector<LabeledScan> out;
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (keep[i]) out.push_back(pool[i]);
  return out;
}

}  // namespace focalmix
