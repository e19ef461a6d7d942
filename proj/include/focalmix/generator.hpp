#pragma once

// Procedural CT-like phantoms: smoothed noise texture with a low-frequency
// bias field, soft-edged spherical nodules (annotated) and unannotated tube
// and elongated-blob distractors.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <string>
#include <vector>

#include "focalmix/error.hpp"
#include "focalmix/rng.hpp"
#include "focalmix/volume.hpp"

namespace focalmix {

template <typename T>
struct Range {
  T min{};
  T max{};
  bool valid() const { return min <= max; }
};

struct GenConfig {
  Shape3 volume_shape{64, 64, 64};
  Vec3 spacing_mm{1.0, 1.0, 1.0};
  Range<int> nodule_count_range{1, 3};
  Range<double> nodule_diameter_range{4.0, 10.0};
  Range<double> nodule_contrast_range{1.0, 2.0};
  Range<int> distractor_count_range{2, 6};
  double noise_sigma = 1.0;
  double blur_sigma = 1.0;
  double bias_amplitude = 0.3;
  std::uint64_t seed = 0;

  void validate() const {
    detail::require(nodule_count_range.valid() && nodule_count_range.min >= 0,
                    "nodule_count_range must satisfy 0 <= min <= max");
    detail::require(nodule_diameter_range.valid(), "nodule_diameter_range must satisfy min <= max");
    detail::require(nodule_diameter_range.min >= 3.0, "nodule diameters must be >= 3 voxels");
    detail::require(nodule_contrast_range.valid() && nodule_contrast_range.min > 0.0,
                    "nodule_contrast_range must be positive with min <= max");
    detail::require(distractor_count_range.valid() && distractor_count_range.min >= 0,
                    "distractor_count_range must satisfy 0 <= min <= max");
    detail::require(noise_sigma >= 0.0 && blur_sigma >= 0.0 && bias_amplitude >= 0.0,
                    "noise parameters must be non-negative");
    for (int a = 0; a < 3; ++a) {
      detail::require(spacing_mm[a] > 0.0, "spacing must be positive");
      detail::require(volume_shape[a] >= nodule_diameter_range.max + 2.0,
                      "volume too small to hold the largest nodule");
    }
  }
};

namespace detail {

inline void gaussian_blur(Volume3D& v, double sigma) {
  if (sigma <= 0.0) return;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double ksum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    ksum += k[i + radius];
  }
  for (double& w : k) w /= ksum;

  const auto& s = v.shape;
  std::vector<float> tmp(v.voxels.size());
  const std::array<std::size_t, 3> strides{static_cast<std::size_t>(s[1]) * s[2],
                                           static_cast<std::size_t>(s[2]), 1};
  for (int axis = 0; axis < 3; ++axis) {
    const int n = s[axis];
    for (int z = 0; z < s[0]; ++z)
      for (int y = 0; y < s[1]; ++y)
        for (int x = 0; x < s[2]; ++x) {
          const std::array<int, 3> p{z, y, x};
          const std::size_t base = v.index(z, y, x) - p[axis] * strides[axis];
          double acc = 0.0;
          for (int i = -radius; i <= radius; ++i) {
            // Mirror at the borders.
            int q = p[axis] + i;
            if (q < 0) q = -q - 1;
            if (q >= n) q = 2 * n - q - 1;
            q = std::clamp(q, 0, n - 1);
            acc += k[i + radius] * v.voxels[base + q * strides[axis]];
          }
          tmp[v.index(z, y, x)] = static_cast<float>(acc);
        }
    v.voxels.swap(tmp);
  }
}

// Soft profile: full contrast inside, Gaussian falloff past the surface.
inline double soft_profile(double dist_outside, double sigma_edge) {
  if (dist_outside <= 0.0) return 1.0;
  const double t = dist_outside / sigma_edge;
  return std::exp(-t * t);
}

inline Vec3 random_unit(Rng& rng) {
  for (;;) {
    Vec3 d{rng.normal(), rng.normal(), rng.normal()};
    const double n = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
    if (n > 1e-9) return {d[0] / n, d[1] / n, d[2] / n};
  }
}

// Adds contrast * profile(signed distance) over the voxels within `reach`
// of `center`. `dist` maps a voxel-center offset to the distance outside the
// object surface (<= 0 inside).
template <typename DistFn>
void render_additive(Volume3D& v, const Vec3& center, double reach, double contrast,
                     double sigma_edge, DistFn dist) {
  std::array<int, 3> lo{}, hi{};
  for (int a = 0; a < 3; ++a) {
    lo[a] = std::max(0, static_cast<int>(std::floor(center[a] - reach)));
    hi[a] = std::min(v.shape[a] - 1, static_cast<int>(std::ceil(center[a] + reach)));
  }
  for (int z = lo[0]; z <= hi[0]; ++z)
    for (int y = lo[1]; y <= hi[1]; ++y)
      for (int x = lo[2]; x <= hi[2]; ++x) {
        const Vec3 d{z + 0.5 - center[0], y + 0.5 - center[1], x + 0.5 - center[2]};
        const double w = soft_profile(dist(d), sigma_edge);
        if (w > 1e-6) v.at(z, y, x) += static_cast<float>(contrast * w);
      }
}

}  // namespace detail

inline std::string scan_id(std::uint64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scan_%07llu", static_cast<unsigned long long>(index));
  return buf;
}

/// Renders scan `index` of the dataset described by `cfg`. Pure function of
/// (cfg, index).
inline LabeledScan generate_scan(const GenConfig& cfg, std::uint64_t index) {
  cfg.validate();
  Rng rng(derive_seed(cfg.seed, index));
  const Shape3 shape = cfg.volume_shape;

  LabeledScan scan;
  scan.id = scan_id(index);
  scan.volume = Volume3D(shape, cfg.spacing_mm);
  auto& vol = scan.volume;

  // Texture: white noise, smoothed, rescaled to noise_sigma.
  for (float& f : vol.voxels) f = static_cast<float>(rng.normal());
  detail::gaussian_blur(vol, cfg.blur_sigma);
  {
    double sq = 0.0;
    for (float f : vol.voxels) sq += static_cast<double>(f) * f;
    const double sd = std::sqrt(sq / static_cast<double>(vol.size()));
    const double scale = sd > 0.0 ? cfg.noise_sigma / sd : 0.0;
    for (float& f : vol.voxels) f = static_cast<float>(f * scale);
  }

  // Bias field: three random plane waves of at most one cycle per volume.
  {
    struct Wave {
      Vec3 k;
      double phase;
    };
    std::array<Wave, 3> waves{};
    for (auto& w : waves) {
      for (int a = 0; a < 3; ++a)
        w.k[a] = rng.uniform(-1.0, 1.0) * 2.0 * std::numbers::pi / shape[a];
      w.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    const double amp = cfg.bias_amplitude / 3.0;
    for (int z = 0; z < shape[0]; ++z)
      for (int y = 0; y < shape[1]; ++y)
        for (int x = 0; x < shape[2]; ++x) {
          double b = 0.0;
          for (const auto& w : waves) b += std::cos(w.k[0] * z + w.k[1] * y + w.k[2] * x + w.phase);
          vol.at(z, y, x) += static_cast<float>(amp * b);
        }
  }

  // Nodules.
  const int n_nodules =
      static_cast<int>(rng.integer(cfg.nodule_count_range.min, cfg.nodule_count_range.max));
  for (int n = 0; n < n_nodules; ++n) {
    const double diameter =
        rng.uniform(cfg.nodule_diameter_range.min, cfg.nodule_diameter_range.max);
    const double contrast =
        rng.uniform(cfg.nodule_contrast_range.min, cfg.nodule_contrast_range.max);
    Vec3 c{};
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      for (int a = 0; a < 3; ++a) c[a] = rng.uniform(0.5 * diameter, shape[a] - 0.5 * diameter);
      placed = true;
      for (const auto& b : scan.boxes) {
        double d2 = 0.0;
        for (int a = 0; a < 3; ++a) d2 += (c[a] - b.center[a]) * (c[a] - b.center[a]);
        if (std::sqrt(d2) < 0.5 * (diameter + b.edge) + 2.0) {
          placed = false;
          break;
        }
      }
    }
    if (!placed) continue;
    const double r = 0.5 * diameter;
    const double sigma_edge = 0.15 * diameter;
    detail::render_additive(vol, c, r + 3.0 * sigma_edge, contrast, sigma_edge,
                            [r](const Vec3& d) {
                              return std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) - r;
                            });
    scan.boxes.push_back(Box3D{c, diameter});
  }

  // Distractors: vessel-like tubes and elongated blobs.
  const int n_distractors = static_cast<int>(
      rng.integer(cfg.distractor_count_range.min, cfg.distractor_count_range.max));
  for (int n = 0; n < n_distractors; ++n) {
    const bool tube = rng.uniform() < 0.5;
    const double contrast =
        rng.uniform(cfg.nodule_contrast_range.min, cfg.nodule_contrast_range.max);
    Vec3 c{};
    for (int a = 0; a < 3; ++a) c[a] = rng.uniform(0.0, shape[a]);
    const Vec3 axis = detail::random_unit(rng);
    if (tube) {
      const double radius = rng.uniform(0.8, 1.8);
      const double sigma_edge = 0.3 * radius;
      const double reach = 2.0 * (shape[0] + shape[1] + shape[2]);
      detail::render_additive(vol, c, reach, contrast, sigma_edge, [&](const Vec3& d) {
        const double along = d[0] * axis[0] + d[1] * axis[1] + d[2] * axis[2];
        double p2 = 0.0;
        for (int a = 0; a < 3; ++a) {
          const double q = d[a] - along * axis[a];
          p2 += q * q;
        }
        return std::sqrt(p2) - radius;
      });
    } else {
      const double minor = rng.uniform(0.5 * cfg.nodule_diameter_range.min,
                                       0.5 * cfg.nodule_diameter_range.max) *
                           0.6;
      const double major = minor * rng.uniform(2.5, 4.0);
      const double sigma_edge = 0.3 * minor;
      detail::render_additive(vol, c, major + 3.0 * sigma_edge, contrast, sigma_edge,
                              [&](const Vec3& d) {
                                const double along = d[0] * axis[0] + d[1] * axis[1] + d[2] * axis[2];
                                double p2 = 0.0;
                                for (int a = 0; a < 3; ++a) {
                                  const double q = d[a] - along * axis[a];
                                  p2 += q * q;
                                }
                                const double rho = std::sqrt(p2 / (minor * minor) +
                                                             along * along / (major * major));
                                return (rho - 1.0) * minor;
                              });
    }
  }
  return scan;
}

}  // namespace focalmix
