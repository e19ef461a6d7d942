#pragma once

// Dense volumes, cubic boxes and labeled scans.
//
// Coordinates are continuous voxel units: voxel (z, y, x) covers
// [z, z+1) x [y, y+1) x [x, x+1), so its center sits at (z+0.5, y+0.5, x+0.5).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "focalmix/error.hpp"

namespace focalmix {

using Shape3 = std::array<int, 3>;
using Vec3 = std::array<double, 3>;

inline std::size_t voxel_count(const Shape3& s) {
  return static_cast<std::size_t>(s[0]) * static_cast<std::size_t>(s[1]) *
         static_cast<std::size_t>(s[2]);
}

/// Dense scalar field, z-major (index = z*H*W + y*W + x).
struct Volume3D {
  Shape3 shape{0, 0, 0};
  Vec3 spacing{1.0, 1.0, 1.0};
  std::vector<float> voxels;

  Volume3D() = default;
  explicit Volume3D(Shape3 s, Vec3 sp = {1.0, 1.0, 1.0}, float fill = 0.0f)
      : shape(s), spacing(sp), voxels(voxel_count(s), fill) {
    detail::require(s[0] > 0 && s[1] > 0 && s[2] > 0, "volume shape must be positive");
    detail::require(sp[0] > 0 && sp[1] > 0 && sp[2] > 0, "voxel spacing must be positive");
  }

  std::size_t size() const { return voxels.size(); }

  std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * shape[1] + static_cast<std::size_t>(y)) * shape[2] +
           static_cast<std::size_t>(x);
  }
  bool contains(int z, int y, int x) const {
    return z >= 0 && y >= 0 && x >= 0 && z < shape[0] && y < shape[1] && x < shape[2];
  }

  float& at(int z, int y, int x) { return voxels[index(z, y, x)]; }
  float at(int z, int y, int x) const { return voxels[index(z, y, x)]; }

  bool is_cube() const { return shape[0] == shape[1] && shape[1] == shape[2]; }

  bool operator==(const Volume3D&) const = default;
};

/// Axis-aligned cube: center (z, y, x) and edge length, voxel units.
struct Box3D {
  Vec3 center{0.0, 0.0, 0.0};
  double edge = 1.0;

  double lo(int axis) const { return center[axis] - 0.5 * edge; }
  double hi(int axis) const { return center[axis] + 0.5 * edge; }
  double volume() const { return edge * edge * edge; }

  bool operator==(const Box3D&) const = default;
};

struct LabeledScan {
  Volume3D volume;
  std::vector<Box3D> boxes;
  std::string id;

  bool operator==(const LabeledScan&) const = default;
};

inline bool center_inside(const Box3D& b, const Shape3& shape) {
  for (int a = 0; a < 3; ++a)
    if (!(b.center[a] >= 0.0 && b.center[a] < static_cast<double>(shape[a]))) return false;
  return true;
}

/// Throws DataError unless every voxel is finite, the voxel count matches the
/// shape, and every box has positive edge with its center inside the volume.
inline void validate_scan(const LabeledScan& scan) {
  const auto& v = scan.volume;
  if (v.shape[0] <= 0 || v.shape[1] <= 0 || v.shape[2] <= 0)
    throw DataError("scan '" + scan.id + "': non-positive shape");
  if (!(v.spacing[0] > 0 && v.spacing[1] > 0 && v.spacing[2] > 0))
    throw DataError("scan '" + scan.id + "': non-positive spacing");
  if (v.voxels.size() != voxel_count(v.shape))
    throw DataError("scan '" + scan.id + "': voxel count does not match shape");
  for (float f : v.voxels)
    if (!std::isfinite(f)) throw DataError("scan '" + scan.id + "': non-finite voxel");
  for (const auto& b : scan.boxes) {
    if (!(b.edge > 0.0)) throw DataError("scan '" + scan.id + "': box edge must be positive");
    if (!center_inside(b, v.shape))
      throw DataError("scan '" + scan.id + "': box center outside volume");
  }
}

/// Cuts a size-shaped window whose origin is round(center - size/2). Voxels
/// outside the source are zero. Boxes are shifted into window coordinates;
/// a box is kept iff its center lies inside the window.
inline LabeledScan crop_patch(const LabeledScan& scan, const Shape3& center, const Shape3& size,
                              int max_stride = 1) {
  for (int a = 0; a < 3; ++a) {
    detail::require(size[a] > 0, "crop size must be positive");
    detail::require(max_stride > 0 && size[a] % max_stride == 0,
                    "crop size must be divisible by the maximum anchor stride");
  }
  Shape3 origin{};
  for (int a = 0; a < 3; ++a) origin[a] = center[a] - size[a] / 2;

  LabeledScan out;
  out.id = scan.id;
  out.volume = Volume3D(size, scan.volume.spacing);
  const auto& src = scan.volume;
  for (int z = 0; z < size[0]; ++z) {
    const int sz = z + origin[0];
    if (sz < 0 || sz >= src.shape[0]) continue;
    for (int y = 0; y < size[1]; ++y) {
      const int sy = y + origin[1];
      if (sy < 0 || sy >= src.shape[1]) continue;
      const int x0 = std::max(0, -origin[2]);
      const int x1 = std::min(size[2], src.shape[2] - origin[2]);
      if (x1 <= x0) continue;
      std::copy_n(&src.voxels[src.index(sz, sy, x0 + origin[2])], x1 - x0,
                  &out.volume.voxels[out.volume.index(z, y, x0)]);
    }
  }
  for (const auto& b : scan.boxes) {
    Box3D t = b;
    for (int a = 0; a < 3; ++a) t.center[a] -= origin[a];
    if (center_inside(t, size)) out.boxes.push_back(t);
  }
  return out;
}

/// Zero-mean, unit-variance rescaling in place. Near-constant volumes are
/// only mean-centered.
inline void normalize(Volume3D& v) {
  if (v.voxels.empty()) return;
  double sum = 0.0;
  for (float f : v.voxels) sum += f;
  const double mean = sum / static_cast<double>(v.voxels.size());
  double sq = 0.0;
  for (float f : v.voxels) sq += (f - mean) * (f - mean);
  const double sd = std::sqrt(sq / static_cast<double>(v.voxels.size()));
  const double inv = sd > 1e-6 ? 1.0 / sd : 1.0;
  for (float& f : v.voxels) f = static_cast<float>((f - mean) * inv);
}

}  // namespace focalmix
