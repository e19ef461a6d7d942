#pragma once

// The 48 signed axis permutations of a cube (rotations and reflections).
//
// A transform t = (perm, signs) maps a point r of a cube with edge L to
//   t(r)_i = c + signs[i] * (r[perm[i]] - c),   c = L / 2.
// On voxel indices: k_i = j[perm[i]] if signs[i] > 0, else L - 1 - j[perm[i]].
// The volume action moves content: out[t(j)] = in[j].
//
// Canonical order: permutations in lexicographic order
// (012, 021, 102, 120, 201, 210); within one permutation, flip patterns
// (flip_z, flip_y, flip_x) in lexicographic order with "no flip" first.
// Element 0 is the identity.

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include <json.hpp>

#include "focalmix/anchors.hpp"
#include "focalmix/error.hpp"
#include "focalmix/volume.hpp"

namespace focalmix {

struct CubeTransform {
  std::array<int, 3> perm{0, 1, 2};
  std::array<int, 3> signs{1, 1, 1};

  bool is_identity() const { return perm == std::array<int, 3>{0, 1, 2} && signs == std::array<int, 3>{1, 1, 1}; }
  bool operator==(const CubeTransform&) const = default;
  auto operator<=>(const CubeTransform&) const = default;
};

inline const std::vector<CubeTransform>& enumerate_group() {
  static const std::vector<CubeTransform> group = [] {
    std::vector<CubeTransform> g;
    std::array<int, 3> p{0, 1, 2};
    do {
      for (int flips = 0; flips < 8; ++flips) {
        CubeTransform t;
        t.perm = p;
        for (int i = 0; i < 3; ++i) t.signs[i] = (flips >> (2 - i)) & 1 ? -1 : 1;
        g.push_back(t);
      }
    } while (std::next_permutation(p.begin(), p.end()));
    return g;
  }();
  return group;
}

/// Position of `t` in the canonical enumeration.
inline std::size_t group_index(const CubeTransform& t) {
  const auto& g = enumerate_group();
  return static_cast<std::size_t>(std::find(g.begin(), g.end(), t) - g.begin());
}

/// compose(a, b) applies b first, then a.
inline CubeTransform compose(const CubeTransform& a, const CubeTransform& b) {
  CubeTransform r;
  for (int i = 0; i < 3; ++i) {
    r.perm[i] = b.perm[a.perm[i]];
    r.signs[i] = a.signs[i] * b.signs[a.perm[i]];
  }
  return r;
}

inline CubeTransform inverse(const CubeTransform& t) {
  CubeTransform r;
  for (int i = 0; i < 3; ++i) r.perm[t.perm[i]] = i;
  for (int j = 0; j < 3; ++j) r.signs[j] = t.signs[r.perm[j]];
  return r;
}

/// Maps voxel/cell index `j` of an L x L x L grid.
inline std::array<int, 3> apply_to_index(const CubeTransform& t, const std::array<int, 3>& j,
                                         const Shape3& dims) {
  std::array<int, 3> k{};
  for (int i = 0; i < 3; ++i) {
    const int src = j[t.perm[i]];
    k[i] = t.signs[i] > 0 ? src : dims[i] - 1 - src;
  }
  return k;
}

inline Vec3 apply_to_point(const CubeTransform& t, const Vec3& r, const Shape3& shape) {
  Vec3 out{};
  for (int i = 0; i < 3; ++i) {
    const double c_in = 0.5 * shape[t.perm[i]];
    const double c_out = 0.5 * shape[i];
    out[i] = c_out + t.signs[i] * (r[t.perm[i]] - c_in);
  }
  return out;
}

inline void require_conforming(const CubeTransform& t, const Shape3& shape) {
  for (int i = 0; i < 3; ++i)
    if (shape[i] != shape[t.perm[i]])
      throw ConfigError("transform exchanges axes of unequal length");
}

inline Volume3D apply_to_volume(const CubeTransform& t, const Volume3D& v) {
  require_conforming(t, v.shape);
  Volume3D out(v.shape, v.spacing);
  for (int z = 0; z < v.shape[0]; ++z)
    for (int y = 0; y < v.shape[1]; ++y)
      for (int x = 0; x < v.shape[2]; ++x) {
        const auto k = apply_to_index(t, {z, y, x}, v.shape);
        out.at(k[0], k[1], k[2]) = v.at(z, y, x);
      }
  return out;
}

/// Same relabeling for a flat channel-free grid of any element type.
template <typename T>
std::vector<T> apply_to_grid(const CubeTransform& t, std::span<const T> in, const Shape3& dims) {
  require_conforming(t, dims);
  std::vector<T> out(in.size());
  std::size_t j = 0;
  for (int z = 0; z < dims[0]; ++z)
    for (int y = 0; y < dims[1]; ++y)
      for (int x = 0; x < dims[2]; ++x, ++j) {
        const auto k = apply_to_index(t, {z, y, x}, dims);
        out[(static_cast<std::size_t>(k[0]) * dims[1] + k[1]) * dims[2] + k[2]] = in[j];
      }
  return out;
}

inline Box3D apply_to_box(const CubeTransform& t, const Box3D& b, const Shape3& patch_shape) {
  require_conforming(t, patch_shape);
  return Box3D{apply_to_point(t, b.center, patch_shape), b.edge};
}

/// Box offsets are displacement vectors over the anchor edge; they rotate
/// with the signed permutation and the log-size term is unchanged.
inline BoxOffsets apply_to_offsets(const CubeTransform& t, const BoxOffsets& d) {
  BoxOffsets out{};
  for (int i = 0; i < 3; ++i) out[i] = t.signs[i] * d[t.perm[i]];
  out[3] = d[3];
  return out;
}

/// Permutation pi with: the anchor at index i of the transformed patch sits
/// where anchor pi[i] of the original patch sits (same level).
inline std::vector<std::size_t> apply_to_anchor_index(const CubeTransform& t, const AnchorGrid& grid) {
  const auto& ps = grid.patch_shape();
  if (!(ps[0] == ps[1] && ps[1] == ps[2]))
    throw ConfigError("anchor permutation requires a cubic patch");
  const CubeTransform inv = inverse(t);
  std::vector<std::size_t> pi(grid.total_count());
  for (std::size_t l = 0; l < grid.level_count(); ++l) {
    const auto& d = grid.level_dims(l);
    for (int z = 0; z < d[0]; ++z)
      for (int y = 0; y < d[1]; ++y)
        for (int x = 0; x < d[2]; ++x) {
          const auto src = apply_to_index(inv, {z, y, x}, d);
          const int li = static_cast<int>(l);
          pi[grid.index({li, z, y, x})] = grid.index({li, src[0], src[1], src[2]});
        }
  }
  return pi;
}

inline nlohmann::json transform_to_json(const CubeTransform& t) {
  return {{"perm", t.perm}, {"signs", t.signs}};
}

inline CubeTransform transform_from_json(const nlohmann::json& j) {
  CubeTransform t;
  t.perm = j.at("perm").get<std::array<int, 3>>();
  t.signs = j.at("signs").get<std::array<int, 3>>();
  std::array<int, 3> sorted = t.perm;
  std::sort(sorted.begin(), sorted.end());
  if (sorted != std::array<int, 3>{0, 1, 2}) throw DataError("perm must be a permutation of 0,1,2");
  for (int s : t.signs)
    if (s != 1 && s != -1) throw DataError("signs must be +1 or -1");
  return t;
}

}  // namespace focalmix
