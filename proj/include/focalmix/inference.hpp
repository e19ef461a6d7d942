#pragma once

#include <span>
#include <vector>

#include "focalmix/anchors.hpp"
#include "focalmix/detector.hpp"
#include "focalmix/volume.hpp"

namespace focalmix {

/// Normalised copy of `v`, zero-padded at the far end of each axis up to a
/// multiple of `multiple`.
inline Volume3D prepare_input(const Volume3D& v, int multiple) {
  Shape3 padded{};
  for (int a = 0; a < 3; ++a) padded[a] = (v.shape[a] + multiple - 1) / multiple * multiple;
  Volume3D out = v;
  normalize(out);
  if (padded == v.shape) return out;
  Volume3D p(padded, v.spacing);
  for (int z = 0; z < v.shape[0]; ++z)
    for (int y = 0; y < v.shape[1]; ++y)
      for (int x = 0; x < v.shape[2]; ++x) p.at(z, y, x) = out.at(z, y, x);
  return p;
}

/// Full-volume detection: one fully convolutional pass, decode, NMS.
template <typename T>
std::vector<Detection> detect(const ModelState<T>& s, const Volume3D& volume, const DecodeParams& dp = {}) {
  const Volume3D in = prepare_input(volume, s.config.levels.back().stride);
  const DetectorOutput out = forward_any(s, in);
  const AnchorGrid grid(in.shape, s.config.levels);
  auto dets = decode_detections(grid, out.probs, out.offsets, dp);
  std::erase_if(dets, [&](const Detection& d) { return !center_inside(d.box, volume.shape); });
  return dets;
}

}  // namespace focalmix
