#pragma once

// On-disk scan format: `<id>.vol` holds raw little-endian float32 voxels in
// z-major order; `<id>.json` is the sidecar
//   {"shape":[D,H,W], "spacing_mm":[a,b,c],
//    "boxes":[{"center":[z,y,x], "edge":e}, ...], "id":"..."}

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "focalmix/error.hpp"
#include "focalmix/volume.hpp"

namespace focalmix {

namespace fs = std::filesystem;

namespace detail {

inline std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
}

inline void write_file_atomic(const fs::path& path, const std::string& bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open '" + tmp.string() + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw DataError("cannot rename '" + tmp.string() + "': " + ec.message());
}

inline std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline std::string floats_to_le_bytes(const std::vector<float>& values) {
  std::string out(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint32_t le = to_le(std::bit_cast<std::uint32_t>(values[i]));
    std::memcpy(out.data() + 4 * i, &le, 4);
  }
  return out;
}

inline std::vector<float> le_bytes_to_floats(const std::string& bytes, std::size_t offset,
                                             std::size_t count) {
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t le;
    std::memcpy(&le, bytes.data() + offset + 4 * i, 4);
    out[i] = std::bit_cast<float>(to_le(le));
  }
  return out;
}

}  // namespace detail

inline nlohmann::json box_to_json(const Box3D& b) {
  return {{"center", {b.center[0], b.center[1], b.center[2]}}, {"edge", b.edge}};
}

inline Box3D box_from_json(const nlohmann::json& j) {
  Box3D b;
  const auto& c = j.at("center");
  if (!c.is_array() || c.size() != 3) throw DataError("box center must be a 3-array");
  for (int a = 0; a < 3; ++a) b.center[a] = c.at(a).get<double>();
  b.edge = j.at("edge").get<double>();
  return b;
}

inline nlohmann::json scan_sidecar(const LabeledScan& scan) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const auto& b : scan.boxes) boxes.push_back(box_to_json(b));
  const auto& v = scan.volume;
  return {{"shape", {v.shape[0], v.shape[1], v.shape[2]}},
          {"spacing_mm", {v.spacing[0], v.spacing[1], v.spacing[2]}},
          {"boxes", boxes},
          {"id", scan.id}};
}

/// Writes `<dir>/<id>.vol` and `<dir>/<id>.json`.
inline void write_scan(const LabeledScan& scan, const fs::path& dir) {
  validate_scan(scan);
  fs::create_directories(dir);
  detail::write_file_atomic(dir / (scan.id + ".vol"), detail::floats_to_le_bytes(scan.volume.voxels));
  detail::write_file_atomic(dir / (scan.id + ".json"), scan_sidecar(scan).dump(2) + "\n");
}

/// Reads a scan given its sidecar path, its `.vol` path, or the stem.
inline LabeledScan read_scan(const fs::path& path) {
  fs::path stem = path;
  if (stem.extension() == ".json" || stem.extension() == ".vol") stem.replace_extension();
  const fs::path json_path = stem.string() + ".json";
  const fs::path vol_path = stem.string() + ".vol";

  LabeledScan scan;
  try {
    const auto j = nlohmann::json::parse(detail::read_file(json_path));
    const auto& shape = j.at("shape");
    const auto& spacing = j.at("spacing_mm");
    if (!shape.is_array() || shape.size() != 3 || !spacing.is_array() || spacing.size() != 3)
      throw DataError("shape and spacing_mm must be 3-arrays");
    for (int a = 0; a < 3; ++a) {
      scan.volume.shape[a] = shape.at(a).get<int>();
      scan.volume.spacing[a] = spacing.at(a).get<double>();
      if (scan.volume.shape[a] <= 0) throw DataError("shape entries must be positive");
    }
    for (const auto& b : j.at("boxes")) scan.boxes.push_back(box_from_json(b));
    scan.id = j.at("id").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed sidecar '" + json_path.string() + "': " + e.what());
  }

  const std::string payload = detail::read_file(vol_path);
  const std::size_t n = voxel_count(scan.volume.shape);
  if (payload.size() != 4 * n)
    throw DataError("'" + vol_path.string() + "' holds " + std::to_string(payload.size()) +
                    " bytes, expected " + std::to_string(4 * n));
  scan.volume.voxels = detail::le_bytes_to_floats(payload, 0, n);
  validate_scan(scan);
  return scan;
}

/// Loads every scan in `dir` (sidecars sorted by file name).
inline std::vector<LabeledScan> read_scan_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: '" + dir.string() + "'");
  std::vector<fs::path> sidecars;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json") sidecars.push_back(e.path());
  std::sort(sidecars.begin(), sidecars.end());
  std::vector<LabeledScan> out;
  out.reserve(sidecars.size());
  for (const auto& p : sidecars) out.push_back(read_scan(p));
  return out;
}

}  // namespace focalmix
