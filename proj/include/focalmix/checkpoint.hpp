#pragma once

// Checkpoint file: 8-byte magic "FMXCKPT1", little-endian uint64 header
// length, JSON header, then every parameter's raw little-endian payload in
// header order.
//   header = {"dtype": "float32"|"float64", "step": N, "config": {...},
//             "params": [{"name", "shape", "count"}, ...]}

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <type_traits>

#include <json.hpp>

#include "focalmix/detector.hpp"
#include "focalmix/error.hpp"
#include "focalmix/scan_io.hpp"

namespace focalmix {

inline constexpr char kCheckpointMagic[8] = {'F', 'M', 'X', 'C', 'K', 'P', 'T', '1'};

namespace detail {

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "float32";
  else return "float64";
}

template <typename U>
void append_le(std::string& out, U bits) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t b = 0; b < sizeof(U); ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

template <typename U>
U read_le(const std::string& in, std::size_t at) {
  U v = 0;
  for (std::size_t b = 0; b < sizeof(U); ++b)
    v |= static_cast<U>(static_cast<unsigned char>(in[at + b])) << (8 * b);
  return v;
}

template <typename T>
using bits_of = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

}  // namespace detail

template <typename T>
std::string serialize_checkpoint(const ModelState<T>& s) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : s.params) params.push_back({{"name", p.name}, {"shape", p.shape}, {"count", p.value.size()}});
  const nlohmann::json header = {{"dtype", detail::dtype_name<T>()},
                                 {"step", s.step},
                                 {"config", to_json_value(s.config)},
                                 {"params", params}};
  const std::string h = header.dump();
  std::string out(kCheckpointMagic, 8);
  detail::append_le<std::uint64_t>(out, h.size());
  out += h;
  for (const auto& p : s.params)
    for (T v : p.value) detail::append_le(out, std::bit_cast<detail::bits_of<T>>(v));
  return out;
}

template <typename T>
void save_checkpoint(const ModelState<T>& s, const fs::path& path) {
  detail::write_file_atomic(path, serialize_checkpoint(s));
}

/// Loads parameters into a freshly initialised model of the stored config.
/// Adam moments start at zero.
template <typename T>
ModelState<T> load_checkpoint(const fs::path& path) {
  const std::string bytes = detail::read_file(path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw DataError("'" + path.string() + "' is not a checkpoint");
  const auto hlen = detail::read_le<std::uint64_t>(bytes, 8);
  if (hlen > bytes.size() - 16) throw DataError("checkpoint header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed checkpoint header: ") + e.what());
  }
  if (header.at("dtype").get<std::string>() != detail::dtype_name<T>())
    throw DataError("checkpoint dtype mismatch");
  DetectorConfig cfg = detector_config_from_json(header.at("config"));
  ModelState<T> s;
  try {
    s = init_model<T>(cfg);
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint config invalid: ") + e.what());
  }
  s.step = header.at("step").get<std::int64_t>();
  const auto& params = header.at("params");
  if (params.size() != s.params.size()) throw DataError("checkpoint parameter list does not match its config");
  std::size_t at = 16 + hlen;
  for (std::size_t k = 0; k < s.params.size(); ++k) {
    auto& p = s.params[k];
    if (params[k].at("name").get<std::string>() != p.name ||
        params[k].at("shape").get<std::vector<int>>() != p.shape)
      throw DataError("checkpoint parameter '" + p.name + "' does not match its config");
    if (bytes.size() < at + p.value.size() * sizeof(T)) throw DataError("checkpoint payload truncated");
    for (T& v : p.value) {
      v = std::bit_cast<T>(detail::read_le<detail::bits_of<T>>(bytes, at));
      at += sizeof(T);
    }
  }
  if (at != bytes.size()) throw DataError("checkpoint has trailing bytes");
  return s;
}

}  // namespace focalmix
