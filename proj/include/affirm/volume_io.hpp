#pragma once

// Native volume format: a raw payload of little-endian float32 values
// (x fastest, then y, then z) next to a JSON sidecar:
//
//   {"format":"affirm-volume","version":1,"datatype":"float32",
//    "byte_order":"little","dims":[nx,ny,nz],
//    "spacing_mm":[sx,sy,sz],"origin_mm":[ox,oy,oz],"intensity_max":m}
//
// `save_volume(v, "a/b.raw")` writes a/b.raw and a/b.json. Header numbers are
// written with round-trip precision, so headers survive save/load exactly;
// intensities round to float32 on save.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "affirm/volume.hpp"

namespace affirm {

namespace io {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

inline std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
}

inline std::uint64_t to_little64(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  std::uint64_t r = 0;
  for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xFFu) << (8 * (7 - i));
  return r;
}

// float32 little-endian encode/decode of a double array.
inline std::string encode_f32(const std::vector<double>& values) {
  std::string out(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = to_little(std::bit_cast<std::uint32_t>(static_cast<float>(values[i])));
    std::memcpy(out.data() + 4 * i, &bits, 4);
  }
  return out;
}

inline std::vector<double> decode_f32(const std::string& bytes) {
  std::vector<double> out(bytes.size() / 4);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, bytes.data() + 4 * i, 4);
    out[i] = static_cast<double>(std::bit_cast<float>(to_little(bits)));
  }
  return out;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InvalidInput("cannot open " + p.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidInput("cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline nlohmann::json read_json(const std::filesystem::path& p) {
  try {
    return nlohmann::json::parse(read_file(p));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput("malformed JSON in " + p.string() + ": " + e.what());
  }
}

inline void write_json(const std::filesystem::path& p, const nlohmann::json& j) {
  write_file(p, j.dump(2) + "\n");
}

inline nlohmann::json vec_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }

inline Vec3 json_vec3(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || !j.at(key).is_array() || j.at(key).size() != 3)
    throw InvalidInput(std::string("missing or malformed 3-vector '") + key + "'");
  for (const auto& e : j.at(key))
    if (!e.is_number()) throw InvalidInput(std::string("non-numeric entry in '") + key + "'");
  return {j.at(key)[0].get<double>(), j.at(key)[1].get<double>(), j.at(key)[2].get<double>()};
}

}  // namespace io

inline std::filesystem::path sidecar_path(const std::filesystem::path& raw) {
  auto p = raw;
  return p.replace_extension(".json");
}

inline nlohmann::json grid_to_json(const Grid& g) {
  return {{"dims", {g.dims[0], g.dims[1], g.dims[2]}},
          {"spacing_mm", io::vec_json(g.spacing)},
          {"origin_mm", io::vec_json(g.origin)}};
}

inline Grid grid_from_json(const nlohmann::json& j) {
  Grid g;
  if (!j.contains("dims") || !j.at("dims").is_array() || j.at("dims").size() != 3)
    throw InvalidInput("malformed header: 'dims' must be a 3-array");
  for (int a = 0; a < 3; ++a) {
    if (!j.at("dims")[a].is_number_integer()) throw InvalidInput("malformed header: non-integer dims");
    g.dims[a] = j.at("dims")[a].get<int>();
  }
  g.spacing = io::json_vec3(j, "spacing_mm");
  g.origin = io::json_vec3(j, "origin_mm");
  try {
    g.validate();
  } catch (const InvalidInput& e) {
    throw InvalidInput(std::string("malformed header: ") + e.what());
  }
  return g;
}

inline void save_volume(const Volume3D& v, const std::filesystem::path& raw_path) {
  nlohmann::json h = grid_to_json(v.grid);
  h["format"] = "affirm-volume";
  h["version"] = 1;
  h["datatype"] = "float32";
  h["byte_order"] = "little";
  h["intensity_max"] = v.intensity_max;
  io::write_json(sidecar_path(raw_path), h);
  io::write_file(raw_path, io::encode_f32(v.data));
}

inline Volume3D load_volume(const std::filesystem::path& raw_path) {
  const auto h = io::read_json(sidecar_path(raw_path));
  if (!h.is_object()) throw InvalidInput("malformed header: not a JSON object");
  const std::string dtype = h.value("datatype", "float32");
  if (dtype != "float32") throw InvalidInput("unsupported datatype '" + dtype + "'");
  if (h.value("byte_order", "little") != "little") throw InvalidInput("unsupported byte order");
  Volume3D v(grid_from_json(h));
  if (h.contains("intensity_max") && h.at("intensity_max").is_number())
    v.intensity_max = h.at("intensity_max").get<double>();
  const std::string bytes = io::read_file(raw_path);
  if (bytes.size() != 4 * v.grid.size())
    throw InvalidInput("size mismatch: header expects " + std::to_string(4 * v.grid.size()) +
                       " bytes, payload has " + std::to_string(bytes.size()));
  v.data = io::decode_f32(bytes);
  return v;
}

}  // namespace affirm
