#pragma once

// Stack directories: one raw little-endian float32 file per slice
// (slice_000.raw, ..., x fastest) and a manifest.json:
//
//   {"format":"affirm-stack","version":1,"datatype":"float32","byte_order":"little",
//    "orientation":"axial","width":48,"height":48,"in_plane_spacing_mm":[2,2],
//    "slice_thickness_mm":4,"psf_sigma_mm":1.70,"center_mm":[..],
//    "slice_offsets_mm":[..],"acquisition_order":[..],
//    "slices":[{"file":"slice_000.raw","brain":true,
//               "est_transform":{..},"true_transform":{..}}, ...]}
//
// true_transform is present only for simulated data. Transforms use the JSON
// form of to_json(RigidTransform).

#include <cstdio>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "affirm/acquisition.hpp"
#include "affirm/volume_io.hpp"

namespace affirm {

inline std::string slice_file_name(std::size_t k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "slice_%03zu.raw", k);
  return buf;
}

inline void save_stack(const SliceStack& s, const std::filesystem::path& dir) {
  s.validate();
  const auto& g = s.geometry;
  nlohmann::json m;
  m["format"] = "affirm-stack";
  m["version"] = 1;
  m["datatype"] = "float32";
  m["byte_order"] = "little";
  m["orientation"] = to_string(g.orientation);
  m["width"] = g.width;
  m["height"] = g.height;
  m["in_plane_spacing_mm"] = {g.in_plane_spacing_mm[0], g.in_plane_spacing_mm[1]};
  m["slice_thickness_mm"] = g.slice_thickness_mm;
  m["psf_sigma_mm"] = g.psf_sigma_mm;
  m["center_mm"] = io::vec_json(g.center);
  m["slice_offsets_mm"] = g.slice_offsets_mm;
  m["acquisition_order"] = s.acquisition_order;
  nlohmann::json slices = nlohmann::json::array();
  for (std::size_t k = 0; k < s.size(); ++k) {
    nlohmann::json e{{"file", slice_file_name(k)},
                     {"brain", static_cast<bool>(s.brain_mask[k])},
                     {"est_transform", to_json(s.est_transforms[k])}};
    if (s.true_transforms) e["true_transform"] = to_json((*s.true_transforms)[k]);
    slices.push_back(e);
    io::write_file(dir / slice_file_name(k), io::encode_f32(s.slices[k].data));
  }
  m["slices"] = slices;
  io::write_json(dir / "manifest.json", m);
}

inline SliceStack load_stack(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw InvalidInput("stack directory not found: " + dir.string());
  const auto m = io::read_json(dir / "manifest.json");
  SliceStack s;
  try {
    if (m.value("format", "") != "affirm-stack") throw InvalidInput("not an affirm-stack manifest: " + dir.string());
    if (m.value("datatype", "float32") != "float32" || m.value("byte_order", "little") != "little")
      throw InvalidInput("unsupported stack datatype or byte order");
    auto& g = s.geometry;
    g.orientation = orientation_from_string(m.at("orientation").get<std::string>());
    g.width = m.at("width");
    g.height = m.at("height");
    g.in_plane_spacing_mm = m.at("in_plane_spacing_mm").get<std::array<double, 2>>();
    g.slice_thickness_mm = m.at("slice_thickness_mm");
    g.psf_sigma_mm = m.at("psf_sigma_mm");
    g.center = io::json_vec3(m, "center_mm");
    g.slice_offsets_mm = m.at("slice_offsets_mm").get<std::vector<double>>();
    s.acquisition_order = m.at("acquisition_order").get<std::vector<int>>();
    const auto& slices = m.at("slices");
    if (slices.size() != g.n_slices()) throw InvalidInput("stack manifest: slice count mismatch");
    bool has_truth = true;
    for (const auto& e : slices) has_truth = has_truth && e.contains("true_transform");
    if (has_truth) s.true_transforms.emplace();
    for (const auto& e : slices) {
      const std::string bytes = io::read_file(dir / e.at("file").get<std::string>());
      if (bytes.size() != 4u * g.width * g.height)
        throw InvalidInput("stack slice size mismatch in " + e.at("file").get<std::string>());
      Image2D img(g.width, g.height);
      img.data = io::decode_f32(bytes);
      s.slices.push_back(std::move(img));
      s.brain_mask.push_back(e.at("brain").get<bool>());
      s.est_transforms.push_back(transform_from_json(e.at("est_transform")));
      if (has_truth) s.true_transforms->push_back(transform_from_json(e.at("true_transform")));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput("malformed stack manifest in " + dir.string() + ": " + e.what());
  }
  s.time_index.assign(s.size(), 0);
  for (std::size_t t = 0; t < s.acquisition_order.size(); ++t) {
    const int k = s.acquisition_order[t];
    if (k < 0 || static_cast<std::size_t>(k) >= s.size()) throw InvalidInput("stack manifest: bad acquisition order");
    s.time_index[k] = static_cast<int>(t);
  }
  s.validate();
  return s;
}

}  // namespace affirm
