// SPDX-License-Identifier: Apache-2.0
//
// Binary model checkpoint.
//
//   u8   format version (1)
//   u64  length of the JSON layout, then the layout itself:
//        {"model": ModelConfig, "experts": [{"heads": h, "classes": [...]}, ...]}
//   u64  parameter count, then per parameter:
//        u32 name length, name, u32 rank, u64 dims[rank], f64 data[numel]
//
// Integers and doubles are little-endian. Loading rebuilds the architecture
// from the layout and then overwrites every parameter by name, so a file
// written by a different architecture is rejected instead of misread.
#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "dne/config.hpp"

namespace dne {

inline constexpr std::uint8_t kCheckpointVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& in, const char* what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw FormatError(std::string("checkpoint truncated while reading ") + what);
  return v;
}

inline std::string get_string(std::istream& in, std::size_t n, const char* what) {
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw FormatError(std::string("checkpoint truncated while reading ") + what);
  return s;
}

}  // namespace detail

inline Json checkpoint_layout(const CilModel& m) {
  Json experts = Json::array();
  for (const auto& e : m.experts()) experts.push_back(Json{{"heads", e.heads}, {"classes", e.classes}});
  return Json{{"model", to_json(m.config())}, {"experts", experts}};
}

inline void save_checkpoint(const CilModel& m, std::ostream& out) {
  const std::string layout = checkpoint_layout(m).dump();
  detail::put<std::uint8_t>(out, kCheckpointVersion);
  detail::put<std::uint64_t>(out, layout.size());
  out.write(layout.data(), static_cast<std::streamsize>(layout.size()));
  std::uint64_t count = 0;
  m.visit_parameters([&](const std::string&, const Tensor&) { ++count; });
  detail::put<std::uint64_t>(out, count);
  m.visit_parameters([&](const std::string& name, const Tensor& t) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape) detail::put<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  });
  if (!out) throw FormatError("checkpoint write failed");
}

inline void save_checkpoint(const CilModel& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot create checkpoint '" + path + "'");
  save_checkpoint(m, out);
}

/// Rebuilds a model from a checkpoint. Every parameter comes back frozen.
inline CilModel load_checkpoint(std::istream& in) {
  const auto version = detail::get<std::uint8_t>(in, "version");
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto layout_size = detail::get<std::uint64_t>(in, "layout length");
  Json layout;
  try {
    layout = Json::parse(detail::get_string(in, layout_size, "layout"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint layout is not valid JSON: ") + e.what());
  }
  CilModel m;
  try {
    m = CilModel(model_config_from_json(layout.at("model")));
    Rng rng(0);
    for (const auto& e : layout.at("experts"))
      m.add_expert(e.at("heads").get<std::size_t>(), e.at("classes").get<std::vector<int>>(), rng);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint layout is malformed: ") + e.what());
  }

  std::map<std::string, Tensor*> slots;
  m.visit_parameters([&](const std::string& name, Tensor& t) { slots[name] = &t; });
  const auto count = detail::get<std::uint64_t>(in, "parameter count");
  if (count != slots.size())
    throw FormatError("checkpoint has " + std::to_string(count) + " parameters, layout needs " +
                      std::to_string(slots.size()));
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = detail::get<std::uint32_t>(in, "name length");
    const std::string name = detail::get_string(in, len, "name");
    auto it = slots.find(name);
    if (it == slots.end()) throw FormatError("checkpoint parameter '" + name + "' is not in the layout");
    Tensor& t = *it->second;
    const auto rank = detail::get<std::uint32_t>(in, "rank");
    Shape shape(rank);
    for (auto& d : shape) d = detail::get<std::uint64_t>(in, "shape");
    if (shape != t.shape)
      throw FormatError("checkpoint parameter '" + name + "' has shape " + shape_string(shape) +
                        ", layout expects " + shape_string(t.shape));
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!in) throw FormatError("checkpoint truncated in parameter '" + name + "'");
    slots.erase(it);
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("checkpoint has trailing bytes");
  m.freeze_all();
  return m;
}

inline CilModel load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
  return load_checkpoint(in);
}

}  // namespace dne
