#pragma once

// RaterParams file: "RATR", version u32, length-prefixed JSON (topology and
// training snapshot), tensor count u32, then per tensor: name (u32 length +
// UTF-8), dtype u8 (0 = f32, 1 = f64), rank u8, dims u32[rank], data.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "treeseg/io.hpp"
#include "treeseg/rater_net.hpp"

namespace treeseg {

inline constexpr std::uint32_t kRaterVersion = 1;

template <class T>
std::vector<unsigned char> encode_rater(const RaterNet<T>& net, const nlohmann::json& training = nlohmann::json::object()) {
  io::ByteWriter w;
  w.put_bytes("RATR");
  w.put(kRaterVersion);
  nlohmann::json meta = {{"topology", net.topology().to_json()}, {"training", training}};
  w.put_string(meta.dump());
  w.put(static_cast<std::uint32_t>(net.tensors().size()));
  for (const auto& t : net.tensors()) {
    w.put_string(t.name);
    w.put(static_cast<std::uint8_t>(std::is_same_v<T, double> ? 1 : 0));
    w.put(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) w.put(d);
    w.put_array(std::span<const T>(t.data));
  }
  return w.bytes();
}

struct RaterFile {
  RaterNet<float> net;
  nlohmann::json training;
};

/// Loads parameters into a float network; f64 tensors are narrowed.
inline RaterFile decode_rater(std::span<const unsigned char> bytes, const std::string& context) {
  io::ByteReader r(bytes, context);
  r.expect_magic("RATR");
  if (auto v = r.get<std::uint32_t>(); v != kRaterVersion) r.fail("unsupported version " + std::to_string(v));
  nlohmann::json meta;
  RaterTopology topo;
  try {
    meta = nlohmann::json::parse(r.get_string());
    topo = RaterTopology::from_json(meta.at("topology"));
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    r.fail(std::string("bad topology descriptor: ") + e.what());
  }
  RaterFile file{RaterNet<float>(topo), meta.value("training", nlohmann::json::object())};
  auto count = r.get<std::uint32_t>();
  if (count != file.net.tensors().size())
    r.fail("tensor count " + std::to_string(count) + " does not match topology (" +
           std::to_string(file.net.tensors().size()) + ")");
  for (std::uint32_t k = 0; k < count; ++k) {
    auto name = r.get_string();
    auto dtype = r.get<std::uint8_t>();
    auto rank = r.get<std::uint8_t>();
    std::vector<std::uint32_t> dims(rank);
    std::size_t n = 1;
    for (auto& d : dims) {
      d = r.get<std::uint32_t>();
      n *= d;
    }
    NamedTensor<float>* t = nullptr;
    for (auto& cand : file.net.tensors())
      if (cand.name == name) t = &cand;
    if (!t) r.fail("unknown tensor " + name);
    if (dims != t->shape) r.fail("shape of " + name + " does not match topology");
    if (dtype == 0) {
      t->data = r.get_array<float>(n);
    } else if (dtype == 1) {
      auto d = r.get_array<double>(n);
      t->data.assign(d.begin(), d.end());
    } else {
      r.fail("unknown dtype " + std::to_string(dtype));
    }
    for (float v : t->data)
      if (!std::isfinite(v)) r.fail("non-finite value in " + name);
  }
  if (!r.at_end()) r.fail("trailing bytes");
  return file;
}

template <class T>
void write_rater_file(const std::filesystem::path& path, const RaterNet<T>& net,
                      const nlohmann::json& training = nlohmann::json::object()) {
  io::write_atomic(path, encode_rater(net, training));
}

inline RaterFile read_rater_file(const std::filesystem::path& path) {
  return decode_rater(io::read_file(path), path.string());
}

}  // namespace treeseg
