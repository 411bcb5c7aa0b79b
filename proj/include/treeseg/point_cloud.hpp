#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "treeseg/error.hpp"

namespace treeseg {

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

inline double distance(const Vec3& a, const Vec3& b) {
  return std::sqrt((a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y) + (a.z - b.z) * (a.z - b.z));
}

struct Bounds {
  Vec3 min{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
           std::numeric_limits<double>::infinity()};
  Vec3 max{-std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
           -std::numeric_limits<double>::infinity()};

  void extend(double x, double y, double z) {
    min = {std::min(min.x, x), std::min(min.y, y), std::min(min.z, z)};
    max = {std::max(max.x, x), std::max(max.y, y), std::max(max.z, z)};
  }
  bool empty() const { return min.x > max.x; }
};

/// Columnar point storage. Coordinates are f64 (projected CRS, meters);
/// height above ground is f32 and starts at zero until heights are normalized.
struct PointCloud {
  std::vector<double> x, y, z;
  std::vector<float> hag;
  std::vector<float> intensity;      // empty when absent
  std::vector<std::uint8_t> rgb;     // 3 per point, empty when absent

  std::size_t size() const { return x.size(); }
  bool empty() const { return x.empty(); }
  bool has_intensity() const { return !intensity.empty(); }
  bool has_rgb() const { return !rgb.empty(); }

  Vec3 position(std::size_t i) const { return {x[i], y[i], z[i]}; }

  void reserve(std::size_t n) {
    x.reserve(n);
    y.reserve(n);
    z.reserve(n);
    hag.reserve(n);
  }

  void push_back(double px, double py, double pz, float h = 0.0f) {
    x.push_back(px);
    y.push_back(py);
    z.push_back(pz);
    hag.push_back(h);
  }

  Bounds bounds() const {
    Bounds b;
    for (std::size_t i = 0; i < size(); ++i) b.extend(x[i], y[i], z[i]);
    return b;
  }

  // Copy of the points at the given indices, attributes included.
  PointCloud subset(std::span<const std::uint32_t> indices) const {
    PointCloud out;
    out.reserve(indices.size());
    for (auto i : indices) {
      out.push_back(x[i], y[i], z[i], hag[i]);
      if (has_intensity()) out.intensity.push_back(intensity[i]);
      if (has_rgb()) out.rgb.insert(out.rgb.end(), rgb.begin() + 3 * i, rgb.begin() + 3 * i + 3);
    }
    return out;
  }
};

enum class TextFormat { xyz, csv };

struct IngestResult {
  PointCloud cloud;
  std::size_t rejected_rows = 0;
  std::size_t first_rejected_line = 0;  // 1-based, 0 when nothing was rejected
};

namespace detail {

inline bool parse_double(std::string_view tok, double& out) {
  while (!tok.empty() && (tok.front() == ' ' || tok.front() == '\t')) tok.remove_prefix(1);
  while (!tok.empty() && (tok.back() == ' ' || tok.back() == '\t' || tok.back() == '\r')) tok.remove_suffix(1);
  if (tok.empty()) return false;
  if (tok.front() == '+') tok.remove_prefix(1);
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), out);
  return ec == std::errc() && ptr == tok.data() + tok.size();
}

inline std::vector<std::string_view> split_row(std::string_view line, TextFormat format) {
  std::vector<std::string_view> tokens;
  if (format == TextFormat::csv) {
    std::size_t start = 0;
    while (true) {
      auto pos = line.find(',', start);
      tokens.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
      if (pos == std::string_view::npos) break;
      start = pos + 1;
    }
  } else {
    std::size_t i = 0;
    while (i < line.size()) {
      while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
      std::size_t j = i;
      while (j < line.size() && line[j] != ' ' && line[j] != '\t' && line[j] != '\r') ++j;
      if (j > i) tokens.push_back(line.substr(i, j - i));
      i = j;
    }
  }
  return tokens;
}

}  // namespace detail

/// Parses whitespace-separated (xyz) or comma-separated (csv) rows of
/// `x y z [i] [r g b]`. The column layout is fixed by the first valid row:
/// 3 = xyz, 4 or 5 = xyz+intensity, 6 = xyz+rgb, 7+ = xyz+intensity+rgb.
/// Rows that do not fit the layout or carry non-finite values are tallied
/// and skipped. Blank lines and lines starting with '#' are ignored, as is a
/// csv header line made only of non-numeric tokens.
inline IngestResult ingest_xyz(const std::filesystem::path& path, TextFormat format) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read point file " + path.string());

  IngestResult result;
  int layout = -1;  // number of columns used
  bool with_intensity = false, with_rgb = false;
  std::string line;
  std::size_t line_no = 0;
  bool header_checked = false;
  auto reject = [&] {
    if (result.rejected_rows++ == 0) result.first_rejected_line = line_no;
  };

  while (std::getline(in, line)) {
    ++line_no;
    std::string_view sv(line);
    auto first = sv.find_first_not_of(" \t\r");
    if (first == std::string_view::npos || sv[first] == '#') continue;
    auto tokens = detail::split_row(sv, format);

    if (format == TextFormat::csv && !header_checked) {
      header_checked = true;
      bool any_numeric = false;
      double tmp;
      for (auto t : tokens) any_numeric |= detail::parse_double(t, tmp);
      if (!any_numeric) continue;
    }
    header_checked = true;

    if (layout < 0) {
      if (tokens.size() < 3) {
        reject();
        continue;
      }
      layout = tokens.size() >= 7 ? 7 : tokens.size() == 6 ? 6 : tokens.size() >= 4 ? 4 : 3;
      with_intensity = layout == 4 || layout == 7;
      with_rgb = layout >= 6;
    }
    if (static_cast<int>(tokens.size()) < layout) {
      reject();
      continue;
    }
    double v[7];
    bool ok = true;
    for (int c = 0; c < layout && ok; ++c) ok = detail::parse_double(tokens[c], v[c]) && std::isfinite(v[c]);
    int rgb0 = with_intensity ? 4 : 3;
    if (ok && with_rgb)
      for (int c = rgb0; c < rgb0 + 3; ++c) ok &= v[c] >= 0.0 && v[c] <= 255.0;
    if (!ok) {
      reject();
      continue;
    }
    result.cloud.push_back(v[0], v[1], v[2]);
    if (with_intensity) result.cloud.intensity.push_back(static_cast<float>(v[3]));
    if (with_rgb)
      for (int c = rgb0; c < rgb0 + 3; ++c)
        result.cloud.rgb.push_back(static_cast<std::uint8_t>(std::lround(v[c])));
  }
  if (result.cloud.empty())
    throw FormatError("zero valid rows in " + path.string() + " (" + std::to_string(result.rejected_rows) +
                      " rejected)");
  return result;
}

}  // namespace treeseg
