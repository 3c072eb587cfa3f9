#pragma once

// Multi-date scene storage. A scene directory holds manifest.json, one
// headerless uint16-LE raster per (date, band) named "<date>_<band>.raw",
// and an optional uint8 mask.raw with values in {0,1}. Dimensions live only
// in the manifest.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdnet/common.hpp"

namespace cdnet {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

struct BandRaster {
  int height = 0;
  int width = 0;
  std::vector<uint16_t> values;  // row-major

  BandRaster() = default;
  BandRaster(int h, int w, uint16_t fill = 0)
      : height(h), width(w), values(static_cast<size_t>(h) * w, fill) {}

  uint16_t& at(int r, int c) { return values[static_cast<size_t>(r) * width + c]; }
  uint16_t at(int r, int c) const { return values[static_cast<size_t>(r) * width + c]; }
};

struct SceneManifest {
  std::string scene_id;
  std::vector<std::string> dates;  // ISO-8601, strictly ascending
  std::vector<std::string> bands;
  int height = 0;
  int width = 0;
};

struct ChangeMask {
  int height = 0;
  int width = 0;
  std::vector<uint8_t> labels;  // 0 = no-change, 1 = change

  ChangeMask() = default;
  ChangeMask(int h, int w, uint8_t fill = 0)
      : height(h), width(w), labels(static_cast<size_t>(h) * w, fill) {}

  uint8_t& at(int r, int c) { return labels[static_cast<size_t>(r) * width + c]; }
  uint8_t at(int r, int c) const { return labels[static_cast<size_t>(r) * width + c]; }
};

struct Scene {
  SceneManifest manifest;
  // rasters[t][b], t indexes manifest.dates, b indexes manifest.bands
  std::vector<std::vector<BandRaster>> rasters;
  std::optional<ChangeMask> mask;

  int num_dates() const { return static_cast<int>(manifest.dates.size()); }
  int num_bands() const { return static_cast<int>(manifest.bands.size()); }
  int height() const { return manifest.height; }
  int width() const { return manifest.width; }

  BandRaster& raster(int t, int b) { return rasters[t][b]; }
  const BandRaster& raster(int t, int b) const { return rasters[t][b]; }
};

// Per-band first/second moments over every pixel of every date of a scene
// set. Population std by definition.
struct BandStats {
  std::vector<std::string> bands;
  std::vector<double> mean;
  std::vector<double> stddev;

  int index_of(const std::string& band) const {
    for (size_t i = 0; i < bands.size(); ++i)
      if (bands[i] == band) return static_cast<int>(i);
    return -1;
  }
};

inline void validate_manifest(const SceneManifest& m) {
  check(m.height >= 1 && m.width >= 1, ErrKind::input, "manifest invalid: non-positive dimensions");
  check(m.dates.size() >= 2, ErrKind::input, "manifest invalid: fewer than two dates");
  check(!m.bands.empty(), ErrKind::input, "manifest invalid: no bands");
  for (size_t i = 1; i < m.dates.size(); ++i)
    check(m.dates[i - 1] < m.dates[i], ErrKind::input, "manifest invalid: dates not strictly ascending");
  std::set<std::string> uniq(m.bands.begin(), m.bands.end());
  check(uniq.size() == m.bands.size(), ErrKind::input, "manifest invalid: duplicate band names");
}

inline void validate_scene(const Scene& s) {
  validate_manifest(s.manifest);
  const auto& m = s.manifest;
  check(s.rasters.size() == m.dates.size(), ErrKind::input, "incomplete scene: missing date rows");
  for (const auto& row : s.rasters) {
    check(row.size() == m.bands.size(), ErrKind::input, "incomplete scene: missing band rasters");
    for (const auto& r : row) {
      check(r.height == m.height && r.width == m.width, ErrKind::input,
            "inconsistent rasters: dimension mismatch");
      check(r.values.size() == static_cast<size_t>(m.height) * m.width, ErrKind::input,
            "inconsistent rasters: value count mismatch");
    }
  }
  if (s.mask) {
    check(s.mask->height == m.height && s.mask->width == m.width, ErrKind::input,
          "inconsistent rasters: mask dimension mismatch");
    for (uint8_t v : s.mask->labels)
      check(v <= 1, ErrKind::input, "mask invalid: labels outside {0,1}");
  }
}

namespace detail {

inline std::vector<char> read_file(const fs::path& p, const char* missing_msg) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail_input(cat(missing_msg, ": ", p.string()));
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return buf;
}

inline void write_file(const fs::path& p, const void* data, size_t n) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) fail_runtime(cat("cannot write ", p.string()));
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) fail_runtime(cat("write failed for ", p.string()));
}

}  // namespace detail

inline fs::path raster_filename(const std::string& date, const std::string& band) {
  return date + "_" + band + ".raw";
}

inline Scene load_scene(const fs::path& dir) {
  auto manifest_bytes = detail::read_file(dir / "manifest.json", "incomplete scene: missing manifest");
  ordered_json j;
  try {
    j = ordered_json::parse(manifest_bytes.begin(), manifest_bytes.end());
  } catch (const std::exception& e) {
    fail_input(cat("manifest invalid: ", e.what()));
  }

  Scene s;
  bool has_mask = false;
  try {
    s.manifest.scene_id = j.at("scene_id").get<std::string>();
    s.manifest.dates = j.at("dates").get<std::vector<std::string>>();
    s.manifest.bands = j.at("bands").get<std::vector<std::string>>();
    s.manifest.height = j.at("height").get<int>();
    s.manifest.width = j.at("width").get<int>();
    has_mask = j.at("has_mask").get<bool>();
  } catch (const std::exception& e) {
    fail_input(cat("manifest invalid: ", e.what()));
  }
  validate_manifest(s.manifest);

  const size_t npix = static_cast<size_t>(s.manifest.height) * s.manifest.width;
  s.rasters.resize(s.manifest.dates.size());
  for (size_t t = 0; t < s.manifest.dates.size(); ++t) {
    s.rasters[t].reserve(s.manifest.bands.size());
    for (const auto& band : s.manifest.bands) {
      auto bytes = detail::read_file(dir / raster_filename(s.manifest.dates[t], band),
                                     "incomplete scene: missing raster");
      check(bytes.size() == npix * 2, ErrKind::input,
            cat("inconsistent rasters: ", raster_filename(s.manifest.dates[t], band).string(),
                " has wrong size"));
      BandRaster r(s.manifest.height, s.manifest.width);
      for (size_t i = 0; i < npix; ++i) {
        r.values[i] = static_cast<uint16_t>(static_cast<uint8_t>(bytes[2 * i]) |
                                            (static_cast<uint8_t>(bytes[2 * i + 1]) << 8));
      }
      s.rasters[t].push_back(std::move(r));
    }
  }

  if (has_mask) {
    auto bytes = detail::read_file(dir / "mask.raw", "incomplete scene: missing mask");
    check(bytes.size() == npix, ErrKind::input, "inconsistent rasters: mask has wrong size");
    ChangeMask m(s.manifest.height, s.manifest.width);
    for (size_t i = 0; i < npix; ++i) {
      uint8_t v = static_cast<uint8_t>(bytes[i]);
      check(v <= 1, ErrKind::input, "mask invalid: labels outside {0,1}");
      m.labels[i] = v;
    }
    s.mask = std::move(m);
  }

  validate_scene(s);
  return s;
}

inline void save_scene(const Scene& s, const fs::path& dir) {
  validate_scene(s);
  fs::create_directories(dir);

  ordered_json j;
  j["scene_id"] = s.manifest.scene_id;
  j["dates"] = s.manifest.dates;
  j["bands"] = s.manifest.bands;
  j["height"] = s.manifest.height;
  j["width"] = s.manifest.width;
  j["has_mask"] = s.mask.has_value();
  std::string text = j.dump(2) + "\n";
  detail::write_file(dir / "manifest.json", text.data(), text.size());

  const size_t npix = static_cast<size_t>(s.manifest.height) * s.manifest.width;
  std::vector<char> buf(npix * 2);
  for (size_t t = 0; t < s.manifest.dates.size(); ++t) {
    for (size_t b = 0; b < s.manifest.bands.size(); ++b) {
      const auto& r = s.rasters[t][b];
      for (size_t i = 0; i < npix; ++i) {
        buf[2 * i] = static_cast<char>(r.values[i] & 0xff);
        buf[2 * i + 1] = static_cast<char>(r.values[i] >> 8);
      }
      detail::write_file(dir / raster_filename(s.manifest.dates[t], s.manifest.bands[b]),
                         buf.data(), buf.size());
    }
  }

  if (s.mask) {
    detail::write_file(dir / "mask.raw", s.mask->labels.data(), npix);
  }
}

inline bool scene_equal(const Scene& a, const Scene& b) {
  if (a.manifest.scene_id != b.manifest.scene_id || a.manifest.dates != b.manifest.dates ||
      a.manifest.bands != b.manifest.bands || a.manifest.height != b.manifest.height ||
      a.manifest.width != b.manifest.width)
    return false;
  if (a.rasters.size() != b.rasters.size()) return false;
  for (size_t t = 0; t < a.rasters.size(); ++t)
    for (size_t c = 0; c < a.rasters[t].size(); ++c)
      if (a.rasters[t][c].values != b.rasters[t][c].values) return false;
  if (a.mask.has_value() != b.mask.has_value()) return false;
  if (a.mask && a.mask->labels != b.mask->labels) return false;
  return true;
}

inline BandStats scene_stats(const std::vector<Scene>& scenes) {
  check(!scenes.empty(), ErrKind::config, "empty scene list");
  const auto& bands = scenes.front().manifest.bands;
  for (const auto& s : scenes)
    check(s.manifest.bands == bands, ErrKind::config, "scenes do not share band names");

  BandStats st;
  st.bands = bands;
  st.mean.assign(bands.size(), 0.0);
  st.stddev.assign(bands.size(), 0.0);

  for (size_t b = 0; b < bands.size(); ++b) {
    double sum = 0.0, sumsq = 0.0;
    size_t n = 0;
    for (const auto& s : scenes) {
      for (int t = 0; t < s.num_dates(); ++t) {
        for (uint16_t v : s.raster(t, static_cast<int>(b)).values) {
          sum += v;
          sumsq += static_cast<double>(v) * v;
          ++n;
        }
      }
    }
    double mean = sum / static_cast<double>(n);
    double var = sumsq / static_cast<double>(n) - mean * mean;
    st.mean[b] = mean;
    st.stddev[b] = std::sqrt(std::max(0.0, var));
  }
  return st;
}

// Restrict a scene to a subset of its dates (indices ascending). Used by the
// ablation grid to build 2- and 3-date views of a longer acquisition stack.
inline Scene subset_dates(const Scene& s, const std::vector<int>& idx) {
  check(idx.size() >= 2, ErrKind::config, "date subset needs at least two dates");
  Scene out;
  out.manifest = s.manifest;
  out.manifest.dates.clear();
  out.rasters.clear();
  for (size_t k = 0; k < idx.size(); ++k) {
    int i = idx[k];
    check(i >= 0 && i < s.num_dates(), ErrKind::config, "date subset index out of range");
    if (k > 0) check(idx[k - 1] < i, ErrKind::config, "date subset indices must ascend");
    out.manifest.dates.push_back(s.manifest.dates[i]);
    out.rasters.push_back(s.rasters[i]);
  }
  out.mask = s.mask;
  validate_scene(out);
  return out;
}

// Evenly spaced date-index subset including both endpoints.
inline std::vector<int> spread_date_indices(int available, int wanted) {
  check(wanted >= 2 && wanted <= available, ErrKind::config, "cannot select that many dates");
  std::vector<int> idx(wanted);
  for (int j = 0; j < wanted; ++j) {
    idx[j] = static_cast<int>(std::lround(static_cast<double>(j) * (available - 1) / (wanted - 1)));
  }
  return idx;
}

}  // namespace cdnet
