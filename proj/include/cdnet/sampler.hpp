#pragma once

// Training patch inventory: change-aware dual-stride window extraction,
// threshold-gated dihedral augmentation, inverse-frequency class weights,
// per-band standardization.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdnet/common.hpp"
#include "cdnet/raster.hpp"
#include "cdnet/tensor.hpp"

namespace cdnet {

struct SamplerConfig {
  int patch_size = 32;
  int stride_change = 6;     // grid for windows that contain change pixels
  int stride_nochange = 32;  // grid for windows without any change pixel
  double aug_threshold = 0.05;
};

inline void validate_sampler_config(const SamplerConfig& c) {
  check(c.patch_size >= 1, ErrKind::config, "invalid sampler config: patch_size < 1");
  check(c.stride_change >= 1 && c.stride_change <= c.patch_size, ErrKind::config,
        "invalid sampler config: stride_change out of [1, patch_size]");
  check(c.stride_nochange >= 1 && c.stride_nochange <= c.patch_size, ErrKind::config,
        "invalid sampler config: stride_nochange out of [1, patch_size]");
  check(c.aug_threshold >= 0.0 && c.aug_threshold <= 1.0, ErrKind::config,
        "invalid sampler config: aug_threshold out of [0,1]");
}

struct PatchOrigin {
  std::string scene_id;
  int row = 0;
  int col = 0;
  int transform_id = 0;  // dihedral element, 0 = identity
};

struct Patch {
  Tensor pixels;                // (T, C, ps, ps), normalized float32
  std::vector<uint8_t> labels;  // ps*ps, row-major, {0,1}
  PatchOrigin origin;

  size_t change_pixels() const {
    size_t n = 0;
    for (uint8_t v : labels) n += v;
    return n;
  }
};

struct PatchSet {
  std::vector<Patch> patches;
  size_t n_nochange = 0;
  size_t n_change = 0;
  int num_dates = 0;
  int num_bands = 0;
  int patch_size = 0;
};

struct ClassWeights {
  double w_nochange = 1.0;
  double w_change = 1.0;
};

// ---------------------------------------------------------------------------
// normalization

inline float normalize_pixel(double x, const BandStats& st, int band_idx) {
  double denom = std::max(st.stddev[static_cast<size_t>(band_idx)], 1e-6);
  return static_cast<float>((x - st.mean[static_cast<size_t>(band_idx)]) / denom);
}

inline std::vector<float> normalize_band(const std::vector<uint16_t>& raw, const BandStats& st,
                                         const std::string& band) {
  int idx = st.index_of(band);
  check(idx >= 0, ErrKind::config, cat("unknown band: ", band));
  std::vector<float> out(raw.size());
  for (size_t i = 0; i < raw.size(); ++i) out[i] = normalize_pixel(raw[i], st, idx);
  return out;
}

// ---------------------------------------------------------------------------
// dihedral group of the square

// For output cell (r, c) of transform `id`, source_cell() names the input
// cell it copies. 0 identity, 1/2/3 rotations by 90/180/270 cw, 4 horizontal
// flip, 5 vertical flip, 6 transpose, 7 anti-transpose.
inline std::pair<int, int> dihedral_source_cell(int id, int r, int c, int n) {
  switch (id) {
    case 0: return {r, c};
    case 1: return {n - 1 - c, r};
    case 2: return {n - 1 - r, n - 1 - c};
    case 3: return {c, n - 1 - r};
    case 4: return {r, n - 1 - c};
    case 5: return {n - 1 - r, c};
    case 6: return {c, r};
    case 7: return {n - 1 - c, n - 1 - r};
    default: fail_config("dihedral id out of range");
  }
}

namespace detail {

// compose(a, b) = element equivalent to applying b first, then a
inline int dihedral_compose(int a, int b) {
  static const auto table = [] {
    std::array<std::array<int, 8>, 8> t{};
    // identify each composition by its action on a 3x3 index grid
    auto fingerprint = [](int first, int second) {
      std::array<int, 9> g{};
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) {
          auto [r1, c1] = dihedral_source_cell(second, r, c, 3);
          auto [r0, c0] = dihedral_source_cell(first, r1, c1, 3);
          g[static_cast<size_t>(r) * 3 + c] = r0 * 3 + c0;
        }
      return g;
    };
    for (int a = 0; a < 8; ++a)
      for (int b = 0; b < 8; ++b) {
        auto want = fingerprint(b, a);
        for (int e = 0; e < 8; ++e) {
          auto single = fingerprint(e, 0);
          if (single == want) {
            t[static_cast<size_t>(a)][static_cast<size_t>(b)] = e;
            break;
          }
        }
      }
    return t;
  }();
  return table[static_cast<size_t>(a)][static_cast<size_t>(b)];
}

inline int dihedral_inverse(int a) {
  for (int e = 0; e < 8; ++e)
    if (dihedral_compose(a, e) == 0) return e;
  fail_config("dihedral id out of range");
}

}  // namespace detail

template <typename T>
std::vector<T> dihedral_apply_plane(const std::vector<T>& in, int id, int n) {
  std::vector<T> out(in.size());
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      auto [sr, sc] = dihedral_source_cell(id, r, c, n);
      out[static_cast<size_t>(r) * n + c] = in[static_cast<size_t>(sr) * n + sc];
    }
  return out;
}

inline int dihedral_compose(int a, int b) { return detail::dihedral_compose(a, b); }
inline int dihedral_inverse(int a) { return detail::dihedral_inverse(a); }

inline Patch dihedral_apply(const Patch& p, int id) {
  const int ps = p.pixels.dim(2);
  Patch out;
  out.origin = p.origin;
  out.origin.transform_id = detail::dihedral_compose(id, p.origin.transform_id);
  out.labels = dihedral_apply_plane(p.labels, id, ps);
  out.pixels = p.pixels;
  const int planes = p.pixels.dim(0) * p.pixels.dim(1);
  const size_t plane_sz = static_cast<size_t>(ps) * ps;
  for (int k = 0; k < planes; ++k) {
    std::vector<float> plane(p.pixels.v.begin() + k * plane_sz,
                             p.pixels.v.begin() + (k + 1) * plane_sz);
    auto t = dihedral_apply_plane(plane, id, ps);
    std::copy(t.begin(), t.end(), out.pixels.v.begin() + k * plane_sz);
  }
  return out;
}

// ---------------------------------------------------------------------------
// extraction

inline PatchSet extract_patches(const Scene& scene, const SamplerConfig& cfg, const BandStats& stats) {
  validate_sampler_config(cfg);
  check(scene.mask.has_value(), ErrKind::config, "scene has no mask");
  const int H = scene.height(), W = scene.width(), ps = cfg.patch_size;
  check(H >= ps && W >= ps, ErrKind::config, "scene smaller than patch size");
  for (const auto& b : scene.manifest.bands)
    check(stats.index_of(b) >= 0, ErrKind::config, cat("unknown band: ", b));

  const ChangeMask& mask = *scene.mask;

  // summed-area table for O(1) change counts per window
  std::vector<int64_t> sat(static_cast<size_t>(H + 1) * (W + 1), 0);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c)
      sat[static_cast<size_t>(r + 1) * (W + 1) + (c + 1)] =
          static_cast<int64_t>(mask.at(r, c)) + sat[static_cast<size_t>(r) * (W + 1) + (c + 1)] +
          sat[static_cast<size_t>(r + 1) * (W + 1) + c] - sat[static_cast<size_t>(r) * (W + 1) + c];
  auto window_change = [&](int r, int c) {
    return sat[static_cast<size_t>(r + ps) * (W + 1) + (c + ps)] -
           sat[static_cast<size_t>(r) * (W + 1) + (c + ps)] -
           sat[static_cast<size_t>(r + ps) * (W + 1) + c] + sat[static_cast<size_t>(r) * (W + 1) + c];
  };

  std::set<std::pair<int, int>> origins;
  for (int r = 0; r + ps <= H; r += cfg.stride_change)
    for (int c = 0; c + ps <= W; c += cfg.stride_change)
      if (window_change(r, c) > 0) origins.insert({r, c});
  for (int r = 0; r + ps <= H; r += cfg.stride_nochange)
    for (int c = 0; c + ps <= W; c += cfg.stride_nochange)
      if (window_change(r, c) == 0) origins.insert({r, c});

  const int T = scene.num_dates(), C = scene.num_bands();
  std::vector<int> band_idx(static_cast<size_t>(C));
  for (int b = 0; b < C; ++b) band_idx[b] = stats.index_of(scene.manifest.bands[b]);

  PatchSet out;
  out.num_dates = T;
  out.num_bands = C;
  out.patch_size = ps;
  for (auto [r, c] : origins) {
    Patch p;
    p.origin = {scene.manifest.scene_id, r, c, 0};
    p.pixels = Tensor({T, C, ps, ps});
    size_t k = 0;
    for (int t = 0; t < T; ++t)
      for (int b = 0; b < C; ++b)
        for (int dr = 0; dr < ps; ++dr)
          for (int dc = 0; dc < ps; ++dc)
            p.pixels.v[k++] = normalize_pixel(scene.raster(t, b).at(r + dr, c + dc), stats, band_idx[b]);
    p.labels.resize(static_cast<size_t>(ps) * ps);
    for (int dr = 0; dr < ps; ++dr)
      for (int dc = 0; dc < ps; ++dc)
        p.labels[static_cast<size_t>(dr) * ps + dc] = mask.at(r + dr, c + dc);
    size_t ch = p.change_pixels();
    out.n_change += ch;
    out.n_nochange += p.labels.size() - ch;
    out.patches.push_back(std::move(p));
  }
  return out;
}

// Ordered merge over scenes; patches keep (scene_id, row, col, transform) order.
inline PatchSet extract_patches_multi(const std::vector<Scene>& scenes, const SamplerConfig& cfg,
                                      const BandStats& stats) {
  check(!scenes.empty(), ErrKind::config, "no scenes to extract from");
  std::vector<size_t> order(scenes.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return scenes[a].manifest.scene_id < scenes[b].manifest.scene_id;
  });
  PatchSet out;
  for (size_t i : order) {
    PatchSet ps = extract_patches(scenes[i], cfg, stats);
    if (out.patches.empty()) {
      out.num_dates = ps.num_dates;
      out.num_bands = ps.num_bands;
      out.patch_size = ps.patch_size;
    } else {
      check(ps.num_dates == out.num_dates && ps.num_bands == out.num_bands, ErrKind::config,
            "scenes disagree on date/band counts");
    }
    out.n_change += ps.n_change;
    out.n_nochange += ps.n_nochange;
    for (auto& p : ps.patches) out.patches.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// augmentation

inline PatchSet augment(const PatchSet& ps, const SamplerConfig& cfg) {
  PatchSet out;
  out.num_dates = ps.num_dates;
  out.num_bands = ps.num_bands;
  out.patch_size = ps.patch_size;
  const double total = static_cast<double>(ps.patch_size) * ps.patch_size;
  for (const auto& p : ps.patches) {
    double frac = static_cast<double>(p.change_pixels()) / total;
    if (frac > cfg.aug_threshold) {
      // emit the full orbit; transform ids stay relative to the extraction window
      int cur = p.origin.transform_id;
      int undo = detail::dihedral_inverse(cur);
      for (int e = 0; e < 8; ++e) {
        Patch q = dihedral_apply(p, detail::dihedral_compose(e, undo));
        size_t ch = q.change_pixels();
        out.n_change += ch;
        out.n_nochange += q.labels.size() - ch;
        out.patches.push_back(std::move(q));
      }
    } else {
      size_t ch = p.change_pixels();
      out.n_change += ch;
      out.n_nochange += p.labels.size() - ch;
      out.patches.push_back(p);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// class weights

inline ClassWeights compute_class_weights(const PatchSet& ps) {
  check(ps.n_nochange > 0 && ps.n_change > 0, ErrKind::config,
        "degenerate class balance: a class has zero pixels");
  double inv0 = 1.0 / static_cast<double>(ps.n_nochange);
  double inv1 = 1.0 / static_cast<double>(ps.n_change);
  double scale = 2.0 / (inv0 + inv1);
  return {inv0 * scale, inv1 * scale};
}

// ---------------------------------------------------------------------------
// serialization: <base>/patches.bin + <base>/patches.json

inline void save_patchset(const PatchSet& ps, const SamplerConfig& cfg, const BandStats& stats,
                          const fs::path& dir) {
  fs::create_directories(dir);
  const size_t pix_sz = ps.patches.empty() ? 0 : ps.patches[0].pixels.count();
  std::ofstream bin(dir / "patches.bin", std::ios::binary | std::ios::trunc);
  if (!bin) fail_runtime(cat("cannot write ", (dir / "patches.bin").string()));
  for (const auto& p : ps.patches) {
    check(p.pixels.count() == pix_sz, ErrKind::runtime, "ragged patch set");
    bin.write(reinterpret_cast<const char*>(p.pixels.data()),
              static_cast<std::streamsize>(pix_sz * sizeof(float)));
    bin.write(reinterpret_cast<const char*>(p.labels.data()),
              static_cast<std::streamsize>(p.labels.size()));
  }
  check(static_cast<bool>(bin), ErrKind::runtime, "write failed for patches.bin");

  ordered_json j;
  j["format_version"] = 1;
  j["patch_size"] = ps.patch_size;
  j["num_dates"] = ps.num_dates;
  j["num_bands"] = ps.num_bands;
  j["class_counts"] = {{"nochange", ps.n_nochange}, {"change", ps.n_change}};
  j["config"] = {{"patch_size", cfg.patch_size},
                 {"stride_change", cfg.stride_change},
                 {"stride_nochange", cfg.stride_nochange},
                 {"aug_threshold", cfg.aug_threshold}};
  j["band_stats"] = {{"bands", stats.bands}, {"mean", stats.mean}, {"stddev", stats.stddev}};
  j["origins"] = ordered_json::array();
  for (const auto& p : ps.patches)
    j["origins"].push_back({p.origin.scene_id, p.origin.row, p.origin.col, p.origin.transform_id});
  std::string text = j.dump(2) + "\n";
  detail::write_file(dir / "patches.json", text.data(), text.size());
}

struct LoadedPatchSet {
  PatchSet patches;
  SamplerConfig config;
  BandStats stats;
};

inline LoadedPatchSet load_patchset(const fs::path& dir) {
  auto idx_bytes = detail::read_file(dir / "patches.json", "missing patch index");
  ordered_json j;
  try {
    j = ordered_json::parse(idx_bytes.begin(), idx_bytes.end());
  } catch (const std::exception& e) {
    fail_input(cat("patch index invalid: ", e.what()));
  }

  LoadedPatchSet out;
  PatchSet& ps = out.patches;
  try {
    ps.patch_size = j.at("patch_size").get<int>();
    ps.num_dates = j.at("num_dates").get<int>();
    ps.num_bands = j.at("num_bands").get<int>();
    ps.n_nochange = j.at("class_counts").at("nochange").get<size_t>();
    ps.n_change = j.at("class_counts").at("change").get<size_t>();
    out.config.patch_size = j.at("config").at("patch_size").get<int>();
    out.config.stride_change = j.at("config").at("stride_change").get<int>();
    out.config.stride_nochange = j.at("config").at("stride_nochange").get<int>();
    out.config.aug_threshold = j.at("config").at("aug_threshold").get<double>();
    out.stats.bands = j.at("band_stats").at("bands").get<std::vector<std::string>>();
    out.stats.mean = j.at("band_stats").at("mean").get<std::vector<double>>();
    out.stats.stddev = j.at("band_stats").at("stddev").get<std::vector<double>>();
  } catch (const std::exception& e) {
    fail_input(cat("patch index invalid: ", e.what()));
  }

  auto bin = detail::read_file(dir / "patches.bin", "missing patch data");
  const int ps_sz = ps.patch_size;
  const size_t pix_sz = static_cast<size_t>(ps.num_dates) * ps.num_bands * ps_sz * ps_sz;
  const size_t rec_sz = pix_sz * sizeof(float) + static_cast<size_t>(ps_sz) * ps_sz;
  const auto& origins = j.at("origins");
  check(bin.size() == rec_sz * origins.size(), ErrKind::input, "patches.bin size mismatch");

  size_t off = 0;
  size_t tally0 = 0, tally1 = 0;
  for (const auto& o : origins) {
    Patch p;
    p.origin.scene_id = o.at(0).get<std::string>();
    p.origin.row = o.at(1).get<int>();
    p.origin.col = o.at(2).get<int>();
    p.origin.transform_id = o.at(3).get<int>();
    check(p.origin.transform_id >= 0 && p.origin.transform_id < 8, ErrKind::input,
          "patch index invalid: transform id");
    p.pixels = Tensor({ps.num_dates, ps.num_bands, ps_sz, ps_sz});
    std::memcpy(p.pixels.data(), bin.data() + off, pix_sz * sizeof(float));
    off += pix_sz * sizeof(float);
    p.labels.resize(static_cast<size_t>(ps_sz) * ps_sz);
    for (auto& l : p.labels) {
      uint8_t v = static_cast<uint8_t>(bin[off++]);
      check(v <= 1, ErrKind::input, "patch labels outside {0,1}");
      l = v;
    }
    size_t ch = p.change_pixels();
    tally1 += ch;
    tally0 += p.labels.size() - ch;
    ps.patches.push_back(std::move(p));
  }
  check(tally0 == ps.n_nochange && tally1 == ps.n_change, ErrKind::input,
        "patch index invalid: class counts disagree with labels");
  return out;
}

}  // namespace cdnet
