#pragma once

// Deterministic synthetic multi-date scenes. Urbanization events are the
// only labeled change; clouds, seasonal scaling, and fluctuating bare-soil
// patches are unlabeled nuisance. Every component draws from its own RNG
// stream derived from the scene seed, so toggling one component (say,
// clouds) leaves every other component's pixels byte-identical.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdnet/common.hpp"
#include "cdnet/raster.hpp"
#include "cdnet/rng.hpp"

namespace cdnet {

struct SynthParams {
  uint64_t seed = 0;
  int height = 64;
  int width = 64;
  int num_dates = 5;
  int num_bands = 4;
  int n_urban_events = 2;
  int urban_size_min = 6;
  int urban_size_max = 14;
  int n_cloud_events = 1;
  int cloud_radius_min = 6;
  int cloud_radius_max = 12;
  double seasonal_amplitude = 0.05;  // multiplicative background swing
  int n_soil_patches = 3;
  double noise_std = 0.0;  // additive gaussian, reflectance counts
  bool cloud_interior_only = true;
};

inline void validate_params(const SynthParams& p) {
  check(p.height >= 1 && p.width >= 1, ErrKind::config, "invalid synth params: non-positive size");
  check(p.num_dates >= 2, ErrKind::config, "invalid synth params: num_dates < 2");
  check(p.num_bands >= 1, ErrKind::config, "invalid synth params: num_bands < 1");
  check(p.n_urban_events >= 0 && p.n_cloud_events >= 0 && p.n_soil_patches >= 0,
        ErrKind::config, "invalid synth params: negative event count");
  check(p.urban_size_min >= 1 && p.urban_size_min <= p.urban_size_max, ErrKind::config,
        "invalid synth params: urban size range not ordered");
  check(p.cloud_radius_min >= 1 && p.cloud_radius_min <= p.cloud_radius_max, ErrKind::config,
        "invalid synth params: cloud radius range not ordered");
  check(p.seasonal_amplitude >= 0.0 && p.noise_std >= 0.0, ErrKind::config,
        "invalid synth params: negative amplitude");
  if (p.n_cloud_events > 0 && p.cloud_interior_only)
    check(p.num_dates >= 3, ErrKind::config,
          "invalid synth params: interior-date clouds need num_dates >= 3");
}

enum class EventKind { urban, cloud, soil };

inline const char* event_kind_name(EventKind k) {
  switch (k) {
    case EventKind::urban: return "urban";
    case EventKind::cloud: return "cloud";
    default: return "soil";
  }
}

struct SynthEvent {
  EventKind kind = EventKind::urban;
  int x0 = 0, y0 = 0, width = 0, height = 0;  // bounding region (cols, rows)
  int onset = 0;                              // urban: first date present; cloud: its single date
  std::vector<int> bands;                     // affected band indices
  std::vector<double> signature;              // per-band additive delta at full strength
  std::vector<double> amplitudes;             // soil only: per-date strength in [0,1]
  int cx = 0, cy = 0;                         // cloud only
  double radius = 0.0, amplitude = 0.0;       // cloud only
};

struct EventLog {
  std::vector<SynthEvent> events;
  uint64_t clamped_values = 0;
};

// Independent oracle for the mask semantics: a pixel is change iff it lies
// inside some urban event region.
inline ChangeMask rasterize_urban_events(const EventLog& log, int height, int width) {
  ChangeMask m(height, width);
  for (const auto& e : log.events) {
    if (e.kind != EventKind::urban) continue;
    for (int r = e.y0; r < e.y0 + e.height; ++r)
      for (int c = e.x0; c < e.x0 + e.width; ++c) m.at(r, c) = 1;
  }
  return m;
}

namespace detail {

constexpr uint64_t kStreamBackground = 1;
constexpr uint64_t kStreamSeasonal = 2;
constexpr uint64_t kStreamUrban = 3;
constexpr uint64_t kStreamCloud = 4;
constexpr uint64_t kStreamSoil = 5;
constexpr uint64_t kStreamNoise = 6;

inline bool rects_overlap(int ax, int ay, int aw, int ah, int bx, int by, int bw, int bh) {
  return ax < bx + bw && bx < ax + aw && ay < by + bh && by < ay + ah;
}

// Smooth per-band background: coarse grid of uniform values, bilinear blend.
struct ValueNoiseField {
  int gw = 0, gh = 0, cell = 16;
  std::vector<double> grid;

  ValueNoiseField(Rng& rng, int height, int width, int cell_size) : cell(cell_size) {
    gw = width / cell + 2;
    gh = height / cell + 2;
    grid.resize(static_cast<size_t>(gw) * gh);
    for (auto& g : grid) g = rng.uniform(-1.0, 1.0);
  }

  double at(int r, int c) const {
    double fy = static_cast<double>(r) / cell;
    double fx = static_cast<double>(c) / cell;
    int iy = static_cast<int>(fy), ix = static_cast<int>(fx);
    double ty = fy - iy, tx = fx - ix;
    auto g = [&](int y, int x) { return grid[static_cast<size_t>(y) * gw + x]; };
    double a = g(iy, ix) * (1 - tx) + g(iy, ix + 1) * tx;
    double b = g(iy + 1, ix) * (1 - tx) + g(iy + 1, ix + 1) * tx;
    return a * (1 - ty) + b * ty;
  }
};

inline std::vector<double> draw_signature(Rng& rng, int num_bands) {
  std::vector<double> sig(num_bands);
  for (int b = 0; b < num_bands; ++b) sig[b] = rng.uniform(1200.0, 2000.0);
  sig[num_bands - 1] = rng.uniform(2200.0, 3200.0);  // NIR-analog band pops
  return sig;
}

}  // namespace detail

inline std::vector<std::string> synth_band_names(int num_bands) {
  if (num_bands == 4) return {"B02", "B03", "B04", "B08"};
  std::vector<std::string> names;
  for (int b = 0; b < num_bands; ++b) {
    std::string n = std::to_string(b);
    if (n.size() < 2) n = "0" + n;
    names.push_back("b" + n);
  }
  return names;
}

struct SynthScene {
  Scene scene;
  EventLog log;
};

inline SynthScene generate_scene(const SynthParams& p) {
  validate_params(p);
  const int H = p.height, W = p.width, T = p.num_dates, C = p.num_bands;

  Rng rng_bg(derive_seed(p.seed, detail::kStreamBackground));
  Rng rng_season(derive_seed(p.seed, detail::kStreamSeasonal));
  Rng rng_urban(derive_seed(p.seed, detail::kStreamUrban));
  Rng rng_cloud(derive_seed(p.seed, detail::kStreamCloud));
  Rng rng_soil(derive_seed(p.seed, detail::kStreamSoil));
  Rng rng_noise(derive_seed(p.seed, detail::kStreamNoise));

  // background fields, one per band, shared by all dates
  std::vector<double> base(C), amp(C);
  std::vector<detail::ValueNoiseField> field;
  field.reserve(C);
  for (int b = 0; b < C; ++b) {
    base[b] = rng_bg.uniform(2500.0, 5500.0);
    amp[b] = rng_bg.uniform(600.0, 1200.0);
    field.emplace_back(rng_bg, H, W, 16);
  }

  std::vector<double> season(T, 1.0);
  for (int t = 0; t < T; ++t) season[t] = 1.0 + p.seasonal_amplitude * rng_season.uniform(-1.0, 1.0);

  EventLog log;
  std::vector<int> all_bands(C);
  for (int b = 0; b < C; ++b) all_bands[b] = b;

  // urban events: disjoint rectangles, absent at date 0, persistent to the end
  auto place_rect = [&](Rng& rng, SynthEvent& e, const char* what) {
    for (int attempt = 0; attempt < 200; ++attempt) {
      int w = rng.range_int(p.urban_size_min, p.urban_size_max);
      int h = rng.range_int(p.urban_size_min, p.urban_size_max);
      if (w > W || h > H) continue;
      int x0 = rng.range_int(0, W - w);
      int y0 = rng.range_int(0, H - h);
      bool clash = false;
      for (const auto& other : log.events) {
        if (other.kind == EventKind::cloud) continue;
        if (detail::rects_overlap(x0, y0, w, h, other.x0, other.y0, other.width, other.height)) {
          clash = true;
          break;
        }
      }
      if (!clash) {
        e.x0 = x0;
        e.y0 = y0;
        e.width = w;
        e.height = h;
        return;
      }
    }
    fail_runtime(cat("placement failure: could not place ", what, " event"));
  };

  for (int i = 0; i < p.n_urban_events; ++i) {
    SynthEvent e;
    e.kind = EventKind::urban;
    place_rect(rng_urban, e, "urban");
    e.onset = rng_urban.range_int(1, T - 1);
    e.bands = all_bands;
    e.signature = detail::draw_signature(rng_urban, C);
    log.events.push_back(std::move(e));
  }

  // soil patches: same footprint statistics and per-date signature family as
  // urban, but the strength fluctuates date by date instead of persisting.
  // Half of them ramp from dark to bright across the stack, which makes them
  // look exactly like new construction if only the endpoints are inspected.
  for (int i = 0; i < p.n_soil_patches; ++i) {
    SynthEvent e;
    e.kind = EventKind::soil;
    place_rect(rng_soil, e, "soil");
    e.onset = 0;
    e.bands = all_bands;
    e.signature = detail::draw_signature(rng_soil, C);
    e.amplitudes.resize(T);
    bool endpoint_contrast = rng_soil.uniform() < 0.5;
    for (int t = 0; t < T; ++t) e.amplitudes[t] = rng_soil.uniform();
    if (endpoint_contrast) {
      e.amplitudes[0] = rng_soil.uniform(0.0, 0.15);
      e.amplitudes[T - 1] = rng_soil.uniform(0.85, 1.0);
    }
    log.events.push_back(std::move(e));
  }

  // clouds: bright disk at exactly one date
  for (int i = 0; i < p.n_cloud_events; ++i) {
    SynthEvent e;
    e.kind = EventKind::cloud;
    e.radius = rng_cloud.range_int(p.cloud_radius_min, p.cloud_radius_max);
    e.cx = rng_cloud.range_int(0, W - 1);
    e.cy = rng_cloud.range_int(0, H - 1);
    e.onset = p.cloud_interior_only ? rng_cloud.range_int(1, T - 2) : rng_cloud.range_int(0, T - 1);
    e.amplitude = rng_cloud.uniform(3000.0, 5000.0);
    e.bands = all_bands;
    int r = static_cast<int>(e.radius);
    e.x0 = std::max(0, e.cx - r);
    e.y0 = std::max(0, e.cy - r);
    e.width = std::min(W - 1, e.cx + r) - e.x0 + 1;
    e.height = std::min(H - 1, e.cy + r) - e.y0 + 1;
    log.events.push_back(std::move(e));
  }

  Scene scene;
  scene.manifest.scene_id = "synth_" + std::to_string(p.seed);
  for (int t = 0; t < T; ++t)
    scene.manifest.dates.push_back(std::to_string(2015 + t) + "-06-15");
  scene.manifest.bands = synth_band_names(C);
  scene.manifest.height = H;
  scene.manifest.width = W;

  std::vector<std::vector<double>> plane(static_cast<size_t>(C));
  scene.rasters.assign(T, {});
  for (int t = 0; t < T; ++t) {
    for (int b = 0; b < C; ++b) {
      plane[b].assign(static_cast<size_t>(H) * W, 0.0);
      for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c)
          plane[b][static_cast<size_t>(r) * W + c] = (base[b] + amp[b] * field[b].at(r, c)) * season[t];
    }
    for (const auto& e : log.events) {
      if (e.kind == EventKind::urban) {
        if (t < e.onset) continue;
        for (int b : e.bands)
          for (int r = e.y0; r < e.y0 + e.height; ++r)
            for (int c = e.x0; c < e.x0 + e.width; ++c)
              plane[b][static_cast<size_t>(r) * W + c] += e.signature[b];
      } else if (e.kind == EventKind::soil) {
        double f = e.amplitudes[t];
        if (f == 0.0) continue;
        for (int b : e.bands)
          for (int r = e.y0; r < e.y0 + e.height; ++r)
            for (int c = e.x0; c < e.x0 + e.width; ++c)
              plane[b][static_cast<size_t>(r) * W + c] += f * e.signature[b];
      } else {  // cloud
        if (t != e.onset) continue;
        for (int r = e.y0; r < e.y0 + e.height; ++r) {
          for (int c = e.x0; c < e.x0 + e.width; ++c) {
            double dr = r - e.cy, dc = c - e.cx;
            double falloff = 1.0 - (dr * dr + dc * dc) / (e.radius * e.radius);
            if (falloff <= 0.0) continue;
            for (int b : e.bands) plane[b][static_cast<size_t>(r) * W + c] += e.amplitude * falloff;
          }
        }
      }
    }
    scene.rasters[t].reserve(C);
    for (int b = 0; b < C; ++b) {
      BandRaster br(H, W);
      for (size_t i = 0; i < plane[b].size(); ++i) {
        double v = plane[b][i];
        if (p.noise_std > 0.0) v += rng_noise.normal(0.0, p.noise_std);
        double rounded = std::nearbyint(v);
        if (rounded < 0.0) {
          rounded = 0.0;
          ++log.clamped_values;
        } else if (rounded > 65535.0) {
          rounded = 65535.0;
          ++log.clamped_values;
        }
        br.values[i] = static_cast<uint16_t>(rounded);
      }
      scene.rasters[t].push_back(std::move(br));
    }
  }

  scene.mask = rasterize_urban_events(log, H, W);
  validate_scene(scene);
  return {std::move(scene), std::move(log)};
}

inline ordered_json event_log_to_json(const EventLog& log) {
  ordered_json j;
  j["clamped_values"] = log.clamped_values;
  j["events"] = ordered_json::array();
  for (const auto& e : log.events) {
    ordered_json je;
    je["kind"] = event_kind_name(e.kind);
    je["x0"] = e.x0;
    je["y0"] = e.y0;
    je["width"] = e.width;
    je["height"] = e.height;
    je["onset"] = e.onset;
    je["bands"] = e.bands;
    je["signature"] = e.signature;
    if (e.kind == EventKind::soil) je["amplitudes"] = e.amplitudes;
    if (e.kind == EventKind::cloud) {
      je["cx"] = e.cx;
      je["cy"] = e.cy;
      je["radius"] = e.radius;
      je["amplitude"] = e.amplitude;
    }
    j["events"].push_back(std::move(je));
  }
  return j;
}

inline EventLog event_log_from_json(const ordered_json& j) {
  EventLog log;
  log.clamped_values = j.at("clamped_values").get<uint64_t>();
  for (const auto& je : j.at("events")) {
    SynthEvent e;
    std::string kind = je.at("kind").get<std::string>();
    e.kind = kind == "urban" ? EventKind::urban : (kind == "cloud" ? EventKind::cloud : EventKind::soil);
    e.x0 = je.at("x0").get<int>();
    e.y0 = je.at("y0").get<int>();
    e.width = je.at("width").get<int>();
    e.height = je.at("height").get<int>();
    e.onset = je.at("onset").get<int>();
    e.bands = je.at("bands").get<std::vector<int>>();
    e.signature = je.at("signature").get<std::vector<double>>();
    if (je.contains("amplitudes")) e.amplitudes = je.at("amplitudes").get<std::vector<double>>();
    if (je.contains("cx")) {
      e.cx = je.at("cx").get<int>();
      e.cy = je.at("cy").get<int>();
      e.radius = je.at("radius").get<double>();
      e.amplitude = je.at("amplitude").get<double>();
    }
    log.events.push_back(std::move(e));
  }
  return log;
}

// Deterministic split keyed on a hash of the scene id; the scene list order
// does not matter.
inline std::pair<std::vector<Scene>, std::vector<Scene>> split_scenes(std::vector<Scene> scenes,
                                                                      double train_fraction) {
  check(train_fraction > 0.0 && train_fraction < 1.0, ErrKind::config,
        "train fraction must be inside (0,1)");
  check(scenes.size() >= 2, ErrKind::config, "need at least two scenes to split");

  std::vector<size_t> order(scenes.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto id_hash = [](const std::string& id) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : id) {
      h ^= static_cast<uint8_t>(c);
      h *= 0x100000001b3ULL;
    }
    return h;
  };
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    uint64_t ha = id_hash(scenes[a].manifest.scene_id), hb = id_hash(scenes[b].manifest.scene_id);
    if (ha != hb) return ha < hb;
    return scenes[a].manifest.scene_id < scenes[b].manifest.scene_id;
  });

  auto n = scenes.size();
  auto n_train = static_cast<size_t>(std::lround(train_fraction * static_cast<double>(n)));
  n_train = std::clamp<size_t>(n_train, 1, n - 1);

  std::pair<std::vector<Scene>, std::vector<Scene>> out;
  for (size_t k = 0; k < n; ++k) {
    if (k < n_train)
      out.first.push_back(std::move(scenes[order[k]]));
    else
      out.second.push_back(std::move(scenes[order[k]]));
  }
  return out;
}

inline std::pair<std::vector<Scene>, std::vector<Scene>> split_synthetic(
    const std::vector<SynthParams>& params_list, double train_fraction) {
  check(params_list.size() >= 2, ErrKind::config, "need at least two scenes to split");
  std::vector<Scene> scenes;
  scenes.reserve(params_list.size());
  for (const auto& p : params_list) scenes.push_back(generate_scene(p).scene);
  return split_scenes(std::move(scenes), train_fraction);
}

}  // namespace cdnet
