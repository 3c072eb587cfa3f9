#pragma once

// Whole-scene prediction: overlapping tiles per checkpoint with
// coverage-normalized averaging, uniform ensemble mean across checkpoints,
// thresholding, confusion metrics, and the white/black/red/green comparison
// render. Accumulation order is fixed so maps are bit-stable across runs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "cdnet/common.hpp"
#include "cdnet/net.hpp"
#include "cdnet/png_io.hpp"
#include "cdnet/raster.hpp"
#include "cdnet/sampler.hpp"

namespace cdnet {

struct ProbabilityMap {
  int height = 0;
  int width = 0;
  std::vector<float> p_change;

  ProbabilityMap() = default;
  ProbabilityMap(int h, int w) : height(h), width(w), p_change(static_cast<size_t>(h) * w, 0.0f) {}
};

struct MetricsReport {
  size_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double overall_accuracy = 0.0;
  bool precision_defined = true;  // false when tp+fp == 0 (reported as 0)
  bool recall_defined = true;    // false when tp+fn == 0 (reported as 0)
};

struct PredictModel {
  NetConfig config;
  ModelParams params;
  BandStats stats;
};

inline BandStats band_stats_from_json(const ordered_json& j) {
  BandStats st;
  st.bands = j.at("bands").get<std::vector<std::string>>();
  st.mean = j.at("mean").get<std::vector<double>>();
  st.stddev = j.at("stddev").get<std::vector<double>>();
  check(st.bands.size() == st.mean.size() && st.bands.size() == st.stddev.size(), ErrKind::input,
        "band stats arrays disagree");
  return st;
}

inline ordered_json band_stats_to_json(const BandStats& st) {
  return ordered_json{{"bands", st.bands}, {"mean", st.mean}, {"stddev", st.stddev}};
}

inline PredictModel predict_model_from_checkpoint(LoadedCheckpoint ck) {
  PredictModel m;
  m.config = ck.config;
  m.params = std::move(ck.params);
  check(ck.extra.contains("band_stats"), ErrKind::input,
        "checkpoint carries no band stats; cannot normalize scenes");
  m.stats = band_stats_from_json(ck.extra.at("band_stats"));
  return m;
}

namespace detail {

inline std::vector<int> tile_origins(int extent, int tile, int stride) {
  std::vector<int> o;
  for (int r = 0; r + tile <= extent; r += stride) o.push_back(r);
  if (o.empty() || o.back() != extent - tile) o.push_back(extent - tile);  // flush to the edge
  return o;
}

// normalized (T, C, H, W) float copy of a scene under a model's band stats
inline Tensor normalized_scene(const Scene& scene, const BandStats& stats) {
  const int T = scene.num_dates(), C = scene.num_bands(), H = scene.height(), W = scene.width();
  std::vector<int> band_idx(static_cast<size_t>(C));
  for (int b = 0; b < C; ++b) {
    band_idx[b] = stats.index_of(scene.manifest.bands[b]);
    check(band_idx[b] >= 0, ErrKind::config, cat("unknown band: ", scene.manifest.bands[b]));
  }
  Tensor out({T, C, H, W});
  size_t k = 0;
  for (int t = 0; t < T; ++t)
    for (int b = 0; b < C; ++b)
      for (const uint16_t v : scene.raster(t, b).values)
        out.v[k++] = normalize_pixel(v, stats, band_idx[b]);
  return out;
}

}  // namespace detail

// Per-pixel change probability for a whole scene from an ensemble.
inline ProbabilityMap predict_scene(std::vector<PredictModel>& models, const Scene& scene,
                                    int tile = 32, int tile_stride = 16) {
  check(!models.empty(), ErrKind::config, "empty checkpoint list");
  check(tile >= 1 && tile_stride >= 1 && tile_stride <= tile, ErrKind::config,
        "bad tile/stride configuration");
  const int H = scene.height(), W = scene.width();
  check(H >= tile && W >= tile, ErrKind::config, "scene smaller than tile");
  const auto cfg_json = net_config_to_json(models.front().config);
  for (const auto& m : models)
    check(net_config_to_json(m.config) == cfg_json, ErrKind::config,
          "config mismatch among checkpoints");

  const auto rows = detail::tile_origins(H, tile, tile_stride);
  const auto cols = detail::tile_origins(W, tile, tile_stride);
  const int T = scene.num_dates(), C = scene.num_bands();
  const size_t tile_pix = static_cast<size_t>(tile) * tile;

  std::vector<std::vector<float>> member_maps;
  member_maps.reserve(models.size());
  std::vector<double> acc(static_cast<size_t>(H) * W);
  std::vector<int32_t> cover(static_cast<size_t>(H) * W);

  for (auto& model : models) {
    Tensor norm = detail::normalized_scene(scene, model.stats);
    std::fill(acc.begin(), acc.end(), 0.0);
    std::fill(cover.begin(), cover.end(), 0);

    constexpr int kTileBatch = 16;
    std::vector<std::pair<int, int>> pending;
    Tensor batch;
    auto flush = [&]() {
      if (pending.empty()) return;
      const int B = static_cast<int>(pending.size());
      batch.shape = {B, T, C, tile, tile};
      batch.v.resize(static_cast<size_t>(B) * T * C * tile_pix);
      for (int i = 0; i < B; ++i) {
        auto [r0, c0] = pending[static_cast<size_t>(i)];
        float* dst = batch.data() + static_cast<size_t>(i) * T * C * tile_pix;
        for (int t = 0; t < T; ++t)
          for (int b = 0; b < C; ++b)
            for (int r = 0; r < tile; ++r)
              std::copy_n(norm.data() + ((static_cast<size_t>(t) * C + b) * H + r0 + r) * W + c0,
                          tile, dst + ((static_cast<size_t>(t) * C + b) * tile + r) * tile);
      }
      Tensor probs = forward_batch(model.params, model.config, batch, NetMode::eval);
      const int K = probs.dim(1);
      for (int i = 0; i < B; ++i) {
        auto [r0, c0] = pending[static_cast<size_t>(i)];
        const float* p1 = probs.data() + (static_cast<size_t>(i) * K + 1) * tile_pix;
        for (int r = 0; r < tile; ++r)
          for (int c = 0; c < tile; ++c) {
            acc[(static_cast<size_t>(r0) + r) * W + c0 + c] += p1[static_cast<size_t>(r) * tile + c];
            cover[(static_cast<size_t>(r0) + r) * W + c0 + c] += 1;
          }
      }
      pending.clear();
    };

    for (int r0 : rows)
      for (int c0 : cols) {
        pending.emplace_back(r0, c0);
        if (static_cast<int>(pending.size()) == kTileBatch) flush();
      }
    flush();

    std::vector<float> map(static_cast<size_t>(H) * W);
    for (size_t i = 0; i < map.size(); ++i)
      map[i] = static_cast<float>(acc[i] / static_cast<double>(cover[i]));
    member_maps.push_back(std::move(map));
  }

  ProbabilityMap out(H, W);
  const double inv_k = 1.0 / static_cast<double>(member_maps.size());
  for (size_t i = 0; i < out.p_change.size(); ++i) {
    double s = 0.0;
    for (const auto& m : member_maps) s += m[i];
    out.p_change[i] = static_cast<float>(s * inv_k);
  }
  return out;
}

// label 1 iff p_change strictly exceeds the threshold
inline ChangeMask threshold(const ProbabilityMap& pm, double tau = 0.5) {
  check(tau > 0.0 && tau < 1.0, ErrKind::config, "threshold must be inside (0,1)");
  ChangeMask m(pm.height, pm.width);
  for (size_t i = 0; i < pm.p_change.size(); ++i)
    m.labels[i] = pm.p_change[i] > tau ? 1 : 0;
  return m;
}

inline MetricsReport evaluate(const ChangeMask& pred, const ChangeMask& gt) {
  check(pred.height == gt.height && pred.width == gt.width, ErrKind::config,
        "evaluate: shape mismatch");
  MetricsReport r;
  for (size_t i = 0; i < pred.labels.size(); ++i) {
    const bool p = pred.labels[i] != 0, g = gt.labels[i] != 0;
    if (p && g)
      ++r.tp;
    else if (p && !g)
      ++r.fp;
    else if (!p && g)
      ++r.fn;
    else
      ++r.tn;
  }
  if (r.tp + r.fp > 0) {
    r.precision = static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fp);
  } else {
    r.precision = 0.0;
    r.precision_defined = false;
  }
  if (r.tp + r.fn > 0) {
    r.recall = static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fn);
  } else {
    r.recall = 0.0;
    r.recall_defined = false;
  }
  r.f1 = (r.precision + r.recall) > 0.0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
                                        : 0.0;
  const size_t total = r.tp + r.fp + r.fn + r.tn;
  r.overall_accuracy = total > 0 ? static_cast<double>(r.tp + r.tn) / static_cast<double>(total) : 0.0;
  return r;
}

inline ordered_json metrics_to_json(const MetricsReport& r) {
  return ordered_json{{"tp", r.tp},
                      {"fp", r.fp},
                      {"fn", r.fn},
                      {"tn", r.tn},
                      {"precision", r.precision},
                      {"recall", r.recall},
                      {"f1", r.f1},
                      {"overall_accuracy", r.overall_accuracy},
                      {"precision_defined", r.precision_defined},
                      {"recall_defined", r.recall_defined}};
}

// TP white, TN black, FP red, FN green
inline RgbImage render_comparison(const ChangeMask& pred, const ChangeMask& gt) {
  check(pred.height == gt.height && pred.width == gt.width, ErrKind::config,
        "render: shape mismatch");
  RgbImage img(pred.height, pred.width);
  for (int r = 0; r < pred.height; ++r)
    for (int c = 0; c < pred.width; ++c) {
      const bool p = pred.at(r, c) != 0, g = gt.at(r, c) != 0;
      uint8_t* px = img.px(r, c);
      if (p && g) {
        px[0] = px[1] = px[2] = 255;
      } else if (p && !g) {
        px[0] = 255;
      } else if (!p && g) {
        px[1] = 255;
      }
    }
  return img;
}

// ---------------------------------------------------------------------------
// file formats: float32 raw + json sidecar for maps, uint8 raw + sidecar for
// standalone masks

inline void save_probability_map(const ProbabilityMap& pm, const fs::path& base) {
  std::vector<char> buf(pm.p_change.size() * 4);
  for (size_t i = 0; i < pm.p_change.size(); ++i) {
    uint32_t bits;
    std::memcpy(&bits, &pm.p_change[i], 4);
    buf[4 * i] = static_cast<char>(bits & 0xff);
    buf[4 * i + 1] = static_cast<char>((bits >> 8) & 0xff);
    buf[4 * i + 2] = static_cast<char>((bits >> 16) & 0xff);
    buf[4 * i + 3] = static_cast<char>((bits >> 24) & 0xff);
  }
  detail::write_file(fs::path(base.string() + ".raw"), buf.data(), buf.size());
  ordered_json j{{"height", pm.height}, {"width", pm.width}, {"dtype", "float32"}};
  std::string text = j.dump(2) + "\n";
  detail::write_file(fs::path(base.string() + ".json"), text.data(), text.size());
}

inline ProbabilityMap load_probability_map(const fs::path& base) {
  auto sidecar = detail::read_file(fs::path(base.string() + ".json"), "missing map sidecar");
  ordered_json j;
  try {
    j = ordered_json::parse(sidecar.begin(), sidecar.end());
  } catch (const std::exception& e) {
    fail_input(cat("map sidecar invalid: ", e.what()));
  }
  ProbabilityMap pm(j.at("height").get<int>(), j.at("width").get<int>());
  auto bytes = detail::read_file(fs::path(base.string() + ".raw"), "missing map data");
  check(bytes.size() == pm.p_change.size() * 4, ErrKind::input, "map data size mismatch");
  for (size_t i = 0; i < pm.p_change.size(); ++i) {
    const auto* p = reinterpret_cast<const uint8_t*>(bytes.data() + 4 * i);
    uint32_t bits = static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
                    (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
    std::memcpy(&pm.p_change[i], &bits, 4);
  }
  return pm;
}

inline void save_mask(const ChangeMask& m, const fs::path& base) {
  detail::write_file(fs::path(base.string() + ".raw"), m.labels.data(), m.labels.size());
  ordered_json j{{"height", m.height}, {"width", m.width}, {"dtype", "uint8"}};
  std::string text = j.dump(2) + "\n";
  detail::write_file(fs::path(base.string() + ".json"), text.data(), text.size());
}

inline ChangeMask load_mask(const fs::path& base) {
  auto sidecar = detail::read_file(fs::path(base.string() + ".json"), "missing mask sidecar");
  ordered_json j;
  try {
    j = ordered_json::parse(sidecar.begin(), sidecar.end());
  } catch (const std::exception& e) {
    fail_input(cat("mask sidecar invalid: ", e.what()));
  }
  ChangeMask m(j.at("height").get<int>(), j.at("width").get<int>());
  auto bytes = detail::read_file(fs::path(base.string() + ".raw"), "missing mask data");
  check(bytes.size() == m.labels.size(), ErrKind::input, "mask data size mismatch");
  for (size_t i = 0; i < m.labels.size(); ++i) {
    uint8_t v = static_cast<uint8_t>(bytes[i]);
    check(v <= 1, ErrKind::input, "mask invalid: labels outside {0,1}");
    m.labels[i] = v;
  }
  return m;
}

}  // namespace cdnet
