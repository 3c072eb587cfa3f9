#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "cdnet/synthgen.hpp"

using namespace cdnet;

namespace {

bool rasters_equal(const Scene& a, const Scene& b, int ta, int tb) {
  for (int band = 0; band < a.num_bands(); ++band)
    if (a.raster(ta, band).values != b.raster(tb, band).values) return false;
  return true;
}

}  // namespace

TEST_CASE("event-free noiseless params give a static scene and empty mask") {
  SynthParams p;
  p.seed = 5;
  p.num_dates = 4;
  p.n_urban_events = 0;
  p.n_cloud_events = 0;
  p.n_soil_patches = 0;
  p.noise_std = 0.0;
  p.seasonal_amplitude = 0.0;
  auto s = generate_scene(p);
  for (uint8_t v : s.scene.mask->labels) REQUIRE(v == 0);
  for (int t = 1; t < p.num_dates; ++t) REQUIRE(rasters_equal(s.scene, s.scene, 0, t));
  REQUIRE(s.log.events.empty());
}

TEST_CASE("same seed reproduces the scene byte for byte") {
  SynthParams p;
  p.seed = 77;
  p.noise_std = 35.0;
  auto a = generate_scene(p);
  auto b = generate_scene(p);
  REQUIRE(scene_equal(a.scene, b.scene));
  REQUIRE(event_log_to_json(a.log) == event_log_to_json(b.log));
}

TEST_CASE("mask equals the brute-force rasterization of urban events") {
  SynthParams p;
  p.seed = 123;
  p.n_urban_events = 3;
  p.n_soil_patches = 2;
  p.noise_std = 40.0;
  auto s = generate_scene(p);

  // all placements disjoint by construction; mask area is the exact sum
  size_t area_sum = 0;
  for (const auto& e : s.log.events)
    if (e.kind == EventKind::urban) area_sum += static_cast<size_t>(e.width) * e.height;
  size_t mask_count = 0;
  for (uint8_t v : s.scene.mask->labels) mask_count += v;
  REQUIRE(mask_count == area_sum);

  ChangeMask oracle = rasterize_urban_events(s.log, p.height, p.width);
  REQUIRE(oracle.labels == s.scene.mask->labels);

  SECTION("label soundness across seeds") {
    for (uint64_t seed : {1ull, 2ull, 3ull, 99ull}) {
      SynthParams q = p;
      q.seed = seed;
      auto t = generate_scene(q);
      REQUIRE(rasterize_urban_events(t.log, q.height, q.width).labels == t.scene.mask->labels);
      for (const auto& e : t.log.events) {
        if (e.kind != EventKind::urban) continue;
        REQUIRE(e.onset >= 1);  // absent at date 0
        REQUIRE(e.onset <= q.num_dates - 1);
      }
    }
  }
}

TEST_CASE("urban events appear at onset and persist to the last date") {
  SynthParams p;
  p.seed = 321;
  p.n_urban_events = 1;
  p.n_soil_patches = 0;
  p.n_cloud_events = 0;
  p.noise_std = 0.0;
  p.seasonal_amplitude = 0.0;
  auto s = generate_scene(p);
  const auto& e = s.log.events.at(0);
  const int r = e.y0 + e.height / 2, c = e.x0 + e.width / 2;
  const int band = 0;
  uint16_t before = s.scene.raster(0, band).at(r, c);
  for (int t = 1; t < e.onset; ++t) REQUIRE(s.scene.raster(t, band).at(r, c) == before);
  for (int t = e.onset; t < p.num_dates; ++t)
    REQUIRE(s.scene.raster(t, band).at(r, c) > before);
}

TEST_CASE("clouds at interior dates leave the endpoint rasters untouched") {
  SynthParams with_clouds;
  with_clouds.seed = 2024;
  with_clouds.num_dates = 5;
  with_clouds.n_cloud_events = 3;
  with_clouds.noise_std = 25.0;
  SynthParams no_clouds = with_clouds;
  no_clouds.n_cloud_events = 0;

  auto a = generate_scene(with_clouds);
  auto b = generate_scene(no_clouds);
  REQUIRE(rasters_equal(a.scene, b.scene, 0, 0));
  REQUIRE(rasters_equal(a.scene, b.scene, 4, 4));

  // and the clouds really did land somewhere in the interior
  bool interior_differs = false;
  for (int t = 1; t < 4; ++t)
    if (!rasters_equal(a.scene, b.scene, t, t)) interior_differs = true;
  REQUIRE(interior_differs);

  for (const auto& e : a.log.events)
    if (e.kind == EventKind::cloud) {
      REQUIRE(e.onset >= 1);
      REQUIRE(e.onset <= 3);
    }
}

TEST_CASE("pixel values stay inside uint16 and clamping is reported") {
  SynthParams p;
  p.seed = 8;
  p.height = 32;
  p.width = 32;
  p.num_dates = 3;
  p.n_urban_events = 0;
  p.n_soil_patches = 0;
  p.n_cloud_events = 80;  // pile up brightness until something saturates
  p.cloud_radius_min = 24;
  p.cloud_radius_max = 30;
  p.noise_std = 0.0;
  auto s = generate_scene(p);
  REQUIRE(s.log.clamped_values > 0);
  // no wraparound artifacts: every raster loads back as valid uint16 already,
  // so just confirm the bright pixels pinned at the ceiling
  uint16_t mx = 0;
  for (const auto& row : s.scene.rasters)
    for (const auto& r : row)
      for (uint16_t v : r.values) mx = std::max(mx, v);
  REQUIRE(mx == 65535);
}

TEST_CASE("impossible placements fail loudly") {
  SynthParams p;
  p.seed = 3;
  p.height = 16;
  p.width = 16;
  p.urban_size_min = 20;
  p.urban_size_max = 24;
  p.n_urban_events = 1;
  REQUIRE_THROWS_WITH(generate_scene(p), Catch::Matchers::ContainsSubstring("placement failure"));

  SECTION("interior clouds need at least three dates") {
    SynthParams q;
    q.num_dates = 2;
    q.n_cloud_events = 1;
    q.cloud_interior_only = true;
    REQUIRE_THROWS_AS(generate_scene(q), Error);
  }
}

TEST_CASE("split is deterministic, disjoint, and exhaustive") {
  std::vector<SynthParams> params;
  for (int i = 0; i < 10; ++i) {
    SynthParams p;
    p.seed = 9000 + static_cast<uint64_t>(i);
    p.height = 48;
    p.width = 48;
    p.n_cloud_events = 0;
    params.push_back(p);
  }

  auto [train, test] = split_synthetic(params, 0.8);
  REQUIRE(train.size() == 8);
  REQUIRE(test.size() == 2);

  std::set<std::string> ids;
  for (const auto& s : train) ids.insert(s.manifest.scene_id);
  for (const auto& s : test) ids.insert(s.manifest.scene_id);
  REQUIRE(ids.size() == 10);  // disjoint union covers everything

  auto [train2, test2] = split_synthetic(params, 0.8);
  for (size_t i = 0; i < train.size(); ++i)
    REQUIRE(train[i].manifest.scene_id == train2[i].manifest.scene_id);
  for (size_t i = 0; i < test.size(); ++i)
    REQUIRE(test[i].manifest.scene_id == test2[i].manifest.scene_id);

  REQUIRE_THROWS_AS(split_synthetic(params, 1.5), Error);
  REQUIRE_THROWS_AS(split_synthetic(params, 0.0), Error);
}

TEST_CASE("event log survives a json round trip") {
  SynthParams p;
  p.seed = 55;
  p.noise_std = 10.0;
  auto s = generate_scene(p);
  auto j = event_log_to_json(s.log);
  EventLog back = event_log_from_json(j);
  REQUIRE(event_log_to_json(back) == j);
}
