#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "cdnet/raster.hpp"
#include "cdnet/rng.hpp"
#include "cdnet/synthgen.hpp"

using namespace cdnet;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& suffix) {
  auto p = fs::temp_directory_path() / ("cdnet_test_raster_" + suffix);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Scene make_scene(uint64_t seed, int T = 2, int C = 3, int h = 8, int w = 9, bool with_mask = true) {
  Rng rng(seed);
  Scene s;
  s.manifest.scene_id = "scene_" + std::to_string(seed);
  for (int t = 0; t < T; ++t) s.manifest.dates.push_back("2016-0" + std::to_string(t + 1) + "-01");
  for (int b = 0; b < C; ++b) s.manifest.bands.push_back("band" + std::to_string(b));
  s.manifest.height = h;
  s.manifest.width = w;
  s.rasters.resize(T);
  for (int t = 0; t < T; ++t)
    for (int b = 0; b < C; ++b) {
      BandRaster r(h, w);
      for (auto& v : r.values) v = static_cast<uint16_t>(rng.below(65536));
      s.rasters[t].push_back(std::move(r));
    }
  if (with_mask) {
    ChangeMask m(h, w);
    for (auto& v : m.labels) v = static_cast<uint8_t>(rng.below(2));
    s.mask = std::move(m);
  }
  return s;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("scene round-trips through disk unchanged") {
  auto dir = temp_dir("roundtrip");
  Scene s = make_scene(42);
  save_scene(s, dir / "s");
  Scene loaded = load_scene(dir / "s");
  REQUIRE(scene_equal(s, loaded));

  SECTION("re-save of the loaded scene is byte identical") {
    save_scene(loaded, dir / "s2");
    for (const auto& e : fs::directory_iterator(dir / "s")) {
      auto other = dir / "s2" / e.path().filename();
      REQUIRE(fs::exists(other));
      REQUIRE(slurp(e.path()) == slurp(other));
    }
  }
}

TEST_CASE("missing raster file is an incomplete scene") {
  auto dir = temp_dir("missing");
  Scene s = make_scene(7, 3, 2);
  save_scene(s, dir / "s");
  fs::remove(dir / "s" / raster_filename(s.manifest.dates[2], s.manifest.bands[1]));
  REQUIRE_THROWS_WITH(load_scene(dir / "s"), Catch::Matchers::ContainsSubstring("incomplete scene"));
}

TEST_CASE("synthetic 2-date 4-band 64x64 scene has the advertised dimensions") {
  SynthParams p;
  p.seed = 11;
  p.height = 64;
  p.width = 64;
  p.num_dates = 2;
  p.num_bands = 4;
  p.n_cloud_events = 0;  // 2 dates have no interior
  auto s = generate_scene(p);
  REQUIRE(s.scene.num_dates() == 2);
  REQUIRE(s.scene.num_bands() == 4);
  REQUIRE(s.scene.height() == 64);
  REQUIRE(s.scene.width() == 64);
}

TEST_CASE("scene files on disk: one raster per date-band plus manifest and mask") {
  auto dir = temp_dir("files");
  Scene s = make_scene(9, 3, 4);
  save_scene(s, dir / "s");

  size_t raw_rasters = 0;
  bool saw_manifest = false, saw_mask = false;
  for (const auto& e : fs::directory_iterator(dir / "s")) {
    auto name = e.path().filename().string();
    if (name == "manifest.json")
      saw_manifest = true;
    else if (name == "mask.raw")
      saw_mask = true;
    else if (name.ends_with(".raw"))
      ++raw_rasters;
  }
  REQUIRE(raw_rasters == 12);
  REQUIRE(saw_manifest);
  REQUIRE(saw_mask);
  REQUIRE(fs::file_size(dir / "s" / "mask.raw") ==
          static_cast<uintmax_t>(s.height()) * static_cast<uintmax_t>(s.width()));
}

TEST_CASE("scene_stats basics") {
  SECTION("constant band") {
    Scene s = make_scene(1, 2, 1, 4, 4);
    for (auto& row : s.rasters)
      for (auto& r : row)
        for (auto& v : r.values) v = 5;
    auto st = scene_stats({s});
    REQUIRE(st.mean[0] == Catch::Approx(5.0));
    REQUIRE(st.stddev[0] == Catch::Approx(0.0));
  }

  SECTION("two-valued band, equal counts") {
    Scene s = make_scene(2, 2, 1, 4, 4);
    for (auto& row : s.rasters)
      for (auto& r : row)
        for (size_t i = 0; i < r.values.size(); ++i) r.values[i] = i % 2 ? 10 : 0;
    auto st = scene_stats({s});
    REQUIRE(st.mean[0] == Catch::Approx(5.0));
    REQUIRE(st.stddev[0] == Catch::Approx(5.0));
  }

  SECTION("pooled stats equal stats of the concatenated pixel stream") {
    Scene a = make_scene(3, 2, 2, 6, 5), b = make_scene(4, 3, 2, 6, 5);
    b.manifest.bands = a.manifest.bands;
    auto st = scene_stats({a, b});
    for (size_t band = 0; band < 2; ++band) {
      // brute force over every pixel of every date of both scenes
      std::vector<double> xs;
      for (const Scene* s : {&a, &b})
        for (const auto& row : s->rasters)
          for (double v : row[band].values) xs.push_back(v);
      double mean = 0;
      for (double v : xs) mean += v;
      mean /= static_cast<double>(xs.size());
      double var = 0;
      for (double v : xs) var += (v - mean) * (v - mean);
      var /= static_cast<double>(xs.size());
      REQUIRE(st.mean[band] == Catch::Approx(mean).margin(1e-9));
      REQUIRE(st.stddev[band] == Catch::Approx(std::sqrt(var)).margin(1e-9));
    }
  }

  SECTION("permutation invariance in scene order") {
    Scene a = make_scene(5), b = make_scene(6);
    b.manifest.bands = a.manifest.bands;
    auto st1 = scene_stats({a, b});
    auto st2 = scene_stats({b, a});
    REQUIRE(st1.mean == st2.mean);
    REQUIRE(st1.stddev == st2.stddev);
  }

  SECTION("permutation invariance in date order") {
    Scene a = make_scene(8, 3, 2);
    Scene shuffled = a;
    std::swap(shuffled.rasters[0], shuffled.rasters[2]);
    auto st1 = scene_stats({a});
    auto st2 = scene_stats({shuffled});
    REQUIRE(st1.mean == st2.mean);
    REQUIRE(st1.stddev == st2.stddev);
  }

  SECTION("empty list rejected") {
    REQUIRE_THROWS_AS(scene_stats({}), Error);
  }
}

TEST_CASE("invalid scenes are rejected with the documented reasons") {
  auto dir = temp_dir("invalid");

  SECTION("unordered dates") {
    Scene s = make_scene(10);
    save_scene(s, dir / "s");
    auto manifest = slurp(dir / "s" / "manifest.json");
    std::string text(manifest.begin(), manifest.end());
    auto j = ordered_json::parse(text);
    std::swap(j["dates"][0], j["dates"][1]);
    // keep raster files reachable under the swapped names
    fs::copy_file(dir / "s" / raster_filename(s.manifest.dates[0], s.manifest.bands[0]),
                  dir / "s" / "x.tmp");
    std::ofstream(dir / "s" / "manifest.json") << j.dump(2) << "\n";
    REQUIRE_THROWS_WITH(load_scene(dir / "s"), Catch::Matchers::ContainsSubstring("manifest invalid"));
  }

  SECTION("mask with out-of-range values") {
    Scene s = make_scene(11);
    save_scene(s, dir / "t");
    std::fstream f(dir / "t" / "mask.raw", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(3);
    char two = 2;
    f.write(&two, 1);
    f.close();
    REQUIRE_THROWS_WITH(load_scene(dir / "t"), Catch::Matchers::ContainsSubstring("mask invalid"));
  }

  SECTION("raster with wrong size") {
    Scene s = make_scene(12);
    save_scene(s, dir / "u");
    auto victim = dir / "u" / raster_filename(s.manifest.dates[0], s.manifest.bands[0]);
    auto bytes = slurp(victim);
    bytes.pop_back();
    std::ofstream(victim, std::ios::binary | std::ios::trunc)
        .write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    REQUIRE_THROWS_WITH(load_scene(dir / "u"),
                        Catch::Matchers::ContainsSubstring("inconsistent rasters"));
  }

  SECTION("in-memory validation catches dimension mismatch") {
    Scene s = make_scene(13);
    s.rasters[0][0] = BandRaster(s.height() + 1, s.width());
    REQUIRE_THROWS_WITH(validate_scene(s),
                        Catch::Matchers::ContainsSubstring("inconsistent rasters"));
  }

  SECTION("randomized valid scenes always load and satisfy invariants") {
    Rng rng(99);
    for (int i = 0; i < 10; ++i) {
      int T = 2 + static_cast<int>(rng.below(3));
      int C = 1 + static_cast<int>(rng.below(4));
      int h = 1 + static_cast<int>(rng.below(12));
      int w = 1 + static_cast<int>(rng.below(12));
      Scene s = make_scene(1000 + static_cast<uint64_t>(i), T, C, h, w, rng.below(2) == 0);
      auto d = dir / ("r" + std::to_string(i));
      save_scene(s, d);
      Scene l = load_scene(d);
      REQUIRE_NOTHROW(validate_scene(l));
      REQUIRE(scene_equal(s, l));
    }
  }
}

TEST_CASE("date subsetting keeps endpoints and order") {
  Scene s = make_scene(21, 5, 2);
  auto idx = spread_date_indices(5, 3);
  REQUIRE(idx == std::vector<int>{0, 2, 4});
  Scene v = subset_dates(s, idx);
  REQUIRE(v.num_dates() == 3);
  REQUIRE(v.manifest.dates.front() == s.manifest.dates.front());
  REQUIRE(v.manifest.dates.back() == s.manifest.dates.back());
  REQUIRE(v.rasters[1][0].values == s.rasters[2][0].values);

  REQUIRE(spread_date_indices(5, 2) == std::vector<int>{0, 4});
  REQUIRE(spread_date_indices(5, 5) == std::vector<int>{0, 1, 2, 3, 4});
  REQUIRE_THROWS_AS(spread_date_indices(3, 4), Error);
}
