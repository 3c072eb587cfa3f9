#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>

#include "cdnet/net.hpp"
#include "cdnet/rng.hpp"

using namespace cdnet;
namespace fs = std::filesystem;

namespace {

template <typename T>
TensorT<T> random_input(std::vector<int> shape, uint64_t seed, double scale = 1.0) {
  TensorT<T> t(std::move(shape));
  Rng rng(seed);
  for (auto& v : t.v) v = static_cast<T>(rng.normal(0.0, scale));
  return t;
}

NetConfig small_cfg(NetVariant variant, int T = 2) {
  NetConfig cfg;
  cfg.in_channels = 3;
  cfg.base_depth = 4;
  cfg.levels = 2;
  cfg.variant = variant;
  cfg.num_dates = T;
  return cfg;
}

}  // namespace

TEST_CASE("encoder depths double per level from the base depth") {
  NetConfig cfg;  // defaults: base 16, 5 levels
  cfg.in_channels = 4;
  auto params = build_params<float>(cfg, 1);

  std::vector<int> depths;
  for (int l = 1; l <= 5; ++l) depths.push_back(params.at(cat("enc", l, ".conv.w")).dim(0));
  REQUIRE(depths == std::vector<int>{16, 32, 64, 128, 256});

  // ConvLSTM hidden depth equals the encoder depth at each level
  for (int l = 1; l <= 5; ++l) {
    REQUIRE(params.at(cat("lstm", l, ".wx")).dim(0) == 4 * cfg.depth(l));
    REQUIRE(params.at(cat("lstm", l, ".wh")).dim(1) == cfg.depth(l));
  }

  SECTION("forward trace reports the per-date pyramid") {
    Tensor input = random_input<float>({2, 4, 32, 32}, 9);
    ForwardTrace trace;
    auto probs = forward(params, cfg, input, NetMode::eval, &trace);
    REQUIRE(probs.shape == std::vector<int>{2, 32, 32});
    REQUIRE(trace.encoder_shapes.size() == 5);
    REQUIRE(trace.encoder_shapes[0] == std::array<int, 3>{16, 32, 32});
    REQUIRE(trace.encoder_shapes[1] == std::array<int, 3>{32, 16, 16});
    REQUIRE(trace.encoder_shapes[2] == std::array<int, 3>{64, 8, 8});
    REQUIRE(trace.encoder_shapes[3] == std::array<int, 3>{128, 4, 4});
    REQUIRE(trace.encoder_shapes[4] == std::array<int, 3>{256, 2, 2});
  }
}

TEST_CASE("seeded build is bit-reproducible and T-independent for the lstm variant") {
  NetConfig cfg = small_cfg(NetVariant::unet_lstm);
  auto a = build_params<float>(cfg, 33);
  auto b = build_params<float>(cfg, 33);
  REQUIRE(a.tensors.size() == b.tensors.size());
  for (const auto& [k, t] : a.tensors) REQUIRE(t.v == b.tensors.at(k).v);

  NetConfig cfg5 = cfg;
  cfg5.num_dates = 5;
  auto c = build_params<float>(cfg5, 33);
  REQUIRE(a.count() == c.count());
  for (const auto& [k, t] : a.tensors) REQUIRE(t.v == c.tensors.at(k).v);

  SECTION("plain variant widens its first block with the date count") {
    NetConfig p2 = small_cfg(NetVariant::unet_plain, 2);
    NetConfig p5 = small_cfg(NetVariant::unet_plain, 5);
    auto pp2 = build_params<float>(p2, 1);
    auto pp5 = build_params<float>(p5, 1);
    REQUIRE(pp2.at("enc1.conv.w").dim(1) == 6);
    REQUIRE(pp5.at("enc1.conv.w").dim(1) == 15);
  }
}

TEST_CASE("per-pixel probabilities sum to one") {
  for (auto variant : {NetVariant::unet_lstm, NetVariant::unet_plain}) {
    for (int T : {2, 3}) {
      NetConfig cfg = small_cfg(variant, T);
      auto params = build_params<float>(cfg, 5);
      Tensor input = random_input<float>({T, 3, 16, 16}, 17);
      auto probs = forward(params, cfg, input, NetMode::eval);
      const size_t HW = 16 * 16;
      for (size_t p = 0; p < HW; ++p) {
        float s = probs.v[p] + probs.v[HW + p];
        REQUIRE(s == Catch::Approx(1.0f).margin(1e-5));
      }
    }
  }
}

TEST_CASE("one parameter set drives any number of dates through the lstm") {
  NetConfig cfg = small_cfg(NetVariant::unet_lstm);
  auto params = build_params<float>(cfg, 21);
  Tensor base = random_input<float>({1, 3, 16, 16}, 100);

  std::vector<Tensor> outs;
  for (int T : {2, 3, 5}) {
    Tensor input({T, 3, 16, 16});
    for (int t = 0; t < T; ++t) {
      Rng rng(200 + static_cast<uint64_t>(t));
      for (size_t i = 0; i < base.count(); ++i)
        input.v[static_cast<size_t>(t) * base.count() + i] =
            base.v[i] + static_cast<float>(rng.normal(0.0, 0.2));
    }
    auto probs = forward(params, cfg, input, NetMode::eval);
    REQUIRE(probs.shape == std::vector<int>{2, 16, 16});
    outs.push_back(std::move(probs));
  }
  REQUIRE(outs[0].v != outs[1].v);  // temporal inputs actually matter

  SECTION("five identical dates still produce a valid map") {
    Tensor input({5, 3, 16, 16});
    for (int t = 0; t < 5; ++t)
      std::copy_n(base.data(), base.count(), input.data() + static_cast<size_t>(t) * base.count());
    auto probs = forward(params, cfg, input, NetMode::eval);
    for (float v : probs.v) {
      REQUIRE(std::isfinite(v));
      REQUIRE(v >= 0.0f);
      REQUIRE(v <= 1.0f);
    }
  }
}

TEST_CASE("eval forward is bit-stable") {
  NetConfig cfg = small_cfg(NetVariant::unet_lstm);
  auto params = build_params<float>(cfg, 55);
  Tensor input = random_input<float>({2, 3, 16, 16}, 7);
  auto a = forward(params, cfg, input, NetMode::eval);
  auto b = forward(params, cfg, input, NetMode::eval);
  REQUIRE(std::memcmp(a.data(), b.data(), a.count() * sizeof(float)) == 0);
}

TEST_CASE("batch norm honors the train/eval contract") {
  NetConfig cfg = small_cfg(NetVariant::unet_plain);
  auto params = build_params<float>(cfg, 3);
  Tensor input = random_input<float>({2, 3, 16, 16}, 23);

  auto rm_before = params.at("enc1.bn.running_mean").v;
  (void)forward(params, cfg, input, NetMode::train);
  auto rm_after = params.at("enc1.bn.running_mean").v;
  REQUIRE(rm_before != rm_after);

  SECTION("eval leaves running stats alone") {
    auto snapshot = params.at("enc1.bn.running_mean").v;
    (void)forward(params, cfg, input, NetMode::eval);
    REQUIRE(params.at("enc1.bn.running_mean").v == snapshot);
  }

  SECTION("train_frozen computes batch statistics without committing them") {
    auto snapshot = params.at("enc1.bn.running_mean").v;
    (void)forward(params, cfg, input, NetMode::train_frozen);
    REQUIRE(params.at("enc1.bn.running_mean").v == snapshot);
  }

  SECTION("eval output is independent of batch composition") {
    Tensor x = random_input<float>({1, 2, 3, 16, 16}, 31);
    Tensor pair({2, 2, 3, 16, 16});
    std::copy_n(x.data(), x.count(), pair.data());
    Tensor y = random_input<float>({1, 2, 3, 16, 16}, 32);
    std::copy_n(y.data(), y.count(), pair.data() + x.count());

    auto solo = forward_batch(params, cfg, x, NetMode::eval);
    auto duo = forward_batch(params, cfg, pair, NetMode::eval);
    REQUIRE(std::memcmp(solo.data(), duo.data(), solo.count() * sizeof(float)) == 0);
  }
}

TEST_CASE("convlstm_step fixed points and saturation") {
  SECTION("all zeros stay zero") {
    ConvLSTMGatesT<double> gates{TensorT<double>({8, 2, 3, 3}), TensorT<double>({8, 2, 3, 3}),
                                 TensorT<double>({8})};
    TensorT<double> x({2, 4, 4});
    ConvLSTMStateT<double> s{TensorT<double>({2, 4, 4}), TensorT<double>({2, 4, 4})};
    auto out = convlstm_step(gates, x, s);
    for (double v : out.h.v) REQUIRE(v == 0.0);
    for (double v : out.c.v) REQUIRE(v == 0.0);
  }

  SECTION("a huge forget bias makes c' converge to c + i*g") {
    Rng rng(77);
    const int d = 2, din = 2, hw = 3;
    ConvLSTMGatesT<double> gates{TensorT<double>({4 * d, din, 3, 3}),
                                 TensorT<double>({4 * d, d, 3, 3}), TensorT<double>({4 * d})};
    for (auto& v : gates.wx.v) v = rng.normal(0.0, 0.3);
    for (auto& v : gates.wh.v) v = rng.normal(0.0, 0.3);
    for (int i = d; i < 2 * d; ++i) gates.b.v[static_cast<size_t>(i)] = 40.0;  // forget -> 1

    TensorT<double> x({din, hw, hw});
    for (auto& v : x.v) v = rng.normal(0.0, 1.0);
    ConvLSTMStateT<double> s{TensorT<double>({d, hw, hw}), TensorT<double>({d, hw, hw})};
    for (auto& v : s.h.v) v = rng.normal(0.0, 1.0);
    for (auto& v : s.c.v) v = rng.normal(0.0, 1.0);

    auto out = convlstm_step(gates, x, s);

    // i and g depend only on (x, h), so a zero-cell step isolates i*g
    ConvLSTMStateT<double> zero_cell{s.h, TensorT<double>({d, hw, hw})};
    auto ig = convlstm_step(gates, x, zero_cell);
    for (size_t i = 0; i < out.c.count(); ++i)
      REQUIRE(out.c.v[i] == Catch::Approx(s.c.v[i] + ig.c.v[i]).margin(1e-4));
  }
}

TEST_CASE("1x1 convlstm cell matches an independent scalar lstm over 100 steps") {
  // scalar reference, written from the gate equations directly
  struct ScalarLSTM {
    double wxi, wxf, wxo, wxg, whi, whf, who, whg, bi, bf, bo, bg;
    static double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }
    void step(double x, double& h, double& c) const {
      double i = sig(wxi * x + whi * h + bi);
      double f = sig(wxf * x + whf * h + bf);
      double o = sig(wxo * x + who * h + bo);
      double g = std::tanh(wxg * x + whg * h + bg);
      c = f * c + i * g;
      h = o * std::tanh(c);
    }
  };

  Rng rng(1313);
  ScalarLSTM ref{};
  double* fields[] = {&ref.wxi, &ref.wxf, &ref.wxo, &ref.wxg, &ref.whi, &ref.whf,
                      &ref.who, &ref.whg, &ref.bi,  &ref.bf,  &ref.bo,  &ref.bg};
  for (double* f : fields) *f = rng.normal(0.0, 0.8);

  // gate order in the stack: input, forget, output, candidate
  ConvLSTMGatesT<double> gates{TensorT<double>({4, 1, 1, 1}), TensorT<double>({4, 1, 1, 1}),
                               TensorT<double>({4})};
  gates.wx.v = {ref.wxi, ref.wxf, ref.wxo, ref.wxg};
  gates.wh.v = {ref.whi, ref.whf, ref.who, ref.whg};
  gates.b.v = {ref.bi, ref.bf, ref.bo, ref.bg};

  double h = 0.0, c = 0.0;
  ConvLSTMStateT<double> s{TensorT<double>({1, 1, 1}), TensorT<double>({1, 1, 1})};
  for (int step = 0; step < 100; ++step) {
    double x = rng.normal(0.0, 1.0);
    ref.step(x, h, c);
    TensorT<double> xt({1, 1, 1});
    xt.v[0] = x;
    s = convlstm_step(gates, xt, s);
    REQUIRE(s.h.v[0] == Catch::Approx(h).margin(1e-6));
    REQUIRE(s.c.v[0] == Catch::Approx(c).margin(1e-6));
  }
}

TEST_CASE("shape violations are rejected") {
  NetConfig cfg = small_cfg(NetVariant::unet_lstm);
  auto params = build_params<float>(cfg, 1);
  REQUIRE_THROWS_AS(forward(params, cfg, random_input<float>({2, 3, 15, 16}, 1)), Error);
  REQUIRE_THROWS_AS(forward(params, cfg, random_input<float>({2, 2, 16, 16}, 1)), Error);

  NetConfig plain = small_cfg(NetVariant::unet_plain, 2);
  auto pparams = build_params<float>(plain, 1);
  REQUIRE_THROWS_AS(forward(pparams, plain, random_input<float>({3, 3, 16, 16}, 1)), Error);
}

TEST_CASE("checkpoints round-trip parameters, config, and extras") {
  auto dir = fs::temp_directory_path() / "cdnet_test_ckpt";
  fs::remove_all(dir);
  fs::create_directories(dir);

  NetConfig cfg = small_cfg(NetVariant::unet_lstm);
  auto params = build_params<float>(cfg, 91);
  ordered_json extra{{"band_stats",
                      {{"bands", {"a", "b", "c"}}, {"mean", {1.0, 2.0, 3.0}}, {"stddev", {4.0, 5.0, 6.0}}}}};
  save_checkpoint(dir / "m.ckpt", cfg, 91, params, extra);

  auto loaded = load_checkpoint(dir / "m.ckpt");
  REQUIRE(loaded.seed == 91);
  REQUIRE(net_config_to_json(loaded.config) == net_config_to_json(cfg));
  REQUIRE(loaded.extra.at("band_stats").at("bands").size() == 3);
  REQUIRE(loaded.params.tensors.size() == params.tensors.size());
  for (const auto& [k, t] : params.tensors) REQUIRE(loaded.params.tensors.at(k).v == t.v);

  Tensor input = random_input<float>({2, 3, 16, 16}, 3);
  auto a = forward(params, cfg, input, NetMode::eval);
  auto b = forward(loaded.params, loaded.config, input, NetMode::eval);
  REQUIRE(a.v == b.v);

  REQUIRE_THROWS_AS(load_checkpoint(dir / "nope.ckpt"), Error);
}
