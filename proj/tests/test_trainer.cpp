#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cdnet/net.hpp"
#include "cdnet/rng.hpp"
#include "cdnet/sampler.hpp"
#include "cdnet/synthgen.hpp"
#include "cdnet/trainer.hpp"

using namespace cdnet;

namespace {

// small labeled patches with a learnable signal: change pixels carry a
// distinct offset in every band of the last date
PatchSet signal_patches(int n, int T, int C, int ps, uint64_t seed, double change_frac = 0.25,
                        float offset = 2.5f, float noise = 0.3f) {
  Rng rng(seed);
  PatchSet out;
  out.num_dates = T;
  out.num_bands = C;
  out.patch_size = ps;
  for (int i = 0; i < n; ++i) {
    Patch p;
    p.origin = {"synthetic", i, 0, 0};
    p.pixels = Tensor({T, C, ps, ps});
    p.labels.assign(static_cast<size_t>(ps) * ps, 0);
    for (auto& v : p.pixels.v) v = static_cast<float>(rng.normal(0.0, noise));
    const int side = std::max(1, static_cast<int>(std::lround(ps * std::sqrt(change_frac))));
    const int r0 = static_cast<int>(rng.below(static_cast<uint64_t>(ps - side + 1)));
    const int c0 = static_cast<int>(rng.below(static_cast<uint64_t>(ps - side + 1)));
    for (int r = r0; r < r0 + side; ++r)
      for (int c = c0; c < c0 + side; ++c) {
        p.labels[static_cast<size_t>(r) * ps + c] = 1;
        for (int b = 0; b < C; ++b)
          p.pixels.at4(T - 1, b, r, c) += offset;
      }
    size_t ch = p.change_pixels();
    out.n_change += ch;
    out.n_nochange += p.labels.size() - ch;
    out.patches.push_back(std::move(p));
  }
  return out;
}

std::vector<const Patch*> ptrs(const PatchSet& ps) {
  std::vector<const Patch*> v;
  for (const auto& p : ps.patches) v.push_back(&p);
  return v;
}

double pixel_accuracy(ModelParams& params, const NetConfig& cfg, const PatchSet& ps) {
  size_t correct = 0, total = 0;
  for (const auto& p : ps.patches) {
    Tensor input = p.pixels;
    auto probs = forward(params, cfg, input, NetMode::eval);
    const size_t HW = p.labels.size();
    for (size_t i = 0; i < HW; ++i) {
      const bool pred = probs.v[HW + i] > 0.5f;
      correct += pred == (p.labels[i] != 0) ? 1 : 0;
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace

TEST_CASE("weighted loss closed-form values") {
  const int ps = 4;
  const size_t HW = ps * ps;

  SECTION("perfect one-hot predictions") {
    Tensor probs({2, ps, ps});
    std::vector<uint8_t> labels(HW);
    for (size_t i = 0; i < HW; ++i) {
      labels[i] = i % 2;
      probs.v[i] = labels[i] == 0 ? 1.0f : 0.0f;
      probs.v[HW + i] = labels[i] == 1 ? 1.0f : 0.0f;
    }
    size_t clamped = 0;
    double loss = weighted_loss(probs, labels, {1.0, 1.0}, &clamped);
    REQUIRE(loss <= 1e-9);
    REQUIRE(clamped == 0);
  }

  SECTION("uniform predictions, unit weights -> ln 2") {
    Tensor probs({2, ps, ps}, 0.5f);
    std::vector<uint8_t> labels(HW, 0);
    labels[3] = 1;
    REQUIRE(weighted_loss(probs, labels, {1.0, 1.0}) ==
            Catch::Approx(std::log(2.0)).margin(1e-6));
  }

  SECTION("uniform predictions, mean-1 weights over balanced labels -> ln 2") {
    Tensor probs({2, ps, ps}, 0.5f);
    std::vector<uint8_t> labels(HW);
    for (size_t i = 0; i < HW; ++i) labels[i] = i < HW / 2 ? 0 : 1;
    REQUIRE(weighted_loss(probs, labels, {0.2, 1.8}) ==
            Catch::Approx(std::log(2.0)).margin(1e-6));
  }

  SECTION("zero probability at the labeled class is clamped and counted") {
    Tensor probs({2, ps, ps});
    std::vector<uint8_t> labels(HW, 1);  // all change, all probability on class 0
    for (size_t i = 0; i < HW; ++i) probs.v[i] = 1.0f;
    size_t clamped = 0;
    double loss = weighted_loss(probs, labels, {1.0, 1.0}, &clamped);
    REQUIRE(clamped == HW);
    REQUIRE(loss == Catch::Approx(-std::log(1e-12)).epsilon(1e-6));
  }
}

TEST_CASE("tape loss agrees with the probability-space contract") {
  NetConfig cfg;
  cfg.in_channels = 2;
  cfg.base_depth = 3;
  cfg.levels = 2;
  cfg.variant = NetVariant::unet_lstm;
  auto params = build_params<float>(cfg, 2);
  Rng rng(3);
  Tensor input({1, 2, 2, 8, 8});
  for (auto& v : input.v) v = static_cast<float>(rng.normal(0.0, 1.0));
  std::vector<uint8_t> labels(64);
  for (auto& l : labels) l = rng.uniform() < 0.3 ? 1 : 0;
  const ClassWeights w{0.4, 1.6};

  const float tape = batch_loss(params, cfg, input, labels,
                                {static_cast<float>(w.w_nochange), static_cast<float>(w.w_change)},
                                NetMode::train_frozen);

  Tensor single = input;
  single.shape = {2, 2, 8, 8};
  auto probs = forward(params, cfg, single, NetMode::train_frozen);
  REQUIRE(weighted_loss(probs, labels, w) == Catch::Approx(tape).epsilon(1e-5));
}

TEST_CASE("fold plans partition the inventory") {
  SECTION("10 into 5 folds of 2") {
    auto plan = make_folds(10, 5, 1);
    REQUIRE(plan.fold_sizes() == std::vector<size_t>{2, 2, 2, 2, 2});
    REQUIRE(plan.runs.size() == 5);
    for (int i = 0; i < 5; ++i) {
      REQUIRE(plan.runs[static_cast<size_t>(i)].heldout == i);
      REQUIRE(plan.runs[static_cast<size_t>(i)].train_folds.size() == 4);
    }
  }

  SECTION("the 32421-patch inventory splits 6485 + 4x6484") {
    auto plan = make_folds(32421, 5, 7);
    auto sizes = plan.fold_sizes();
    std::sort(sizes.begin(), sizes.end());
    REQUIRE(sizes == std::vector<size_t>{6484, 6484, 6484, 6484, 6485});
  }

  SECTION("deterministic under the same seed, exhaustive and disjoint") {
    auto a = make_folds(101, 5, 3);
    auto b = make_folds(101, 5, 3);
    REQUIRE(a.assignments == b.assignments);
    size_t n = 0;
    for (auto s : a.fold_sizes()) n += s;
    REQUIRE(n == 101);
    auto sizes = a.fold_sizes();
    REQUIRE(*std::max_element(sizes.begin(), sizes.end()) -
                *std::min_element(sizes.begin(), sizes.end()) <=
            1);
  }

  SECTION("too few patches rejected") { REQUIRE_THROWS_AS(make_folds(3, 5, 1), Error); }
}

TEST_CASE("one adam step moves a parameter by about -lr * sign(gradient)") {
  // single-parameter probe of the update rule used in train()
  const double lr = 1e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (double g : {0.37, -2.2, 400.0}) {
    double m = (1 - b1) * g, v = (1 - b2) * g * g;
    double mhat = m / (1 - b1), vhat = v / (1 - b2);
    double step = lr * mhat / (std::sqrt(vhat) + eps);
    REQUIRE(step == Catch::Approx(lr * (g > 0 ? 1.0 : -1.0)).epsilon(1e-4));
  }
}

TEST_CASE("zero epochs returns the initialization untouched") {
  NetConfig cfg;
  cfg.in_channels = 2;
  cfg.base_depth = 2;
  cfg.levels = 2;
  auto ps = signal_patches(4, 2, 2, 8, 1);
  TrainConfig tc;
  tc.epochs = 0;
  tc.batch_size = 4;
  tc.class_weights = compute_class_weights(ps);
  auto init = build_params<float>(cfg, 5);
  auto result = train(cfg, init, ptrs(ps), {}, tc);
  for (const auto& [k, t] : init.tensors) REQUIRE(result.params.tensors.at(k).v == t.v);
  REQUIRE(result.log.empty());
}

TEST_CASE("training is deterministic given the seed") {
  NetConfig cfg;
  cfg.in_channels = 2;
  cfg.base_depth = 2;
  cfg.levels = 2;
  auto ps = signal_patches(6, 2, 2, 8, 2);
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 4;
  tc.seed = 9;
  tc.learning_rate = 1e-3;
  tc.class_weights = compute_class_weights(ps);

  auto r1 = train(cfg, build_params<float>(cfg, tc.seed), ptrs(ps), {}, tc);
  auto r2 = train(cfg, build_params<float>(cfg, tc.seed), ptrs(ps), {}, tc);
  REQUIRE(r1.log.size() == r2.log.size());
  for (size_t i = 0; i < r1.log.size(); ++i)
    REQUIRE(r1.log[i].loss == Catch::Approx(r2.log[i].loss).margin(1e-6));
  for (const auto& [k, t] : r1.params.tensors) REQUIRE(r2.params.tensors.at(k).v == t.v);
}

TEST_CASE("a small model overfits a handful of patches") {
  NetConfig cfg;
  cfg.in_channels = 2;
  cfg.base_depth = 4;
  cfg.levels = 3;
  cfg.variant = NetVariant::unet_lstm;
  auto ps = signal_patches(6, 2, 2, 16, 3);
  TrainConfig tc;
  tc.epochs = 60;
  tc.batch_size = 6;
  tc.seed = 4;
  tc.learning_rate = 3e-3;
  tc.class_weights = compute_class_weights(ps);

  auto result = train(cfg, build_params<float>(cfg, tc.seed), ptrs(ps), {}, tc);
  REQUIRE(result.log.back().loss < result.log.front().loss);
  REQUIRE(pixel_accuracy(result.params, cfg, ps) >= 0.98);
}

TEST_CASE("ensemble training produces five runs with distinct held-out folds") {
  NetConfig cfg;
  cfg.in_channels = 2;
  cfg.base_depth = 2;
  cfg.levels = 2;
  auto ps = signal_patches(10, 2, 2, 8, 5);
  TrainConfig tc;
  tc.epochs = 0;
  tc.batch_size = 4;
  tc.seed = 77;
  tc.class_weights = compute_class_weights(ps);

  auto results = train_ensemble(cfg, ps, tc);
  REQUIRE(results.size() == 5);

  // epochs = 0: each run's params must equal its derived-seed initialization
  for (size_t i = 0; i < results.size(); ++i) {
    auto expect = build_params<float>(cfg, tc.seed + i);
    for (const auto& [k, t] : expect.tensors)
      REQUIRE(results[i].params.tensors.at(k).v == t.v);
  }
}

TEST_CASE("non-finite losses abort with a diagnostic") {
  NetConfig cfg;
  cfg.in_channels = 2;
  cfg.base_depth = 2;
  cfg.levels = 2;
  auto ps = signal_patches(4, 2, 2, 8, 6);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 4;
  tc.class_weights = compute_class_weights(ps);
  auto init = build_params<float>(cfg, 1);
  init.at("head.w").v[0] = std::numeric_limits<float>::quiet_NaN();
  REQUIRE_THROWS_WITH(train(cfg, init, ptrs(ps), {}, tc),
                      Catch::Matchers::ContainsSubstring("non-finite loss"));
}

TEST_CASE("inverse-frequency weighting trades precision for change recall") {
  NetConfig cfg;
  cfg.in_channels = 2;
  cfg.base_depth = 3;
  cfg.levels = 2;
  cfg.variant = NetVariant::unet_plain;
  // heavily imbalanced, weak signal: small change regions in strong noise
  auto ps = signal_patches(10, 2, 2, 16, 8, 0.03, 1.0f, 1.0f);

  TrainConfig weighted;
  weighted.epochs = 8;
  weighted.batch_size = 5;
  weighted.seed = 21;
  weighted.learning_rate = 1e-3;
  weighted.class_weights = compute_class_weights(ps);
  TrainConfig flat = weighted;
  flat.class_weights = {1.0, 1.0};

  auto rw = train(cfg, build_params<float>(cfg, weighted.seed), ptrs(ps), {}, weighted);
  auto rf = train(cfg, build_params<float>(cfg, flat.seed), ptrs(ps), {}, flat);

  auto recall = [&](ModelParams& params) {
    size_t tp = 0, fn = 0;
    for (const auto& p : ps.patches) {
      Tensor input = p.pixels;
      auto probs = forward(params, cfg, input, NetMode::eval);
      const size_t HW = p.labels.size();
      for (size_t i = 0; i < HW; ++i) {
        if (p.labels[i] == 0) continue;
        if (probs.v[HW + i] > 0.5f)
          ++tp;
        else
          ++fn;
      }
    }
    return static_cast<double>(tp) / static_cast<double>(tp + fn);
  };
  REQUIRE(recall(rw.params) > recall(rf.params));
}
