#pragma once

// Weighted-loss optimization on a patch inventory plus the 5-fold ensemble
// strategy: seeded shuffle into k folds, one run per held-out fold, run i
// seeded with (seed + i) for both init and shuffling.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "cdnet/common.hpp"
#include "cdnet/net.hpp"
#include "cdnet/rng.hpp"
#include "cdnet/sampler.hpp"

namespace cdnet {

struct TrainConfig {
  int batch_size = 64;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int epochs = 30;
  uint64_t seed = 0;
  ClassWeights class_weights;
};

inline void validate_train_config(const TrainConfig& c) {
  check(c.batch_size >= 1, ErrKind::config, "train config: batch_size < 1");
  check(c.learning_rate > 0.0, ErrKind::config, "train config: learning_rate <= 0");
  check(c.epochs >= 0, ErrKind::config, "train config: negative epochs");
  check(c.class_weights.w_nochange > 0.0 && c.class_weights.w_change > 0.0, ErrKind::config,
        "train config: non-positive class weights");
}

inline ordered_json train_config_to_json(const TrainConfig& c) {
  return ordered_json{{"batch_size", c.batch_size},
                      {"learning_rate", c.learning_rate},
                      {"beta1", c.beta1},
                      {"beta2", c.beta2},
                      {"adam_eps", c.adam_eps},
                      {"epochs", c.epochs},
                      {"seed", c.seed},
                      {"class_weights", {c.class_weights.w_nochange, c.class_weights.w_change}}};
}

inline TrainConfig train_config_from_json(const ordered_json& j) {
  TrainConfig c;
  c.batch_size = j.at("batch_size").get<int>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.beta1 = j.value("beta1", 0.9);
  c.beta2 = j.value("beta2", 0.999);
  c.adam_eps = j.value("adam_eps", 1e-8);
  c.epochs = j.at("epochs").get<int>();
  c.seed = j.at("seed").get<uint64_t>();
  c.class_weights.w_nochange = j.at("class_weights").at(0).get<double>();
  c.class_weights.w_change = j.at("class_weights").at(1).get<double>();
  validate_train_config(c);
  return c;
}

// ---------------------------------------------------------------------------
// weighted cross entropy on probabilities (the loss contract; the training
// path computes the same value fused with the softmax for stability)

inline double weighted_loss(const Tensor& probs, const std::vector<uint8_t>& labels,
                            const ClassWeights& w, size_t* clamp_count = nullptr) {
  check(probs.rank() == 3, ErrKind::runtime, "weighted_loss: probs must be (K,H,W)");
  const int K = probs.dim(0);
  const size_t HW = static_cast<size_t>(probs.dim(1)) * probs.dim(2);
  check(labels.size() == HW, ErrKind::runtime, "weighted_loss: label count mismatch");
  check(K >= 2, ErrKind::runtime, "weighted_loss: need at least two classes");

  double total = 0.0;
  size_t clamped = 0;
  for (size_t p = 0; p < HW; ++p) {
    const uint8_t y = labels[p];
    double prob = probs.v[static_cast<size_t>(y) * HW + p];
    if (prob < 1e-12) {
      prob = 1e-12;
      ++clamped;
    }
    total += (y == 1 ? w.w_change : w.w_nochange) * -std::log(prob);
  }
  if (clamp_count) *clamp_count = clamped;
  return total / static_cast<double>(HW);
}

// ---------------------------------------------------------------------------
// folds

struct FoldPlan {
  int k = 5;
  std::vector<int> assignments;  // fold index per patch
  struct Run {
    std::vector<int> train_folds;
    int heldout = 0;
  };
  std::vector<Run> runs;

  std::vector<size_t> fold_sizes() const {
    std::vector<size_t> sizes(static_cast<size_t>(k), 0);
    for (int a : assignments) ++sizes[static_cast<size_t>(a)];
    return sizes;
  }
};

inline FoldPlan make_folds(size_t n_patches, int k, uint64_t seed) {
  check(k >= 2, ErrKind::config, "make_folds: k < 2");
  check(n_patches >= static_cast<size_t>(k), ErrKind::config, "make_folds: too few patches");
  std::vector<size_t> order(n_patches);
  for (size_t i = 0; i < n_patches; ++i) order[i] = i;
  Rng rng(derive_seed(seed, 0xf01d));
  rng.shuffle(order.begin(), order.end());

  FoldPlan plan;
  plan.k = k;
  plan.assignments.assign(n_patches, 0);
  for (size_t pos = 0; pos < n_patches; ++pos)
    plan.assignments[order[pos]] = static_cast<int>(pos % static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) {
    FoldPlan::Run run;
    run.heldout = i;
    for (int f = 0; f < k; ++f)
      if (f != i) run.train_folds.push_back(f);
    plan.runs.push_back(std::move(run));
  }
  return plan;
}

inline FoldPlan make_folds(const PatchSet& ps, int k, uint64_t seed) {
  return make_folds(ps.patches.size(), k, seed);
}

// ---------------------------------------------------------------------------
// training

struct EpochLog {
  int epoch = 0;
  double loss = 0.0;
  double heldout_f1 = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  ModelParams params;
  NetConfig net_config;
  TrainConfig train_config;
  std::vector<EpochLog> log;
};

namespace detail {

inline void fill_batch(const std::vector<const Patch*>& patches, const std::vector<size_t>& order,
                       size_t begin, size_t end, Tensor& input, std::vector<uint8_t>& labels) {
  const size_t B = end - begin;
  const Patch& first = *patches[order[begin]];
  const size_t pix = first.pixels.count();
  const size_t lab = first.labels.size();
  input.shape = {static_cast<int>(B), first.pixels.dim(0), first.pixels.dim(1),
                 first.pixels.dim(2), first.pixels.dim(3)};
  input.v.resize(B * pix);
  labels.resize(B * lab);
  for (size_t i = 0; i < B; ++i) {
    const Patch& p = *patches[order[begin + i]];
    std::copy_n(p.pixels.data(), pix, input.data() + i * pix);
    std::copy_n(p.labels.data(), lab, labels.data() + i * lab);
  }
}

struct Confusion {
  size_t tp = 0, fp = 0, fn = 0, tn = 0;
  double f1() const {
    const double denom = 2.0 * static_cast<double>(tp) + static_cast<double>(fp + fn);
    return denom > 0.0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
  }
};

// change-class confusion from eval-mode forward over a patch list
inline Confusion heldout_confusion(ModelParams& params, const NetConfig& cfg,
                                   const std::vector<const Patch*>& patches, int batch_size) {
  Confusion conf;
  std::vector<size_t> order(patches.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Tensor input;
  std::vector<uint8_t> labels;
  for (size_t b = 0; b < patches.size(); b += static_cast<size_t>(batch_size)) {
    const size_t e = std::min(patches.size(), b + static_cast<size_t>(batch_size));
    fill_batch(patches, order, b, e, input, labels);
    Tensor probs = forward_batch(params, cfg, input, NetMode::eval);
    const int K = probs.dim(1);
    const size_t HW = static_cast<size_t>(probs.dim(2)) * probs.dim(3);
    for (size_t n = 0; n < e - b; ++n)
      for (size_t p = 0; p < HW; ++p) {
        const bool pred = probs.v[(n * K + 1) * HW + p] > 0.5f;
        const bool truth = labels[n * HW + p] != 0;
        if (pred && truth)
          ++conf.tp;
        else if (pred && !truth)
          ++conf.fp;
        else if (!pred && truth)
          ++conf.fn;
        else
          ++conf.tn;
      }
  }
  return conf;
}

}  // namespace detail

// Adam on the weighted cross entropy. Mini-batches are seed-shuffled every
// epoch; the returned checkpoint is the final-epoch state.
inline TrainResult train(const NetConfig& net_cfg, ModelParams init,
                         const std::vector<const Patch*>& train_patches,
                         const std::vector<const Patch*>& heldout_patches,
                         const TrainConfig& cfg) {
  validate_net_config(net_cfg);
  validate_train_config(cfg);
  check(!train_patches.empty(), ErrKind::config, "train: empty patch list");

  TrainResult result;
  result.params = std::move(init);
  result.net_config = net_cfg;
  result.train_config = cfg;

  const std::array<float, 2> weights{static_cast<float>(cfg.class_weights.w_nochange),
                                     static_cast<float>(cfg.class_weights.w_change)};

  // Adam state
  std::map<std::string, Tensor> m, v;
  for (const auto& [key, t] : result.params.tensors)
    if (ModelParams::is_learnable(key)) {
      m[key] = Tensor(t.shape);
      v[key] = Tensor(t.shape);
    }
  int64_t step = 0;

  Rng shuffle_rng(derive_seed(cfg.seed, 0x5d0f));
  std::vector<size_t> order(train_patches.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  Tensor input;
  std::vector<uint8_t> labels;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    size_t pixel_sum = 0;
    for (size_t b = 0; b < order.size(); b += static_cast<size_t>(cfg.batch_size)) {
      const size_t e = std::min(order.size(), b + static_cast<size_t>(cfg.batch_size));
      detail::fill_batch(train_patches, order, b, e, input, labels);
      auto lg = loss_and_gradients(result.params, net_cfg, input, labels, weights, NetMode::train);
      if (!std::isfinite(lg.loss))
        fail_runtime(cat("non-finite loss at epoch ", epoch, ", batch starting at ", b));
      loss_sum += static_cast<double>(lg.loss) * static_cast<double>(labels.size());
      pixel_sum += labels.size();

      ++step;
      const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
      for (auto& [key, grad] : lg.grads) {
        Tensor& pm = m.at(key);
        Tensor& pv = v.at(key);
        Tensor& pp = result.params.at(key);
        const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
        for (size_t i = 0; i < grad.count(); ++i) {
          const float gvi = grad.v[i];
          pm.v[i] = b1 * pm.v[i] + (1.0f - b1) * gvi;
          pv.v[i] = b2 * pv.v[i] + (1.0f - b2) * gvi * gvi;
          const double mhat = static_cast<double>(pm.v[i]) / bc1;
          const double vhat = static_cast<double>(pv.v[i]) / bc2;
          pp.v[i] = static_cast<float>(pp.v[i] -
                                       cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps));
        }
      }
    }

    EpochLog el;
    el.epoch = epoch;
    el.loss = loss_sum / static_cast<double>(pixel_sum);
    if (!heldout_patches.empty())
      el.heldout_f1 =
          detail::heldout_confusion(result.params, net_cfg, heldout_patches, cfg.batch_size).f1();
    result.log.push_back(el);
  }
  return result;
}

// Five runs, fold i held out of run i, seeds derived as seed + run index.
inline std::vector<TrainResult> train_ensemble(const NetConfig& net_cfg, const PatchSet& ps,
                                               const TrainConfig& cfg, int k = 5) {
  FoldPlan plan = make_folds(ps, k, cfg.seed);
  std::vector<TrainResult> results;
  for (int run = 0; run < plan.k; ++run) {
    std::vector<const Patch*> train_list, heldout_list;
    for (size_t i = 0; i < ps.patches.size(); ++i) {
      if (plan.assignments[i] == plan.runs[static_cast<size_t>(run)].heldout)
        heldout_list.push_back(&ps.patches[i]);
      else
        train_list.push_back(&ps.patches[i]);
    }
    TrainConfig run_cfg = cfg;
    run_cfg.seed = cfg.seed + static_cast<uint64_t>(run);
    ModelParams init = build_params<float>(net_cfg, run_cfg.seed);
    results.push_back(train(net_cfg, std::move(init), train_list, heldout_list, run_cfg));
  }
  return results;
}

inline ordered_json train_log_to_json(const std::vector<EpochLog>& log) {
  ordered_json j = ordered_json::array();
  for (const auto& e : log) {
    ordered_json je{{"epoch", e.epoch}, {"loss", e.loss}};
    if (std::isnan(e.heldout_f1))
      je["heldout_f1"] = nullptr;
    else
      je["heldout_f1"] = e.heldout_f1;
    j.push_back(std::move(je));
  }
  return j;
}

}  // namespace cdnet
