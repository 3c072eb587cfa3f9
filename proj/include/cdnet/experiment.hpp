#pragma once

// Ablation grid over {variant} x {date count} on synthetic scenes: generate,
// split, extract patches per date subset, train, tile-predict the held-out
// scenes, and pool the confusion counts into one report per cell.

#include <ostream>
#include <string>
#include <vector>

#include "cdnet/common.hpp"
#include "cdnet/infer.hpp"
#include "cdnet/raster.hpp"
#include "cdnet/sampler.hpp"
#include "cdnet/synthgen.hpp"
#include "cdnet/trainer.hpp"

namespace cdnet {

struct ExperimentConfig {
  SynthParams synth;  // scene template; per-scene seeds derive from the run seed
  int num_scenes = 25;
  double train_fraction = 0.8;
  SamplerConfig sampler;
  bool augment_patches = true;
  int base_depth = 8;
  int levels = 5;
  TrainConfig train;  // seed field ignored; per-cell seeds derive from the run seed
  std::vector<NetVariant> variants = {NetVariant::unet_plain, NetVariant::unet_lstm};
  std::vector<int> date_counts = {2, 3, 5};
  std::vector<uint64_t> seeds = {1, 2, 3};
  int ensemble_folds = 1;  // 1 = single model per cell, >=2 = fold ensemble
  int tile = 32;
  int tile_stride = 16;
  double threshold_tau = 0.5;
};

struct ExperimentCell {
  std::string variant;
  int num_dates = 0;
  uint64_t seed = 0;
  MetricsReport metrics;
};

inline void validate_experiment_config(const ExperimentConfig& cfg) {
  check(cfg.num_scenes >= 2, ErrKind::config, "experiment: num_scenes < 2");
  check(!cfg.variants.empty() && !cfg.date_counts.empty() && !cfg.seeds.empty(), ErrKind::config,
        "experiment: empty grid axis");
  check(cfg.ensemble_folds >= 1, ErrKind::config, "experiment: ensemble_folds < 1");
  for (int t : cfg.date_counts)
    check(t >= 2 && t <= cfg.synth.num_dates, ErrKind::config,
          cat("experiment: date count ", t, " not available from ", cfg.synth.num_dates,
              "-date scenes"));
}

inline std::vector<ExperimentCell> run_experiment(const ExperimentConfig& cfg,
                                                  std::ostream* progress = nullptr) {
  validate_experiment_config(cfg);
  std::vector<ExperimentCell> cells;

  for (uint64_t seed : cfg.seeds) {
    std::vector<Scene> scenes;
    scenes.reserve(static_cast<size_t>(cfg.num_scenes));
    for (int i = 0; i < cfg.num_scenes; ++i) {
      SynthParams p = cfg.synth;
      p.seed = derive_seed(seed, 0x5ce0e000ULL + static_cast<uint64_t>(i));
      scenes.push_back(generate_scene(p).scene);
    }
    auto [train_scenes, test_scenes] = split_scenes(std::move(scenes), cfg.train_fraction);
    const BandStats stats = scene_stats(train_scenes);

    for (NetVariant variant : cfg.variants) {
      for (int td : cfg.date_counts) {
        const auto idx = spread_date_indices(cfg.synth.num_dates, td);
        std::vector<Scene> train_views, test_views;
        for (const auto& s : train_scenes) train_views.push_back(subset_dates(s, idx));
        for (const auto& s : test_scenes) test_views.push_back(subset_dates(s, idx));

        PatchSet patches = extract_patches_multi(train_views, cfg.sampler, stats);
        if (cfg.augment_patches) patches = augment(patches, cfg.sampler);

        NetConfig net_cfg;
        net_cfg.in_channels = cfg.synth.num_bands;
        net_cfg.base_depth = cfg.base_depth;
        net_cfg.levels = cfg.levels;
        net_cfg.variant = variant;
        net_cfg.num_dates = td;

        TrainConfig tc = cfg.train;
        tc.class_weights = compute_class_weights(patches);
        tc.seed = derive_seed(seed, 0xab1a7e00ULL + static_cast<uint64_t>(td) * 8 +
                                        (variant == NetVariant::unet_lstm ? 1 : 0));

        std::vector<PredictModel> models;
        if (cfg.ensemble_folds >= 2) {
          auto results = train_ensemble(net_cfg, patches, tc, cfg.ensemble_folds);
          for (auto& r : results)
            models.push_back(PredictModel{net_cfg, std::move(r.params), stats});
        } else {
          std::vector<const Patch*> all;
          for (const auto& p : patches.patches) all.push_back(&p);
          auto result = train(net_cfg, build_params<float>(net_cfg, tc.seed), all, {}, tc);
          models.push_back(PredictModel{net_cfg, std::move(result.params), stats});
        }

        MetricsReport pooled;
        for (const auto& view : test_views) {
          ProbabilityMap pm = predict_scene(models, view, cfg.tile, cfg.tile_stride);
          ChangeMask pred = threshold(pm, cfg.threshold_tau);
          MetricsReport r = evaluate(pred, *view.mask);
          pooled.tp += r.tp;
          pooled.fp += r.fp;
          pooled.fn += r.fn;
          pooled.tn += r.tn;
        }
        MetricsReport cellm = pooled;
        cellm.precision_defined = pooled.tp + pooled.fp > 0;
        cellm.precision = cellm.precision_defined
                              ? static_cast<double>(pooled.tp) / static_cast<double>(pooled.tp + pooled.fp)
                              : 0.0;
        cellm.recall_defined = pooled.tp + pooled.fn > 0;
        cellm.recall = cellm.recall_defined
                           ? static_cast<double>(pooled.tp) / static_cast<double>(pooled.tp + pooled.fn)
                           : 0.0;
        cellm.f1 = (cellm.precision + cellm.recall) > 0.0
                       ? 2.0 * cellm.precision * cellm.recall / (cellm.precision + cellm.recall)
                       : 0.0;
        const size_t total = pooled.tp + pooled.fp + pooled.fn + pooled.tn;
        cellm.overall_accuracy =
            total > 0 ? static_cast<double>(pooled.tp + pooled.tn) / static_cast<double>(total) : 0.0;

        cells.push_back(ExperimentCell{variant_name(variant), td, seed, cellm});
        if (progress) {
          (*progress) << "cell variant=" << variant_name(variant) << " dates=" << td
                      << " seed=" << seed << " patches=" << patches.patches.size()
                      << " P=" << cellm.precision << " R=" << cellm.recall << " F1=" << cellm.f1
                      << " OA=" << cellm.overall_accuracy << "\n";
          progress->flush();
        }
      }
    }
  }
  return cells;
}

// mean change-class F1 over seeds for one (variant, date count) cell
inline double mean_f1(const std::vector<ExperimentCell>& cells, const std::string& variant,
                      int num_dates) {
  double sum = 0.0;
  int n = 0;
  for (const auto& c : cells)
    if (c.variant == variant && c.num_dates == num_dates) {
      sum += c.metrics.f1;
      ++n;
    }
  check(n > 0, ErrKind::runtime, cat("no experiment cells for ", variant, "/", num_dates));
  return sum / n;
}

inline ordered_json experiment_cells_to_json(const std::vector<ExperimentCell>& cells) {
  ordered_json arr = ordered_json::array();
  for (const auto& c : cells) {
    arr.push_back(ordered_json{{"variant", c.variant},
                               {"num_dates", c.num_dates},
                               {"seed", c.seed},
                               {"metrics", metrics_to_json(c.metrics)}});
  }
  return arr;
}

}  // namespace cdnet
