#pragma once

// Command implementations behind the cdnet CLI. Every command validates its
// JSON config against an explicit key whitelist, writes its artifacts under
// --out, and finishes with a run.json provenance record (config echo, seed,
// sha256 of every output file) sufficient to re-execute it.

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "cdnet/common.hpp"
#include "cdnet/experiment.hpp"
#include "cdnet/infer.hpp"
#include "cdnet/png_io.hpp"
#include "cdnet/raster.hpp"
#include "cdnet/sampler.hpp"
#include "cdnet/sha256.hpp"
#include "cdnet/synthgen.hpp"
#include "cdnet/trainer.hpp"

namespace cdnet::cli {

namespace detail {

inline void check_keys(const ordered_json& j, const std::string& ctx,
                       const std::vector<std::string>& required,
                       const std::vector<std::string>& optional) {
  check(j.is_object(), ErrKind::config, cat(ctx, ": expected a JSON object"));
  for (const auto& k : required)
    check(j.contains(k), ErrKind::config, cat(ctx, ": missing required key \"", k, "\""));
  for (const auto& [k, v] : j.items()) {
    if (std::find(required.begin(), required.end(), k) == required.end() &&
        std::find(optional.begin(), optional.end(), k) == optional.end())
      fail_config(cat(ctx, ": unknown key \"", k, "\""));
  }
}

template <typename T>
T get_or(const ordered_json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const std::exception& e) {
    fail_config(cat("config key \"", key, "\": ", e.what()));
  }
}

inline void write_json(const fs::path& path, const ordered_json& j) {
  std::string text = j.dump(2) + "\n";
  cdnet::detail::write_file(path, text.data(), text.size());
}

// run.json: config echo plus a sha256 of every artifact the command wrote
inline void write_run_record(const fs::path& out_dir, const std::string& command,
                             const ordered_json& config, std::optional<uint64_t> seed_override) {
  ordered_json rec;
  rec["command"] = command;
  rec["seed_override"] = seed_override ? ordered_json(*seed_override) : ordered_json(nullptr);
  rec["config"] = config;
  rec["outputs"] = ordered_json::object();

  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(out_dir))
    if (e.is_regular_file() && e.path().filename() != "run.json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files)
    rec["outputs"][fs::relative(f, out_dir).generic_string()] = sha256_file(f);

  write_json(out_dir / "run.json", rec);
}

inline ordered_json load_config(const fs::path& path) {
  auto bytes = cdnet::detail::read_file(path, "missing config file");
  try {
    return ordered_json::parse(bytes.begin(), bytes.end());
  } catch (const std::exception& e) {
    fail_config(cat("config parse error: ", e.what()));
  }
}

inline SynthParams synth_params_from_json(const ordered_json& j, const std::string& ctx) {
  check_keys(j, ctx,
             {},
             {"seed", "height", "width", "num_dates", "num_bands", "n_urban_events",
              "urban_size_range", "n_cloud_events", "cloud_radius_range", "seasonal_amplitude",
              "n_soil_patches", "noise_std", "cloud_interior_only", "num_scenes"});
  SynthParams p;
  p.seed = get_or<uint64_t>(j, "seed", 0);
  p.height = get_or<int>(j, "height", p.height);
  p.width = get_or<int>(j, "width", p.width);
  p.num_dates = get_or<int>(j, "num_dates", p.num_dates);
  p.num_bands = get_or<int>(j, "num_bands", p.num_bands);
  p.n_urban_events = get_or<int>(j, "n_urban_events", p.n_urban_events);
  if (j.contains("urban_size_range")) {
    p.urban_size_min = j.at("urban_size_range").at(0).get<int>();
    p.urban_size_max = j.at("urban_size_range").at(1).get<int>();
  }
  p.n_cloud_events = get_or<int>(j, "n_cloud_events", p.n_cloud_events);
  if (j.contains("cloud_radius_range")) {
    p.cloud_radius_min = j.at("cloud_radius_range").at(0).get<int>();
    p.cloud_radius_max = j.at("cloud_radius_range").at(1).get<int>();
  }
  p.seasonal_amplitude = get_or<double>(j, "seasonal_amplitude", p.seasonal_amplitude);
  p.n_soil_patches = get_or<int>(j, "n_soil_patches", p.n_soil_patches);
  p.noise_std = get_or<double>(j, "noise_std", p.noise_std);
  p.cloud_interior_only = get_or<bool>(j, "cloud_interior_only", p.cloud_interior_only);
  validate_params(p);
  return p;
}

inline SamplerConfig sampler_config_from_json(const ordered_json& j, const std::string& ctx,
                                              bool strict_keys = true) {
  if (strict_keys)
    check_keys(j, ctx, {}, {"patch_size", "stride_change", "stride_nochange", "aug_threshold"});
  SamplerConfig c;
  c.patch_size = get_or<int>(j, "patch_size", c.patch_size);
  c.stride_change = get_or<int>(j, "stride_change", c.stride_change);
  c.stride_nochange = get_or<int>(j, "stride_nochange", c.stride_nochange);
  c.aug_threshold = get_or<double>(j, "aug_threshold", c.aug_threshold);
  validate_sampler_config(c);
  return c;
}

inline ChangeMask load_mask_or_scene_mask(const fs::path& path) {
  if (fs::is_directory(path)) {
    Scene s = load_scene(path);
    check(s.mask.has_value(), ErrKind::input, cat("scene has no mask: ", path.string()));
    return *s.mask;
  }
  return load_mask(path);
}

}  // namespace detail

// --------------------------------------------------------------------------
// cdnet synth

inline void cmd_synth(const ordered_json& config, std::optional<uint64_t> seed_override,
                      const fs::path& out_dir) {
  SynthParams base = detail::synth_params_from_json(config, "synth config");
  if (seed_override) base.seed = *seed_override;
  const int num_scenes = detail::get_or<int>(config, "num_scenes", 1);
  check(num_scenes >= 1, ErrKind::config, "synth config: num_scenes < 1");

  fs::create_directories(out_dir);
  for (int i = 0; i < num_scenes; ++i) {
    SynthParams p = base;
    p.seed = derive_seed(base.seed, 0x5ce0e000ULL + static_cast<uint64_t>(i));
    SynthScene s = generate_scene(p);
    const fs::path dir = out_dir / s.scene.manifest.scene_id;
    save_scene(s.scene, dir);
    detail::write_json(dir / "events.json", event_log_to_json(s.log));
  }
  detail::write_run_record(out_dir, "synth", config, seed_override);
}

// --------------------------------------------------------------------------
// cdnet patches

inline void cmd_patches(const ordered_json& config, std::optional<uint64_t> seed_override,
                        const fs::path& out_dir) {
  detail::check_keys(config, "patches config", {"scenes"},
                     {"patch_size", "stride_change", "stride_nochange", "aug_threshold", "augment"});
  SamplerConfig sc = detail::sampler_config_from_json(config, "patches config", /*strict_keys=*/false);
  // scenes: explicit list of directories, or one directory of scene subdirs
  std::vector<fs::path> scene_dirs;
  const auto& js = config.at("scenes");
  if (js.is_string()) {
    const fs::path root = js.get<std::string>();
    check(fs::is_directory(root), ErrKind::input, cat("missing scene directory: ", root.string()));
    for (const auto& e : fs::directory_iterator(root))
      if (e.is_directory() && fs::exists(e.path() / "manifest.json")) scene_dirs.push_back(e.path());
    std::sort(scene_dirs.begin(), scene_dirs.end());
  } else {
    for (const auto& s : js) scene_dirs.emplace_back(s.get<std::string>());
  }
  check(!scene_dirs.empty(), ErrKind::input, "no scenes found");

  std::vector<Scene> scenes;
  for (const auto& d : scene_dirs) scenes.push_back(load_scene(d));
  BandStats stats = scene_stats(scenes);
  PatchSet ps = extract_patches_multi(scenes, sc, stats);
  if (detail::get_or<bool>(config, "augment", true)) ps = augment(ps, sc);

  fs::create_directories(out_dir);
  save_patchset(ps, sc, stats, out_dir);
  detail::write_run_record(out_dir, "patches", config, seed_override);
}

// --------------------------------------------------------------------------
// cdnet train / train-ensemble

namespace detail {

inline NetConfig net_config_from_cli(const ordered_json& j, const PatchSet& ps,
                                     const std::string& ctx) {
  check_keys(j, ctx, {}, {"base_depth", "levels", "num_classes", "variant"});
  NetConfig c;
  c.in_channels = ps.num_bands;
  c.num_dates = ps.num_dates;
  c.base_depth = get_or<int>(j, "base_depth", c.base_depth);
  c.levels = get_or<int>(j, "levels", c.levels);
  c.num_classes = get_or<int>(j, "num_classes", c.num_classes);
  c.variant = variant_from_name(get_or<std::string>(j, "variant", "unet_lstm"));
  validate_net_config(c);
  return c;
}

inline TrainConfig train_config_from_cli(const ordered_json& j, const ClassWeights& weights,
                                         const std::string& ctx) {
  check_keys(j, ctx, {},
             {"batch_size", "learning_rate", "epochs", "seed", "beta1", "beta2", "adam_eps"});
  TrainConfig c;
  c.batch_size = get_or<int>(j, "batch_size", c.batch_size);
  c.learning_rate = get_or<double>(j, "learning_rate", c.learning_rate);
  c.epochs = get_or<int>(j, "epochs", c.epochs);
  c.seed = get_or<uint64_t>(j, "seed", 0);
  c.beta1 = get_or<double>(j, "beta1", c.beta1);
  c.beta2 = get_or<double>(j, "beta2", c.beta2);
  c.adam_eps = get_or<double>(j, "adam_eps", c.adam_eps);
  c.class_weights = weights;
  validate_train_config(c);
  return c;
}

inline void write_checkpoint_artifacts(const fs::path& ckpt_path, const fs::path& log_path,
                                       const TrainResult& result, const BandStats& stats) {
  ordered_json extra;
  extra["train_config"] = train_config_to_json(result.train_config);
  extra["band_stats"] = band_stats_to_json(stats);
  extra["log"] = train_log_to_json(result.log);
  save_checkpoint(ckpt_path, result.net_config, result.train_config.seed, result.params, extra);

  std::string lines;
  for (const auto& e : result.log) {
    ordered_json je{{"epoch", e.epoch}, {"loss", e.loss}};
    if (std::isnan(e.heldout_f1))
      je["heldout_f1"] = nullptr;
    else
      je["heldout_f1"] = e.heldout_f1;
    lines += je.dump() + "\n";
  }
  cdnet::detail::write_file(log_path, lines.data(), lines.size());
}

}  // namespace detail

inline void cmd_train(const ordered_json& config, std::optional<uint64_t> seed_override,
                      const fs::path& out_dir) {
  detail::check_keys(config, "train config", {"patches"}, {"net", "train", "heldout_fraction"});
  LoadedPatchSet lp = load_patchset(config.at("patches").get<std::string>());
  check(!lp.patches.patches.empty(), ErrKind::input, "patch set is empty");

  NetConfig net_cfg = detail::net_config_from_cli(config.value("net", ordered_json::object()),
                                                  lp.patches, "train config net");
  ClassWeights weights = compute_class_weights(lp.patches);
  TrainConfig tc = detail::train_config_from_cli(config.value("train", ordered_json::object()),
                                                 weights, "train config train");
  if (seed_override) tc.seed = *seed_override;

  const double heldout_fraction = detail::get_or<double>(config, "heldout_fraction", 0.0);
  check(heldout_fraction >= 0.0 && heldout_fraction < 1.0, ErrKind::config,
        "train config: heldout_fraction out of [0,1)");
  std::vector<size_t> order(lp.patches.patches.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(tc.seed, 0x8e1d));
  rng.shuffle(order.begin(), order.end());
  const size_t n_heldout = static_cast<size_t>(heldout_fraction * static_cast<double>(order.size()));
  std::vector<const Patch*> train_list, heldout_list;
  for (size_t i = 0; i < order.size(); ++i) {
    if (i < n_heldout)
      heldout_list.push_back(&lp.patches.patches[order[i]]);
    else
      train_list.push_back(&lp.patches.patches[order[i]]);
  }
  check(!train_list.empty(), ErrKind::config, "heldout fraction leaves no training patches");

  TrainResult result = train(net_cfg, build_params<float>(net_cfg, tc.seed), train_list,
                             heldout_list, tc);
  fs::create_directories(out_dir);
  detail::write_checkpoint_artifacts(out_dir / "checkpoint.ckpt", out_dir / "train_log.jsonl",
                                     result, lp.stats);
  detail::write_run_record(out_dir, "train", config, seed_override);
}

inline void cmd_train_ensemble(const ordered_json& config, std::optional<uint64_t> seed_override,
                               const fs::path& out_dir) {
  detail::check_keys(config, "train-ensemble config", {"patches"}, {"net", "train", "folds"});
  LoadedPatchSet lp = load_patchset(config.at("patches").get<std::string>());
  check(!lp.patches.patches.empty(), ErrKind::input, "patch set is empty");

  NetConfig net_cfg = detail::net_config_from_cli(config.value("net", ordered_json::object()),
                                                  lp.patches, "train-ensemble config net");
  ClassWeights weights = compute_class_weights(lp.patches);
  TrainConfig tc = detail::train_config_from_cli(config.value("train", ordered_json::object()),
                                                 weights, "train-ensemble config train");
  if (seed_override) tc.seed = *seed_override;
  const int folds = detail::get_or<int>(config, "folds", 5);

  auto results = train_ensemble(net_cfg, lp.patches, tc, folds);
  fs::create_directories(out_dir);
  for (size_t i = 0; i < results.size(); ++i) {
    detail::write_checkpoint_artifacts(out_dir / cat("checkpoint_", i, ".ckpt"),
                                       out_dir / cat("train_log_", i, ".jsonl"), results[i],
                                       lp.stats);
  }
  detail::write_run_record(out_dir, "train-ensemble", config, seed_override);
}

// --------------------------------------------------------------------------
// cdnet predict / eval / render

inline void cmd_predict(const ordered_json& config, std::optional<uint64_t> seed_override,
                        const fs::path& out_dir) {
  detail::check_keys(config, "predict config", {"checkpoints", "scene"},
                     {"tile", "tile_stride", "threshold"});
  std::vector<PredictModel> models;
  for (const auto& c : config.at("checkpoints"))
    models.push_back(predict_model_from_checkpoint(load_checkpoint(c.get<std::string>())));
  Scene scene = load_scene(config.at("scene").get<std::string>());

  const int tile = detail::get_or<int>(config, "tile", 32);
  const int stride = detail::get_or<int>(config, "tile_stride", 16);
  const double tau = detail::get_or<double>(config, "threshold", 0.5);

  ProbabilityMap pm = predict_scene(models, scene, tile, stride);
  ChangeMask mask = threshold(pm, tau);

  fs::create_directories(out_dir);
  save_probability_map(pm, out_dir / "pmap");
  save_mask(mask, out_dir / "pred_mask");
  detail::write_run_record(out_dir, "predict", config, seed_override);
}

inline MetricsReport cmd_eval(const ordered_json& config, std::optional<uint64_t> seed_override,
                              const fs::path& out_dir) {
  detail::check_keys(config, "eval config", {"pred", "gt"}, {});
  ChangeMask pred = detail::load_mask_or_scene_mask(config.at("pred").get<std::string>());
  ChangeMask gt = detail::load_mask_or_scene_mask(config.at("gt").get<std::string>());
  MetricsReport r = evaluate(pred, gt);
  fs::create_directories(out_dir);
  detail::write_json(out_dir / "metrics.json", metrics_to_json(r));
  detail::write_run_record(out_dir, "eval", config, seed_override);
  return r;
}

inline void cmd_render(const ordered_json& config, std::optional<uint64_t> seed_override,
                       const fs::path& out_dir) {
  detail::check_keys(config, "render config", {"pred", "gt"}, {});
  ChangeMask pred = detail::load_mask_or_scene_mask(config.at("pred").get<std::string>());
  ChangeMask gt = detail::load_mask_or_scene_mask(config.at("gt").get<std::string>());
  RgbImage img = render_comparison(pred, gt);
  fs::create_directories(out_dir);
  write_png(out_dir / "comparison.png", img);
  detail::write_run_record(out_dir, "render", config, seed_override);
}

// --------------------------------------------------------------------------
// cdnet experiment

inline ExperimentConfig experiment_config_from_json(const ordered_json& config,
                                                    std::optional<uint64_t> seed_override) {
  detail::check_keys(config, "experiment config", {},
                     {"seeds", "num_scenes", "train_fraction", "synth", "sampler", "augment",
                      "net", "train", "variants", "date_counts", "ensemble_folds", "tile",
                      "tile_stride", "threshold"});
  ExperimentConfig ec;
  if (config.contains("synth"))
    ec.synth = detail::synth_params_from_json(config.at("synth"), "experiment synth");
  if (config.contains("sampler"))
    ec.sampler = detail::sampler_config_from_json(config.at("sampler"), "experiment sampler");
  ec.num_scenes = detail::get_or<int>(config, "num_scenes", ec.num_scenes);
  ec.train_fraction = detail::get_or<double>(config, "train_fraction", ec.train_fraction);
  ec.augment_patches = detail::get_or<bool>(config, "augment", ec.augment_patches);
  if (config.contains("net")) {
    detail::check_keys(config.at("net"), "experiment net", {}, {"base_depth", "levels"});
    ec.base_depth = detail::get_or<int>(config.at("net"), "base_depth", ec.base_depth);
    ec.levels = detail::get_or<int>(config.at("net"), "levels", ec.levels);
  }
  if (config.contains("train")) {
    ClassWeights placeholder{1.0, 1.0};
    ec.train = detail::train_config_from_cli(config.at("train"), placeholder, "experiment train");
  }
  if (config.contains("variants")) {
    ec.variants.clear();
    for (const auto& v : config.at("variants")) ec.variants.push_back(variant_from_name(v.get<std::string>()));
  }
  if (config.contains("date_counts")) ec.date_counts = config.at("date_counts").get<std::vector<int>>();
  if (config.contains("seeds")) ec.seeds = config.at("seeds").get<std::vector<uint64_t>>();
  if (seed_override) ec.seeds = {*seed_override};
  ec.ensemble_folds = detail::get_or<int>(config, "ensemble_folds", ec.ensemble_folds);
  ec.tile = detail::get_or<int>(config, "tile", ec.tile);
  ec.tile_stride = detail::get_or<int>(config, "tile_stride", ec.tile_stride);
  ec.threshold_tau = detail::get_or<double>(config, "threshold", ec.threshold_tau);
  validate_experiment_config(ec);
  return ec;
}

inline void cmd_experiment(const ordered_json& config, std::optional<uint64_t> seed_override,
                           const fs::path& out_dir, std::ostream* progress = nullptr) {
  ExperimentConfig ec = experiment_config_from_json(config, seed_override);
  auto cells = run_experiment(ec, progress);

  ordered_json report;
  report["cells"] = experiment_cells_to_json(cells);
  report["summary"] = ordered_json::array();
  for (NetVariant v : ec.variants)
    for (int td : ec.date_counts)
      report["summary"].push_back(ordered_json{{"variant", variant_name(v)},
                                               {"num_dates", td},
                                               {"mean_f1", mean_f1(cells, variant_name(v), td)}});
  fs::create_directories(out_dir);
  detail::write_json(out_dir / "experiment.json", report);
  detail::write_run_record(out_dir, "experiment", config, seed_override);
}

}  // namespace cdnet::cli
