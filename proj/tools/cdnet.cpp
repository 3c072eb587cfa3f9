// cdnet — multi-date change detection pipeline driver.
//
// Every subcommand takes a JSON config, an output directory, and an optional
// seed override, and leaves a run.json provenance record next to its
// artifacts. Exit codes: 0 ok, 1 bad config, 2 missing input, 3 runtime
// failure; failures also print a machine-readable JSON object on stderr.

#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "cdnet/cli_commands.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_dir = ".";
  std::optional<uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON config file")->required();
  cmd->add_option("--out", args.out_dir, "output directory");
  cmd->add_option("--seed", args.seed, "override the config seed");
}

int fail_json(const cdnet::Error& e) {
  nlohmann::ordered_json j;
  j["error"] = {{"code", e.exit_code()},
                {"kind", e.kind() == cdnet::ErrKind::config
                             ? "config"
                             : (e.kind() == cdnet::ErrKind::input ? "input" : "runtime")},
                {"message", e.what()}};
  std::cerr << j.dump() << "\n";
  return e.exit_code();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cdnet: recurrent U-Net change detection on multi-date raster stacks"};
  app.require_subcommand(1);

  CommonArgs synth, patches, train, train_ens, predict, eval_args, render, experiment;
  auto* c_synth = app.add_subcommand("synth", "generate synthetic multi-date scenes");
  add_common(c_synth, synth);
  auto* c_patches = app.add_subcommand("patches", "extract and augment training patches");
  add_common(c_patches, patches);
  auto* c_train = app.add_subcommand("train", "train one model on a patch set");
  add_common(c_train, train);
  auto* c_train_ens = app.add_subcommand("train-ensemble", "5-fold cross-validation ensemble");
  add_common(c_train_ens, train_ens);
  auto* c_predict = app.add_subcommand("predict", "tiled whole-scene ensemble prediction");
  add_common(c_predict, predict);
  auto* c_eval = app.add_subcommand("eval", "confusion metrics between two masks");
  add_common(c_eval, eval_args);
  auto* c_render = app.add_subcommand("render", "TP/TN/FP/FN comparison image");
  add_common(c_render, render);
  auto* c_experiment = app.add_subcommand("experiment", "variant x dates ablation grid");
  add_common(c_experiment, experiment);

  CLI11_PARSE(app, argc, argv);

  try {
    if (c_synth->parsed()) {
      auto cfg = cdnet::cli::detail::load_config(synth.config_path);
      cdnet::cli::cmd_synth(cfg, synth.seed, synth.out_dir);
    } else if (c_patches->parsed()) {
      auto cfg = cdnet::cli::detail::load_config(patches.config_path);
      cdnet::cli::cmd_patches(cfg, patches.seed, patches.out_dir);
    } else if (c_train->parsed()) {
      auto cfg = cdnet::cli::detail::load_config(train.config_path);
      cdnet::cli::cmd_train(cfg, train.seed, train.out_dir);
    } else if (c_train_ens->parsed()) {
      auto cfg = cdnet::cli::detail::load_config(train_ens.config_path);
      cdnet::cli::cmd_train_ensemble(cfg, train_ens.seed, train_ens.out_dir);
    } else if (c_predict->parsed()) {
      auto cfg = cdnet::cli::detail::load_config(predict.config_path);
      cdnet::cli::cmd_predict(cfg, predict.seed, predict.out_dir);
    } else if (c_eval->parsed()) {
      auto cfg = cdnet::cli::detail::load_config(eval_args.config_path);
      auto metrics = cdnet::cli::cmd_eval(cfg, eval_args.seed, eval_args.out_dir);
      std::cout << cdnet::metrics_to_json(metrics).dump(2) << "\n";
    } else if (c_render->parsed()) {
      auto cfg = cdnet::cli::detail::load_config(render.config_path);
      cdnet::cli::cmd_render(cfg, render.seed, render.out_dir);
    } else if (c_experiment->parsed()) {
      auto cfg = cdnet::cli::detail::load_config(experiment.config_path);
      cdnet::cli::cmd_experiment(cfg, experiment.seed, experiment.out_dir, &std::cerr);
    }
  } catch (const cdnet::Error& e) {
    return fail_json(e);
  } catch (const std::exception& e) {
    return fail_json(cdnet::Error(cdnet::ErrKind::runtime, e.what()));
  }
  return 0;
}
