// modaseg: cross-modality phantom segmentation pipeline CLI.
//
// Verbs mirror the pipeline phases; `run-all` chains them with resume.

#include <cstdint>
#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "modaseg/pipeline.hpp"

using namespace modaseg;

int main(int argc, char** argv) {
  CLI::App app{"cross-modality phantom segmentation pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::string scale = "desk";
  uint64_t seed = 0;
  bool seed_given = false;
  PipelineOptions opt;

  app.add_option("--config", config_path, "experiment config JSON");
  app.add_option("--scale", scale, "preset when no config is given")
      ->check(CLI::IsMember({"desk", "paper"}));
  app.add_option("--seed", seed, "override the config seed")
      ->each([&](const std::string&) { seed_given = true; });
  app.add_flag("--allow-partial", opt.allow_partial,
               "tolerate missing ensemble members / predictions");
  app.add_flag("--deterministic", opt.deterministic,
               "single-threaded bit-stable execution");
  app.add_flag("--dry-run", opt.dry_run, "print the plan, change nothing");
  app.add_flag("--verbose,-v", opt.verbose, "per-epoch training logs");

  auto sub = [&](const char* name, const char* desc) {
    CLI::App* s = app.add_subcommand(name, desc);
    s->fallthrough();  // let the global flags appear after the verb
    return s;
  };
  auto* c_phantom = sub("phantom", "generate the synthetic datasets");
  auto* c_train_i2i = sub("train-i2i", "train the image translator");
  auto* c_translate = sub("translate", "translate source cases");
  auto* c_train_seg = sub("train-seg", "train segmentation fold(s)");
  c_train_seg->add_option("--fold", opt.fold, "train only this fold (default: all)");
  auto* c_infer = sub("infer", "ensemble inference on target cases");
  auto* c_train_koos = sub("train-koos", "fit the grade classifier");
  auto* c_predict_koos = sub("predict-koos", "grade predicted segmentations");
  auto* c_evaluate = sub("evaluate", "metrics report against ground truth");
  auto* c_run_all = sub("run-all", "every phase in order, with resume");

  CLI11_PARSE(app, argc, argv);

  try {
    ExperimentConfig cfg = config_path.empty() ? ExperimentConfig::preset(scale)
                                               : ExperimentConfig::load(config_path);
    if (seed_given) cfg.seed = seed;
    cfg.validate();

    if (c_phantom->parsed()) cmd_phantom(cfg, opt);
    if (c_train_i2i->parsed()) cmd_train_i2i(cfg, opt);
    if (c_translate->parsed()) cmd_translate(cfg, opt);
    if (c_train_seg->parsed()) cmd_train_seg(cfg, opt);
    if (c_infer->parsed()) cmd_infer(cfg, opt);
    if (c_train_koos->parsed()) cmd_train_koos(cfg, opt);
    if (c_predict_koos->parsed()) cmd_predict_koos(cfg, opt);
    if (c_evaluate->parsed()) std::cout << cmd_evaluate(cfg, opt).to_json();
    if (c_run_all->parsed()) {
      MetricsReport report = cmd_run_all(cfg, opt);
      if (!opt.dry_run) std::cout << report.to_json();
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
