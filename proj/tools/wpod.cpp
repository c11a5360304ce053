// Copyright 2026 The wpod-edge Authors
// SPDX-License-Identifier: Apache-2.0
//
// wpod: train, evaluate and run the plate detector.
//
// Exit codes: 0 success, 1 validation failure, 2 I/O or usage error.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "wpod/app.hpp"

namespace {

using wpod::app::kExitIo;

struct Common {
  std::string config_path;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::vector<std::string> overrides;
};

}  // namespace

int main(int argc, char** argv) {
  wpod::app::tune_allocator();

  CLI::App app{"Edge-augmented warped planar object detector for license plates"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--config", common.config_path, "key = value config file")->check(CLI::ExistingFile);
  app.add_option("--seed", common.seed, "seed for initialization, batches and synthesis");
  app.add_option("--threads", common.threads, "worker threads for eval")->check(CLI::PositiveNumber);
  app.add_option("--set", common.overrides, "override a config key, e.g. --set net.variant=baseline");

  // train
  auto* train = app.add_subcommand("train", "train a model and write a checkpoint");
  std::string train_out, train_log, train_data;
  std::optional<std::size_t> train_iters, train_synth;
  std::optional<std::string> train_variant;
  bool fixed_batch = false;
  train->add_option("--out", train_out, "checkpoint path")->required();
  train->add_option("--log", train_log, "loss log CSV (default <out>.csv)");
  train->add_option("--data", train_data, "annotation file (default: synthetic scenes)");
  train->add_option("--synth-count", train_synth, "number of synthetic scenes");
  train->add_option("--iterations", train_iters, "training iterations");
  train->add_option("--variant", train_variant, "baseline | edge_augmented");
  train->add_flag("--fixed-batch", fixed_batch, "overfit the first batch, no augmentation");

  // eval
  auto* eval = app.add_subcommand("eval", "report mean qIoU of one or more checkpoints");
  std::vector<std::string> eval_ckpts;
  std::string eval_data, eval_csv;
  std::optional<std::size_t> eval_synth;
  std::optional<std::uint64_t> eval_synth_seed;
  std::optional<double> eval_tau, eval_nms;
  eval->add_option("checkpoints", eval_ckpts, "checkpoint files; the first is the delta reference")
      ->required();
  eval->add_option("--data", eval_data, "annotation file (default: synthetic scenes)");
  eval->add_option("--synth-count", eval_synth, "number of synthetic scenes");
  eval->add_option("--synth-seed", eval_synth_seed, "seed of the first synthetic scene");
  eval->add_option("--tau", eval_tau, "detection threshold (default from checkpoint)");
  eval->add_option("--nms", eval_nms, "NMS qIoU threshold (default from checkpoint)");
  eval->add_option("--csv-dir", eval_csv, "write <checkpoint>.eval.csv here");

  // detect
  auto* detect = app.add_subcommand("detect", "detect plates in one image");
  wpod::app::DetectRequest det;
  std::string det_ckpt, det_image, det_out;
  detect->add_option("--checkpoint", det_ckpt)->required();
  detect->add_option("--image", det_image, "P6/P5 image")->required();
  detect->add_option("--out-dir", det_out)->required();
  detect->add_option("--tau", det.tau, "detection threshold (default from checkpoint)");
  detect->add_option("--nms", det.nms_threshold, "NMS qIoU threshold");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the full model");
  wpod::app::GradCheckRequest gc;
  gradcheck->add_option("--samples", gc.samples_per_tensor, "entries checked per tensor");
  gradcheck->add_option("--perturbation", gc.perturbation, "central difference step");
  gradcheck->add_option("--corrupt-kernel-grad", gc.corrupt_kernel_grad,
                        "scale conv kernel gradients (negative control)");

  // edges
  auto* edges = app.add_subcommand("edges", "write Sobel x, y and magnitude maps as PGM");
  wpod::app::EdgesRequest ed;
  std::string ed_image, ed_out;
  edges->add_option("--image", ed_image)->required();
  edges->add_option("--out-dir", ed_out)->required();
  edges->add_flag("--presmooth", ed.presmooth, "3x3 binomial smoothing first");
  edges->add_flag("--raw", ed.dump_raw, "also dump unnormalized values as text");

  // synth
  auto* synth = app.add_subcommand("synth", "write synthetic scenes and annotations");
  wpod::app::SynthRequest sy;
  std::string sy_out;
  synth->add_option("--count", sy.count, "number of scenes");
  synth->add_option("--out-dir", sy_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitIo;
  }

  // --config first, then --set key=value in order, then subcommand flags.
  wpod::app::RunConfig cfg;
  try {
    wpod::KeyValueConfig kv;
    if (!common.config_path.empty()) kv = wpod::KeyValueConfig::load(common.config_path);
    for (const auto& o : common.overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos || eq == 0) throw wpod::ConfigError("--set expects key=value, got " + o);
      kv.set(o.substr(0, eq), o.substr(eq + 1));
    }
    cfg = wpod::app::RunConfig::from_config(kv);
    if (cfg.data.annotations && cfg.data.annotations->is_relative() && !common.config_path.empty()) {
      cfg.data.annotations = std::filesystem::path(common.config_path).parent_path() / *cfg.data.annotations;
    }
    if (train_variant) cfg.net.variant = wpod::net::parse_variant(*train_variant);
    if (train_iters) cfg.train.iterations = *train_iters;
    if (fixed_batch) cfg.train.fixed_batch = true;
    if (!train_data.empty()) cfg.data.annotations = train_data;
    if (train_synth) cfg.data.synth_count = *train_synth;
    cfg.validate();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  }

  if (*train) {
    wpod::app::TrainRequest req{cfg, train_out, std::nullopt, common.seed};
    if (!train_log.empty()) req.log_path = train_log;
    return wpod::app::cmd_train(req, std::cout, std::cerr);
  }
  if (*eval) {
    wpod::app::EvalRequest req;
    for (const auto& c : eval_ckpts) req.checkpoints.emplace_back(c);
    req.data = cfg.data;
    if (!eval_data.empty()) req.data.annotations = eval_data;
    if (eval_synth) req.data.synth_count = *eval_synth;
    req.data.synth_first_seed = eval_synth_seed.value_or(cfg.data.synth_first_seed);
    req.synth = cfg.synth;
    req.tau = eval_tau;
    req.nms_threshold = eval_nms;
    if (!eval_csv.empty()) req.csv_dir = eval_csv;
    req.threads = common.threads;
    return wpod::app::cmd_eval(req, std::cout, std::cerr);
  }
  if (*detect) {
    det.checkpoint = det_ckpt;
    det.image = det_image;
    det.out_dir = det_out;
    return wpod::app::cmd_detect(det, std::cout, std::cerr);
  }
  if (*gradcheck) {
    gc.net = cfg.net;
    gc.seed = common.seed;
    return wpod::app::cmd_gradcheck(gc, std::cout, std::cerr);
  }
  if (*edges) {
    ed.image = ed_image;
    ed.out_dir = ed_out;
    return wpod::app::cmd_edges(ed, std::cout, std::cerr);
  }
  sy.synth = cfg.synth;
  sy.first_seed = common.seed;
  sy.out_dir = sy_out;
  return wpod::app::cmd_synth(sy, std::cout, std::cerr);
}
