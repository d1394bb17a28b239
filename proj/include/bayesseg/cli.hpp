#pragma once
// Command-line front end: synth, train, eval, predict.
//
// Exit codes: 0 success, 2 usage or configuration, 3 data, 4 numeric failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "bayesseg/checkpoint.hpp"
#include "bayesseg/config.hpp"
#include "bayesseg/trainer.hpp"

namespace bayesseg {

enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitData = 3, kExitNumeric = 4 };

namespace cli {

namespace fs = std::filesystem;

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DataError("cannot create directory '" + dir.string() + "'");
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text)) throw DataError("cannot write '" + path.string() + "'");
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string spec;
  std::string out;
};

inline int cmd_synth(const SynthArgs& args, std::ostream& log) {
  SyntheticSpec spec = parse_synthetic(read_json_file(args.spec, "spec"), "");
  if (auto s = seed_from_env()) spec.seed = *s;
  const auto samples = generate_synthetic(spec);
  const fs::path root(args.out);
  ensure_dir(root);
  write_dataset(root, samples);
  Json entries = Json::array();
  for (const auto& s : samples) {
    std::size_t positives = 0;
    for (double v : s.mask.data()) positives += v == 1.0;
    entries.push_back({{"id", s.id},
                       {"image", "images/" + s.id + ".png"},
                       {"mask", "masks/" + s.id + ".png"},
                       {"positive_pixels", positives}});
  }
  Json manifest{{"format", "bayesseg-dataset"}, {"spec", to_json(spec)}, {"samples", entries}};
  write_text(root / "manifest.json", manifest.dump(2) + "\n");
  log << "wrote " << samples.size() << " samples to " << root.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
};

inline int cmd_train(const TrainArgs& args, std::ostream& log) {
  const RunConfig run = load_run_config(args.config);
  const DatasetSplits splits = load_splits(run);
  const fs::path out(run.output_dir);
  ensure_dir(out);

  Rng init(derive_seed(run.seed, "init"));
  SegModel model(run.architecture, init);
  log << "model: " << to_string(run.architecture.decoder_style) << " / " << to_string(run.architecture.stochastic_kind)
      << ", " << model.parameter_count() << " parameters, " << model.stochastic_layer_count()
      << " stochastic layers; train " << splits.train.size() << ", val " << splits.val.size() << ", test "
      << splits.test.size() << "\n";

  const TrainResult result = train(model, splits.train, splits.val, run.train, [&](const HistoryRow& r) {
    log << "epoch " << r.epoch << "  train " << r.train_loss << "  val " << r.val_loss << "  val_iou " << r.val_iou
        << "\n";
  });
  write_text(out / "history.csv", history_csv(result.history));
  save_checkpoint(out / "model.ckpt", model, run,
                  Json{{"best_epoch", result.best_epoch},
                       {"best_val_loss", result.best_val_loss},
                       {"epochs_run", result.history.size()},
                       {"kl_scale", result.kl_scale}});
  write_text(out / "config.json", to_json(run).dump(2) + "\n");
  log << "best epoch " << result.best_epoch << " (val loss " << result.best_val_loss << "); wrote "
      << (out / "model.ckpt").string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string split = "test";
  std::size_t mc = 50;
  std::string out;
  bool dump_predictions = false;
};

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("--split", "expected train, val or test, got '" + s + "'");
}

inline Json metrics_json(const EvalMetrics& m, const std::string& split, const McConfig& mc) {
  return Json{{"split", split},
              {"images", m.images},
              {"pixels", m.counts.total()},
              {"mc_samples", mc.num_samples},
              {"threshold", mc.threshold},
              {"num_bins", mc.num_bins},
              {"confidence", to_string(mc.confidence)},
              {"iou", m.iou},
              {"recall", m.recall},
              {"ece", m.ece},
              {"tp", m.counts.tp},
              {"fp", m.counts.fp},
              {"fn", m.counts.fn},
              {"tn", m.counts.tn}};
}

inline std::string per_image_csv(const EvalMetrics& m) {
  std::ostringstream os;
  os << "id,iou,recall,ece,tp,fp,fn,tn\n";
  char buf[256];
  for (const auto& r : m.per_image) {
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g,%zu,%zu,%zu,%zu\n", r.iou, r.recall, r.ece, r.counts.tp,
                  r.counts.fp, r.counts.fn, r.counts.tn);
    os << r.id << buf;
  }
  return os.str();
}

inline int cmd_eval(const EvalArgs& args, std::ostream& log) {
  const Split split = parse_split(args.split);
  LoadedCheckpoint ckpt = load_checkpoint(args.checkpoint);
  McConfig mc = ckpt.run.mc;
  mc.num_samples = args.mc;
  mc.validate();
  const DatasetSplits splits = load_splits(ckpt.run);
  const auto& samples = splits.get(split);
  const EvalReport report = evaluate(ckpt.model, samples, mc);

  const fs::path out = args.out.empty() ? fs::path(args.checkpoint).parent_path() / ("eval_" + args.split) : fs::path(args.out);
  ensure_dir(out);
  write_text(out / "metrics.json", metrics_json(report.metrics, args.split, mc).dump(2) + "\n");
  const auto rows = reliability_table(report.metrics.bins);
  write_text(out / "reliability.csv", reliability_csv(rows));
  write_text(out / "reliability.svg", reliability_svg(rows, report.metrics.ece, "Reliability (" + args.split + ")"));
  write_text(out / "per_image.csv", per_image_csv(report.metrics));
  if (args.dump_predictions) save_predictions(out / "predictions.bin", report.predictions, mc);
  log << args.split << ": IoU " << report.metrics.iou << "  recall " << report.metrics.recall << "  ECE "
      << report.metrics.ece << "  FP " << report.metrics.counts.fp << "  FN " << report.metrics.counts.fn << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct PredictArgs {
  std::string checkpoint;
  std::string image;
  std::size_t mc = 50;
  std::string emit = "mean,mask,uncertainty";
  std::string out;
};

inline const std::vector<std::string>& emit_channels() {
  static const std::vector<std::string> names{"mean", "mask", "uncertainty", "saliency", "saliency_std"};
  return names;
}

inline std::vector<std::string> parse_emit(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if (std::find(emit_channels().begin(), emit_channels().end(), item) == emit_channels().end())
      throw ConfigError("--emit", "unknown channel '" + item + "' (expected mean, mask, uncertainty, saliency, saliency_std)");
    if (std::find(out.begin(), out.end(), item) == out.end()) out.push_back(item);
  }
  if (out.empty()) throw ConfigError("--emit", "no channel requested");
  return out;
}

/// Linear map [lo, hi] -> [0, 1]; a degenerate range maps to zeros.
inline Tensor rescale(const Tensor& t, double lo, double hi) {
  std::vector<double> v(t.size(), 0.0);
  if (hi > lo)
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = (t[i] - lo) / (hi - lo);
  return Tensor(t.shape(), std::move(v));
}

inline int cmd_predict(const PredictArgs& args, std::ostream& log) {
  const auto channels = parse_emit(args.emit);
  LoadedCheckpoint ckpt = load_checkpoint(args.checkpoint);
  McConfig mc = ckpt.run.mc;
  mc.num_samples = args.mc;
  mc.validate();
  const auto& arch = ckpt.run.architecture;
  const fs::path image_path(args.image);
  const Tensor image = image_to_tensor(read_image(image_path), arch.input_channels, arch.input_size);
  const std::string stem = image_path.stem().string();
  const fs::path out = args.out.empty() ? fs::path(".") : fs::path(args.out);
  ensure_dir(out);

  const std::uint64_t base = derive_seed(mc.seed, "mc");
  Rng rng(derive_seed(base, stem));
  const McPrediction pred = mc_predict(ckpt.model, image, mc, rng);

  Json sidecar{{"image", image_path.filename().string()},
               {"mc_samples", mc.num_samples},
               {"threshold", mc.threshold},
               {"channels", Json::object()}};
  for (const auto& name : channels) {
    Tensor map;
    bool fixed_range = false;
    if (name == "mean") {
      map = pred.mean_probs, fixed_range = true;
    } else if (name == "mask") {
      map = pred.pred_mask, fixed_range = true;
    } else if (name == "uncertainty") {
      map = pred.uncertainty;
    } else if (name == "saliency") {
      map = saliency_map(ckpt.model, image, mc.threshold);
    } else {
      Rng srng(derive_seed(derive_seed(mc.seed, "saliency"), stem));
      map = saliency_uncertainty(ckpt.model, image, mc, srng);
    }
    double lo = 0.0, hi = 1.0;
    if (!fixed_range) {
      lo = *std::min_element(map.data().begin(), map.data().end());
      hi = *std::max_element(map.data().begin(), map.data().end());
    }
    const std::string file = stem + "_" + name + ".png";
    write_image(out / file, tensor_to_image(fixed_range ? map : rescale(map, lo, hi)));
    sidecar["channels"][name] = Json{{"file", file}, {"min", lo}, {"max", hi}};
  }
  write_text(out / (stem + "_predict.json"), sidecar.dump(2) + "\n");
  log << "wrote " << channels.size() << " map(s) for " << stem << " to " << out.string() << "\n";
  return kExitOk;
}

}  // namespace cli

/// Parses argv and runs one subcommand; every failure is reported on `err`
/// and converted into an exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& log = std::cerr, std::ostream& err = std::cerr) {
  CLI::App app{"Bayesian segmentation networks with Monte-Carlo uncertainty"};
  app.require_subcommand(1);

  cli::SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth_cmd->add_option("--spec", synth.spec, "Synthetic dataset spec (JSON)")->required();
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();

  cli::TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a run config");
  train_cmd->add_option("--config", train_args.config, "Run config (JSON)")->required();

  cli::EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "Model checkpoint")->required();
  eval_cmd->add_option("--split", eval_args.split, "train, val or test")->capture_default_str();
  eval_cmd->add_option("--mc", eval_args.mc, "Monte-Carlo samples")->capture_default_str();
  eval_cmd->add_option("--out", eval_args.out, "Output directory (default: eval_<split> next to the checkpoint)");
  eval_cmd->add_flag("--dump-predictions", eval_args.dump_predictions, "Also write per-image MC means");

  cli::PredictArgs predict_args;
  auto* predict_cmd = app.add_subcommand("predict", "Write prediction and uncertainty maps for one image");
  predict_cmd->add_option("--checkpoint", predict_args.checkpoint, "Model checkpoint")->required();
  predict_cmd->add_option("--image", predict_args.image, "Input image (PNG/PGM/PPM)")->required();
  predict_cmd->add_option("--mc", predict_args.mc, "Monte-Carlo samples")->capture_default_str();
  predict_cmd->add_option("--emit", predict_args.emit, "Comma-separated: mean,mask,uncertainty,saliency,saliency_std")
      ->capture_default_str();
  predict_cmd->add_option("--out", predict_args.out, "Output directory (default: .)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success&) {
    log << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }

  try {
    if (*synth_cmd) return cli::cmd_synth(synth, log);
    if (*train_cmd) return cli::cmd_train(train_args, log);
    if (*eval_cmd) return cli::cmd_eval(eval_args, log);
    if (*predict_cmd) return cli::cmd_predict(predict_args, log);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace bayesseg
