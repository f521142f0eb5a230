#pragma once

#include <CLI11.hpp>
#include <Eigen/Core>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "polypseg/checkpoint.hpp"
#include "polypseg/config.hpp"
#include "polypseg/interpretability.hpp"
#include "polypseg/training.hpp"
#include "polypseg/uncertainty.hpp"

namespace polypseg {

/// Caps worker threads for Eigen kernels; 1 makes every command bit-reproducible.
inline void set_threads(std::size_t n) {
  Eigen::setNbThreads(static_cast<int>(n));
#ifdef _OPENMP
  omp_set_num_threads(static_cast<int>(n));
#endif
}

namespace cli_detail {

inline const std::filesystem::path& require_data_root(const RunConfig& c) {
  if (!c.data_root) throw ConfigError("config key 'data.root' is required by this command but not set");
  return *c.data_root;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw FileError("cannot write " + path.string());
}

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    throw FileError("cannot create directory " + dir.string());
  }
}

inline Tensor<float> load_image(const std::filesystem::path& path) {
  return image_from_png8(read_png_rgb(path));
}

inline std::filesystem::path output_path(const RunConfig& c, const std::filesystem::path& image,
                                         const std::string& suffix) {
  return c.output_dir / (image.stem().string() + suffix);
}

}  // namespace cli_detail

/// Writes a synthetic dataset (images/, masks/, split.txt) under data.root.
inline Dataset cmd_synth(const RunConfig& c, std::ostream& out) {
  const auto& root = cli_detail::require_data_root(c);
  Rng rng(c.seed);
  auto samples = generate_synthetic(c.synthetic_n, c.synthetic_size, c.synthetic_size, rng);
  Dataset ds{std::move(samples), {}};
  ds.manifest = split_by_patient(ds.samples);
  write_dataset(root, ds);
  out << "wrote " << ds.samples.size() << " samples to " << root.string() << " (train "
      << ds.manifest.train.size() << ", val " << ds.manifest.val.size() << ", test "
      << ds.manifest.test.size() << ")\n";
  return ds;
}

/// Trains on the train split, monitoring the val split. With `resume`, the
/// run continues from that checkpoint; a best.ckpt beside it restores the
/// best-so-far state.
inline TrainResult cmd_train(const RunConfig& c, const std::optional<std::filesystem::path>& resume,
                             std::ostream& out) {
  const auto ds = load_dataset(cli_detail::require_data_root(c));
  const auto train_set = ds.split(Split::train);
  const auto val_set = ds.split(Split::val);
  if (train_set.empty()) throw DatasetError("dataset has no train samples");
  if (val_set.empty()) throw DatasetError("dataset has no val samples; early stopping needs them");
  const auto& first = train_set.front().image;
  const ModelSpec spec = model_spec(c, first.dim(1), first.dim(2));

  TrainConfig tc;
  tc.lr = c.lr;
  tc.batch_size = c.batch_size;
  tc.patience = c.patience;
  tc.max_epochs = c.max_epochs;
  tc.seed = c.seed;
  tc.augment = c.augment;
  tc.out_dir = c.output_dir;
  tc.verbose = true;
  cli_detail::ensure_dir(c.output_dir);
  cli_detail::write_text(c.output_dir / "config.resolved", to_config_text(c));

  std::optional<Checkpoint> last, best;
  if (resume) {
    last = load_checkpoint(*resume);
    if (!(last->spec == spec)) {
      throw ConfigError("model.* settings and the dataset image size do not match the checkpoint " +
                        resume->string());
    }
    if (last->seed != c.seed) {
      throw ConfigError("config key 'train.seed' (" + std::to_string(c.seed) +
                        ") differs from the resumed run's seed " + std::to_string(last->seed));
    }
    const auto best_path = resume->parent_path() / "best.ckpt";
    if (std::filesystem::exists(best_path)) best = load_checkpoint(best_path);
  }
  auto r = train(spec, train_set, val_set, tc, last ? &*last : nullptr, best ? &*best : nullptr);
  nlohmann::ordered_json j;
  j["best_epoch"] = r.best.progress.best_epoch;
  j["best_val_iou"] = r.best.progress.best_metric;
  j["epochs_run"] = r.last.progress.epoch;
  j["stopped_early"] = r.stopped_early;
  j["checkpoint"] = (c.output_dir / "best.ckpt").string();
  out << j.dump() << "\n";
  return r;
}

/// Metrics of a checkpoint on one manifest split, as JSON on `out` and in
/// output.dir/metrics_<split>.json.
inline MetricsReport cmd_eval(const RunConfig& c, const std::filesystem::path& checkpoint,
                              const std::string& split_name, std::ostream& out) {
  const Split split = parse_split(split_name);
  const auto ckpt = load_checkpoint(checkpoint);
  const auto ds = load_dataset(cli_detail::require_data_root(c));
  const auto samples = ds.split(split);
  if (samples.empty()) {
    throw ManifestError("split '" + split_name + "' has no samples in the dataset manifest");
  }
  const auto report = evaluate(ckpt.model, ckpt.spec, samples);
  const auto text = to_json(report).dump(2);
  cli_detail::ensure_dir(c.output_dir);
  cli_detail::write_text(c.output_dir / ("metrics_" + split_name + ".json"), text + "\n");
  out << text << "\n";
  return report;
}

/// Binary prediction masks (0/255) as <stem>.pred.png.
inline void cmd_predict(const RunConfig& c, const std::filesystem::path& checkpoint,
                        const std::vector<std::filesystem::path>& images, std::ostream& out) {
  const auto ckpt = load_checkpoint(checkpoint);
  cli_detail::ensure_dir(c.output_dir);
  for (const auto& path : images) {
    const auto x = cli_detail::load_image(path);
    const auto logits = predict_logits(ckpt.model, ckpt.spec, x.reshaped({1, 3, x.dim(1), x.dim(2)}));
    const auto labels = argmax_labels(logits);
    const auto dst = cli_detail::output_path(c, path, ".pred.png");
    write_png(dst, mask_to_png8(labels.reshaped({x.dim(1), x.dim(2)})));
    out << dst.string() << "\n";
  }
}

/// Monte Carlo dropout std maps as <stem>.unc.png (and .unc.segt raw dumps
/// when uncertainty.dump is set). Each image uses the stream seeded by
/// train.seed, so results do not depend on the order of the image list.
inline void cmd_uncertainty(const RunConfig& c, const std::filesystem::path& checkpoint,
                            const std::vector<std::filesystem::path>& images, std::ostream& out,
                            std::ostream& err) {
  const auto ckpt = load_checkpoint(checkpoint);
  cli_detail::ensure_dir(c.output_dir);
  for (const auto& path : images) {
    const auto x = cli_detail::load_image(path);
    const auto r = mc_predict(ckpt.model, ckpt.spec, x, {c.uncertainty_T}, Rng(c.seed));
    for (const auto& w : r.warnings) err << "warning: " << path.string() << ": " << w << "\n";
    const auto dst = cli_detail::output_path(c, path, ".unc.png");
    render_uncertainty(r, dst);
    if (c.uncertainty_dump) {
      save_tensor_dump({{"std_map", r.std_map}, {"mean_probs", r.mean_probs}},
                       cli_detail::output_path(c, path, ".unc.segt"));
    }
    out << dst.string() << "\n";
  }
}

/// Guided backpropagation saliency as <stem>.sal.png (and .sal.segt).
inline void cmd_saliency(const RunConfig& c, const std::filesystem::path& checkpoint,
                         const std::vector<std::filesystem::path>& images, std::ostream& out) {
  const auto ckpt = load_checkpoint(checkpoint);
  cli_detail::ensure_dir(c.output_dir);
  const SaliencyTarget target{c.saliency_target, c.saliency_y, c.saliency_x};
  for (const auto& path : images) {
    const auto x = cli_detail::load_image(path);
    const auto m = guided_backprop(ckpt.model, ckpt.spec, x, target);
    const auto dst = cli_detail::output_path(c, path, ".sal.png");
    render_saliency(m, dst);
    if (c.saliency_dump) {
      save_tensor_dump({{"grad", m.grad}}, cli_detail::output_path(c, path, ".sal.segt"));
    }
    out << dst.string() << "\n";
  }
}

/// Parses `args` (without the program name) and runs one command. Returns
/// the process exit code; errors go to `err` as a single line.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Polyp segmentation with Monte Carlo dropout uncertainty and guided backpropagation",
               "polypseg"};
  app.require_subcommand(1);
  app.fallthrough();

  std::optional<std::string> config_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "key=value config file");
  app.add_option("--seed", seed, "run seed (overrides train.seed)");
  app.add_option("--threads", threads, "worker thread cap; 1 is bit-reproducible")
      ->check(CLI::PositiveNumber);
  app.add_option("--out", out_dir, "output directory (overrides output.dir)");
  app.add_option("--set", overrides, "key=value override, repeatable");

  std::optional<std::string> resume, checkpoint, target;
  std::string split = "test";
  std::vector<std::string> images;
  std::vector<std::size_t> pixel;

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset under data.root");
  auto* train_cmd = app.add_subcommand("train", "train a model on data.root");
  train_cmd->add_option("--resume", resume, "checkpoint to continue from (last.ckpt)");
  auto* eval = app.add_subcommand("eval", "report metrics of a checkpoint on a split");
  eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  eval->add_option("--split", split, "train, val or test")->capture_default_str();
  auto add_image_command = [&](const char* name, const char* help) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    sub->add_option("--image", images, "input PNG, repeatable")->required();
    return sub;
  };
  auto* predict = add_image_command("predict", "write <stem>.pred.png label masks");
  auto* uncertainty = add_image_command("uncertainty", "write <stem>.unc.png std maps");
  auto* saliency = add_image_command("saliency", "write <stem>.sal.png saliency maps");
  saliency->add_option("--target", target,
                       "predicted-polyp (default), full-polyp-channel or pixel");
  saliency->add_option("--pixel", pixel, "Y X for the pixel target")->expected(2);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    RunConfig c;
    if (config_path) apply_config_file(c, *config_path);
    for (const auto& o : overrides) {
      auto [k, v] = split_assignment(o, "--set");
      apply_setting(c, k, v);
    }
    if (seed) c.seed = *seed;
    if (threads) c.threads = *threads;
    if (out_dir) c.output_dir = *out_dir;
    if (target) apply_setting(c, "saliency.target", *target);
    if (!pixel.empty()) {
      c.saliency_target = TargetMode::pixel;
      c.saliency_y = pixel[0];
      c.saliency_x = pixel[1];
    }
    validate_config(c);
    set_threads(c.threads);

    std::vector<std::filesystem::path> image_paths(images.begin(), images.end());
    if (synth->parsed()) cmd_synth(c, out);
    if (train_cmd->parsed()) {
      std::optional<std::filesystem::path> r;
      if (resume) r = *resume;
      cmd_train(c, r, out);
    }
    if (eval->parsed()) cmd_eval(c, *checkpoint, split, out);
    if (predict->parsed()) cmd_predict(c, *checkpoint, image_paths, out);
    if (uncertainty->parsed()) cmd_uncertainty(c, *checkpoint, image_paths, out, err);
    if (saliency->parsed()) cmd_saliency(c, *checkpoint, image_paths, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace polypseg
