#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "polypseg/architectures.hpp"
#include "polypseg/checkpoint.hpp"
#include "polypseg/data.hpp"
#include "polypseg/metrics.hpp"

namespace polypseg {

// ---------------------------------------------------------------- optimizer

template <class T>
struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;
  std::uint64_t step_count = 0;
};

/// One bias-corrected Adam update. `grads` must name exactly the entries of
/// `params`; moments are created as zeros on first use.
template <class T>
void adam_step(std::map<std::string, Tensor<T>>& params,
               const std::map<std::string, Tensor<T>>& grads, AdamState<T>& st) {
  for (const auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw InvalidArgument("adam_step: no gradient for '" + name + "'");
    if (it->second.shape() != p.shape()) {
      throw ShapeError("adam_step: gradient for '" + name + "' has shape " +
                       shape_str(it->second.shape()) + ", parameter " + shape_str(p.shape()));
    }
  }
  for (const auto& [name, g] : grads) {
    if (!params.count(name)) throw InvalidArgument("adam_step: gradient for unknown parameter '" + name + "'");
  }
  ++st.step_count;
  const double t = static_cast<double>(st.step_count);
  const double c1 = 1.0 - std::pow(st.beta1, t), c2 = 1.0 - std::pow(st.beta2, t);
  for (auto& [name, p] : params) {
    const auto& g = grads.at(name);
    auto& m = st.m.try_emplace(name, Tensor<T>(p.shape())).first->second;
    auto& v = st.v.try_emplace(name, Tensor<T>(p.shape())).first->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = st.beta1 * m[i] + (1.0 - st.beta1) * gi;
      const double vi = st.beta2 * v[i] + (1.0 - st.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double mhat = mi / c1, vhat = vi / c2;
      p[i] = static_cast<T>(p[i] - st.lr * mhat / (std::sqrt(vhat) + st.eps));
    }
  }
}

// ----------------------------------------------------------- early stopping

struct EarlyStopState {
  double best_metric = -std::numeric_limits<double>::infinity();
  std::size_t best_step = 0;
  std::size_t patience = 30;
  std::size_t evals_since_best = 0;

  enum class Verdict { improved, wait, stop };

  /// Records one evaluation; `stop` once patience + 1 evaluations in a row
  /// failed to beat the best.
  Verdict update(double metric, std::size_t step) {
    if (metric > best_metric) {
      best_metric = metric;
      best_step = step;
      evals_since_best = 0;
      return Verdict::improved;
    }
    ++evals_since_best;
    return evals_since_best > patience ? Verdict::stop : Verdict::wait;
  }
};

// ---------------------------------------------------------------- evaluation

/// Eval-mode logits for a stack of images, computed in chunks.
inline Tensor<float> predict_logits(const ModelParams<float>& params, const ModelSpec& spec,
                                    const Tensor<float>& images, std::size_t chunk = 10) {
  const std::size_t n = images.dim(0), per = images.size() / n;
  Tensor<float> out({n, 2, images.dim(2), images.dim(3)});
  const std::size_t out_per = out.size() / n;
  Rng unused(0);
  for (std::size_t i = 0; i < n; i += chunk) {
    const std::size_t k = std::min(chunk, n - i);
    Shape s = images.shape();
    s[0] = k;
    Tensor<float> x(s, std::vector<float>(images.data() + i * per, images.data() + (i + k) * per));
    const auto y = forward(params, spec, x, Mode::eval, unused);
    std::copy(y.vec().begin(), y.vec().end(), out.data() + i * out_per);
  }
  return out;
}

inline ConfusionCounts confusion(const ModelParams<float>& params, const ModelSpec& spec,
                                 const std::vector<Sample>& samples, std::size_t batch_size = 10) {
  if (samples.empty()) throw InvalidArgument("evaluate: empty sample set");
  ConfusionCounts counts;
  Rng unused(0);
  for (const auto& b : make_batches(samples, batch_size, false, unused)) {
    accumulate(counts, argmax_labels(predict_logits(params, spec, b.images, batch_size)), b.masks);
  }
  return counts;
}

/// Pooled metrics over every pixel of the set, eval mode, ties to background.
inline MetricsReport evaluate(const ModelParams<float>& params, const ModelSpec& spec,
                              const std::vector<Sample>& samples, std::size_t batch_size = 10) {
  return finalize(confusion(params, spec, samples, batch_size));
}

// ------------------------------------------------------------------ training

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 10;
  std::size_t patience = 30;
  std::size_t max_epochs = 200;
  std::uint64_t seed = 0;
  AugmentConfig augment;
  // Directory receiving best.ckpt, last.ckpt and train_log.jsonl; empty keeps
  // everything in memory.
  std::filesystem::path out_dir;
  // Replaces the monitored value (validation polyp IoU) after each
  // evaluation; used to script early-stopping scenarios.
  std::function<double(std::size_t epoch, const MetricsReport&)> metric_hook;
  // Called after every completed epoch; returning false ends training there.
  std::function<bool(std::size_t epoch)> continue_hook;
  bool verbose = false;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::optional<double> loss;  // absent for the initial evaluation
  MetricsReport val;
  double metric = 0.0;
  double best_metric = 0.0;
  std::size_t best_epoch = 0;
  std::size_t evals_since_best = 0;
  bool improved = false;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["epoch"] = epoch;
    j["loss"] = loss ? nlohmann::ordered_json(*loss) : nlohmann::ordered_json(nullptr);
    j["val"] = polypseg::to_json(val);
    j["metric"] = metric;
    j["best_val_iou"] = best_metric;
    j["best_epoch"] = best_epoch;
    j["evals_since_best"] = evals_since_best;
    j["improved"] = improved;
    return j;
  }
};

struct TrainResult {
  Checkpoint best;
  Checkpoint last;
  std::vector<EpochRecord> log;
  bool stopped_early = false;
  std::size_t evaluations = 0;
};

namespace detail {

// Independent random streams per purpose, keyed by the run seed.
enum Stream : std::uint64_t { kInit = 1, kShuffle = 2, kAugment = 3, kDropout = 4 };

inline void check_disjoint(const std::vector<Sample>& train, const std::vector<Sample>& val) {
  std::set<std::string> patients;
  for (const auto& s : train) patients.insert(s.patient_id);
  for (const auto& s : val) {
    if (patients.count(s.patient_id)) {
      throw InvalidArgument("train: patient '" + s.patient_id + "' is in both train and val sets");
    }
  }
}

inline Checkpoint snapshot(const ModelSpec& spec, const ModelParams<float>& model,
                           const AdamState<float>& adam, std::uint64_t seed,
                           const TrainProgress& progress) {
  return Checkpoint{spec, model, adam.m, adam.v, seed, adam.step_count, progress};
}

/// One optimizer step on a batch; returns the batch loss.
inline double train_step(ModelParams<float>& model, const ModelSpec& spec, const Batch& batch,
                         AdamState<float>& adam, Rng& dropout_rng) {
  Tape<float> tape;
  auto vars = bind_params(tape, model, true);
  auto x = tape.leaf(batch.images, false, "x");
  auto logits = forward_graph(tape, vars, model.buffers, spec, x, ForwardOptions{Mode::train}, dropout_rng);
  auto ce = softmax_ce(logits, batch.masks);
  tape.backward(ce.loss.id);
  std::map<std::string, Tensor<float>> grads;
  for (const auto& [name, v] : vars) grads.emplace(name, tape.grad(v.id));
  adam_step(model.params, grads, adam);
  return ce.loss.value()[0];
}

}  // namespace detail

/// Adam on per-pixel cross-entropy with per-access augmentation. Evaluates
/// once before the first update (epoch 0) and after every epoch, keeps the
/// checkpoint with the best monitored value and stops after `patience + 1`
/// evaluations without improvement or at max_epochs. With `resume`, training
/// continues from that checkpoint (and `resume_best`, the best so far) along
/// the same trajectory as an uninterrupted run.
inline TrainResult train(const ModelSpec& spec, const std::vector<Sample>& train_set,
                         const std::vector<Sample>& val_set, const TrainConfig& cfg,
                         const Checkpoint* resume = nullptr, const Checkpoint* resume_best = nullptr) {
  namespace fs = std::filesystem;
  spec.validate();
  cfg.augment.validate();
  if (train_set.empty()) throw InvalidArgument("train: empty training set");
  if (val_set.empty()) throw InvalidArgument("train: empty validation set");
  if (cfg.batch_size == 0) throw InvalidArgument("train: batch_size must be at least 1");
  if (!(cfg.lr > 0.0)) throw InvalidArgument("train: lr must be positive");
  detail::check_disjoint(train_set, val_set);

  const Rng root(cfg.seed);
  TrainResult result;
  ModelParams<float> model;
  AdamState<float> adam;
  adam.lr = cfg.lr;
  TrainProgress progress;
  EarlyStopState stopper;
  stopper.patience = cfg.patience;

  std::ofstream log_file;
  auto log = [&](const EpochRecord& rec) {
    result.log.push_back(rec);
    if (log_file.is_open()) log_file << rec.to_json().dump() << '\n' << std::flush;
  };
  auto save = [&](const Checkpoint& c, const char* file) {
    if (!cfg.out_dir.empty()) save_checkpoint(c, cfg.out_dir / file);
  };
  if (!cfg.out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    if (ec) throw FileError("cannot create output directory '" + cfg.out_dir.string() + "'");
    log_file.open(cfg.out_dir / "train_log.jsonl", resume ? std::ios::app : std::ios::trunc);
    if (!log_file) throw FileError("cannot open training log in '" + cfg.out_dir.string() + "'");
  }

  auto evaluate_and_record = [&](std::size_t epoch, std::optional<double> loss) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss;
    rec.val = evaluate(model, spec, val_set, cfg.batch_size);
    rec.metric = cfg.metric_hook ? cfg.metric_hook(epoch, rec.val) : rec.val.iou_polyp;
    const auto verdict = stopper.update(rec.metric, epoch);
    rec.improved = verdict == EarlyStopState::Verdict::improved;
    progress.epoch = static_cast<std::uint32_t>(epoch);
    progress.best_metric = stopper.best_metric;
    progress.best_epoch = static_cast<std::uint32_t>(stopper.best_step);
    progress.evals_since_best = static_cast<std::uint32_t>(stopper.evals_since_best);
    rec.best_metric = stopper.best_metric;
    rec.best_epoch = stopper.best_step;
    rec.evals_since_best = stopper.evals_since_best;
    ++result.evaluations;
    const auto snap = detail::snapshot(spec, model, adam, cfg.seed, progress);
    if (rec.improved) {
      result.best = snap;
      save(snap, "best.ckpt");
    }
    result.last = snap;
    save(snap, "last.ckpt");
    log(rec);
    return verdict == EarlyStopState::Verdict::stop;
  };

  std::size_t start_epoch = 0;
  if (resume) {
    if (resume->spec != spec) throw InvalidArgument("train: resume checkpoint has a different model spec");
    model = resume->model;
    adam.m = resume->adam_m;
    adam.v = resume->adam_v;
    adam.step_count = resume->step_count;
    progress = resume->progress;
    stopper.best_metric = progress.best_metric;
    stopper.best_step = progress.best_epoch;
    stopper.evals_since_best = progress.evals_since_best;
    start_epoch = progress.epoch;
    result.last = *resume;
    result.best = resume_best ? *resume_best : *resume;
    if (progress.evals_since_best > cfg.patience) {
      result.stopped_early = true;
      return result;
    }
  } else {
    Rng init = root.split(detail::kInit);
    model = build_model<float>(spec, init);
    if (evaluate_and_record(0, std::nullopt)) {
      result.stopped_early = true;
      return result;
    }
  }

  for (std::size_t epoch = start_epoch + 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng shuffle = root.split(detail::kShuffle, epoch);
    const auto order = batch_order(train_set.size(), cfg.batch_size, true, shuffle);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t j = 0; j < order.size(); ++j) {
      std::vector<Sample> augmented;
      augmented.reserve(order[j].size());
      for (auto i : order[j]) {
        Rng aug = root.split(detail::kAugment, epoch).split(i);
        augmented.push_back(augment(train_set[i], cfg.augment, aug));
      }
      std::vector<const Sample*> ptrs;
      for (const auto& s : augmented) ptrs.push_back(&s);
      Rng drop = root.split(detail::kDropout, epoch).split(j);
      const double l = detail::train_step(model, spec, stack(ptrs), adam, drop);
      loss_sum += l * static_cast<double>(ptrs.size());
      seen += ptrs.size();
    }
    const bool stop = evaluate_and_record(epoch, loss_sum / static_cast<double>(seen));
    if (cfg.verbose) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      const auto& r = result.log.back();
      std::fprintf(stderr, "epoch %zu loss %.4f val iou_polyp %.4f iou_mean %.4f (%.1fs)\n", epoch,
                   *r.loss, r.val.iou_polyp, r.val.iou_mean, secs);
    }
    if (stop) {
      result.stopped_early = true;
      break;
    }
    if (cfg.continue_hook && !cfg.continue_hook(epoch)) break;
  }
  return result;
}

}  // namespace polypseg
