#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "json.hpp"
#include "polypseg/error.hpp"
#include "polypseg/tensor.hpp"

namespace polypseg {

inline constexpr int kBackground = 0;
inline constexpr int kPolyp = 1;

/// Pixel counts pooled over any number of images. Counts from disjoint image
/// sets merge by addition.
struct ConfusionCounts {
  std::array<std::uint64_t, 2> intersection{};
  std::array<std::uint64_t, 2> union_{};
  std::uint64_t correct = 0;
  std::uint64_t total = 0;

  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    for (int c = 0; c < 2; ++c) {
      intersection[c] += o.intersection[c];
      union_[c] += o.union_[c];
    }
    correct += o.correct;
    total += o.total;
    return *this;
  }

  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

struct MetricsReport {
  double iou_background = 0.0;
  double iou_polyp = 0.0;
  double iou_mean = 0.0;
  double global_accuracy = 0.0;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// Per-pixel argmax over the class axis of [N, 2, H, W] scores; ties go to
/// background.
template <class T>
LabelTensor argmax_labels(const Tensor<T>& scores) {
  require_rank(scores, 4, "argmax_labels");
  if (scores.dim(1) != 2) throw ShapeError("argmax_labels: expected 2 classes");
  const std::size_t n = scores.dim(0), hw = scores.dim(2) * scores.dim(3);
  LabelTensor out({n, scores.dim(2), scores.dim(3)});
  for (std::size_t i = 0; i < n; ++i) {
    const T* s0 = scores.data() + (i * 2) * hw;
    const T* s1 = s0 + hw;
    for (std::size_t p = 0; p < hw; ++p) out[i * hw + p] = s1[p] > s0[p] ? 1 : 0;
  }
  return out;
}

/// Adds one prediction/truth pair (any equal shapes, values in {0, 1}).
inline void accumulate(ConfusionCounts& counts, const LabelTensor& pred, const LabelTensor& truth) {
  if (pred.shape() != truth.shape()) {
    throw InvalidArgument("accumulate: prediction shape " + shape_str(pred.shape()) +
                          " differs from truth shape " + shape_str(truth.shape()));
  }
  ConfusionCounts add;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto p = pred[i], t = truth[i];
    if ((p != 0 && p != 1) || (t != 0 && t != 1)) {
      throw InvalidArgument("accumulate: labels must be 0 or 1");
    }
    if (p == t) {
      ++add.intersection[p];
      ++add.union_[p];
      ++add.correct;
    } else {
      ++add.union_[0];
      ++add.union_[1];
    }
  }
  add.total = pred.size();
  counts += add;
}

// An empty union means the class is absent and never predicted; it scores 1.
inline double iou_or_one(std::uint64_t inter, std::uint64_t uni) {
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline double mean_iou(double iou_background, double iou_polyp) {
  return (iou_background + iou_polyp) / 2.0;
}

inline MetricsReport finalize(const ConfusionCounts& c) {
  if (c.total == 0) throw InvalidArgument("finalize: no pixels were accumulated");
  MetricsReport r;
  r.iou_background = iou_or_one(c.intersection[kBackground], c.union_[kBackground]);
  r.iou_polyp = iou_or_one(c.intersection[kPolyp], c.union_[kPolyp]);
  r.iou_mean = mean_iou(r.iou_background, r.iou_polyp);
  r.global_accuracy = static_cast<double>(c.correct) / static_cast<double>(c.total);
  return r;
}

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["iou_background"] = r.iou_background;
  j["iou_polyp"] = r.iou_polyp;
  j["iou_mean"] = r.iou_mean;
  j["global_accuracy"] = r.global_accuracy;
  return j;
}

inline MetricsReport report_from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.iou_background = j.at("iou_background").get<double>();
  r.iou_polyp = j.at("iou_polyp").get<double>();
  r.iou_mean = j.at("iou_mean").get<double>();
  r.global_accuracy = j.at("global_accuracy").get<double>();
  return r;
}

}  // namespace polypseg
