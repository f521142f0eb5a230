#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "polypseg/architectures.hpp"
#include "polypseg/data.hpp"
#include "polypseg/image_io.hpp"
#include "polypseg/layers.hpp"

namespace polypseg {

struct UncertaintyConfig {
  std::size_t T = 10;
};

struct PredictiveResult {
  Tensor<float> mean_probs;  // [2, H, W]
  Tensor<float> std_map;     // [H, W], population std of the polyp probability
  LabelTensor label_map;     // [H, W]
  std::size_t samples_used = 0;
  std::vector<std::string> warnings;
};

/// Monte Carlo dropout: T forward passes in mc-sample mode (batchnorm on
/// running statistics, a fresh dropout mask per pass drawn from rng.split(t)),
/// averaged softmax and per-pixel spread of the polyp probability. `x` is one
/// image [3, H, W]. When `samples` is given it receives every per-pass softmax.
inline PredictiveResult mc_predict(const ModelParams<float>& params, const ModelSpec& spec,
                                   const Tensor<float>& x, const UncertaintyConfig& cfg,
                                   const Rng& rng, std::vector<Tensor<float>>* samples = nullptr) {
  if (cfg.T < 1) throw InvalidArgument("mc_predict: T must be at least 1");
  require_rank(x, 3, "mc_predict input");
  const std::size_t h = x.dim(1), w = x.dim(2), hw = h * w;
  const Tensor<float> batch = x.reshaped({1, 3, h, w});

  PredictiveResult r;
  if (spec.dropout_rate == 0.0 && cfg.T > 1) {
    r.warnings.push_back("model has no active dropout (rate 0); all " + std::to_string(cfg.T) +
                         " Monte Carlo samples are identical");
  }
  std::vector<double> sum(2 * hw, 0.0);
  std::vector<float> polyp(cfg.T * hw);
  for (std::size_t t = 0; t < cfg.T; ++t) {
    Rng pass = rng.split(t);
    const auto probs = softmax_channels(forward(params, spec, batch, Mode::mc_sample, pass));
    for (std::size_t i = 0; i < 2 * hw; ++i) sum[i] += probs[i];
    std::copy(probs.data() + hw, probs.data() + 2 * hw, polyp.begin() + t * hw);
    if (samples) samples->push_back(probs.reshaped({2, h, w}));
  }
  const double inv_t = 1.0 / static_cast<double>(cfg.T);
  r.mean_probs = Tensor<float>({2, h, w});
  for (std::size_t i = 0; i < 2 * hw; ++i) r.mean_probs[i] = static_cast<float>(sum[i] * inv_t);
  r.std_map = Tensor<float>({h, w});
  for (std::size_t p = 0; p < hw; ++p) {
    const double mean = sum[hw + p] * inv_t;
    double ss = 0.0;
    for (std::size_t t = 0; t < cfg.T; ++t) {
      const double d = polyp[t * hw + p] - mean;
      ss += d * d;
    }
    r.std_map[p] = static_cast<float>(std::min(std::sqrt(ss * inv_t), 0.5));
  }
  r.label_map = LabelTensor({h, w});
  for (std::size_t p = 0; p < hw; ++p) r.label_map[p] = r.mean_probs[hw + p] > r.mean_probs[p] ? 1 : 0;
  r.samples_used = cfg.T;
  return r;
}

/// Gray level round(255 * min(std / 0.5, 1)), rounding halves up.
inline Image8 uncertainty_image(const Tensor<float>& std_map) {
  require_rank(std_map, 2, "uncertainty_image");
  Image8 img{std_map.dim(1), std_map.dim(0), 1, std::vector<std::uint8_t>(std_map.size())};
  for (std::size_t i = 0; i < std_map.size(); ++i) {
    const double s = std::clamp(static_cast<double>(std_map[i]) / 0.5, 0.0, 1.0);
    img.pixels[i] = static_cast<std::uint8_t>(std::floor(255.0 * s + 0.5));
  }
  return img;
}

inline void render_uncertainty(const PredictiveResult& r, const std::filesystem::path& path) {
  write_png(path, uncertainty_image(r.std_map));
}

}  // namespace polypseg
