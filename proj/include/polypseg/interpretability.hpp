#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>

#include "polypseg/architectures.hpp"
#include "polypseg/autodiff.hpp"
#include "polypseg/image_io.hpp"

namespace polypseg {

enum class TargetMode { predicted_polyp, full_polyp_channel, pixel };

inline TargetMode parse_target_mode(const std::string& s) {
  if (s == "predicted-polyp") return TargetMode::predicted_polyp;
  if (s == "full-polyp-channel") return TargetMode::full_polyp_channel;
  if (s == "pixel") return TargetMode::pixel;
  throw InvalidArgument("unknown saliency target '" + s +
                        "' (expected predicted-polyp, full-polyp-channel or pixel)");
}

/// The output scalar whose input gradient is taken.
struct SaliencyTarget {
  TargetMode mode = TargetMode::predicted_polyp;
  std::size_t y = 0;  // pixel mode only
  std::size_t x = 0;
};

template <class T = float>
struct SaliencyMap {
  Tensor<T> grad;  // [3, H, W]
};

struct SaliencyOptions {
  BackwardMode mode = BackwardMode::guided;
  // Replaces every ReLU with the identity (test surgery).
  bool linear = false;
};

/// Input gradient of the target objective with dropout off and batchnorm on
/// running statistics. In guided mode every ReLU passes back only positive
/// gradient at positive inputs. `hook` sees each ReLU's input gradient as it
/// is produced.
template <class T>
SaliencyMap<T> guided_backprop(const ModelParams<T>& params, const ModelSpec& spec,
                               const Tensor<T>& x, const SaliencyTarget& target,
                               const SaliencyOptions& opts = {},
                               const ReluHook<T>* hook = nullptr) {
  require_rank(x, 3, "guided_backprop input");
  const std::size_t h = x.dim(1), w = x.dim(2), hw = h * w;
  Tape<T> tape;
  auto vars = bind_params(tape, params, false);
  auto buffers = params.buffers;
  auto xv = tape.leaf(x.reshaped({1, 3, h, w}), true, "x");
  Rng unused(0);
  ForwardOptions fo{Mode::eval, opts.linear};
  auto logits = forward_graph(tape, vars, buffers, spec, xv, fo, unused);
  const auto& lv = logits.value();

  Tensor<T> weights({1, 2, h, w}, T{0});
  switch (target.mode) {
    case TargetMode::predicted_polyp: {
      std::size_t count = 0;
      for (std::size_t p = 0; p < hw; ++p) {
        if (lv[hw + p] > lv[p]) {
          weights[hw + p] = T{1};
          ++count;
        }
      }
      if (count == 0) {
        throw EmptyTargetError(
            "no pixel is predicted as polyp, so the default saliency target is empty; "
            "use the full-polyp-channel target instead");
      }
      break;
    }
    case TargetMode::full_polyp_channel:
      for (std::size_t p = 0; p < hw; ++p) weights[hw + p] = T{1};
      break;
    case TargetMode::pixel:
      if (target.y >= h || target.x >= w) {
        throw InvalidArgument("saliency pixel (" + std::to_string(target.y) + ", " +
                              std::to_string(target.x) + ") lies outside the image");
      }
      weights[hw + target.y * w + target.x] = T{1};
      break;
  }
  auto objective = weighted_sum(logits, weights);
  tape.backward(objective.id, BackwardOptions{opts.mode}, hook);
  return SaliencyMap<T>{tape.grad(xv.id).reshaped({3, h, w})};
}

/// Channel max of the gradient divided by its largest value; non-positive
/// values render black, as does a map whose maximum is not positive.
template <class T>
Image8 saliency_image(const SaliencyMap<T>& m) {
  require_rank(m.grad, 3, "saliency_image");
  const std::size_t h = m.grad.dim(1), w = m.grad.dim(2), hw = h * w;
  std::vector<double> cmax(hw);
  double top = 0.0;
  for (std::size_t p = 0; p < hw; ++p) {
    double v = m.grad[p];
    for (std::size_t c = 1; c < m.grad.dim(0); ++c) v = std::max(v, static_cast<double>(m.grad[c * hw + p]));
    cmax[p] = v;
    top = std::max(top, v);
  }
  Image8 img{w, h, 1, std::vector<std::uint8_t>(hw, 0)};
  if (top <= 0.0) return img;
  for (std::size_t p = 0; p < hw; ++p) {
    const double s = std::clamp(cmax[p] / top, 0.0, 1.0);
    img.pixels[p] = static_cast<std::uint8_t>(std::floor(255.0 * s + 0.5));
  }
  return img;
}

template <class T>
void render_saliency(const SaliencyMap<T>& m, const std::filesystem::path& path) {
  write_png(path, saliency_image(m));
}

}  // namespace polypseg
