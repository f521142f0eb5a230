#pragma once

#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "polypseg/autodiff.hpp"
#include "polypseg/error.hpp"
#include "polypseg/layers.hpp"
#include "polypseg/rng.hpp"
#include "polypseg/tensor.hpp"

namespace polypseg {

enum class ModelKind { efcn8, esegnet };

inline std::string to_string(ModelKind k) {
  return k == ModelKind::efcn8 ? "efcn8" : "esegnet";
}

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "efcn8") return ModelKind::efcn8;
  if (s == "esegnet") return ModelKind::esegnet;
  throw InvalidArgument("unknown model kind '" + s + "' (expected efcn8 or esegnet)");
}

struct ModelSpec {
  ModelKind kind = ModelKind::efcn8;
  std::size_t in_channels = 3;
  std::size_t num_classes = 2;
  std::size_t base_width = 16;
  std::size_t input_h = 64;
  std::size_t input_w = 64;
  double dropout_rate = 0.5;

  void validate() const {
    if (in_channels != 3) throw InvalidArgument("model spec: in_channels must be 3");
    if (num_classes != 2) throw InvalidArgument("model spec: num_classes must be 2");
    if (base_width == 0) throw InvalidArgument("model spec: base_width must be positive");
    if (input_h == 0 || input_w == 0 || input_h % 32 || input_w % 32) {
      throw InvalidArgument("model spec: input size must be a positive multiple of 32");
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
      throw InvalidArgument("model spec: dropout_rate must be in [0, 1)");
    }
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

/// Trainable tensors and batchnorm running statistics, keyed by layer path
/// such as "enc3.conv2.weight" or "enc3.bn2.running_var".
template <class T>
struct ModelParams {
  std::map<std::string, Tensor<T>> params;
  std::map<std::string, Tensor<T>> buffers;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params) n += t.size();
    return n;
  }

  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    for (const auto& [k, t] : params) out.params.emplace(k, t.template cast<U>());
    for (const auto& [k, t] : buffers) out.buffers.emplace(k, t.template cast<U>());
    return out;
  }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

enum class Mode { train, eval, mc_sample };

struct ForwardOptions {
  Mode mode = Mode::eval;
  // Test surgery: every ReLU becomes the identity.
  bool linear = false;
};

namespace arch {

inline constexpr std::array<std::size_t, 5> kStageConvs{2, 2, 3, 3, 3};
inline constexpr std::array<std::size_t, 5> kStageWidthMultiplier{1, 2, 4, 8, 8};
// FCN classifier convs (fc6/fc7) are 64x the base width, as 4096 is to VGG's 64.
inline constexpr std::size_t kFcMultiplier = 64;

inline std::size_t stage_width(const ModelSpec& s, std::size_t stage) {
  return s.base_width * kStageWidthMultiplier[stage];
}

inline std::size_t fc_width(const ModelSpec& s) { return s.base_width * kFcMultiplier; }

template <class T>
class ParamBuilder {
 public:
  ParamBuilder(ModelParams<T>& out, Rng& rng) : out_(out), rng_(rng) {}

  void conv(const std::string& name, std::size_t cout, std::size_t cin, std::size_t k,
            bool bias) {
    out_.params[name + ".weight"] = he_normal_init<T>({cout, cin, k, k}, cin * k * k, rng_);
    if (bias) out_.params[name + ".bias"] = Tensor<T>::zeros({cout});
  }

  // Weights [cin, cout, k, k]; each output sums cin * (k / stride)^2 terms.
  void transposed(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                  std::size_t stride) {
    const std::size_t fan_in = cin * (k / stride) * (k / stride);
    out_.params[name + ".weight"] = he_normal_init<T>({cin, cout, k, k}, fan_in, rng_);
    out_.params[name + ".bias"] = Tensor<T>::zeros({cout});
  }

  void bn(const std::string& name, std::size_t c) {
    out_.params[name + ".gamma"] = Tensor<T>({c}, T{1});
    out_.params[name + ".beta"] = Tensor<T>::zeros({c});
    out_.buffers[name + ".running_mean"] = Tensor<T>::zeros({c});
    out_.buffers[name + ".running_var"] = Tensor<T>({c}, T{1});
  }

 private:
  ModelParams<T>& out_;
  Rng& rng_;
};

template <class T>
void build_encoder(const ModelSpec& spec, ParamBuilder<T>& b) {
  std::size_t cin = spec.in_channels;
  for (std::size_t s = 0; s < 5; ++s) {
    const std::size_t w = stage_width(spec, s);
    for (std::size_t i = 0; i < kStageConvs[s]; ++i) {
      const std::string prefix = "enc" + std::to_string(s + 1);
      b.conv(prefix + ".conv" + std::to_string(i + 1), w, cin, 3, false);
      b.bn(prefix + ".bn" + std::to_string(i + 1), w);
      cin = w;
    }
  }
}

// Output channels of decoder stage s (0-based), conv i.
inline std::size_t decoder_out(const ModelSpec& spec, std::size_t s, std::size_t i) {
  const bool last = i + 1 == kStageConvs[s];
  if (!last || s == 0) return stage_width(spec, s);
  return stage_width(spec, s - 1);
}

}  // namespace arch

/// FCN-8 style network: VGG-style encoder (conv + batchnorm + ReLU), fc6/fc7
/// classifier convs with dropout, 1x1 score layers on pool3, pool4 and fc7,
/// learned transposed-conv upsampling x2, x2, x8 with additive skip fusion.
template <class T = float>
ModelParams<T> build_efcn8(const ModelSpec& spec, Rng& rng) {
  spec.validate();
  if (spec.kind != ModelKind::efcn8) throw InvalidArgument("build_efcn8: spec.kind is not efcn8");
  ModelParams<T> out;
  arch::ParamBuilder<T> b(out, rng);
  arch::build_encoder(spec, b);
  const std::size_t fc = arch::fc_width(spec);
  const std::size_t k = spec.num_classes;
  b.conv("fc6.conv", fc, arch::stage_width(spec, 4), 3, false);
  b.bn("fc6.bn", fc);
  b.conv("fc7.conv", fc, fc, 1, false);
  b.bn("fc7.bn", fc);
  b.conv("score_fr", k, fc, 1, true);
  b.conv("score_pool4", k, arch::stage_width(spec, 3), 1, true);
  b.conv("score_pool3", k, arch::stage_width(spec, 2), 1, true);
  b.transposed("up2_fr", k, k, 4, 2);
  b.transposed("up2_pool4", k, k, 4, 2);
  b.transposed("up8", k, k, 16, 8);
  return out;
}

/// SegNet style network: the same encoder, a mirrored decoder that upsamples
/// with the encoder's max-pool indices, dropout around the three central
/// encoder/decoder stages, and a final 1x1 classifier.
template <class T = float>
ModelParams<T> build_esegnet(const ModelSpec& spec, Rng& rng) {
  spec.validate();
  if (spec.kind != ModelKind::esegnet) {
    throw InvalidArgument("build_esegnet: spec.kind is not esegnet");
  }
  ModelParams<T> out;
  arch::ParamBuilder<T> b(out, rng);
  arch::build_encoder(spec, b);
  for (std::size_t s = 5; s-- > 0;) {
    std::size_t cin = arch::stage_width(spec, s);
    for (std::size_t i = 0; i < arch::kStageConvs[s]; ++i) {
      const std::string prefix = "dec" + std::to_string(s + 1);
      const std::size_t cout = arch::decoder_out(spec, s, i);
      b.conv(prefix + ".conv" + std::to_string(i + 1), cout, cin, 3, false);
      b.bn(prefix + ".bn" + std::to_string(i + 1), cout);
      cin = cout;
    }
  }
  b.conv("classifier", spec.num_classes, arch::stage_width(spec, 0), 1, true);
  return out;
}

template <class T = float>
ModelParams<T> build_model(const ModelSpec& spec, Rng& rng) {
  return spec.kind == ModelKind::efcn8 ? build_efcn8<T>(spec, rng) : build_esegnet<T>(spec, rng);
}

template <class T>
using ParamVars = std::map<std::string, Var<T>>;

/// Places every trainable tensor on the tape as a leaf.
template <class T>
ParamVars<T> bind_params(Tape<T>& tape, const ModelParams<T>& params, bool requires_grad) {
  ParamVars<T> vars;
  for (const auto& [name, t] : params.params) vars.emplace(name, tape.leaf(t, requires_grad, name));
  return vars;
}

/// Named intermediate nodes captured during graph construction.
template <class T>
struct ForwardTrace {
  std::map<std::string, Var<T>> taps;
};

namespace arch {

template <class T>
class GraphBuilder {
 public:
  GraphBuilder(const ParamVars<T>& vars, std::map<std::string, Tensor<T>>& buffers,
               const ModelSpec& spec, const ForwardOptions& opts, Rng& rng,
               ForwardTrace<T>* trace)
      : vars_(vars), buffers_(buffers), spec_(spec), opts_(opts), rng_(rng), trace_(trace) {}

  Var<T> param(const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) throw InvalidArgument("model is missing parameter '" + name + "'");
    return it->second;
  }

  Tensor<T>& buffer(const std::string& name) {
    auto it = buffers_.find(name);
    if (it == buffers_.end()) throw InvalidArgument("model is missing buffer '" + name + "'");
    return it->second;
  }

  std::optional<Var<T>> maybe_param(const std::string& name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) return std::nullopt;
    return it->second;
  }

  Var<T> conv(Var<T> x, const std::string& name, std::size_t pad) {
    return conv2d(x, param(name + ".weight"), maybe_param(name + ".bias"), 1, pad);
  }

  Var<T> up(Var<T> x, const std::string& name, std::size_t stride, std::size_t pad) {
    return transposed_conv2d(x, param(name + ".weight"), maybe_param(name + ".bias"), stride,
                             pad);
  }

  Var<T> bn(Var<T> x, const std::string& name) {
    auto g = param(name + ".gamma");
    auto b = param(name + ".beta");
    auto& rm = buffer(name + ".running_mean");
    auto& rv = buffer(name + ".running_var");
    if (opts_.mode == Mode::train) return batchnorm_train(x, g, b, rm, rv);
    return batchnorm_eval(x, g, b, rm, rv);
  }

  Var<T> act(Var<T> x) { return opts_.linear ? x : relu(x); }

  Var<T> conv_bn_relu(Var<T> x, const std::string& conv_name, const std::string& bn_name,
                      std::size_t pad) {
    return act(bn(conv(x, conv_name, pad), bn_name));
  }

  Var<T> drop(Var<T> x) {
    DropoutConfig cfg{spec_.dropout_rate, DropoutMode::off};
    if (opts_.mode == Mode::train) cfg.mode = DropoutMode::train;
    if (opts_.mode == Mode::mc_sample) cfg.mode = DropoutMode::mc_sample;
    return dropout(x, cfg, rng_);
  }

  void tap(const std::string& name, Var<T> v) {
    if (trace_) trace_->taps.insert_or_assign(name, v);
  }

  const ModelSpec& spec() const { return spec_; }

 private:
  const ParamVars<T>& vars_;
  std::map<std::string, Tensor<T>>& buffers_;
  const ModelSpec& spec_;
  const ForwardOptions& opts_;
  Rng& rng_;
  ForwardTrace<T>* trace_;
};

template <class T>
struct EncoderOutputs {
  std::array<Var<T>, 5> pooled;
  std::array<std::shared_ptr<LabelTensor>, 5> indices;
  std::array<Shape, 5> pre_pool_shape;
};

template <class T>
EncoderOutputs<T> encoder(GraphBuilder<T>& g, Var<T> x, bool esegnet_dropout) {
  EncoderOutputs<T> out;
  Var<T> h = x;
  for (std::size_t s = 0; s < 5; ++s) {
    const std::string prefix = "enc" + std::to_string(s + 1);
    for (std::size_t i = 0; i < kStageConvs[s]; ++i) {
      h = g.conv_bn_relu(h, prefix + ".conv" + std::to_string(i + 1),
                         prefix + ".bn" + std::to_string(i + 1), 1);
    }
    out.pre_pool_shape[s] = h.shape();
    auto pooled = maxpool2x2(h);
    h = pooled.output;
    if (esegnet_dropout && s >= 2) h = g.drop(h);
    out.pooled[s] = h;
    out.indices[s] = pooled.indices;
    g.tap("pool" + std::to_string(s + 1), h);
  }
  return out;
}

template <class T>
Var<T> efcn8_graph(GraphBuilder<T>& g, Var<T> x) {
  auto enc = encoder(g, x, false);
  Var<T> h = g.conv_bn_relu(enc.pooled[4], "fc6.conv", "fc6.bn", 1);
  h = g.drop(h);
  h = g.conv_bn_relu(h, "fc7.conv", "fc7.bn", 0);
  h = g.drop(h);
  Var<T> score_fr = g.conv(h, "score_fr", 0);
  g.tap("score_fr", score_fr);
  Var<T> up_fr = g.up(score_fr, "up2_fr", 2, 1);
  Var<T> fuse4 = add(up_fr, g.conv(enc.pooled[3], "score_pool4", 0));
  g.tap("fuse_pool4", fuse4);
  Var<T> up4 = g.up(fuse4, "up2_pool4", 2, 1);
  Var<T> fuse3 = add(up4, g.conv(enc.pooled[2], "score_pool3", 0));
  g.tap("fuse_pool3", fuse3);
  return g.up(fuse3, "up8", 8, 4);
}

template <class T>
Var<T> esegnet_graph(GraphBuilder<T>& g, Var<T> x) {
  auto enc = encoder(g, x, true);
  Var<T> h = enc.pooled[4];
  for (std::size_t s = 5; s-- > 0;) {
    const std::string prefix = "dec" + std::to_string(s + 1);
    h = max_unpool2x2(h, std::shared_ptr<const LabelTensor>(enc.indices[s]), enc.pre_pool_shape[s]);
    g.tap("unpool" + std::to_string(s + 1), h);
    for (std::size_t i = 0; i < kStageConvs[s]; ++i) {
      h = g.conv_bn_relu(h, prefix + ".conv" + std::to_string(i + 1),
                         prefix + ".bn" + std::to_string(i + 1), 1);
    }
    if (s >= 2) h = g.drop(h);
  }
  return g.conv(h, "classifier", 0);
}

}  // namespace arch

template <class T>
void check_model_input(const Tensor<T>& x, const ModelSpec& spec) {
  if (x.rank() != 4 || x.dim(1) != spec.in_channels) {
    throw ShapeError("model input must be [N," + std::to_string(spec.in_channels) +
                     ",H,W], got " + shape_str(x.shape()));
  }
  if (x.dim(2) % 32 || x.dim(3) % 32) {
    throw ShapeError("model input spatial size must be divisible by 32, got " +
                     shape_str(x.shape()));
  }
  for (auto v : x.vec()) {
    if (!(v >= T{0} && v <= T{1})) {
      throw InvalidArgument("model input values must lie in [0, 1]");
    }
  }
}

/// Records the forward pass on `tape` and returns the logits node
/// [N, 2, H, W]. Batchnorm running statistics in `buffers` are updated in
/// train mode only.
template <class T>
Var<T> forward_graph(Tape<T>& tape, const ParamVars<T>& vars,
                     std::map<std::string, Tensor<T>>& buffers, const ModelSpec& spec, Var<T> x,
                     const ForwardOptions& opts, Rng& rng, ForwardTrace<T>* trace = nullptr) {
  (void)tape;
  check_model_input(x.value(), spec);
  arch::GraphBuilder<T> g(vars, buffers, spec, opts, rng, trace);
  return spec.kind == ModelKind::efcn8 ? arch::efcn8_graph(g, x) : arch::esegnet_graph(g, x);
}

/// Logits for x [N, 3, H, W]. Train mode updates the running statistics.
template <class T>
Tensor<T> forward(ModelParams<T>& params, const ModelSpec& spec, const Tensor<T>& x, Mode mode,
                  Rng& rng) {
  Tape<T> tape;
  auto vars = bind_params(tape, params, false);
  auto xv = tape.leaf(x, false, "x");
  return forward_graph(tape, vars, params.buffers, spec, xv, ForwardOptions{mode}, rng).value();
}

/// Inference-only overload; train mode needs mutable running statistics.
template <class T>
Tensor<T> forward(const ModelParams<T>& params, const ModelSpec& spec, const Tensor<T>& x,
                  Mode mode, Rng& rng) {
  if (mode == Mode::train) {
    throw InvalidArgument("forward: train mode requires mutable model parameters");
  }
  Tape<T> tape;
  auto vars = bind_params(tape, params, false);
  auto buffers = params.buffers;
  auto xv = tape.leaf(x, false, "x");
  return forward_graph(tape, vars, buffers, spec, xv, ForwardOptions{mode}, rng).value();
}

}  // namespace polypseg
