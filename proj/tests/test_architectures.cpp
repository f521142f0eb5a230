#include <gtest/gtest.h>

#include "polypseg/architectures.hpp"
#include "test_util.hpp"

using namespace polypseg;
using testutil::fd_error;
using testutil::random_tensor;

namespace {

ModelSpec spec_for(ModelKind kind, std::size_t size = 64, double rate = 0.5) {
  ModelSpec s;
  s.kind = kind;
  s.input_h = s.input_w = size;
  s.dropout_rate = rate;
  return s;
}

template <class T>
Tensor<T> image_batch(std::size_t n, std::size_t size, Rng& rng) {
  return random_tensor<T>({n, 3, size, size}, rng, 0.1, 0.9);
}

double nonzero_fraction(const Tensor<float>& t, std::size_t n, std::size_t c) {
  const std::size_t hw = t.dim(2) * t.dim(3);
  std::size_t nz = 0;
  for (std::size_t p = 0; p < hw; ++p) nz += t[(n * t.dim(1) + c) * hw + p] != 0.0f;
  return static_cast<double>(nz) / static_cast<double>(hw);
}

}  // namespace

class BothArchitectures : public ::testing::TestWithParam<ModelKind> {};

TEST_P(BothArchitectures, OutputMatchesInputResolution) {
  for (std::size_t size : {32, 64, 96}) {
    const auto spec = spec_for(GetParam(), size);
    Rng rng(1);
    auto params = build_model<float>(spec, rng);
    const auto x = image_batch<float>(2, size, rng);
    for (auto mode : {Mode::train, Mode::eval, Mode::mc_sample}) {
      EXPECT_EQ(forward(params, spec, x, mode, rng).shape(), (Shape{2, 2, size, size}));
    }
  }
}

TEST_P(BothArchitectures, NonRectangularInput) {
  auto spec = spec_for(GetParam());
  spec.input_h = 32;
  spec.input_w = 96;
  Rng rng(2);
  const auto params = build_model<float>(spec, rng);
  const auto x = random_tensor<float>({1, 3, 32, 96}, rng, 0.0, 1.0);
  EXPECT_EQ(forward(params, spec, x, Mode::eval, rng).shape(), (Shape{1, 2, 32, 96}));
}

TEST_P(BothArchitectures, SeededBuildIsDeterministic) {
  const auto spec = spec_for(GetParam());
  Rng a(7), b(7), c(8);
  const auto pa = build_model<float>(spec, a);
  const auto pb = build_model<float>(spec, b);
  EXPECT_EQ(pa, pb);
  for (const auto& [name, t] : pa.params) EXPECT_TRUE(bit_identical(t, pb.params.at(name)));
  EXPECT_FALSE(pa == build_model<float>(spec, c));
}

TEST_P(BothArchitectures, EvalModeIsDeterministic) {
  const auto spec = spec_for(GetParam());
  Rng rng(3);
  const auto params = build_model<float>(spec, rng);
  const auto x = image_batch<float>(2, 64, rng);
  Rng r1(1), r2(2);
  EXPECT_TRUE(bit_identical(forward(params, spec, x, Mode::eval, r1),
                            forward(params, spec, x, Mode::eval, r2)));
}

TEST_P(BothArchitectures, McSamplePassesDiffer) {
  const auto spec = spec_for(GetParam());
  Rng rng(4);
  const auto params = build_model<float>(spec, rng);
  const auto x = image_batch<float>(1, 64, rng);
  Rng r(5);
  const auto a = forward(params, spec, x, Mode::mc_sample, r);
  const auto b = forward(params, spec, x, Mode::mc_sample, r);
  EXPECT_FALSE(a == b);
}

TEST_P(BothArchitectures, ZeroDropoutRateMakesMcSampleDeterministic) {
  const auto spec = spec_for(GetParam(), 64, 0.0);
  Rng rng(6);
  const auto params = build_model<float>(spec, rng);
  const auto x = image_batch<float>(1, 64, rng);
  Rng r(5);
  EXPECT_TRUE(bit_identical(forward(params, spec, x, Mode::mc_sample, r),
                            forward(params, spec, x, Mode::eval, r)));
}

TEST_P(BothArchitectures, TrainModeUpdatesRunningStatistics) {
  const auto spec = spec_for(GetParam());
  Rng rng(9);
  auto params = build_model<float>(spec, rng);
  const auto before = params.buffers;
  forward(params, spec, image_batch<float>(2, 64, rng), Mode::eval, rng);
  EXPECT_EQ(params.buffers, before);
  forward(params, spec, image_batch<float>(2, 64, rng), Mode::train, rng);
  EXPECT_NE(params.buffers, before);
}

TEST_P(BothArchitectures, InputContractErrors) {
  const auto spec = spec_for(GetParam());
  Rng rng(10);
  const auto params = build_model<float>(spec, rng);
  EXPECT_THROW(forward(params, spec, Tensor<float>({1, 3, 48, 64}, 0.5f), Mode::eval, rng),
               ShapeError);
  EXPECT_THROW(forward(params, spec, Tensor<float>({1, 1, 64, 64}, 0.5f), Mode::eval, rng),
               ShapeError);
  EXPECT_THROW(forward(params, spec, Tensor<float>({1, 3, 64, 64}, 1.5f), Mode::eval, rng),
               InvalidArgument);
  EXPECT_THROW(forward(params, spec, Tensor<float>({1, 3, 64, 64}, -0.1f), Mode::eval, rng),
               InvalidArgument);
}

TEST_P(BothArchitectures, InputGradientMatchesFiniteDifferences) {
  const auto spec = spec_for(GetParam(), 32);
  Rng rng(11);
  auto params = build_model<double>(spec, rng);
  const auto x = image_batch<double>(1, 32, rng);
  ScalarGraphFn<double> f = [&](Tape<double>& t, Var<double> xv) {
    auto vars = bind_params(t, params, false);
    Rng r(0);
    return sum(forward_graph(t, vars, params.buffers, spec, xv, ForwardOptions{Mode::eval}, r));
  };
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < 40; ++i) idx.push_back(rng.below(x.size()));
  EXPECT_LT(fd_error(f, x, idx), 1e-5);
}

// Parameter gradients in both batchnorm regimes; dropout is disabled to keep
// the objective deterministic. Batch 4 keeps train-mode batchnorm on the 1x1
// deepest maps away from the two-value case, whose output is +-1 regardless.
TEST_P(BothArchitectures, ParameterGradientsMatchFiniteDifferences) {
  const auto spec = spec_for(GetParam(), 32, 0.0);
  Rng rng(12);
  auto params = build_model<double>(spec, rng);
  const auto x = image_batch<double>(4, 32, rng);
  const auto weights = random_tensor<double>({4, 2, 32, 32}, rng);
  std::vector<std::string> names;
  for (const auto& [name, _] : params.params) names.push_back(name);
  for (auto mode : {Mode::eval, Mode::train}) {
    for (std::size_t k = 0; k < names.size(); k += 3) {
      const std::string name = names[k];
      auto buffers = params.buffers;
      ScalarGraphFn<double> f = [&](Tape<double>& t, Var<double> pv) {
        auto vars = bind_params(t, params, false);
        vars.insert_or_assign(name, pv);
        auto xv = t.leaf(x);
        Rng r(0);
        auto y = forward_graph(t, vars, buffers, spec, xv, ForwardOptions{mode}, r);
        return weighted_sum(y, weights);
      };
      const auto& p = params.params.at(name);
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < 2; ++i) idx.push_back(rng.below(p.size()));
      EXPECT_LT(fd_error(f, p, idx), 1e-5)
          << name << (mode == Mode::train ? " (train)" : " (eval)");
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Kinds, BothArchitectures,
                         ::testing::Values(ModelKind::efcn8, ModelKind::esegnet),
                         [](const auto& info) { return to_string(info.param); });

TEST(Architectures, WrongKindRejected) {
  Rng rng(1);
  EXPECT_THROW(build_efcn8<float>(spec_for(ModelKind::esegnet), rng), InvalidArgument);
  EXPECT_THROW(build_esegnet<float>(spec_for(ModelKind::efcn8), rng), InvalidArgument);
  EXPECT_THROW(parse_model_kind("fcn32"), InvalidArgument);
}

TEST(Architectures, Efcn8HasMoreParametersThanEsegnet) {
  for (std::size_t w : {4, 8, 16, 32}) {
    auto a = spec_for(ModelKind::efcn8);
    auto b = spec_for(ModelKind::esegnet);
    a.base_width = b.base_width = w;
    Rng r1(1), r2(1);
    EXPECT_GT(build_efcn8<float>(a, r1).parameter_count(),
              build_esegnet<float>(b, r2).parameter_count())
        << "base_width " << w;
  }
}

TEST(Architectures, EncoderFollowsVggLayout) {
  Rng rng(1);
  const auto p = build_esegnet<float>(spec_for(ModelKind::esegnet), rng);
  const std::size_t widths[] = {16, 32, 64, 128, 128};
  const std::size_t convs[] = {2, 2, 3, 3, 3};
  std::size_t cin = 3;
  for (std::size_t s = 0; s < 5; ++s) {
    for (std::size_t i = 1; i <= convs[s]; ++i) {
      const std::string conv = "enc" + std::to_string(s + 1) + ".conv" + std::to_string(i);
      EXPECT_EQ(p.params.at(conv + ".weight").shape(), (Shape{widths[s], cin, 3, 3}));
      cin = widths[s];
    }
    EXPECT_EQ(p.params.count("enc" + std::to_string(s + 1) + ".conv" +
                             std::to_string(convs[s] + 1) + ".weight"),
              0u);
  }
}

TEST(Architectures, HeInitializationScale) {
  Rng rng(3);
  const auto p = build_efcn8<double>(spec_for(ModelKind::efcn8), rng);
  const auto& w = p.params.at("fc6.conv.weight");  // fan_in 128 * 9
  double ss = 0;
  for (auto v : w.vec()) ss += v * v;
  const double std = std::sqrt(ss / w.size());
  EXPECT_NEAR(std / std::sqrt(2.0 / (128 * 9)), 1.0, 0.02);
}

TEST(Efcn8, ZeroedSkipScoresLeaveOnlyDeepestPath) {
  const auto spec = spec_for(ModelKind::efcn8);
  Rng rng(13);
  auto params = build_efcn8<double>(spec, rng);
  for (const char* name : {"score_pool3", "score_pool4"}) {
    params.params.at(std::string(name) + ".weight").fill(0.0);
    params.params.at(std::string(name) + ".bias").fill(0.0);
  }
  const auto x = image_batch<double>(2, 64, rng);
  Tape<double> tape;
  auto vars = bind_params(tape, params, false);
  ForwardTrace<double> trace;
  Rng r(0);
  auto buffers = params.buffers;
  const auto logits =
      forward_graph(tape, vars, buffers, spec, tape.leaf(x), ForwardOptions{Mode::eval}, r, &trace)
          .value();
  auto up = [&](const Tensor<double>& v, const std::string& name, std::size_t s, std::size_t pad) {
    return transposed_conv2d(v, Conv2dParams<double>{params.params.at(name + ".weight"),
                                                     params.params.at(name + ".bias"), s, pad});
  };
  const auto deep = up(up(up(trace.taps.at("score_fr").value(), "up2_fr", 2, 1), "up2_pool4", 2, 1),
                       "up8", 8, 4);
  ASSERT_EQ(deep.shape(), logits.shape());
  for (std::size_t i = 0; i < deep.size(); ++i) ASSERT_NEAR(deep[i], logits[i], 1e-12);

  // Perturbing the skip scores changes the output, so the equality above is
  // not vacuous.
  params.params.at("score_pool3.bias").fill(0.5);
  Rng r2(0);
  EXPECT_FALSE(forward(params, spec, x, Mode::eval, r2) == logits);
}

TEST(Esegnet, UnpooledMapsAreAtMostQuarterDense) {
  const auto spec = spec_for(ModelKind::esegnet);
  Rng rng(14);
  auto params = build_esegnet<float>(spec, rng);
  const auto x = image_batch<float>(2, 64, rng);
  for (auto mode : {Mode::eval, Mode::mc_sample, Mode::train}) {
    Tape<float> tape;
    auto vars = bind_params(tape, params, false);
    ForwardTrace<float> trace;
    forward_graph(tape, vars, params.buffers, spec, tape.leaf(x), ForwardOptions{mode}, rng, &trace);
    for (int s = 1; s <= 5; ++s) {
      const auto& u = trace.taps.at("unpool" + std::to_string(s)).value();
      for (std::size_t n = 0; n < u.dim(0); ++n)
        for (std::size_t c = 0; c < u.dim(1); ++c) ASSERT_LE(nonzero_fraction(u, n, c), 0.25);
    }
  }
}

TEST(Esegnet, DropoutOnlyAroundCentralStages) {
  // Rate-0.5 masks in mc-sample mode leave the first two pooled maps
  // untouched; stages 3-5 are resampled.
  const auto spec = spec_for(ModelKind::esegnet);
  Rng rng(15);
  const auto params = build_esegnet<float>(spec, rng);
  const auto x = image_batch<float>(1, 64, rng);
  std::array<ForwardTrace<float>, 2> traces;
  std::array<Tape<float>, 2> tapes;
  Rng r(1);
  for (int k = 0; k < 2; ++k) {
    auto vars = bind_params(tapes[k], params, false);
    auto buffers = params.buffers;
    forward_graph(tapes[k], vars, buffers, spec, tapes[k].leaf(x), ForwardOptions{Mode::mc_sample},
                  r, &traces[k]);
  }
  for (int s = 1; s <= 5; ++s) {
    const auto key = "pool" + std::to_string(s);
    const bool same = traces[0].taps.at(key).value() == traces[1].taps.at(key).value();
    EXPECT_EQ(same, s <= 2) << key;
  }
}
