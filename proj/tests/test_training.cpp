#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "polypseg/training.hpp"

using namespace polypseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("polypseg_train_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ModelSpec tiny_spec(ModelKind kind = ModelKind::efcn8) {
  ModelSpec s;
  s.kind = kind;
  s.base_width = 4;
  s.input_h = s.input_w = 32;
  return s;
}

struct TinyData {
  std::vector<Sample> train, val;
};

TinyData tiny_data(std::size_t n = 20) {
  Rng rng(77);
  auto all = generate_synthetic(n, 32, 32, rng);
  const auto m = split_by_patient(all);
  Dataset ds{all, m};
  auto val = ds.split(Split::val);
  for (auto& s : ds.split(Split::test)) val.push_back(s);
  return {ds.split(Split::train), val};
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.batch_size = 4;
  c.max_epochs = 3;
  c.seed = 5;
  return c;
}

}  // namespace

// ---------------------------------------------------------------- adam_step

TEST(Adam, FirstStepMovesByLearningRate) {
  std::map<std::string, Tensor<double>> p{{"t", Tensor<double>({1}, 0.0)}};
  AdamState<double> st;
  adam_step(p, {{"t", Tensor<double>({1}, 1.0)}}, st);
  EXPECT_NEAR(p["t"][0], -1e-3 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(st.step_count, 1u);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  std::map<std::string, Tensor<float>> p{{"a", Tensor<float>({2, 2}, 0.3f)}, {"b", Tensor<float>({3}, -1.0f)}};
  const auto before = p;
  AdamState<float> st;
  adam_step(p, {{"a", Tensor<float>({2, 2})}, {"b", Tensor<float>({3})}}, st);
  EXPECT_EQ(p, before);
}

// Momentum makes single steps overshoot zero, so the decrease is checked on
// the envelope: the largest |theta| in each block of 20 steps.
TEST(Adam, DescendsQuadratic) {
  std::map<std::string, Tensor<double>> p{{"t", Tensor<double>({1}, 1.0)}};
  AdamState<double> st;
  st.lr = 0.1;
  std::vector<double> trace;
  for (int i = 0; i < 200; ++i) {
    adam_step(p, {{"t", Tensor<double>({1}, 2.0 * p["t"][0])}}, st);
    trace.push_back(std::abs(p["t"][0]));
  }
  double prev_block = 1.0;
  for (int b = 0; b < 10; ++b) {
    const double block = *std::max_element(trace.begin() + 20 * b, trace.begin() + 20 * (b + 1));
    EXPECT_LT(block, prev_block) << "block " << b;
    prev_block = block;
  }
  EXPECT_LT(trace.back(), 0.05);
}

TEST(Adam, SmallStepDecreasesConvexLoss) {
  for (double t0 : {-2.0, -0.3, 0.5, 3.0}) {
    std::map<std::string, Tensor<double>> p{{"t", Tensor<double>({1}, t0)}};
    AdamState<double> st;
    adam_step(p, {{"t", Tensor<double>({1}, 2.0 * t0)}}, st);
    EXPECT_LT(p["t"][0] * p["t"][0], t0 * t0);
  }
}

TEST(Adam, GradientSetMustMatchParameters) {
  std::map<std::string, Tensor<float>> p{{"a", Tensor<float>({1})}, {"b", Tensor<float>({1})}};
  AdamState<float> st;
  EXPECT_THROW(adam_step(p, {{"a", Tensor<float>({1})}}, st), InvalidArgument);
  EXPECT_THROW(adam_step(p, {{"a", Tensor<float>({1})}, {"b", Tensor<float>({1})}, {"c", Tensor<float>({1})}}, st),
               InvalidArgument);
  EXPECT_THROW(adam_step(p, {{"a", Tensor<float>({2})}, {"b", Tensor<float>({1})}}, st), ShapeError);
  EXPECT_EQ(st.step_count, 0u);
}

// ------------------------------------------------------------ early stopping

TEST(EarlyStop, StopsAfterPatiencePlusOneStaleEvaluations) {
  for (std::size_t patience : {0, 2, 30}) {
    EarlyStopState es;
    es.patience = patience;
    EXPECT_EQ(es.update(0.5, 0), EarlyStopState::Verdict::improved);
    for (std::size_t k = 1; k <= patience; ++k) {
      EXPECT_EQ(es.update(0.5 - 0.01 * k, k), EarlyStopState::Verdict::wait);
      EXPECT_LE(es.evals_since_best, es.patience);
    }
    EXPECT_EQ(es.update(0.0, patience + 1), EarlyStopState::Verdict::stop);
    EXPECT_EQ(es.best_step, 0u);
  }
}

TEST(EarlyStop, EqualMetricIsNotAnImprovement) {
  EarlyStopState es;
  es.update(0.7, 0);
  EXPECT_EQ(es.update(0.7, 1), EarlyStopState::Verdict::wait);
  EXPECT_EQ(es.update(0.71, 2), EarlyStopState::Verdict::improved);
  EXPECT_EQ(es.evals_since_best, 0u);
}

// -------------------------------------------------------------- checkpoints

TEST(Checkpoint, RoundTripIsBitExact) {
  Rng rng(1);
  Checkpoint c;
  c.spec = tiny_spec(ModelKind::esegnet);
  c.model = build_model<float>(c.spec, rng);
  for (const auto& [k, t] : c.model.params) {
    c.adam_m[k] = t;
    c.adam_v[k] = Tensor<float>(t.shape(), 0.25f);
  }
  c.model.params.begin()->second[0] = -0.0f;
  c.seed = 0xDEADBEEFCAFEULL;
  c.step_count = 12345;
  c.progress = {7, 0.8125, 5, 2};
  const auto path = temp_dir("ckpt") / "a.ckpt";
  save_checkpoint(c, path);
  const auto back = load_checkpoint(path);
  EXPECT_EQ(back, c);
  EXPECT_TRUE(std::signbit(back.model.params.begin()->second[0]));
  for (const auto& [k, t] : c.model.params) EXPECT_TRUE(bit_identical(t, back.model.params.at(k)));
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(c));
}

TEST(Checkpoint, HeaderLayout) {
  Rng rng(1);
  Checkpoint c{tiny_spec(), build_model<float>(tiny_spec(), rng), {}, {}, 1, 2, {}};
  const auto bytes = serialize_checkpoint(c);
  ASSERT_GT(bytes.size(), 8u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "SEGC");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5] | bytes[6] | bytes[7], 0);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  Rng rng(1);
  Checkpoint c{tiny_spec(), build_model<float>(tiny_spec(), rng), {}, {}, 1, 2, {}};
  auto bytes = serialize_checkpoint(c);
  const auto dir = temp_dir("corrupt");
  auto write = [&](const std::vector<std::uint8_t>& b) {
    io::write_file(dir / "x.ckpt", b);
    return dir / "x.ckpt";
  };
  EXPECT_THROW(load_checkpoint(write({bytes.begin(), bytes.begin() + bytes.size() / 2})),
               CheckpointFormatError);
  EXPECT_THROW(load_checkpoint(write({bytes.begin(), bytes.end() - 1})), CheckpointFormatError);
  auto foreign = bytes;
  foreign[0] = 'P';
  foreign[1] = 'K';
  EXPECT_THROW(load_checkpoint(write(foreign)), CheckpointFormatError);
  auto version = bytes;
  version[4] = 2;
  EXPECT_THROW(load_checkpoint(write(version)), CheckpointFormatError);
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(load_checkpoint(write(extra)), CheckpointFormatError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), FileError);
}

TEST(Checkpoint, RejectsParameterSetOfAnotherSpec) {
  Rng rng(1);
  Checkpoint c{tiny_spec(), build_model<float>(tiny_spec(), rng), {}, {}, 1, 2, {}};
  c.model.params.erase("score_fr.bias");
  const auto dir = temp_dir("spec");
  save_checkpoint(c, dir / "x.ckpt");
  EXPECT_THROW(load_checkpoint(dir / "x.ckpt"), CheckpointFormatError);
}

TEST(TensorDump, RoundTrip) {
  std::map<std::string, Tensor<float>> m{{"std", Tensor<float>({2, 3}, 0.125f)}, {"grad", Tensor<float>({3, 1, 1}, -2.0f)}};
  const auto path = temp_dir("dump") / "x.segt";
  save_tensor_dump(m, path);
  EXPECT_EQ(load_tensor_dump(path), m);
}

// ---------------------------------------------------------------- evaluate

TEST(Evaluate, MatchesBruteForceOverArgmax) {
  const auto data = tiny_data();
  Rng rng(3);
  const auto spec = tiny_spec();
  const auto params = build_model<float>(spec, rng);
  const auto report = evaluate(params, spec, data.val, 3);
  ConfusionCounts c;
  for (const auto& s : data.val) {
    Tensor<float> x({1, 3, 32, 32}, s.image.vec());
    Rng r(0);
    const auto logits = forward(params, spec, x, Mode::eval, r);
    LabelTensor pred({32, 32});
    for (std::size_t p = 0; p < 1024; ++p) pred[p] = logits[1024 + p] > logits[p];
    accumulate(c, pred, s.mask);
  }
  EXPECT_EQ(report, finalize(c));
  EXPECT_THROW(evaluate(params, spec, {}), InvalidArgument);
}

TEST(Evaluate, ConstantBackgroundModel) {
  const auto data = tiny_data();
  Rng rng(3);
  const auto spec = tiny_spec();
  auto params = build_model<float>(spec, rng);
  params.params.at("up8.weight").fill(0.0f);
  params.params.at("up8.bias") = Tensor<float>({2}, {1.0f, 0.0f});
  const auto r = evaluate(params, spec, data.val);
  EXPECT_EQ(r.iou_polyp, 0.0);

  // The same model is a perfect oracle on polyp-free samples.
  auto empty = data.val;
  for (auto& s : empty) s.mask.fill(0);
  EXPECT_EQ(evaluate(params, spec, empty), (MetricsReport{1.0, 1.0, 1.0, 1.0}));
}

// ------------------------------------------------------------------ train

TEST(Train, InjectedDegradingMetricStopsOnSchedule) {
  const auto data = tiny_data();
  for (std::size_t patience : {2, 30}) {
    auto cfg = tiny_config();
    cfg.patience = patience;
    cfg.max_epochs = 100;
    cfg.metric_hook = [](std::size_t epoch, const MetricsReport&) { return 1.0 - 0.01 * epoch; };
    const auto r = train(tiny_spec(), data.train, data.val, cfg);
    EXPECT_TRUE(r.stopped_early);
    EXPECT_EQ(r.evaluations, patience + 2);  // initial + patience + 1 stale
    EXPECT_EQ(r.log.back().epoch, patience + 1);
    EXPECT_EQ(r.log.back().evals_since_best, patience + 1);
    EXPECT_EQ(r.best.step_count, 0u);
    EXPECT_EQ(r.best.progress.epoch, 0u);
    Rng init = Rng(cfg.seed).split(1);
    EXPECT_EQ(r.best.model, build_model<float>(tiny_spec(), init));
  }
}

TEST(Train, BestCheckpointIsNeverWorseThanAnyEvaluation) {
  const auto data = tiny_data();
  auto cfg = tiny_config();
  cfg.max_epochs = 6;
  const double script[] = {0.2, 0.5, 0.4, 0.6, 0.1, 0.55, 0.3};
  cfg.metric_hook = [&](std::size_t epoch, const MetricsReport&) { return script[epoch]; };
  const auto r = train(tiny_spec(), data.train, data.val, cfg);
  EXPECT_EQ(r.best.progress.epoch, 3u);
  EXPECT_EQ(r.best.progress.best_metric, 0.6);
  double prev = -1;
  for (const auto& e : r.log) {
    EXPECT_GE(e.best_metric, prev);
    EXPECT_LE(e.metric, r.best.progress.best_metric);
    prev = e.best_metric;
  }
}

TEST(Train, SameSeedGivesIdenticalCheckpoints) {
  const auto data = tiny_data();
  const auto a = train(tiny_spec(), data.train, data.val, tiny_config());
  const auto b = train(tiny_spec(), data.train, data.val, tiny_config());
  EXPECT_EQ(serialize_checkpoint(a.best), serialize_checkpoint(b.best));
  EXPECT_EQ(serialize_checkpoint(a.last), serialize_checkpoint(b.last));
  EXPECT_EQ(a.last.step_count, 3 * ((data.train.size() + 3) / 4));
  auto other = tiny_config();
  other.seed = 6;
  EXPECT_NE(serialize_checkpoint(train(tiny_spec(), data.train, data.val, other).last),
            serialize_checkpoint(a.last));
}

TEST(Train, ResumeMatchesUninterruptedRun) {
  const auto data = tiny_data();
  for (auto kind : {ModelKind::efcn8, ModelKind::esegnet}) {
    auto cfg = tiny_config();
    cfg.max_epochs = 4;
    cfg.patience = 100;
    const auto full = train(tiny_spec(kind), data.train, data.val, cfg);

    const auto dir = temp_dir("resume");
    auto first = cfg;
    first.out_dir = dir;
    first.continue_hook = [](std::size_t epoch) { return epoch < 2; };
    const auto part = train(tiny_spec(kind), data.train, data.val, first);
    ASSERT_EQ(part.last.progress.epoch, 2u);
    const auto last = load_checkpoint(dir / "last.ckpt");
    const auto best = load_checkpoint(dir / "best.ckpt");
    EXPECT_EQ(last, part.last);

    auto second = cfg;
    second.out_dir = dir;
    const auto rest = train(tiny_spec(kind), data.train, data.val, second, &last, &best);
    EXPECT_EQ(serialize_checkpoint(rest.last), serialize_checkpoint(full.last));
    EXPECT_EQ(serialize_checkpoint(rest.best), serialize_checkpoint(full.best));

    std::ifstream log(dir / "train_log.jsonl");
    std::size_t lines = 0;
    for (std::string l; std::getline(log, l);) ++lines;
    EXPECT_EQ(lines, 5u);  // epochs 0..4
  }
}

TEST(Train, WritesLogAndCheckpoints) {
  const auto data = tiny_data();
  auto cfg = tiny_config();
  cfg.out_dir = temp_dir("log");
  const auto r = train(tiny_spec(), data.train, data.val, cfg);
  EXPECT_TRUE(fs::exists(cfg.out_dir / "best.ckpt"));
  EXPECT_TRUE(fs::exists(cfg.out_dir / "last.ckpt"));
  std::ifstream log(cfg.out_dir / "train_log.jsonl");
  std::vector<nlohmann::json> lines;
  for (std::string l; std::getline(log, l);) lines.push_back(nlohmann::json::parse(l));
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_TRUE(lines[0]["loss"].is_null());
  double prev = -1;
  for (std::size_t e = 0; e < lines.size(); ++e) {
    EXPECT_EQ(lines[e]["epoch"], e);
    if (e) EXPECT_GT(lines[e]["loss"].get<double>(), 0.0);
    EXPECT_TRUE(lines[e]["val"].contains("iou_polyp"));
    EXPECT_GE(lines[e]["best_val_iou"].get<double>(), prev);
    prev = lines[e]["best_val_iou"].get<double>();
  }
  EXPECT_EQ(load_checkpoint(cfg.out_dir / "best.ckpt"), r.best);
}

TEST(Train, LossDecreasesOnSmallSet) {
  const auto data = tiny_data(40);
  auto cfg = tiny_config();
  cfg.max_epochs = 8;
  cfg.augment.enabled = false;
  const auto r = train(tiny_spec(), data.train, data.val, cfg);
  EXPECT_LT(*r.log.back().loss, *r.log[1].loss);
}

TEST(Train, RejectsOverlappingPatients) {
  const auto data = tiny_data();
  auto val = data.val;
  val.push_back(data.train.front());
  EXPECT_THROW(train(tiny_spec(), data.train, val, tiny_config()), InvalidArgument);
}
