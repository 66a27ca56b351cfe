#include <gtest/gtest.h>

#include <atomic>
#include <cmath>

#include "ctdense/byte_io.hpp"
#include "ctdense/errors.hpp"
#include "ctdense/ops.hpp"
#include "ctdense/synth.hpp"
#include "ctdense/train.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace ctdense {
namespace {

using T64 = Tensor<double>;

double bce1(double x, double y) { return bce_with_logits(T64::scalar(x), T64::scalar(y)).item(); }

TEST(Bce, KnownValues) {
  EXPECT_NEAR(bce1(0, 1), std::log(2.0), 1e-15);
  EXPECT_EQ(bce1(-100, 1), 100.0);
  EXPECT_EQ(bce1(100, 0), 100.0);
  EXPECT_LT(bce1(100, 1), 1e-40);
  EXPECT_LT(bce1(-100, 0), 1e-40);
  // torch.nn.functional.binary_cross_entropy_with_logits on the same vectors.
  const auto x = T64::from_vector({3, 2}, {0, -100, 100, 3.5, -2.25, 10});
  const auto y = T64::from_vector({3, 2}, {1, 1, 0, 0, 1, 1});
  EXPECT_NEAR(bce_with_logits(x, y).item(), 34.42885825944142, 1e-12);
}

TEST(Bce, MatchesNaiveFormulaInSafeRange) {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> x(10), y(10);
    for (auto& v : x) v = rng.uniform(-10, 10);
    for (auto& v : y) v = static_cast<double>(rng.index(2));
    const double got = bce_with_logits(T64::from_vector({5, 2}, x), T64::from_vector({5, 2}, y)).item();
    EXPECT_NEAR(got, oracle::naive_bce(x, y), 1e-10);
  }
}

TEST(Bce, FiniteOverHugeLogits) {
  Rng rng(13);
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.uniform(-1e6, 1e6);
    EXPECT_TRUE(std::isfinite(bce1(x, static_cast<double>(rng.index(2)))));
  }
  EXPECT_TRUE(std::isfinite(bce1(1e6, 0)));
  EXPECT_TRUE(std::isfinite(bce1(-1e6, 1)));
}

TEST(Bce, GradientIsSigmoidMinusTarget) {
  Tape<double> tape;
  TapeGuard<double> guard(tape);
  auto x = T64::from_vector({2, 2}, {-3, 0, 2, 40});
  x.set_requires_grad(true);
  const auto y = T64::from_vector({2, 2}, {1, 0, 0, 1});
  tape.backward(bce_with_logits(x, y));
  const auto s = sigmoid(x.clone());
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(x.grad()[i], (s.data()[i] - y.data()[i]) / 4.0, 1e-15);
}

TEST(Bce, RejectsBadTargetsAndShapes) {
  EXPECT_THROW(bce_with_logits(T64::from_vector({2}, {0, 0}), T64::from_vector({2}, {0.5, 1})), ValidationError);
  EXPECT_THROW(bce_with_logits(T64::zeros({2, 2}), T64::zeros({4})), ShapeError);
}

std::vector<NamedTensor<double>> scalar_param(double value) {
  auto p = T64::scalar(value);
  p.set_requires_grad(true);
  return {{"p", p}};
}

void set_grad(NamedTensor<double>& p, double g) {
  Tape<double> tape;
  TapeGuard<double> guard(tape);
  tape.backward(mul(p.tensor, T64::scalar(g)));
}

TEST(Adam, FirstStepMovesByLearningRate) {
  for (double g : {1e-3, 0.5, -7.0, 1e4}) {
    auto params = scalar_param(1.0);
    set_grad(params[0], g);
    AdamState<double> state;
    adam_step(params, state);
    EXPECT_NEAR(params[0].tensor.item() - 1.0, g > 0 ? -0.01 : 0.01, 1e-7) << g;
    EXPECT_EQ(state.step, 1);
    EXPECT_EQ(params[0].tensor.grad()[0], 0.0);
  }
}

TEST(Adam, ZeroGradientLeavesParameters) {
  auto params = scalar_param(0.375);
  AdamState<double> state;
  for (int i = 0; i < 5; ++i) {
    set_grad(params[0], 0.0);
    adam_step(params, state);
  }
  EXPECT_EQ(params[0].tensor.item(), 0.375);
}

TEST(Adam, ZeroLearningRateIsBitIdentical) {
  Rng rng(3);
  auto a = testing::random_leaf<double>({4, 4}, rng);
  std::vector<NamedTensor<double>> params{{"a", a}};
  const std::vector<double> before(a.data().begin(), a.data().end());
  AdamState<double> state;
  state.options.lr = 0.0;
  for (int i = 0; i < 3; ++i) {
    Tape<double> tape;
    TapeGuard<double> guard(tape);
    tape.backward(sum(mul(a, a)));
    adam_step(params, state);
  }
  EXPECT_EQ(std::vector<double>(a.data().begin(), a.data().end()), before);
}

TEST(Adam, QuadraticMatchesScalarSimulation) {
  auto params = scalar_param(1.0);
  AdamState<double> state;
  // Independent simulation of the same recurrence.
  double p = 1.0, m = 0, v = 0;
  double previous = 1.0;
  for (int t = 1; t <= 50; ++t) {
    set_grad(params[0], 2.0 * params[0].tensor.item());
    adam_step(params, state);
    const double g = 2.0 * p;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    p -= 0.01 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    EXPECT_NEAR(params[0].tensor.item(), p, 1e-12);
    EXPECT_LT(std::abs(p), previous);
    previous = std::abs(p);
  }
}

TEST(Adam, MissingGradientIsReportedBeforeAnyUpdate) {
  auto params = scalar_param(1.0);
  auto more = scalar_param(2.0);
  params.push_back(more[0]);
  params[1].name = "q";
  set_grad(params[0], 1.0);
  AdamState<double> state;
  try {
    adam_step(params, state);
    FAIL();
  } catch (const IncompleteGradientError& e) {
    EXPECT_NE(std::string(e.what()).find("'q'"), std::string::npos);
  }
  EXPECT_EQ(params[0].tensor.item(), 1.0);
  EXPECT_EQ(state.step, 0);
}

TEST(JointAccuracy, RowMustMatchExactly) {
  const auto label = T64::from_vector({1, 2}, {1, 0});
  EXPECT_EQ(joint_accuracy(T64::from_vector({1, 2}, {1, 0}), label), 1.0);
  EXPECT_EQ(joint_accuracy(T64::from_vector({1, 2}, {1, 0}), T64::from_vector({1, 2}, {1, 1})), 0.0);
  const auto p = T64::from_vector({4, 2}, {1, 0, 0, 0, 1, 1, 0, 1});
  const auto y = T64::from_vector({4, 2}, {1, 0, 0, 0, 1, 1, 1, 1});
  EXPECT_EQ(joint_accuracy(p, y), 0.75);
  EXPECT_THROW(joint_accuracy(p, label), ShapeError);
}

TEST(JointAccuracy, NeverExceedsEitherColumn) {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const auto n = 1 + static_cast<std::int64_t>(rng.index(20));
    std::vector<double> p(static_cast<std::size_t>(2 * n)), y(p.size());
    for (auto& v : p) v = static_cast<double>(rng.index(2));
    for (auto& v : y) v = static_cast<double>(rng.index(2));
    double col[2] = {0, 0};
    for (std::int64_t i = 0; i < n; ++i)
      for (int c = 0; c < 2; ++c) col[c] += p[static_cast<std::size_t>(2 * i + c)] == y[static_cast<std::size_t>(2 * i + c)];
    const double joint = joint_accuracy(T64::from_vector({n, 2}, p), T64::from_vector({n, 2}, y));
    EXPECT_LE(joint, std::min(col[0], col[1]) / static_cast<double>(n));
  }
}

DenseNet<float> zero_head_model() {
  auto model = DenseNet<float>::build(DenseNetConfig::reduced(), 1);
  for (auto& v : model.classifier_weight().mutable_data()) v = 0.0f;
  return model;
}

ProcessedImage flat_image(float value) { return {Image::filled(32, 32, value), "x", {}}; }

TEST(Predict, ThresholdRule) {
  auto model = zero_head_model();
  const auto p = predict(model, flat_image(0.4f));
  EXPECT_EQ(p.prob_covid, 0.5);
  EXPECT_EQ(p.prob_severe, 0.5);
  EXPECT_EQ(p.covid, 1);
  EXPECT_EQ(p.severe, 1);
  auto bias = model.classifier_bias().mutable_data();
  bias[0] = 5.0f;
  bias[1] = -5.0f;
  const auto q = predict(model, flat_image(0.4f));
  EXPECT_EQ(q.covid, 1);
  EXPECT_EQ(q.severe, 0);
  EXPECT_EQ(threshold_label(0.6, 0.9), 0);
  EXPECT_EQ(threshold_label(0.5, 0.5), 1);
  EXPECT_THROW(threshold_label(0.5, 1.0), ConfigError);
}

class TinyDataset : public ::testing::Test {
 protected:
  void SetUp() override {
    SynthOptions opts;
    opts.n = 8;
    opts.seed = 4;
    opts.image_size = 40;
    records_ = synth_generate(opts, dir_.path());
    config_.model = DenseNetConfig::reduced();
    config_.preprocess.target_size = 32;
    config_.epochs = 2;
    config_.batch_size = 4;
    config_.seed = 9;
  }

  testing::TempDir dir_{"train"};
  std::vector<StudyRecord> records_;
  TrainConfig config_;
};

TEST_F(TinyDataset, EvaluateMutatesNothing) {
  auto model = DenseNet<float>::build(config_.model, 2);
  const auto before = encode_checkpoint(model);
  VolumeImageSource source(config_.preprocess);
  const auto result = evaluate(model, records_, source);
  EXPECT_EQ(encode_checkpoint(model), before);
  EXPECT_EQ(result.patients.size(), records_.size());
  for (std::size_t i = 0; i < records_.size(); ++i) {
    EXPECT_EQ(result.patients[i].patient_id, records_[i].patient_id);
    EXPECT_EQ(result.patients[i].label_covid, records_[i].label_covid);
  }
}

TEST_F(TinyDataset, ZeroHeadGivesHalfProbabilities) {
  auto model = zero_head_model();
  VolumeImageSource source(config_.preprocess);
  const auto result = evaluate(model, records_, source);
  for (const auto& p : result.patients) {
    EXPECT_EQ(p.prob_covid, 0.5);
    EXPECT_EQ(p.prob_severe, 0.5);
  }
  EXPECT_NEAR(result.loss, std::log(2.0), 1e-6);
}

TEST_F(TinyDataset, OneEpochProducesFiniteMetrics) {
  config_.epochs = 1;
  config_.metrics_path = dir_.path() / "m.csv";
  auto model = DenseNet<float>::build(config_.model, config_.seed);
  VolumeImageSource source(config_.preprocess);
  MetricsLog log;
  train(model, DatasetSplit{records_, records_, 0}, source, config_, log);
  ASSERT_EQ(log.size(), 1u);
  EXPECT_TRUE(std::isfinite(log[0].train_loss));
  EXPECT_TRUE(std::isfinite(log[0].val_loss));
  EXPECT_GE(log[0].val_accuracy, 0.0);
  EXPECT_LE(log[0].val_accuracy, 1.0);
  EXPECT_EQ(read_file(*config_.metrics_path), format_metrics_csv(log));
}

TEST_F(TinyDataset, IdenticalSeedsGiveBitIdenticalRuns) {
  auto run = [&](const std::string& tag) {
    auto config = config_;
    config.checkpoint_dir = dir_.path() / tag;
    config.checkpoint_every = 1;
    auto model = DenseNet<float>::build(config.model, config.seed);
    VolumeImageSource source(config.preprocess);
    MetricsLog log;
    train(model, split(records_, 2, config.seed), source, config, log);
    return std::make_pair(format_metrics_csv(log), read_file(final_checkpoint_path(*config.checkpoint_dir)));
  };
  const auto a = run("a");
  const auto b = run("b");
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
  EXPECT_TRUE(std::filesystem::exists(epoch_checkpoint_path(dir_.path() / "a", 1)));
  EXPECT_TRUE(std::filesystem::exists(epoch_checkpoint_path(dir_.path() / "a", 2)));
}

TEST_F(TinyDataset, ZeroLearningRateChangesOnlyRunningStatistics) {
  config_.epochs = 1;
  config_.adam.lr = 0.0;
  auto model = DenseNet<float>::build(config_.model, 3);
  const auto before = DenseNet<float>::build(config_.model, 3);
  VolumeImageSource source(config_.preprocess);
  MetricsLog log;
  train(model, DatasetSplit{records_, records_, 0}, source, config_, log);
  const auto p0 = before.parameters();
  const auto p1 = model.parameters();
  for (std::size_t i = 0; i < p0.size(); ++i) {
    EXPECT_TRUE(std::equal(p0[i].tensor.data().begin(), p0[i].tensor.data().end(), p1[i].tensor.data().begin()))
        << p0[i].name;
  }
  const auto b0 = before.buffers();
  const auto b1 = model.buffers();
  bool moved = false;
  for (std::size_t i = 0; i < b0.size(); ++i) {
    moved |= !std::equal(b0[i].tensor.data().begin(), b0[i].tensor.data().end(), b1[i].tensor.data().begin());
  }
  EXPECT_TRUE(moved);
}

// Serves infinite pixels once poisoned, which drives the loss to NaN.
class PoisonSource : public ImageSource {
 public:
  explicit PoisonSource(PreprocessConfig config) : inner_(config) {}
  ProcessedImage load(const StudyRecord& r) override {
    auto img = inner_.load(r);
    if (poisoned) std::fill(img.image.pixels.begin(), img.image.pixels.end(), INFINITY);
    return img;
  }
  const PreprocessConfig& config() const override { return inner_.config(); }
  std::atomic<bool> poisoned{false};

 private:
  VolumeImageSource inner_;
};

TEST_F(TinyDataset, DivergenceHaltsAndKeepsPartialLog) {
  config_.epochs = 3;
  config_.prefetch = false;
  config_.metrics_path = dir_.path() / "diverge.csv";
  auto model = DenseNet<float>::build(config_.model, 1);
  PoisonSource source(config_.preprocess);
  MetricsLog log;
  try {
    train(model, DatasetSplit{records_, records_, 0}, source, config_, log,
          [&](const EpochMetrics&) { source.poisoned = true; });
    FAIL();
  } catch (const DivergenceError& e) {
    EXPECT_EQ(e.epoch(), 2);
    EXPECT_EQ(e.batch(), 1);
  }
  EXPECT_EQ(log.size(), 1u);
  EXPECT_EQ(parse_metrics_csv(read_file(*config_.metrics_path)), log);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.epochs = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.preprocess.target_size = 64;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(MetricsCsv, RoundTripAndErrors) {
  const MetricsLog log{{1, 0.5, 0.25, 0.75}, {2, 0.1, 1.0 / 3.0, 1.0}};
  EXPECT_EQ(parse_metrics_csv(format_metrics_csv(log)), log);
  try {
    parse_metrics_csv(std::string(kMetricsHeader) + "\n1,0.5,0.2,0.1\n2,abc,0.1,0.1\n");
    FAIL();
  } catch (const MetricsError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
  EXPECT_THROW(parse_metrics_csv("epoch,loss\n"), MetricsError);
}

TEST(PreprocessMetadata, RoundTrip) {
  PreprocessConfig c;
  c.target_size = 32;
  c.crop = CropPolicy::center(0.85);
  c.slice = SlicePolicy::at(3);
  EXPECT_EQ(preprocess_from_metadata(preprocess_metadata(c)), c);
  EXPECT_THROW(preprocess_from_metadata({{"preprocess.clip_lo", "x"}}), CheckpointError);
}

}  // namespace
}  // namespace ctdense
