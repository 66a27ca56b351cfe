#include <gtest/gtest.h>

#include <sstream>

#include "ctdense/byte_io.hpp"
#include "ctdense/errors.hpp"
#include "ctdense/train.hpp"
#include "ctdense_tools/cli.hpp"
#include "ctdense_tools/run_config.hpp"
#include "test_support.hpp"

namespace ctdense::tools {
namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

TEST(Cli, HelpExitsZeroEverywhere) {
  EXPECT_EQ(run({"--help"}).code, 0);
  for (const auto* cmd : {"train", "evaluate", "predict", "describe", "synth", "curves"}) {
    const auto r = run({cmd, "--help"});
    EXPECT_EQ(r.code, 0) << cmd;
    EXPECT_FALSE(r.out.empty()) << cmd;
  }
}

TEST(Cli, UnknownFlagIsNamed) {
  const std::vector<std::vector<std::string>> commands{
      {"train"}, {"describe", "densenet121"}, {"synth", "--out-dir", "unused"}, {"curves", "m.csv"}};
  for (auto args : commands) {
    args.push_back("--bogus-flag");
    const auto r = run(args);
    EXPECT_EQ(r.code, kExitUsage) << args[0];
    EXPECT_NE((r.out + r.err).find("--bogus-flag"), std::string::npos) << args[0];
  }
  EXPECT_NE(run({}).code, 0);
}

TEST(Cli, DescribePresets) {
  const auto r121 = run({"describe", "densenet121"});
  ASSERT_EQ(r121.code, 0) << r121.err;
  EXPECT_NE(r121.out.find("layers: 121\n"), std::string::npos);
  EXPECT_NE(r121.out.find("Convolution           112x112"), std::string::npos);
  EXPECT_NE(r121.out.find("[1x1 conv, 3x3 conv] x 24"), std::string::npos);
  const auto r169 = run({"describe", "densenet169"});
  EXPECT_NE(r169.out.find("layers: 169\n"), std::string::npos);
  EXPECT_NE(r169.out.find("block_layers: 6 12 32 32\n"), std::string::npos);
  const auto imagenet = run({"describe", "densenet121", "--outputs", "1000"});
  EXPECT_NE(imagenet.out.find("parameters: 7972584\n"), std::string::npos);
  EXPECT_EQ(run({"describe", "densenet999"}).code, kExitUsage);
}

TEST(RunConfig, FlagsBeatFileBeatDefaults) {
  testing::TempDir dir("cfg");
  write_file(dir.path() / "run.cfg", "# test\ntrain.epochs = 7\ntrain.seed = 3\nmodel.preset = reduced\n");
  RunConfig rc;
  EXPECT_EQ(rc.get("train.epochs"), "100");
  rc.apply_file(dir.path() / "run.cfg");
  EXPECT_EQ(rc.get("train.epochs"), "7");
  rc.set("train.seed", "11");
  const auto tc = rc.train_config();
  EXPECT_EQ(tc.epochs, 7);             // file
  EXPECT_EQ(tc.seed, 11u);             // flag
  EXPECT_EQ(tc.batch_size, 8u);        // default
  EXPECT_EQ(tc.model.name, "reduced");
  EXPECT_EQ(tc.preprocess.target_size, 32);
}

TEST(RunConfig, UnknownKeysAreErrors) {
  RunConfig rc;
  EXPECT_THROW(rc.set("train.epoch", "3"), ConfigError);
  try {
    rc.apply_text("train.epochs = 3\n\nmystery = 1\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
  }
  EXPECT_EQ(rc.validation_count(10000), 300u);
}

TEST(Cli, TrainRejectsZeroEpochs) {
  const auto r = run({"train", "--epochs", "0"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("epochs"), std::string::npos);
}

TEST(Cli, TrainConfigFileUnknownKeyExitsOne) {
  testing::TempDir dir("cfg2");
  write_file(dir.path() / "bad.cfg", "train.learning_rate = 1\n");
  EXPECT_EQ(run({"train", "--config", (dir.path() / "bad.cfg").string()}).code, kExitUsage);
}

TEST(Cli, EndToEndOnSyntheticData) {
  testing::TempDir dir("e2e");
  const auto root = dir.path().string();
  ASSERT_EQ(run({"synth", "--n", "8", "--seed", "2", "--size", "36", "--out-dir", root}).code, 0);
  const auto train = run({"train", "--preset", "reduced", "--epochs", "2", "--batch-size", "4", "--validation-count",
                          "0", "--data-dir", root + "/data", "--reference", root + "/reference.csv", "--out-dir",
                          root + "/run"});
  ASSERT_EQ(train.code, 0) << train.err;
  EXPECT_NE(train.out.find("final epoch 2/2"), std::string::npos);
  const auto metrics = parse_metrics_csv(read_file(dir.path() / "run/metrics.csv"));
  EXPECT_EQ(metrics.size(), 2u);

  const auto ckpt = root + "/run/checkpoints/final.ckpt";
  const auto eval = run({"evaluate", "--checkpoint", ckpt, "--data-dir", root + "/data", "--reference",
                         root + "/reference.csv", "--out", root + "/eval.csv"});
  ASSERT_EQ(eval.code, 0) << eval.err;
  EXPECT_NE(eval.out.find("accuracy: "), std::string::npos);
  const auto table = read_file(dir.path() / "eval.csv");
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 9);

  const auto pred = run({"predict", "--checkpoint", ckpt, root + "/data/synth0000.mha"});
  ASSERT_EQ(pred.code, 0) << pred.err;
  EXPECT_EQ(pred.out.rfind("prob_covid=", 0), 0u);
  EXPECT_NE(pred.out.find(" covid="), std::string::npos);

  const auto described = run({"describe", ckpt});
  EXPECT_NE(described.out.find("model: reduced"), std::string::npos);

  const auto curves = run({"curves", root + "/run/metrics.csv", "--out-dir", root + "/curves"});
  ASSERT_EQ(curves.code, 0) << curves.err;
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "curves/loss.csv"));
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "curves/accuracy.csv"));
}

TEST(Cli, DataErrorsExitTwo) {
  testing::TempDir dir("errs");
  write_file(dir.path() / "junk.mha", "this is not a volume");
  write_file(dir.path() / "short.ckpt", "CTDNCKPT\x01");
  EXPECT_EQ(run({"predict", "--checkpoint", (dir.path() / "short.ckpt").string(), (dir.path() / "junk.mha").string()})
                .code,
            kExitData);
  const auto r = run({"train", "--preset", "reduced", "--reference", (dir.path() / "missing.csv").string()});
  EXPECT_EQ(r.code, kExitData);
  write_file(dir.path() / "m.csv", "epoch,train_loss,val_loss,val_accuracy\n1,0.1,0.1,x\n");
  const auto c = run({"curves", (dir.path() / "m.csv").string(), "--out-dir", dir.path().string()});
  EXPECT_EQ(c.code, kExitData);
  EXPECT_NE(c.err.find("line 2"), std::string::npos);
}

TEST(Cli, PredictFailsCleanlyOnNonMha) {
  testing::TempDir dir("pred");
  auto model = DenseNet<float>::build(DenseNetConfig::reduced(), 0);
  PreprocessConfig pc;
  pc.target_size = 32;
  save_checkpoint(dir.path() / "m.ckpt", model, preprocess_metadata(pc));
  write_file(dir.path() / "x.mha", "ObjectType = Image\n");
  const auto r = run({"predict", "--checkpoint", (dir.path() / "m.ckpt").string(), (dir.path() / "x.mha").string()});
  EXPECT_EQ(r.code, kExitData);
  EXPECT_NE(r.err.find("ElementDataFile"), std::string::npos);
}

TEST(Cli, ZeroHeadPredictsHalf) {
  testing::TempDir dir("zero");
  auto model = DenseNet<float>::build(DenseNetConfig::reduced(), 0);
  for (auto& v : model.classifier_weight().mutable_data()) v = 0.0f;
  PreprocessConfig pc;
  pc.target_size = 32;
  save_checkpoint(dir.path() / "z.ckpt", model, preprocess_metadata(pc));
  ASSERT_EQ(run({"synth", "--n", "1", "--size", "32", "--out-dir", dir.path().string()}).code, 0);
  const auto r = run({"predict", "--checkpoint", (dir.path() / "z.ckpt").string(),
                      (dir.path() / "data/synth0000.mha").string()});
  EXPECT_EQ(r.out, "prob_covid=0.5000 prob_severe=0.5000 covid=1 severe=1\n");
}

TEST(Curves, MovingAverage) {
  const std::vector<double> v{1, 2, 3, 4, 5, 6};
  EXPECT_EQ(moving_average(v, 1), v);
  const auto s = moving_average(v, 5);
  EXPECT_DOUBLE_EQ(s[0], 1.0);
  EXPECT_DOUBLE_EQ(s[2], 2.0);
  EXPECT_DOUBLE_EQ(s[5], 4.0);  // mean of 2..6
  Rng rng(1);
  std::vector<double> acc(100);
  for (auto& a : acc) a = rng.uniform();
  for (int w : {1, 3, 5, 10}) {
    const auto sm = moving_average(acc, w);
    EXPECT_LE(*std::max_element(sm.begin(), sm.end()), *std::max_element(acc.begin(), acc.end()));
  }
}

TEST(Curves, HundredRowsGiveHundredPoints) {
  testing::TempDir dir("curves");
  MetricsLog log;
  for (int i = 1; i <= 100; ++i) log.push_back({i, 1.0 / i, 2.0 / i, i / 100.0});
  write_file(dir.path() / "m.csv", format_metrics_csv(log));
  ASSERT_EQ(run({"curves", (dir.path() / "m.csv").string(), "--out-dir", dir.path().string(), "--window", "5"}).code, 0);
  const auto acc = read_file(dir.path() / "accuracy.csv");
  EXPECT_EQ(std::count(acc.begin(), acc.end(), '\n'), 101);
}

}  // namespace
}  // namespace ctdense::tools
