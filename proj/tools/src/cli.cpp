#include "ctdense_tools/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <map>
#include <ostream>

#include "ctdense/byte_io.hpp"
#include "ctdense/checkpoint.hpp"
#include "ctdense/errors.hpp"
#include "ctdense/key_value.hpp"
#include "ctdense/synth.hpp"
#include "ctdense/train.hpp"
#include "ctdense_tools/run_config.hpp"

namespace ctdense::tools {

namespace {

std::string fixed(double value, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, value);
  return buf;
}

std::string pad(std::string text, std::size_t width) {
  if (text.size() < width) text.append(width - text.size(), ' ');
  return text;
}

std::string metrics_line(const EpochMetrics& m, int epochs) {
  return "epoch " + std::to_string(m.epoch) + "/" + std::to_string(epochs) + " train_loss=" + fixed(m.train_loss, 6) +
         " val_loss=" + fixed(m.val_loss, 6) + " val_accuracy=" + fixed(m.val_accuracy, 4);
}

struct TrainArgs {
  std::string config_path;
  std::map<std::string, std::string> flags;
};

int cmd_train(const TrainArgs& args, const std::map<std::string, CLI::Option*>& options, std::ostream& out) {
  RunConfig rc;
  if (!args.config_path.empty()) rc.apply_file(args.config_path);
  for (const auto& [key, option] : options) {
    if (option->count() > 0) rc.set(key, args.flags.at(key));
  }
  const TrainConfig config = rc.train_config();
  const auto records = load_reference_file(rc.reference_path(), rc.data_dir());
  const auto validation = rc.validation_count(records.size());
  DatasetSplit parts;
  if (validation == 0) {
    parts = DatasetSplit{records, records, config.seed};
  } else {
    parts = split(records, validation, config.seed);
  }
  out << "training " << config.model.name << " on " << parts.train.size() << " studies, validating on "
      << parts.validation.size() << "\n";

  auto model = DenseNet<float>::build(config.model, config.seed);
  VolumeImageSource source(config.preprocess, rc.cache_dir());
  MetricsLog log;
  train(model, parts, source, config, log, [&](const EpochMetrics& m) { out << metrics_line(m, config.epochs) << "\n"; });
  out << "final " << metrics_line(log.back(), config.epochs) << "\n";
  out << "metrics: " << config.metrics_path->string() << "\n";
  out << "checkpoint: " << final_checkpoint_path(*config.checkpoint_dir).string() << "\n";
  return kExitOk;
}

struct EvaluateArgs {
  std::string checkpoint;
  std::string data_dir = "data";
  std::string reference = "reference.csv";
  std::string output = "evaluation.csv";
  std::string cache_dir;
  std::size_t batch_size = 8;
  double threshold = 0.5;
};

int cmd_evaluate(const EvaluateArgs& args, std::ostream& out) {
  auto loaded = load_checkpoint(args.checkpoint);
  const auto preprocess = preprocess_from_metadata(loaded.metadata);
  if (preprocess.target_size != loaded.model.config().input_size) {
    throw CheckpointError("checkpoint preprocessing size " + std::to_string(preprocess.target_size) +
                          " does not match model input size " + std::to_string(loaded.model.config().input_size));
  }
  const auto records = load_reference_file(args.reference, args.data_dir);
  std::optional<std::filesystem::path> cache;
  if (!args.cache_dir.empty()) cache = args.cache_dir;
  VolumeImageSource source(preprocess, cache);
  const auto result = evaluate(loaded.model, records, source, args.threshold, args.batch_size);
  write_file(args.output, format_patient_csv(result.patients));
  out << "studies: " << result.patients.size() << "\n";
  out << "loss: " << fixed(result.loss, 6) << "\n";
  out << "accuracy: " << fixed(result.accuracy, 4) << "\n";
  out << "per-patient: " << args.output << "\n";
  return kExitOk;
}

struct PredictArgs {
  std::string checkpoint;
  std::string volume;
  double threshold = 0.5;
};

int cmd_predict(const PredictArgs& args, std::ostream& out) {
  auto loaded = load_checkpoint(args.checkpoint);
  const auto preprocess = preprocess_from_metadata(loaded.metadata);
  const auto image = ctdense::preprocess(read_mha_file(args.volume), preprocess,
                                         std::filesystem::path(args.volume).stem().string());
  const auto p = predict(loaded.model, image, args.threshold);
  out << "prob_covid=" << fixed(p.prob_covid, 4) << " prob_severe=" << fixed(p.prob_severe, 4)
      << " covid=" << p.covid << " severe=" << p.severe << "\n";
  return kExitOk;
}

int cmd_describe(const std::string& target, int outputs, std::ostream& out) {
  DenseNetConfig config;
  if (std::filesystem::is_regular_file(target)) {
    config = load_checkpoint(target).model.config();
  } else {
    config = DenseNetConfig::preset(target);
  }
  if (outputs > 0) config.num_outputs = outputs;
  out << describe_model(config);
  return kExitOk;
}

struct SynthArgs {
  SynthOptions options;
  std::string out_dir;
  bool uncompressed = false;
};

int cmd_synth(SynthArgs args, std::ostream& out) {
  args.options.compress = !args.uncompressed;
  const auto records = synth_generate(args.options, args.out_dir);
  int covid = 0;
  int severe = 0;
  for (const auto& r : records) {
    covid += r.label_covid;
    severe += r.label_severe;
  }
  out << "wrote " << records.size() << " volumes to " << (std::filesystem::path(args.out_dir) / "data").string()
      << " (covid=" << covid << " severe=" << severe << ")\n";
  out << "reference: " << (std::filesystem::path(args.out_dir) / "reference.csv").string() << "\n";
  return kExitOk;
}

struct CurvesArgs {
  std::string metrics;
  std::string out_dir = ".";
  int window = 1;
};

int cmd_curves(const CurvesArgs& args, std::ostream& out) {
  if (args.window < 1) throw ConfigError("window must be at least 1");
  const auto log = parse_metrics_csv(read_file(args.metrics));
  std::vector<double> train_loss, val_loss, val_accuracy;
  for (const auto& row : log) {
    train_loss.push_back(row.train_loss);
    val_loss.push_back(row.val_loss);
    val_accuracy.push_back(row.val_accuracy);
  }
  train_loss = moving_average(train_loss, args.window);
  val_loss = moving_average(val_loss, args.window);
  val_accuracy = moving_average(val_accuracy, args.window);

  std::string loss = "epoch,train_loss,val_loss\n";
  std::string accuracy = "epoch,val_accuracy\n";
  for (std::size_t i = 0; i < log.size(); ++i) {
    const auto epoch = std::to_string(log[i].epoch);
    loss += epoch + "," + format_double(train_loss[i]) + "," + format_double(val_loss[i]) + "\n";
    accuracy += epoch + "," + format_double(val_accuracy[i]) + "\n";
  }
  const std::filesystem::path dir = args.out_dir;
  std::filesystem::create_directories(dir);
  write_file(dir / "loss.csv", loss);
  write_file(dir / "accuracy.csv", accuracy);
  out << "wrote " << log.size() << " points to " << (dir / "loss.csv").string() << " and "
      << (dir / "accuracy.csv").string() << "\n";
  return kExitOk;
}

}  // namespace

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const DivergenceError*>(&e)) return kExitDivergence;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const ValidationError*>(&e)) return kExitData;
  if (dynamic_cast<const std::filesystem::filesystem_error*>(&e)) return kExitData;
  return kExitUsage;
}

std::string describe_model(const DenseNetConfig& config) {
  const auto plan = feature_map_plan(config);
  auto size = [](std::int64_t s) { return std::to_string(s) + "x" + std::to_string(s); };
  std::string out;
  out += "model: " + config.name + "\n";
  out += "input: " + std::to_string(config.input_channels) + "x" + size(config.input_size) + "\n";
  out += "growth_rate: " + std::to_string(config.growth_rate) + "\n";
  out += "block_layers:";
  for (int n : config.block_layers) out += " " + std::to_string(n);
  out += "\n";

  auto row = [&](const std::string& layer, const std::string& output, std::int64_t channels,
                 const std::string& detail) {
    std::string line = pad(layer, 22) + pad(output, 10) + pad(std::to_string(channels), 10) + detail;
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + "\n";
  };
  out += "layer                 output    channels  detail\n";
  std::int64_t previous_spatial = 0;
  for (const auto& r : plan) {
    if (r.stage == "conv") {
      row("Convolution", size(r.spatial), r.channels, "7x7 conv, stride 2");
    } else if (r.stage == "pool") {
      row("Pooling", size(r.spatial), r.channels, "3x3 max pool, stride 2");
    } else if (r.stage.rfind("block", 0) == 0) {
      const auto b = std::stoi(r.stage.substr(5));
      row("Dense Block (" + std::to_string(b) + ")", size(r.spatial), r.channels,
          "[1x1 conv, 3x3 conv] x " + std::to_string(config.block_layers[static_cast<std::size_t>(b - 1)]));
    } else if (r.stage.rfind("transition", 0) == 0) {
      row("Transition Layer (" + r.stage.substr(10) + ")", size(previous_spatial), r.channels, "1x1 conv");
      row("", size(r.spatial), r.channels, "2x2 average pool, stride 2");
    } else if (r.stage == "classifier") {
      row("Classification Layer", size(r.spatial), r.channels,
          size(previous_spatial) + " global average pool");
      row("", "", config.num_outputs, std::to_string(config.num_outputs) + "D fully-connected, sigmoid");
    }
    previous_spatial = r.spatial;
  }
  out += "layers: " + std::to_string(weighted_layer_count(config)) + "\n";
  out += "parameters: " + std::to_string(count_params(DenseNet<float>::build(config, 0))) + "\n";
  return out;
}

std::vector<double> moving_average(const std::vector<double>& values, int window) {
  if (window < 1) throw ConfigError("window must be at least 1");
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::size_t begin = i + 1 >= static_cast<std::size_t>(window) ? i + 1 - static_cast<std::size_t>(window) : 0;
    double acc = 0.0;
    for (std::size_t j = begin; j <= i; ++j) acc += values[j];
    out[i] = acc / static_cast<double>(i - begin + 1);
  }
  return out;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"DenseNet COVID-19 CT classifier", "ctdense"};
  app.require_subcommand(1);

  auto* train_cmd = app.add_subcommand("train", "Train a model on a labelled CT dataset");
  TrainArgs train_args;
  std::map<std::string, CLI::Option*> train_options;
  train_cmd->add_option("-c,--config", train_args.config_path, "key = value configuration file");
  for (const auto& k : config_schema()) {
    train_args.flags[k.key] = k.default_value;
  }
  for (const auto& k : config_schema()) {
    train_options[k.key] = train_cmd->add_option(k.flag, train_args.flags[k.key], k.help + " [" + k.key + "]");
  }

  auto* evaluate_cmd = app.add_subcommand("evaluate", "Score a checkpoint against a reference CSV");
  EvaluateArgs evaluate_args;
  evaluate_cmd->add_option("--checkpoint", evaluate_args.checkpoint, "checkpoint file")->required();
  evaluate_cmd->add_option("--data-dir", evaluate_args.data_dir, "directory holding <PatientID>.mha");
  evaluate_cmd->add_option("--reference", evaluate_args.reference, "reference label CSV");
  evaluate_cmd->add_option("--out", evaluate_args.output, "per-patient CSV to write");
  evaluate_cmd->add_option("--cache-dir", evaluate_args.cache_dir, "preprocessed image cache");
  evaluate_cmd->add_option("--batch-size", evaluate_args.batch_size, "studies per batch")->check(CLI::PositiveNumber);
  evaluate_cmd->add_option("--threshold", evaluate_args.threshold, "label threshold");

  auto* predict_cmd = app.add_subcommand("predict", "Classify one .mha volume");
  PredictArgs predict_args;
  predict_cmd->add_option("--checkpoint", predict_args.checkpoint, "checkpoint file")->required();
  predict_cmd->add_option("volume", predict_args.volume, ".mha volume")->required();
  predict_cmd->add_option("--threshold", predict_args.threshold, "label threshold");

  auto* describe_cmd = app.add_subcommand("describe", "Print the architecture table of a preset or checkpoint");
  std::string describe_target;
  int describe_outputs = 0;
  describe_cmd->add_option("target", describe_target, "densenet121, densenet169, reduced or a checkpoint path")
      ->required();
  describe_cmd->add_option("--outputs", describe_outputs, "override the classifier width");

  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic labelled dataset");
  SynthArgs synth_args;
  synth_cmd->add_option("--n", synth_args.options.n, "number of studies")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--seed", synth_args.options.seed, "generator seed");
  synth_cmd->add_option("--size", synth_args.options.image_size, "in-plane voxels per side");
  synth_cmd->add_option("--out-dir", synth_args.out_dir, "output directory")->required();
  synth_cmd->add_flag("--uncompressed", synth_args.uncompressed, "store raw payloads");

  auto* curves_cmd = app.add_subcommand("curves", "Turn a metrics CSV into loss and accuracy series");
  CurvesArgs curves_args;
  curves_cmd->add_option("metrics", curves_args.metrics, "metrics CSV written by train")->required();
  curves_cmd->add_option("--out-dir", curves_args.out_dir, "where loss.csv and accuracy.csv go");
  curves_cmd->add_option("--window", curves_args.window, "trailing moving-average window");

  std::vector<std::string> argv_storage{"ctdense"};
  argv_storage.insert(argv_storage.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_storage) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(train_args, train_options, out);
    if (evaluate_cmd->parsed()) return cmd_evaluate(evaluate_args, out);
    if (predict_cmd->parsed()) return cmd_predict(predict_args, out);
    if (describe_cmd->parsed()) return cmd_describe(describe_target, describe_outputs, out);
    if (synth_cmd->parsed()) return cmd_synth(synth_args, out);
    if (curves_cmd->parsed()) return cmd_curves(curves_args, out);
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << " (epoch " << e.epoch() << ", batch " << e.batch() << ")\n";
    return kExitDivergence;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return kExitUsage;
}

}  // namespace ctdense::tools
