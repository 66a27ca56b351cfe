#include "ctdense_tools/run_config.hpp"

#include "ctdense/byte_io.hpp"
#include "ctdense/errors.hpp"
#include "ctdense/key_value.hpp"

namespace ctdense::tools {

namespace {

long long as_int(const std::string& key, const std::string& value) {
  const auto v = parse_int(value);
  if (!v) throw ConfigError(key + ": expected an integer, got '" + value + "'");
  return *v;
}

double as_double(const std::string& key, const std::string& value) {
  const auto v = parse_double(value);
  if (!v) throw ConfigError(key + ": expected a number, got '" + value + "'");
  return *v;
}

}  // namespace

const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> schema{
      {"model.preset", "densenet121", "--preset", "densenet121, densenet169 or reduced"},
      {"train.epochs", "100", "--epochs", "training epochs"},
      {"train.batch_size", "8", "--batch-size", "studies per batch"},
      {"train.seed", "0", "--seed", "seed for initialization, split and shuffling"},
      {"train.lr", "0.01", "--lr", "Adam learning rate"},
      {"train.validation_count", "auto", "--validation-count",
       "validation studies; auto = 3% of the records, 0 = validate on the training set"},
      {"train.checkpoint_every", "10", "--checkpoint-every", "epochs between checkpoints"},
      {"train.threshold", "0.5", "--threshold", "probability at or above which a label is 1"},
      {"preprocess.target_size", "auto", "--target-size", "image side; auto = model input size"},
      {"preprocess.clip_lo", "-1000", "--clip-lo", "lower HU bound of the window"},
      {"preprocess.clip_hi", "400", "--clip-hi", "upper HU bound of the window"},
      {"preprocess.crop", "1", "--crop", "central crop fraction; 1 = no crop"},
      {"preprocess.slice", "middle", "--slice", "middle, max-mean or index:<i>"},
      {"data.dir", "data", "--data-dir", "directory holding <PatientID>.mha"},
      {"data.reference", "reference.csv", "--reference", "reference label CSV"},
      {"data.cache_dir", "", "--cache-dir", "preprocessed image cache; empty = none"},
      {"output.dir", "run", "--out-dir", "metrics.csv and checkpoints go here"},
  };
  return schema;
}

RunConfig::RunConfig() {
  for (const auto& k : config_schema()) values_[k.key] = k.default_value;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown configuration key '" + key + "'");
  it->second = value;
}

void RunConfig::apply_text(std::string_view text) {
  for (const auto& line : parse_key_value_text(text)) {
    if (!values_.count(line.key)) {
      throw ConfigError("line " + std::to_string(line.line) + ": unknown configuration key '" + line.key + "'");
    }
    values_[line.key] = line.value;
  }
}

void RunConfig::apply_file(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  try {
    apply_text(text);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

const std::string& RunConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown configuration key '" + key + "'");
  return it->second;
}

PreprocessConfig preprocess_from_values(const std::map<std::string, std::string>& values, std::int64_t input_size) {
  PreprocessConfig p;
  const auto& size = values.at("preprocess.target_size");
  p.target_size = size == "auto" ? input_size : as_int("preprocess.target_size", size);
  p.clip_lo = as_double("preprocess.clip_lo", values.at("preprocess.clip_lo"));
  p.clip_hi = as_double("preprocess.clip_hi", values.at("preprocess.clip_hi"));
  p.crop = CropPolicy::center(as_double("preprocess.crop", values.at("preprocess.crop")));
  p.slice = SlicePolicy::parse(values.at("preprocess.slice"));
  p.validate();
  return p;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig c;
  c.model = DenseNetConfig::preset(get("model.preset"));
  c.epochs = static_cast<int>(as_int("train.epochs", get("train.epochs")));
  const auto batch = as_int("train.batch_size", get("train.batch_size"));
  if (batch < 1) throw ConfigError("batch_size must be at least 1");
  c.batch_size = static_cast<std::size_t>(batch);
  const auto seed = as_int("train.seed", get("train.seed"));
  if (seed < 0) throw ConfigError("seed must be non-negative");
  c.seed = static_cast<std::uint64_t>(seed);
  c.adam.lr = as_double("train.lr", get("train.lr"));
  c.checkpoint_every = static_cast<int>(as_int("train.checkpoint_every", get("train.checkpoint_every")));
  c.threshold = as_double("train.threshold", get("train.threshold"));
  c.preprocess = preprocess_from_values(values_, c.model.input_size);
  c.checkpoint_dir = output_dir() / "checkpoints";
  c.metrics_path = output_dir() / "metrics.csv";
  c.validate();
  return c;
}

std::size_t RunConfig::validation_count(std::size_t records) const {
  const auto& v = get("train.validation_count");
  if (v == "auto") return std::max<std::size_t>(1, records * 3 / 100);
  const auto n = as_int("train.validation_count", v);
  if (n < 0) throw ConfigError("validation_count must be non-negative");
  return static_cast<std::size_t>(n);
}

std::optional<std::filesystem::path> RunConfig::cache_dir() const {
  const auto& v = get("data.cache_dir");
  if (v.empty()) return std::nullopt;
  return std::filesystem::path(v);
}

}  // namespace ctdense::tools
