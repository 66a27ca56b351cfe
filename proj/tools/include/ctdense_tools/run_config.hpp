#pragma once

// Settings for `ctdense train`, merged from defaults, a `key = value` file
// and command-line flags, in increasing order of precedence.

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ctdense/train.hpp"

namespace ctdense::tools {

struct ConfigKey {
  std::string key;
  std::string default_value;
  std::string flag;
  std::string help;
};

// Every key the configuration accepts.
const std::vector<ConfigKey>& config_schema();

class RunConfig {
 public:
  RunConfig();

  // Throws ConfigError for an unknown key (naming the line for file input).
  void set(const std::string& key, const std::string& value);
  void apply_text(std::string_view text);
  void apply_file(const std::filesystem::path& path);

  const std::string& get(const std::string& key) const;
  const std::map<std::string, std::string>& values() const { return values_; }

  // Typed view; throws ConfigError on unparsable or invalid values.
  TrainConfig train_config() const;
  // Resolves "auto" against the number of records; 0 means train = validation.
  std::size_t validation_count(std::size_t records) const;
  std::filesystem::path data_dir() const { return get("data.dir"); }
  std::filesystem::path reference_path() const { return get("data.reference"); }
  std::filesystem::path output_dir() const { return get("output.dir"); }
  std::optional<std::filesystem::path> cache_dir() const;

 private:
  std::map<std::string, std::string> values_;
};

PreprocessConfig preprocess_from_values(const std::map<std::string, std::string>& values, std::int64_t input_size);

}  // namespace ctdense::tools
