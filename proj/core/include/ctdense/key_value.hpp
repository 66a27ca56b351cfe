#pragma once

// The `Key = Value` line grammar shared by MetaImage headers, run
// configuration files and checkpoint metadata.

#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace ctdense {

struct KeyValueLine {
  std::string key;
  std::string value;
  std::size_t line = 0;  // 1-based
};

// Splits "Key = Value" (whitespace around both tolerated, trailing CR
// stripped). Returns nullopt when there is no '=' or the key is empty.
std::optional<std::pair<std::string, std::string>> split_key_value(std::string_view line);

std::string_view trim(std::string_view text);

// Parses a whole configuration text. Blank lines and lines starting with '#'
// are skipped; any other line without '=' throws ConfigError naming it.
std::vector<KeyValueLine> parse_key_value_text(std::string_view text);

// Shortest representation that parses back to the same double.
std::string format_double(double value);

// Strict full-string numeric parsing; nullopt on any trailing garbage.
std::optional<double> parse_double(std::string_view text);
std::optional<long long> parse_int(std::string_view text);

// Whitespace-separated tokens.
std::vector<std::string> split_words(std::string_view text);

}  // namespace ctdense
