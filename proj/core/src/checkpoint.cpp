#include "ctdense/checkpoint.hpp"

#include <cstring>

#include "ctdense/byte_io.hpp"
#include "ctdense/errors.hpp"
#include "ctdense/key_value.hpp"

namespace ctdense {

namespace {

constexpr std::size_t kMagicSize = sizeof(kCheckpointMagic) - 1;
constexpr std::uint32_t kMaxRank = 8;

const char* connectivity_name(Connectivity c) {
  return c == Connectivity::Dense ? "dense" : "chain";
}

int to_int(const std::string& key, const std::string& value) {
  auto v = parse_int(value);
  if (!v) throw ConfigError("model config: '" + key + "' is not an integer: '" + value + "'");
  return static_cast<int>(*v);
}

double to_double(const std::string& key, const std::string& value) {
  auto v = parse_double(value);
  if (!v) throw ConfigError("model config: '" + key + "' is not a number: '" + value + "'");
  return *v;
}

}  // namespace

std::string serialize_config(const DenseNetConfig& c) {
  std::string layers;
  for (std::size_t i = 0; i < c.block_layers.size(); ++i) {
    if (i) layers += ' ';
    layers += std::to_string(c.block_layers[i]);
  }
  std::string out;
  auto line = [&out](const std::string& key, const std::string& value) { out += "model." + key + " = " + value + "\n"; };
  line("name", c.name);
  line("growth_rate", std::to_string(c.growth_rate));
  line("init_features", std::to_string(c.init_features));
  line("block_layers", layers);
  line("compression", format_double(c.compression));
  line("bottleneck_width", std::to_string(c.bottleneck_width));
  line("num_outputs", std::to_string(c.num_outputs));
  line("input_channels", std::to_string(c.input_channels));
  line("input_size", std::to_string(c.input_size));
  line("connectivity", connectivity_name(c.connectivity));
  line("bn_eps", format_double(c.bn_eps));
  line("bn_momentum", format_double(c.bn_momentum));
  return out;
}

DenseNetConfig parse_config(std::string_view text) {
  DenseNetConfig c;
  for (const auto& kv : parse_key_value_text(text)) {
    if (kv.key.rfind("model.", 0) != 0) continue;
    const auto key = kv.key.substr(6);
    if (key == "name") {
      c.name = kv.value;
    } else if (key == "growth_rate") {
      c.growth_rate = to_int(key, kv.value);
    } else if (key == "init_features") {
      c.init_features = to_int(key, kv.value);
    } else if (key == "block_layers") {
      c.block_layers.clear();
      for (const auto& word : split_words(kv.value)) c.block_layers.push_back(to_int(key, word));
    } else if (key == "compression") {
      c.compression = to_double(key, kv.value);
    } else if (key == "bottleneck_width") {
      c.bottleneck_width = to_int(key, kv.value);
    } else if (key == "num_outputs") {
      c.num_outputs = to_int(key, kv.value);
    } else if (key == "input_channels") {
      c.input_channels = to_int(key, kv.value);
    } else if (key == "input_size") {
      c.input_size = to_int(key, kv.value);
    } else if (key == "connectivity") {
      if (kv.value == "dense") {
        c.connectivity = Connectivity::Dense;
      } else if (kv.value == "chain") {
        c.connectivity = Connectivity::Chain;
      } else {
        throw ConfigError("model config: unknown connectivity '" + kv.value + "'");
      }
    } else if (key == "bn_eps") {
      c.bn_eps = to_double(key, kv.value);
    } else if (key == "bn_momentum") {
      c.bn_momentum = to_double(key, kv.value);
    } else {
      throw ConfigError("model config: unknown key '" + kv.key + "'");
    }
  }
  c.validate();
  return c;
}

std::string encode_checkpoint(const DenseNet<float>& model, const CheckpointMetadata& metadata) {
  std::string config = serialize_config(model.config());
  for (const auto& [key, value] : metadata) config += key + " = " + value + "\n";

  std::string out(kCheckpointMagic, kMagicSize);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, config.size());
  out += config;
  const auto state = model.state();
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(state.size()));
  for (const auto& [name, tensor] : state) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.ndim()));
    for (auto d : tensor.shape()) put_le<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    put_le<std::uint64_t>(out, tensor.numel() * sizeof(float));
    for (float v : tensor.data()) put_f32(out, v);
  }
  return out;
}

LoadedCheckpoint decode_checkpoint(std::string_view bytes) {
  ByteReader in(bytes);
  auto truncated = [&in](const std::string& where) {
    return CheckpointError("checkpoint truncated while reading " + where + " at byte " + std::to_string(in.position()));
  };
  const auto magic = in.get_bytes(kMagicSize);
  if (!in.ok() || magic != std::string_view(kCheckpointMagic, kMagicSize)) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  const auto version = in.get<std::uint32_t>();
  if (!in.ok()) throw truncated("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const auto config_size = in.get<std::uint64_t>();
  const auto config_text = in.get_bytes(static_cast<std::size_t>(std::min<std::uint64_t>(config_size, bytes.size())));
  if (!in.ok() || config_text.size() != config_size) throw truncated("config");

  DenseNetConfig config;
  CheckpointMetadata metadata;
  try {
    config = parse_config(config_text);
    for (auto& kv : parse_key_value_text(config_text)) {
      if (kv.key.rfind("model.", 0) != 0) metadata.emplace_back(std::move(kv.key), std::move(kv.value));
    }
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config rejected: ") + e.what());
  }
  LoadedCheckpoint loaded{DenseNet<float>::build(config, 0), std::move(metadata)};

  const auto count = in.get<std::uint32_t>();
  if (!in.ok()) throw truncated("tensor count");
  auto state = loaded.model.state();
  if (count != state.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(count) + " tensors but the model has " +
                          std::to_string(state.size()));
  }
  for (auto& [name, tensor] : state) {
    const auto name_size = in.get<std::uint32_t>();
    const auto stored_name = in.get_bytes(name_size);
    if (!in.ok()) throw truncated("tensor name");
    if (stored_name != name) {
      throw CheckpointError("checkpoint tensor '" + std::string(stored_name) + "' where '" + name + "' was expected");
    }
    const auto rank = in.get<std::uint32_t>();
    if (!in.ok()) throw truncated(name);
    if (rank > kMaxRank) throw CheckpointError("tensor '" + name + "' has implausible rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::int64_t>(in.get<std::uint64_t>()));
    const auto byte_length = in.get<std::uint64_t>();
    if (!in.ok()) throw truncated(name);
    if (shape != tensor.shape() || byte_length != tensor.numel() * sizeof(float)) {
      throw CheckpointError("tensor '" + name + "' has shape " + shape_str(shape) + " but the model expects " +
                            shape_str(tensor.shape()));
    }
    auto values = tensor.mutable_data();
    for (auto& v : values) v = in.get_f32();
    if (!in.ok()) throw truncated(name);
  }
  if (in.remaining() != 0) throw CheckpointError("trailing bytes after the last tensor");
  return loaded;
}

void save_checkpoint(const std::filesystem::path& path, const DenseNet<float>& model,
                     const CheckpointMetadata& metadata) {
  write_file(path, encode_checkpoint(model, metadata));
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

}  // namespace ctdense
