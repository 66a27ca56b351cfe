#include "ctdense/mha.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>

#include "ctdense/byte_io.hpp"
#include "ctdense/errors.hpp"
#include "ctdense/key_value.hpp"

namespace ctdense {

namespace {

constexpr int kMaxDims = 16;
// Refuse payloads above 16 GiB outright; fuzzed headers love huge DimSize.
constexpr std::uint64_t kMaxPayloadBytes = 1ull << 34;
// DEFLATE cannot expand better than ~1032:1.
constexpr std::uint64_t kMaxDeflateRatio = 1032;

struct TypeInfo {
  ElementType type;
  const char* name;
  std::size_t size;
};

constexpr TypeInfo kTypes[] = {
    {ElementType::UChar, "MET_UCHAR", 1}, {ElementType::Char, "MET_CHAR", 1},   {ElementType::Short, "MET_SHORT", 2},
    {ElementType::UShort, "MET_USHORT", 2}, {ElementType::Int, "MET_INT", 4}, {ElementType::Float, "MET_FLOAT", 4},
    {ElementType::Double, "MET_DOUBLE", 8},
};

const TypeInfo& info(ElementType type) {
  for (const auto& t : kTypes) {
    if (t.type == type) return t;
  }
  throw MhaError(MhaError::Kind::UnsupportedType, "unknown element type");
}

MhaError malformed(const std::string& what) {
  return MhaError(MhaError::Kind::MalformedHeader, "malformed MetaImage header: " + what);
}

bool parse_bool(const std::string& key, const std::string& value) {
  std::string lower(value);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "true" || lower == "1") return true;
  if (lower == "false" || lower == "0") return false;
  throw malformed("'" + key + "' must be True or False, got '" + value + "'");
}

std::vector<double> parse_doubles(const std::string& key, const std::string& value) {
  std::vector<double> out;
  for (const auto& word : split_words(value)) {
    auto v = parse_double(word);
    if (!v || !std::isfinite(*v)) throw malformed("'" + key + "' has a non-numeric entry '" + word + "'");
    out.push_back(*v);
  }
  return out;
}

std::string join_doubles(const std::vector<double>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ' ';
    out += format_double(values[i]);
  }
  return out;
}

std::string inflate_payload(std::string_view compressed, std::uint64_t expected) {
  if (expected > (compressed.size() + 64) * kMaxDeflateRatio) {
    throw MhaError(MhaError::Kind::Truncated, "compressed payload of " + std::to_string(compressed.size()) +
                                                  " bytes cannot hold the " + std::to_string(expected) +
                                                  " bytes the header declares");
  }
  std::string out(static_cast<std::size_t>(expected), '\0');
  z_stream stream{};
  // 15 + 32: accept zlib or gzip framing.
  if (inflateInit2(&stream, 15 + 32) != Z_OK) throw MhaError(MhaError::Kind::Compression, "zlib initialization failed");
  stream.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(compressed.data()));
  stream.avail_in = static_cast<uInt>(std::min<std::size_t>(compressed.size(), std::numeric_limits<uInt>::max()));
  stream.next_out = reinterpret_cast<Bytef*>(out.data());
  stream.avail_out = static_cast<uInt>(out.size());
  const int rc = inflate(&stream, Z_FINISH);
  const auto produced = stream.total_out;
  inflateEnd(&stream);
  if (rc == Z_STREAM_END && produced == expected) return out;
  if (rc == Z_STREAM_END || rc == Z_BUF_ERROR) {
    throw MhaError(MhaError::Kind::Truncated, "payload truncated: expected " + std::to_string(expected) +
                                                  " bytes after decompression, got " + std::to_string(produced));
  }
  throw MhaError(MhaError::Kind::Compression, "corrupt compressed payload (zlib error " + std::to_string(rc) + ")");
}

std::string deflate_payload(std::string_view raw) {
  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::string out(bound, '\0');
  const int rc = compress2(reinterpret_cast<Bytef*>(out.data()), &bound, reinterpret_cast<const Bytef*>(raw.data()),
                           static_cast<uLong>(raw.size()), Z_DEFAULT_COMPRESSION);
  if (rc != Z_OK) throw MhaError(MhaError::Kind::Compression, "zlib compression failed");
  out.resize(bound);
  return out;
}

void swap_bytes(std::string& payload, std::size_t width) {
  if (width == 1) return;
  for (std::size_t i = 0; i + width <= payload.size(); i += width) std::reverse(payload.begin() + i, payload.begin() + i + width);
}

template <typename U>
U load_le(const char* p) {
  U v{};
  std::memcpy(&v, p, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(U));
  }
  return v;
}

template <typename U>
void store_le(char* p, U v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(U));
  }
  std::memcpy(p, &v, sizeof(U));
}

template <typename I>
I saturate(double v) {
  if (std::isnan(v)) return 0;
  const double r = std::nearbyint(v);
  if (r <= static_cast<double>(std::numeric_limits<I>::min())) return std::numeric_limits<I>::min();
  if (r >= static_cast<double>(std::numeric_limits<I>::max())) return std::numeric_limits<I>::max();
  return static_cast<I>(r);
}

}  // namespace

std::size_t element_size(ElementType type) {
  return info(type).size;
}

std::string element_type_name(ElementType type) {
  return info(type).name;
}

std::optional<ElementType> parse_element_type(std::string_view name) {
  for (const auto& t : kTypes) {
    if (name == t.name) return t.type;
  }
  return std::nullopt;
}

// ---- MhaHeader / Volume ---------------------------------------------------------

MhaHeader MhaHeader::make(std::vector<std::int64_t> dims, ElementType type) {
  MhaHeader h;
  h.ndims = static_cast<int>(dims.size());
  h.dim_size = std::move(dims);
  h.element_type = type;
  h.element_spacing.assign(h.dim_size.size(), 1.0);
  h.offset.assign(h.dim_size.size(), 0.0);
  h.transform_matrix.assign(h.dim_size.size() * h.dim_size.size(), 0.0);
  for (std::size_t i = 0; i < h.dim_size.size(); ++i) h.transform_matrix[i * h.dim_size.size() + i] = 1.0;
  return h;
}

std::int64_t MhaHeader::voxel_count() const {
  std::int64_t n = 1;
  for (auto d : dim_size) n *= d;
  return n;
}

std::optional<std::string> MhaHeader::field(std::string_view key) const {
  for (const auto& [k, v] : raw_fields) {
    if (k == key) return v;
  }
  return std::nullopt;
}

Volume::Volume(MhaHeader header, std::string payload) : header_(std::move(header)), payload_(std::move(payload)) {
  const auto expected = static_cast<std::size_t>(header_.voxel_count()) * element_size(header_.element_type);
  if (payload_.size() != expected) {
    throw ShapeError("volume payload has " + std::to_string(payload_.size()) + " bytes, header needs " +
                     std::to_string(expected));
  }
}

Volume Volume::from_values(MhaHeader header, std::span<const double> values) {
  const auto count = static_cast<std::size_t>(header.voxel_count());
  if (values.size() != count) {
    throw ShapeError("volume needs " + std::to_string(count) + " values, got " + std::to_string(values.size()));
  }
  const std::size_t width = element_size(header.element_type);
  std::string payload(count * width, '\0');
  for (std::size_t i = 0; i < count; ++i) {
    char* p = payload.data() + i * width;
    const double v = values[i];
    switch (header.element_type) {
      case ElementType::UChar: store_le(p, saturate<std::uint8_t>(v)); break;
      case ElementType::Char: store_le(p, saturate<std::int8_t>(v)); break;
      case ElementType::Short: store_le(p, saturate<std::int16_t>(v)); break;
      case ElementType::UShort: store_le(p, saturate<std::uint16_t>(v)); break;
      case ElementType::Int: store_le(p, saturate<std::int32_t>(v)); break;
      case ElementType::Float: store_le(p, static_cast<float>(v)); break;
      case ElementType::Double: store_le(p, v); break;
    }
  }
  return Volume(std::move(header), std::move(payload));
}

std::int64_t Volume::extent(std::size_t axis) const {
  if (axis >= header_.dim_size.size()) return 1;
  return header_.dim_size[axis];
}

double Volume::value(std::size_t index) const {
  const char* p = payload_.data() + index * element_size(header_.element_type);
  switch (header_.element_type) {
    case ElementType::UChar: return load_le<std::uint8_t>(p);
    case ElementType::Char: return load_le<std::int8_t>(p);
    case ElementType::Short: return load_le<std::int16_t>(p);
    case ElementType::UShort: return load_le<std::uint16_t>(p);
    case ElementType::Int: return load_le<std::int32_t>(p);
    case ElementType::Float: return load_le<float>(p);
    case ElementType::Double: return load_le<double>(p);
  }
  return 0.0;
}

std::vector<double> Volume::values() const {
  std::vector<double> out(static_cast<std::size_t>(voxel_count()));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = value(i);
  return out;
}

// ---- reading --------------------------------------------------------------------

Volume read_mha(std::string_view bytes) {
  MhaHeader header;
  header.ndims = 0;
  bool have_object_type = false;
  bool have_ndims = false;
  bool have_dims = false;
  bool have_type = false;
  bool have_data_file = false;
  bool msb = false;
  std::optional<std::uint64_t> compressed_size;
  std::size_t pos = 0;
  std::size_t line_no = 0;

  while (!have_data_file) {
    if (pos >= bytes.size()) throw malformed("missing required key 'ElementDataFile'");
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string_view::npos) throw malformed("missing required key 'ElementDataFile'");
    const auto line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    auto kv = split_key_value(line);
    if (!kv) throw malformed("line " + std::to_string(line_no) + " is not 'Key = Value'");
    auto& [key, value] = *kv;

    if (key == "ObjectType") {
      header.object_type = value;
      have_object_type = true;
    } else if (key == "NDims") {
      auto n = parse_int(value);
      if (!n || *n < 1 || *n > kMaxDims) throw malformed("'NDims' must be an integer in [1, 16], got '" + value + "'");
      header.ndims = static_cast<int>(*n);
      have_ndims = true;
    } else if (key == "DimSize") {
      header.dim_size.clear();
      for (const auto& word : split_words(value)) {
        auto d = parse_int(word);
        if (!d || *d < 1) throw malformed("'DimSize' entries must be positive integers, got '" + word + "'");
        header.dim_size.push_back(*d);
      }
      have_dims = true;
    } else if (key == "ElementType") {
      auto type = parse_element_type(value);
      if (!type) throw MhaError(MhaError::Kind::UnsupportedType, "unsupported ElementType '" + value + "'");
      header.element_type = *type;
      have_type = true;
    } else if (key == "ElementSpacing") {
      header.element_spacing = parse_doubles(key, value);
    } else if (key == "Offset" || key == "Origin" || key == "Position") {
      header.offset = parse_doubles(key, value);
    } else if (key == "TransformMatrix" || key == "Rotation" || key == "Orientation") {
      header.transform_matrix = parse_doubles(key, value);
    } else if (key == "CompressedData") {
      header.compressed = parse_bool(key, value);
    } else if (key == "CompressedDataSize") {
      auto n = parse_int(value);
      if (!n || *n < 0) throw malformed("'CompressedDataSize' must be a non-negative integer");
      compressed_size = static_cast<std::uint64_t>(*n);
    } else if (key == "BinaryData") {
      if (!parse_bool(key, value)) {
        throw MhaError(MhaError::Kind::UnsupportedVariant, "ASCII voxel data (BinaryData = False) is not supported");
      }
    } else if (key == "BinaryDataByteOrderMSB" || key == "ElementByteOrderMSB") {
      msb = parse_bool(key, value);
    } else if (key == "ElementNumberOfChannels") {
      if (trim(value) != "1") {
        throw MhaError(MhaError::Kind::UnsupportedVariant, "multi-channel voxels are not supported");
      }
      header.raw_fields.emplace_back(key, value);
    } else if (key == "ElementDataFile") {
      if (value != "LOCAL") {
        throw MhaError(MhaError::Kind::UnsupportedVariant,
                       "external voxel file '" + value + "' is not supported; only ElementDataFile = LOCAL");
      }
      have_data_file = true;
    } else {
      header.raw_fields.emplace_back(key, value);
    }
  }

  if (!have_object_type) throw malformed("missing required key 'ObjectType'");
  if (!have_ndims) throw malformed("missing required key 'NDims'");
  if (!have_dims) throw malformed("missing required key 'DimSize'");
  if (!have_type) throw malformed("missing required key 'ElementType'");

  const auto n = static_cast<std::size_t>(header.ndims);
  if (header.dim_size.size() != n) {
    throw malformed("'DimSize' has " + std::to_string(header.dim_size.size()) + " entries but NDims is " +
                    std::to_string(n));
  }
  if (header.element_spacing.empty()) header.element_spacing.assign(n, 1.0);
  if (header.offset.empty()) header.offset.assign(n, 0.0);
  if (header.transform_matrix.empty()) {
    header.transform_matrix.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) header.transform_matrix[i * n + i] = 1.0;
  }
  if (header.element_spacing.size() != n) throw malformed("'ElementSpacing' length does not match NDims");
  if (header.offset.size() != n) throw malformed("'Offset' length does not match NDims");
  if (header.transform_matrix.size() != n * n) throw malformed("'TransformMatrix' needs NDims x NDims entries");

  const std::uint64_t width = element_size(header.element_type);
  std::uint64_t expected = width;
  for (auto d : header.dim_size) {
    if (static_cast<std::uint64_t>(d) > kMaxPayloadBytes / expected) {
      throw malformed("'DimSize' describes more than " + std::to_string(kMaxPayloadBytes) + " bytes of voxels");
    }
    expected *= static_cast<std::uint64_t>(d);
  }

  auto payload_view = bytes.substr(pos);
  std::string payload;
  if (header.compressed) {
    if (compressed_size) {
      if (*compressed_size > payload_view.size()) {
        throw MhaError(MhaError::Kind::Truncated, "payload truncated: expected " + std::to_string(*compressed_size) +
                                                      " compressed bytes, got " + std::to_string(payload_view.size()));
      }
      payload_view = payload_view.substr(0, static_cast<std::size_t>(*compressed_size));
    }
    payload = inflate_payload(payload_view, expected);
  } else {
    if (payload_view.size() < expected) {
      throw MhaError(MhaError::Kind::Truncated, "payload truncated: expected " + std::to_string(expected) +
                                                    " bytes, got " + std::to_string(payload_view.size()));
    }
    payload.assign(payload_view.substr(0, static_cast<std::size_t>(expected)));
  }
  if (msb) swap_bytes(payload, static_cast<std::size_t>(width));
  return Volume(std::move(header), std::move(payload));
}

Volume read_mha_file(const std::filesystem::path& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const DataError& e) {
    throw MhaError(MhaError::Kind::Io, e.what());
  }
  return read_mha(bytes);
}

// ---- writing --------------------------------------------------------------------

std::string write_mha(const Volume& volume, bool compress) {
  const auto& h = volume.header();
  std::string dims;
  for (std::size_t i = 0; i < h.dim_size.size(); ++i) {
    if (i) dims += ' ';
    dims += std::to_string(h.dim_size[i]);
  }
  std::string body = compress ? deflate_payload(volume.payload()) : std::string();

  std::string out;
  auto line = [&out](std::string_view key, const std::string& value) {
    out += key;
    out += " = ";
    out += value;
    out += '\n';
  };
  line("ObjectType", h.object_type);
  line("NDims", std::to_string(h.ndims));
  line("DimSize", dims);
  line("ElementType", element_type_name(h.element_type));
  line("ElementSpacing", join_doubles(h.element_spacing));
  line("Offset", join_doubles(h.offset));
  line("TransformMatrix", join_doubles(h.transform_matrix));
  line("CompressedData", compress ? "True" : "False");
  if (compress) line("CompressedDataSize", std::to_string(body.size()));
  line("BinaryData", "True");
  line("BinaryDataByteOrderMSB", "False");
  for (const auto& [key, value] : h.raw_fields) line(key, value);
  line("ElementDataFile", "LOCAL");
  out += compress ? body : volume.payload();
  return out;
}

void write_mha_file(const std::filesystem::path& path, const Volume& volume, bool compress) {
  write_file(path, write_mha(volume, compress));
}

Rescale hounsfield_rescale(const MhaHeader& header) {
  Rescale r;
  if (auto v = header.field("RescaleSlope")) {
    if (auto d = parse_double(*v)) r.slope = *d;
  }
  if (auto v = header.field("RescaleIntercept")) {
    if (auto d = parse_double(*v)) r.intercept = *d;
  }
  return r;
}

Volume to_hounsfield(const Volume& volume) {
  const Rescale rescale = hounsfield_rescale(volume.header());
  MhaHeader header = volume.header();
  std::erase_if(header.raw_fields,
                [](const auto& kv) { return kv.first == "RescaleSlope" || kv.first == "RescaleIntercept"; });
  header.element_type = ElementType::Float;
  header.compressed = false;
  std::vector<double> values = volume.values();
  for (auto& v : values) v = rescale.apply(v);
  return Volume::from_values(std::move(header), values);
}

}  // namespace ctdense
