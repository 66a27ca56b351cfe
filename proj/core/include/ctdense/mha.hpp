#pragma once

// MetaImage (.mha) single-file reader and writer.
//
// A file is a block of ASCII `Key = Value` lines ending with
// `ElementDataFile = LOCAL`, immediately followed by the binary voxel payload
// (optionally zlib-compressed). Keys are case-sensitive. Voxels are stored
// x-fastest: index = x + nx * (y + ny * z).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace ctdense {

enum class ElementType { UChar, Char, Short, UShort, Int, Float, Double };

std::size_t element_size(ElementType type);
// MET_UCHAR, MET_SHORT, ...
std::string element_type_name(ElementType type);
std::optional<ElementType> parse_element_type(std::string_view name);

struct MhaHeader {
  std::string object_type = "Image";
  int ndims = 3;
  std::vector<std::int64_t> dim_size;
  ElementType element_type = ElementType::Short;
  std::vector<double> element_spacing;
  std::vector<double> offset;
  // Row-major ndims x ndims.
  std::vector<double> transform_matrix;
  bool compressed = false;
  // Keys this reader does not interpret, in file order, verbatim.
  std::vector<std::pair<std::string, std::string>> raw_fields;

  // Header for an uncompressed volume with unit spacing, zero offset and an
  // identity transform.
  static MhaHeader make(std::vector<std::int64_t> dims, ElementType type);

  std::int64_t voxel_count() const;
  // Value of a raw field, if present.
  std::optional<std::string> field(std::string_view key) const;

  bool operator==(const MhaHeader&) const = default;
};

class Volume {
 public:
  Volume() = default;
  // `payload` holds voxel_count() elements of header.element_type, little-endian.
  Volume(MhaHeader header, std::string payload);

  // Converts each value to the header's element type (integers are rounded half
  // to even and saturated).
  static Volume from_values(MhaHeader header, std::span<const double> values);

  const MhaHeader& header() const { return header_; }
  MhaHeader& header() { return header_; }
  const std::string& payload() const { return payload_; }

  std::int64_t voxel_count() const { return header_.voxel_count(); }
  std::int64_t extent(std::size_t axis) const;
  double value(std::size_t index) const;
  std::vector<double> values() const;

  bool operator==(const Volume&) const = default;

 private:
  MhaHeader header_;
  std::string payload_;
};

// Throws MhaError: MalformedHeader naming the missing/bad key, Truncated with
// expected and actual byte counts, UnsupportedType, UnsupportedVariant for
// external data files or non-binary payloads, Compression for bad zlib data.
Volume read_mha(std::string_view bytes);
Volume read_mha_file(const std::filesystem::path& path);

// Keys are written in a fixed order with ElementDataFile last. The header's
// `compressed` flag is ignored in favor of `compress`.
std::string write_mha(const Volume& volume, bool compress);
void write_mha_file(const std::filesystem::path& path, const Volume& volume, bool compress);

struct Rescale {
  double slope = 1.0;
  double intercept = 0.0;
  double apply(double stored) const { return stored * slope + intercept; }
};

// RescaleSlope / RescaleIntercept from the raw fields; identity when absent.
Rescale hounsfield_rescale(const MhaHeader& header);

// MET_FLOAT copy with the Hounsfield rescale applied; the rescale keys are
// dropped from the result since they no longer apply.
Volume to_hounsfield(const Volume& volume);

}  // namespace ctdense
