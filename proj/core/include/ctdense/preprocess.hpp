#pragma once

// CT slice preprocessing: resample -> crop -> clip, producing a square image
// with values in [0, 1].

#include <cstdint>
#include <string>
#include <vector>

#include "ctdense/mha.hpp"

namespace ctdense {

// Row-major single-channel image; rows run along the volume's y axis.
struct Image {
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<float> pixels;

  static Image filled(std::int64_t height, std::int64_t width, float value);
  float at(std::int64_t row, std::int64_t col) const { return pixels[static_cast<std::size_t>(row * width + col)]; }
  float& at(std::int64_t row, std::int64_t col) { return pixels[static_cast<std::size_t>(row * width + col)]; }

  bool operator==(const Image&) const = default;
};

struct SlicePolicy {
  enum class Kind { MiddleAxial, Index, MaxMeanIntensity };
  Kind kind = Kind::MiddleAxial;
  std::int64_t index = 0;

  static SlicePolicy middle() { return {}; }
  static SlicePolicy at(std::int64_t i) { return {Kind::Index, i}; }
  static SlicePolicy brightest() { return {Kind::MaxMeanIntensity, 0}; }

  // "middle", "max-mean" or "index:<i>".
  static SlicePolicy parse(const std::string& text);
  std::string to_string() const;

  bool operator==(const SlicePolicy&) const = default;
};

struct CropPolicy {
  // 1.0 keeps everything (policy "none").
  double fraction = 1.0;

  static CropPolicy none() { return {}; }
  static CropPolicy center(double f) { return {f}; }
  bool is_none() const { return fraction == 1.0; }

  bool operator==(const CropPolicy&) const = default;
};

struct PreprocessConfig {
  std::int64_t target_size = 224;
  // Lung window in Hounsfield units.
  double clip_lo = -1000.0;
  double clip_hi = 400.0;
  CropPolicy crop;
  SlicePolicy slice;

  // Throws ConfigError: lo < hi, 0 < f <= 1, target_size >= 8.
  void validate() const;
  // Canonical one-line rendering; equal configs render identically.
  std::string to_string() const;
  // FNV-1a of to_string(), used to key cache files.
  std::uint64_t hash() const;

  bool operator==(const PreprocessConfig&) const = default;
};

struct ProcessedImage {
  Image image;
  std::string patient_id;
  PreprocessConfig provenance;

  bool operator==(const ProcessedImage&) const = default;
};

// Extracts axial slice z (all x, y) of a 3-D volume in Hounsfield units
// (the volume's rescale keys applied).
Image axial_slice(const Volume& volume, std::int64_t z);

// Throws BoundsError for an out-of-range index, ShapeError for non-3-D input.
// max-mean compares slices by mean HU.
Image select_slice(const Volume& volume, const SlicePolicy& policy);

// Bilinear, corner-aligned: output pixel i samples source coordinate
// i * (H - 1) / (target - 1), so the four corners map onto each other and the
// physical field of view is kept.
Image resample(const Image& image, std::int64_t target);

// Central floor(f*H) x floor(f*W) window at offset ((H-h)/2, (W-w)/2).
// Throws GeometryError when the window would be smaller than 8x8.
Image crop(const Image& image, const CropPolicy& policy);

// (clamp(x, lo, hi) - lo) / (hi - lo).
float clip_normalize(float value, double lo, double hi);
Image clip_normalize(const Image& image, double lo, double hi);

// Full pipeline; stage failures surface as PreprocessError naming the stage.
ProcessedImage preprocess(const Volume& volume, const PreprocessConfig& config, const std::string& patient_id = {});

}  // namespace ctdense
