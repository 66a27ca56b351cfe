#include "ctdense/preprocess.hpp"

#include <algorithm>
#include <cmath>

#include "ctdense/errors.hpp"
#include "ctdense/key_value.hpp"

namespace ctdense {

namespace {

constexpr std::int64_t kMinExtent = 8;

double lerp(double a, double b, double t) {
  return t == 0.0 ? a : a + (b - a) * t;
}

}  // namespace

Image Image::filled(std::int64_t height, std::int64_t width, float value) {
  return Image{height, width, std::vector<float>(static_cast<std::size_t>(height * width), value)};
}

SlicePolicy SlicePolicy::parse(const std::string& text) {
  if (text == "middle") return middle();
  if (text == "max-mean") return brightest();
  if (text.rfind("index:", 0) == 0) {
    auto i = parse_int(text.substr(6));
    if (!i || *i < 0) throw ConfigError("slice policy 'index:' needs a non-negative integer, got '" + text + "'");
    return at(*i);
  }
  throw ConfigError("unknown slice policy '" + text + "' (expected middle, max-mean or index:<i>)");
}

std::string SlicePolicy::to_string() const {
  switch (kind) {
    case Kind::MiddleAxial: return "middle";
    case Kind::MaxMeanIntensity: return "max-mean";
    case Kind::Index: return "index:" + std::to_string(index);
  }
  return "middle";
}

void PreprocessConfig::validate() const {
  if (!(clip_lo < clip_hi)) throw ConfigError("clip window needs lo < hi");
  if (!(crop.fraction > 0.0 && crop.fraction <= 1.0)) throw ConfigError("crop fraction must lie in (0, 1]");
  if (target_size < kMinExtent) throw ConfigError("target_size must be at least 8");
}

std::string PreprocessConfig::to_string() const {
  return "target_size=" + std::to_string(target_size) + " clip=" + format_double(clip_lo) + "," +
         format_double(clip_hi) + " crop=" + format_double(crop.fraction) + " slice=" + slice.to_string();
}

std::uint64_t PreprocessConfig::hash() const {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : to_string()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

Image axial_slice(const Volume& volume, std::int64_t z) {
  const auto nx = volume.extent(0);
  const auto ny = volume.extent(1);
  Image out{ny, nx, std::vector<float>(static_cast<std::size_t>(nx * ny))};
  const auto base = static_cast<std::size_t>(z * nx * ny);
  const Rescale rescale = hounsfield_rescale(volume.header());
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    out.pixels[i] = static_cast<float>(rescale.apply(volume.value(base + i)));
  }
  return out;
}

Image select_slice(const Volume& volume, const SlicePolicy& policy) {
  if (volume.header().ndims != 3) {
    throw ShapeError("select_slice: expected a 3-D volume, got " + std::to_string(volume.header().ndims) + " dims");
  }
  const auto depth = volume.extent(2);
  if (depth < 1) throw ShapeError("select_slice: volume has no slices");
  switch (policy.kind) {
    case SlicePolicy::Kind::MiddleAxial:
      return axial_slice(volume, depth / 2);
    case SlicePolicy::Kind::Index:
      if (policy.index < 0 || policy.index >= depth) {
        throw BoundsError("slice index " + std::to_string(policy.index) + " out of range for depth " +
                          std::to_string(depth));
      }
      return axial_slice(volume, policy.index);
    case SlicePolicy::Kind::MaxMeanIntensity: {
      const auto plane = volume.extent(0) * volume.extent(1);
      const Rescale rescale = hounsfield_rescale(volume.header());
      std::int64_t best = 0;
      double best_mean = 0.0;
      for (std::int64_t z = 0; z < depth; ++z) {
        double acc = 0.0;
        for (std::int64_t i = 0; i < plane; ++i) acc += volume.value(static_cast<std::size_t>(z * plane + i));
        const double mean = rescale.apply(acc / static_cast<double>(plane));
        if (z == 0 || mean > best_mean) {
          best = z;
          best_mean = mean;
        }
      }
      return axial_slice(volume, best);
    }
  }
  return axial_slice(volume, depth / 2);
}

Image resample(const Image& image, std::int64_t target) {
  if (image.height < 2 || image.width < 2) {
    throw GeometryError("resample: source must be at least 2x2, got " + std::to_string(image.height) + "x" +
                        std::to_string(image.width));
  }
  if (target < 2) throw GeometryError("resample: target must be at least 2");
  Image out{target, target, std::vector<float>(static_cast<std::size_t>(target * target))};

  // Source coordinate of each output row/column, shared by every pixel.
  auto axis = [target](std::int64_t source) {
    std::vector<std::pair<std::int64_t, double>> taps(static_cast<std::size_t>(target));
    const double scale = static_cast<double>(source - 1) / static_cast<double>(target - 1);
    for (std::int64_t i = 0; i < target; ++i) {
      const double pos = static_cast<double>(i) * scale;
      auto lo = static_cast<std::int64_t>(std::floor(pos));
      lo = std::clamp<std::int64_t>(lo, 0, source - 1);
      taps[static_cast<std::size_t>(i)] = {lo, pos - static_cast<double>(lo)};
    }
    return taps;
  };
  const auto rows = axis(image.height);
  const auto cols = axis(image.width);
  for (std::int64_t r = 0; r < target; ++r) {
    const auto [r0, fr] = rows[static_cast<std::size_t>(r)];
    const auto r1 = std::min(r0 + 1, image.height - 1);
    for (std::int64_t c = 0; c < target; ++c) {
      const auto [c0, fc] = cols[static_cast<std::size_t>(c)];
      const auto c1 = std::min(c0 + 1, image.width - 1);
      // a + (b - a) * t reproduces constants exactly.
      const double top = lerp(image.at(r0, c0), image.at(r0, c1), fc);
      const double bottom = lerp(image.at(r1, c0), image.at(r1, c1), fc);
      out.at(r, c) = static_cast<float>(lerp(top, bottom, fr));
    }
  }
  return out;
}

Image crop(const Image& image, const CropPolicy& policy) {
  if (policy.is_none()) return image;
  if (!(policy.fraction > 0.0 && policy.fraction <= 1.0)) throw ConfigError("crop fraction must lie in (0, 1]");
  const auto h = static_cast<std::int64_t>(std::floor(policy.fraction * static_cast<double>(image.height)));
  const auto w = static_cast<std::int64_t>(std::floor(policy.fraction * static_cast<double>(image.width)));
  if (h < kMinExtent || w < kMinExtent) {
    throw GeometryError("crop window " + std::to_string(h) + "x" + std::to_string(w) + " is smaller than 8x8");
  }
  const auto top = (image.height - h) / 2;
  const auto left = (image.width - w) / 2;
  Image out{h, w, std::vector<float>(static_cast<std::size_t>(h * w))};
  for (std::int64_t r = 0; r < h; ++r) {
    for (std::int64_t c = 0; c < w; ++c) out.at(r, c) = image.at(top + r, left + c);
  }
  return out;
}

float clip_normalize(float value, double lo, double hi) {
  const double clamped = std::clamp(static_cast<double>(value), lo, hi);
  return static_cast<float>((clamped - lo) / (hi - lo));
}

Image clip_normalize(const Image& image, double lo, double hi) {
  if (!(lo < hi)) throw ConfigError("clip window needs lo < hi");
  Image out = image;
  for (auto& v : out.pixels) v = std::isnan(v) ? 0.0f : clip_normalize(v, lo, hi);
  return out;
}

ProcessedImage preprocess(const Volume& volume, const PreprocessConfig& config, const std::string& patient_id) {
  config.validate();
  auto stage = [](const char* name, auto&& fn) {
    try {
      return fn();
    } catch (const PreprocessError&) {
      throw;
    } catch (const Error& e) {
      throw PreprocessError(name, e.what());
    }
  };
  Image image = stage("select_slice", [&] { return select_slice(volume, config.slice); });
  image = stage("resample", [&] { return resample(image, config.target_size); });
  image = stage("crop", [&] { return crop(image, config.crop); });
  if (image.height != config.target_size || image.width != config.target_size) {
    image = stage("resample", [&] { return resample(image, config.target_size); });
  }
  image = stage("clip", [&] { return clip_normalize(image, config.clip_lo, config.clip_hi); });
  return ProcessedImage{std::move(image), patient_id, config};
}

}  // namespace ctdense
