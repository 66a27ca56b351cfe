#include "ctdense/synth.hpp"

#include <cmath>
#include <cstdio>

#include "ctdense/byte_io.hpp"
#include "ctdense/errors.hpp"
#include "ctdense/rng.hpp"

namespace ctdense {

namespace {

constexpr double kBackgroundHu = -750.0;
constexpr double kNoiseHu = 25.0;
constexpr double kBlobHu = 900.0;
constexpr double kStoredOffset = 1024.0;

struct Blob {
  double cx, cy, sigma;
};

void add_blob(std::vector<double>& hu, std::int64_t size, const Blob& blob) {
  const auto plane = size * size;
  const auto mid = kSynthDepth / 2;
  for (std::int64_t z = 0; z < kSynthDepth; ++z) {
    // Fades over neighbouring slices.
    const double dz = static_cast<double>(z - mid);
    const double depth_weight = std::exp(-dz * dz / 2.0);
    for (std::int64_t y = 0; y < size; ++y) {
      for (std::int64_t x = 0; x < size; ++x) {
        const double dx = static_cast<double>(x) - blob.cx;
        const double dy = static_cast<double>(y) - blob.cy;
        const double r2 = (dx * dx + dy * dy) / (2.0 * blob.sigma * blob.sigma);
        hu[static_cast<std::size_t>(z * plane + y * size + x)] += kBlobHu * depth_weight * std::exp(-r2);
      }
    }
  }
}

}  // namespace

Volume synth_volume(std::int64_t image_size, bool covid, bool severe, Rng& rng) {
  if (image_size < 8) throw ConfigError("synthetic image_size must be at least 8");
  if (severe && !covid) throw ConfigError("synthetic severe study must also be COVID-positive");
  const auto size = static_cast<double>(image_size);
  std::vector<double> hu(static_cast<std::size_t>(image_size * image_size * kSynthDepth));
  for (auto& v : hu) v = kBackgroundHu + kNoiseHu * rng.normal();
  const double sigma = size / 10.0;
  if (covid) add_blob(hu, image_size, {rng.uniform(0.25, 0.45) * size, rng.uniform(0.3, 0.7) * size, sigma});
  if (severe) add_blob(hu, image_size, {rng.uniform(0.55, 0.75) * size, rng.uniform(0.3, 0.7) * size, sigma});
  for (auto& v : hu) v += kStoredOffset;

  auto header = MhaHeader::make({image_size, image_size, kSynthDepth}, ElementType::Short);
  header.raw_fields = {{"RescaleSlope", "1"}, {"RescaleIntercept", "-1024"}};
  return Volume::from_values(std::move(header), hu);
}

std::vector<StudyRecord> synth_generate(const SynthOptions& options, const std::filesystem::path& out_dir) {
  if (options.n < 1) throw ConfigError("synth needs n >= 1");
  const auto data_dir = out_dir / "data";
  std::filesystem::create_directories(data_dir);

  Rng rng(options.seed);
  const int positives = options.n / 2;
  const int severe = positives / 2;
  // Label pattern: severe first, then mild positives, then negatives; shuffled.
  std::vector<int> kind(static_cast<std::size_t>(options.n), 0);
  for (int i = 0; i < positives; ++i) kind[static_cast<std::size_t>(i)] = i < severe ? 2 : 1;
  rng.shuffle(std::span<int>(kind));

  std::vector<StudyRecord> records;
  for (int i = 0; i < options.n; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "synth%04d", i);
    const int k = kind[static_cast<std::size_t>(i)];
    StudyRecord record{id, k >= 1 ? 1 : 0, k == 2 ? 1 : 0, data_dir / (std::string(id) + ".mha")};
    write_mha_file(record.volume_path, synth_volume(options.image_size, k >= 1, k == 2, rng), options.compress);
    records.push_back(std::move(record));
  }
  write_file(out_dir / "reference.csv", write_reference(records));
  return records;
}

}  // namespace ctdense
