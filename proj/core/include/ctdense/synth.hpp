#pragma once

// Synthetic CT dataset with a known labelling rule.
//
// Each volume is image_size x image_size x kSynthDepth MET_SHORT voxels of
// noisy background. A COVID-positive study carries one bright Gaussian blob
// centred on the middle slice; a severe study carries a second one.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "ctdense/dataset.hpp"
#include "ctdense/rng.hpp"

namespace ctdense {

inline constexpr std::int64_t kSynthDepth = 5;

struct SynthOptions {
  int n = 32;
  std::uint64_t seed = 0;
  std::int64_t image_size = 64;
  bool compress = true;
};

// Generates one volume. Stored values are HU + 1024 with RescaleIntercept = -1024.
Volume synth_volume(std::int64_t image_size, bool covid, bool severe, Rng& rng);

// Writes `<out_dir>/data/<id>.mha` and `<out_dir>/reference.csv`, returning
// the records. Exactly n/2 (rounded down) studies are COVID-positive and half
// of those (rounded down) are severe. Output bytes depend only on the options.
std::vector<StudyRecord> synth_generate(const SynthOptions& options, const std::filesystem::path& out_dir);

}  // namespace ctdense
