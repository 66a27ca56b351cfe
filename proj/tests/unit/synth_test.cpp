#include <gtest/gtest.h>

#include "ctdense/byte_io.hpp"
#include "ctdense/dataset.hpp"
#include "ctdense/synth.hpp"
#include "test_support.hpp"

namespace ctdense {
namespace {

TEST(Synth, WritesReadableDatasetWithBalancedLabels) {
  testing::TempDir dir("synth");
  SynthOptions opts;
  opts.n = 32;
  opts.seed = 7;
  opts.image_size = 32;
  const auto records = synth_generate(opts, dir.path());
  ASSERT_EQ(records.size(), 32u);
  const auto reference = load_reference_file(dir.path() / "reference.csv", dir.path() / "data");
  EXPECT_EQ(reference, records);
  int covid = 0;
  for (const auto& r : records) {
    covid += r.label_covid;
    if (r.label_severe) EXPECT_EQ(r.label_covid, 1);
    const auto v = read_mha_file(r.volume_path);
    EXPECT_EQ(v.header().dim_size, (std::vector<std::int64_t>{32, 32, kSynthDepth}));
    EXPECT_EQ(v.header().element_type, ElementType::Short);
  }
  EXPECT_NEAR(covid, 16, 1);
}

TEST(Synth, SameSeedIsByteIdentical) {
  testing::TempDir a("synth-a"), b("synth-b");
  SynthOptions opts;
  opts.n = 6;
  opts.seed = 3;
  opts.image_size = 16;
  const auto ra = synth_generate(opts, a.path());
  const auto rb = synth_generate(opts, b.path());
  EXPECT_EQ(read_file(a.path() / "reference.csv"), read_file(b.path() / "reference.csv"));
  for (std::size_t i = 0; i < ra.size(); ++i) EXPECT_EQ(read_file(ra[i].volume_path), read_file(rb[i].volume_path));
}

TEST(Synth, BlobRaisesMeanIntensity) {
  Rng rng(5);
  PreprocessConfig config;
  config.target_size = 32;
  for (int trial = 0; trial < 20; ++trial) {
    const auto with = preprocess(synth_volume(48, true, false, rng), config).image;
    const auto without = preprocess(synth_volume(48, false, false, rng), config).image;
    auto mean = [](const Image& img) {
      double acc = 0;
      for (float v : img.pixels) acc += v;
      return acc / static_cast<double>(img.pixels.size());
    };
    EXPECT_GT(mean(with), mean(without));
  }
}

TEST(Synth, RejectsSevereWithoutCovid) {
  Rng rng(1);
  EXPECT_ANY_THROW(synth_volume(16, false, true, rng));
}

}  // namespace
}  // namespace ctdense
