#include <gtest/gtest.h>

#include <cstring>

#include "ctdense/errors.hpp"
#include "ctdense/mha.hpp"
#include "ctdense/rng.hpp"
#include "mha_cases.hpp"

namespace ctdense {
namespace {

using mhacases::mutate;
using mhacases::random_volume;


MhaError::Kind kind_of(const std::string& bytes) {
  try {
    read_mha(bytes);
  } catch (const MhaError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an MhaError";
  return MhaError::Kind::Io;
}

std::string message_of(const std::string& bytes) {
  try {
    read_mha(bytes);
  } catch (const MhaError& e) {
    return e.what();
  }
  return {};
}

const std::string kSmall =
    "ObjectType = Image\nNDims = 2\nDimSize = 2 2\nElementType = MET_SHORT\nElementDataFile = LOCAL\n";

std::string small_payload() { return std::string("\x01\x00\x02\x00\x03\x00\xff\xff", 8); }

TEST(Mha, RoundTripIsBitExactForAllTypes) {
  Rng rng(2024);
  for (int i = 0; i < 50; ++i) {
    auto volume = random_volume(rng);
    for (bool compress : {false, true}) {
      const auto back = read_mha(write_mha(volume, compress));
      auto expected = volume.header();
      expected.compressed = compress;
      EXPECT_EQ(back.header(), expected) << "volume " << i;
      EXPECT_EQ(back.payload(), volume.payload()) << "volume " << i << " compress " << compress;
    }
  }
}

TEST(Mha, ReadsMinimalHeaderWithDefaults) {
  const auto v = read_mha(kSmall + small_payload());
  EXPECT_EQ(v.header().dim_size, (std::vector<std::int64_t>{2, 2}));
  EXPECT_EQ(v.header().element_spacing, (std::vector<double>{1, 1}));
  EXPECT_EQ(v.values(), (std::vector<double>{1, 2, 3, -1}));
}

TEST(Mha, WriterKeyOrderEndsWithLocal) {
  const auto v = Volume::from_values(MhaHeader::make({2}, ElementType::UChar), std::vector<double>{1, 2});
  const auto text = write_mha(v, false);
  const std::vector<std::string> keys{"ObjectType", "NDims", "DimSize", "ElementType", "ElementSpacing", "Offset",
                                      "TransformMatrix", "CompressedData", "BinaryData", "BinaryDataByteOrderMSB",
                                      "ElementDataFile"};
  std::size_t pos = 0;
  for (const auto& k : keys) {
    const auto at = text.find(k + " = ", pos);
    ASSERT_NE(at, std::string::npos) << k;
    pos = at + 1;
  }
  EXPECT_EQ(text.substr(text.size() - 2 - 24), "ElementDataFile = LOCAL\n" + std::string("\x01\x02", 2));
}

TEST(Mha, FromValuesRoundsAndSaturates) {
  const auto v = Volume::from_values(MhaHeader::make({4}, ElementType::UChar), std::vector<double>{-5, 1.6, 254.5, 300});
  EXPECT_EQ(v.values(), (std::vector<double>{0, 2, 254, 255}));  // ties to even
}

TEST(Mha, MissingKeyIsNamed) {
  const std::string text = "ObjectType = Image\nNDims = 2\nElementType = MET_SHORT\nElementDataFile = LOCAL\n";
  EXPECT_EQ(kind_of(text), MhaError::Kind::MalformedHeader);
  EXPECT_NE(message_of(text).find("DimSize"), std::string::npos);
}

TEST(Mha, KeysAreCaseSensitive) {
  std::string text = kSmall;
  text.replace(0, 10, "objecttype");
  EXPECT_NE(message_of(text + small_payload()).find("ObjectType"), std::string::npos);
}

TEST(Mha, TruncationReportsByteCounts) {
  const auto msg = message_of(kSmall + small_payload().substr(0, 5));
  EXPECT_NE(msg.find("expected 8"), std::string::npos) << msg;
  EXPECT_NE(msg.find("got 5"), std::string::npos) << msg;
  EXPECT_EQ(kind_of(kSmall + "ab"), MhaError::Kind::Truncated);
}

TEST(Mha, UnsupportedVariants) {
  std::string text = kSmall;
  EXPECT_EQ(kind_of(std::string(text).replace(text.find("MET_SHORT"), 9, "MET_LONG") + small_payload()),
            MhaError::Kind::UnsupportedType);
  EXPECT_EQ(kind_of(std::string(text).replace(text.find("LOCAL"), 5, "x.raw")), MhaError::Kind::UnsupportedVariant);
  EXPECT_EQ(kind_of("BinaryData = False\n" + text + small_payload()), MhaError::Kind::UnsupportedVariant);
  EXPECT_EQ(kind_of("ElementNumberOfChannels = 3\n" + text + small_payload()), MhaError::Kind::UnsupportedVariant);
}

TEST(Mha, BigEndianPayloadIsSwapped) {
  const auto v = read_mha("BinaryDataByteOrderMSB = True\n" + kSmall + std::string("\x00\x01\x00\x02\x00\x03\xff\xfe", 8));
  EXPECT_EQ(v.values(), (std::vector<double>{1, 2, 3, -2}));
}

TEST(Mha, AliasesForOffsetAndTransform) {
  const auto v = read_mha("Origin = 1 2\nOrientation = 0 1 1 0\n" + kSmall + small_payload());
  EXPECT_EQ(v.header().offset, (std::vector<double>{1, 2}));
  EXPECT_EQ(v.header().transform_matrix, (std::vector<double>{0, 1, 1, 0}));
}

TEST(Mha, CorruptCompressedPayload) {
  const auto text = "CompressedData = True\n" + kSmall + "not zlib data at all";
  EXPECT_EQ(kind_of(text), MhaError::Kind::Compression);
}

TEST(Mha, HounsfieldConversion) {
  auto header = MhaHeader::make({3}, ElementType::Short);
  header.raw_fields = {{"RescaleSlope", "2"}, {"RescaleIntercept", "-1024"}};
  const auto hu = to_hounsfield(Volume::from_values(header, std::vector<double>{0, 512, 1024}));
  EXPECT_EQ(hu.header().element_type, ElementType::Float);
  EXPECT_FALSE(hu.header().field("RescaleIntercept"));
  EXPECT_EQ(hu.values(), (std::vector<double>{-1024, 0, 1024}));
}

TEST(Mha, MissingFileIsIoError) {
  try {
    read_mha_file("/nonexistent/volume.mha");
    FAIL();
  } catch (const MhaError& e) {
    EXPECT_EQ(e.kind(), MhaError::Kind::Io);
  }
}

TEST(MhaFuzz, TenThousandMutatedHeadersNeverCrash) {
  Rng rng(77);
  auto volume = Volume::from_values(MhaHeader::make({4, 3, 2}, ElementType::Short),
                                    std::vector<double>(24, 7.0));
  const std::string bases[] = {write_mha(volume, false), write_mha(volume, true)};
  int parsed = 0;
  int rejected = 0;
  for (int i = 0; i < 10000; ++i) {
    const auto input = mutate(bases[i % 2], rng);
    try {
      const auto v = read_mha(input);
      EXPECT_EQ(v.payload().size(), static_cast<std::size_t>(v.voxel_count()) * element_size(v.header().element_type));
      ++parsed;
    } catch (const MhaError&) {
      ++rejected;
    } catch (const std::exception& e) {
      ADD_FAILURE() << "mutation " << i << " raised a foreign exception: " << e.what();
    }
  }
  EXPECT_EQ(parsed + rejected, 10000);
  EXPECT_GT(rejected, 0);
}

}  // namespace
}  // namespace ctdense
