#pragma once

// Random MetaImage volumes and header mutations.

#include <algorithm>
#include <string>
#include <vector>

#include "ctdense/mha.hpp"
#include "ctdense/rng.hpp"

namespace ctdense::mhacases {

inline constexpr ElementType kTypes[] = {ElementType::UChar, ElementType::Char,  ElementType::Short, ElementType::UShort,
                                  ElementType::Int,   ElementType::Float, ElementType::Double};

inline Volume random_volume(Rng& rng) {
  const auto type = kTypes[rng.index(std::size(kTypes))];
  std::vector<std::int64_t> dims(1 + rng.index(4));
  for (auto& d : dims) d = 1 + static_cast<std::int64_t>(rng.index(6));
  auto header = MhaHeader::make(dims, type);
  for (auto& s : header.element_spacing) s = rng.uniform(0.1, 3.0);
  for (auto& o : header.offset) o = rng.uniform(-200, 200);
  if (rng.uniform() < 0.5) header.raw_fields.emplace_back("RescaleIntercept", "-1024");
  std::string payload(static_cast<std::size_t>(header.voxel_count()) * element_size(type), '\0');
  for (auto& c : payload) c = static_cast<char>(rng.index(256));
  return Volume(std::move(header), std::move(payload));
}

// Mutated headers must produce an MhaError or a valid volume, never a crash
// or a foreign exception.
inline std::string mutate(const std::string& base, Rng& rng) {
  std::string s = base;
  const auto header_end = s.find("LOCAL\n") + 6;
  const int edits = 1 + static_cast<int>(rng.index(4));
  static const char* const kTokens[] = {"NDims = 17", "NDims = 0", "DimSize = 99999999 99999999 99999999",
                                        "DimSize = -1 2", "ElementType = MET_FLOAT", "CompressedData = True",
                                        "CompressedDataSize = 999999999", "ElementSpacing = nan inf",
                                        "TransformMatrix = 1", "Offset =", "=", " = = ", "BinaryData = maybe",
                                        "ElementDataFile = LOCAL", "NDims = 3", "DimSize = 1 1 1 1 1 1 1 1 1 1"};
  for (int e = 0; e < edits; ++e) {
    const auto limit = std::min(s.size(), header_end + 8);
    const auto at = static_cast<std::size_t>(rng.index(limit));
    switch (rng.index(5)) {
      case 0:
        s[at] = static_cast<char>(rng.index(256));
        break;
      case 1:
        s.erase(at, 1 + rng.index(8));
        break;
      case 2:
        s.insert(at, 1, static_cast<char>(rng.index(256)));
        break;
      case 3:
        s.insert(at, std::string(kTokens[rng.index(std::size(kTokens))]) + "\n");
        break;
      default: {
        const auto nl = s.find('\n', at);
        if (nl != std::string::npos) s.insert(0, s.substr(at, nl - at + 1));
      }
    }
  }
  return s;
}

}  // namespace ctdense::mhacases
