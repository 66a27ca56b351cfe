#include "ctdense/dataset.hpp"

#include <algorithm>
#include <future>
#include <sstream>

#include "ctdense/byte_io.hpp"
#include "ctdense/errors.hpp"
#include "ctdense/key_value.hpp"
#include "ctdense/rng.hpp"

namespace ctdense {

namespace {

constexpr char kCacheMagic[] = "CTDNIMG1";

std::vector<std::string> split_csv_row(std::string_view line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    cells.emplace_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

int parse_label(const std::string& cell, const char* column, std::size_t line) {
  if (cell == "0") return 0;
  if (cell == "1") return 1;
  throw ReferenceError(ReferenceError::Kind::Validation, line,
                       "line " + std::to_string(line) + ": " + column + " must be 0 or 1, got '" + cell + "'");
}

std::string encode_cached(const Image& image) {
  std::string out(kCacheMagic, 8);
  put_le(out, static_cast<std::uint64_t>(image.height));
  put_le(out, static_cast<std::uint64_t>(image.width));
  for (float v : image.pixels) put_f32(out, v);
  return out;
}

std::optional<Image> decode_cached(std::string_view bytes, std::int64_t expected_size) {
  ByteReader reader(bytes);
  if (reader.get_bytes(8) != std::string_view(kCacheMagic, 8)) return std::nullopt;
  const auto h = static_cast<std::int64_t>(reader.get<std::uint64_t>());
  const auto w = static_cast<std::int64_t>(reader.get<std::uint64_t>());
  if (!reader.ok() || h != expected_size || w != expected_size) return std::nullopt;
  if (reader.remaining() != static_cast<std::size_t>(h * w) * 4) return std::nullopt;
  Image image{h, w, std::vector<float>(static_cast<std::size_t>(h * w))};
  for (auto& v : image.pixels) v = reader.get_f32();
  return image;
}

}  // namespace

std::vector<StudyRecord> load_reference(std::string_view csv, const std::filesystem::path& data_dir) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start <= csv.size()) {
    const auto nl = csv.find('\n', start);
    const auto end = nl == std::string_view::npos ? csv.size() : nl;
    lines.push_back(csv.substr(start, end - start));
    if (nl == std::string_view::npos) break;
    start = nl + 1;
  }
  while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
  if (lines.empty()) throw ReferenceError(ReferenceError::Kind::Schema, 1, "reference file has no header row");

  const auto header = split_csv_row(lines[0]);
  auto column = [&](const char* name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      throw ReferenceError(ReferenceError::Kind::Schema, 1, std::string("reference header lacks column '") + name + "'");
    }
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto id_col = column("PatientID");
  const auto covid_col = column("probCOVID");
  const auto severe_col = column("probSevere");
  const auto needed = std::max({id_col, covid_col, severe_col}) + 1;

  std::vector<StudyRecord> records;
  std::map<std::string, std::size_t> seen;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::size_t line = i + 1;
    if (trim(lines[i]).empty()) continue;
    const auto cells = split_csv_row(lines[i]);
    if (cells.size() < needed) {
      throw ReferenceError(ReferenceError::Kind::Schema, line,
                           "line " + std::to_string(line) + ": expected at least " + std::to_string(needed) +
                               " columns, got " + std::to_string(cells.size()));
    }
    const auto& id = cells[id_col];
    if (id.empty()) {
      throw ReferenceError(ReferenceError::Kind::Schema, line, "line " + std::to_string(line) + ": empty PatientID");
    }
    StudyRecord record{id, parse_label(cells[covid_col], "probCOVID", line),
                       parse_label(cells[severe_col], "probSevere", line), data_dir / (id + ".mha")};
    if (const auto [it, inserted] = seen.emplace(id, line); !inserted) {
      throw ReferenceError(ReferenceError::Kind::Duplicate, line,
                           "line " + std::to_string(line) + ": PatientID '" + id + "' already appeared on line " +
                               std::to_string(it->second));
    }
    records.push_back(std::move(record));
  }
  return records;
}

std::vector<StudyRecord> load_reference_file(const std::filesystem::path& csv_path,
                                             const std::filesystem::path& data_dir) {
  return load_reference(read_file(csv_path), data_dir);
}

std::string write_reference(const std::vector<StudyRecord>& records) {
  std::string out = "PatientID,probCOVID,probSevere\n";
  for (const auto& r : records) {
    out += r.patient_id + "," + std::to_string(r.label_covid) + "," + std::to_string(r.label_severe) + "\n";
  }
  return out;
}

DatasetSplit split(const std::vector<StudyRecord>& records, std::size_t validation_count, std::uint64_t seed) {
  if (validation_count == 0 || validation_count >= records.size()) {
    throw BoundsError("validation_count " + std::to_string(validation_count) + " must lie in (0, " +
                      std::to_string(records.size()) + ")");
  }
  Rng rng(seed);
  const auto order = rng.permutation(records.size());
  DatasetSplit out;
  out.seed = seed;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < validation_count ? out.validation : out.train).push_back(records[order[i]]);
  }
  return out;
}

VolumeImageSource::VolumeImageSource(PreprocessConfig config, std::optional<std::filesystem::path> cache_dir,
                                     bool memoize)
    : config_(std::move(config)), cache_dir_(std::move(cache_dir)), memoize_(memoize) {
  config_.validate();
}

ProcessedImage VolumeImageSource::load(const StudyRecord& record) {
  if (memoize_) {
    std::lock_guard lock(mutex_);
    if (const auto it = memo_.find(record.patient_id); it != memo_.end()) return it->second;
  }
  std::optional<std::filesystem::path> cache_file;
  if (cache_dir_) {
    std::ostringstream name;
    name << record.patient_id << "-" << std::hex << config_.hash() << ".img";
    cache_file = *cache_dir_ / name.str();
  }

  ProcessedImage result;
  bool loaded = false;
  if (cache_file && std::filesystem::exists(*cache_file)) {
    if (auto image = decode_cached(read_file(*cache_file), config_.target_size)) {
      result = ProcessedImage{std::move(*image), record.patient_id, config_};
      loaded = true;
    }
  }
  if (!loaded) {
    try {
      result = preprocess(read_mha_file(record.volume_path), config_, record.patient_id);
    } catch (const Error& e) {
      throw ItemError(record.patient_id, e.what());
    }
    if (cache_file) {
      std::filesystem::create_directories(*cache_dir_);
      write_file(*cache_file, encode_cached(result.image));
    }
  }
  if (memoize_) {
    std::lock_guard lock(mutex_);
    memo_.emplace(record.patient_id, result);
  }
  return result;
}

std::vector<std::size_t> epoch_order(std::size_t count, std::optional<std::uint64_t> shuffle_seed, int epoch) {
  if (!shuffle_seed) {
    std::vector<std::size_t> identity(count);
    for (std::size_t i = 0; i < count; ++i) identity[i] = i;
    return identity;
  }
  Rng rng(*shuffle_seed + static_cast<std::uint64_t>(epoch));
  return rng.permutation(count);
}

Batch make_batch(const std::vector<ProcessedImage>& images, const std::vector<StudyRecord>& records) {
  if (images.empty() || images.size() != records.size()) {
    throw ShapeError("make_batch: need one image per record and at least one record");
  }
  const auto size = images.front().image.height;
  const auto plane = static_cast<std::size_t>(size * size);
  std::vector<float> pixels;
  pixels.reserve(plane * images.size());
  std::vector<float> labels;
  Batch batch;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& img = images[i].image;
    if (img.height != size || img.width != size) throw ShapeError("make_batch: images differ in size");
    pixels.insert(pixels.end(), img.pixels.begin(), img.pixels.end());
    labels.push_back(static_cast<float>(records[i].label_covid));
    labels.push_back(static_cast<float>(records[i].label_severe));
    batch.patient_ids.push_back(records[i].patient_id);
  }
  const auto n = static_cast<std::int64_t>(images.size());
  batch.images = Tensor<float>::from_vector({n, 1, size, size}, std::move(pixels));
  batch.labels = Tensor<float>::from_vector({n, 2}, std::move(labels));
  return batch;
}

BatchLoader::BatchLoader(std::vector<StudyRecord> records, std::size_t batch_size,
                         std::optional<std::uint64_t> shuffle_seed, ImageSource& source)
    : records_(std::move(records)), batch_size_(batch_size), shuffle_seed_(shuffle_seed), source_(&source) {
  if (batch_size_ < 1) throw ConfigError("batch_size must be at least 1");
}

std::size_t BatchLoader::num_batches() const { return (records_.size() + batch_size_ - 1) / batch_size_; }

std::vector<std::vector<std::size_t>> BatchLoader::plan(int epoch) const {
  const auto order = epoch_order(records_.size(), shuffle_seed_, epoch);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size_) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size_)));
  }
  return out;
}

Batch BatchLoader::load(const std::vector<std::size_t>& indices) const {
  std::vector<ProcessedImage> images;
  std::vector<StudyRecord> records;
  for (auto i : indices) {
    records.push_back(records_.at(i));
    images.push_back(source_->load(records.back()));
  }
  return make_batch(images, records);
}

void BatchLoader::for_each(int epoch, const std::function<void(std::size_t, const Batch&)>& fn, bool prefetch) const {
  const auto batches = plan(epoch);
  if (!prefetch) {
    for (std::size_t b = 0; b < batches.size(); ++b) fn(b, load(batches[b]));
    return;
  }
  std::future<Batch> next;
  if (!batches.empty()) next = std::async(std::launch::async, [this, &batches] { return load(batches[0]); });
  for (std::size_t b = 0; b < batches.size(); ++b) {
    Batch current = next.get();
    if (b + 1 < batches.size()) {
      next = std::async(std::launch::async, [this, &batches, b] { return load(batches[b + 1]); });
    }
    fn(b, current);
  }
}

}  // namespace ctdense
