#pragma once

// Reference labels, train/validation splitting and batch iteration.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ctdense/preprocess.hpp"
#include "ctdense/tensor.hpp"

namespace ctdense {

struct StudyRecord {
  std::string patient_id;
  int label_covid = 0;
  int label_severe = 0;
  std::filesystem::path volume_path;

  bool operator==(const StudyRecord&) const = default;
};

// Header `PatientID,probCOVID,probSevere` (column order free, extra columns
// ignored). Each record's volume_path is data_dir / "<PatientID>.mha".
//
// Throws ReferenceError: Schema for a missing column or short row,
// Validation for a label other than 0 or 1, Duplicate for a repeated id.
std::vector<StudyRecord> load_reference(std::string_view csv, const std::filesystem::path& data_dir = "data");
std::vector<StudyRecord> load_reference_file(const std::filesystem::path& csv_path,
                                             const std::filesystem::path& data_dir);

std::string write_reference(const std::vector<StudyRecord>& records);

struct DatasetSplit {
  std::vector<StudyRecord> train;
  std::vector<StudyRecord> validation;
  std::uint64_t seed = 0;
};

// Seeded uniform shuffle; the first `validation_count` records form the
// validation set. Throws BoundsError unless 0 < validation_count < size.
DatasetSplit split(const std::vector<StudyRecord>& records, std::size_t validation_count, std::uint64_t seed);

// Produces the model input for one record.
class ImageSource {
 public:
  virtual ~ImageSource() = default;
  // Throws ItemError carrying the patient id when the record cannot be loaded.
  virtual ProcessedImage load(const StudyRecord& record) = 0;
  virtual const PreprocessConfig& config() const = 0;
};

// Reads record.volume_path and preprocesses it on demand.
//
// With a cache directory, processed images are stored as
// `<patient_id>-<config hash>.img` and reused on later loads. With
// memoize=true, processed images are also kept in memory.
class VolumeImageSource : public ImageSource {
 public:
  explicit VolumeImageSource(PreprocessConfig config, std::optional<std::filesystem::path> cache_dir = std::nullopt,
                             bool memoize = false);

  ProcessedImage load(const StudyRecord& record) override;
  const PreprocessConfig& config() const override { return config_; }

 private:
  PreprocessConfig config_;
  std::optional<std::filesystem::path> cache_dir_;
  bool memoize_;
  std::mutex mutex_;
  std::map<std::string, ProcessedImage> memo_;
};

struct Batch {
  Tensor<float> images;  // N x 1 x S x S
  Tensor<float> labels;  // N x 2, columns (covid, severe)
  std::vector<std::string> patient_ids;
};

// Order of records for one epoch: identity without a seed, otherwise a
// permutation seeded with shuffle_seed + epoch.
std::vector<std::size_t> epoch_order(std::size_t count, std::optional<std::uint64_t> shuffle_seed, int epoch);

// Yields ceil(n / batch_size) batches per epoch; the last one may be short.
class BatchLoader {
 public:
  BatchLoader(std::vector<StudyRecord> records, std::size_t batch_size, std::optional<std::uint64_t> shuffle_seed,
              ImageSource& source);

  std::size_t size() const { return records_.size(); }
  std::size_t num_batches() const;
  const std::vector<StudyRecord>& records() const { return records_; }

  // Record indices of every batch in the given epoch.
  std::vector<std::vector<std::size_t>> plan(int epoch) const;
  Batch load(const std::vector<std::size_t>& indices) const;

  // Visits the epoch's batches in plan order. The next batch is prepared on a
  // background thread while `fn` runs; delivery order is unaffected.
  void for_each(int epoch, const std::function<void(std::size_t, const Batch&)>& fn, bool prefetch = true) const;

 private:
  std::vector<StudyRecord> records_;
  std::size_t batch_size_;
  std::optional<std::uint64_t> shuffle_seed_;
  ImageSource* source_;
};

// Collates processed images and their labels.
Batch make_batch(const std::vector<ProcessedImage>& images, const std::vector<StudyRecord>& records);

}  // namespace ctdense
