#pragma once

// Loss, optimizer, training loop and evaluation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ctdense/checkpoint.hpp"
#include "ctdense/dataset.hpp"
#include "ctdense/densenet.hpp"

namespace ctdense {

// Mean over all entries of max(x, 0) - x*y + log(1 + exp(-|x|)).
// The gradient with respect to x is (sigmoid(x) - y) / numel.
// Throws ShapeError on mismatched shapes and ValidationError when a target
// is not exactly 0 or 1.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets);

struct AdamOptions {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  AdamOptions options;
  std::int64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

// One bias-corrected Adam update of every parameter, followed by zeroing the
// gradients. Throws IncompleteGradientError (before touching anything) if a
// parameter never received a gradient.
template <typename T>
void adam_step(std::vector<NamedTensor<T>>& params, AdamState<T>& state);

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;

  bool operator==(const EpochMetrics&) const = default;
};

using MetricsLog = std::vector<EpochMetrics>;

inline constexpr char kMetricsHeader[] = "epoch,train_loss,val_loss,val_accuracy";

std::string format_metrics_row(const EpochMetrics& row);
std::string format_metrics_csv(const MetricsLog& log);
// Throws MetricsError with the 1-based line of the first bad row.
MetricsLog parse_metrics_csv(std::string_view text);

struct TrainConfig {
  int epochs = 100;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  DenseNetConfig model = DenseNetConfig::densenet121();
  PreprocessConfig preprocess;
  AdamOptions adam;
  // Save a checkpoint every `checkpoint_every` epochs and after the last one.
  int checkpoint_every = 10;
  std::optional<std::filesystem::path> checkpoint_dir;
  std::optional<std::filesystem::path> metrics_path;
  double threshold = 0.5;
  bool prefetch = true;

  // Throws ConfigError.
  void validate() const;
};

// Checkpoint metadata describing how inputs were prepared.
CheckpointMetadata preprocess_metadata(const PreprocessConfig& config);
// Missing keys keep their defaults; malformed values throw CheckpointError.
PreprocessConfig preprocess_from_metadata(const CheckpointMetadata& metadata);

struct PatientResult {
  std::string patient_id;
  double prob_covid = 0.0;
  double prob_severe = 0.0;
  int covid = 0;
  int severe = 0;
  int label_covid = 0;
  int label_severe = 0;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<PatientResult> patients;
};

std::string format_patient_csv(const std::vector<PatientResult>& rows);

struct Prediction {
  double prob_covid = 0.0;
  double prob_severe = 0.0;
  int covid = 0;
  int severe = 0;
};

// 1 when probability >= threshold. Throws ConfigError unless 0 < threshold < 1.
int threshold_label(double probability, double threshold);

Prediction predict(DenseNet<float>& model, const ProcessedImage& image, double threshold = 0.5);

// Fraction of rows whose two entries both match. Throws ShapeError on
// mismatched or non N x 2 shapes, or N = 0.
template <typename T>
double joint_accuracy(const Tensor<T>& predictions, const Tensor<T>& labels);

// Eval-mode pass over `records` in input order; parameters and running
// statistics are left untouched.
EvalResult evaluate(DenseNet<float>& model, const std::vector<StudyRecord>& records, ImageSource& source,
                    double threshold = 0.5, std::size_t batch_size = 8);

using EpochCallback = std::function<void(const EpochMetrics&)>;

// Trains `model` in place. Each epoch runs every training batch in
// shuffle order seeded from config.seed, then evaluates the validation set.
// Rows are appended to `log` as they complete, so the log survives a
// DivergenceError (thrown on the first non-finite batch loss).
void train(DenseNet<float>& model, const DatasetSplit& split, ImageSource& source, const TrainConfig& config,
           MetricsLog& log, const EpochCallback& on_epoch = {});

// Path of the checkpoint saved after `epoch` (1-based) or of the final one.
std::filesystem::path epoch_checkpoint_path(const std::filesystem::path& dir, int epoch);
std::filesystem::path final_checkpoint_path(const std::filesystem::path& dir);

}  // namespace ctdense
