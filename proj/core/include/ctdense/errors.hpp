#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ctdense {

// Root of every exception the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- numeric / tensor errors ------------------------------------------------

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Kernel/stride/padding combination that yields an empty or impossible output.
class GeometryError : public Error {
 public:
  using Error::Error;
};

class DegenerateStatisticsError : public Error {
 public:
  using Error::Error;
};

// backward() called on a tensor that was never recorded on a tape.
class NoGraphError : public Error {
 public:
  using Error::Error;
};

class IncompleteGradientError : public Error {
 public:
  using Error::Error;
};

class BoundsError : public Error {
 public:
  using Error::Error;
};

// Invalid model, preprocessing, training or CLI configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Binary target outside {0, 1}, non-binary CSV label, etc.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// ---- data errors -------------------------------------------------------------

// Anything that originates in input files rather than in the program.
class DataError : public Error {
 public:
  using Error::Error;
};

class MhaError : public DataError {
 public:
  enum class Kind { MalformedHeader, Truncated, UnsupportedType, UnsupportedVariant, Compression, Io };

  MhaError(Kind kind, const std::string& what) : DataError(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

class ReferenceError : public DataError {
 public:
  enum class Kind { Schema, Validation, Duplicate };

  ReferenceError(Kind kind, std::size_t line, const std::string& what)
      : DataError(what), kind_(kind), line_(line) {}

  Kind kind() const noexcept { return kind_; }
  // 1-based line number in the CSV (header is line 1); 0 when not line-specific.
  std::size_t line() const noexcept { return line_; }

 private:
  Kind kind_;
  std::size_t line_;
};

// A preprocessing stage failed; stage() names it.
class PreprocessError : public DataError {
 public:
  PreprocessError(std::string stage, const std::string& what)
      : DataError(stage + ": " + what), stage_(std::move(stage)) {}

  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

// A dataset item could not be loaded; carries the patient it belongs to.
class ItemError : public DataError {
 public:
  ItemError(std::string patient_id, const std::string& what)
      : DataError("patient " + patient_id + ": " + what), patient_id_(std::move(patient_id)) {}

  const std::string& patient_id() const noexcept { return patient_id_; }

 private:
  std::string patient_id_;
};

class CheckpointError : public DataError {
 public:
  using DataError::DataError;
};

// Metrics CSV that does not follow `epoch,train_loss,val_loss,val_accuracy`.
class MetricsError : public DataError {
 public:
  MetricsError(std::size_t line, const std::string& what) : DataError(what), line_(line) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// ---- training ----------------------------------------------------------------

class DivergenceError : public Error {
 public:
  DivergenceError(int epoch, int batch, const std::string& what)
      : Error(what), epoch_(epoch), batch_(batch) {}

  int epoch() const noexcept { return epoch_; }
  int batch() const noexcept { return batch_; }

 private:
  int epoch_;
  int batch_;
};

}  // namespace ctdense
