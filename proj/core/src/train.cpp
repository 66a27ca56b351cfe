#include "ctdense/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "ctdense/byte_io.hpp"
#include "ctdense/errors.hpp"
#include "ctdense/key_value.hpp"
#include "ctdense/ops.hpp"

namespace ctdense {

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
  if (logits.shape() != targets.shape()) {
    throw ShapeError("bce_with_logits: logits " + shape_str(logits.shape()) + " vs targets " +
                     shape_str(targets.shape()));
  }
  if (logits.numel() == 0) throw ShapeError("bce_with_logits: empty input");
  const auto x = logits.data();
  const auto y = targets.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (y[i] != T(0) && y[i] != T(1)) {
      throw ValidationError("bce_with_logits: target " + format_double(static_cast<double>(y[i])) + " at entry " +
                            std::to_string(i) + " is not binary");
    }
    const double xi = x[i];
    acc += std::max(xi, 0.0) - xi * static_cast<double>(y[i]) + std::log1p(std::exp(-std::abs(xi)));
  }
  const double count = static_cast<double>(x.size());
  auto out = Tensor<T>::scalar(static_cast<T>(acc / count));
  if (!should_record<T>({logits})) return out;
  auto li = logits.impl();
  auto ti = targets.impl();
  auto oi = out.impl();
  record<T>(out, {logits}, [li, ti, oi, count] {
    T* dx = li->grad_buffer();
    if (!dx) return;
    const double upstream = static_cast<double>(oi->grad[0]) / count;
    for (std::size_t i = 0; i < li->data.size(); ++i) {
      const double v = li->data[i];
      const double s = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      dx[i] += static_cast<T>((s - static_cast<double>(ti->data[i])) * upstream);
    }
  });
  return out;
}

template <typename T>
void adam_step(std::vector<NamedTensor<T>>& params, AdamState<T>& state) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) throw IncompleteGradientError("adam_step: parameter '" + p.name + "' has no gradient");
  }
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), T(0));
      state.v.emplace_back(p.tensor.numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam_step: optimizer state does not match parameter list");
  const auto& o = state.options;
  state.step += 1;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k].tensor;
    auto w = p.mutable_data();
    const auto g = p.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != w.size()) throw ShapeError("adam_step: moment buffer size mismatch for '" + params[k].name + "'");
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i];
      m[i] = static_cast<T>(o.beta1 * m[i] + (1.0 - o.beta1) * gi);
      v[i] = static_cast<T>(o.beta2 * v[i] + (1.0 - o.beta2) * gi * gi);
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      w[i] = static_cast<T>(w[i] - o.lr * m_hat / (std::sqrt(v_hat) + o.eps));
    }
    p.zero_grad();
  }
}

std::string format_metrics_row(const EpochMetrics& row) {
  return std::to_string(row.epoch) + "," + format_double(row.train_loss) + "," + format_double(row.val_loss) + "," +
         format_double(row.val_accuracy);
}

std::string format_metrics_csv(const MetricsLog& log) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& row : log) out += format_metrics_row(row) + "\n";
  return out;
}

MetricsLog parse_metrics_csv(std::string_view text) {
  MetricsLog log;
  std::size_t line = 0;
  std::size_t start = 0;
  bool header_seen = false;
  while (start < text.size()) {
    const auto nl = text.find('\n', start);
    const auto raw = text.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
    start = nl == std::string_view::npos ? text.size() : nl + 1;
    ++line;
    const auto content = trim(raw);
    if (content.empty()) continue;
    if (!header_seen) {
      if (content != kMetricsHeader) {
        throw MetricsError(line, "line " + std::to_string(line) + ": expected header '" + kMetricsHeader + "'");
      }
      header_seen = true;
      continue;
    }
    std::vector<std::string_view> cells;
    std::size_t pos = 0;
    while (true) {
      const auto comma = content.find(',', pos);
      cells.push_back(trim(content.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos)));
      if (comma == std::string_view::npos) break;
      pos = comma + 1;
    }
    const auto bad = [&](const std::string& why) {
      return MetricsError(line, "line " + std::to_string(line) + ": " + why);
    };
    if (cells.size() != 4) throw bad("expected 4 columns, got " + std::to_string(cells.size()));
    const auto epoch = parse_int(cells[0]);
    const auto train_loss = parse_double(cells[1]);
    const auto val_loss = parse_double(cells[2]);
    const auto val_accuracy = parse_double(cells[3]);
    if (!epoch || !train_loss || !val_loss || !val_accuracy) throw bad("non-numeric field");
    log.push_back({static_cast<int>(*epoch), *train_loss, *val_loss, *val_accuracy});
  }
  if (!header_seen) throw MetricsError(1, "metrics file is empty");
  return log;
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be at least 1, got " + std::to_string(epochs));
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be at least 1");
  if (!(adam.lr >= 0.0)) throw ConfigError("learning rate must be non-negative");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
  model.validate();
  preprocess.validate();
  if (preprocess.target_size != model.input_size) {
    throw ConfigError("preprocess target_size " + std::to_string(preprocess.target_size) +
                      " differs from model input_size " + std::to_string(model.input_size));
  }
}

CheckpointMetadata preprocess_metadata(const PreprocessConfig& config) {
  return {{"preprocess.target_size", std::to_string(config.target_size)},
          {"preprocess.clip_lo", format_double(config.clip_lo)},
          {"preprocess.clip_hi", format_double(config.clip_hi)},
          {"preprocess.crop", format_double(config.crop.fraction)},
          {"preprocess.slice", config.slice.to_string()}};
}

PreprocessConfig preprocess_from_metadata(const CheckpointMetadata& metadata) {
  PreprocessConfig config;
  auto number = [](const std::string& key, const std::string& value) {
    const auto v = parse_double(value);
    if (!v) throw CheckpointError("checkpoint metadata " + key + " is not a number: '" + value + "'");
    return *v;
  };
  try {
    for (const auto& [key, value] : metadata) {
      if (key == "preprocess.target_size") config.target_size = static_cast<std::int64_t>(number(key, value));
      if (key == "preprocess.clip_lo") config.clip_lo = number(key, value);
      if (key == "preprocess.clip_hi") config.clip_hi = number(key, value);
      if (key == "preprocess.crop") config.crop.fraction = number(key, value);
      if (key == "preprocess.slice") config.slice = SlicePolicy::parse(value);
    }
    config.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint preprocessing metadata: ") + e.what());
  }
  return config;
}

std::string format_patient_csv(const std::vector<PatientResult>& rows) {
  std::string out = "patient_id,prob_covid,prob_severe,pred_covid,pred_severe,label_covid,label_severe\n";
  for (const auto& r : rows) {
    out += r.patient_id + "," + format_double(r.prob_covid) + "," + format_double(r.prob_severe) + "," +
           std::to_string(r.covid) + "," + std::to_string(r.severe) + "," + std::to_string(r.label_covid) + "," +
           std::to_string(r.label_severe) + "\n";
  }
  return out;
}

int threshold_label(double probability, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must lie in (0, 1)");
  return probability >= threshold ? 1 : 0;
}

Prediction predict(DenseNet<float>& model, const ProcessedImage& image, double threshold) {
  Batch batch = make_batch({image}, {StudyRecord{image.patient_id, 0, 0, {}}});
  const auto probs = sigmoid(model.forward(batch.images, Mode::Eval));
  Prediction p;
  p.prob_covid = probs.data()[0];
  p.prob_severe = probs.data()[1];
  p.covid = threshold_label(p.prob_covid, threshold);
  p.severe = threshold_label(p.prob_severe, threshold);
  return p;
}

template <typename T>
double joint_accuracy(const Tensor<T>& predictions, const Tensor<T>& labels) {
  if (predictions.shape() != labels.shape() || predictions.ndim() != 2 || predictions.dim(1) != 2 ||
      predictions.dim(0) == 0) {
    throw ShapeError("joint_accuracy: predictions " + shape_str(predictions.shape()) + " vs labels " +
                     shape_str(labels.shape()) + " (need matching N x 2, N >= 1)");
  }
  const auto p = predictions.data();
  const auto y = labels.data();
  std::int64_t correct = 0;
  const auto n = predictions.dim(0);
  for (std::int64_t i = 0; i < n; ++i) {
    if (p[2 * i] == y[2 * i] && p[2 * i + 1] == y[2 * i + 1]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

EvalResult evaluate(DenseNet<float>& model, const std::vector<StudyRecord>& records, ImageSource& source,
                    double threshold, std::size_t batch_size) {
  if (records.empty()) throw ConfigError("evaluate: no records");
  BatchLoader loader(records, batch_size, std::nullopt, source);
  EvalResult result;
  double loss_sum = 0.0;
  std::int64_t correct = 0;
  NoGradGuard<float> no_grad;
  loader.for_each(0, [&](std::size_t, const Batch& batch) {
    const auto logits = model.forward(batch.images, Mode::Eval);
    const auto n = batch.images.dim(0);
    loss_sum += static_cast<double>(bce_with_logits(logits, batch.labels).item()) * static_cast<double>(2 * n);
    const auto prob_tensor = sigmoid(logits);
    const auto probs = prob_tensor.data();
    const auto labels = batch.labels.data();
    for (std::int64_t i = 0; i < n; ++i) {
      PatientResult r;
      r.patient_id = batch.patient_ids[static_cast<std::size_t>(i)];
      r.prob_covid = probs[2 * i];
      r.prob_severe = probs[2 * i + 1];
      r.covid = threshold_label(r.prob_covid, threshold);
      r.severe = threshold_label(r.prob_severe, threshold);
      r.label_covid = static_cast<int>(labels[2 * i]);
      r.label_severe = static_cast<int>(labels[2 * i + 1]);
      if (r.covid == r.label_covid && r.severe == r.label_severe) ++correct;
      result.patients.push_back(std::move(r));
    }
  });
  const auto total = static_cast<double>(result.patients.size());
  result.loss = loss_sum / (2.0 * total);
  result.accuracy = static_cast<double>(correct) / total;
  return result;
}

std::filesystem::path epoch_checkpoint_path(const std::filesystem::path& dir, int epoch) {
  char name[32];
  std::snprintf(name, sizeof name, "epoch-%04d.ckpt", epoch);
  return dir / name;
}

std::filesystem::path final_checkpoint_path(const std::filesystem::path& dir) { return dir / "final.ckpt"; }

void train(DenseNet<float>& model, const DatasetSplit& split, ImageSource& source, const TrainConfig& config,
           MetricsLog& log, const EpochCallback& on_epoch) {
  config.validate();
  if (split.train.empty() || split.validation.empty()) throw ConfigError("train: both split parts must be nonempty");
  if (!(model.config() == config.model)) throw ConfigError("train: model does not match the configured architecture");

  BatchLoader loader(split.train, config.batch_size, config.seed, source);
  AdamState<float> adam;
  adam.options = config.adam;
  auto params = model.parameters();

  std::ofstream metrics;
  if (config.metrics_path) {
    if (config.metrics_path->has_parent_path()) std::filesystem::create_directories(config.metrics_path->parent_path());
    metrics.open(*config.metrics_path, std::ios::binary | std::ios::trunc);
    if (!metrics) throw DataError("cannot write metrics file " + config.metrics_path->string());
    metrics << kMetricsHeader << "\n" << std::flush;
  }
  if (config.checkpoint_dir) std::filesystem::create_directories(*config.checkpoint_dir);
  auto metadata = preprocess_metadata(config.preprocess);
  metadata.emplace_back("train.seed", std::to_string(config.seed));

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t batches = 0;
    loader.for_each(
        epoch - 1,
        [&](std::size_t b, const Batch& batch) {
          Tape<float> tape;
          TapeGuard<float> guard(tape);
          const auto loss = bce_with_logits(model.forward(batch.images, Mode::Train), batch.labels);
          const double value = loss.item();
          if (!std::isfinite(value)) {
            throw DivergenceError(epoch, static_cast<int>(b) + 1,
                                  "loss became non-finite at epoch " + std::to_string(epoch) + ", batch " +
                                      std::to_string(b + 1));
          }
          tape.backward(loss);
          adam_step(params, adam);
          loss_sum += value;
          ++batches;
        },
        config.prefetch);

    const auto val = evaluate(model, split.validation, source, config.threshold, config.batch_size);
    EpochMetrics row{epoch, loss_sum / static_cast<double>(batches), val.loss, val.accuracy};
    log.push_back(row);
    if (metrics.is_open()) metrics << format_metrics_row(row) << "\n" << std::flush;
    if (on_epoch) on_epoch(row);

    if (config.checkpoint_dir) {
      auto meta = metadata;
      meta.emplace_back("train.epoch", std::to_string(epoch));
      if (epoch % config.checkpoint_every == 0) {
        save_checkpoint(epoch_checkpoint_path(*config.checkpoint_dir, epoch), model, meta);
      }
      if (epoch == config.epochs) save_checkpoint(final_checkpoint_path(*config.checkpoint_dir), model, meta);
    }
  }
}

template Tensor<float> bce_with_logits<float>(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> bce_with_logits<double>(const Tensor<double>&, const Tensor<double>&);
template void adam_step<float>(std::vector<NamedTensor<float>>&, AdamState<float>&);
template void adam_step<double>(std::vector<NamedTensor<double>>&, AdamState<double>&);
template double joint_accuracy<float>(const Tensor<float>&, const Tensor<float>&);
template double joint_accuracy<double>(const Tensor<double>&, const Tensor<double>&);

}  // namespace ctdense
