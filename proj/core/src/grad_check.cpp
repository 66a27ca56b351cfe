#include "ctdense/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ctdense/errors.hpp"
#include "ctdense/rng.hpp"

namespace ctdense {

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-6, std::abs(analytic) + std::abs(numeric));
}

GradCheckReport grad_check(const std::function<Tensor64()>& loss_fn, const std::vector<NamedTensor64>& inputs,
                           const GradCheckOptions& options) {
  for (const auto& in : inputs) {
    if (!in.tensor.requires_grad() || !in.tensor.is_leaf()) {
      throw Error("grad_check: '" + in.name + "' must be a leaf that requires gradients");
    }
  }

  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    TapeGuard<double> guard(tape);
    for (auto in : inputs) in.tensor.zero_grad();
    auto loss = loss_fn();
    backward(loss);
    for (const auto& in : inputs) {
      const auto g = in.tensor.grad();
      if (g.empty()) {
        analytic.emplace_back(in.tensor.numel(), 0.0);
      } else {
        analytic.emplace_back(g.begin(), g.end());
      }
    }
  }

  NoGradGuard<double> no_grad;
  Rng rng(options.seed);
  GradCheckReport report;
  report.tolerance = options.tolerance;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    Tensor64 tensor = inputs[t].tensor;
    const std::size_t count = tensor.numel();
    std::vector<std::size_t> indices(count);
    std::iota(indices.begin(), indices.end(), std::size_t{0});
    if (options.max_entries_per_tensor != 0 && count > options.max_entries_per_tensor) {
      rng.shuffle(std::span<std::size_t>(indices));
      indices.resize(options.max_entries_per_tensor);
      std::sort(indices.begin(), indices.end());
    }

    GradCheckEntry entry;
    entry.name = inputs[t].name;
    auto values = tensor.mutable_data();
    for (std::size_t index : indices) {
      const double original = values[index];
      values[index] = original + options.step;
      const double plus = loss_fn().item();
      values[index] = original - options.step;
      const double minus = loss_fn().item();
      values[index] = original;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double err = relative_error(analytic[t][index], numeric);
      if (entry.entries_checked++ == 0 || err > entry.max_relative_error) {
        entry.max_relative_error = err;
        entry.worst_index = index;
        entry.worst_analytic = analytic[t][index];
        entry.worst_numeric = numeric;
      }
    }
    entry.passed = entry.max_relative_error <= options.tolerance;
    report.max_relative_error = std::max(report.max_relative_error, entry.max_relative_error);
    report.passed = report.passed && entry.passed;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace ctdense
