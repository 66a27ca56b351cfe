#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ctdense/tensor.hpp"

namespace ctdense {

struct GradCheckOptions {
  double tolerance = 1e-4;
  double step = 1e-5;
  // Entries checked per tensor; 0 checks every entry. Sampled entries are
  // drawn with `seed` so reports are reproducible.
  std::size_t max_entries_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct GradCheckEntry {
  std::string name;
  std::size_t entries_checked = 0;
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;
  double max_relative_error = 0.0;
  bool passed = true;
};

// |analytic - numeric| / max(1e-6, |analytic| + |numeric|). The floor sits
// above the ~1e-11 roundoff of a central difference, so true zeros pass.
double relative_error(double analytic, double numeric);

struct NamedTensor64 {
  std::string name;
  Tensor64 tensor;
};

// Compares autograd gradients of `loss_fn` against central differences.
//
// `loss_fn` must rebuild the computation from the given leaves on every call
// and return a scalar. The analytic pass runs under a private tape; the
// perturbed passes run without recording. Each leaf must require gradients.
GradCheckReport grad_check(const std::function<Tensor64()>& loss_fn, const std::vector<NamedTensor64>& inputs,
                           const GradCheckOptions& options = {});

}  // namespace ctdense
