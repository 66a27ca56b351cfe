#pragma once

#include <exception>
#include <iosfwd>
#include <string>
#include <vector>

#include "ctdense/densenet.hpp"

namespace ctdense::tools {

enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitData = 2,
  kExitDivergence = 3,
};

// Runs `ctdense <args...>` (args excludes the program name).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int exit_code_for(const std::exception& e);

// Architecture table in the usual DenseNet-BC layout, followed by
// `layers:` and `parameters:` lines.
std::string describe_model(const DenseNetConfig& config);

// Point i is the mean of values[max(0, i - window + 1) .. i].
std::vector<double> moving_average(const std::vector<double>& values, int window);

}  // namespace ctdense::tools
