#include <iostream>

#include "ctdense_tools/cli.hpp"

int main(int argc, char** argv) {
  return ctdense::tools::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
