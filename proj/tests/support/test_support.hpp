#pragma once

#include <unistd.h>

#include <filesystem>
#include <string>
#include <vector>

#include "ctdense/rng.hpp"
#include "ctdense/tensor.hpp"

namespace ctdense::testing {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<T> values(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : values) v = static_cast<T>(rng.normal() * scale);
  return Tensor<T>::from_vector(std::move(shape), std::move(values));
}

template <typename T>
Tensor<T> random_leaf(Shape shape, Rng& rng, double scale = 1.0) {
  auto t = random_tensor<T>(std::move(shape), rng, scale);
  t.set_requires_grad(true);
  return t;
}

// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("ctdense-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace ctdense::testing
