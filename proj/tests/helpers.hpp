#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include "angio/rng.hpp"
#include "angio/tensor.hpp"

namespace testutil {

using angio::Rng;
using angio::nn::Tensor;

inline Tensor random_tensor(std::vector<int> shape, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (auto& v : t.v) v = rng.normal(0.0, scale);
  return t;
}

inline Tensor random_unit_tensor(std::vector<int> shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (auto& v : t.v) v = rng.uniform();
  return t;
}

// Fresh scratch directory under the build tree.
class TempDir {
 public:
  explicit TempDir(const std::string& name) {
    path_ = std::filesystem::temp_directory_path() /
            ("angiogen_test_" + name + "_" + std::to_string(counter()++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }

 private:
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline bool files_identical(const std::filesystem::path& a, const std::filesystem::path& b) {
  return read_file(a) == read_file(b);
}

}  // namespace testutil
