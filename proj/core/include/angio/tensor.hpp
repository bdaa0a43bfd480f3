#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "angio/error.hpp"
#include "angio/rng.hpp"

namespace angio::nn {

// Dense row-major tensor of doubles. Small and value-semantic; every image,
// frame, feature map and parameter in the project is one of these.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    v.assign(static_cast<std::size_t>(numel_of(shape)), 0.0);
  }
  Tensor(std::vector<int> s, std::vector<double> data)
      : shape(std::move(s)), v(std::move(data)) {
    require(static_cast<std::int64_t>(v.size()) == numel_of(shape), "shape",
            "tensor data does not match shape");
  }

  static std::int64_t numel_of(const std::vector<int>& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<int> s, double value) {
    Tensor t(std::move(s));
    for (auto& x : t.v) x = value;
    return t;
  }

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  static Tensor randn(std::vector<int> s, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(s));
    for (auto& x : t.v) x = rng.normal(0.0, stddev);
    return t;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape.size()); }

  double& at(std::initializer_list<int> idx) { return v[offset(idx)]; }
  double at(std::initializer_list<int> idx) const { return v[offset(idx)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  double sum() const {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  double mean() const { return v.empty() ? 0.0 : sum() / static_cast<double>(v.size()); }
  double min() const;
  double max() const;
  bool all_finite() const;

  std::string shape_str() const;

 private:
  std::size_t offset(std::initializer_list<int> idx) const {
    std::size_t off = 0;
    std::size_t k = 0;
    for (int i : idx) {
      off = off * static_cast<std::size_t>(shape[k]) + static_cast<std::size_t>(i);
      ++k;
    }
    return off;
  }
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* where) {
  require(a.same_shape(b), "shape",
          std::string(where) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace angio::nn
