#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "coopdet/common.hpp"

namespace coopdet {

// Dense row-major tensor of doubles. Shapes are small (at most a few
// thousand elements), so a plain vector with explicit indexing is all the
// machinery this project needs.
struct Tensor {
  std::vector<int> dims;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> d) : dims(std::move(d)) {
    v.assign(static_cast<std::size_t>(count(dims)), 0.0);
  }
  Tensor(std::vector<int> d, std::vector<double> data)
      : dims(std::move(d)), v(std::move(data)) {
    check(static_cast<std::size_t>(count(dims)) == v.size(),
          "Tensor: data size does not match shape");
  }

  static std::int64_t count(const std::vector<int>& d) {
    std::int64_t n = 1;
    for (int x : d) n *= x;
    return n;
  }

  static Tensor zeros(std::vector<int> d) { return Tensor(std::move(d)); }

  static Tensor full(std::vector<int> d, double fill) {
    Tensor t(std::move(d));
    for (auto& x : t.v) x = fill;
    return t;
  }

  static Tensor scalar(double x) { return Tensor({1}, {x}); }

  int size() const { return static_cast<int>(v.size()); }
  bool same_shape(const Tensor& o) const { return dims == o.dims; }

  // 3-D (C,H,W) accessors; the workhorse layout of the pipeline.
  double& at(int c, int y, int x) {
    return v[static_cast<std::size_t>((c * dims[1] + y) * dims[2] + x)];
  }
  double at(int c, int y, int x) const {
    return v[static_cast<std::size_t>((c * dims[1] + y) * dims[2] + x)];
  }
  // 2-D (H,W) accessors.
  double& at(int y, int x) {
    return v[static_cast<std::size_t>(y * dims[1] + x)];
  }
  double at(int y, int x) const {
    return v[static_cast<std::size_t>(y * dims[1] + x)];
  }

  double& operator[](std::size_t i) { return v[i]; }
  double operator[](std::size_t i) const { return v[i]; }

  bool all_finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }

  double max_abs() const {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::fabs(x));
    return m;
  }

  Tensor& operator+=(const Tensor& o) {
    check(same_shape(o), "Tensor +=: shape mismatch");
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += o.v[i];
    return *this;
  }

  Tensor& operator*=(double s) {
    for (auto& x : v) x *= s;
    return *this;
  }

  void fill(double x) {
    for (auto& y : v) y = x;
  }

  bool operator==(const Tensor& o) const { return dims == o.dims && v == o.v; }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < dims.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(dims[i]);
    }
    return s + "]";
  }
};

inline void check_shape(const Tensor& t, const std::vector<int>& want,
                        const std::string& what) {
  if (t.dims != want)
    throw ArchitectureError(what + ": expected shape " +
                            Tensor(want).shape_str() + ", got " +
                            t.shape_str());
}

}  // namespace coopdet
