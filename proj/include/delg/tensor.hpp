#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "delg/common.hpp"

namespace delg {

// Dense row-major tensor of doubles. All training-side math is 64-bit; the
// feature file format quantizes descriptors to f32 on the way out.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;

  explicit Tensor(std::vector<int> dims, double fill = 0.0)
      : shape(std::move(dims)) {
    data.assign(size_t(checked_numel(shape)), fill);
  }

  static Tensor scalar(double v) {
    Tensor t;
    t.shape = {};
    t.data = {v};
    return t;
  }

  static Tensor from(std::vector<int> dims, std::vector<double> values) {
    Tensor t;
    t.shape = std::move(dims);
    if (checked_numel(t.shape) != int64_t(values.size()))
      fail(ErrorKind::shape,
           "tensor data length " + std::to_string(values.size()) +
               " does not match shape " + shape_str(t.shape));
    t.data = std::move(values);
    return t;
  }

  int rank() const { return int(shape.size()); }
  int dim(int i) const { return shape[size_t(i)]; }
  int64_t numel() const { return int64_t(data.size()); }

  double& operator[](int64_t i) { return data[size_t(i)]; }
  double operator[](int64_t i) const { return data[size_t(i)]; }

  double& at(int i) { return data[size_t(i)]; }
  double& at(int i, int j) { return data[size_t(i) * shape[1] + j]; }
  double& at(int i, int j, int k) {
    return data[(size_t(i) * shape[1] + j) * shape[2] + k];
  }
  double& at(int i, int j, int k, int l) {
    return data[((size_t(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }
  double at(int i) const { return data[size_t(i)]; }
  double at(int i, int j) const { return data[size_t(i) * shape[1] + j]; }
  double at(int i, int j, int k) const {
    return data[(size_t(i) * shape[1] + j) * shape[2] + k];
  }
  double at(int i, int j, int k, int l) const {
    return data[((size_t(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
  }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double l2_norm() const {
    double s = 0.0;
    for (double v : data) s += v * v;
    return std::sqrt(s);
  }

  std::string shape_str() const { return shape_str(shape); }

  static std::string shape_str(const std::vector<int>& dims) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < dims.size(); ++i) {
      if (i) os << ',';
      os << dims[i];
    }
    os << ']';
    return os.str();
  }

  static int64_t checked_numel(const std::vector<int>& dims) {
    int64_t n = 1;
    for (int d : dims) {
      if (d <= 0)
        fail(ErrorKind::shape, "non-positive dimension in shape " + shape_str(dims));
      n *= d;
    }
    return n;
  }
};

inline void require_same_shape(const Tensor& a, const Tensor& b,
                               const char* context) {
  if (!a.same_shape(b))
    fail(ErrorKind::shape, std::string(context) + ": shape mismatch " +
                               a.shape_str() + " vs " + b.shape_str());
}

}  // namespace delg
