#pragma once

#include <cassert>
#include <cstddef>
#include <vector>

namespace prefgate {

// Dense row-major tensor of doubles, rank 1 or 2.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;

  static Tensor vec(std::size_t n, double fill = 0.0) {
    Tensor t;
    t.shape = {n};
    t.data.assign(n, fill);
    return t;
  }

  static Tensor mat(std::size_t r, std::size_t c, double fill = 0.0) {
    Tensor t;
    t.shape = {r, c};
    t.data.assign(r * c, fill);
    return t;
  }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t rows() const { return rank() == 2 ? shape[0] : 1; }
  std::size_t cols() const { return shape.empty() ? 0 : shape.back(); }

  double& operator()(std::size_t r, std::size_t c) {
    assert(r < rows() && c < cols());
    return data[r * cols() + c];
  }
  double operator()(std::size_t r, std::size_t c) const {
    assert(r < rows() && c < cols());
    return data[r * cols() + c];
  }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  void fill(double v) { data.assign(data.size(), v); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool operator==(const Tensor&) const = default;
};

}  // namespace prefgate
