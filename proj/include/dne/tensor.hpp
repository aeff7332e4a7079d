// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dne/error.hpp"

namespace dne {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

/// Dense row-major array of doubles. Parameters additionally carry a
/// gradient buffer and a frozen flag; optimizers never touch frozen tensors.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty when no gradient has been accumulated
  bool frozen = false;

  Tensor() = default;

  explicit Tensor(Shape s, double fill = 0.0)
      : shape(std::move(s)), data(shape_numel(shape), fill) {
    validate();
  }

  Tensor(Shape s, std::vector<double> values)
      : shape(std::move(s)), data(std::move(values)) {
    validate();
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }

  static Tensor identity(std::size_t n) {
    Tensor t = matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) t.data[i * n + i] = 1.0;
    return t;
  }

  bool empty() const { return data.empty(); }
  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }

  std::size_t rows() const {
    require_matrix();
    return shape[0];
  }
  std::size_t cols() const {
    require_matrix();
    return shape[1];
  }

  double& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

  bool has_grad() const { return !grad.empty(); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }

  void zero_grad() { grad.clear(); }

  void require_matrix() const {
    if (shape.size() != 2)
      throw ShapeError("expected a matrix, got shape " + shape_string(shape));
  }

 private:
  void validate() const {
    for (auto d : shape)
      if (d == 0) throw ShapeError("zero-sized dimension in " + shape_string(shape));
    if (shape_numel(shape) != data.size())
      throw ShapeError("shape " + shape_string(shape) + " does not match " +
                       std::to_string(data.size()) + " values");
  }
};

/// Normal samples truncated at two standard deviations (redrawn, not clamped).
inline void fill_truncated_normal(Tensor& t, Rng& rng, double stddev) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : t.data) {
    double x = normal(rng);
    while (std::abs(x) > 2.0) x = normal(rng);
    v = x * stddev;
  }
}

inline void fill_uniform(Tensor& t, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data) v = dist(rng);
}

inline Tensor random_matrix(std::size_t rows, std::size_t cols, Rng& rng,
                            double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::matrix(rows, cols);
  fill_uniform(t, rng, lo, hi);
  return t;
}

}  // namespace dne
