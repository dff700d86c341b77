// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "emm/errors.hpp"

namespace emm {

/// Dense row-major tensor of doubles, rank 1 or 2. Small and boring by
/// design: shape plus a flat buffer. All numerics in the library are f64.
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(std::vector<size_t> shape) : shape_(std::move(shape)) {
    check_rank();
    data_.assign(element_count(), 0.0);
  }

  Tensor(std::vector<size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_rank();
    if (data_.size() != element_count()) {
      raise(ErrorCode::dimension, "tensor data size does not match shape");
    }
  }

  static Tensor vector(std::vector<double> values) {
    size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  static Tensor matrix(size_t rows, size_t cols, std::vector<double> values) {
    return Tensor({rows, cols}, std::move(values));
  }

  static Tensor zeros(std::vector<size_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<size_t> shape, double value) {
    Tensor t(std::move(shape));
    for (double& v : t.data_) v = value;
    return t;
  }

  const std::vector<size_t>& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  size_t size() const { return data_.size(); }

  size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
  size_t cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 0); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& buffer() { return data_; }
  const std::vector<double>& buffer() const { return data_; }

  double& operator[](size_t i) { return data_[i]; }
  double operator[](size_t i) const { return data_[i]; }

  double& at(size_t r, size_t c) { return data_[r * shape_[1] + c]; }
  double at(size_t r, size_t c) const { return data_[r * shape_[1] + c]; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  /// Raises a numeric error naming `where` if any element is NaN or inf.
  void require_finite(const std::string& where) const {
    if (!all_finite()) {
      raise(ErrorCode::numeric, "non-finite value in " + where);
    }
  }

  std::string shape_string() const {
    std::string s = "[";
    for (size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ", ";
      s += std::to_string(shape_[i]);
    }
    s += "]";
    return s;
  }

private:
  size_t element_count() const {
    size_t n = 1;
    for (size_t d : shape_) n *= d;
    return shape_.empty() ? 0 : n;
  }

  void check_rank() const {
    if (shape_.empty() || shape_.size() > 2) {
      raise(ErrorCode::dimension, "tensor rank must be 1 or 2");
    }
    for (size_t d : shape_) {
      if (d == 0) raise(ErrorCode::dimension, "tensor dimensions must be positive");
    }
  }

  std::vector<size_t> shape_;
  std::vector<double> data_;
};

}  // namespace emm
