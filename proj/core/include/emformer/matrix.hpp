#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "emformer/error.hpp"

namespace emformer {

// Read-only span whose element type does not participate in deduction, so
// std::vector arguments bind without naming the template argument.
template <typename Real>
using ConstSpan = std::span<const std::type_identity_t<Real>>;

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

template <typename Real>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<Real, float> || std::is_same_v<Real, double>);
  return std::is_same_v<Real, float> ? DType::F32 : DType::F64;
}

// Dense row-major matrix of frames. Rows are frames (or queries/keys),
// columns are features.
template <typename Real>
class Matrix {
 public:
  using value_type = Real;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, Real fill = Real(0))
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<Real> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                       " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }
  Matrix(std::initializer_list<std::initializer_list<Real>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      if (r.size() != cols_) throw ShapeError("ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix row_vector(std::span<const Real> values) {
    return Matrix(1, values.size(), std::vector<Real>(values.begin(), values.end()));
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return rows_ == 0; }

  Real& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  Real operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<Real> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const Real> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<Real> data() { return data_; }
  std::span<const Real> data() const { return data_; }

  // Rows [begin, end).
  Matrix slice_rows(std::size_t begin, std::size_t end) const {
    if (begin > end || end > rows_) throw ShapeError("row slice out of range");
    return Matrix(end - begin, cols_,
                  std::vector<Real>(data_.begin() + begin * cols_, data_.begin() + end * cols_));
  }

  void append_rows(const Matrix& other) {
    if (other.rows_ == 0) return;
    if (rows_ == 0 && cols_ == 0) cols_ = other.cols_;
    if (other.cols_ != cols_) throw ShapeError("append_rows: column mismatch");
    data_.insert(data_.end(), other.data_.begin(), other.data_.end());
    rows_ += other.rows_;
  }

  void append_row(std::span<const Real> values) {
    if (rows_ == 0 && cols_ == 0) cols_ = values.size();
    if (values.size() != cols_) throw ShapeError("append_row: column mismatch");
    data_.insert(data_.end(), values.begin(), values.end());
    ++rows_;
  }

  // Adds other's rows into rows [offset, offset + other.rows()).
  void add_rows_at(std::size_t offset, const Matrix& other) {
    if (other.cols_ != cols_ || offset + other.rows_ > rows_) {
      throw ShapeError("add_rows_at out of range");
    }
    Real* dst = data_.data() + offset * cols_;
    for (std::size_t i = 0; i < other.data_.size(); ++i) dst[i] += other.data_[i];
  }

  void set_rows_at(std::size_t offset, const Matrix& other) {
    if (other.cols_ != cols_ || offset + other.rows_ > rows_) {
      throw ShapeError("set_rows_at out of range");
    }
    std::copy(other.data_.begin(), other.data_.end(), data_.begin() + offset * cols_);
  }

  Matrix& operator+=(const Matrix& other) {
    if (other.rows_ != rows_ || other.cols_ != cols_) throw ShapeError("operator+= shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  template <typename Other>
  Matrix<Other> cast() const {
    std::vector<Other> out(data_.begin(), data_.end());
    return Matrix<Other>(rows_, cols_, std::move(out));
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<Real> data_;
};

template <typename Real>
Matrix<Real> operator+(Matrix<Real> a, const Matrix<Real>& b) {
  a += b;
  return a;
}

// Vertical concatenation; empty parts are skipped.
template <typename Real>
Matrix<Real> vstack(std::initializer_list<const Matrix<Real>*> parts) {
  std::size_t rows = 0;
  std::size_t cols = 0;
  for (const auto* p : parts) {
    if (cols == 0) cols = p->cols();
    if (p->rows() == 0) continue;
    if (p->cols() != cols) throw ShapeError("vstack: column mismatch");
    rows += p->rows();
  }
  std::vector<Real> data;
  data.reserve(rows * cols);
  for (const auto* p : parts) {
    if (p->rows() == 0) continue;
    data.insert(data.end(), p->data().begin(), p->data().end());
  }
  return Matrix<Real>(rows, cols, std::move(data));
}

template <typename Real>
bool bitwise_equal(const Matrix<Real>& a, const Matrix<Real>& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         (a.size() == 0 || std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(Real)) == 0);
}

template <typename Real>
double max_abs_diff(const Matrix<Real>& a, const Matrix<Real>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError("max_abs_diff shape mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  }
  return worst;
}

template <typename Real>
bool all_finite(const Matrix<Real>& m) {
  for (Real v : m.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// Query-by-key allowed/disallowed flags.
class BoolMask {
 public:
  BoolMask() = default;
  BoolMask(std::size_t rows, std::size_t cols, bool allowed)
      : rows_(rows), cols_(cols), data_(rows * cols, allowed ? 1 : 0) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  bool operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c] != 0; }
  void set(std::size_t r, std::size_t c, bool allowed) { data_[r * cols_ + c] = allowed ? 1 : 0; }

  std::size_t allowed_in_row(std::size_t r) const {
    std::size_t n = 0;
    for (std::size_t c = 0; c < cols_; ++c) n += data_[r * cols_ + c];
    return n;
  }

  bool operator==(const BoolMask&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> data_;
};

}  // namespace emformer
