#pragma once

#include <cstddef>
#include <deque>
#include <span>
#include <vector>

#include "emformer/error.hpp"
#include "emformer/matrix.hpp"

namespace emformer {

// Fixed-capacity ring of feature rows; the oldest row is evicted first.
// Capacity 0 holds nothing and drops every push.
template <typename Real>
class RowRing {
 public:
  RowRing() = default;
  RowRing(std::size_t capacity, std::size_t dim) : capacity_(capacity), dim_(dim), storage_(capacity * dim) {}

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return size_; }
  bool empty() const { return size_ == 0; }

  void push(std::span<const Real> row) {
    if (row.size() != dim_) throw ShapeError("RowRing::push: row width mismatch");
    if (capacity_ == 0) return;
    const std::size_t slot = (head_ + size_) % capacity_;
    std::copy(row.begin(), row.end(), storage_.begin() + slot * dim_);
    if (size_ < capacity_) {
      ++size_;
    } else {
      head_ = (head_ + 1) % capacity_;
    }
  }

  void push_rows(const Matrix<Real>& rows) {
    for (std::size_t i = 0; i < rows.rows(); ++i) push(rows.row(i));
  }

  // i = 0 is the oldest retained row.
  std::span<const Real> row(std::size_t i) const {
    if (i >= size_) throw ShapeError("RowRing::row out of range");
    return {storage_.data() + ((head_ + i) % capacity_) * dim_, dim_};
  }

  // Retained rows, oldest first.
  Matrix<Real> to_matrix() const {
    Matrix<Real> out(size_, dim_);
    for (std::size_t i = 0; i < size_; ++i) {
      auto r = row(i);
      std::copy(r.begin(), r.end(), out.row(i).begin());
    }
    return out;
  }

  void clear() {
    head_ = 0;
    size_ = 0;
  }

 private:
  std::size_t capacity_ = 0;
  std::size_t dim_ = 0;
  std::size_t head_ = 0;
  std::size_t size_ = 0;
  std::vector<Real> storage_;
};

// Ring of memory vectors, each tagged with the segment that produced it.
template <typename Real>
class MemoryBank {
 public:
  MemoryBank() = default;
  MemoryBank(std::size_t capacity, std::size_t dim) : ring_(capacity, dim) {}

  std::size_t capacity() const { return ring_.capacity(); }
  std::size_t size() const { return ring_.size(); }
  bool empty() const { return ring_.empty(); }

  void push(std::span<const Real> vec, std::size_t segment) {
    if (!segments_.empty() && segment <= segments_.back()) {
      throw StateError("MemoryBank::push: segment indices must increase");
    }
    if (ring_.capacity() == 0) return;
    ring_.push(vec);
    segments_.push_back(segment);
    if (segments_.size() > ring_.capacity()) segments_.pop_front();
  }

  const std::deque<std::size_t>& segments() const { return segments_; }
  Matrix<Real> vectors() const { return ring_.to_matrix(); }

 private:
  RowRing<Real> ring_;
  std::deque<std::size_t> segments_;
};

}  // namespace emformer
