#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dualnet {

#ifdef DUALNET_SINGLE_PRECISION
using Scalar = float;
#else
using Scalar = double;
#endif

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major array. Image batches use NCHW layout.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, Scalar fill = Scalar(0)) : shape_(std::move(shape)) {
    for (auto extent : shape_) {
      if (extent == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape_));
    }
    data_.assign(numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size()) {
      throw ShapeError("shape " + to_string(shape_) + " does not match " + std::to_string(data_.size()) +
                       " elements");
    }
  }

  const Shape& shape() const { return shape_; }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> values() { return data_; }
  std::span<const Scalar> values() const { return data_; }
  std::vector<Scalar>& storage() { return data_; }
  const std::vector<Scalar>& storage() const { return data_; }

  Scalar& operator[](std::size_t i) { return data_[i]; }
  Scalar operator[](std::size_t i) const { return data_[i]; }

  /// Elements per leading-axis slice (one sample of a batch).
  std::size_t stride0() const { return shape_.empty() ? 0 : data_.size() / shape_[0]; }

  void fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Scalar v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<Scalar> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

inline void require_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw NumericError(std::string(what) + ": non-finite value");
}

/// Copies samples `rows` of a batch tensor into a new batch.
inline Tensor gather_rows(const Tensor& batch, std::span<const std::size_t> rows) {
  Shape shape = batch.shape();
  shape[0] = rows.size();
  Tensor out(shape);
  const std::size_t stride = batch.stride0();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(batch.data() + rows[i] * stride, stride, out.data() + i * stride);
  }
  return out;
}

/// Concatenates along the leading axis.
inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.stride0() != b.stride0() || a.rank() != b.rank()) {
    throw ShapeError("concat_rows: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<Scalar> data(a.storage());
  data.insert(data.end(), b.storage().begin(), b.storage().end());
  return Tensor(std::move(shape), std::move(data));
}

/// Rows [begin, end) of a batch tensor.
inline Tensor slice_rows(const Tensor& batch, std::size_t begin, std::size_t end) {
  Shape shape = batch.shape();
  shape[0] = end - begin;
  const std::size_t stride = batch.stride0();
  return Tensor(shape, std::vector<Scalar>(batch.data() + begin * stride, batch.data() + end * stride));
}

}  // namespace dualnet
