#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ptseg {

using Index = Eigen::Index;
using Shape = std::vector<Index>;
using Triple = std::array<Index, 3>;
using Spacing = std::array<double, 3>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Index numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), Index{1}, std::multiplies<>());
}

inline Index prod(const Triple& t) { return t[0] * t[1] * t[2]; }

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

/// C-order offset of (d, h, w) in a volume of the given shape.
inline Index flat_index(const Triple& shape, Index d, Index h, Index w) { return (d * shape[1] + h) * shape[2] + w; }

inline std::string to_string(const Triple& t) { return to_string(Shape(t.begin(), t.end())); }

/// Dense row-major (C-order) array of arbitrary rank backed by an Eigen array.
///
/// Rank-5 tensors follow the (batch, channel, depth, height, width) layout, so
/// the per-sample block is a column-major (voxels x channels) matrix, which is
/// what the channel-mixing kernels map onto.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;
  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(Array::Zero(numel(shape_))) {}
  Tensor(Shape shape, Scalar fill)
      : shape_(std::move(shape)), data_(Array::Constant(numel(shape_), fill)) {}
  Tensor(Shape shape, Array data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != numel(shape_)) throw ShapeError("tensor data size does not match shape " + to_string(shape_));
  }

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  const Shape& shape() const { return shape_; }
  Index dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }
  Index size() const { return data_.size(); }
  bool empty() const { return data_.size() == 0; }

  Array& array() { return data_; }
  const Array& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  /// Spatial voxel count of a rank-5 tensor.
  Index spatial() const { return shape_[2] * shape_[3] * shape_[4]; }
  Triple spatial_shape() const { return {shape_[2], shape_[3], shape_[4]}; }

  Scalar& at(Index n, Index c, Index d, Index h, Index w) {
    return data_[(((n * shape_[1] + c) * shape_[2] + d) * shape_[3] + h) * shape_[4] + w];
  }
  Scalar at(Index n, Index c, Index d, Index h, Index w) const {
    return data_[(((n * shape_[1] + c) * shape_[2] + d) * shape_[3] + h) * shape_[4] + w];
  }

  /// Column-major (voxels x channels) view of sample n of a rank-5 tensor.
  Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>> sample_matrix(Index n) {
    const Index s = spatial();
    return {data_.data() + n * shape_[1] * s, s, shape_[1]};
  }
  Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>> sample_matrix(Index n) const {
    const Index s = spatial();
    return {data_.data() + n * shape_[1] * s, s, shape_[1]};
  }

  Tensor reshaped(Shape s) const {
    if (numel(s) != size()) throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(s));
    return Tensor(std::move(s), data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool all_finite() const { return data_.isFinite().all(); }

 private:
  Shape shape_;
  Array data_;
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

inline void require_rank5(const Shape& s, const char* what) {
  if (s.size() != 5) throw ShapeError(std::string(what) + ": expected a rank-5 feature map, got " + to_string(s));
}

}  // namespace ptseg
