#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <string>

#include "gridfill/errors.hpp"

namespace gridfill {

struct Shape {
  int height = 0;
  int width = 0;
  int channels = 0;

  Eigen::Index size() const { return Eigen::Index(height) * width * channels; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

inline std::string to_string(const Shape& s) {
  return std::to_string(s.height) + "x" + std::to_string(s.width) + "x" + std::to_string(s.channels);
}

/// Dense H x W x C tensor stored row-major with interleaved channels.
/// Used for latents and for pixel images alike.
template <typename Scalar_>
class Tensor3 {
 public:
  using Scalar = Scalar_;
  using Values = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor3() = default;
  explicit Tensor3(Shape shape) : shape_(shape), values_(Values::Zero(shape.size())) {}
  Tensor3(Shape shape, Values values) : shape_(shape), values_(std::move(values)) {
    if (values_.size() != shape_.size()) throw ShapeError("tensor value count does not match shape " + to_string(shape_));
  }

  static Tensor3 Constant(Shape shape, Scalar v) { return Tensor3(shape, Values::Constant(shape.size(), v)); }

  const Shape& shape() const { return shape_; }
  int height() const { return shape_.height; }
  int width() const { return shape_.width; }
  int channels() const { return shape_.channels; }
  Eigen::Index size() const { return values_.size(); }

  Values& values() { return values_; }
  const Values& values() const { return values_; }

  Eigen::Index offset(int y, int x, int c = 0) const { return (Eigen::Index(y) * shape_.width + x) * shape_.channels + c; }
  Scalar& operator()(int y, int x, int c) { return values_[offset(y, x, c)]; }
  Scalar operator()(int y, int x, int c) const { return values_[offset(y, x, c)]; }

  template <typename Other>
  Tensor3<Other> cast() const {
    return Tensor3<Other>(shape_, values_.template cast<Other>());
  }

  friend bool operator==(const Tensor3& a, const Tensor3& b) {
    return a.shape_ == b.shape_ && (a.values_ == b.values_).all();
  }

 private:
  Shape shape_{};
  Values values_;
};

/// H x W scalar plane (masks, depth maps). For masks 1 = known, 0 = unknown.
template <typename Scalar>
using Plane = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Mask = Plane<Scalar>;

using Image = Tensor3<float>;

template <typename A, typename B>
void require_same_shape(const Tensor3<A>& a, const Tensor3<B>& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

template <typename T, typename S>
void require_mask_fits(const Tensor3<T>& t, const Plane<S>& m, const char* what) {
  if (m.rows() != t.height() || m.cols() != t.width())
    throw ShapeError(std::string(what) + ": mask " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                     " does not fit tensor " + to_string(t.shape()));
}

using Rng = std::mt19937_64;

template <typename Scalar>
Tensor3<Scalar> randn(Shape shape, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor3<Scalar> out(shape);
  for (Eigen::Index i = 0; i < out.size(); ++i) out.values()[i] = Scalar(normal(rng));
  return out;
}

/// Applies a per-pixel mask to every channel: out = m * a + (1 - m) * b.
template <typename Scalar>
Tensor3<Scalar> blend(const Plane<Scalar>& mask, const Tensor3<Scalar>& a, const Tensor3<Scalar>& b) {
  require_same_shape(a, b, "blend");
  require_mask_fits(a, mask, "blend");
  Tensor3<Scalar> out(a.shape());
  const int c = a.channels();
  for (int y = 0; y < a.height(); ++y)
    for (int x = 0; x < a.width(); ++x) {
      const Scalar m = mask(y, x);
      for (int k = 0; k < c; ++k) out(y, x, k) = m * a(y, x, k) + (Scalar(1) - m) * b(y, x, k);
    }
  return out;
}

}  // namespace gridfill
