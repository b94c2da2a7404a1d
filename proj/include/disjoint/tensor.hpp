// Dense n-dimensional tensor value type backing the autodiff tape.
// Storage is a flat row-major Eigen array; matrix views are mapped on demand.
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace disjoint {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ValueError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename Scalar>
using FlatArray = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
struct Tensor {
  Shape shape;
  FlatArray<Scalar> v;

  Tensor() = default;
  Tensor(Shape s, FlatArray<Scalar> values) : shape(std::move(s)), v(std::move(values)) {
    if (v.size() != numel(shape))
      throw ShapeError("tensor: " + std::to_string(v.size()) + " values for shape " + shape_str(shape));
  }

  static Tensor zeros(Shape s) {
    Tensor t;
    t.v = FlatArray<Scalar>::Zero(numel(s));
    t.shape = std::move(s);
    return t;
  }
  static Tensor full(Shape s, Scalar value) {
    Tensor t;
    t.v = FlatArray<Scalar>::Constant(numel(s), value);
    t.shape = std::move(s);
    return t;
  }
  static Tensor scalar(Scalar value) { return full({1}, value); }

  Index size() const { return v.size(); }
  Index rows() const { return shape.empty() ? 1 : shape[0]; }
  Index cols() const {
    Index n = 1;
    for (size_t i = 1; i < shape.size(); ++i) n *= shape[i];
    return n;
  }
  Scalar item() const {
    if (v.size() != 1) throw ShapeError("item: tensor has shape " + shape_str(shape));
    return v[0];
  }

  // 2-D matrix view: first dim x rest.
  Eigen::Map<const MatrixRM<Scalar>> mat() const { return {v.data(), rows(), cols()}; }
  Eigen::Map<MatrixRM<Scalar>> mat() { return {v.data(), rows(), cols()}; }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape = shape;
    out.v = v.template cast<T>();
    return out;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool all_finite() const { return v.isFinite().all(); }
};

template <typename Scalar>
Tensor<Scalar> make_tensor(Shape shape, std::initializer_list<Scalar> values) {
  FlatArray<Scalar> v(static_cast<Index>(values.size()));
  Index i = 0;
  for (Scalar x : values) v[i++] = x;
  return Tensor<Scalar>(std::move(shape), std::move(v));
}

}  // namespace disjoint
