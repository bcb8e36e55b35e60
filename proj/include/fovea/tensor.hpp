#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace fovea {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<long>;

inline long shape_numel(const Shape& s) {
  long n = 1;
  for (long d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline void check_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

/// Dense row-major n-d array. Images are NCHW. The scalar type is float for
/// training and attacks; double instantiations back the gradient tests.
template <typename S>
struct Tensor {
  Shape shape;
  std::vector<S> data;

  Tensor() = default;
  explicit Tensor(Shape sh) : shape(std::move(sh)), data(shape_numel(shape), S(0)) {}
  Tensor(Shape sh, S fill) : shape(std::move(sh)), data(shape_numel(shape), fill) {}
  Tensor(Shape sh, std::vector<S> d) : shape(std::move(sh)), data(std::move(d)) {
    check_shape(static_cast<long>(data.size()) == shape_numel(shape),
                "tensor data length " + std::to_string(data.size()) +
                    " does not match shape " + shape_str(shape));
  }

  static Tensor zeros(Shape sh) { return Tensor(std::move(sh)); }
  static Tensor full(Shape sh, S v) { return Tensor(std::move(sh), v); }
  static Tensor scalar(S v) { return Tensor(Shape{}, std::vector<S>{v}); }

  long numel() const { return static_cast<long>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  long dim(int i) const { return shape[static_cast<size_t>(i)]; }

  S* ptr() { return data.data(); }
  const S* ptr() const { return data.data(); }

  S& operator[](long i) { return data[static_cast<size_t>(i)]; }
  const S& operator[](long i) const { return data[static_cast<size_t>(i)]; }

  // NCHW accessor, used by oracles and tests more than by kernels.
  S& at(long b, long c, long h, long w) {
    return data[static_cast<size_t>(((b * shape[1] + c) * shape[2] + h) * shape[3] + w)];
  }
  const S& at(long b, long c, long h, long w) const {
    return data[static_cast<size_t>(((b * shape[1] + c) * shape[2] + h) * shape[3] + w)];
  }

  using ArrayMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
  using ConstArrayMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;
  ArrayMap array() { return ArrayMap(data.data(), numel()); }
  ConstArrayMap array() const { return ConstArrayMap(data.data(), numel()); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (S v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }
};

template <typename S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename S>
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

}  // namespace fovea
