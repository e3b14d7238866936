#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "idm/errors.hpp"

namespace idm {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

std::size_t dtype_size(DType dtype);
std::string dtype_name(DType dtype);
DType parse_dtype(const std::string& name);

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::F32 : DType::F64;
}

// Calls fn.template operator()<T>() with T = float or double.
template <class Fn>
decltype(auto) visit_dtype(DType dtype, Fn&& fn) {
  if (dtype == DType::F32) return fn.template operator()<float>();
  return fn.template operator()<double>();
}

using Shape = std::vector<std::int64_t>;

inline constexpr int kMaxRank = 5;

std::int64_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);
// Throws ShapeError unless 1 <= rank <= kMaxRank and every extent >= 1.
void validate_shape(const Shape& shape);

// Dense row-major array of f32 or f64 values. Copies are deep; there are no views.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, DType dtype = DType::F32);

  static Tensor zeros(Shape shape, DType dtype = DType::F32) { return Tensor(std::move(shape), dtype); }
  static Tensor full(Shape shape, double value, DType dtype = DType::F32);
  static Tensor ones(Shape shape, DType dtype = DType::F32) { return full(std::move(shape), 1.0, dtype); }
  static Tensor from_values(Shape shape, const std::vector<double>& values, DType dtype = DType::F32);

  bool empty() const noexcept { return shape_.empty(); }
  const Shape& shape() const noexcept { return shape_; }
  int rank() const noexcept { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int axis) const;
  std::int64_t numel() const noexcept { return shape_.empty() ? 0 : shape_numel(shape_); }
  DType dtype() const noexcept { return dtype_; }
  std::size_t bytes() const noexcept { return static_cast<std::size_t>(numel()) * dtype_size(dtype_); }

  template <class T>
  std::span<T> data() {
    check_type<T>();
    return std::get<std::vector<T>>(data_);
  }
  template <class T>
  std::span<const T> data() const {
    check_type<T>();
    return std::get<std::vector<T>>(data_);
  }

  // Flat element access in double, for tests and small bookkeeping.
  double get(std::int64_t index) const;
  void set(std::int64_t index, double value);
  std::vector<double> to_vector() const;

  Tensor astype(DType dtype) const;
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;
  void fill(double value);

 private:
  template <class T>
  void check_type() const {
    if (dtype_ != dtype_of<T>()) throw ShapeError("tensor dtype mismatch: tensor is " + dtype_name(dtype_));
  }

  Shape shape_;
  DType dtype_ = DType::F32;
  std::variant<std::vector<float>, std::vector<double>> data_;
};

// Bitwise equality of shape, dtype and payload.
bool identical(const Tensor& a, const Tensor& b);

std::size_t total_bytes(const std::vector<Tensor>& tensors);

}  // namespace idm
