#include "idm/tensor.hpp"

#include <cstring>
#include <sstream>

namespace idm {

std::size_t dtype_size(DType dtype) { return dtype == DType::F32 ? 4 : 8; }

std::string dtype_name(DType dtype) { return dtype == DType::F32 ? "f32" : "f64"; }

DType parse_dtype(const std::string& name) {
  if (name == "f32") return DType::F32;
  if (name == "f64") return DType::F64;
  throw ShapeError("unknown dtype '" + name + "' (expected f32 or f64)");
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

void validate_shape(const Shape& shape) {
  if (shape.empty() || shape.size() > static_cast<std::size_t>(kMaxRank))
    throw ShapeError("invalid shape " + shape_string(shape) + ": rank must be 1.." + std::to_string(kMaxRank));
  for (auto e : shape)
    if (e < 1) throw ShapeError("invalid shape " + shape_string(shape) + ": extents must be >= 1");
}

Tensor::Tensor(Shape shape, DType dtype) : shape_(std::move(shape)), dtype_(dtype) {
  validate_shape(shape_);
  const auto n = static_cast<std::size_t>(shape_numel(shape_));
  if (dtype_ == DType::F32)
    data_ = std::vector<float>(n, 0.0f);
  else
    data_ = std::vector<double>(n, 0.0);
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t(std::move(shape), dtype);
  t.fill(value);
  return t;
}

Tensor Tensor::from_values(Shape shape, const std::vector<double>& values, DType dtype) {
  Tensor t(std::move(shape), dtype);
  if (static_cast<std::int64_t>(values.size()) != t.numel())
    throw ShapeError("from_values: " + std::to_string(values.size()) + " values for shape " + shape_string(t.shape()));
  visit_dtype(dtype, [&]<class T>() {
    auto d = t.data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) d[i] = static_cast<T>(values[i]);
  });
  return t;
}

std::int64_t Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) throw ShapeError("axis out of range for shape " + shape_string(shape_));
  return shape_[static_cast<std::size_t>(axis)];
}

double Tensor::get(std::int64_t index) const {
  return visit_dtype(dtype_, [&]<class T>() { return static_cast<double>(data<T>()[static_cast<std::size_t>(index)]); });
}

void Tensor::set(std::int64_t index, double value) {
  visit_dtype(dtype_, [&]<class T>() { data<T>()[static_cast<std::size_t>(index)] = static_cast<T>(value); });
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(static_cast<std::size_t>(numel()));
  for (std::int64_t i = 0; i < numel(); ++i) out[static_cast<std::size_t>(i)] = get(i);
  return out;
}

Tensor Tensor::astype(DType dtype) const {
  if (dtype == dtype_) return *this;
  Tensor out(shape_, dtype);
  visit_dtype(dtype_, [&]<class S>() {
    visit_dtype(dtype, [&]<class D>() {
      auto src = data<S>();
      auto dst = out.data<D>();
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<D>(src[i]);
    });
  });
  return out;
}

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  validate_shape(shape);
  if (shape_numel(shape) != numel())
    throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  shape_ = std::move(shape);
  return std::move(*this);
}

void Tensor::fill(double value) {
  visit_dtype(dtype_, [&]<class T>() {
    for (auto& v : data<T>()) v = static_cast<T>(value);
  });
}

bool identical(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
  if (a.empty()) return true;
  return visit_dtype(a.dtype(), [&]<class T>() {
    auto x = a.data<T>();
    auto y = b.data<T>();
    return std::memcmp(x.data(), y.data(), x.size_bytes()) == 0;
  });
}

std::size_t total_bytes(const std::vector<Tensor>& tensors) {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.bytes();
  return n;
}

}  // namespace idm
