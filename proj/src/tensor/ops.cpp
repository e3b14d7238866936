#include "idm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "idm/flops.hpp"

namespace idm::ops {

namespace {

void check_finite_debug([[maybe_unused]] const Tensor& t, [[maybe_unused]] const char* op) {
#ifndef NDEBUG
  if (!t.empty() && !all_finite(t)) throw NumericDomainError(std::string("non-finite output from ") + op);
#endif
}

void require_same_dtype(const Tensor& a, const Tensor& b, const char* op) {
  if (a.dtype() != b.dtype()) throw ShapeError(std::string(op) + ": dtype mismatch");
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Applies fn(a_i, b_j) with b (or a) cycled over a trailing-shape match.
template <class Fn>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, Fn fn) {
  require_same_dtype(a, b, op);
  const bool a_big = is_suffix(b.shape(), a.shape());
  const bool b_big = !a_big && is_suffix(a.shape(), b.shape());
  if (!a_big && !b_big)
    throw ShapeError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) +
                     " do not broadcast");
  Tensor out(a_big ? a.shape() : b.shape(), a.dtype());
  visit_dtype(a.dtype(), [&]<class T>() {
    auto x = a.data<T>();
    auto y = b.data<T>();
    auto o = out.data<T>();
    const std::size_t n = o.size();
    const std::size_t nx = x.size();
    const std::size_t ny = y.size();
    if (nx == n && ny == n) {
      for (std::size_t i = 0; i < n; ++i) o[i] = fn(x[i], y[i]);
    } else {
      for (std::size_t i = 0; i < n; ++i) o[i] = fn(x[i % nx], y[i % ny]);
    }
  });
  flops::add(static_cast<std::uint64_t>(out.numel()));
  check_finite_debug(out, op);
  return out;
}

template <class Fn>
Tensor unary(const Tensor& x, const char* op, Fn fn) {
  Tensor out(x.shape(), x.dtype());
  visit_dtype(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out.data<T>();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = fn(src[i]);
  });
  flops::add(static_cast<std::uint64_t>(x.numel()));
  check_finite_debug(out, op);
  return out;
}

struct ConvDims {
  std::int64_t batch, cin, cout, d, h, w, k, od, oh, ow;
  int stride, pad;
};

ConvDims conv_dims(const Shape& xs, const Shape& ks, int stride, int padding) {
  if (xs.size() != 5) throw ShapeError("conv3d: input must be [B,C,D,H,W], got " + shape_string(xs));
  if (ks.size() != 5) throw ShapeError("conv3d: kernel must be [C',C,k,k,k], got " + shape_string(ks));
  if (ks[2] != ks[3] || ks[2] != ks[4]) throw ShapeError("conv3d: kernel must be cubic");
  if (ks[1] != xs[1])
    throw ShapeError("conv3d: channel mismatch, input has " + std::to_string(xs[1]) + ", kernel expects " +
                     std::to_string(ks[1]));
  if (stride < 1 || padding < 0) throw ShapeError("conv3d: invalid stride/padding");
  ConvDims c{};
  c.batch = xs[0];
  c.cin = xs[1];
  c.cout = ks[0];
  c.d = xs[2];
  c.h = xs[3];
  c.w = xs[4];
  c.k = ks[2];
  c.stride = stride;
  c.pad = padding;
  auto out_extent = [&](std::int64_t n) { return (n + 2 * padding - c.k) / stride + 1; };
  c.od = out_extent(c.d);
  c.oh = out_extent(c.h);
  c.ow = out_extent(c.w);
  if (c.od < 1 || c.oh < 1 || c.ow < 1) throw ShapeError("conv3d: kernel larger than padded input");
  return c;
}

// Range of output positions o in [0, out) for which o*s - p + k lies inside [0, in).
inline void valid_range(std::int64_t in, std::int64_t out, int s, int p, std::int64_t k, std::int64_t& lo,
                        std::int64_t& hi) {
  // o*s >= p - k  and  o*s <= in - 1 + p - k
  const std::int64_t a = p - k;
  lo = a <= 0 ? 0 : (a + s - 1) / s;
  const std::int64_t b = in - 1 + p - k;
  hi = b < 0 ? 0 : std::min(out, b / s + 1);
  if (hi < lo) hi = lo;
}

constexpr std::int64_t kParallelThreshold = 1 << 15;

template <class T>
void conv_forward(const ConvDims& c, const T* x, const T* w, T* y) {
  const std::int64_t in_vol = c.d * c.h * c.w;
  const std::int64_t out_vol = c.od * c.oh * c.ow;
  const std::int64_t k3 = c.k * c.k * c.k;
  const std::int64_t work = c.batch * c.cout * c.cin * k3 * out_vol;
#pragma omp parallel for collapse(2) schedule(static) if (work > kParallelThreshold)
  for (std::int64_t b = 0; b < c.batch; ++b) {
    for (std::int64_t co = 0; co < c.cout; ++co) {
      std::vector<double> acc(static_cast<std::size_t>(out_vol), 0.0);
      double* yp = acc.data();
      for (std::int64_t ci = 0; ci < c.cin; ++ci) {
        const T* xp = x + (b * c.cin + ci) * in_vol;
        const T* wp = w + (co * c.cin + ci) * k3;
        for (std::int64_t kd = 0; kd < c.k; ++kd) {
          std::int64_t od_lo, od_hi;
          valid_range(c.d, c.od, c.stride, c.pad, kd, od_lo, od_hi);
          for (std::int64_t kh = 0; kh < c.k; ++kh) {
            std::int64_t oh_lo, oh_hi;
            valid_range(c.h, c.oh, c.stride, c.pad, kh, oh_lo, oh_hi);
            for (std::int64_t kw = 0; kw < c.k; ++kw) {
              std::int64_t ow_lo, ow_hi;
              valid_range(c.w, c.ow, c.stride, c.pad, kw, ow_lo, ow_hi);
              const double wv = wp[(kd * c.k + kh) * c.k + kw];
              for (std::int64_t od = od_lo; od < od_hi; ++od) {
                const std::int64_t id = od * c.stride - c.pad + kd;
                for (std::int64_t oh = oh_lo; oh < oh_hi; ++oh) {
                  const std::int64_t ih = oh * c.stride - c.pad + kh;
                  const T* xrow = xp + (id * c.h + ih) * c.w;
                  const std::int64_t off = kw - c.pad;
                  double* yrow = yp + (od * c.oh + oh) * c.ow;
                  if (c.stride == 1) {
                    for (std::int64_t ow = ow_lo; ow < ow_hi; ++ow) yrow[ow] += wv * xrow[ow + off];
                  } else {
                    for (std::int64_t ow = ow_lo; ow < ow_hi; ++ow) yrow[ow] += wv * xrow[ow * c.stride + off];
                  }
                }
              }
            }
          }
        }
      }
      T* out = y + (b * c.cout + co) * out_vol;
      for (std::int64_t i = 0; i < out_vol; ++i) out[i] = static_cast<T>(acc[static_cast<std::size_t>(i)]);
    }
  }
}

template <class T>
void conv_backward_input(const ConvDims& c, const T* dy, const T* w, T* dx) {
  const std::int64_t in_vol = c.d * c.h * c.w;
  const std::int64_t out_vol = c.od * c.oh * c.ow;
  const std::int64_t k3 = c.k * c.k * c.k;
  const std::int64_t work = c.batch * c.cout * c.cin * k3 * out_vol;
#pragma omp parallel for collapse(2) schedule(static) if (work > kParallelThreshold)
  for (std::int64_t b = 0; b < c.batch; ++b) {
    for (std::int64_t ci = 0; ci < c.cin; ++ci) {
      std::vector<double> acc(static_cast<std::size_t>(in_vol), 0.0);
      double* dxp = acc.data();
      for (std::int64_t co = 0; co < c.cout; ++co) {
        const T* dyp = dy + (b * c.cout + co) * out_vol;
        const T* wp = w + (co * c.cin + ci) * k3;
        for (std::int64_t kd = 0; kd < c.k; ++kd) {
          std::int64_t od_lo, od_hi;
          valid_range(c.d, c.od, c.stride, c.pad, kd, od_lo, od_hi);
          for (std::int64_t kh = 0; kh < c.k; ++kh) {
            std::int64_t oh_lo, oh_hi;
            valid_range(c.h, c.oh, c.stride, c.pad, kh, oh_lo, oh_hi);
            for (std::int64_t kw = 0; kw < c.k; ++kw) {
              std::int64_t ow_lo, ow_hi;
              valid_range(c.w, c.ow, c.stride, c.pad, kw, ow_lo, ow_hi);
              const double wv = wp[(kd * c.k + kh) * c.k + kw];
              for (std::int64_t od = od_lo; od < od_hi; ++od) {
                const std::int64_t id = od * c.stride - c.pad + kd;
                for (std::int64_t oh = oh_lo; oh < oh_hi; ++oh) {
                  const std::int64_t ih = oh * c.stride - c.pad + kh;
                  double* xrow = dxp + (id * c.h + ih) * c.w;
                  const std::int64_t off = kw - c.pad;
                  const T* yrow = dyp + (od * c.oh + oh) * c.ow;
                  if (c.stride == 1) {
                    for (std::int64_t ow = ow_lo; ow < ow_hi; ++ow) xrow[ow + off] += wv * yrow[ow];
                  } else {
                    for (std::int64_t ow = ow_lo; ow < ow_hi; ++ow) xrow[ow * c.stride + off] += wv * yrow[ow];
                  }
                }
              }
            }
          }
        }
      }
      T* out = dx + (b * c.cin + ci) * in_vol;
      for (std::int64_t i = 0; i < in_vol; ++i) out[i] = static_cast<T>(acc[static_cast<std::size_t>(i)]);
    }
  }
}

template <class T>
void conv_backward_kernel(const ConvDims& c, const T* x, const T* dy, T* dw) {
  const std::int64_t in_vol = c.d * c.h * c.w;
  const std::int64_t out_vol = c.od * c.oh * c.ow;
  const std::int64_t k3 = c.k * c.k * c.k;
  const std::int64_t work = c.batch * c.cout * c.cin * k3 * out_vol;
#pragma omp parallel for collapse(2) schedule(static) if (work > kParallelThreshold)
  for (std::int64_t co = 0; co < c.cout; ++co) {
    for (std::int64_t ci = 0; ci < c.cin; ++ci) {
      T* wp = dw + (co * c.cin + ci) * k3;
      for (std::int64_t kd = 0; kd < c.k; ++kd) {
        std::int64_t od_lo, od_hi;
        valid_range(c.d, c.od, c.stride, c.pad, kd, od_lo, od_hi);
        for (std::int64_t kh = 0; kh < c.k; ++kh) {
          std::int64_t oh_lo, oh_hi;
          valid_range(c.h, c.oh, c.stride, c.pad, kh, oh_lo, oh_hi);
          for (std::int64_t kw = 0; kw < c.k; ++kw) {
            std::int64_t ow_lo, ow_hi;
            valid_range(c.w, c.ow, c.stride, c.pad, kw, ow_lo, ow_hi);
            double acc = 0;
            for (std::int64_t b = 0; b < c.batch; ++b) {
              const T* xp = x + (b * c.cin + ci) * in_vol;
              const T* dyp = dy + (b * c.cout + co) * out_vol;
              for (std::int64_t od = od_lo; od < od_hi; ++od) {
                const std::int64_t id = od * c.stride - c.pad + kd;
                for (std::int64_t oh = oh_lo; oh < oh_hi; ++oh) {
                  const std::int64_t ih = oh * c.stride - c.pad + kh;
                  const T* xrow = xp + (id * c.h + ih) * c.w;
                  const std::int64_t off = kw - c.pad;
                  const T* yrow = dyp + (od * c.oh + oh) * c.ow;
                  if (c.stride == 1) {
                    for (std::int64_t ow = ow_lo; ow < ow_hi; ++ow) acc += static_cast<double>(yrow[ow]) * xrow[ow + off];
                  } else {
                    for (std::int64_t ow = ow_lo; ow < ow_hi; ++ow)
                      acc += static_cast<double>(yrow[ow]) * xrow[ow * c.stride + off];
                  }
                }
              }
            }
            wp[(kd * c.k + kh) * c.k + kw] = static_cast<T>(acc);
          }
        }
      }
    }
  }
}

std::uint64_t conv_flops(const ConvDims& c) {
  return 2ull * static_cast<std::uint64_t>(c.batch * c.cout * c.cin * c.k * c.k * c.k * c.od * c.oh * c.ow);
}

}  // namespace

Tensor randn(Prng& prng, const Shape& shape, DType dtype) {
  Tensor out(shape, dtype);
  visit_dtype(dtype, [&]<class T>() {
    auto d = out.data<T>();
    std::size_t i = 0;
    while (i < d.size()) {
      const double u1 = 1.0 - prng.uniform();  // (0, 1]
      const double u2 = prng.uniform();
      const double r = std::sqrt(-2.0 * std::log(u1));
      const double theta = 2.0 * std::numbers::pi * u2;
      d[i++] = static_cast<T>(r * std::cos(theta));
      if (i < d.size()) d[i++] = static_cast<T>(r * std::sin(theta));
    }
  });
  return out;
}

Tensor rand_uniform(Prng& prng, const Shape& shape, double lo, double hi, DType dtype) {
  Tensor out(shape, dtype);
  visit_dtype(dtype, [&]<class T>() {
    for (auto& v : out.data<T>()) v = static_cast<T>(prng.uniform(lo, hi));
  });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(a, b, "add", [](auto x, auto y) { return x + y; });
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(a, b, "sub", [](auto x, auto y) { return x - y; });
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(a, b, "mul", [](auto x, auto y) { return x * y; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  const double smallest = visit_dtype(b.dtype(), [&]<class T>() {
    double m = std::numeric_limits<double>::infinity();
    for (auto v : b.data<T>()) m = std::min(m, std::abs(static_cast<double>(v)));
    return m;
  });
  if (!(smallest >= kDivisionFloor))
    throw NumericDomainError("div: divisor magnitude " + std::to_string(smallest) + " below floor 1e-12");
  return binary(a, b, "div", [](auto x, auto y) { return x / y; });
}

Tensor exp(const Tensor& x) {
  return unary(x, "exp", [](auto v) { return std::exp(v); });
}
Tensor tanh(const Tensor& x) {
  return unary(x, "tanh", [](auto v) { return std::tanh(v); });
}
Tensor sigmoid(const Tensor& x) {
  return unary(x, "sigmoid", [](auto v) { return decltype(v)(1) / (decltype(v)(1) + std::exp(-v)); });
}
Tensor silu(const Tensor& x) {
  return unary(x, "silu", [](auto v) { return v / (decltype(v)(1) + std::exp(-v)); });
}
Tensor silu_grad(const Tensor& z) {
  return unary(z, "silu_grad", [](auto v) {
    using T = decltype(v);
    const T s = T(1) / (T(1) + std::exp(-v));
    return s * (T(1) + v * (T(1) - s));
  });
}
Tensor scale(const Tensor& x, double alpha) {
  return unary(x, "scale", [alpha](auto v) { return static_cast<decltype(v)>(alpha) * v; });
}
Tensor add_scalar(const Tensor& x, double value) {
  return unary(x, "add_scalar", [value](auto v) { return v + static_cast<decltype(v)>(value); });
}
Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(x, "clamp", [lo, hi](auto v) {
    using T = decltype(v);
    return std::clamp(v, static_cast<T>(lo), static_cast<T>(hi));
  });
}

Tensor axpy(const Tensor& a, double alpha, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("axpy: shape mismatch");
  return binary(a, b, "axpy", [alpha](auto x, auto y) { return x + static_cast<decltype(x)>(alpha) * y; });
}

void accumulate(Tensor& acc, const Tensor& b) {
  if (acc.shape() != b.shape()) throw ShapeError("accumulate: shape mismatch " + shape_string(acc.shape()) + " vs " +
                                                 shape_string(b.shape()));
  require_same_dtype(acc, b, "accumulate");
  visit_dtype(acc.dtype(), [&]<class T>() {
    auto d = acc.data<T>();
    auto s = b.data<T>();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  });
  flops::add(static_cast<std::uint64_t>(acc.numel()));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "matmul");
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul: operands must be rank 2");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  Tensor out({m, n}, a.dtype());
  visit_dtype(a.dtype(), [&]<class T>() {
    auto x = a.data<T>();
    auto y = b.data<T>();
    auto o = out.data<T>();
#pragma omp parallel for schedule(static) if (m * n * k > kParallelThreshold)
    for (std::int64_t i = 0; i < m; ++i) {
      T* orow = o.data() + i * n;
      for (std::int64_t p = 0; p < k; ++p) {
        const T av = x[static_cast<std::size_t>(i * k + p)];
        const T* brow = y.data() + p * n;
        for (std::int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  });
  flops::add(2ull * static_cast<std::uint64_t>(m * n * k));
  check_finite_debug(out, "matmul");
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: operand must be rank 2");
  const auto m = a.dim(0), n = a.dim(1);
  Tensor out({n, m}, a.dtype());
  visit_dtype(a.dtype(), [&]<class T>() {
    auto x = a.data<T>();
    auto o = out.data<T>();
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) o[static_cast<std::size_t>(j * m + i)] = x[static_cast<std::size_t>(i * n + j)];
  });
  return out;
}

Tensor softmax(const Tensor& x, int axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) throw ShapeError("softmax: axis out of range");
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const auto len = x.dim(axis);
  Tensor out(x.shape(), x.dtype());
  visit_dtype(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto dst = out.data<T>();
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::size_t base = static_cast<std::size_t>(o * len * inner + in);
        T mx = src[base];
        for (std::int64_t l = 1; l < len; ++l) mx = std::max(mx, src[base + static_cast<std::size_t>(l * inner)]);
        T total = 0;
        for (std::int64_t l = 0; l < len; ++l) {
          const auto idx = base + static_cast<std::size_t>(l * inner);
          dst[idx] = std::exp(src[idx] - mx);
          total += dst[idx];
        }
        for (std::int64_t l = 0; l < len; ++l) dst[base + static_cast<std::size_t>(l * inner)] /= total;
      }
    }
  });
  flops::add(4ull * static_cast<std::uint64_t>(x.numel()));
  check_finite_debug(out, "softmax");
  return out;
}

Tensor conv3d(const Tensor& x, const Tensor& kernel, int stride, int padding) {
  require_same_dtype(x, kernel, "conv3d");
  const auto c = conv_dims(x.shape(), kernel.shape(), stride, padding);
  Tensor out({c.batch, c.cout, c.od, c.oh, c.ow}, x.dtype());
  visit_dtype(x.dtype(), [&]<class T>() { conv_forward<T>(c, x.data<T>().data(), kernel.data<T>().data(), out.data<T>().data()); });
  flops::add(conv_flops(c));
  check_finite_debug(out, "conv3d");
  return out;
}

Tensor conv3d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride, int padding) {
  return add_channel_bias(conv3d(x, kernel, stride, padding), bias);
}

Tensor conv3d_backward_input(const Tensor& grad_out, const Tensor& kernel, const Shape& input_shape, int stride,
                             int padding) {
  require_same_dtype(grad_out, kernel, "conv3d_backward_input");
  const auto c = conv_dims(input_shape, kernel.shape(), stride, padding);
  if (grad_out.shape() != Shape{c.batch, c.cout, c.od, c.oh, c.ow})
    throw ShapeError("conv3d_backward_input: gradient shape " + shape_string(grad_out.shape()) + " mismatch");
  Tensor dx(input_shape, grad_out.dtype());
  visit_dtype(dx.dtype(), [&]<class T>() {
    conv_backward_input<T>(c, grad_out.data<T>().data(), kernel.data<T>().data(), dx.data<T>().data());
  });
  flops::add(conv_flops(c));
  return dx;
}

Tensor conv3d_backward_kernel(const Tensor& x, const Tensor& grad_out, const Shape& kernel_shape, int stride,
                              int padding) {
  require_same_dtype(x, grad_out, "conv3d_backward_kernel");
  const auto c = conv_dims(x.shape(), kernel_shape, stride, padding);
  if (grad_out.shape() != Shape{c.batch, c.cout, c.od, c.oh, c.ow})
    throw ShapeError("conv3d_backward_kernel: gradient shape " + shape_string(grad_out.shape()) + " mismatch");
  Tensor dw(kernel_shape, x.dtype());
  visit_dtype(x.dtype(), [&]<class T>() {
    conv_backward_kernel<T>(c, x.data<T>().data(), grad_out.data<T>().data(), dw.data<T>().data());
  });
  flops::add(conv_flops(c));
  return dw;
}

Tensor channel_sum(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("channel_sum: need [B,C,...]");
  const auto batch = x.dim(0), ch = x.dim(1);
  const auto inner = x.numel() / (batch * ch);
  Tensor out({ch}, x.dtype());
  visit_dtype(x.dtype(), [&]<class T>() {
    auto s = x.data<T>();
    auto o = out.data<T>();
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t c = 0; c < ch; ++c) {
        T acc = 0;
        const T* p = s.data() + (b * ch + c) * inner;
        for (std::int64_t i = 0; i < inner; ++i) acc += p[i];
        o[static_cast<std::size_t>(c)] += acc;
      }
  });
  flops::add(static_cast<std::uint64_t>(x.numel()));
  return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  require_same_dtype(x, bias, "add_channel_bias");
  if (x.rank() < 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1))
    throw ShapeError("add_channel_bias: bias " + shape_string(bias.shape()) + " does not match " + shape_string(x.shape()));
  const auto batch = x.dim(0), ch = x.dim(1);
  const auto inner = x.numel() / (batch * ch);
  Tensor out = x;
  visit_dtype(x.dtype(), [&]<class T>() {
    auto o = out.data<T>();
    auto bv = bias.data<T>();
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t c = 0; c < ch; ++c) {
        T* p = o.data() + (b * ch + c) * inner;
        const T v = bv[static_cast<std::size_t>(c)];
        for (std::int64_t i = 0; i < inner; ++i) p[i] += v;
      }
  });
  flops::add(static_cast<std::uint64_t>(x.numel()));
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_same_dtype(a, b, "concat_channels");
  if (a.rank() < 2 || a.rank() != b.rank() || a.dim(0) != b.dim(0) ||
      !std::equal(a.shape().begin() + 2, a.shape().end(), b.shape().begin() + 2))
    throw ShapeError("concat_channels: incompatible shapes " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  Shape s = a.shape();
  s[1] = a.dim(1) + b.dim(1);
  Tensor out(s, a.dtype());
  const auto batch = a.dim(0);
  const auto na = a.numel() / batch, nb = b.numel() / batch;
  visit_dtype(a.dtype(), [&]<class T>() {
    auto x = a.data<T>();
    auto y = b.data<T>();
    auto o = out.data<T>();
    for (std::int64_t i = 0; i < batch; ++i) {
      std::copy_n(x.data() + i * na, na, o.data() + i * (na + nb));
      std::copy_n(y.data() + i * nb, nb, o.data() + i * (na + nb) + na);
    }
  });
  return out;
}

std::pair<Tensor, Tensor> split_channels(const Tensor& x, std::int64_t first) {
  if (x.rank() < 2 || first < 1 || first >= x.dim(1))
    throw ShapeError("split_channels: cannot split " + shape_string(x.shape()) + " at " + std::to_string(first));
  Shape sa = x.shape(), sb = x.shape();
  sa[1] = first;
  sb[1] = x.dim(1) - first;
  Tensor a(sa, x.dtype()), b(sb, x.dtype());
  const auto batch = x.dim(0);
  const auto na = a.numel() / batch, nb = b.numel() / batch;
  visit_dtype(x.dtype(), [&]<class T>() {
    auto s = x.data<T>();
    auto pa = a.data<T>();
    auto pb = b.data<T>();
    for (std::int64_t i = 0; i < batch; ++i) {
      std::copy_n(s.data() + i * (na + nb), na, pa.data() + i * na);
      std::copy_n(s.data() + i * (na + nb) + na, nb, pb.data() + i * nb);
    }
  });
  return {std::move(a), std::move(b)};
}

double sum(const Tensor& x) {
  return visit_dtype(x.dtype(), [&]<class T>() {
    double acc = 0;
    for (auto v : x.data<T>()) acc += v;
    return acc;
  });
}

double dot(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("dot: shape mismatch");
  require_same_dtype(a, b, "dot");
  flops::add(2ull * static_cast<std::uint64_t>(a.numel()));
  return visit_dtype(a.dtype(), [&]<class T>() {
    double acc = 0;
    auto x = a.data<T>();
    auto y = b.data<T>();
    for (std::size_t i = 0; i < x.size(); ++i) acc += static_cast<double>(x[i]) * static_cast<double>(y[i]);
    return acc;
  });
}

double max_abs(const Tensor& x) {
  return visit_dtype(x.dtype(), [&]<class T>() {
    double m = 0;
    for (auto v : x.data<T>()) m = std::max(m, std::abs(static_cast<double>(v)));
    return m;
  });
}

double l2_norm(const Tensor& x) {
  return visit_dtype(x.dtype(), [&]<class T>() {
    double acc = 0;
    for (auto v : x.data<T>()) acc += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(acc);
  });
}

double min_value(const Tensor& x) {
  return visit_dtype(x.dtype(), [&]<class T>() {
    double m = std::numeric_limits<double>::infinity();
    for (auto v : x.data<T>()) m = std::min(m, static_cast<double>(v));
    return m;
  });
}

double max_value(const Tensor& x) {
  return visit_dtype(x.dtype(), [&]<class T>() {
    double m = -std::numeric_limits<double>::infinity();
    for (auto v : x.data<T>()) m = std::max(m, static_cast<double>(v));
    return m;
  });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shape mismatch");
  double m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.get(i) - b.get(i)));
  return m;
}

bool all_finite(const Tensor& x) {
  return visit_dtype(x.dtype(), [&]<class T>() {
    for (auto v : x.data<T>())
      if (!std::isfinite(v)) return false;
    return true;
  });
}

}  // namespace idm::ops
