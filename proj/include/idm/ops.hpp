#pragma once

#include <cstdint>

#include "idm/prng.hpp"
#include "idm/tensor.hpp"

// Numeric kernels. All are pure: outputs are fresh buffers and never alias inputs.
namespace idm::ops {

// Smallest divisor magnitude accepted by div().
inline constexpr double kDivisionFloor = 1e-12;

// i.i.d. standard normal entries via Box-Muller on the SplitMix64 stream.
// Both values of each pair are used; an odd trailing value is dropped.
Tensor randn(Prng& prng, const Shape& shape, DType dtype = DType::F32);
// i.i.d. uniform entries in [lo, hi).
Tensor rand_uniform(Prng& prng, const Shape& shape, double lo, double hi, DType dtype = DType::F32);

// Elementwise with broadcasting: b's shape must equal a's, or a trailing suffix of it
// (or the reverse).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// Throws NumericDomainError if any |b| < kDivisionFloor.
Tensor div(const Tensor& a, const Tensor& b);

Tensor exp(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
// d silu(z)/dz evaluated at z.
Tensor silu_grad(const Tensor& z);
Tensor scale(const Tensor& x, double alpha);
Tensor add_scalar(const Tensor& x, double value);
Tensor clamp(const Tensor& x, double lo, double hi);
// a + alpha * b, same shapes.
Tensor axpy(const Tensor& a, double alpha, const Tensor& b);
// In-place accumulate: acc += b (same shapes).
void accumulate(Tensor& acc, const Tensor& b);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);

// Cross-correlation. x: [B,C,D,H,W], kernel: [C',C,k,k,k], optional bias: [C'].
Tensor conv3d(const Tensor& x, const Tensor& kernel, int stride = 1, int padding = 0);
Tensor conv3d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride, int padding);
// Gradient of conv3d w.r.t. its input, given the output gradient.
Tensor conv3d_backward_input(const Tensor& grad_out, const Tensor& kernel, const Shape& input_shape, int stride,
                             int padding);
// Gradient of conv3d w.r.t. its kernel.
Tensor conv3d_backward_kernel(const Tensor& x, const Tensor& grad_out, const Shape& kernel_shape, int stride,
                              int padding);
// Per-channel sum of a [B,C,...] tensor -> [C].
Tensor channel_sum(const Tensor& x);
// Adds a per-channel vector [C] to a [B,C,...] tensor.
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

Tensor concat_channels(const Tensor& a, const Tensor& b);
// Splits dim 1 at `first` channels.
std::pair<Tensor, Tensor> split_channels(const Tensor& x, std::int64_t first);

double sum(const Tensor& x);
double dot(const Tensor& a, const Tensor& b);
double max_abs(const Tensor& x);
double l2_norm(const Tensor& x);
double min_value(const Tensor& x);
double max_value(const Tensor& x);
double max_abs_diff(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& x);

}  // namespace idm::ops
