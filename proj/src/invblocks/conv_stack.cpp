#include "idm/invblocks.hpp"
#include "idm/ops.hpp"

namespace idm {

ConvStack::ConvStack(std::string name, std::int64_t in_channels, std::int64_t mid_channels,
                     std::int64_t out_channels, DType dtype, Prng& init)
    : name_(std::move(name)) {
  const std::int64_t fan1 = in_channels * 27, fan2 = mid_channels * 27;
  w1_ = Param(name_ + ".w1", fan_in_uniform(init, {mid_channels, in_channels, 3, 3, 3}, fan1, dtype));
  b1_ = Param(name_ + ".b1", fan_in_uniform(init, {mid_channels}, fan1, dtype));
  w2_ = Param(name_ + ".w2", fan_in_uniform(init, {out_channels, mid_channels, 3, 3, 3}, fan2, dtype));
  b2_ = Param(name_ + ".b2", fan_in_uniform(init, {out_channels}, fan2, dtype));
}

std::int64_t ConvStack::parameter_count(std::int64_t in_channels, std::int64_t mid_channels,
                                        std::int64_t out_channels) {
  return mid_channels * in_channels * 27 + mid_channels + out_channels * mid_channels * 27 + out_channels;
}

void ConvStack::init_identity_lane() {
  const std::int64_t mid = w1_.value.dim(0), cin = w1_.value.dim(1);
  if (mid < 2) throw ShapeError(name_ + ": identity lane needs two hidden channels");
  constexpr std::int64_t kTaps = 27, kCenter = 13;
  for (std::int64_t h = 0; h < 2; ++h) {
    for (std::int64_t k = 0; k < cin * kTaps; ++k) w1_.value.set(h * cin * kTaps + k, 0.0);
    w1_.value.set(h * cin * kTaps + kCenter, h == 0 ? 1.0 : -1.0);
    b1_.value.set(h, 0.0);
  }
  for (std::int64_t k = 0; k < mid * kTaps; ++k) w2_.value.set(k, 0.0);
  w2_.value.set(kCenter, 1.0);
  w2_.value.set(kTaps + kCenter, -1.0);
  b2_.value.set(0, 0.0);
}

TensorList ConvStack::forward(const TensorList& in, const RunContext&) const {
  const Tensor z = ops::conv3d(in.at(0), w1_.value, b1_.value, 1, 1);
  return {ops::conv3d(ops::silu(z), w2_.value, b2_.value, 1, 1)};
}

TensorList ConvStack::backward(const TensorList& in, const TensorList& grad_out, const RunContext&) {
  const Tensor& x = in.at(0);
  const Tensor& g = grad_out.at(0);
  const Tensor z = ops::conv3d(x, w1_.value, b1_.value, 1, 1);
  const Tensor a = ops::silu(z);
  ops::accumulate(w2_.grad, ops::conv3d_backward_kernel(a, g, w2_.value.shape(), 1, 1));
  ops::accumulate(b2_.grad, ops::channel_sum(g));
  const Tensor grad_z = ops::mul(ops::conv3d_backward_input(g, w2_.value, a.shape(), 1, 1), ops::silu_grad(z));
  ops::accumulate(w1_.grad, ops::conv3d_backward_kernel(x, grad_z, w1_.value.shape(), 1, 1));
  ops::accumulate(b1_.grad, ops::channel_sum(grad_z));
  return {ops::conv3d_backward_input(grad_z, w1_.value, x.shape(), 1, 1)};
}

std::size_t ConvStack::workspace_bytes(const TensorList& in) const {
  const Tensor& x = in.at(0);
  const std::size_t per_channel = x.bytes() / static_cast<std::size_t>(x.dim(1));
  return 2 * per_channel * static_cast<std::size_t>(w1_.value.dim(0));
}

}  // namespace idm
