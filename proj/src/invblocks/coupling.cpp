#include <cmath>

#include "idm/invblocks.hpp"
#include "idm/ops.hpp"

namespace idm {

Tensor fan_in_uniform(Prng& prng, const Shape& shape, std::int64_t fan_in, DType dtype) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return ops::rand_uniform(prng, shape, -bound, bound, dtype);
}

AdditiveCoupling::AdditiveCoupling(std::string name, std::int64_t channels, std::int64_t hidden,
                                   std::int64_t embed_dim, bool swap, DType dtype, Prng& init)
    : name_(std::move(name)), channels_(channels), hidden_(hidden), embed_dim_(embed_dim), swap_(swap) {
  if (channels < 2 || channels % 2) throw ShapeError(name_ + ": coupling needs an even channel count");
  const std::int64_t half = channels / 2;
  w1_ = Param(name_ + ".w1", fan_in_uniform(init, {hidden, half, 3, 3, 3}, half * 27, dtype));
  b1_ = Param(name_ + ".b1", fan_in_uniform(init, {hidden}, half * 27, dtype));
  wt_ = Param(name_ + ".wt", fan_in_uniform(init, {hidden, embed_dim}, embed_dim, dtype));
  w2_ = Param(name_ + ".w2", Tensor({half, hidden, 3, 3, 3}, dtype));
  b2_ = Param(name_ + ".b2", Tensor({half}, dtype));
}

std::int64_t AdditiveCoupling::parameter_count(std::int64_t channels, std::int64_t hidden, std::int64_t embed_dim) {
  const std::int64_t half = channels / 2;
  return hidden * half * 27 + hidden + hidden * embed_dim + half * hidden * 27 + half;
}

void AdditiveCoupling::check_input(const Tensor& x) const {
  if (x.rank() != 5 || x.dim(1) != channels_)
    throw ShapeError(name_ + ": expected [B," + std::to_string(channels_) + ",D,H,W], got " +
                     shape_string(x.shape()));
}

Tensor AdditiveCoupling::embedding_bias(const RunContext& ctx) const {
  if (ctx.time_embedding == nullptr) return Tensor({hidden_}, w1_.value.dtype());
  const Tensor& e = *ctx.time_embedding;
  if (e.shape() != Shape{embed_dim_}) throw ShapeError(name_ + ": time embedding shape mismatch");
  return ops::matmul(wt_.value, e.reshaped({embed_dim_, 1})).reshaped({hidden_});
}

Tensor AdditiveCoupling::conditioner(const Tensor& cond, const RunContext& ctx) const {
  Tensor z = ops::conv3d(cond, w1_.value, ops::add(b1_.value, embedding_bias(ctx)), 1, 1);
  return ops::conv3d(ops::silu(z), w2_.value, b2_.value, 1, 1);
}

Tensor AdditiveCoupling::conditioner_backward(const Tensor& cond, const Tensor& grad_g, const RunContext& ctx) {
  const Tensor z = ops::conv3d(cond, w1_.value, ops::add(b1_.value, embedding_bias(ctx)), 1, 1);
  const Tensor a = ops::silu(z);
  ops::accumulate(w2_.grad, ops::conv3d_backward_kernel(a, grad_g, w2_.value.shape(), 1, 1));
  ops::accumulate(b2_.grad, ops::channel_sum(grad_g));
  const Tensor grad_a = ops::conv3d_backward_input(grad_g, w2_.value, a.shape(), 1, 1);
  const Tensor grad_z = ops::mul(grad_a, ops::silu_grad(z));
  ops::accumulate(w1_.grad, ops::conv3d_backward_kernel(cond, grad_z, w1_.value.shape(), 1, 1));
  const Tensor grad_bias = ops::channel_sum(grad_z);
  ops::accumulate(b1_.grad, grad_bias);
  if (ctx.time_embedding != nullptr) {
    const Tensor& e = *ctx.time_embedding;
    ops::accumulate(wt_.grad, ops::matmul(grad_bias.reshaped({hidden_, 1}), e.reshaped({1, embed_dim_})));
    if (ctx.time_embedding_grad != nullptr)
      ops::accumulate(*ctx.time_embedding_grad,
                      ops::matmul(grad_bias.reshaped({1, hidden_}), wt_.value).reshaped({embed_dim_}));
  }
  return ops::conv3d_backward_input(grad_z, w1_.value, cond.shape(), 1, 1);
}

TensorList AdditiveCoupling::forward(const TensorList& in, const RunContext& ctx) const {
  const Tensor& x = in.at(0);
  check_input(x);
  auto [first, second] = ops::split_channels(x, channels_ / 2);
  if (!swap_) return {ops::concat_channels(first, ops::add(second, conditioner(first, ctx)))};
  return {ops::concat_channels(ops::add(first, conditioner(second, ctx)), second)};
}

TensorList AdditiveCoupling::inverse(const TensorList& out, const RunContext& ctx) const {
  const Tensor& y = out.at(0);
  check_input(y);
  auto [first, second] = ops::split_channels(y, channels_ / 2);
  if (!swap_) return {ops::concat_channels(first, ops::sub(second, conditioner(first, ctx)))};
  return {ops::concat_channels(ops::sub(first, conditioner(second, ctx)), second)};
}

TensorList AdditiveCoupling::backward(const TensorList& in, const TensorList& grad_out, const RunContext& ctx) {
  const Tensor& x = in.at(0);
  check_input(x);
  auto [x1, x2] = ops::split_channels(x, channels_ / 2);
  auto [g1, g2] = ops::split_channels(grad_out.at(0), channels_ / 2);
  if (!swap_) return {ops::concat_channels(ops::add(g1, conditioner_backward(x1, g2, ctx)), g2)};
  return {ops::concat_channels(g1, ops::add(g2, conditioner_backward(x2, g1, ctx)))};
}

TensorList AdditiveCoupling::inverse_backward(const TensorList& out, const TensorList& grad_in,
                                              const RunContext& ctx) {
  const Tensor& y = out.at(0);
  check_input(y);
  auto [y1, y2] = ops::split_channels(y, channels_ / 2);
  auto [g1, g2] = ops::split_channels(grad_in.at(0), channels_ / 2);
  if (!swap_) return {ops::concat_channels(ops::add(g1, conditioner_backward(y1, ops::scale(g2, -1.0), ctx)), g2)};
  return {ops::concat_channels(g1, ops::add(g2, conditioner_backward(y2, ops::scale(g1, -1.0), ctx)))};
}

std::size_t AdditiveCoupling::workspace_bytes(const TensorList& in) const {
  const Tensor& x = in.at(0);
  const std::size_t per_channel = x.bytes() / static_cast<std::size_t>(channels_);
  // z and silu(z) at hidden width, plus the conditioner gradient at half width.
  return per_channel * static_cast<std::size_t>(2 * hidden_ + channels_ / 2);
}

}  // namespace idm
