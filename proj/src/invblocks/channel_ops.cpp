#include "idm/invblocks.hpp"
#include "idm/ops.hpp"

namespace idm {

TensorList ChannelSplit::forward(const TensorList& in, const RunContext&) const {
  auto [skip, deep] = ops::split_channels(in.at(0), skip_);
  return {std::move(skip), std::move(deep)};
}

TensorList ChannelSplit::inverse(const TensorList& out, const RunContext&) const {
  if (out.at(0).dim(1) != skip_) throw ShapeError(name_ + ": skip channel bookkeeping mismatch");
  return {ops::concat_channels(out.at(0), out.at(1))};
}

TensorList ChannelSplit::backward(const TensorList&, const TensorList& grad_out, const RunContext& ctx) {
  return inverse(grad_out, ctx);
}

TensorList ChannelSplit::inverse_backward(const TensorList&, const TensorList& grad_in, const RunContext& ctx) {
  return forward(grad_in, ctx);
}

TensorList ChannelMerge::forward(const TensorList& in, const RunContext&) const {
  if (in.at(0).dim(1) != skip_)
    throw ShapeError(name_ + ": expected " + std::to_string(skip_) + " skip channels, got " +
                     std::to_string(in.at(0).dim(1)));
  return {ops::concat_channels(in.at(0), in.at(1))};
}

TensorList ChannelMerge::inverse(const TensorList& out, const RunContext&) const {
  auto [skip, up] = ops::split_channels(out.at(0), skip_);
  return {std::move(skip), std::move(up)};
}

TensorList ChannelMerge::backward(const TensorList&, const TensorList& grad_out, const RunContext& ctx) {
  return inverse(grad_out, ctx);
}

TensorList ChannelMerge::inverse_backward(const TensorList&, const TensorList& grad_in, const RunContext& ctx) {
  return forward(grad_in, ctx);
}

}  // namespace idm
