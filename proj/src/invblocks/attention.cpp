#include <algorithm>
#include <cmath>

#include "idm/flops.hpp"
#include "idm/invblocks.hpp"
#include "idm/ops.hpp"

namespace idm {

namespace {

struct ParitySites {
  std::vector<std::int64_t> even, odd;
};

ParitySites parity_sites(const Shape& s) {
  if (s.size() != 5) throw ShapeError("parity split needs [B,C,D,H,W], got " + shape_string(s));
  const std::int64_t d = s[2], h = s[3], w = s[4];
  if ((d * h * w) % 2) throw ShapeError("parity split needs an even voxel count, got " + shape_string(s));
  ParitySites p;
  p.even.reserve(static_cast<std::size_t>(d * h * w / 2));
  p.odd.reserve(static_cast<std::size_t>(d * h * w / 2));
  for (std::int64_t i = 0; i < d; ++i)
    for (std::int64_t j = 0; j < h; ++j)
      for (std::int64_t k = 0; k < w; ++k) ((i + j + k) % 2 ? p.odd : p.even).push_back((i * h + j) * w + k);
  return p;
}

Tensor batch_item(const Tensor& x, std::int64_t b) {
  const std::int64_t n = x.dim(1), c = x.dim(2);
  Tensor out({n, c}, x.dtype());
  visit_dtype(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    std::copy_n(src.data() + b * n * c, n * c, out.data<T>().data());
  });
  return out;
}

void set_batch_item(Tensor& x, std::int64_t b, const Tensor& item) {
  const std::int64_t n = x.dim(1), c = x.dim(2);
  visit_dtype(x.dtype(), [&]<class T>() {
    std::copy_n(item.data<T>().data(), n * c, x.data<T>().data() + b * n * c);
  });
}

// dZ = A * (dA - rowsum(dA * A)) for row-wise softmax A.
Tensor softmax_backward(const Tensor& attn, const Tensor& grad_attn) {
  const std::int64_t rows = attn.dim(0), cols = attn.dim(1);
  Tensor out(attn.shape(), attn.dtype());
  visit_dtype(attn.dtype(), [&]<class T>() {
    auto a = attn.data<T>();
    auto g = grad_attn.data<T>();
    auto o = out.data<T>();
    for (std::int64_t i = 0; i < rows; ++i) {
      T dotv = 0;
      for (std::int64_t j = 0; j < cols; ++j) dotv += a[static_cast<std::size_t>(i * cols + j)] * g[static_cast<std::size_t>(i * cols + j)];
      for (std::int64_t j = 0; j < cols; ++j) {
        const auto idx = static_cast<std::size_t>(i * cols + j);
        o[idx] = a[idx] * (g[idx] - dotv);
      }
    }
  });
  flops::add(4ull * static_cast<std::uint64_t>(attn.numel()));
  return out;
}

// gamma * (1 - th^2)
Tensor tanh_slope(const Tensor& th, double gamma) {
  return ops::scale(ops::sub(Tensor::ones(th.shape(), th.dtype()), ops::mul(th, th)), gamma);
}

}  // namespace

std::pair<Tensor, Tensor> parity_split(const Tensor& x) {
  const auto sites = parity_sites(x.shape());
  const std::int64_t batch = x.dim(0), ch = x.dim(1);
  const std::int64_t vol = x.dim(2) * x.dim(3) * x.dim(4);
  const auto n = static_cast<std::int64_t>(sites.even.size());
  Tensor even({batch, n, ch}, x.dtype()), odd({batch, n, ch}, x.dtype());
  visit_dtype(x.dtype(), [&]<class T>() {
    auto src = x.data<T>();
    auto pe = even.data<T>();
    auto po = odd.data<T>();
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t c = 0; c < ch; ++c) {
        const T* plane = src.data() + (b * ch + c) * vol;
        for (std::int64_t i = 0; i < n; ++i) {
          pe[static_cast<std::size_t>((b * n + i) * ch + c)] = plane[sites.even[static_cast<std::size_t>(i)]];
          po[static_cast<std::size_t>((b * n + i) * ch + c)] = plane[sites.odd[static_cast<std::size_t>(i)]];
        }
      }
  });
  return {std::move(even), std::move(odd)};
}

Tensor parity_merge(const Tensor& even, const Tensor& odd, const Shape& shape) {
  const auto sites = parity_sites(shape);
  const std::int64_t batch = shape[0], ch = shape[1];
  const std::int64_t vol = shape[2] * shape[3] * shape[4];
  const auto n = static_cast<std::int64_t>(sites.even.size());
  const Shape half{batch, n, ch};
  if (even.shape() != half || odd.shape() != half)
    throw ShapeError("parity merge: halves do not match target " + shape_string(shape));
  Tensor out(shape, even.dtype());
  visit_dtype(even.dtype(), [&]<class T>() {
    auto pe = even.data<T>();
    auto po = odd.data<T>();
    auto dst = out.data<T>();
    for (std::int64_t b = 0; b < batch; ++b)
      for (std::int64_t c = 0; c < ch; ++c) {
        T* plane = dst.data() + (b * ch + c) * vol;
        for (std::int64_t i = 0; i < n; ++i) {
          plane[sites.even[static_cast<std::size_t>(i)]] = pe[static_cast<std::size_t>((b * n + i) * ch + c)];
          plane[sites.odd[static_cast<std::size_t>(i)]] = po[static_cast<std::size_t>((b * n + i) * ch + c)];
        }
      }
  });
  return out;
}

AttentionCoupling::AttentionCoupling(std::string name, std::int64_t skip_channels, std::int64_t up_channels,
                                     DType dtype, Prng& init)
    : name_(std::move(name)), skip_(skip_channels), up_(up_channels) {
  const std::int64_t c = skip_channels;
  wq_ = Param(name_ + ".wq", fan_in_uniform(init, {c, c}, c, dtype));
  bq_ = Param(name_ + ".bq", Tensor({c}, dtype));
  wk_ = Param(name_ + ".wk", fan_in_uniform(init, {c, c}, c, dtype));
  bk_ = Param(name_ + ".bk", Tensor({c}, dtype));
  wv_ = Param(name_ + ".wv", fan_in_uniform(init, {c, c}, c, dtype));
  bv_ = Param(name_ + ".bv", Tensor({c}, dtype));
  wo_ = Param(name_ + ".wo", Tensor({c, c}, dtype));
  bo_ = Param(name_ + ".bo", Tensor({c}, dtype));
}

std::int64_t AttentionCoupling::parameter_count(std::int64_t skip_channels) {
  return 4 * (skip_channels * skip_channels + skip_channels);
}

AttentionCoupling::Cache AttentionCoupling::evaluate(const Tensor& y1) const {
  Cache c;
  c.y1 = y1;
  c.q = ops::add(ops::matmul(y1, wq_.value), bq_.value);
  c.k = ops::add(ops::matmul(y1, wk_.value), bk_.value);
  c.v = ops::add(ops::matmul(y1, wv_.value), bv_.value);
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(skip_));
  c.attn = ops::softmax(ops::scale(ops::matmul(c.q, ops::transpose(c.k)), inv_sqrt_dk), 1);
  c.o = ops::matmul(c.attn, c.v);
  c.th = ops::tanh(ops::add(ops::matmul(c.o, wo_.value), bo_.value));
  c.f = ops::exp(ops::scale(c.th, kGamma));
  return c;
}

Tensor AttentionCoupling::scores_backward(const Cache& c, const Tensor& grad_s) {
  ops::accumulate(wo_.grad, ops::matmul(ops::transpose(c.o), grad_s));
  ops::accumulate(bo_.grad, ops::channel_sum(grad_s));
  const Tensor grad_o = ops::matmul(grad_s, ops::transpose(wo_.value));
  const Tensor grad_attn = ops::matmul(grad_o, ops::transpose(c.v));
  const Tensor grad_v = ops::matmul(ops::transpose(c.attn), grad_o);
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(skip_));
  const Tensor grad_z = ops::scale(softmax_backward(c.attn, grad_attn), inv_sqrt_dk);
  const Tensor grad_q = ops::matmul(grad_z, c.k);
  const Tensor grad_k = ops::matmul(ops::transpose(grad_z), c.q);
  const Tensor y1_t = ops::transpose(c.y1);
  ops::accumulate(wq_.grad, ops::matmul(y1_t, grad_q));
  ops::accumulate(bq_.grad, ops::channel_sum(grad_q));
  ops::accumulate(wk_.grad, ops::matmul(y1_t, grad_k));
  ops::accumulate(bk_.grad, ops::channel_sum(grad_k));
  ops::accumulate(wv_.grad, ops::matmul(y1_t, grad_v));
  ops::accumulate(bv_.grad, ops::channel_sum(grad_v));
  Tensor grad_y1 = ops::matmul(grad_q, ops::transpose(wq_.value));
  ops::accumulate(grad_y1, ops::matmul(grad_k, ops::transpose(wk_.value)));
  ops::accumulate(grad_y1, ops::matmul(grad_v, ops::transpose(wv_.value)));
  return grad_y1;
}

void AttentionCoupling::check_inputs(const Tensor& y, const Tensor& c_up) const {
  if (y.rank() != 5 || c_up.rank() != 5 || y.dim(0) != c_up.dim(0) ||
      !std::equal(y.shape().begin() + 2, y.shape().end(), c_up.shape().begin() + 2))
    throw ShapeError(name_ + ": skip " + shape_string(y.shape()) + " and upsampled " + shape_string(c_up.shape()) +
                     " differ in batch or spatial shape");
  if (y.dim(1) != skip_ || c_up.dim(1) != up_)
    throw ShapeError(name_ + ": expected " + std::to_string(skip_) + "+" + std::to_string(up_) + " channels, got " +
                     std::to_string(y.dim(1)) + "+" + std::to_string(c_up.dim(1)));
}

Tensor AttentionCoupling::scale(const Tensor& y1) const {
  Tensor f(y1.shape(), y1.dtype());
  for (std::int64_t b = 0; b < y1.dim(0); ++b) set_batch_item(f, b, evaluate(batch_item(y1, b)).f);
  return f;
}

Tensor AttentionCoupling::apply(const Tensor& y, const Tensor& c_up) const {
  check_inputs(y, c_up);
  auto [even, odd] = parity_split(y);
  Tensor a(odd.shape(), odd.dtype());
  for (std::int64_t b = 0; b < y.dim(0); ++b)
    set_batch_item(a, b, ops::mul(batch_item(odd, b), evaluate(batch_item(even, b)).f));
  return ops::concat_channels(parity_merge(even, a, y.shape()), c_up);
}

std::pair<Tensor, Tensor> AttentionCoupling::invert(const Tensor& y_u) const {
  if (y_u.rank() != 5 || y_u.dim(1) != skip_ + up_)
    throw ShapeError(name_ + ": expected " + std::to_string(skip_ + up_) + " channels, got " +
                     shape_string(y_u.shape()));
  auto [coupled, c_up] = ops::split_channels(y_u, skip_);
  auto [even, a] = parity_split(coupled);
  Tensor y2(a.shape(), a.dtype());
  for (std::int64_t b = 0; b < y_u.dim(0); ++b)
    set_batch_item(y2, b, ops::div(batch_item(a, b), evaluate(batch_item(even, b)).f));
  return {parity_merge(even, y2, coupled.shape()), std::move(c_up)};
}

TensorList AttentionCoupling::forward(const TensorList& in, const RunContext&) const {
  return {apply(in.at(0), in.at(1))};
}

TensorList AttentionCoupling::inverse(const TensorList& out, const RunContext&) const {
  auto [y, c_up] = invert(out.at(0));
  return {std::move(y), std::move(c_up)};
}

TensorList AttentionCoupling::backward(const TensorList& in, const TensorList& grad_out, const RunContext&) {
  const Tensor& y = in.at(0);
  check_inputs(y, in.at(1));
  auto [grad_coupled, grad_up] = ops::split_channels(grad_out.at(0), skip_);
  auto [grad_even, grad_a] = parity_split(grad_coupled);
  auto [even, odd] = parity_split(y);
  Tensor grad_y1(even.shape(), even.dtype()), grad_y2(odd.shape(), odd.dtype());
  for (std::int64_t b = 0; b < y.dim(0); ++b) {
    const Cache c = evaluate(batch_item(even, b));
    const Tensor ga = batch_item(grad_a, b);
    set_batch_item(grad_y2, b, ops::mul(ga, c.f));
    // a = y2 * f  =>  ds = da * y2 * f * gamma * (1 - th^2)
    const Tensor grad_s = ops::mul(ops::mul(ops::mul(ga, batch_item(odd, b)), c.f), tanh_slope(c.th, kGamma));
    Tensor g1 = batch_item(grad_even, b);
    ops::accumulate(g1, scores_backward(c, grad_s));
    set_batch_item(grad_y1, b, g1);
  }
  return {parity_merge(grad_y1, grad_y2, y.shape()), std::move(grad_up)};
}

TensorList AttentionCoupling::inverse_backward(const TensorList& out, const TensorList& grad_in,
                                               const RunContext&) {
  const Tensor& y_u = out.at(0);
  auto [coupled, c_up] = ops::split_channels(y_u, skip_);
  auto [even, a] = parity_split(coupled);
  auto [grad_even, grad_odd] = parity_split(grad_in.at(0));
  Tensor grad_e(even.shape(), even.dtype()), grad_a(a.shape(), a.dtype());
  for (std::int64_t b = 0; b < y_u.dim(0); ++b) {
    const Cache c = evaluate(batch_item(even, b));
    const Tensor go = batch_item(grad_odd, b);
    const Tensor y2 = ops::div(batch_item(a, b), c.f);
    set_batch_item(grad_a, b, ops::div(go, c.f));
    // y2 = a / f  =>  ds = -dy2 * y2 * gamma * (1 - th^2)
    const Tensor grad_s = ops::scale(ops::mul(ops::mul(go, y2), tanh_slope(c.th, kGamma)), -1.0);
    Tensor g1 = batch_item(grad_even, b);
    ops::accumulate(g1, scores_backward(c, grad_s));
    set_batch_item(grad_e, b, g1);
  }
  return {ops::concat_channels(parity_merge(grad_e, grad_a, coupled.shape()), grad_in.at(1))};
}

std::size_t AttentionCoupling::workspace_bytes(const TensorList& in) const {
  const Tensor& y = in.at(0);
  const std::size_t n = static_cast<std::size_t>(y.dim(2) * y.dim(3) * y.dim(4) / 2);
  const std::size_t c = static_cast<std::size_t>(skip_);
  // q, k, v, o, tanh(s), f at [N,C] plus the [N,N] attention matrix for one batch item.
  return (6 * n * c + n * n) * dtype_size(y.dtype());
}

}  // namespace idm
