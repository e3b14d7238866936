#include <cmath>

#include "idm/invblocks.hpp"
#include "idm/ops.hpp"

namespace idm {

Tensor sinusoidal_embedding(int t, std::int64_t dim, int max_t, DType dtype) {
  if (t < 0 || t > max_t)
    throw NumericDomainError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(max_t) + "]");
  if (dim < 2 || dim % 2) throw ShapeError("time embedding dimension must be even");
  const std::int64_t half = dim / 2;
  Tensor out({dim}, dtype);
  for (std::int64_t i = 0; i < half; ++i) {
    const double omega = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
    out.set(i, std::sin(t * omega));
    out.set(half + i, std::cos(t * omega));
  }
  return out;
}

TimeEmbedding::TimeEmbedding(std::int64_t dim, int max_t, DType dtype, Prng& init) : dim_(dim), max_t_(max_t) {
  w1_ = Param("time.w1", fan_in_uniform(init, {dim, dim}, dim, dtype));
  b1_ = Param("time.b1", fan_in_uniform(init, {dim}, dim, dtype));
  w2_ = Param("time.w2", fan_in_uniform(init, {dim, dim}, dim, dtype));
  b2_ = Param("time.b2", fan_in_uniform(init, {dim}, dim, dtype));
}

Tensor TimeEmbedding::forward(int t, Cache* cache) const {
  const Tensor e = sinusoidal_embedding(t, dim_, max_t_, w1_.value.dtype());
  const Tensor h = ops::add(ops::matmul(w1_.value, e.reshaped({dim_, 1})).reshaped({dim_}), b1_.value);
  Tensor out = ops::add(ops::matmul(w2_.value, ops::silu(h).reshaped({dim_, 1})).reshaped({dim_}), b2_.value);
  if (cache != nullptr) *cache = Cache{e, h};
  return out;
}

void TimeEmbedding::backward(const Cache& cache, const Tensor& grad_embedding) {
  const Tensor a = ops::silu(cache.hidden_pre);
  ops::accumulate(w2_.grad, ops::matmul(grad_embedding.reshaped({dim_, 1}), a.reshaped({1, dim_})));
  ops::accumulate(b2_.grad, grad_embedding);
  const Tensor grad_a = ops::matmul(grad_embedding.reshaped({1, dim_}), w2_.value).reshaped({dim_});
  const Tensor grad_h = ops::mul(grad_a, ops::silu_grad(cache.hidden_pre));
  ops::accumulate(w1_.grad, ops::matmul(grad_h.reshaped({dim_, 1}), cache.input.reshaped({1, dim_})));
  ops::accumulate(b1_.grad, grad_h);
}

}  // namespace idm
