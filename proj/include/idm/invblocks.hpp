#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "idm/prng.hpp"
#include "idm/revgraph.hpp"
#include "idm/tensor.hpp"

// Invertible layers of the U-Net trunk plus the stored head/tail conv stacks and the
// timestep embedding.
namespace idm {

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
Tensor fan_in_uniform(Prng& prng, const Shape& shape, std::int64_t fan_in, DType dtype);

// ---------------------------------------------------------------------------
// Cayley-parameterised orthogonal matrices
// ---------------------------------------------------------------------------

// Q = (I - S)(I + S)^-1 with S = P - P^T. `params` is an unconstrained [n,n] tensor.
Tensor cayley_orthogonal(const Tensor& params);
// Gradient w.r.t. `params` given the gradient w.r.t. Q.
Tensor cayley_backward(const Tensor& params, const Tensor& grad_q);
// max |Q^T Q - I|.
double orthogonality_error(const Tensor& q);

// Space-to-channel over 2x2x2 blocks followed by multiplication of every block's 8-vector
// with q: [B,C,D,H,W] -> [B,8C,D/2,H/2,W/2]. Output channel c*8+k is row k of q applied
// to block (dz,dy,dx) entries ordered j = 4dz + 2dy + dx.
Tensor ortho_down(const Tensor& x, const Tensor& q);
// Exact inverse of ortho_down: multiply by q^T, then channel-to-space.
Tensor ortho_up(const Tensor& y, const Tensor& q);

class OrthoResample final : public Node {
 public:
  enum class Direction { Down, Up };

  OrthoResample(std::string name, Direction direction, DType dtype);

  std::string name() const override { return name_; }
  NodeKind kind() const override { return NodeKind::Invertible; }
  TensorList forward(const TensorList& in, const RunContext& ctx) const override;
  TensorList inverse(const TensorList& out, const RunContext& ctx) const override;
  TensorList backward(const TensorList& in, const TensorList& grad_out, const RunContext& ctx) override;
  TensorList inverse_backward(const TensorList& out, const TensorList& grad_in, const RunContext& ctx) override;
  std::vector<Param*> params() override { return {&skew_}; }

  Direction direction() const { return direction_; }
  Param& skew() { return skew_; }
  Tensor q() const { return cayley_orthogonal(skew_.value); }

 private:
  // Gradient through `apply_down ? ortho_down : ortho_up` evaluated at `x`.
  Tensor resample_backward(bool apply_down, const Tensor& x, const Tensor& grad);

  std::string name_;
  Direction direction_;
  Param skew_;
};

// ---------------------------------------------------------------------------
// Channel split / merge (skip bookkeeping)
// ---------------------------------------------------------------------------

// [x] -> [skip, deep]: the first `skip_channels` channels become the skip tensor.
class ChannelSplit final : public Node {
 public:
  ChannelSplit(std::string name, std::int64_t skip_channels) : name_(std::move(name)), skip_(skip_channels) {}

  std::string name() const override { return name_; }
  NodeKind kind() const override { return NodeKind::Invertible; }
  int arity_out() const override { return 2; }
  TensorList forward(const TensorList& in, const RunContext& ctx) const override;
  TensorList inverse(const TensorList& out, const RunContext& ctx) const override;
  TensorList backward(const TensorList& in, const TensorList& grad_out, const RunContext& ctx) override;
  TensorList inverse_backward(const TensorList& out, const TensorList& grad_in, const RunContext& ctx) override;

  std::int64_t skip_channels() const { return skip_; }

 private:
  std::string name_;
  std::int64_t skip_;
};

// [skip, up] -> [concat(skip, up)].
class ChannelMerge final : public Node {
 public:
  ChannelMerge(std::string name, std::int64_t skip_channels) : name_(std::move(name)), skip_(skip_channels) {}

  std::string name() const override { return name_; }
  NodeKind kind() const override { return NodeKind::Invertible; }
  int arity_in() const override { return 2; }
  TensorList forward(const TensorList& in, const RunContext& ctx) const override;
  TensorList inverse(const TensorList& out, const RunContext& ctx) const override;
  TensorList backward(const TensorList& in, const TensorList& grad_out, const RunContext& ctx) override;
  TensorList inverse_backward(const TensorList& out, const TensorList& grad_in, const RunContext& ctx) override;

  std::int64_t skip_channels() const { return skip_; }

 private:
  std::string name_;
  std::int64_t skip_;
};

// ---------------------------------------------------------------------------
// Additive coupling
// ---------------------------------------------------------------------------

// x = (x1, x2) split at C/2; y = (x1, x2 + g(x1, t)) with
// g = conv3(silu(conv3(x1) + b1 + W_t * t_emb)) + b2. With `swap` the roles of the
// halves are exchanged. The final conv starts at zero so the block starts as identity.
class AdditiveCoupling final : public Node {
 public:
  AdditiveCoupling(std::string name, std::int64_t channels, std::int64_t hidden, std::int64_t embed_dim, bool swap,
                   DType dtype, Prng& init);

  std::string name() const override { return name_; }
  NodeKind kind() const override { return NodeKind::Invertible; }
  TensorList forward(const TensorList& in, const RunContext& ctx) const override;
  TensorList inverse(const TensorList& out, const RunContext& ctx) const override;
  TensorList backward(const TensorList& in, const TensorList& grad_out, const RunContext& ctx) override;
  TensorList inverse_backward(const TensorList& out, const TensorList& grad_in, const RunContext& ctx) override;
  std::size_t workspace_bytes(const TensorList& in) const override;
  std::vector<Param*> params() override { return {&w1_, &b1_, &wt_, &w2_, &b2_}; }

  std::int64_t channels() const { return channels_; }
  Tensor conditioner(const Tensor& cond, const RunContext& ctx) const;

  static std::int64_t parameter_count(std::int64_t channels, std::int64_t hidden, std::int64_t embed_dim);

 private:
  void check_input(const Tensor& x) const;
  Tensor embedding_bias(const RunContext& ctx) const;
  // Backpropagates `grad_g` through the conditioner evaluated at `cond`; returns d/d(cond).
  Tensor conditioner_backward(const Tensor& cond, const Tensor& grad_g, const RunContext& ctx);

  std::string name_;
  std::int64_t channels_;
  std::int64_t hidden_;
  std::int64_t embed_dim_;
  bool swap_;
  Param w1_, b1_, wt_, w2_, b2_;
};

// ---------------------------------------------------------------------------
// Checkerboard invertible attention coupling
// ---------------------------------------------------------------------------

// Voxels with even (i+j+k) and odd (i+j+k), each gathered into [B, N, C] in linear
// index order. Requires an even voxel count so both halves have N = DHW/2 sites.
std::pair<Tensor, Tensor> parity_split(const Tensor& x);
Tensor parity_merge(const Tensor& even, const Tensor& odd, const Shape& shape);

// [y, c_up] -> [concat(y~, c_up)] where y~ keeps the even sites y1 of y and replaces the
// odd sites y2 by a = y2 * f(y1), f = exp(gamma * tanh(s)), s = single-head dot-product
// attention over the even-site sequence followed by a zero-initialised projection.
class AttentionCoupling final : public Node {
 public:
  static constexpr double kGamma = 1.0;

  AttentionCoupling(std::string name, std::int64_t skip_channels, std::int64_t up_channels, DType dtype,
                    Prng& init);

  std::string name() const override { return name_; }
  NodeKind kind() const override { return NodeKind::Invertible; }
  int arity_in() const override { return 2; }
  TensorList forward(const TensorList& in, const RunContext& ctx) const override;
  TensorList inverse(const TensorList& out, const RunContext& ctx) const override;
  TensorList backward(const TensorList& in, const TensorList& grad_out, const RunContext& ctx) override;
  TensorList inverse_backward(const TensorList& out, const TensorList& grad_in, const RunContext& ctx) override;
  std::size_t workspace_bytes(const TensorList& in) const override;
  std::vector<Param*> params() override { return {&wq_, &bq_, &wk_, &bk_, &wv_, &bv_, &wo_, &bo_}; }

  std::int64_t skip_channels() const { return skip_; }
  std::int64_t up_channels() const { return up_; }

  Tensor apply(const Tensor& y, const Tensor& c_up) const;
  std::pair<Tensor, Tensor> invert(const Tensor& y_u) const;
  // The multiplicative scale f(y1) for even-site features y1 [B, N, C].
  Tensor scale(const Tensor& y1) const;

  static std::int64_t parameter_count(std::int64_t skip_channels);

 private:
  struct Cache {
    Tensor y1, q, k, v, attn, o, th, f;  // th = tanh(s)
  };
  Cache evaluate(const Tensor& y1_batch) const;
  // Given d/ds for one batch item, accumulates parameter gradients and returns d/d(y1).
  Tensor scores_backward(const Cache& cache, const Tensor& grad_s);
  void check_inputs(const Tensor& y, const Tensor& c_up) const;

  std::string name_;
  std::int64_t skip_;
  std::int64_t up_;
  Param wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_;
};

// ---------------------------------------------------------------------------
// Stored (non-invertible) conv stacks for channel expansion at both ends
// ---------------------------------------------------------------------------

// conv3(cin -> mid) + bias, SiLU, conv3(mid -> cout) + bias.
class ConvStack final : public Node {
 public:
  ConvStack(std::string name, std::int64_t in_channels, std::int64_t mid_channels, std::int64_t out_channels,
            DType dtype, Prng& init);

  std::string name() const override { return name_; }
  NodeKind kind() const override { return NodeKind::Stored; }
  TensorList forward(const TensorList& in, const RunContext& ctx) const override;
  TensorList backward(const TensorList& in, const TensorList& grad_out, const RunContext& ctx) override;
  std::size_t workspace_bytes(const TensorList& in) const override;
  std::vector<Param*> params() override { return {&w1_, &b1_, &w2_, &b2_}; }

  static std::int64_t parameter_count(std::int64_t in_channels, std::int64_t mid_channels, std::int64_t out_channels);

  // Routes input channel 0 to output channel 0 through hidden channels 0 and 1
  // (silu(z) - silu(-z) == z), leaving the other channels as initialised.
  // Requires at least two hidden channels.
  void init_identity_lane();

 private:
  std::string name_;
  Param w1_, b1_, w2_, b2_;
};

// ---------------------------------------------------------------------------
// Timestep embedding
// ---------------------------------------------------------------------------

// [sin(t w_0..w_{d/2-1}), cos(t w_0..w_{d/2-1})], w_i = 10000^(-2i/dim).
// Throws NumericDomainError unless 0 <= t <= max_t; ShapeError for odd dim.
Tensor sinusoidal_embedding(int t, std::int64_t dim, int max_t, DType dtype = DType::F64);

// Two-layer MLP (linear, SiLU, linear) on top of the sinusoidal embedding.
class TimeEmbedding {
 public:
  TimeEmbedding(std::int64_t dim, int max_t, DType dtype, Prng& init);

  struct Cache {
    Tensor input, hidden_pre;
  };

  Tensor forward(int t, Cache* cache = nullptr) const;
  void backward(const Cache& cache, const Tensor& grad_embedding);
  std::vector<Param*> params() { return {&w1_, &b1_, &w2_, &b2_}; }

  std::int64_t dim() const { return dim_; }
  static std::int64_t parameter_count(std::int64_t dim) { return 2 * (dim * dim + dim); }

 private:
  std::int64_t dim_;
  int max_t_;
  Param w1_, b1_, w2_, b2_;
};

}  // namespace idm
