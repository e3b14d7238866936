#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "idm/tensor.hpp"

namespace idm {

// A trainable tensor with its gradient accumulator.
struct Param {
  int id = -1;
  std::string name;
  Tensor value;
  Tensor grad;

  Param() = default;
  Param(std::string param_name, Tensor initial)
      : name(std::move(param_name)), value(std::move(initial)), grad(value.shape(), value.dtype()) {}

  void zero_grad() { grad.fill(0.0); }
};

enum class NodeKind { Stored, Invertible };
enum class BackpropMode { StoreAll, InvertibleRecompute };

std::string mode_name(BackpropMode mode);
BackpropMode parse_mode(const std::string& name);

using TensorList = std::vector<Tensor>;

// Side inputs shared by every node of one pass. A null time embedding means the
// conditioner sees a zero embedding and no embedding gradient is produced.
struct RunContext {
  const Tensor* time_embedding = nullptr;
  Tensor* time_embedding_grad = nullptr;
};

// One step of the computation. A node consumes the top arity_in() tensors of the
// activation stack and pushes arity_out() tensors.
class Node {
 public:
  virtual ~Node() = default;

  virtual std::string name() const = 0;
  virtual NodeKind kind() const = 0;
  virtual int arity_in() const { return 1; }
  virtual int arity_out() const { return 1; }

  virtual TensorList forward(const TensorList& in, const RunContext& ctx) const = 0;
  // Maps outputs back to inputs. Only Invertible nodes implement it.
  virtual TensorList inverse(const TensorList& out, const RunContext& ctx) const;
  // Local gradient: returns d/d(in) and accumulates parameter gradients.
  virtual TensorList backward(const TensorList& in, const TensorList& grad_out, const RunContext& ctx) = 0;
  // Gradient of inverse(): `out` is the inverse's input, `grad_in` the gradient w.r.t. its result.
  virtual TensorList inverse_backward(const TensorList& out, const TensorList& grad_in, const RunContext& ctx);
  // Bytes of temporaries the local gradient materializes beyond its inputs and gradients.
  virtual std::size_t workspace_bytes(const TensorList& /*in*/) const { return 0; }

  virtual std::vector<Param*> params() { return {}; }
};

// Presents an invertible node's inverse as a node of its own.
class InverseNode final : public Node {
 public:
  explicit InverseNode(Node& base);

  std::string name() const override { return "inverse(" + base_.name() + ")"; }
  NodeKind kind() const override { return NodeKind::Invertible; }
  int arity_in() const override { return base_.arity_out(); }
  int arity_out() const override { return base_.arity_in(); }
  TensorList forward(const TensorList& in, const RunContext& ctx) const override { return base_.inverse(in, ctx); }
  TensorList inverse(const TensorList& out, const RunContext& ctx) const override { return base_.forward(out, ctx); }
  TensorList backward(const TensorList& in, const TensorList& grad_out, const RunContext& ctx) override {
    return base_.inverse_backward(in, grad_out, ctx);
  }
  TensorList inverse_backward(const TensorList& out, const TensorList& grad_in, const RunContext& ctx) override {
    return base_.backward(out, grad_in, ctx);
  }
  std::size_t workspace_bytes(const TensorList& in) const override { return base_.workspace_bytes(in); }

 private:
  Node& base_;
};

struct MemorySample {
  std::int64_t op_index = 0;
  std::size_t live_bytes = 0;
};

struct MemoryReport {
  BackpropMode mode = BackpropMode::StoreAll;
  std::size_t peak_bytes = 0;
  std::vector<MemorySample> timeline;
};

// Counts live activation bytes (activations, activation gradients and per-node
// workspaces). Parameters, parameter gradients and optimizer state are never counted.
class MemoryTracker {
 public:
  explicit MemoryTracker(BackpropMode mode = BackpropMode::StoreAll);

  void allocate(std::size_t bytes);
  void release(std::size_t bytes);
  // Records the current live bytes at a node boundary.
  void mark();

  std::size_t live_bytes() const noexcept { return live_; }
  const MemoryReport& report() const noexcept { return report_; }

 private:
  std::size_t live_ = 0;
  std::int64_t op_index_ = 0;
  MemoryReport report_;
};

// Executes a sequence of nodes forward and backward under one of the two backprop
// strategies. StoreAll keeps every node's input until its gradient is computed.
// InvertibleRecompute drops the inputs of invertible nodes after the forward pass and
// rebuilds them one node at a time from the outputs on the way back.
class RevGraph {
 public:
  RevGraph(std::vector<Node*> nodes, MemoryTracker& tracker);

  // Enables a debug stash of every dropped input so reconstruction drift can be
  // checked. The stash is not counted by the tracker.
  void set_verify(bool verify) { verify_ = verify; }

  const TensorList& forward(TensorList input, BackpropMode mode, const RunContext& ctx);
  const Tensor& forward(Tensor input, BackpropMode mode, const RunContext& ctx);
  const TensorList& output() const { return acts_; }

  // Consumes the output gradients, returns input gradients and accumulates parameter
  // gradients. Leaves the graph empty; every tracked byte is released.
  TensorList backward(TensorList output_grad, const RunContext& ctx);
  Tensor backward(Tensor output_grad, const RunContext& ctx);

  // Relative max-norm drift above which recompute raises ReconstructionError.
  static double drift_limit(DType dtype);

 private:
  TensorList pop(TensorList& stack, int count);
  void push(TensorList& stack, TensorList values);

  std::vector<Node*> nodes_;
  MemoryTracker& tracker_;
  BackpropMode mode_ = BackpropMode::StoreAll;
  bool verify_ = false;
  bool forward_done_ = false;
  TensorList acts_;
  std::vector<TensorList> retained_;
  std::vector<TensorList> stash_;
};

// Runs nodes as a stack machine without retaining anything.
TensorList evaluate_nodes(const std::vector<Node*>& nodes, TensorList input, const RunContext& ctx);
// Applies the inverses of `nodes` in reverse order.
TensorList invert_nodes(const std::vector<Node*>& nodes, TensorList output, const RunContext& ctx);

// Runs one forward and backward pass with an all-ones output gradient and returns
// the memory report of that pass.
MemoryReport peak_memory(std::vector<Node*> nodes, const TensorList& input, BackpropMode mode,
                         const RunContext& ctx);

}  // namespace idm
