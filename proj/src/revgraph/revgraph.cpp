#include "idm/revgraph.hpp"

#include <algorithm>
#include <cmath>

#include "idm/ops.hpp"

namespace idm {

std::string mode_name(BackpropMode mode) {
  return mode == BackpropMode::StoreAll ? "store" : "invertible";
}

BackpropMode parse_mode(const std::string& name) {
  if (name == "store") return BackpropMode::StoreAll;
  if (name == "invertible") return BackpropMode::InvertibleRecompute;
  throw ConfigError("unknown backprop mode '" + name + "' (expected store or invertible)");
}

TensorList Node::inverse(const TensorList&, const RunContext&) const {
  throw ShapeError("node '" + name() + "' is not invertible");
}

TensorList Node::inverse_backward(const TensorList&, const TensorList&, const RunContext&) {
  throw ShapeError("node '" + name() + "' is not invertible");
}

InverseNode::InverseNode(Node& base) : base_(base) {
  if (base.kind() != NodeKind::Invertible) throw ShapeError("cannot invert stored node '" + base.name() + "'");
}

MemoryTracker::MemoryTracker(BackpropMode mode) {
  report_.mode = mode;
  report_.timeline.push_back({0, 0});
}

void MemoryTracker::allocate(std::size_t bytes) {
  live_ += bytes;
  report_.peak_bytes = std::max(report_.peak_bytes, live_);
}

void MemoryTracker::release(std::size_t bytes) {
  if (bytes > live_) throw Error("memory tracker released more bytes than are live");
  live_ -= bytes;
}

void MemoryTracker::mark() { report_.timeline.push_back({++op_index_, live_}); }

RevGraph::RevGraph(std::vector<Node*> nodes, MemoryTracker& tracker) : nodes_(std::move(nodes)), tracker_(tracker) {}

double RevGraph::drift_limit(DType dtype) { return 10.0 * (dtype == DType::F32 ? 1e-3 : 1e-6); }

TensorList RevGraph::pop(TensorList& stack, int count) {
  if (static_cast<int>(stack.size()) < count) throw ShapeError("graph stack underflow");
  TensorList top(std::make_move_iterator(stack.end() - count), std::make_move_iterator(stack.end()));
  stack.erase(stack.end() - count, stack.end());
  return top;
}

void RevGraph::push(TensorList& stack, TensorList values) {
  for (auto& v : values) stack.push_back(std::move(v));
}

const TensorList& RevGraph::forward(TensorList input, BackpropMode mode, const RunContext& ctx) {
  if (forward_done_) throw Error("RevGraph::forward called twice without backward");
  mode_ = mode;
  retained_.assign(nodes_.size(), {});
  stash_.assign(nodes_.size(), {});
  acts_ = std::move(input);
  tracker_.allocate(total_bytes(acts_));
  tracker_.mark();

  for (std::size_t k = 0; k < nodes_.size(); ++k) {
    Node& node = *nodes_[k];
    TensorList in = pop(acts_, node.arity_in());
    TensorList out = node.forward(in, ctx);
    tracker_.allocate(total_bytes(out));
    if (node.kind() == NodeKind::Stored || mode_ == BackpropMode::StoreAll) {
      retained_[k] = std::move(in);
    } else {
      tracker_.release(total_bytes(in));
      if (verify_) stash_[k] = std::move(in);
    }
    push(acts_, std::move(out));
    tracker_.mark();
  }
  forward_done_ = true;
  return acts_;
}

const Tensor& RevGraph::forward(Tensor input, BackpropMode mode, const RunContext& ctx) {
  TensorList in;
  in.push_back(std::move(input));
  const auto& out = forward(std::move(in), mode, ctx);
  if (out.size() != 1) throw ShapeError("graph produced " + std::to_string(out.size()) + " outputs, expected 1");
  return out.front();
}

TensorList RevGraph::backward(TensorList output_grad, const RunContext& ctx) {
  if (!forward_done_) throw Error("RevGraph::backward called before forward");
  const bool recompute = mode_ == BackpropMode::InvertibleRecompute;
  if (!recompute || nodes_.empty()) {
    tracker_.release(total_bytes(acts_));
    acts_.clear();
  }
  TensorList grads = std::move(output_grad);
  tracker_.allocate(total_bytes(grads));
  tracker_.mark();

  for (std::size_t idx = nodes_.size(); idx-- > 0;) {
    Node& node = *nodes_[idx];
    TensorList grad_out = pop(grads, node.arity_out());
    TensorList in;
    if (recompute) {
      TensorList out = pop(acts_, node.arity_out());
      if (node.kind() == NodeKind::Invertible) {
        in = node.inverse(out, ctx);
        tracker_.allocate(total_bytes(in));
        if (verify_) {
          const auto& ref = stash_[idx];
          for (std::size_t i = 0; i < in.size(); ++i) {
            const double scale = std::max(ops::max_abs(ref[i]), 1e-30);
            const double drift = ops::max_abs_diff(in[i], ref[i]) / scale;
            if (!(drift <= drift_limit(in[i].dtype()))) throw ReconstructionError(node.name(), drift);
          }
          stash_[idx].clear();
        }
      } else {
        in = std::move(retained_[idx]);
      }
      tracker_.release(total_bytes(out));
    } else {
      in = std::move(retained_[idx]);
    }

    const std::size_t workspace = node.workspace_bytes(in);
    tracker_.allocate(workspace);
    TensorList grad_in = node.backward(in, grad_out, ctx);
    tracker_.allocate(total_bytes(grad_in));
    tracker_.release(workspace);
    tracker_.release(total_bytes(grad_out));
    grad_out.clear();

    if (recompute) {
      push(acts_, std::move(in));
    } else {
      tracker_.release(total_bytes(in));
    }
    push(grads, std::move(grad_in));
    tracker_.mark();
  }

  tracker_.release(total_bytes(acts_));
  acts_.clear();
  tracker_.release(total_bytes(grads));
  tracker_.mark();
  retained_.clear();
  stash_.clear();
  forward_done_ = false;
  return grads;
}

Tensor RevGraph::backward(Tensor output_grad, const RunContext& ctx) {
  TensorList g;
  g.push_back(std::move(output_grad));
  auto out = backward(std::move(g), ctx);
  if (out.size() != 1) throw ShapeError("graph has " + std::to_string(out.size()) + " inputs, expected 1");
  return std::move(out.front());
}

MemoryReport peak_memory(std::vector<Node*> nodes, const TensorList& input, BackpropMode mode,
                         const RunContext& ctx) {
  MemoryTracker tracker(mode);
  RevGraph graph(std::move(nodes), tracker);
  const auto& out = graph.forward(input, mode, ctx);
  TensorList grads;
  for (const auto& t : out) grads.push_back(Tensor::ones(t.shape(), t.dtype()));
  graph.backward(std::move(grads), ctx);
  return tracker.report();
}

}  // namespace idm

namespace idm {

TensorList evaluate_nodes(const std::vector<Node*>& nodes, TensorList input, const RunContext& ctx) {
  TensorList stack = std::move(input);
  for (Node* node : nodes) {
    const auto n = static_cast<std::ptrdiff_t>(node->arity_in());
    if (static_cast<std::ptrdiff_t>(stack.size()) < n) throw ShapeError("graph stack underflow in " + node->name());
    TensorList in(std::make_move_iterator(stack.end() - n), std::make_move_iterator(stack.end()));
    stack.erase(stack.end() - n, stack.end());
    for (auto& t : node->forward(in, ctx)) stack.push_back(std::move(t));
  }
  return stack;
}

TensorList invert_nodes(const std::vector<Node*>& nodes, TensorList output, const RunContext& ctx) {
  TensorList stack = std::move(output);
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    const auto n = static_cast<std::ptrdiff_t>((*it)->arity_out());
    if (static_cast<std::ptrdiff_t>(stack.size()) < n) throw ShapeError("graph stack underflow in " + (*it)->name());
    TensorList out(std::make_move_iterator(stack.end() - n), std::make_move_iterator(stack.end()));
    stack.erase(stack.end() - n, stack.end());
    for (auto& t : (*it)->inverse(out, ctx)) stack.push_back(std::move(t));
  }
  return stack;
}

}  // namespace idm
