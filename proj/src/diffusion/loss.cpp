#include <cmath>
#include <memory>

#include "idm/diffusion.hpp"
#include "idm/ops.hpp"

namespace idm {

double mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("mse: shape mismatch");
  const Tensor d = ops::sub(a, b);
  return ops::dot(d, d) / static_cast<double>(d.numel());
}

double weight_norm(const IUNet& model) {
  double s = 0;
  for (const Param* p : model.params()) s += ops::dot(p->value, p->value);
  return std::sqrt(s);
}

namespace {

// Gradient of mean((a - b)^2) with respect to a.
Tensor mse_grad(const Tensor& a, const Tensor& b, double weight) {
  return ops::scale(ops::sub(a, b), 2.0 * weight / static_cast<double>(a.numel()));
}

LossParts single_pass(IUNet& model, const Tensor& x_t, int t, const Tensor& eps, const TrainConfig& cfg,
                      MemoryTracker& tracker) {
  ModelPass pass(model, cfg.mode, tracker);
  const Tensor& pred = pass.forward(x_t, t);
  LossParts parts;
  parts.noise_mse = mse(pred, eps);
  Tensor grad = mse_grad(pred, eps, 1.0);
  pass.backward(std::move(grad));
  return parts;
}

// head -> trunk(t) -> tail for the noise term, plus trunk output -> inverse trunk with a
// null embedding for the reconstruction term. Each segment is its own graph so the
// trunk output can feed both branches.
LossParts segmented_pass(IUNet& model, const Tensor& x_t, int t, const Tensor& eps, const TrainConfig& cfg,
                         MemoryTracker& tracker) {
  TimeEmbedding::Cache cache;
  const Tensor emb = model.time_embedding().forward(t, &cache);
  Tensor emb_grad(emb.shape(), emb.dtype());
  const RunContext ctx_t{&emb, &emb_grad};
  const RunContext ctx_null{};

  const std::vector<Node*> trunk = model.trunk_nodes();
  std::vector<std::unique_ptr<InverseNode>> inverses;
  std::vector<Node*> inverse_chain;
  for (auto it = trunk.rbegin(); it != trunk.rend(); ++it) {
    inverses.push_back(std::make_unique<InverseNode>(**it));
    inverse_chain.push_back(inverses.back().get());
  }

  RevGraph head({&model.head()}, tracker);
  RevGraph body(trunk, tracker);
  RevGraph tail({&model.tail()}, tracker);
  RevGraph back(inverse_chain, tracker);

  const Tensor h = head.forward(x_t, cfg.mode, ctx_t);
  const Tensor v = body.forward(h, cfg.mode, ctx_t);
  const Tensor pred = model.blend_output(x_t, tail.forward(v, cfg.mode, ctx_t), t);
  LossParts parts;
  parts.noise_mse = mse(pred, eps);
  Tensor grad_pred = mse_grad(pred, eps, model.output_gain(t));

  const Tensor& rec = back.forward(v, cfg.mode, ctx_null);
  parts.reconstruction_mse = mse(rec, h);
  // residual kept until the trunk input gradient is formed
  const Tensor grad_rec = mse_grad(rec, h, cfg.lambda_r);
  tracker.allocate(grad_rec.bytes());

  Tensor grad_v = tail.backward(std::move(grad_pred), ctx_t);
  ops::accumulate(grad_v, back.backward(grad_rec, ctx_null));
  Tensor grad_h = body.backward(std::move(grad_v), ctx_t);
  grad_h = ops::sub(grad_h, grad_rec);
  tracker.release(grad_rec.bytes());
  head.backward(std::move(grad_h), ctx_t);
  model.time_embedding().backward(cache, emb_grad);
  return parts;
}

}  // namespace

LossParts loss_and_gradients(IUNet& model, const Tensor& x_t, int t, const Tensor& eps, const TrainConfig& cfg,
                             MemoryTracker& tracker) {
  LossParts parts = cfg.lambda_r > 0 ? segmented_pass(model, x_t, t, eps, cfg, tracker)
                                     : single_pass(model, x_t, t, eps, cfg, tracker);
  parts.weight_norm = weight_norm(model);
  parts.total = parts.noise_mse + cfg.lambda_r * parts.reconstruction_mse + cfg.lambda_l2 * parts.weight_norm;
  return parts;
}

}  // namespace idm
