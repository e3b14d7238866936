#include <cmath>
#include <string>

#include "idm/diffusion.hpp"
#include "idm/flops.hpp"
#include "idm/ops.hpp"

namespace idm {

StepStats train_step(IUNet& model, AdamW& opt, const Tensor& x0, Prng& prng, const TrainConfig& cfg,
                     const BetaSchedule& sched, int step) {
  if (sched.T > model.config().timesteps)
    throw ConfigError("schedule has " + std::to_string(sched.T) + " steps but the model embeds only " +
                      std::to_string(model.config().timesteps));
  StepStats stats;
  stats.step = step;
  stats.t = 1 + static_cast<int>(prng.below(static_cast<std::uint64_t>(sched.T)));
  const Tensor eps = ops::randn(prng, x0.shape(), x0.dtype());
  const Tensor x_t = q_sample(x0, stats.t, eps, sched);

  model.zero_grad();
  MemoryTracker tracker(cfg.mode);
  const flops::Scope counted;
  stats.parts = loss_and_gradients(model, x_t, stats.t, eps, cfg, tracker);
  stats.loss = stats.parts.total;
  if (!std::isfinite(stats.loss))
    throw DivergenceError("training diverged: non-finite loss at step " + std::to_string(step), step);
  stats.lr = cosine_lr(cfg, step);
  opt.step(stats.lr);
  stats.flops = counted.elapsed();
  stats.peak_bytes = tracker.report().peak_bytes;
  return stats;
}

Tensor stack_batch(const std::vector<const Tensor*>& volumes) {
  if (volumes.empty()) throw ShapeError("stack_batch: empty batch");
  const Tensor& first = *volumes.front();
  if (first.rank() != 4) throw ShapeError("stack_batch: volumes must be [1,E,E,E], got " + shape_string(first.shape()));
  Shape shape = first.shape();
  shape.insert(shape.begin(), static_cast<std::int64_t>(volumes.size()));
  Tensor out(shape, first.dtype());
  visit_dtype(first.dtype(), [&]<class T>() {
    auto dst = out.data<T>();
    std::size_t off = 0;
    for (const Tensor* v : volumes) {
      if (v->shape() != first.shape() || v->dtype() != first.dtype())
        throw ShapeError("stack_batch: volumes differ in shape or dtype");
      auto src = v->data<T>();
      std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(off));
      off += src.size();
    }
  });
  return out;
}

std::vector<StepStats> train(IUNet& model, const std::vector<Tensor>& dataset, const TrainConfig& cfg,
                             const BetaSchedule& sched, const StepCallback& on_step) {
  cfg.validate();
  if (dataset.empty()) throw ConfigError("training needs at least one volume");
  Prng prng(cfg.seed);
  AdamW opt(model.params(), cfg);
  std::vector<StepStats> history;
  history.reserve(static_cast<std::size_t>(cfg.steps));
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<const Tensor*> picks;
    for (int b = 0; b < cfg.batch; ++b) picks.push_back(&dataset[prng.below(dataset.size())]);
    Tensor x0 = stack_batch(picks);
    if (x0.dtype() != model.dtype()) x0 = x0.astype(model.dtype());
    history.push_back(train_step(model, opt, x0, prng, cfg, sched, step));
    if (on_step) on_step(history.back());
  }
  return history;
}

}  // namespace idm
