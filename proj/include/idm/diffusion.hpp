#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "idm/iunet.hpp"

namespace idm {

// Variance schedule indexed by t = 1..T; alpha_bar(0) == 1.
struct BetaSchedule {
  int T = 0;
  std::vector<double> betas;       // betas[t - 1]
  std::vector<double> alphas;      // alphas[t - 1] = 1 - betas[t - 1]
  std::vector<double> alpha_bars;  // alpha_bars[t], t = 0..T

  double beta(int t) const;
  double alpha(int t) const;
  double alpha_bar(int t) const;

  // Builds a schedule from explicit betas in (0, 1).
  static BetaSchedule from_betas(std::vector<double> betas);
};

inline constexpr double kBetaMin = 1e-8;
inline constexpr double kBetaMax = 0.999;

// Cosine schedule with offset s. Betas are clipped to [kBetaMin, kBetaMax] and the
// cumulative products are recomputed from the clipped betas.
BetaSchedule cosine_schedule(int T = 2000, double s = 0.008);

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps. Throws NumericDomainError unless 1 <= t <= T.
Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const BetaSchedule& sched);
// One forward step: x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) eps.
Tensor q_step(const Tensor& x_prev, int t, const Tensor& eps, const BetaSchedule& sched);

struct TrainConfig {
  double lr = 2e-4;
  double lambda_r = 0.0;
  double lambda_l2 = 1e-4;
  int batch = 2;
  int steps = 500;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  BackpropMode mode = BackpropMode::StoreAll;

  void validate() const;
};

// Cosine annealing from cfg.lr at step 0 to 0 at step cfg.steps.
double cosine_lr(const TrainConfig& cfg, int step);

// AdamW with decoupled weight decay lambda_l2. Moments are kept in double.
class AdamW {
 public:
  AdamW(std::vector<Param*> params, const TrainConfig& cfg);

  void step(double lr);
  int steps_taken() const { return t_; }

 private:
  std::vector<Param*> params_;
  double beta1_, beta2_, eps_, decay_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct LossParts {
  double noise_mse = 0;
  double reconstruction_mse = 0;
  double weight_norm = 0;
  double total = 0;
};

// Mean squared error between two tensors of equal shape.
double mse(const Tensor& a, const Tensor& b);
// Euclidean norm over every model parameter.
double weight_norm(const IUNet& model);

// Evaluates the composite loss for a noised batch x_t = q_sample(x0, t, eps) and
// accumulates its gradients into the model parameters (which the caller zeroes). The reconstruction term runs only
// when lambda_r > 0: it compares the trunk input with the null-t inverse of the trunk
// output. The weight-norm term is reported but not differentiated.
LossParts loss_and_gradients(IUNet& model, const Tensor& x_t, int t, const Tensor& eps, const TrainConfig& cfg,
                             MemoryTracker& tracker);

struct StepStats {
  int step = 0;
  int t = 0;
  double loss = 0;
  double lr = 0;
  std::size_t peak_bytes = 0;
  std::uint64_t flops = 0;
  LossParts parts;
};

// One optimizer step on batch x0 [B,1,E,E,E]: draws t and eps from prng, backpropagates
// in cfg.mode and applies AdamW at the annealed learning rate for `step`.
// Throws DivergenceError (index = step) on a non-finite loss.
StepStats train_step(IUNet& model, AdamW& opt, const Tensor& x0, Prng& prng, const TrainConfig& cfg,
                     const BetaSchedule& sched, int step);

// Stacks volumes [1,E,E,E] into a batch [B,1,E,E,E].
Tensor stack_batch(const std::vector<const Tensor*>& volumes);

using StepCallback = std::function<void(const StepStats&)>;

// Runs cfg.steps training steps with batches drawn uniformly (with replacement) from
// `dataset`. Deterministic for a given cfg.seed.
std::vector<StepStats> train(IUNet& model, const std::vector<Tensor>& dataset, const TrainConfig& cfg,
                             const BetaSchedule& sched, const StepCallback& on_step = {});

using NoisePredictor = std::function<Tensor(const Tensor& x_t, int t)>;

// Ancestral sampling from x_T ~ N(0, I) down to x_0, with no noise added at t = 1.
// The result is clamped to [0, 1]. Throws DivergenceError (index = t) on a non-finite state.
Tensor p_sample_loop(const NoisePredictor& predict, const Shape& shape, DType dtype, Prng& prng,
                     const BetaSchedule& sched);
Tensor p_sample_loop(const IUNet& model, std::int64_t count, Prng& prng, const BetaSchedule& sched);

}  // namespace idm
