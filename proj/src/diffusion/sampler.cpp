#include <cmath>
#include <string>

#include "idm/diffusion.hpp"
#include "idm/ops.hpp"

namespace idm {

Tensor p_sample_loop(const NoisePredictor& predict, const Shape& shape, DType dtype, Prng& prng,
                     const BetaSchedule& sched) {
  Tensor x = ops::randn(prng, shape, dtype);
  for (int t = sched.T; t >= 1; --t) {
    const Tensor eps_hat = predict(x, t);
    if (eps_hat.shape() != shape) throw ShapeError("sampler: predictor returned " + shape_string(eps_hat.shape()));
    const double beta = sched.beta(t);
    const double coef = beta / std::sqrt(1.0 - sched.alpha_bar(t));
    x = ops::scale(ops::axpy(x, -coef, eps_hat), 1.0 / std::sqrt(sched.alpha(t)));
    if (t > 1) x = ops::axpy(x, std::sqrt(beta), ops::randn(prng, shape, dtype));
    if (!ops::all_finite(x)) throw DivergenceError("sampler diverged: non-finite state at t=" + std::to_string(t), t);
  }
  return ops::clamp(x, 0.0, 1.0);
}

Tensor p_sample_loop(const IUNet& model, std::int64_t count, Prng& prng, const BetaSchedule& sched) {
  if (sched.T > model.config().timesteps)
    throw ConfigError("schedule has " + std::to_string(sched.T) + " steps but the model embeds only " +
                      std::to_string(model.config().timesteps));
  const std::int64_t e = model.config().volume_edge;
  return p_sample_loop([&](const Tensor& x, int t) { return model.predict(x, t); }, {count, 1, e, e, e},
                       model.dtype(), prng, sched);
}

}  // namespace idm
