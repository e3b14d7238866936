#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "idm/diffusion.hpp"
#include "idm/ops.hpp"

namespace idm {

namespace {

void check_t(const BetaSchedule& s, int t, int lo) {
  if (t < lo || t > s.T)
    throw NumericDomainError("timestep " + std::to_string(t) + " outside [" + std::to_string(lo) + ", " +
                             std::to_string(s.T) + "]");
}

}  // namespace

double BetaSchedule::beta(int t) const {
  check_t(*this, t, 1);
  return betas[static_cast<std::size_t>(t - 1)];
}

double BetaSchedule::alpha(int t) const {
  check_t(*this, t, 1);
  return alphas[static_cast<std::size_t>(t - 1)];
}

double BetaSchedule::alpha_bar(int t) const {
  check_t(*this, t, 0);
  return alpha_bars[static_cast<std::size_t>(t)];
}

BetaSchedule BetaSchedule::from_betas(std::vector<double> betas) {
  if (betas.empty()) throw ConfigError("schedule needs at least one timestep");
  BetaSchedule s;
  s.T = static_cast<int>(betas.size());
  s.alpha_bars.push_back(1.0);
  for (double b : betas) {
    if (!(b > 0.0 && b < 1.0)) throw ConfigError("beta values must lie in (0, 1)");
    s.alphas.push_back(1.0 - b);
    s.alpha_bars.push_back(s.alpha_bars.back() * (1.0 - b));
  }
  s.betas = std::move(betas);
  return s;
}

BetaSchedule cosine_schedule(int T, double s) {
  if (T < 2) throw ConfigError("cosine schedule needs T >= 2");
  auto f = [&](int t) {
    const double c = std::cos((static_cast<double>(t) / T + s) / (1.0 + s) * std::numbers::pi / 2.0);
    return c * c;
  };
  const double f0 = f(0);
  std::vector<double> betas;
  betas.reserve(static_cast<std::size_t>(T));
  double prev = 1.0;
  for (int t = 1; t <= T; ++t) {
    const double cur = f(t) / f0;
    betas.push_back(std::clamp(1.0 - cur / prev, kBetaMin, kBetaMax));
    prev = cur;
  }
  return BetaSchedule::from_betas(std::move(betas));
}

Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const BetaSchedule& sched) {
  if (eps.shape() != x0.shape()) throw ShapeError("q_sample: noise shape differs from x0");
  if (t < 1) throw NumericDomainError("q_sample: timestep must be >= 1");
  const double ab = sched.alpha_bar(t);
  return ops::axpy(ops::scale(x0, std::sqrt(ab)), std::sqrt(1.0 - ab), eps);
}

Tensor q_step(const Tensor& x_prev, int t, const Tensor& eps, const BetaSchedule& sched) {
  if (eps.shape() != x_prev.shape()) throw ShapeError("q_step: noise shape differs from input");
  const double b = sched.beta(t);
  return ops::axpy(ops::scale(x_prev, std::sqrt(1.0 - b)), std::sqrt(b), eps);
}

}  // namespace idm
