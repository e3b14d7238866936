#include <cmath>
#include <numbers>
#include <utility>

#include "idm/diffusion.hpp"

namespace idm {

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("config 'lr': must be > 0");
  if (!(lambda_r >= 0 && lambda_r <= 1)) throw ConfigError("config 'lambda_r': must lie in [0, 1]");
  if (!(lambda_l2 >= 0)) throw ConfigError("config 'lambda_l2': must be >= 0");
  if (batch < 1) throw ConfigError("config 'batch': must be >= 1");
  if (steps < 1) throw ConfigError("config 'steps': must be >= 1");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1)) throw ConfigError("config 'adam_beta1': must lie in [0, 1)");
  if (!(adam_beta2 >= 0 && adam_beta2 < 1)) throw ConfigError("config 'adam_beta2': must lie in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("config 'adam_eps': must be > 0");
}

double cosine_lr(const TrainConfig& cfg, int step) {
  if (step >= cfg.steps) return 0.0;
  return 0.5 * cfg.lr * (1.0 + std::cos(std::numbers::pi * step / cfg.steps));
}

AdamW::AdamW(std::vector<Param*> params, const TrainConfig& cfg)
    : params_(std::move(params)),
      beta1_(cfg.adam_beta1),
      beta2_(cfg.adam_beta2),
      eps_(cfg.adam_eps),
      decay_(cfg.lambda_l2) {
  for (const Param* p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p->value.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p->value.numel()), 0.0);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, t_);
  const double c2 = 1.0 - std::pow(beta2_, t_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Param& p = *params_[i];
    auto& m = m_[i];
    auto& v = v_[i];
    visit_dtype(p.value.dtype(), [&]<class T>() {
      auto w = p.value.data<T>();
      auto g = std::as_const(p.grad).data<T>();
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double gk = g[k];
        double wk = w[k] * (1.0 - lr * decay_);
        m[k] = beta1_ * m[k] + (1.0 - beta1_) * gk;
        v[k] = beta2_ * v[k] + (1.0 - beta2_) * gk * gk;
        wk -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
        w[k] = static_cast<T>(wk);
      }
    });
  }
}

}  // namespace idm
