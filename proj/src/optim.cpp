#include "ren/optim.hpp"

#include <cmath>
#include <numbers>

namespace ren {

void AdamWConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("lr must be positive");
  if (warmup_steps == 0 || total_steps <= warmup_steps) throw ConfigError("need 0 < warmup_steps < total_steps");
  if (!(grad_clip_norm > 0)) throw ConfigError("grad_clip_norm must be positive");
  if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must lie in [0, 1)");
  if (!(eps > 0)) throw ConfigError("eps must be positive");
}

double learning_rate(std::uint32_t step, const AdamWConfig& c) {
  if (step <= c.warmup_steps) return c.lr * static_cast<double>(step) / c.warmup_steps;
  if (step >= c.total_steps) return 0.0;
  const double progress = static_cast<double>(step - c.warmup_steps) / static_cast<double>(c.total_steps - c.warmup_steps);
  return c.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double global_norm(const RenParams<float>& grads) {
  double sq = 0;
  grads.for_each([&](const std::string&, const MatrixF& g, bool) {
    for (Eigen::Index i = 0; i < g.size(); ++i) sq += double(g.data()[i]) * double(g.data()[i]);
  });
  return std::sqrt(sq);
}

double clip_global_norm(RenParams<float>& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (!std::isfinite(norm)) throw NumericsError("gradient norm is not finite");
  if (norm > max_norm) {
    const float scale = static_cast<float>(max_norm / norm);
    grads.for_each([&](const std::string&, MatrixF& g, bool) { g *= scale; });
  }
  return norm;
}

AdamW::AdamW(const RenParams<float>& like, const AdamWConfig& config)
    : config_(config), m_(like.zeros_like()), v_(like.zeros_like()) {
  config_.validate();
}

double AdamW::step(RenParams<float>& params, const RenParams<float>& grads, std::uint32_t t) {
  if (t < 1) throw ConfigError("optimizer steps are 1-based");
  const double lr = learning_rate(t, config_);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  std::vector<const MatrixF*> g;
  grads.for_each([&](const std::string&, const MatrixF& x, bool) { g.push_back(&x); });
  std::vector<MatrixF*> m, v;
  m_.for_each([&](const std::string&, MatrixF& x, bool) { m.push_back(&x); });
  v_.for_each([&](const std::string&, MatrixF& x, bool) { v.push_back(&x); });
  std::size_t k = 0;
  params.for_each([&](const std::string& name, MatrixF& p, bool decays) {
    if (g[k]->rows() != p.rows() || g[k]->cols() != p.cols()) throw ConfigError("gradient shape differs for " + name);
    float* pd = p.data();
    const float* gd = g[k]->data();
    float* md = m[k]->data();
    float* vd = v[k]->data();
    const double wd = decays ? config_.weight_decay : 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const double gi = gd[i];
      const double mi = config_.beta1 * md[i] + (1 - config_.beta1) * gi;
      const double vi = config_.beta2 * vd[i] + (1 - config_.beta2) * gi * gi;
      md[i] = static_cast<float>(mi);
      vd[i] = static_cast<float>(vi);
      const double update = (mi / bc1) / (std::sqrt(vi / bc2) + config_.eps);
      pd[i] = static_cast<float>(pd[i] - lr * (update + wd * pd[i]));
    }
    ++k;
  });
  return lr;
}

}  // namespace ren
