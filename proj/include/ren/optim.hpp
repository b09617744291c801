#pragma once

#include <cstdint>

#include "ren/model.hpp"

namespace ren {

struct AdamWConfig {
  double lr = 1e-3;
  std::uint32_t warmup_steps = 100;
  std::uint32_t total_steps = 2000;
  double grad_clip_norm = 5.0;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  void validate() const;
};

/// Linear warmup to lr at warmup_steps, then cosine decay to 0 at total_steps.
/// Steps are 1-based; steps past total_steps stay at 0.
double learning_rate(std::uint32_t step, const AdamWConfig& config);

/// L2 norm over every gradient tensor.
double global_norm(const RenParams<float>& grads);

/// Rescales grads in place so the global norm is at most max_norm. Returns the
/// norm before clipping.
double clip_global_norm(RenParams<float>& grads, double max_norm);

/// AdamW with decoupled weight decay (p -= lr * wd * p), skipped for tensors
/// flagged as non-decaying (LayerNorm gains and biases).
class AdamW {
 public:
  AdamW(const RenParams<float>& like, const AdamWConfig& config);

  /// One update at 1-based step t with already-clipped gradients. Returns the
  /// learning rate used.
  double step(RenParams<float>& params, const RenParams<float>& grads, std::uint32_t t);

  const AdamWConfig& config() const { return config_; }

 private:
  AdamWConfig config_;
  RenParams<float> m_, v_;
};

}  // namespace ren
