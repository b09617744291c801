#pragma once

#include <string>
#include <vector>

#include "ren/losses.hpp"
#include "ren/model.hpp"

namespace ren {

/// Accumulates into `grads` the gradient of a scalar loss whose partials are
/// d_ren (n x d_model), d_aligned (n x D, may be null) and d_final_attention
/// (head-averaged final-block attention, n x m, may be null).
template <class T>
void backward(const ForwardTrace<T>& trace, const RenParams<T>& params, const RenConfig& config, const Matrix<T>& d_ren,
              const Matrix<T>* d_aligned, const Matrix<T>* d_final_attention, RenParams<T>& grads);

/// Inputs for one view of a training pair.
template <class T>
struct ViewInputs {
  Matrix<T> features;                // m x D
  std::uint32_t h_patches = 0;       // grid of `features`, h * w = m
  std::uint32_t w_patches = 0;
  std::vector<PointPrompt> prompts;  // n
  std::vector<RegionId> ids;         // n, shared id namespace across the pair
  Matrix<T> targets;                 // n x D mask-averaged features
  Matrix<T> attention_targets;       // n x m binary, only needed when lambda_attn > 0

  template <class U>
  ViewInputs<U> cast() const {
    return {features.template cast<U>(), h_patches, w_patches, prompts, ids, targets.template cast<U>(),
            attention_targets.template cast<U>()};
  }
};

template <class T>
struct PairObjective {
  LossParts parts;
  double total = 0.0;
  RenParams<T> grads;  // empty when gradients were not requested
};

/// Contrastive loss over the concatenated tokens of both views, feature
/// similarity (and optional attention supervision) averaged over the views.
template <class T>
PairObjective<T> evaluate_pair(const ViewInputs<T>& first, const ViewInputs<T>& second, const RenParams<T>& params,
                               const RenConfig& config, const LossWeights& weights, bool with_grads);

/// Throws NumericsError naming the first tensor holding NaN/Inf.
template <class T>
void check_gradients_finite(const RenParams<T>& grads);

struct TensorGradCheck {
  std::string name;
  std::size_t elements = 0;
  double rel_error = 0.0;      // |a - f| / max(|a|, |f|) over the whole tensor (L2)
  double max_elem_rel_error = 0.0;
  double max_abs_error = 0.0;
};

struct GradCheckReport {
  std::vector<TensorGradCheck> tensors;
  double max_rel_error = 0.0;       // worst per-tensor error
  double max_elem_rel_error = 0.0;  // worst single element
  double seconds = 0.0;
};

/// Central differences (step epsilon) in double precision against the
/// analytic gradient of evaluate_pair. Per tensor the relative error is
/// ||a - f|| / max(||a||, ||f||); per element it is
/// |a - f| / max(|a|, |f|, abs_floor).
GradCheckReport gradcheck(const ViewInputs<double>& first, const ViewInputs<double>& second,
                          const RenParams<double>& params, const RenConfig& config, const LossWeights& weights,
                          double epsilon = 1e-3, double abs_floor = 1e-6);

/// The small random problem used for gradient checking: two views of
/// `patches` patches with `prompts` prompts each. Every parameter (including
/// the zero-initialized projections) gets uniform noise of +-perturbation so
/// each path is active.
struct GradCheckProblem {
  RenConfig config;
  RenParams<double> params;
  ViewInputs<double> first, second;
};
GradCheckProblem make_gradcheck_problem(std::uint64_t seed, const RenConfig& config, int patches, int prompts,
                                        bool with_attention_targets, double perturbation = 0.2);

}  // namespace ren
