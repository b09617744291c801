#pragma once

#include <vector>

#include "ren/linalg.hpp"
#include "ren/scene.hpp"
#include "ren/types.hpp"

namespace ren {

template <class T>
struct LossAndGrad {
  T value = 0;
  Matrix<T> grad;  // same shape as the differentiated input
};

/// Multi-positive InfoNCE over cosine similarities. For every anchor with at
/// least one positive (same id, id != kNoRegion):
///   -log( sum_{j != i, id_j = id_i} e^{s_ij / tau} / sum_{k != i} e^{s_ik / tau} )
/// averaged over those anchors. Anchors without positives still act as
/// negatives. Throws DegenerateBatchError if no anchor has a positive and
/// NumericsError on a zero-norm token.
template <class T>
LossAndGrad<T> info_nce_loss(const Matrix<T>& tokens, const std::vector<RegionId>& ids, T tau);

/// mean_i (1 - cos(target_i, aligned_i)); gradient w.r.t. aligned.
template <class T>
LossAndGrad<T> feature_similarity_loss(const Matrix<T>& aligned, const Matrix<T>& targets);

/// Mean of the patch features whose cell center lies inside mask(ids[i]).
/// Throws EmptyMaskError if that set is empty, ValidationError on a missing id.
MatrixF target_tokens(const PatchFeatureMap& map, const std::vector<RegionMask>& masks, const std::vector<RegionId>& ids);

/// Patch-grid rasterization of a mask: 1 where the patch cell center lies in the mask.
RowVector<float> rasterize_to_patches(const PatchFeatureMap& geometry, const RegionMask& mask);

inline constexpr double kAttnProbEps = 1e-6;

/// BCE + Dice between the head-averaged final-block attention (n x m) and
/// binary patch targets (n x m). Each attention row is rescaled by its
/// maximum so a row uniform over its support maps to exactly 1 there. BCE
/// clamps probabilities to [eps, 1 - eps]; Dice uses +1 smoothing:
///   dice = 1 - (2 sum p t + 1) / (sum p + sum t + 1).
/// Gradient is w.r.t. the attention input.
template <class T>
LossAndGrad<T> attention_supervision_loss(const Matrix<T>& attention, const Matrix<T>& targets);

struct LossWeights {
  double lambda_cont = 1.0;
  double lambda_feat = 1.0;
  double lambda_attn = 0.0;
  double tau = 0.1;
  void validate() const;
};

struct LossParts {
  double cont = 0.0;
  double feat = 0.0;
  double attn = 0.0;
};

double total_loss(const LossParts& parts, const LossWeights& weights);

}  // namespace ren
