#pragma once

#include <cstdint>
#include <vector>

#include "ren/rng.hpp"
#include "ren/scene.hpp"

namespace ren {

struct AugmentConfig {
  double flip_prob = 0.5;
  double max_rotation_deg = 30.0;
  double min_crop_area = 0.6;  // fraction of the canvas kept by the crop
  double color_jitter = 0.2;   // per-channel gain in [1 - j, 1 + j]
  double sharpness_jitter = 0.5;

  /// Every transform disabled: both views equal the plain render.
  static AugmentConfig identity() { return {0.0, 0.0, 1.0, 0.0, 0.0}; }
  void validate() const;
};

struct RenderConfig {
  std::uint32_t h_patches = 12;
  std::uint32_t w_patches = 12;
  double noise_sigma = 0.05;
};

struct TrainingView {
  ViewSpec spec;
  RenderedView render;
  std::vector<PointPrompt> prompts;
  std::vector<RegionId> ids;  // region id per prompt, shared across the pair
};

struct ViewPair {
  TrainingView first, second;
};

/// Random view geometry/photometry for one view.
ViewSpec sample_view(const SyntheticScene& scene, const AugmentConfig& config, Rng& rng);

/// Two independently augmented renders of one scene. Views are resampled
/// until every region keeps at least one pixel in both (at most 100 tries,
/// then GenerationError). Both views share one noise seed.
ViewPair augment_scene(const SyntheticScene& scene, std::uint64_t seed, const AugmentConfig& augment,
                       const RenderConfig& render, int prompts_per_view);

/// Uniform random prompts with their region ids. Prompts whose region covers
/// no patch center in this view are dropped (their feature target is undefined).
void sample_prompts(TrainingView& view, int count, Rng& rng);

}  // namespace ren
