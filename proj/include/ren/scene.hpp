#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include <json.hpp>

#include "ren/types.hpp"

namespace ren {

using RegionId = std::int32_t;
inline constexpr RegionId kNoRegion = -1;

enum class ShapeKind { kEllipse, kRectangle };

/// Axis-aligned shape in scene pixel coordinates.
struct Shape {
  ShapeKind kind = ShapeKind::kEllipse;
  float cx = 0, cy = 0, rx = 1, ry = 1;

  bool contains(double x, double y) const;
  friend bool operator==(const Shape&, const Shape&) = default;
};

using Rgb = std::array<std::uint8_t, 3>;

struct SceneRegion {
  Shape shape;
  int z_order = 0;
  RowVector<float> latent;
  Rgb color{};
  int class_id = -1;

  bool operator==(const SceneRegion& o) const {
    return shape == o.shape && z_order == o.z_order && latent == o.latent && color == o.color && class_id == o.class_id;
  }
};

/// Ground-truth layout standing in for an image plus its segmentation. Region
/// id 0 is the background; id k >= 1 is regions[k - 1].
struct SyntheticScene {
  std::uint64_t seed = 0;
  int canvas_w = 0;
  int canvas_h = 0;
  std::vector<SceneRegion> regions;
  RowVector<float> background_latent;
  Rgb background_color{};
  int background_class = -1;

  std::size_t region_count() const { return regions.size() + 1; }
  std::size_t dim() const { return static_cast<std::size_t>(background_latent.size()); }
  /// Region id owning scene point (x, y) after z-order resolution.
  RegionId owner(double x, double y) const;
  const RowVector<float>& latent(RegionId id) const { return id == 0 ? background_latent : regions[id - 1].latent; }
  int class_of(RegionId id) const { return id == 0 ? background_class : regions[id - 1].class_id; }

  bool operator==(const SyntheticScene& o) const {
    return seed == o.seed && canvas_w == o.canvas_w && canvas_h == o.canvas_h && regions == o.regions &&
           background_latent == o.background_latent && background_color == o.background_color &&
           background_class == o.background_class;
  }
};

/// Shared semantic classes: row 0 is the background class.
struct ClassBank {
  MatrixF prototypes;  // n_classes x dim, unit rows
  std::size_t size() const { return static_cast<std::size_t>(prototypes.rows()); }
};

struct SceneConfig {
  int n_regions = 4;
  int canvas_w = 96;
  int canvas_h = 96;
  int dim = 32;
  double min_area_fraction = 0.01;  // visible area per region after occlusion
  double max_radius_fraction = 0.3;
  double max_abs_cosine = 0.3;
  std::optional<ClassBank> classes;
  double latent_jitter = 0.0;
};

/// Unit vectors with pairwise |cos| <= max_abs_cosine via per-vector
/// rejection sampling. Throws GenerationError after 1000 failed draws for
/// any one vector.
MatrixF sample_separated_latents(std::uint64_t seed, int count, int dim, double max_abs_cosine);

ClassBank make_class_bank(std::uint64_t seed, int n_classes, int dim, double max_abs_cosine = 0.3);

SyntheticScene generate_scene(std::uint64_t seed, const SceneConfig& config);

/// Geometry and photometry of one rendered view. A view pixel is mapped to
/// scene space by: optional horizontal flip, crop rectangle, then rotation
/// about the canvas center.
struct ViewSpec {
  bool flip = false;
  double angle_rad = 0.0;
  double crop_x0 = 0.0, crop_y0 = 0.0;  // scene pixels
  double crop_w = 0.0, crop_h = 0.0;    // 0 means full canvas
  std::vector<std::array<float, 3>> color_gain;  // per region id; empty = 1
  float sharpness = 1.0f;

  bool operator==(const ViewSpec&) const = default;
  /// Scene-space position of the center of view pixel (u, v).
  std::array<double, 2> to_scene(const SyntheticScene& scene, int u, int v) const;
};

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;  // interleaved RGB, row-major

  const std::uint8_t* at(int x, int y) const { return &data[(std::size_t(y) * width + x) * 3]; }
  std::uint8_t* at(int x, int y) { return &data[(std::size_t(y) * width + x) * 3]; }
  bool operator==(const RgbImage&) const = default;
};

struct RenderedView {
  PatchFeatureMap features;
  std::vector<RegionMask> masks;  // index = region id, partitions the canvas
  RgbImage rgb;
};

/// Per-pixel region ids of a view (row-major).
std::vector<RegionId> ownership(const SyntheticScene& scene, const ViewSpec& view = {});

RenderedView render_scene(const SyntheticScene& scene, std::uint32_t h_patches, std::uint32_t w_patches,
                          double noise_sigma, const ViewSpec& view = {}, std::optional<std::uint64_t> noise_seed = {});

/// Region id per prompt: the containing mask, the mid-sized one by area when
/// several contain it (lower middle for even counts, ties by mask index), or
/// kNoRegion.
std::vector<RegionId> assign_region_ids(const std::vector<PointPrompt>& prompts, const std::vector<RegionMask>& masks);

nlohmann::json scene_to_json(const SyntheticScene& scene);
SyntheticScene scene_from_json(const nlohmann::json& j);

}  // namespace ren
