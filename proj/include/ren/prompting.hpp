#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "ren/scene.hpp"
#include "ren/types.hpp"

namespace ren {

/// G*G prompts at cell centers ((i + 0.5) / G, (j + 0.5) / G), row-major.
std::vector<PointPrompt> grid_prompts(int g);

struct SuperpixelMap {
  int width = 0;
  int height = 0;
  std::vector<std::int32_t> labels;  // row-major, in [0, count)
  std::vector<PointPrompt> centers;  // normalized centroids
  int count = 0;

  std::int32_t at(int x, int y) const { return labels[static_cast<std::size_t>(y) * width + x]; }
  /// Throws ValidationError unless labels partition the image into `count`
  /// non-empty labels.
  void validate() const;
};

struct SlicOptions {
  double compactness = 256.0;
  int iterations = 10;
};

/// SLIC in CIELAB: grid seeds moved to the lowest-gradient pixel of their
/// 3x3 neighbourhood, assignment by ||lab|| + (compactness / interval) ||xy||
/// inside a +-interval window (lowest cluster index wins ties), mean updates,
/// then every disconnected fragment is merged into its largest adjacent
/// superpixel. Labels are renumbered in raster order of first appearance.
/// Throws ConfigError when s < 1 or s exceeds the pixel count.
SuperpixelMap slic_segment(const RgbImage& image, int s, const SlicOptions& options = {});

/// One prompt per superpixel at its centroid, snapped to the nearest member
/// pixel center when the centroid pixel belongs to another label.
std::vector<PointPrompt> slic_prompts(const SuperpixelMap& map);

/// Returns true if every label forms one 4-connected component.
bool labels_connected(const SuperpixelMap& map);

std::array<double, 3> srgb_to_lab(const std::uint8_t* rgb);

nlohmann::json superpixels_to_json(const SuperpixelMap& map);
SuperpixelMap superpixels_from_json(const nlohmann::json& j);

}  // namespace ren
