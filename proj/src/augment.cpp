#include "ren/augment.hpp"

#include <cmath>
#include <numbers>

namespace ren {

void AugmentConfig::validate() const {
  if (flip_prob < 0 || flip_prob > 1) throw ConfigError("flip_prob must lie in [0, 1]");
  if (max_rotation_deg < 0 || max_rotation_deg > 180) throw ConfigError("max_rotation_deg must lie in [0, 180]");
  if (!(min_crop_area > 0 && min_crop_area <= 1)) throw ConfigError("min_crop_area must lie in (0, 1]");
  if (color_jitter < 0 || color_jitter >= 1) throw ConfigError("color_jitter must lie in [0, 1)");
  if (sharpness_jitter < 0 || sharpness_jitter >= 1) throw ConfigError("sharpness_jitter must lie in [0, 1)");
}

ViewSpec sample_view(const SyntheticScene& scene, const AugmentConfig& c, Rng& rng) {
  ViewSpec v;
  // Draw every variate unconditionally so the stream layout does not depend
  // on the config.
  const double flip_u = uniform(rng, 0, 1);
  const double angle_u = uniform(rng, -1, 1);
  const double area_u = uniform(rng, 0, 1);
  const double aspect_u = uniform(rng, -1, 1);
  const double x_u = uniform(rng, 0, 1);
  const double y_u = uniform(rng, 0, 1);
  const double sharp_u = uniform(rng, -1, 1);

  v.flip = flip_u < c.flip_prob;
  v.angle_rad = angle_u * c.max_rotation_deg * std::numbers::pi / 180.0;
  const double w = scene.canvas_w, h = scene.canvas_h;
  if (c.min_crop_area < 1.0) {
    const double area = (c.min_crop_area + area_u * (1.0 - c.min_crop_area)) * w * h;
    const double aspect = std::exp(aspect_u * std::log(4.0 / 3.0));
    const double cw = std::min(w, std::sqrt(area * aspect));
    const double ch = std::min(h, area / cw);
    v.crop_w = cw;
    v.crop_h = ch;
    v.crop_x0 = x_u * (w - cw);
    v.crop_y0 = y_u * (h - ch);
  }
  for (std::size_t id = 0; id < scene.region_count(); ++id) {
    std::array<float, 3> g{};
    for (auto& x : g) x = static_cast<float>(1.0 + uniform(rng, -1, 1) * c.color_jitter);
    v.color_gain.push_back(g);
  }
  if (c.color_jitter == 0.0) v.color_gain.clear();
  v.sharpness = static_cast<float>(1.0 + sharp_u * c.sharpness_jitter);
  return v;
}

namespace {

bool all_regions_visible(const SyntheticScene& scene, const ViewSpec& view) {
  std::vector<bool> seen(scene.region_count(), false);
  for (RegionId id : ownership(scene, view)) seen[static_cast<std::size_t>(id)] = true;
  return std::all_of(seen.begin(), seen.end(), [](bool b) { return b; });
}

}  // namespace

void sample_prompts(TrainingView& view, int count, Rng& rng) {
  const auto& f = view.render.features;
  const auto& masks = view.render.masks;
  std::vector<bool> has_center(masks.size(), false);
  for (std::uint32_t r = 0; r < f.h_patches; ++r)
    for (std::uint32_t c = 0; c < f.w_patches; ++c)
      for (std::size_t k = 0; k < masks.size(); ++k)
        if (masks[k].at(f.center_x(c), f.center_y(r))) has_center[k] = true;

  view.prompts.clear();
  view.ids.clear();
  for (int attempt = 0; attempt < 4 * count && static_cast<int>(view.prompts.size()) < count; ++attempt) {
    const PointPrompt p{static_cast<float>(uniform(rng, 0, 1)), static_cast<float>(uniform(rng, 0, 1))};
    const int px = p.pixel_x(static_cast<int>(f.image_w));
    const int py = p.pixel_y(static_cast<int>(f.image_h));
    RegionId id = kNoRegion;
    for (std::size_t k = 0; k < masks.size(); ++k)
      if (masks[k].at(px, py)) {
        id = static_cast<RegionId>(k);
        break;
      }
    if (id == kNoRegion || !has_center[static_cast<std::size_t>(id)]) continue;
    view.prompts.push_back(p);
    view.ids.push_back(id);
  }
}

ViewPair augment_scene(const SyntheticScene& scene, std::uint64_t seed, const AugmentConfig& augment,
                       const RenderConfig& render, int prompts_per_view) {
  augment.validate();
  if (prompts_per_view < 1) throw ConfigError("prompts_per_view must be positive");
  Rng rng = make_rng(seed, {0xa1});
  ViewPair pair;
  TrainingView* views[2] = {&pair.first, &pair.second};
  for (TrainingView* v : views) {
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
      v->spec = sample_view(scene, augment, rng);
      ok = all_regions_visible(scene, v->spec);
    }
    if (!ok) throw GenerationError("no view keeps every region visible after 100 draws");
  }
  const std::uint64_t noise_seed = make_rng(seed, {0xa2})();
  for (int i = 0; i < 2; ++i) {
    views[i]->render = render_scene(scene, render.h_patches, render.w_patches, render.noise_sigma, views[i]->spec, noise_seed);
    Rng prng = make_rng(seed, {0xa3, static_cast<std::uint64_t>(i)});
    sample_prompts(*views[i], prompts_per_view, prng);
  }
  return pair;
}

}  // namespace ren
