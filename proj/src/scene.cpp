#include "ren/scene.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ren/rng.hpp"

namespace ren {

namespace {

constexpr int kMaxResamples = 1000;

RowVector<float> random_unit(Rng& rng, int dim) {
  RowVector<double> v(dim);
  for (int i = 0; i < dim; ++i) v[i] = gaussian(rng);
  v /= v.norm();
  return v.cast<float>();
}

bool separated(const RowVector<float>& v, const MatrixF& accepted, int count, double max_abs_cosine) {
  for (int j = 0; j < count; ++j)
    if (std::abs(cosine(v, accepted.row(j))) > max_abs_cosine) return false;
  return true;
}

MatrixF separated_latents(Rng& rng, int count, int dim, double max_abs_cosine) {
  MatrixF out(count, dim);
  for (int i = 0; i < count; ++i) {
    int tries = 0;
    RowVector<float> v = random_unit(rng, dim);
    while (!separated(v, out, i, max_abs_cosine)) {
      if (++tries > kMaxResamples)
        throw GenerationError("could not draw " + std::to_string(count) + " latents of dim " + std::to_string(dim) +
                              " with |cos| <= " + std::to_string(max_abs_cosine));
      v = random_unit(rng, dim);
    }
    out.row(i) = v;
  }
  return out;
}

Shape random_shape(Rng& rng, const SceneConfig& cfg) {
  const double side = std::min(cfg.canvas_w, cfg.canvas_h);
  const double r_lo = 0.08 * side;
  const double r_hi = std::max(r_lo, cfg.max_radius_fraction * side);
  Shape s;
  s.kind = uniform(rng, 0, 1) < 0.5 ? ShapeKind::kEllipse : ShapeKind::kRectangle;
  s.rx = static_cast<float>(uniform(rng, r_lo, r_hi));
  s.ry = static_cast<float>(uniform(rng, r_lo, r_hi));
  s.cx = static_cast<float>(uniform(rng, 0.1 * cfg.canvas_w, 0.9 * cfg.canvas_w));
  s.cy = static_cast<float>(uniform(rng, 0.1 * cfg.canvas_h, 0.9 * cfg.canvas_h));
  return s;
}

Rgb random_color(Rng& rng) {
  std::uniform_int_distribution<int> d(0, 255);
  return {static_cast<std::uint8_t>(d(rng)), static_cast<std::uint8_t>(d(rng)), static_cast<std::uint8_t>(d(rng))};
}

int color_distance(const Rgb& a, const Rgb& b) {
  return std::abs(a[0] - b[0]) + std::abs(a[1] - b[1]) + std::abs(a[2] - b[2]);
}

std::vector<std::size_t> visible_areas(const SyntheticScene& scene) {
  std::vector<std::size_t> areas(scene.region_count(), 0);
  for (int y = 0; y < scene.canvas_h; ++y)
    for (int x = 0; x < scene.canvas_w; ++x) ++areas[static_cast<std::size_t>(scene.owner(x + 0.5, y + 0.5))];
  return areas;
}

}  // namespace

bool Shape::contains(double x, double y) const {
  const double dx = (x - cx) / rx;
  const double dy = (y - cy) / ry;
  if (kind == ShapeKind::kRectangle) return std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
  return dx * dx + dy * dy <= 1.0;
}

RegionId SyntheticScene::owner(double x, double y) const {
  RegionId best = 0;
  int best_z = 0;
  for (std::size_t k = 0; k < regions.size(); ++k) {
    const auto& r = regions[k];
    if ((best == 0 || r.z_order > best_z) && r.shape.contains(x, y)) {
      best = static_cast<RegionId>(k + 1);
      best_z = r.z_order;
    }
  }
  return best;
}

MatrixF sample_separated_latents(std::uint64_t seed, int count, int dim, double max_abs_cosine) {
  Rng rng = make_rng(seed, {0x1a7e});
  return separated_latents(rng, count, dim, max_abs_cosine);
}

ClassBank make_class_bank(std::uint64_t seed, int n_classes, int dim, double max_abs_cosine) {
  if (n_classes < 2) throw ConfigError("class bank needs at least 2 classes");
  return ClassBank{sample_separated_latents(seed ^ 0xc1a55ULL, n_classes, dim, max_abs_cosine)};
}

SyntheticScene generate_scene(std::uint64_t seed, const SceneConfig& cfg) {
  if (cfg.n_regions < 1 || cfg.n_regions > 32) throw ConfigError("n_regions must be in [1, 32]");
  if (cfg.dim < 4) throw ConfigError("latent dim must be >= 4");
  if (cfg.canvas_w < 8 || cfg.canvas_h < 8) throw ConfigError("canvas must be at least 8x8");
  Rng rng = make_rng(seed, {0x5ce7e});

  SyntheticScene scene;
  scene.seed = seed;
  scene.canvas_w = cfg.canvas_w;
  scene.canvas_h = cfg.canvas_h;
  scene.regions.resize(static_cast<std::size_t>(cfg.n_regions));
  const int n_latents = cfg.n_regions + 1;

  MatrixF latents;
  std::vector<int> classes(static_cast<std::size_t>(n_latents), -1);
  if (cfg.classes) {
    const auto& bank = *cfg.classes;
    if (bank.prototypes.cols() != cfg.dim) throw ConfigError("class bank dim differs from scene dim");
    if (static_cast<int>(bank.size()) - 1 < cfg.n_regions)
      throw ConfigError("class bank has fewer foreground classes than regions");
    std::vector<int> pool(bank.size() - 1);
    std::iota(pool.begin(), pool.end(), 1);
    std::shuffle(pool.begin(), pool.end(), rng);
    classes[0] = 0;
    std::copy_n(pool.begin(), cfg.n_regions, classes.begin() + 1);
    latents.resize(n_latents, cfg.dim);
    for (int i = 0; i < n_latents; ++i) {
      const RowVector<float> proto = bank.prototypes.row(classes[static_cast<std::size_t>(i)]);
      int tries = 0;
      while (true) {
        RowVector<double> v = proto.cast<double>();
        if (cfg.latent_jitter > 0)
          for (int d = 0; d < cfg.dim; ++d) v[d] += cfg.latent_jitter * gaussian(rng) / std::sqrt(double(cfg.dim));
        const RowVector<float> unit = (v / v.norm()).cast<float>();
        if (separated(unit, latents, i, cfg.max_abs_cosine)) {
          latents.row(i) = unit;
          break;
        }
        if (cfg.latent_jitter <= 0 || ++tries > kMaxResamples)
          throw GenerationError("class latents violate the pairwise cosine bound");
      }
    }
  } else {
    latents = separated_latents(rng, n_latents, cfg.dim, cfg.max_abs_cosine);
  }

  scene.background_latent = latents.row(0);
  scene.background_class = classes[0];
  std::vector<int> z(static_cast<std::size_t>(cfg.n_regions));
  std::iota(z.begin(), z.end(), 0);
  std::shuffle(z.begin(), z.end(), rng);
  for (int k = 0; k < cfg.n_regions; ++k) {
    auto& r = scene.regions[static_cast<std::size_t>(k)];
    r.latent = latents.row(k + 1);
    r.class_id = classes[static_cast<std::size_t>(k) + 1];
    r.z_order = z[static_cast<std::size_t>(k)];
    r.shape = random_shape(rng, cfg);
  }

  const auto min_area = static_cast<std::size_t>(std::ceil(cfg.min_area_fraction * cfg.canvas_w * cfg.canvas_h));
  for (int tries = 0;; ++tries) {
    const auto areas = visible_areas(scene);
    const auto worst = std::min_element(areas.begin() + 1, areas.end());
    if (*worst >= min_area) break;
    if (tries >= kMaxResamples) throw GenerationError("could not place regions with the minimum visible area");
    scene.regions[static_cast<std::size_t>(worst - areas.begin()) - 1].shape = random_shape(rng, cfg);
  }

  std::vector<Rgb> colors;
  for (int i = 0; i < n_latents; ++i) {
    Rgb c = random_color(rng);
    for (int tries = 0; std::any_of(colors.begin(), colors.end(), [&](const Rgb& o) { return color_distance(o, c) < 90; });
         ++tries) {
      if (tries >= kMaxResamples) throw GenerationError("could not draw distinct region colors");
      c = random_color(rng);
    }
    colors.push_back(c);
  }
  scene.background_color = colors[0];
  for (int k = 0; k < cfg.n_regions; ++k) scene.regions[static_cast<std::size_t>(k)].color = colors[static_cast<std::size_t>(k) + 1];
  return scene;
}

std::array<double, 2> ViewSpec::to_scene(const SyntheticScene& scene, int u, int v) const {
  const double w = scene.canvas_w;
  const double h = scene.canvas_h;
  double s = (u + 0.5) / w;
  const double t = (v + 0.5) / h;
  if (flip) s = 1.0 - s;
  const double cw = crop_w > 0 ? crop_w : w;
  const double ch = crop_h > 0 ? crop_h : h;
  const double x = crop_x0 + s * cw;
  const double y = crop_y0 + t * ch;
  if (angle_rad == 0.0) return {x, y};
  const double ox = 0.5 * w, oy = 0.5 * h;
  const double c = std::cos(angle_rad), sn = std::sin(angle_rad);
  return {ox + c * (x - ox) - sn * (y - oy), oy + sn * (x - ox) + c * (y - oy)};
}

std::vector<RegionId> ownership(const SyntheticScene& scene, const ViewSpec& view) {
  std::vector<RegionId> own(std::size_t(scene.canvas_w) * scene.canvas_h);
  for (int v = 0; v < scene.canvas_h; ++v)
    for (int u = 0; u < scene.canvas_w; ++u) {
      const auto p = view.to_scene(scene, u, v);
      own[std::size_t(v) * scene.canvas_w + u] = scene.owner(p[0], p[1]);
    }
  return own;
}

RenderedView render_scene(const SyntheticScene& scene, std::uint32_t h_patches, std::uint32_t w_patches,
                          double noise_sigma, const ViewSpec& view, std::optional<std::uint64_t> noise_seed) {
  if (noise_sigma < 0) throw ValidationError("noise_sigma must be >= 0");
  const int width = scene.canvas_w;
  const int height = scene.canvas_h;
  if (h_patches < 1 || w_patches < 1 || h_patches > std::uint32_t(height) || w_patches > std::uint32_t(width))
    throw ConfigError("patch grid must fit inside the canvas");
  const auto own = ownership(scene, view);
  const std::size_t n_ids = scene.region_count();
  const auto dim = static_cast<Eigen::Index>(scene.dim());

  RenderedView out;
  out.masks.assign(n_ids, RegionMask(width, height));
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) out.masks[static_cast<std::size_t>(own[std::size_t(y) * width + x])].set(x, y);

  auto& fm = out.features;
  fm.h_patches = h_patches;
  fm.w_patches = w_patches;
  fm.dim = static_cast<std::uint32_t>(dim);
  fm.image_h = static_cast<std::uint32_t>(height);
  fm.image_w = static_cast<std::uint32_t>(width);
  fm.patch_size = std::max<std::uint32_t>(1, fm.image_h / h_patches);
  fm.data.resize(static_cast<Eigen::Index>(fm.patch_count()), dim);

  std::vector<std::size_t> counts(fm.patch_count() * n_ids, 0);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      ++counts[fm.patch_of_pixel(x, y) * n_ids + static_cast<std::size_t>(own[std::size_t(y) * width + x])];

  Rng rng = make_rng(noise_seed.value_or(scene.seed), {0x401e});
  for (std::size_t p = 0; p < fm.patch_count(); ++p) {
    const std::size_t* c = &counts[p * n_ids];
    const std::size_t total = std::accumulate(c, c + n_ids, std::size_t{0});
    const auto owners = std::count_if(c, c + n_ids, [](std::size_t v) { return v > 0; });
    const auto row = static_cast<Eigen::Index>(p);
    if (owners == 1 && noise_sigma == 0.0) {
      fm.data.row(row) = scene.latent(static_cast<RegionId>(std::find_if(c, c + n_ids, [](std::size_t v) { return v > 0; }) - c));
      continue;
    }
    RowVector<double> mix = RowVector<double>::Zero(dim);
    for (std::size_t id = 0; id < n_ids; ++id)
      if (c[id] > 0) mix += (double(c[id]) / double(total)) * scene.latent(static_cast<RegionId>(id)).cast<double>();
    if (noise_sigma > 0)
      for (Eigen::Index d = 0; d < dim; ++d) mix[d] += noise_sigma * gaussian(rng);
    const double norm = mix.norm();
    if (norm > 0) mix /= norm;
    fm.data.row(row) = mix.cast<float>();
  }

  auto& img = out.rgb;
  img.width = width;
  img.height = height;
  img.data.resize(std::size_t(width) * height * 3);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const RegionId id = own[std::size_t(y) * width + x];
      const Rgb& base = id == 0 ? scene.background_color : scene.regions[static_cast<std::size_t>(id) - 1].color;
      for (int ch = 0; ch < 3; ++ch) {
        float g = 1.0f;
        if (static_cast<std::size_t>(id) < view.color_gain.size()) g = view.color_gain[static_cast<std::size_t>(id)][ch];
        img.at(x, y)[ch] = static_cast<std::uint8_t>(std::clamp(std::lround(base[ch] * g), 0L, 255L));
      }
    }
  if (view.sharpness != 1.0f) {
    // Blend with a 3x3 box blur: < 1 softens, > 1 sharpens.
    const RgbImage src = img;
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        for (int ch = 0; ch < 3; ++ch) {
          double sum = 0;
          int n = 0;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              const int xx = x + dx, yy = y + dy;
              if (xx < 0 || yy < 0 || xx >= width || yy >= height) continue;
              sum += src.at(xx, yy)[ch];
              ++n;
            }
          const double blur = sum / n;
          const double v = blur + view.sharpness * (src.at(x, y)[ch] - blur);
          img.at(x, y)[ch] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
  }
  return out;
}

std::vector<RegionId> assign_region_ids(const std::vector<PointPrompt>& prompts, const std::vector<RegionMask>& masks) {
  std::vector<RegionId> ids(prompts.size(), kNoRegion);
  if (masks.empty()) return ids;
  const int width = masks.front().width();
  const int height = masks.front().height();
  for (const auto& m : masks)
    if (m.width() != width || m.height() != height) throw ValidationError("masks do not share one canvas geometry");
  std::vector<std::size_t> areas;
  areas.reserve(masks.size());
  for (const auto& m : masks) areas.push_back(m.area());

  std::vector<std::size_t> hits;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto& p = prompts[i];
    if (!p.valid()) throw ValidationError("prompt " + std::to_string(i) + " lies outside the canvas");
    const int x = p.pixel_x(width);
    const int y = p.pixel_y(height);
    hits.clear();
    for (std::size_t k = 0; k < masks.size(); ++k)
      if (masks[k].at(x, y)) hits.push_back(k);
    if (hits.empty()) continue;
    std::sort(hits.begin(), hits.end(), [&](std::size_t a, std::size_t b) {
      return areas[a] != areas[b] ? areas[a] < areas[b] : a < b;
    });
    ids[i] = static_cast<RegionId>(hits[(hits.size() - 1) / 2]);
  }
  return ids;
}

nlohmann::json scene_to_json(const SyntheticScene& scene) {
  using nlohmann::json;
  auto vec = [](const RowVector<float>& v) { return std::vector<float>(v.data(), v.data() + v.size()); };
  json regions = json::array();
  for (const auto& r : scene.regions) {
    regions.push_back({{"shape", r.shape.kind == ShapeKind::kEllipse ? "ellipse" : "rectangle"},
                       {"cx", r.shape.cx},
                       {"cy", r.shape.cy},
                       {"rx", r.shape.rx},
                       {"ry", r.shape.ry},
                       {"z", r.z_order},
                       {"class", r.class_id},
                       {"color", r.color},
                       {"latent", vec(r.latent)}});
  }
  return {{"seed", scene.seed},
          {"canvas", {{"width", scene.canvas_w}, {"height", scene.canvas_h}}},
          {"background", {{"class", scene.background_class}, {"color", scene.background_color}, {"latent", vec(scene.background_latent)}}},
          {"regions", regions}};
}

SyntheticScene scene_from_json(const nlohmann::json& j) {
  auto vec = [](const nlohmann::json& a) {
    const auto v = a.get<std::vector<float>>();
    RowVector<float> out(static_cast<Eigen::Index>(v.size()));
    std::copy(v.begin(), v.end(), out.data());
    return out;
  };
  try {
    SyntheticScene s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.canvas_w = j.at("canvas").at("width").get<int>();
    s.canvas_h = j.at("canvas").at("height").get<int>();
    const auto& bg = j.at("background");
    s.background_class = bg.at("class").get<int>();
    s.background_color = bg.at("color").get<Rgb>();
    s.background_latent = vec(bg.at("latent"));
    std::vector<int> zs;
    for (const auto& r : j.at("regions")) {
      SceneRegion region;
      const auto kind = r.at("shape").get<std::string>();
      if (kind != "ellipse" && kind != "rectangle") throw FormatError("unknown shape kind " + kind);
      region.shape.kind = kind == "ellipse" ? ShapeKind::kEllipse : ShapeKind::kRectangle;
      region.shape.cx = r.at("cx").get<float>();
      region.shape.cy = r.at("cy").get<float>();
      region.shape.rx = r.at("rx").get<float>();
      region.shape.ry = r.at("ry").get<float>();
      region.z_order = r.at("z").get<int>();
      region.class_id = r.at("class").get<int>();
      region.color = r.at("color").get<Rgb>();
      region.latent = vec(r.at("latent"));
      if (region.latent.size() != s.background_latent.size()) throw ValidationError("region latent dim mismatch");
      zs.push_back(region.z_order);
      s.regions.push_back(std::move(region));
    }
    std::sort(zs.begin(), zs.end());
    if (std::adjacent_find(zs.begin(), zs.end()) != zs.end()) throw ValidationError("z-orders must be unique");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("scene JSON: ") + e.what());
  }
}

}  // namespace ren
