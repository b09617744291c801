#include "ren/prompting.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <queue>

#include "ren/io.hpp"

namespace ren {

std::vector<PointPrompt> grid_prompts(int g) {
  if (g < 1) throw ConfigError("grid size must be >= 1");
  std::vector<PointPrompt> out;
  out.reserve(static_cast<std::size_t>(g) * g);
  for (int j = 0; j < g; ++j)
    for (int i = 0; i < g; ++i)
      out.push_back({static_cast<float>((i + 0.5) / g), static_cast<float>((j + 0.5) / g)});
  return out;
}

void SuperpixelMap::validate() const {
  if (width < 1 || height < 1 || labels.size() != static_cast<std::size_t>(width) * height)
    throw ValidationError("superpixel map geometry mismatch");
  std::vector<bool> used(static_cast<std::size_t>(count), false);
  for (auto l : labels) {
    if (l < 0 || l >= count) throw ValidationError("superpixel label out of range");
    used[static_cast<std::size_t>(l)] = true;
  }
  for (bool u : used)
    if (!u) throw ValidationError("empty superpixel label");
}

std::array<double, 3> srgb_to_lab(const std::uint8_t* rgb) {
  auto linear = [](std::uint8_t v) {
    const double c = v / 255.0;
    return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
  };
  const double r = linear(rgb[0]), g = linear(rgb[1]), b = linear(rgb[2]);
  const double x = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047;
  const double y = (0.2126729 * r + 0.7151522 * g + 0.0721750 * b) / 1.0;
  const double z = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883;
  auto f = [](double t) { return t > 216.0 / 24389.0 ? std::cbrt(t) : (24389.0 / 27.0 * t + 16.0) / 116.0; };
  const double fx = f(x), fy = f(y), fz = f(z);
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

namespace {

struct Center {
  double l, a, b, x, y;
};

// Keeps the largest 4-connected component of every label and merges each
// other component (and any unassigned pixel) into its largest adjacent kept
// component.
std::vector<std::int32_t> enforce_connectivity(const std::vector<std::int32_t>& labels, int w, int h) {
  const std::size_t n = labels.size();
  std::vector<int> comp(n, -1);
  std::vector<std::int32_t> comp_label;
  std::vector<std::size_t> comp_size;
  std::vector<std::size_t> stack;
  for (std::size_t p = 0; p < n; ++p) {
    if (comp[p] >= 0) continue;
    const int id = static_cast<int>(comp_label.size());
    comp_label.push_back(labels[p]);
    comp_size.push_back(0);
    comp[p] = id;
    stack.assign(1, p);
    while (!stack.empty()) {
      const std::size_t q = stack.back();
      stack.pop_back();
      ++comp_size[static_cast<std::size_t>(id)];
      const int x = static_cast<int>(q % w), y = static_cast<int>(q / w);
      const int nx[4] = {x - 1, x + 1, x, x};
      const int ny[4] = {y, y, y - 1, y + 1};
      for (int k = 0; k < 4; ++k) {
        if (nx[k] < 0 || ny[k] < 0 || nx[k] >= w || ny[k] >= h) continue;
        const std::size_t r = static_cast<std::size_t>(ny[k]) * w + nx[k];
        if (comp[r] < 0 && labels[r] == labels[p]) {
          comp[r] = id;
          stack.push_back(r);
        }
      }
    }
  }
  const std::size_t nc = comp_label.size();
  std::vector<int> best_of_label;
  std::vector<bool> kept(nc, false);
  for (std::size_t c = 0; c < nc; ++c) {
    const auto l = comp_label[c];
    if (l < 0) continue;
    if (static_cast<std::size_t>(l) >= best_of_label.size()) best_of_label.resize(static_cast<std::size_t>(l) + 1, -1);
    int& best = best_of_label[static_cast<std::size_t>(l)];
    if (best < 0 || comp_size[c] > comp_size[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
  }
  for (int b : best_of_label)
    if (b >= 0) kept[static_cast<std::size_t>(b)] = true;

  std::vector<std::vector<int>> adjacent(nc);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t p = static_cast<std::size_t>(y) * w + x;
      if (x + 1 < w && comp[p] != comp[p + 1]) {
        adjacent[static_cast<std::size_t>(comp[p])].push_back(comp[p + 1]);
        adjacent[static_cast<std::size_t>(comp[p + 1])].push_back(comp[p]);
      }
      if (y + 1 < h && comp[p] != comp[p + w]) {
        adjacent[static_cast<std::size_t>(comp[p])].push_back(comp[p + w]);
        adjacent[static_cast<std::size_t>(comp[p + w])].push_back(comp[p]);
      }
    }

  std::vector<int> root(nc);
  std::iota(root.begin(), root.end(), 0);
  auto find = [&](int c) {
    while (root[static_cast<std::size_t>(c)] != c) c = root[static_cast<std::size_t>(c)] = root[static_cast<std::size_t>(root[static_cast<std::size_t>(c)])];
    return c;
  };
  std::vector<std::size_t> root_size = comp_size;
  bool pending = true;
  while (pending) {
    pending = false;
    bool progress = false;
    for (std::size_t c = 0; c < nc; ++c) {
      if (kept[c] || root[c] != static_cast<int>(c)) continue;
      int target = -1;
      for (int a : adjacent[c]) {
        const int r = find(a);
        if (!kept[static_cast<std::size_t>(r)]) continue;
        if (target < 0 || root_size[static_cast<std::size_t>(r)] > root_size[static_cast<std::size_t>(target)] ||
            (root_size[static_cast<std::size_t>(r)] == root_size[static_cast<std::size_t>(target)] && r < target))
          target = r;
      }
      if (target < 0) {
        pending = true;
        continue;
      }
      root[c] = target;
      root_size[static_cast<std::size_t>(target)] += root_size[c];
      progress = true;
    }
    if (pending && !progress) {
      // Only orphans left without a kept neighbour: promote the first one.
      for (std::size_t c = 0; c < nc; ++c)
        if (!kept[c] && root[c] == static_cast<int>(c)) {
          kept[c] = true;
          break;
        }
    }
  }

  std::vector<std::int32_t> out(n);
  std::vector<std::int32_t> renumber(nc, -1);
  std::int32_t next = 0;
  for (std::size_t p = 0; p < n; ++p) {
    const auto r = static_cast<std::size_t>(find(comp[p]));
    if (renumber[r] < 0) renumber[r] = next++;
    out[p] = renumber[r];
  }
  return out;
}

void compute_centers(SuperpixelMap& m) {
  std::vector<double> sx(static_cast<std::size_t>(m.count), 0), sy(sx), cnt(sx);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      const auto l = static_cast<std::size_t>(m.at(x, y));
      sx[l] += x;
      sy[l] += y;
      cnt[l] += 1;
    }
  m.centers.resize(static_cast<std::size_t>(m.count));
  for (std::size_t k = 0; k < m.centers.size(); ++k)
    m.centers[k] = {static_cast<float>((sx[k] / cnt[k] + 0.5) / m.width), static_cast<float>((sy[k] / cnt[k] + 0.5) / m.height)};
}

}  // namespace

SuperpixelMap slic_segment(const RgbImage& image, int s, const SlicOptions& options) {
  const int w = image.width, h = image.height;
  if (w < 1 || h < 1 || image.data.size() != static_cast<std::size_t>(w) * h * 3) throw ValidationError("empty or malformed image");
  const std::size_t n = static_cast<std::size_t>(w) * h;
  if (s < 1 || static_cast<std::size_t>(s) > n) throw ConfigError("superpixel count must lie in [1, pixel count]");
  if (!(options.compactness > 0) || options.iterations < 1) throw ConfigError("compactness and iterations must be positive");

  std::vector<std::array<double, 3>> lab(n);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) lab[static_cast<std::size_t>(y) * w + x] = srgb_to_lab(image.at(x, y));
  auto lab_at = [&](int x, int y) -> const std::array<double, 3>& {
    x = std::clamp(x, 0, w - 1);
    y = std::clamp(y, 0, h - 1);
    return lab[static_cast<std::size_t>(y) * w + x];
  };
  auto gradient = [&](int x, int y) {
    double g = 0;
    for (int c = 0; c < 3; ++c) {
      const double dx = lab_at(x + 1, y)[c] - lab_at(x - 1, y)[c];
      const double dy = lab_at(x, y + 1)[c] - lab_at(x, y - 1)[c];
      g += dx * dx + dy * dy;
    }
    return g;
  };

  const double interval = std::sqrt(static_cast<double>(n) / s);
  const int nx = std::clamp(static_cast<int>(std::lround(std::sqrt(static_cast<double>(s) * w / h))), 1, w);
  const int ny = std::clamp(static_cast<int>(std::lround(static_cast<double>(s) / nx)), 1, h);
  std::vector<Center> centers;
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      const int sx = std::min(w - 1, static_cast<int>((i + 0.5) * w / nx));
      const int sy = std::min(h - 1, static_cast<int>((j + 0.5) * h / ny));
      int bx = sx, by = sy;
      double best = gradient(sx, sy);
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int x = sx + dx, y = sy + dy;
          if (x < 0 || y < 0 || x >= w || y >= h) continue;
          const double g = gradient(x, y);
          if (g < best) {
            best = g;
            bx = x;
            by = y;
          }
        }
      const auto& c = lab_at(bx, by);
      centers.push_back({c[0], c[1], c[2], double(bx), double(by)});
    }

  const double spatial = options.compactness / interval;
  const int radius = static_cast<int>(std::ceil(interval));
  std::vector<std::int32_t> labels(n, -1);
  std::vector<double> dist(n);
  for (int it = 0; it < options.iterations; ++it) {
    std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::infinity());
    for (std::size_t k = 0; k < centers.size(); ++k) {
      const Center& c = centers[k];
      const int x0 = std::max(0, static_cast<int>(std::floor(c.x)) - radius);
      const int x1 = std::min(w - 1, static_cast<int>(std::ceil(c.x)) + radius);
      const int y0 = std::max(0, static_cast<int>(std::floor(c.y)) - radius);
      const int y1 = std::min(h - 1, static_cast<int>(std::ceil(c.y)) + radius);
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          const std::size_t p = static_cast<std::size_t>(y) * w + x;
          const auto& v = lab[p];
          const double dc = std::sqrt((v[0] - c.l) * (v[0] - c.l) + (v[1] - c.a) * (v[1] - c.a) + (v[2] - c.b) * (v[2] - c.b));
          const double ds = std::sqrt((x - c.x) * (x - c.x) + (y - c.y) * (y - c.y));
          const double d = dc + spatial * ds;
          if (d < dist[p]) {
            dist[p] = d;
            labels[p] = static_cast<std::int32_t>(k);
          }
        }
    }
    std::vector<Center> sum(centers.size(), Center{0, 0, 0, 0, 0});
    std::vector<std::size_t> cnt(centers.size(), 0);
    for (std::size_t p = 0; p < n; ++p) {
      if (labels[p] < 0) continue;
      auto& a = sum[static_cast<std::size_t>(labels[p])];
      a.l += lab[p][0];
      a.a += lab[p][1];
      a.b += lab[p][2];
      a.x += static_cast<double>(p % w);
      a.y += static_cast<double>(p / w);
      ++cnt[static_cast<std::size_t>(labels[p])];
    }
    for (std::size_t k = 0; k < centers.size(); ++k) {
      if (cnt[k] == 0) continue;
      const double inv = 1.0 / static_cast<double>(cnt[k]);
      centers[k] = {sum[k].l * inv, sum[k].a * inv, sum[k].b * inv, sum[k].x * inv, sum[k].y * inv};
    }
  }

  SuperpixelMap out;
  out.width = w;
  out.height = h;
  out.labels = enforce_connectivity(labels, w, h);
  out.count = 1 + *std::max_element(out.labels.begin(), out.labels.end());
  compute_centers(out);
  return out;
}

std::vector<PointPrompt> slic_prompts(const SuperpixelMap& m) {
  std::vector<PointPrompt> out;
  out.reserve(m.centers.size());
  for (std::size_t k = 0; k < m.centers.size(); ++k) {
    const PointPrompt c = m.centers[k];
    if (m.at(c.pixel_x(m.width), c.pixel_y(m.height)) == static_cast<std::int32_t>(k)) {
      out.push_back(c);
      continue;
    }
    const double cx = c.x * m.width, cy = c.y * m.height;
    double best = std::numeric_limits<double>::infinity();
    int bx = 0, by = 0;
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x) {
        if (m.at(x, y) != static_cast<std::int32_t>(k)) continue;
        const double d = (x + 0.5 - cx) * (x + 0.5 - cx) + (y + 0.5 - cy) * (y + 0.5 - cy);
        if (d < best) {
          best = d;
          bx = x;
          by = y;
        }
      }
    out.push_back({static_cast<float>((bx + 0.5) / m.width), static_cast<float>((by + 0.5) / m.height)});
  }
  return out;
}

bool labels_connected(const SuperpixelMap& m) {
  std::vector<bool> seen(m.labels.size(), false), label_done(static_cast<std::size_t>(m.count), false);
  std::queue<std::size_t> q;
  for (std::size_t p = 0; p < m.labels.size(); ++p) {
    if (seen[p]) continue;
    const auto l = static_cast<std::size_t>(m.labels[p]);
    if (label_done[l]) return false;  // second component of the same label
    label_done[l] = true;
    seen[p] = true;
    q.push(p);
    while (!q.empty()) {
      const std::size_t r = q.front();
      q.pop();
      const int x = static_cast<int>(r % m.width), y = static_cast<int>(r / m.width);
      const int nx[4] = {x - 1, x + 1, x, x};
      const int ny[4] = {y, y, y - 1, y + 1};
      for (int k = 0; k < 4; ++k) {
        if (nx[k] < 0 || ny[k] < 0 || nx[k] >= m.width || ny[k] >= m.height) continue;
        const std::size_t t = static_cast<std::size_t>(ny[k]) * m.width + nx[k];
        if (!seen[t] && m.labels[t] == m.labels[p]) {
          seen[t] = true;
          q.push(t);
        }
      }
    }
  }
  return true;
}

nlohmann::json superpixels_to_json(const SuperpixelMap& m) {
  nlohmann::json list = nlohmann::json::array();
  for (int k = 0; k < m.count; ++k) {
    RegionMask mask(m.width, m.height);
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x)
        if (m.at(x, y) == k) mask.set(x, y);
    list.push_back(mask.to_runs());
  }
  return {{"width", m.width}, {"height", m.height}, {"count", m.count}, {"superpixels", list}};
}

SuperpixelMap superpixels_from_json(const nlohmann::json& j) {
  SuperpixelMap m;
  try {
    m.width = j.at("width").get<int>();
    m.height = j.at("height").get<int>();
    m.count = j.at("count").get<int>();
    const auto& list = j.at("superpixels");
    if (m.width < 1 || m.height < 1 || m.count < 1 || static_cast<int>(list.size()) != m.count)
      throw ValidationError("superpixel JSON geometry mismatch");
    m.labels.assign(static_cast<std::size_t>(m.width) * m.height, -1);
    for (int k = 0; k < m.count; ++k) {
      const auto mask = RegionMask::from_runs(m.width, m.height, list[static_cast<std::size_t>(k)].get<std::vector<std::uint32_t>>());
      for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x)
          if (mask.at(x, y)) {
            auto& l = m.labels[static_cast<std::size_t>(y) * m.width + x];
            if (l >= 0) throw ValidationError("superpixels overlap");
            l = k;
          }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed superpixel JSON: ") + e.what());
  }
  m.validate();
  compute_centers(m);
  return m;
}

}  // namespace ren
