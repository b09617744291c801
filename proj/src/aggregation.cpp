#include "ren/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>

#include "ren/errors.hpp"

namespace ren {

namespace {

// Unit rows in double. Zero rows come back empty and never link.
std::vector<std::vector<double>> unit_rows(const MatrixF& m) {
  std::vector<std::vector<double>> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    auto& r = out[static_cast<std::size_t>(i)];
    r.resize(static_cast<std::size_t>(m.cols()));
    double nn = 0;
    for (Eigen::Index d = 0; d < m.cols(); ++d) {
      r[static_cast<std::size_t>(d)] = m(i, d);
      nn += r[static_cast<std::size_t>(d)] * r[static_cast<std::size_t>(d)];
    }
    if (!std::isfinite(nn)) throw NumericsError("non-finite token");
    if (nn == 0.0) {
      r.clear();
      continue;
    }
    const double inv = 1.0 / std::sqrt(nn);
    for (auto& v : r) v *= inv;
  }
  return out;
}

bool linked(const std::vector<double>& a, const std::vector<double>& b, double mu) {
  if (a.empty() || b.empty()) return false;
  double s = 0;
  for (std::size_t d = 0; d < a.size(); ++d) s += a[d] * b[d];
  return s > mu;
}

std::vector<std::vector<std::uint32_t>> components(const MatrixF& ren, double mu) {
  const auto unit = unit_rows(ren);
  const std::size_t n = unit.size();
  // Unvisited indices kept in ascending order; each BFS pop scans them once.
  std::vector<std::uint32_t> open(n);
  for (std::size_t i = 0; i < n; ++i) open[i] = static_cast<std::uint32_t>(i);
  std::vector<std::vector<std::uint32_t>> groups;
  // Cosines of duplicates can round above 1; mu >= 1 must still mean no merging.
  if (mu >= 1.0) {
    for (auto i : open) groups.push_back({i});
    return groups;
  }
  while (!open.empty()) {
    std::vector<std::uint32_t> group{open.front()};
    open.erase(open.begin());
    std::queue<std::uint32_t> q;
    q.push(group.front());
    while (!q.empty() && !open.empty()) {
      const auto u = q.front();
      q.pop();
      std::size_t keep = 0;
      for (std::size_t k = 0; k < open.size(); ++k) {
        const auto v = open[k];
        if (linked(unit[u], unit[v], mu)) {
          group.push_back(v);
          q.push(v);
        } else {
          open[keep++] = v;
        }
      }
      open.resize(keep);
    }
    std::sort(group.begin(), group.end());
    groups.push_back(std::move(group));
  }
  return groups;
}

}  // namespace

std::size_t resolve_min_group(std::size_t n_prompts, std::optional<std::size_t> min_group) {
  if (min_group) return std::max<std::size_t>(1, *min_group);
  return n_prompts > kAutoDiscardAbove ? kAutoMinGroup : 1;
}

std::vector<std::uint32_t> component_labels(const MatrixF& ren_tokens, double mu) {
  std::vector<std::uint32_t> labels(static_cast<std::size_t>(ren_tokens.rows()));
  const auto groups = components(ren_tokens, mu);
  for (std::size_t g = 0; g < groups.size(); ++g)
    for (auto i : groups[g]) labels[i] = static_cast<std::uint32_t>(g);
  return labels;
}

AggregationResult aggregate(const TokenSet& tokens, double mu, std::optional<std::size_t> min_group) {
  tokens.validate();
  if (tokens.size() == 0) throw ValidationError("aggregate needs at least one token");
  if (!std::isfinite(mu)) throw ConfigError("mu must be finite");

  AggregationResult r;
  r.mu = mu;
  r.n_prompts = tokens.size();
  r.min_group = resolve_min_group(tokens.size(), min_group);

  for (auto& g : components(tokens.ren_tokens, mu)) {
    if (g.size() < r.min_group)
      r.discarded.insert(r.discarded.end(), g.begin(), g.end());
    else
      r.groups.push_back(std::move(g));
  }
  std::sort(r.discarded.begin(), r.discarded.end());

  const auto ng = static_cast<Eigen::Index>(r.groups.size());
  r.pooled_ren.resize(ng, tokens.ren_tokens.cols());
  r.pooled_aligned.resize(ng, tokens.aligned_tokens.cols());
  for (Eigen::Index g = 0; g < ng; ++g) {
    const auto& members = r.groups[static_cast<std::size_t>(g)];
    Eigen::RowVectorXd ren = Eigen::RowVectorXd::Zero(tokens.ren_tokens.cols());
    Eigen::RowVectorXd al = Eigen::RowVectorXd::Zero(tokens.aligned_tokens.cols());
    for (auto i : members) {
      ren += tokens.ren_tokens.row(i).cast<double>();
      al += tokens.aligned_tokens.row(i).cast<double>();
    }
    ren /= static_cast<double>(members.size());
    al /= static_cast<double>(members.size());
    r.pooled_ren.row(g) = ren.cast<float>();
    r.pooled_aligned.row(g) = al.cast<float>();

    std::uint32_t best = members.front();
    double best_d = std::numeric_limits<double>::infinity();
    for (auto i : members) {
      double d = 0;
      for (Eigen::Index k = 0; k < ren.size(); ++k) {
        const double e = double(tokens.ren_tokens(i, k)) - ren[k];
        d += e * e;
      }
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    r.representatives.push_back(best);
    r.representative_prompts.push_back(tokens.prompts[best]);
  }
  return r;
}

std::vector<std::uint32_t> prompt_superpixels(const SuperpixelMap& map, const std::vector<PointPrompt>& prompts) {
  std::vector<std::uint32_t> out;
  std::vector<int> hits(static_cast<std::size_t>(map.count), 0);
  out.reserve(prompts.size());
  for (const auto& p : prompts) {
    if (!p.valid()) throw ValidationError("prompt outside [0,1)^2");
    const auto s = static_cast<std::uint32_t>(map.at(p.pixel_x(map.width), p.pixel_y(map.height)));
    ++hits[s];
    out.push_back(s);
  }
  for (int h : hits)
    if (h != 1)
      throw UnsupportedPromptError("prompts are not one-per-superpixel (grid prompts have no superpixels to union)");
  return out;
}

std::vector<RegionMask> masks_from_groups(const SuperpixelMap& map, const AggregationResult& result,
                                          const std::vector<std::uint32_t>& prompt_superpixel) {
  if (prompt_superpixel.size() != result.n_prompts)
    throw UnsupportedPromptError("no superpixel assignment for these prompts");
  std::vector<int> owner(static_cast<std::size_t>(map.count), -1);
  for (std::size_t g = 0; g < result.groups.size(); ++g)
    for (auto i : result.groups[g]) {
      const auto s = prompt_superpixel[i];
      if (s >= owner.size()) throw ValidationError("superpixel index out of range");
      if (owner[s] != -1) throw UnsupportedPromptError("superpixel claimed by two prompts");
      owner[s] = static_cast<int>(g);
    }
  std::vector<RegionMask> masks(result.groups.size(), RegionMask(map.width, map.height));
  for (int y = 0; y < map.height; ++y)
    for (int x = 0; x < map.width; ++x) {
      const int g = owner[static_cast<std::size_t>(map.at(x, y))];
      if (g >= 0) masks[static_cast<std::size_t>(g)].set(x, y);
    }
  return masks;
}

std::vector<std::pair<double, std::size_t>> token_count_curve(const TokenSet& tokens, const std::vector<double>& mus) {
  if (mus.empty()) throw ConfigError("empty mu grid");
  tokens.validate();
  std::vector<std::pair<double, std::size_t>> out;
  for (double mu : mus) out.emplace_back(mu, components(tokens.ren_tokens, mu).size());
  return out;
}

nlohmann::json aggregation_report(const AggregationResult& r, bool with_masks) {
  nlohmann::json groups = nlohmann::json::array();
  for (std::size_t g = 0; g < r.groups.size(); ++g)
    groups.push_back({{"members", r.groups[g]},
                      {"representative", r.representatives[g]},
                      {"mask_ref", with_masks ? nlohmann::json(g) : nlohmann::json(nullptr)}});
  return {{"mu", r.mu},
          {"n_prompts", r.n_prompts},
          {"n_groups", r.groups.size()},
          {"n_discarded", r.discarded.size()},
          {"min_group", r.min_group},
          {"groups", groups}};
}

}  // namespace ren
