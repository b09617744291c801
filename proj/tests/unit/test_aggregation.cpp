#include <doctest.h>

#include <algorithm>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "ren/aggregation.hpp"
#include "ren/errors.hpp"

using namespace ren;

namespace {

TokenSet make_tokens(const MatrixF& ren) {
  TokenSet t;
  const auto n = ren.rows();
  t.ren_tokens = ren;
  t.aligned_tokens = ren * 2.0f;
  for (Eigen::Index i = 0; i < n; ++i)
    t.prompts.push_back({static_cast<float>((i % 97) + 0.5f) / 97.0f, static_cast<float>((i / 97) % 97 + 0.5f) / 97.0f});
  return t;
}

// Tokens scattered around `clusters` random centers.
MatrixF clustered(int n, int clusters, int dim, double spread, std::uint32_t seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<float> g(0.0f, 1.0f);
  MatrixF centers(clusters, dim), out(n, dim);
  for (Eigen::Index i = 0; i < centers.size(); ++i) centers.data()[i] = g(rng);
  for (int i = 0; i < n; ++i)
    for (int d = 0; d < dim; ++d) out(i, d) = centers(static_cast<int>(rng() % static_cast<unsigned>(clusters)), d) + float(spread) * g(rng);
  return out;
}

MatrixF gaussian_rows(int n, int dim, std::uint32_t seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<float> g(0.0f, 1.0f);
  MatrixF out(n, dim);
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = g(rng);
  return out;
}

// Union-find over the dense > mu relation; returns a canonical partition.
std::set<std::vector<std::uint32_t>> union_find_groups(const MatrixF& ren, double mu) {
  const auto n = static_cast<std::size_t>(ren.rows());
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  std::function<std::size_t(std::size_t)> find = [&](std::size_t x) { return parent[x] == x ? x : parent[x] = find(parent[x]); };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (cosine(ren.row(Eigen::Index(i)), ren.row(Eigen::Index(j))) > mu) parent[find(i)] = find(j);
  std::map<std::size_t, std::vector<std::uint32_t>> by_root;
  for (std::size_t i = 0; i < n; ++i) by_root[find(i)].push_back(static_cast<std::uint32_t>(i));
  std::set<std::vector<std::uint32_t>> out;
  for (auto& [r, g] : by_root) out.insert(g);
  return out;
}

SuperpixelMap stripes(int w, int h, int count) {
  SuperpixelMap m;
  m.width = w;
  m.height = h;
  m.count = count;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.labels.push_back(x * count / w);
  return superpixels_from_json(superpixels_to_json(m));
}

}  // namespace

TEST_SUITE("aggregation") {
  TEST_CASE("mu >= 1 keeps every token, duplicates included") {
    MatrixF ren = clustered(40, 3, 8, 0.01, 1);
    ren.row(5) = ren.row(4);
    for (double mu : {1.0, 1.5}) {
      const auto r = aggregate(make_tokens(ren), mu);
      CHECK(r.groups.size() == 40);
      CHECK(r.discarded.empty());
      CHECK(r.pooled_ren == ren);
    }
  }

  TEST_CASE("duplicates merge, orthogonal tokens do not") {
    MatrixF ren = MatrixF::Zero(3, 4);
    ren(0, 0) = ren(1, 0) = 1;
    ren(2, 1) = 1;
    const auto r = aggregate(make_tokens(ren), 0.975);
    REQUIRE(r.groups.size() == 2);
    CHECK(r.groups[0] == std::vector<std::uint32_t>{0, 1});
    CHECK(r.groups[1] == std::vector<std::uint32_t>{2});
    CHECK(r.pooled_ren.row(0) == ren.row(0));
    CHECK(r.pooled_aligned.row(0) == (2.0f * ren.row(0)));
  }

  TEST_CASE("chain a-b-c merges through b although a.c is below mu") {
    // a.c >= cos(2 acos 0.98) ~ 0.9208 is forced by geometry; 0.93 is feasible.
    Eigen::Matrix3d gram;
    gram << 1, 0.98, 0.93, 0.98, 1, 0.98, 0.93, 0.98, 1;
    const Eigen::LLT<Eigen::Matrix3d> llt(gram);
    REQUIRE(llt.info() == Eigen::Success);
    const Eigen::Matrix3d l = llt.matrixL();
    MatrixF ren = MatrixF::Zero(3, 6);
    ren.leftCols(3) = l.cast<float>();
    CHECK(cosine(ren.row(0), ren.row(2)) < 0.975);
    CHECK(cosine(ren.row(0), ren.row(1)) > 0.975);
    const auto r = aggregate(make_tokens(ren), 0.975);
    REQUIRE(r.groups.size() == 1);
    CHECK(r.groups[0] == std::vector<std::uint32_t>{0, 1, 2});
    CHECK(union_find_groups(ren, 0.975).size() == 1);
  }

  TEST_CASE("BFS components equal the union-find closure of the > mu relation") {
    for (std::uint32_t seed = 0; seed < 6; ++seed) {
      const MatrixF ren = clustered(150, 6, 8, 0.15, seed);
      for (double mu : {0.8, 0.9, 0.95, 0.975, 0.99}) {
        const auto r = aggregate(make_tokens(ren), mu, 1);
        const std::set<std::vector<std::uint32_t>> got(r.groups.begin(), r.groups.end());
        CHECK(got == union_find_groups(ren, mu));
      }
    }
  }

  TEST_CASE("groups and discards partition the input; groups ordered by first member") {
    const MatrixF ren = clustered(300, 10, 8, 0.2, 3);
    const auto r = aggregate(make_tokens(ren), 0.95, 4);
    std::vector<int> seen(300, 0);
    for (const auto& g : r.groups) {
      CHECK(g.size() >= 4);
      CHECK(std::is_sorted(g.begin(), g.end()));
      for (auto i : g) ++seen[i];
    }
    for (auto i : r.discarded) ++seen[i];
    CHECK(std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; }));
    for (std::size_t g = 1; g < r.groups.size(); ++g) CHECK(r.groups[g - 1].front() < r.groups[g].front());
  }

  TEST_CASE("pooled tokens are member means and the representative is the nearest member") {
    const MatrixF ren = clustered(60, 4, 8, 0.05, 9);
    const auto t = make_tokens(ren);
    const auto r = aggregate(t, 0.9);
    for (std::size_t g = 0; g < r.groups.size(); ++g) {
      Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(8);
      for (auto i : r.groups[g]) mean += ren.row(i).cast<double>();
      mean /= double(r.groups[g].size());
      CHECK((r.pooled_ren.row(Eigen::Index(g)).cast<double>() - mean).cwiseAbs().maxCoeff() < 1e-6);
      double best = 1e300;
      for (auto i : r.groups[g]) best = std::min(best, (ren.row(i).cast<double>() - mean).squaredNorm());
      const auto rep = r.representatives[g];
      CHECK(std::count(r.groups[g].begin(), r.groups[g].end(), rep) == 1);
      CHECK((ren.row(rep).cast<double>() - mean).squaredNorm() == doctest::Approx(best).epsilon(1e-9));
      CHECK(r.representative_prompts[g] == t.prompts[rep]);
    }
  }

  TEST_CASE("permuting tokens relabels groups and leaves pooled vectors unchanged") {
    const MatrixF ren = clustered(200, 7, 8, 0.1, 4);
    const auto a = aggregate(make_tokens(ren), 0.95);
    std::vector<int> perm(200);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), std::mt19937(2));
    MatrixF permuted(200, 8);
    for (int i = 0; i < 200; ++i) permuted.row(i) = ren.row(perm[static_cast<std::size_t>(i)]);
    const auto b = aggregate(make_tokens(permuted), 0.95);
    REQUIRE(a.groups.size() == b.groups.size());
    // Map b's groups back to original indices, then order by smallest member.
    std::vector<std::pair<std::vector<std::uint32_t>, Eigen::Index>> mapped;
    for (std::size_t g = 0; g < b.groups.size(); ++g) {
      std::vector<std::uint32_t> orig;
      for (auto i : b.groups[g]) orig.push_back(static_cast<std::uint32_t>(perm[i]));
      std::sort(orig.begin(), orig.end());
      mapped.push_back({orig, Eigen::Index(g)});
    }
    std::sort(mapped.begin(), mapped.end());
    for (std::size_t g = 0; g < a.groups.size(); ++g) {
      CHECK(mapped[g].first == a.groups[g]);
      CHECK(b.pooled_ren.row(mapped[g].second) == a.pooled_ren.row(Eigen::Index(g)));
    }
  }

  TEST_CASE("mutually dissimilar tokens stay singletons") {
    const MatrixF ren = MatrixF::Identity(16, 16);
    CHECK(aggregate(make_tokens(ren), 0.5).groups.size() == 16);
  }

  TEST_CASE("auto discard applies only above 1000 prompts") {
    CHECK(resolve_min_group(1000, std::nullopt) == 1);
    CHECK(resolve_min_group(1001, std::nullopt) == 3);
    CHECK(resolve_min_group(10, 5) == 5);
    // Random directions in 16-d: pairwise cosines stay far below 0.975.
    for (int n : {1000, 1001}) {
      MatrixF ren = gaussian_rows(n, 16, 12);
      ren.row(1) = ren.row(0);
      ren.row(2) = ren.row(0);  // one group of 3 survives the auto rule
      const auto r = aggregate(make_tokens(ren), 0.975);
      if (n == 1000) {
        CHECK(r.discarded.empty());
        CHECK(r.groups.size() == 998);  // {0,1,2} plus 997 singletons
      } else {
        CHECK(r.groups.size() == 1);
        CHECK(r.groups[0] == std::vector<std::uint32_t>{0, 1, 2});
        CHECK(r.discarded.size() == 998);
      }
    }
  }

  TEST_CASE("masks: one group covers the canvas, singletons give back the superpixels") {
    const auto map = stripes(20, 10, 5);
    const auto prompts = slic_prompts(map);
    const auto sp = prompt_superpixels(map, prompts);
    TokenSet same;
    same.prompts = prompts;
    same.ren_tokens = MatrixF::Ones(5, 4);
    same.aligned_tokens = MatrixF::Ones(5, 4);
    const auto all = masks_from_groups(map, aggregate(same, 0.975), sp);
    REQUIRE(all.size() == 1);
    CHECK(all[0].area() == 200);

    TokenSet distinct = same;
    distinct.ren_tokens = MatrixF::Identity(5, 4);
    distinct.ren_tokens(4, 0) = -1;
    const auto r = aggregate(distinct, 0.975);
    const auto masks = masks_from_groups(map, r, sp);
    REQUIRE(masks.size() == 5);
    for (std::size_t g = 0; g < 5; ++g)
      for (int y = 0; y < 10; ++y)
        for (int x = 0; x < 20; ++x) CHECK(masks[g].at(x, y) == (map.at(x, y) == int(sp[r.groups[g][0]])));
  }

  TEST_CASE("masks are disjoint and cover the canvas together with discarded superpixels") {
    const auto map = stripes(30, 6, 10);
    const auto prompts = slic_prompts(map);
    const auto sp = prompt_superpixels(map, prompts);
    MatrixF ren = MatrixF::Identity(10, 10);
    ren.row(3) = ren.row(2);
    ren.row(7) = ren.row(2);
    TokenSet t;
    t.prompts = prompts;
    t.ren_tokens = ren;
    t.aligned_tokens = ren;
    const auto r = aggregate(t, 0.975, 2);
    const auto masks = masks_from_groups(map, r, sp);
    std::set<std::uint32_t> dropped;
    for (auto i : r.discarded) dropped.insert(sp[i]);
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 30; ++x) {
        int owners = 0;
        for (const auto& m : masks) owners += m.at(x, y);
        CHECK(owners + int(dropped.count(static_cast<std::uint32_t>(map.at(x, y)))) == 1);
      }
  }

  TEST_CASE("grid prompts cannot be unioned into masks") {
    const auto map = stripes(32, 32, 3);
    CHECK_THROWS_AS(prompt_superpixels(map, grid_prompts(4)), UnsupportedPromptError);
    CHECK_THROWS_AS(prompt_superpixels(map, grid_prompts(1)), UnsupportedPromptError);
  }

  TEST_CASE("token count curve: mu > 1 gives n, identical tokens give 1, counts never decrease") {
    const MatrixF ren = clustered(120, 5, 8, 0.2, 7);
    const auto t = make_tokens(ren);
    CHECK(token_count_curve(t, {1.1})[0].second == 120);
    CHECK(token_count_curve(make_tokens(MatrixF::Ones(9, 4)), {0.0, 0.5, 0.999})[2].second == 1);
    std::vector<double> grid;
    for (double mu = 0.5; mu <= 1.0001; mu += 0.025) grid.push_back(mu);
    const auto curve = token_count_curve(t, grid);
    for (std::size_t i = 1; i < curve.size(); ++i) CHECK(curve[i].second >= curve[i - 1].second);
    CHECK_THROWS_AS(token_count_curve(t, {}), ConfigError);
  }

  TEST_CASE("report JSON carries counts and groups") {
    const auto r = aggregate(make_tokens(clustered(30, 3, 8, 0.01, 5)), 0.975);
    const auto j = aggregation_report(r, false);
    CHECK(j.at("n_prompts") == 30);
    CHECK(j.at("n_groups") == r.groups.size());
    CHECK(j.at("n_discarded") == 0);
    CHECK(j.at("groups").size() == r.groups.size());
    CHECK(j.at("groups")[0].at("mask_ref").is_null());
    CHECK(aggregation_report(r, true).at("groups")[0].at("mask_ref") == 0);
  }
}
