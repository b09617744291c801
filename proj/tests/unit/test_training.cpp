#include <doctest.h>

#include <cmath>
#include <random>

#include "ren/backward.hpp"
#include "ren/losses.hpp"

using namespace ren;

namespace {

MatrixD random_tokens(int n, int d, std::mt19937& rng) {
  std::normal_distribution<double> g;
  MatrixD m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

// Direct double loop over anchors and candidates.
double brute_info_nce(const MatrixD& x, const std::vector<RegionId>& ids, double tau) {
  const auto n = static_cast<int>(x.rows());
  double total = 0;
  int anchors = 0;
  for (int i = 0; i < n; ++i) {
    double num = 0, den = 0;
    bool has_pos = false;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      const double e = std::exp(cosine(x.row(i), x.row(j)) / tau);
      den += e;
      if (ids[i] != kNoRegion && ids[j] == ids[i]) {
        num += e;
        has_pos = true;
      }
    }
    if (!has_pos) continue;
    total += -std::log(num / den);
    ++anchors;
  }
  return total / anchors;
}

PatchFeatureMap two_by_two() {
  PatchFeatureMap m;
  m.h_patches = m.w_patches = 2;
  m.dim = 2;
  m.image_h = m.image_w = 16;
  m.patch_size = 8;
  m.data.resize(4, 2);
  m.data << 1, 0, 2, 0, 3, 1, 4, 1;
  return m;
}

RegionMask rect_mask(int w, int h, int x0, int y0, int x1, int y1) {
  RegionMask m(w, h);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m.set(x, y, true);
  return m;
}

RenConfig gradcheck_config() {
  RenConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_blocks = 4;
  c.encoder_dim = 8;
  c.ffn_mult = 4;
  return c;
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("InfoNCE with a single positive pair and no negatives is 0") {
    MatrixD x(2, 3);
    x << 1, 2, 3, -1, 0.5, 2;
    CHECK(std::abs(info_nce_loss<double>(x, {4, 4}, 0.1).value) < 1e-15);
  }

  TEST_CASE("InfoNCE on (A, A, B, B) orthonormal tokens") {
    MatrixD x = MatrixD::Zero(4, 4);
    x(0, 0) = x(1, 0) = 1;
    x(2, 1) = x(3, 1) = 1;
    const double loss = info_nce_loss<double>(x, {0, 0, 1, 1}, 0.1).value;
    CHECK(loss == doctest::Approx(std::log1p(2 * std::exp(-10.0))).epsilon(1e-12));
    CHECK(loss == doctest::Approx(9.08e-5).epsilon(1e-3));
  }

  TEST_CASE("InfoNCE matches a brute-force double loop on 200 random cases") {
    std::mt19937 rng(17);
    for (int c = 0; c < 200; ++c) {
      const int n = 2 + static_cast<int>(rng() % 12);
      const MatrixD x = random_tokens(n, 5, rng);
      std::vector<RegionId> ids;
      for (int i = 0; i < n; ++i) ids.push_back(static_cast<RegionId>(rng() % 4) - (rng() % 7 == 0 ? 5 : 0));
      for (auto& id : ids)
        if (id < 0) id = kNoRegion;
      ids[1] = ids[0] = 2;  // at least one anchor
      const double tau = 0.05 + 0.5 * (rng() % 100) / 100.0;
      CHECK(info_nce_loss<double>(x, ids, tau).value == doctest::Approx(brute_info_nce(x, ids, tau)).epsilon(1e-10));
    }
  }

  TEST_CASE("InfoNCE is invariant to row scaling and to joint permutation") {
    std::mt19937 rng(5);
    const MatrixD x = random_tokens(8, 6, rng);
    const std::vector<RegionId> ids{0, 1, 0, 2, 1, 3, 2, 0};
    const double base = info_nce_loss<double>(x, ids, 0.1).value;
    MatrixD scaled = x;
    for (int i = 0; i < 8; ++i) scaled.row(i) *= 0.1 + i;
    CHECK(info_nce_loss<double>(scaled, ids, 0.1).value == doctest::Approx(base).epsilon(1e-12));
    const std::vector<int> perm{3, 7, 0, 5, 1, 6, 2, 4};
    MatrixD px(8, 6);
    std::vector<RegionId> pids;
    for (int i = 0; i < 8; ++i) {
      px.row(i) = x.row(perm[i]);
      pids.push_back(ids[perm[i]]);
    }
    CHECK(info_nce_loss<double>(px, pids, 0.1).value == doctest::Approx(base).epsilon(1e-12));
  }

  TEST_CASE("InfoNCE gradient matches central differences") {
    std::mt19937 rng(8);
    const MatrixD x = random_tokens(6, 4, rng);
    const std::vector<RegionId> ids{0, 0, 1, 1, kNoRegion, 2};
    const auto lg = info_nce_loss<double>(x, ids, 0.2);
    for (Eigen::Index k = 0; k < x.size(); ++k) {
      MatrixD plus = x, minus = x;
      plus.data()[k] += 1e-6;
      minus.data()[k] -= 1e-6;
      const double fd = (info_nce_loss<double>(plus, ids, 0.2).value - info_nce_loss<double>(minus, ids, 0.2).value) / 2e-6;
      CHECK(lg.grad.data()[k] == doctest::Approx(fd).epsilon(1e-5).scale(1e-8));
    }
  }

  TEST_CASE("InfoNCE error cases") {
    std::mt19937 rng(1);
    const MatrixD x = random_tokens(3, 4, rng);
    CHECK_THROWS_AS(info_nce_loss<double>(x, {0, 1, 2}, 0.1), DegenerateBatchError);
    CHECK_THROWS_AS(info_nce_loss<double>(x, {kNoRegion, kNoRegion, 1}, 0.1), DegenerateBatchError);
    MatrixD z = x;
    z.row(1).setZero();
    CHECK_THROWS_AS(info_nce_loss<double>(z, {0, 0, 1}, 0.1), NumericsError);
  }

  TEST_CASE("feature similarity: identical 0, opposite 2, orthogonal 1") {
    MatrixD t(1, 3), a(1, 3);
    t << 1, 2, 2;
    CHECK(feature_similarity_loss<double>(t * 3.0, t).value == doctest::Approx(0.0).scale(1e-12));
    CHECK(feature_similarity_loss<double>(-t, t).value == doctest::Approx(2.0));
    a << 2, -1, 0;
    CHECK(feature_similarity_loss<double>(a, t).value == doctest::Approx(1.0));
    CHECK_THROWS_AS(feature_similarity_loss<double>(MatrixD::Zero(1, 3), t), NumericsError);
  }

  TEST_CASE("target tokens average the patches whose centers lie in the mask") {
    const auto map = two_by_two();
    const std::vector<RegionMask> masks{rect_mask(16, 16, 0, 0, 16, 16), rect_mask(16, 16, 0, 0, 8, 8),
                                        rect_mask(16, 16, 0, 0, 8, 16), rect_mask(16, 16, 0, 0, 3, 3)};
    const MatrixF t = target_tokens(map, masks, {1, 2, 0});
    CHECK(t(0, 0) == 1.0f);
    CHECK(t(0, 1) == 0.0f);
    CHECK(t(1, 0) == 2.0f);  // rows 0 and 2
    CHECK(t(1, 1) == 0.5f);
    CHECK(t(2, 0) == 2.5f);
    CHECK_THROWS_AS(target_tokens(map, masks, {3}), EmptyMaskError);
    CHECK_THROWS_AS(target_tokens(map, masks, {4}), ValidationError);
    CHECK_THROWS_AS(target_tokens(map, masks, {kNoRegion}), ValidationError);
  }

  TEST_CASE("attention supervision closed form on a uniform row with half the patches targeted") {
    for (int m : {2, 8, 64}) {
      MatrixD a = MatrixD::Constant(1, m, 1.0 / m);
      MatrixD t = MatrixD::Zero(1, m);
      for (int j = 0; j < m / 2; ++j) t(0, j) = 1;
      const double eps = kAttnProbEps;
      const double bce = 0.5 * (-std::log(1 - eps) - std::log(eps));
      const double dice = 1.0 - (m + 1.0) / (1.5 * m + 1.0);
      CHECK(attention_supervision_loss<double>(a, t).value == doctest::Approx(bce + dice).epsilon(1e-9));
    }
  }

  TEST_CASE("attention supervision gradient matches central differences") {
    std::mt19937 rng(3);
    std::uniform_real_distribution<double> u(0.05, 1.0);
    MatrixD a(3, 5), t = MatrixD::Zero(3, 5);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = u(rng);
    t(0, 1) = t(1, 0) = t(1, 4) = t(2, 2) = t(2, 3) = 1;
    const auto lg = attention_supervision_loss<double>(a, t);
    for (Eigen::Index k = 0; k < a.size(); ++k) {
      MatrixD plus = a, minus = a;
      plus.data()[k] += 1e-7;
      minus.data()[k] -= 1e-7;
      const double fd = (attention_supervision_loss<double>(plus, t).value - attention_supervision_loss<double>(minus, t).value) / 2e-7;
      CHECK(lg.grad.data()[k] == doctest::Approx(fd).epsilon(1e-5).scale(1e-7));
    }
    CHECK_THROWS_AS(attention_supervision_loss<double>(a, MatrixD::Zero(3, 5)), EmptyMaskError);
  }

  TEST_CASE("total loss combines the weighted parts; attention only when its weight is positive") {
    const LossParts parts{1.0, 2.0, 3.0};
    CHECK(total_loss(parts, LossWeights{1, 1, 0, 0.1}) == 3.0);
    CHECK(total_loss(parts, LossWeights{1, 1, 0.5, 0.1}) == 4.5);
    CHECK(total_loss(parts, LossWeights{0.5, 0, 0, 0.1}) == 0.5);
    CHECK_THROWS_AS((LossWeights{1, 1, 0, 0}.validate()), ConfigError);
    CHECK_THROWS_AS((LossWeights{-1, 1, 0, 0.1}.validate()), ConfigError);
  }

  TEST_CASE("analytic gradients match central differences per tensor at eps 1e-3") {
    const auto prob = make_gradcheck_problem(1, gradcheck_config(), 4, 2, false);
    const auto report = gradcheck(prob.first, prob.second, prob.params, prob.config, LossWeights{1, 1, 0, 0.1});
    for (const auto& t : report.tensors) {
      INFO(t.name);
      CHECK(t.rel_error <= 1e-4);
    }
    CHECK(report.seconds < 60.0);
  }

  // At eps 1e-3 the O(eps^2) truncation term dominates gradient entries near
  // zero, so the elementwise comparison uses a smaller step.
  TEST_CASE("analytic gradients match central differences elementwise at eps 1e-5") {
    for (bool attn : {false, true}) {
      const auto prob = make_gradcheck_problem(2, gradcheck_config(), 4, 2, attn);
      const LossWeights w{1, 1, attn ? 0.5 : 0.0, 0.1};
      const auto report = gradcheck(prob.first, prob.second, prob.params, prob.config, w, 1e-5);
      INFO("attention term " << attn);
      CHECK(report.max_elem_rel_error <= 1e-4);
      CHECK(report.max_rel_error <= 1e-6);
    }
  }

  TEST_CASE("zero loss weights give zero gradients; no feature weight leaves align_proj untouched") {
    const auto prob = make_gradcheck_problem(23, gradcheck_config(), 4, 2, true);
    auto zero = evaluate_pair<double>(prob.first, prob.second, prob.params, prob.config, LossWeights{0, 0, 0, 0.1}, true);
    bool all_zero = true;
    zero.grads.for_each([&](const std::string&, const MatrixD& g, bool) { all_zero &= g.isZero(0); });
    CHECK(all_zero);
    CHECK(zero.total == 0.0);

    auto cont = evaluate_pair<double>(prob.first, prob.second, prob.params, prob.config, LossWeights{1, 0, 0, 0.1}, true);
    CHECK(cont.grads.align_proj.isZero(0));
    CHECK_FALSE(cont.grads.key_proj.isZero(0));
    check_gradients_finite(cont.grads);
  }
}
