#include <doctest.h>

#include <cmath>
#include <set>

#include "ren/errors.hpp"
#include "ren/trainer.hpp"

using namespace ren;

namespace {

RenConfig small_model() {
  RenConfig c;
  c.d_model = 16;
  c.n_heads = 4;
  c.encoder_dim = 16;
  c.n_blocks = 2;
  return c;
}

DataConfig small_data() {
  DataConfig d;
  d.n_scenes = 4;
  d.dim = 16;
  d.canvas = 48;
  d.render.h_patches = d.render.w_patches = 6;
  d.prompts_per_view = 12;
  return d;
}

TrainConfig small_train(std::uint32_t steps) {
  TrainConfig t;
  t.batch_scenes = 2;
  t.optim.total_steps = steps;
  t.optim.warmup_steps = 1;
  return t;
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("learning rate: linear warmup, peak at warmup end, cosine to zero") {
    AdamWConfig c;
    CHECK(learning_rate(100, c) == 1e-3);
    CHECK(learning_rate(50, c) == doctest::Approx(5e-4).epsilon(1e-12));
    CHECK(learning_rate(1, c) == doctest::Approx(1e-5).epsilon(1e-12));
    CHECK(learning_rate(1050, c) == doctest::Approx(5e-4).epsilon(1e-9));
    CHECK(learning_rate(2000, c) == 0.0);
    CHECK(learning_rate(2500, c) == 0.0);
    for (std::uint32_t s = 101; s <= 2000; ++s) CHECK(learning_rate(s, c) <= learning_rate(s - 1, c));
    c.warmup_steps = 2000;
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }

  TEST_CASE("first AdamW step moves every weight by lr * sign(g) plus decay") {
    const auto model = small_model();
    const auto p0 = init_params(1, model);
    auto grads = p0.zeros_like();
    std::mt19937 rng(2);
    std::normal_distribution<float> g(0.0f, 1.0f);
    grads.for_each([&](const std::string&, MatrixF& m, bool) {
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
    });
    AdamWConfig c;
    c.warmup_steps = 1;
    AdamW opt(p0, c);
    auto p1 = p0;
    const double lr = opt.step(p1, grads, 1);
    CHECK(lr == 1e-3);
    std::vector<std::tuple<std::string, MatrixF, bool>> before;
    p0.for_each([&](const std::string& n, const MatrixF& m, bool decay) { before.emplace_back(n, m, decay); });
    std::size_t k = 0;
    const auto& gr = grads;
    std::vector<MatrixF> gs;
    gr.for_each([&](const std::string&, const MatrixF& m, bool) { gs.push_back(m); });
    p1.for_each([&](const std::string& name, const MatrixF& m, bool) {
      const auto& [n0, m0, decay] = before[k];
      const MatrixF& gm = gs[k++];
      INFO(name);
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        const double gi = gm.data()[i];
        const double expected = m0.data()[i] - lr * (gi / (std::abs(gi) + 1e-8) + (decay ? 0.01 * m0.data()[i] : 0.0));
        CHECK(std::abs(m.data()[i] - expected) <= 1e-7 + 1e-6 * std::abs(expected));
      }
    });
  }

  TEST_CASE("zero gradients change weights through decay only") {
    const auto model = small_model();
    const auto p0 = init_params(3, model);
    AdamWConfig c;
    c.warmup_steps = 1;
    AdamW opt(p0, c);
    auto p1 = p0;
    opt.step(p1, p0.zeros_like(), 1);
    std::vector<MatrixF> before;
    p0.for_each([&](const std::string&, const MatrixF& m, bool) { before.push_back(m); });
    std::size_t k = 0;
    p1.for_each([&](const std::string& name, const MatrixF& m, bool decay) {
      INFO(name);
      const MatrixF& m0 = before[k++];
      if (!decay) {
        CHECK(m == m0);
        return;
      }
      for (Eigen::Index i = 0; i < m.size(); ++i)
        CHECK(m.data()[i] == doctest::Approx(m0.data()[i] * (1.0 - 1e-3 * 0.01)).epsilon(1e-7));
    });
  }

  TEST_CASE("global norm clipping") {
    auto grads = init_params(4, small_model()).zeros_like();
    grads.prompt_proj(0, 0) = 6.0f;
    grads.align_proj(1, 2) = 8.0f;
    CHECK(global_norm(grads) == doctest::Approx(10.0));
    CHECK(clip_global_norm(grads, 5.0) == doctest::Approx(10.0));
    CHECK(global_norm(grads) == doctest::Approx(5.0).epsilon(1e-6));
    CHECK(grads.prompt_proj(0, 0) == doctest::Approx(3.0f));
    CHECK(clip_global_norm(grads, 50.0) == doctest::Approx(5.0).epsilon(1e-6));
    CHECK(grads.align_proj(1, 2) == doctest::Approx(4.0f));
    grads.key_proj(0, 0) = std::nanf("");
    CHECK_THROWS_AS(clip_global_norm(grads, 5.0), NumericsError);
  }

  TEST_CASE("identity augmentation renders both views identically") {
    const auto data = small_data();
    const auto scene = dataset_scene(data, dataset_classes(data), Split::kTrain, 0);
    const auto pair = augment_scene(scene, 7, AugmentConfig::identity(), data.render, 12);
    CHECK(pair.first.render.features.data == pair.second.render.features.data);
    CHECK(pair.first.render.rgb == pair.second.render.rgb);
    CHECK(pair.first.render.masks == pair.second.render.masks);
  }

  TEST_CASE("horizontal flip mirrors the view: (x, y) -> (1 - x, y)") {
    const auto data = small_data();
    const auto scene = dataset_scene(data, dataset_classes(data), Split::kTrain, 1);
    ViewSpec flipped;
    flipped.flip = true;
    const auto a = ownership(scene);
    const auto b = ownership(scene, flipped);
    const int w = scene.canvas_w;
    for (int y = 0; y < scene.canvas_h; ++y)
      for (int x = 0; x < w; ++x) CHECK(b[std::size_t(y) * w + x] == a[std::size_t(y) * w + (w - 1 - x)]);
  }

  TEST_CASE("every prompted region of one view is visible in the other (100 pairs)") {
    const auto data = small_data();
    const auto classes = dataset_classes(data);
    for (int i = 0; i < 100; ++i) {
      const auto scene = dataset_scene(data, classes, Split::kTrain, i % data.n_scenes);
      const auto pair = augment_scene(scene, 1000 + std::uint64_t(i), data.augment, data.render, 24);
      for (const TrainingView* v : {&pair.first, &pair.second}) {
        const TrainingView* other = v == &pair.first ? &pair.second : &pair.first;
        for (auto id : v->ids) CHECK(other->render.masks[static_cast<std::size_t>(id)].area() > 0);
      }
    }
  }

  TEST_CASE("view inputs cap the prompt count") {
    const auto data = small_data();
    const auto scene = dataset_scene(data, dataset_classes(data), Split::kTrain, 2);
    const auto pair = augment_scene(scene, 3, data.augment, data.render, 12);
    const auto in = view_inputs(pair.first, 5, true);
    CHECK(in.prompts.size() == std::min<std::size_t>(5, pair.first.prompts.size()));
    CHECK(in.targets.rows() == static_cast<Eigen::Index>(in.prompts.size()));
    CHECK(in.attention_targets.cols() == 36);
    CHECK(in.h_patches * in.w_patches == 36);
  }

  TEST_CASE("training is deterministic for a fixed seed and reduces nothing to NaN") {
    const auto a = train(small_train(3), small_data(), small_model());
    const auto b = train(small_train(3), small_data(), small_model());
    REQUIRE(a.metrics.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(a.metrics[i].l_cont == b.metrics[i].l_cont);
      CHECK(a.metrics[i].l_feat == b.metrics[i].l_feat);
      CHECK(a.metrics[i].grad_norm == b.metrics[i].grad_norm);
      CHECK(std::isfinite(a.metrics[i].l_cont));
    }
    CHECK(a.params.prompt_proj == b.params.prompt_proj);
    CHECK(a.params.blocks[1].ffn_out == b.params.blocks[1].ffn_out);
    auto other = small_train(3);
    other.seed = 1;
    CHECK(train(other, small_data(), small_model()).metrics[0].l_cont != a.metrics[0].l_cont);
  }

  TEST_CASE("config JSON round trip and unknown keys") {
    auto d = small_data();
    d.augment.color_jitter = 0.1;
    const auto t = small_train(17);
    const auto m = small_model();
    CHECK(to_json(data_config_from_json(to_json(d))) == to_json(d));
    CHECK(to_json(train_config_from_json(to_json(t))) == to_json(t));
    CHECK(ren_config_from_json(to_json(m)) == m);
    CHECK(data_config_from_json(nlohmann::json::object()).n_scenes == 64);
    CHECK_THROWS_AS(data_config_from_json({{"n_scene", 3}}), ConfigError);
    CHECK_THROWS_AS(train_config_from_json({{"optim", {{"learning_rate", 1}}}}), ConfigError);
  }
}
