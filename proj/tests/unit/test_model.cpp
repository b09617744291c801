#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "ren/checkpoint.hpp"
#include "ren/model.hpp"

using namespace ren;

namespace {

RenConfig tiny_config(std::uint32_t d = 8, std::uint32_t heads = 2, std::uint32_t dim = 8) {
  RenConfig c;
  c.d_model = d;
  c.n_heads = heads;
  c.encoder_dim = dim;
  c.n_blocks = 4;
  c.ffn_mult = 4;
  return c;
}

template <class T>
void randomize(RenParams<T>& p, std::uint32_t seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  p.for_each([&](const std::string&, Matrix<T>& m, bool) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += T(u(rng));
  });
}

PatchFeatureMap random_map(std::uint32_t h, std::uint32_t w, std::uint32_t dim, std::uint32_t seed, float scale = 1.0f) {
  PatchFeatureMap m;
  m.h_patches = h;
  m.w_patches = w;
  m.dim = dim;
  m.image_h = h * 8;
  m.image_w = w * 8;
  m.patch_size = 8;
  m.data.resize(h * w, dim);
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(-scale, scale);
  for (Eigen::Index i = 0; i < m.data.size(); ++i) m.data.data()[i] = u(rng);
  return m;
}

std::vector<PointPrompt> random_prompts(int n, std::uint32_t seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 0.999f);
  std::vector<PointPrompt> out;
  for (int i = 0; i < n; ++i) out.push_back({u(rng), u(rng)});
  return out;
}

// Straightforward per-element evaluation of the block, written without
// Eigen products.
MatrixD naive_block(const MatrixD& q, const MatrixD& k, const MatrixD& v, const BlockParams<double>& p, int heads) {
  const int n = int(q.rows()), m = int(k.rows()), d = int(q.cols()), dh = d / heads, f = int(p.ffn_in.rows());
  auto ln = [&](const MatrixD& x, const MatrixD& g, const MatrixD& b) {
    MatrixD y(x.rows(), x.cols());
    for (int i = 0; i < x.rows(); ++i) {
      double mean = 0, var = 0;
      for (int c = 0; c < d; ++c) mean += x(i, c) / d;
      for (int c = 0; c < d; ++c) var += (x(i, c) - mean) * (x(i, c) - mean) / d;
      for (int c = 0; c < d; ++c) y(i, c) = (x(i, c) - mean) / std::sqrt(var + 1e-5) * g(0, c) + b(0, c);
    }
    return y;
  };
  auto linear = [](const MatrixD& x, const MatrixD& w) {
    MatrixD y = MatrixD::Zero(x.rows(), w.rows());
    for (int i = 0; i < x.rows(); ++i)
      for (int o = 0; o < w.rows(); ++o)
        for (int c = 0; c < w.cols(); ++c) y(i, o) += x(i, c) * w(o, c);
    return y;
  };
  const MatrixD a = ln(q, p.ln_attn_gain, p.ln_attn_bias);
  const MatrixD qq = linear(a, p.query_proj);
  MatrixD ctx = MatrixD::Zero(n, d);
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < n; ++i) {
      std::vector<double> s(m);
      double mx = -1e300, sum = 0;
      for (int j = 0; j < m; ++j) {
        s[j] = 0;
        for (int c = 0; c < dh; ++c) s[j] += qq(i, h * dh + c) * k(j, h * dh + c);
        s[j] /= std::sqrt(double(dh));
        mx = std::max(mx, s[j]);
      }
      for (int j = 0; j < m; ++j) sum += (s[j] = std::exp(s[j] - mx));
      for (int j = 0; j < m; ++j)
        for (int c = 0; c < dh; ++c) ctx(i, h * dh + c) += s[j] / sum * v(j, h * dh + c);
    }
  const MatrixD mid = q + linear(ctx, p.out_proj);
  MatrixD hid = linear(ln(mid, p.ln_ffn_gain, p.ln_ffn_bias), p.ffn_in);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < f; ++c) hid(i, c) = 0.5 * hid(i, c) * (1 + std::erf(hid(i, c) / std::sqrt(2.0)));
  return mid + linear(hid, p.ffn_out);
}

}  // namespace

TEST_SUITE("ren-core") {
  TEST_CASE("sinusoidal embedding at the origin: sin entries 0, cos entries 1") {
    const auto e = sinusoidal_embed({0.0f, 0.0f}, 8);
    for (int i = 0; i < 8; ++i) CHECK(e[i] == (i % 2 == 0 ? 0.0 : 1.0));
  }

  TEST_CASE("sinusoidal embedding has squared norm d/2") {
    for (const auto& p : random_prompts(20, 4)) CHECK(sinusoidal_embed(p, 64).squaredNorm() == doctest::Approx(32.0).epsilon(1e-12));
  }

  TEST_CASE("sinusoidal embedding of (0.5, 0.25) at d=8 matches direct evaluation") {
    const auto e = sinusoidal_embed({0.5f, 0.25f}, 8);
    const double pi = std::numbers::pi;
    const double w1 = std::pow(10000.0, -0.5);  // k = 1: 10000^(-4/8)
    const double expected[8] = {std::sin(pi),      std::cos(pi),      std::sin(w1 * pi),      std::cos(w1 * pi),
                                std::sin(pi / 2),  std::cos(pi / 2),  std::sin(w1 * pi / 2),  std::cos(w1 * pi / 2)};
    for (int i = 0; i < 8; ++i) CHECK(e[i] == doctest::Approx(expected[i]).epsilon(1e-12));
    CHECK_THROWS_AS(sinusoidal_embed({0.1f, 0.1f}, 6), ConfigError);
  }

  TEST_CASE("config validation") {
    RenConfig c = tiny_config();
    c.n_heads = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_config();
    c.n_blocks = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }

  TEST_CASE("block with zero output projections is the identity on its input") {
    const auto c = tiny_config();
    const auto params = init_params(3, c);
    const MatrixF q = MatrixF::Random(5, 8);
    const MatrixF kv = MatrixF::Constant(7, 8, 0.3f);
    const MatrixF out = cross_attention_block<float>(q, kv, kv, params.blocks[0], c);
    CHECK(out == q);
  }

  TEST_CASE("single key gets attention weight exactly 1 in every head") {
    const auto c = tiny_config();
    auto params = init_params(3, c);
    randomize(params, 5);
    std::vector<MatrixF> probs;
    cross_attention_block<float>(MatrixF::Random(4, 8), MatrixF::Random(1, 8), MatrixF::Random(1, 8), params.blocks[1], c, &probs);
    REQUIRE(probs.size() == 2);
    for (const auto& p : probs)
      for (Eigen::Index i = 0; i < p.size(); ++i) CHECK(p.data()[i] == 1.0f);
  }

  TEST_CASE("block matches a naive dense re-implementation (n=2, m=3, d=8)") {
    const auto c = tiny_config();
    auto params = init_params(9, c).cast<double>();
    randomize(params, 10);
    std::mt19937 rng(11);
    std::normal_distribution<double> g;
    MatrixD q(2, 8), k(3, 8), v(3, 8);
    for (MatrixD* m : {&q, &k, &v})
      for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = g(rng);
    const MatrixD fast = cross_attention_block<double>(q, k, v, params.blocks[0], c);
    const MatrixD slow = naive_block(q, k, v, params.blocks[0], 2);
    CHECK((fast - slow).cwiseAbs().maxCoeff() < 1e-6);

    MatrixD bad = q;
    bad(0, 0) = std::nan("");
    CHECK_THROWS_AS(cross_attention_block<double>(bad, k, v, params.blocks[0], c), NumericsError);
  }

  TEST_CASE("attention rows sum to 1 in every head of every block") {
    auto c = tiny_config(32, 8, 16);
    auto params = init_params(2, c);
    randomize(params, 3);
    const auto map = random_map(6, 6, 16, 4);
    const auto tr = forward_trace<float>(map.data, patch_position_embeddings<float>(6, 6, c.d_model),
                                         embed_prompts<float>(random_prompts(10, 5), c.d_model), params, c);
    for (const auto& b : tr.blocks)
      for (const auto& p : b.probs) CHECK((p.rowwise().sum().array() - 1.0f).abs().maxCoeff() <= 1e-6f);
  }

  TEST_CASE("at init the region tokens are the projected prompt embeddings") {
    const auto c = tiny_config(16, 4, 8);
    const auto params = init_params(1, c);
    const auto map = random_map(4, 4, 8, 2);
    const auto prompts = random_prompts(6, 3);
    const auto tokens = forward(map, prompts, params, c);
    const auto tr = forward_trace<float>(map.data, patch_position_embeddings<float>(4, 4, 16), embed_prompts<float>(prompts, 16),
                                         params, c);
    CHECK(tokens.ren_tokens == tr.prompt_queries);
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      const auto e = sinusoidal_embed(prompts[i], 16);
      for (int o = 0; o < 16; ++o) {
        double acc = 0;
        for (int k = 0; k < 16; ++k) acc += double(float(e[k])) * double(params.prompt_proj(o, k));
        CHECK(std::abs(tokens.ren_tokens(static_cast<Eigen::Index>(i), o) - acc) < 1e-5);
      }
    }
  }

  TEST_CASE("forward is pure, permutation equivariant and duplicates give identical rows") {
    const auto c = tiny_config(32, 8, 16);
    auto params = init_params(7, c);
    randomize(params, 8);
    const auto map = random_map(5, 5, 16, 9);
    auto prompts = random_prompts(12, 10);
    prompts.push_back(prompts[3]);
    const auto a = forward(map, prompts, params, c);
    const auto b = forward(map, prompts, params, c);
    CHECK(a.ren_tokens == b.ren_tokens);
    CHECK(a.aligned_tokens == b.aligned_tokens);
    CHECK(a.ren_tokens.row(3) == a.ren_tokens.row(12));

    std::vector<int> perm(prompts.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), std::mt19937(1));
    std::vector<PointPrompt> permuted;
    for (int i : perm) permuted.push_back(prompts[static_cast<std::size_t>(i)]);
    const auto p = forward(map, permuted, params, c);
    for (std::size_t i = 0; i < perm.size(); ++i) {
      CHECK(p.ren_tokens.row(static_cast<Eigen::Index>(i)) == a.ren_tokens.row(perm[i]));
      CHECK(p.aligned_tokens.row(static_cast<Eigen::Index>(i)) == a.aligned_tokens.row(perm[i]));
    }
  }

  TEST_CASE("patch position embeddings are the embeddings of the cell centers") {
    const auto pe = patch_position_embeddings<double>(3, 4, 16);
    REQUIRE(pe.rows() == 12);
    for (std::uint32_t r = 0; r < 3; ++r)
      for (std::uint32_t col = 0; col < 4; ++col) {
        const PointPrompt center{static_cast<float>((col + 0.5) / 4), static_cast<float>((r + 0.5) / 3)};
        CHECK(pe.row(r * 4 + col) == sinusoidal_embed(center, 16));
      }
    CHECK_THROWS_AS(patch_position_embeddings<float>(0, 2, 8), ConfigError);
  }

  TEST_CASE("tokens depend on where a feature sits, not only on the feature set") {
    const auto c = tiny_config(32, 8, 16);
    auto params = init_params(3, c);
    randomize(params, 4);
    const auto map = random_map(4, 4, 16, 5);
    auto swapped = map;
    swapped.data.row(0).swap(swapped.data.row(15));
    const std::vector<PointPrompt> prompt{{0.1f, 0.1f}};
    const auto a = forward(map, prompt, params, c);
    const auto b = forward(swapped, prompt, params, c);
    CHECK((a.ren_tokens - b.ren_tokens).cwiseAbs().maxCoeff() > 1e-4f);
  }

  TEST_CASE("forward rejects empty prompts and mismatched dims") {
    const auto c = tiny_config();
    const auto params = init_params(1, c);
    CHECK_THROWS_AS(forward(random_map(2, 2, 8, 1), {}, params, c), ValidationError);
    CHECK_THROWS_AS(forward(random_map(2, 2, 6, 1), random_prompts(2, 1), params, c), ConfigError);
  }

  TEST_CASE("aligned tokens are exactly the align projection of the region tokens") {
    const auto c = tiny_config(16, 4, 12);
    auto params = init_params(4, c);
    randomize(params, 4);
    const auto t = forward(random_map(3, 3, 12, 1), random_prompts(9, 2), params, c);
    CHECK(t.aligned_tokens == align<float>(t.ren_tokens, params.align_proj));
  }

  TEST_CASE("align: zero, identity and naive triple loop") {
    const MatrixF ren = MatrixF::Random(3, 8);
    CHECK(align<float>(ren, MatrixF::Zero(6, 8)).isZero(0));
    CHECK(align<float>(ren, MatrixF::Identity(8, 8)) == ren);
    const MatrixF w = MatrixF::Random(6, 8);
    const MatrixF fast = align<float>(ren, w);
    for (int i = 0; i < 3; ++i)
      for (int o = 0; o < 6; ++o) {
        double acc = 0;
        for (int k = 0; k < 8; ++k) acc += double(ren(i, k)) * double(w(o, k));
        CHECK(std::abs(fast(i, o) - acc) < 1e-6);
      }
  }

  TEST_CASE("init_params: deterministic, zero output projections, LeCun scale") {
    RenConfig c;
    c.d_model = 128;
    c.encoder_dim = 128;
    const auto a = init_params(5, c);
    const auto b = init_params(5, c);
    bool same = true;
    a.for_each([&, i = 0](const std::string&, const MatrixF& m, bool) mutable {
      std::vector<const MatrixF*> others;
      b.for_each([&](const std::string&, const MatrixF& o, bool) { others.push_back(&o); });
      same &= (m == *others[static_cast<std::size_t>(i++)]);
    });
    CHECK(same);
    for (const auto& blk : a.blocks) {
      CHECK(blk.out_proj.isZero(0));
      CHECK(blk.ffn_out.isZero(0));
      CHECK(blk.ln_attn_gain.isOnes(0));
      CHECK(blk.ln_ffn_bias.isZero(0));
    }
    const auto& k = a.key_proj;
    REQUIRE(k.size() >= 10000);
    const double mean = k.cast<double>().mean();
    const double var = (k.cast<double>().array() - mean).square().sum() / double(k.size() - 1);
    CHECK(std::abs(std::sqrt(var) * std::sqrt(128.0) - 1.0) < 0.1);
  }

  TEST_CASE("no NaN or Inf for features bounded by 100") {
    const auto c = tiny_config(32, 8, 16);
    auto params = init_params(6, c);
    randomize(params, 6);
    const auto t = forward(random_map(6, 6, 16, 3, 100.0f), random_prompts(20, 7), params, c);
    CHECK(t.ren_tokens.allFinite());
    CHECK(t.aligned_tokens.allFinite());
  }

  TEST_CASE("checkpoint round trip and rejection of unknown tensors") {
    const auto c = tiny_config(16, 4, 8);
    auto params = init_params(3, c);
    randomize(params, 3);
    const auto bytes = encode_checkpoint(c, params);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "RENC");
    const auto back = decode_checkpoint(bytes);
    CHECK(back.config == c);
    CHECK(back.params.key_proj == params.key_proj);
    CHECK(back.params.blocks[3].ffn_out == params.blocks[3].ffn_out);

    auto renamed = bytes;
    const std::string needle = "prompt_proj";
    auto it = std::search(renamed.begin(), renamed.end(), needle.begin(), needle.end());
    REQUIRE(it != renamed.end());
    *it = 'q';
    CHECK_THROWS_AS(decode_checkpoint(renamed), FormatError);

    auto truncated = bytes;
    truncated.resize(truncated.size() - 1);
    CHECK_THROWS_AS(decode_checkpoint(truncated), FormatError);
  }
}
