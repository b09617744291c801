#include "ren/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ren/rng.hpp"

namespace ren {

namespace {

constexpr double kLayerNormEps = 1e-5;

// Row reductions below run as plain sequential loops: Eigen's vectorized
// reductions peel by pointer alignment, which differs between rows, and
// that would break bit-exact row equivariance.
template <class T>
void layer_norm(const Matrix<T>& x, const Matrix<T>& gain, const Matrix<T>& bias, Matrix<T>& hat, Matrix<T>& rstd,
                Matrix<T>& out) {
  const auto n = x.rows();
  const auto d = x.cols();
  hat.resize(n, d);
  rstd.resize(n, 1);
  out.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    T sum = 0;
    for (Eigen::Index c = 0; c < d; ++c) sum += x(i, c);
    const T mean = sum / T(d);
    T sq = 0;
    for (Eigen::Index c = 0; c < d; ++c) sq += (x(i, c) - mean) * (x(i, c) - mean);
    const T r = T(1) / std::sqrt(sq / T(d) + T(kLayerNormEps));
    rstd(i, 0) = r;
    for (Eigen::Index c = 0; c < d; ++c) {
      hat(i, c) = (x(i, c) - mean) * r;
      out(i, c) = hat(i, c) * gain(0, c) + bias(0, c);
    }
  }
}

template <class T>
void softmax_rows(Matrix<T>& s, Evaluation mode) {
  if (mode == Evaluation::kBatched) {
    const Matrix<T> mx = s.rowwise().maxCoeff();
    for (Eigen::Index r = 0; r < s.rows(); ++r) s.row(r).array() -= mx(r, 0);
    s = s.array().exp().matrix();
    const Matrix<T> sum = s.rowwise().sum();
    for (Eigen::Index r = 0; r < s.rows(); ++r) s.row(r) /= sum(r, 0);
    return;
  }
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    T mx = s(r, 0);
    for (Eigen::Index c = 1; c < s.cols(); ++c) mx = std::max(mx, s(r, c));
    T sum = 0;
    for (Eigen::Index c = 0; c < s.cols(); ++c) sum += (s(r, c) = std::exp(s(r, c) - mx));
    for (Eigen::Index c = 0; c < s.cols(); ++c) s(r, c) /= sum;
  }
}

template <class DA, class DB>
auto product(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DB>& b, Evaluation mode) {
  using T = typename DA::Scalar;
  if (mode == Evaluation::kBatched) return Matrix<T>(a * b);
  return rowwise_product(a, b);
}

template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

void fill_uniform(MatrixF& m, Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, std::uint64_t stream) {
  Rng rng = make_rng(seed, {stream});
  const double bound = std::sqrt(3.0 / static_cast<double>(cols));
  m.resize(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(uniform(rng, -bound, bound));
}

template <class T>
void expect_shape(const Matrix<T>& m, Eigen::Index rows, Eigen::Index cols, const char* name) {
  if (m.rows() != rows || m.cols() != cols)
    throw ConfigError(std::string(name) + " has shape " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) +
                      ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
}

}  // namespace

void RenConfig::validate() const {
  if (d_model < 1 || n_blocks < 1 || n_heads < 1 || encoder_dim < 1 || ffn_mult < 1)
    throw ConfigError("all RenConfig fields must be >= 1");
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if (d_model % 4 != 0) throw ConfigError("d_model must be divisible by 4 for the 2D sinusoidal embedding");
}

template <class T>
void RenParams<T>::check_shapes(const RenConfig& c) const {
  const Eigen::Index d = c.d_model, e = c.encoder_dim, f = c.ffn_dim();
  expect_shape(prompt_proj, d, d, "prompt_proj");
  expect_shape(key_proj, d, e, "key_proj");
  expect_shape(value_proj, d, e, "value_proj");
  expect_shape(align_proj, e, d, "align_proj");
  if (blocks.size() != c.n_blocks) throw ConfigError("block count differs from config");
  for (const auto& b : blocks) {
    expect_shape(b.query_proj, d, d, "query_proj");
    expect_shape(b.out_proj, d, d, "out_proj");
    expect_shape(b.ln_attn_gain, 1, d, "ln_attn.gain");
    expect_shape(b.ln_attn_bias, 1, d, "ln_attn.bias");
    expect_shape(b.ln_ffn_gain, 1, d, "ln_ffn.gain");
    expect_shape(b.ln_ffn_bias, 1, d, "ln_ffn.bias");
    expect_shape(b.ffn_in, f, d, "ffn_in");
    expect_shape(b.ffn_out, d, f, "ffn_out");
  }
}

RenParams<float> init_params(std::uint64_t seed, const RenConfig& c) {
  c.validate();
  const Eigen::Index d = c.d_model, e = c.encoder_dim, f = c.ffn_dim();
  RenParams<float> p;
  std::uint64_t stream = 0;
  fill_uniform(p.prompt_proj, d, d, seed, stream++);
  fill_uniform(p.key_proj, d, e, seed, stream++);
  fill_uniform(p.value_proj, d, e, seed, stream++);
  for (std::uint32_t b = 0; b < c.n_blocks; ++b) {
    BlockParams<float> blk;
    fill_uniform(blk.query_proj, d, d, seed, stream++);
    blk.out_proj = MatrixF::Zero(d, d);
    blk.ln_attn_gain = MatrixF::Ones(1, d);
    blk.ln_attn_bias = MatrixF::Zero(1, d);
    blk.ln_ffn_gain = MatrixF::Ones(1, d);
    blk.ln_ffn_bias = MatrixF::Zero(1, d);
    fill_uniform(blk.ffn_in, f, d, seed, stream++);
    blk.ffn_out = MatrixF::Zero(d, f);
    p.blocks.push_back(std::move(blk));
  }
  fill_uniform(p.align_proj, e, d, seed, stream++);
  return p;
}

RowVector<double> sinusoidal_embed(const PointPrompt& prompt, std::uint32_t d_model) {
  if (d_model == 0 || d_model % 4 != 0) throw ConfigError("sinusoidal embedding needs d_model divisible by 4");
  const std::uint32_t quarter = d_model / 4;
  const std::uint32_t half = d_model / 2;
  RowVector<double> out(d_model);
  const double coords[2] = {prompt.x, prompt.y};
  for (int axis = 0; axis < 2; ++axis) {
    const double angle = 2.0 * std::numbers::pi * coords[axis];
    for (std::uint32_t k = 0; k < quarter; ++k) {
      const double freq = std::pow(10000.0, -4.0 * k / d_model);
      out[axis * half + 2 * k] = std::sin(freq * angle);
      out[axis * half + 2 * k + 1] = std::cos(freq * angle);
    }
  }
  return out;
}

template <class T>
Matrix<T> embed_prompts(const std::vector<PointPrompt>& prompts, std::uint32_t d_model) {
  Matrix<T> out(static_cast<Eigen::Index>(prompts.size()), d_model);
  for (std::size_t i = 0; i < prompts.size(); ++i)
    out.row(static_cast<Eigen::Index>(i)) = sinusoidal_embed(prompts[i], d_model).template cast<T>();
  return out;
}

template <class T>
Matrix<T> patch_position_embeddings(std::uint32_t h_patches, std::uint32_t w_patches, std::uint32_t d_model) {
  if (h_patches < 1 || w_patches < 1) throw ConfigError("patch grid must be at least 1 x 1");
  std::vector<PointPrompt> centers;
  centers.reserve(std::size_t{h_patches} * w_patches);
  for (std::uint32_t r = 0; r < h_patches; ++r)
    for (std::uint32_t c = 0; c < w_patches; ++c)
      centers.push_back({static_cast<float>((c + 0.5) / w_patches), static_cast<float>((r + 0.5) / h_patches)});
  return embed_prompts<T>(centers, d_model);
}

template <class T>
Matrix<T> block_forward(const Matrix<T>& stream, const Matrix<T>* query_addend, const Matrix<T>& keys,
                        const Matrix<T>& values, const BlockParams<T>& p, const RenConfig& c, BlockTrace<T>* trace,
                        Evaluation mode) {
  const Eigen::Index n = stream.rows();
  const Eigen::Index d = c.d_model;
  const Eigen::Index dh = c.d_head();
  if (stream.cols() != d || keys.cols() != d || values.cols() != d || keys.rows() != values.rows() || keys.rows() < 1 || n < 1)
    throw ConfigError("cross-attention block input shapes are inconsistent");
  if (query_addend && (query_addend->rows() != n || query_addend->cols() != d))
    throw ConfigError("query addend shape differs from the stream");
  require_finite(stream, "block queries");
  require_finite(keys, "block keys");
  require_finite(values, "block values");

  BlockTrace<T> local;
  BlockTrace<T>& t = trace ? *trace : local;
  t.attn_in = query_addend ? Matrix<T>(stream + *query_addend) : stream;
  layer_norm(t.attn_in, p.ln_attn_gain, p.ln_attn_bias, t.ln_attn_hat, t.ln_attn_rstd, t.ln_attn_out);
  t.queries = product(t.ln_attn_out, p.query_proj.transpose(), mode);

  const T scale = T(1) / std::sqrt(T(dh));
  t.context.resize(n, d);
  t.probs.clear();
  for (std::uint32_t h = 0; h < c.n_heads; ++h) {
    const Eigen::Index off = h * dh;
    Matrix<T> s = product(t.queries.middleCols(off, dh) * scale, keys.middleCols(off, dh).transpose(), mode);
    softmax_rows(s, mode);
    t.context.middleCols(off, dh) = product(s, values.middleCols(off, dh), mode);
    if (trace) t.probs.push_back(std::move(s));
  }
  t.mid = stream + product(t.context, p.out_proj.transpose(), mode);
  layer_norm(t.mid, p.ln_ffn_gain, p.ln_ffn_bias, t.ln_ffn_hat, t.ln_ffn_rstd, t.ln_ffn_out);
  t.hidden_pre = product(t.ln_ffn_out, p.ffn_in.transpose(), mode);
  t.hidden = t.hidden_pre.unaryExpr([](T v) { return gelu(v); });
  Matrix<T> out = t.mid + product(t.hidden, p.ffn_out.transpose(), mode);
  if (trace) {
    t.stream_in = stream;
    t.out = out;
  }
  return out;
}

template <class T>
Matrix<T> cross_attention_block(const Matrix<T>& queries, const Matrix<T>& keys, const Matrix<T>& values,
                                const BlockParams<T>& params, const RenConfig& config,
                                std::vector<Matrix<T>>* head_probs) {
  if (!head_probs) return block_forward<T>(queries, nullptr, keys, values, params, config, nullptr);
  BlockTrace<T> trace;
  Matrix<T> out = block_forward<T>(queries, nullptr, keys, values, params, config, &trace);
  *head_probs = std::move(trace.probs);
  return out;
}

template <class T>
Matrix<T> align(const Matrix<T>& ren_tokens, const Matrix<T>& align_proj) {
  if (ren_tokens.cols() != align_proj.cols()) throw ConfigError("align: token width differs from projection input");
  return rowwise_product(ren_tokens, align_proj.transpose());
}

template <class T>
ForwardTrace<T> forward_trace(const Matrix<T>& features, const Matrix<T>& key_positions, const Matrix<T>& embeddings,
                              const RenParams<T>& params, const RenConfig& config, Evaluation mode) {
  config.validate();
  params.check_shapes(config);
  if (features.cols() != config.encoder_dim) throw ConfigError("feature dim differs from encoder_dim");
  if (embeddings.rows() < 1) throw ValidationError("forward needs at least one prompt");
  require_finite(features, "features");
  if (key_positions.rows() != features.rows() || key_positions.cols() != config.d_model)
    throw ConfigError("key positions must be m x d_model");
  ForwardTrace<T> tr;
  tr.features = features;
  tr.embeddings = embeddings;
  tr.keys = features * params.key_proj.transpose() + key_positions;
  tr.values = features * params.value_proj.transpose();
  tr.prompt_queries = product(embeddings, params.prompt_proj.transpose(), mode);
  tr.blocks.resize(config.n_blocks);
  Matrix<T> stream = tr.prompt_queries;
  for (std::uint32_t b = 0; b < config.n_blocks; ++b) {
    const Matrix<T>* addend = b == 0 ? nullptr : &tr.prompt_queries;
    stream = block_forward<T>(stream, addend, tr.keys, tr.values, params.blocks[b], config, &tr.blocks[b], mode);
  }
  tr.ren = std::move(stream);
  tr.aligned = align<T>(tr.ren, params.align_proj);
  return tr;
}

template <class T>
Matrix<T> final_attention(const ForwardTrace<T>& trace) {
  const auto& probs = trace.blocks.back().probs;
  Matrix<T> avg = Matrix<T>::Zero(probs.front().rows(), probs.front().cols());
  for (const auto& p : probs) avg += p;
  return avg / T(probs.size());
}

TokenSet forward(const PatchFeatureMap& map, const std::vector<PointPrompt>& prompts, const RenParams<float>& params,
                 const RenConfig& config) {
  config.validate();
  params.check_shapes(config);
  if (prompts.empty()) throw ValidationError("forward needs at least one prompt");
  if (map.dim != config.encoder_dim)
    throw ConfigError("feature map dim " + std::to_string(map.dim) + " differs from encoder_dim " +
                      std::to_string(config.encoder_dim));
  map.validate();
  for (std::size_t i = 0; i < prompts.size(); ++i)
    if (!prompts[i].valid()) throw ValidationError("prompt " + std::to_string(i) + " outside [0,1)^2");

  const MatrixF keys = map.data * params.key_proj.transpose() +
                       patch_position_embeddings<float>(map.h_patches, map.w_patches, config.d_model);
  const MatrixF values = map.data * params.value_proj.transpose();
  const MatrixF prompt_queries = rowwise_product(embed_prompts<float>(prompts, config.d_model), params.prompt_proj.transpose());
  MatrixF stream = prompt_queries;
  for (std::uint32_t b = 0; b < config.n_blocks; ++b)
    stream = block_forward<float>(stream, b == 0 ? nullptr : &prompt_queries, keys, values, params.blocks[b], config);

  TokenSet out;
  out.prompts = prompts;
  out.aligned_tokens = align<float>(stream, params.align_proj);
  out.ren_tokens = std::move(stream);
  return out;
}

#define REN_INSTANTIATE(T)                                                                                       \
  template struct RenParams<T>;                                                                                  \
  template Matrix<T> embed_prompts<T>(const std::vector<PointPrompt>&, std::uint32_t);                           \
  template Matrix<T> block_forward<T>(const Matrix<T>&, const Matrix<T>*, const Matrix<T>&, const Matrix<T>&,    \
                                      const BlockParams<T>&, const RenConfig&, BlockTrace<T>*, Evaluation);                \
  template Matrix<T> cross_attention_block<T>(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&,              \
                                              const BlockParams<T>&, const RenConfig&, std::vector<Matrix<T>>*); \
  template Matrix<T> align<T>(const Matrix<T>&, const Matrix<T>&);                                               \
  template Matrix<T> patch_position_embeddings<T>(std::uint32_t, std::uint32_t, std::uint32_t);                 \
  template ForwardTrace<T> forward_trace<T>(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&,                \
                                            const RenParams<T>&, const RenConfig&, Evaluation);                    \
  template Matrix<T> final_attention<T>(const ForwardTrace<T>&);

REN_INSTANTIATE(float)
REN_INSTANTIATE(double)

#undef REN_INSTANTIATE

}  // namespace ren
