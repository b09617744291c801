#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ren/linalg.hpp"
#include "ren/types.hpp"

namespace ren {

struct RenConfig {
  std::uint32_t d_model = 32;
  std::uint32_t n_blocks = 4;
  std::uint32_t n_heads = 8;
  std::uint32_t encoder_dim = 32;
  std::uint32_t ffn_mult = 4;

  std::uint32_t d_head() const { return d_model / n_heads; }
  std::uint32_t ffn_dim() const { return ffn_mult * d_model; }
  /// Throws ConfigError.
  void validate() const;
  bool operator==(const RenConfig&) const = default;
};

template <class T>
struct BlockParams {
  Matrix<T> query_proj;    // d_model x d_model
  Matrix<T> out_proj;      // d_model x d_model
  Matrix<T> ln_attn_gain;  // 1 x d_model
  Matrix<T> ln_attn_bias;
  Matrix<T> ln_ffn_gain;
  Matrix<T> ln_ffn_bias;
  Matrix<T> ffn_in;   // ffn_dim x d_model
  Matrix<T> ffn_out;  // d_model x ffn_dim
};

/// Every learnable tensor of the region encoder. Keys and values use one
/// projection shared by all blocks.
template <class T>
struct RenParams {
  Matrix<T> prompt_proj;  // d_model x d_model
  Matrix<T> key_proj;     // d_model x encoder_dim
  Matrix<T> value_proj;   // d_model x encoder_dim
  Matrix<T> align_proj;   // encoder_dim x d_model
  std::vector<BlockParams<T>> blocks;

  // f(name, tensor, decays): visits tensors in a fixed order.
  template <class F>
  void for_each(F&& f) {
    f(std::string("prompt_proj"), prompt_proj, true);
    f(std::string("key_proj"), key_proj, true);
    f(std::string("value_proj"), value_proj, true);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      auto& blk = blocks[b];
      const std::string p = "blocks." + std::to_string(b) + ".";
      f(p + "query_proj", blk.query_proj, true);
      f(p + "out_proj", blk.out_proj, true);
      f(p + "ln_attn.gain", blk.ln_attn_gain, false);
      f(p + "ln_attn.bias", blk.ln_attn_bias, false);
      f(p + "ln_ffn.gain", blk.ln_ffn_gain, false);
      f(p + "ln_ffn.bias", blk.ln_ffn_bias, false);
      f(p + "ffn_in", blk.ffn_in, true);
      f(p + "ffn_out", blk.ffn_out, true);
    }
    f(std::string("align_proj"), align_proj, true);
  }
  template <class F>
  void for_each(F&& f) const {
    const_cast<RenParams*>(this)->for_each([&](const std::string& name, Matrix<T>& m, bool decay) {
      f(name, static_cast<const Matrix<T>&>(m), decay);
    });
  }

  /// Same shapes, all zeros.
  RenParams zeros_like() const {
    RenParams out = *this;
    out.for_each([](const std::string&, Matrix<T>& m, bool) { m.setZero(); });
    return out;
  }

  template <class U>
  RenParams<U> cast() const {
    RenParams<U> out;
    out.prompt_proj = prompt_proj.template cast<U>();
    out.key_proj = key_proj.template cast<U>();
    out.value_proj = value_proj.template cast<U>();
    out.align_proj = align_proj.template cast<U>();
    for (const auto& b : blocks) {
      BlockParams<U> o;
      o.query_proj = b.query_proj.template cast<U>();
      o.out_proj = b.out_proj.template cast<U>();
      o.ln_attn_gain = b.ln_attn_gain.template cast<U>();
      o.ln_attn_bias = b.ln_attn_bias.template cast<U>();
      o.ln_ffn_gain = b.ln_ffn_gain.template cast<U>();
      o.ln_ffn_bias = b.ln_ffn_bias.template cast<U>();
      o.ffn_in = b.ffn_in.template cast<U>();
      o.ffn_out = b.ffn_out.template cast<U>();
      out.blocks.push_back(std::move(o));
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Matrix<T>& m, bool) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  /// Throws ConfigError on any shape disagreement with the config.
  void check_shapes(const RenConfig& config) const;
};

/// LeCun-scaled uniform weights; out_proj and ffn_out start at zero so every
/// block is the identity on its residual stream.
RenParams<float> init_params(std::uint64_t seed, const RenConfig& config);

/// 2D sinusoidal embedding: first half encodes x, second half y, each as
/// interleaved (sin, cos) pairs at frequencies 10000^(-4k/d_model) applied
/// to 2*pi*coordinate.
RowVector<double> sinusoidal_embed(const PointPrompt& prompt, std::uint32_t d_model);

template <class T>
Matrix<T> embed_prompts(const std::vector<PointPrompt>& prompts, std::uint32_t d_model);

/// Sinusoidal embedding of every patch-cell center of an h x w grid, row-major
/// (m x d_model). Added to the keys, never to the values: the frozen features
/// alone say nothing about where a patch is.
template <class T>
Matrix<T> patch_position_embeddings(std::uint32_t h_patches, std::uint32_t w_patches, std::uint32_t d_model);

/// kRowExact evaluates every prompt row independently (per-row products,
/// sequential reductions), so outputs are bit-identical under prompt
/// permutation and duplication. kBatched uses blocked GEMM and vectorized
/// exp; it is faster and only used for training.
enum class Evaluation { kRowExact, kBatched };

/// Activations of one block kept for the backward pass.
template <class T>
struct BlockTrace {
  Matrix<T> stream_in;   // residual stream entering the block
  Matrix<T> attn_in;     // stream_in (+ prompt queries for blocks after the first)
  Matrix<T> ln_attn_hat;
  Matrix<T> ln_attn_rstd;  // n x 1
  Matrix<T> ln_attn_out;
  Matrix<T> queries;        // n x d_model after query_proj
  std::vector<Matrix<T>> probs;  // per head, n x m
  Matrix<T> context;        // n x d_model, heads concatenated
  Matrix<T> mid;            // stream after attention residual
  Matrix<T> ln_ffn_hat;
  Matrix<T> ln_ffn_rstd;
  Matrix<T> ln_ffn_out;
  Matrix<T> hidden_pre;     // n x ffn_dim
  Matrix<T> hidden;         // GELU(hidden_pre)
  Matrix<T> out;
};

/// Pre-norm residual cross-attention block:
///   mid = stream + MHA(LN(stream + query_addend), keys, values)
///   out = mid + FFN(LN(mid))
/// query_addend may be null. keys/values are already projected (m x d_model).
template <class T>
Matrix<T> block_forward(const Matrix<T>& stream, const Matrix<T>* query_addend, const Matrix<T>& keys,
                        const Matrix<T>& values, const BlockParams<T>& params, const RenConfig& config,
                        BlockTrace<T>* trace = nullptr, Evaluation mode = Evaluation::kRowExact);

/// The block applied to a bare query batch (no positional addend).
template <class T>
Matrix<T> cross_attention_block(const Matrix<T>& queries, const Matrix<T>& keys, const Matrix<T>& values,
                                const BlockParams<T>& params, const RenConfig& config,
                                std::vector<Matrix<T>>* head_probs = nullptr);

template <class T>
struct ForwardTrace {
  Matrix<T> features;      // m x encoder_dim
  Matrix<T> embeddings;    // n x d_model
  Matrix<T> prompt_queries;  // embeddings * prompt_proj^T
  Matrix<T> keys, values;  // m x d_model; keys include the patch positions
  std::vector<BlockTrace<T>> blocks;
  Matrix<T> ren;      // n x d_model
  Matrix<T> aligned;  // n x encoder_dim
};

/// Full forward with every activation retained (training path).
/// key_positions is m x d_model (see patch_position_embeddings).
template <class T>
ForwardTrace<T> forward_trace(const Matrix<T>& features, const Matrix<T>& key_positions, const Matrix<T>& embeddings,
                              const RenParams<T>& params, const RenConfig& config,
                              Evaluation mode = Evaluation::kRowExact);

/// aligned = ren * align_proj^T. The only code path producing aligned tokens.
template <class T>
Matrix<T> align(const Matrix<T>& ren_tokens, const Matrix<T>& align_proj);

/// Inference: region tokens for each prompt. Throws ValidationError on an
/// empty prompt list and ConfigError on a feature dim mismatch.
TokenSet forward(const PatchFeatureMap& map, const std::vector<PointPrompt>& prompts, const RenParams<float>& params,
                 const RenConfig& config);

/// Head-averaged attention of the final block, n x m (diagnostics and the
/// attention supervision loss).
template <class T>
Matrix<T> final_attention(const ForwardTrace<T>& trace);

}  // namespace ren
