#pragma once

#include <cstdint>
#include <vector>

#include "ren/aggregation.hpp"
#include "ren/types.hpp"

namespace ren {

/// Patches whose cell holds at least one mask pixel, ascending. The mask must
/// match the grid's image size. Throws EmptyRegionError when nothing overlaps.
std::vector<std::uint32_t> patch_membership(const RegionMask& mask, const PatchFeatureMap& grid);

/// The head's query attending only to `members` (one attention layer, no
/// self-attention to the query), followed by W_o. Throws EmptyRegionError on
/// an empty member set.
RowVector<float> masked_attention_pool(const MatrixF& features, const PoolingHead& head,
                                       const std::vector<std::uint32_t>& members);

/// Unmasked pooling: every patch is a member.
RowVector<float> global_pool(const MatrixF& features, const PoolingHead& head);

/// All regions in one pass: keys/values and query logits are shared, each
/// region row masks non-members with -inf before the softmax.
MatrixF masked_attention_pool_batched(const MatrixF& features, const PoolingHead& head,
                                      const std::vector<std::vector<std::uint32_t>>& members);

/// Random pooling head for synthetic target encoders: query ~ N(0, 1),
/// projections uniform in +-1/sqrt(dim). Deterministic in seed.
PoolingHead random_pooling_head(std::uint64_t seed, std::uint32_t dim, std::uint32_t n_heads);

/// Target-space region tokens for an aggregation over SLIC prompts. The
/// result holds one row per group: representative prompt, pooled REN token,
/// and the target-space token in aligned_tokens.
TokenSet extend(const PatchFeatureMap& target, const PoolingHead& head, const SuperpixelMap& superpixels,
                const AggregationResult& aggregation, const std::vector<std::uint32_t>& prompt_superpixel);

}  // namespace ren
