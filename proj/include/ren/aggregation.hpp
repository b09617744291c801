#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ren/prompting.hpp"
#include "ren/types.hpp"

namespace ren {

inline constexpr double kDefaultMu = 0.975;
// "auto" discard only kicks in for dense prompting.
inline constexpr std::size_t kAutoDiscardAbove = 1000;
inline constexpr std::size_t kAutoMinGroup = 3;

struct AggregationResult {
  std::vector<std::vector<std::uint32_t>> groups;  // ascending members, ordered by first member
  MatrixF pooled_ren;                              // one row per group
  MatrixF pooled_aligned;
  std::vector<std::uint32_t> representatives;      // token index per group
  std::vector<PointPrompt> representative_prompts;
  std::vector<std::uint32_t> discarded;            // ascending
  double mu = kDefaultMu;
  std::size_t min_group = 1;
  std::size_t n_prompts = 0;
};

/// Components with fewer members than min_group are discarded. nullopt is the
/// automatic policy: kAutoMinGroup above kAutoDiscardAbove prompts, else 1.
std::size_t resolve_min_group(std::size_t n_prompts, std::optional<std::size_t> min_group);

/// Connected components (BFS) of the graph with an edge wherever
/// cos(ren_i, ren_j) > mu, mean pooling in ascending index order, and the
/// member nearest the pooled REN token as representative (lowest index on ties).
AggregationResult aggregate(const TokenSet& tokens, double mu = kDefaultMu,
                            std::optional<std::size_t> min_group = std::nullopt);

/// Connected components only, as a label per token.
std::vector<std::uint32_t> component_labels(const MatrixF& ren_tokens, double mu);

/// Superpixel index per prompt. Requires exactly one prompt per superpixel,
/// which is what slic_prompts produces; anything else (grid prompts included)
/// throws UnsupportedPromptError.
std::vector<std::uint32_t> prompt_superpixels(const SuperpixelMap& map, const std::vector<PointPrompt>& prompts);

/// One mask per kept group: the pixel union of its members' superpixels.
std::vector<RegionMask> masks_from_groups(const SuperpixelMap& map, const AggregationResult& result,
                                          const std::vector<std::uint32_t>& prompt_superpixel);

/// Component count per threshold (before any discard); non-decreasing in mu.
std::vector<std::pair<double, std::size_t>> token_count_curve(const TokenSet& tokens, const std::vector<double>& mus);

nlohmann::json aggregation_report(const AggregationResult& result, bool with_masks);

}  // namespace ren
