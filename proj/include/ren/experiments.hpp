#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "ren/aggregation.hpp"
#include "ren/eval.hpp"
#include "ren/prompting.hpp"
#include "ren/trainer.hpp"

namespace ren {

// Evaluation protocols on the synthetic dataset, shared by the CLI and the
// acceptance runner. Every protocol is deterministic in (data.seed, config).

struct EvalConfig {
  int superpixels = 64;  // SLIC target count per image
  double mu = kDefaultMu;
  int recovery_scenes = 20;
  int gap_scenes = 20;
  int gap_prompts = 64;
  int loss_pairs = 32;
  int probe_test_scenes = 20;
  int retrieval_database = 200;
  int retrieval_queries = 20;
  int query_prompts = 128;
  std::size_t mrp_k = 10;
  ProbeConfig probe;  // n_classes is taken from the data config
};

/// A held-out (or training) scene rendered without augmentation, segmented
/// with SLIC and prompted once per superpixel.
struct EvalImage {
  SyntheticScene scene;
  RenderedView view;
  std::vector<RegionId> owner;  // per pixel
  SuperpixelMap superpixels;
  std::vector<PointPrompt> prompts;
  std::vector<std::uint32_t> prompt_superpixel;
  std::vector<RegionId> prompt_region;
};

EvalImage eval_image(const DataConfig& data, const ClassBank& classes, Split split, int index, int superpixels);

/// Mean contrastive part of the pair objective over loss_pairs fixed
/// augmented pairs of held-out scenes.
double heldout_contrastive_loss(const RenParams<float>& params, const RenConfig& model, const DataConfig& data,
                                const EvalConfig& eval);

struct TokenGap {
  double within = 0.0;  // mean cosine over same-region prompt pairs
  double cross = 0.0;   // mean cosine over different-region prompt pairs
  double gap() const { return within - cross; }
};

/// Uniform random prompts on un-augmented held-out renders.
TokenGap token_gap(const RenParams<float>& params, const RenConfig& model, const DataConfig& data,
                   const EvalConfig& eval);

struct RecoveryReport {
  double ari = 0.0;        // mean over scenes, prompts labelled by region
  double pixel_ari = 0.0;  // mean over scenes, pixels labelled through superpixels
  double reduction = 0.0;  // total prompts / total groups
  std::size_t prompts = 0, groups = 0;
  std::vector<double> per_scene_ari;
};

RecoveryReport evaluate_recovery(const RenParams<float>& params, const RenConfig& model, const DataConfig& data,
                                 const EvalConfig& eval);

struct ProbeReport {
  double miou_ren = 0.0;
  double miou_patch = 0.0;  // nearest patch feature per prompt
  std::size_t train_tokens = 0;
};

/// Linear probe trained on the training scenes' SLIC prompts (region class
/// as label), scored by superpixel-painted mIoU on held-out scenes.
ProbeReport evaluate_probe(const RenParams<float>& params, const RenConfig& model, const DataConfig& data,
                           const EvalConfig& eval);

struct RetrievalReport {
  double map = 0.0, mrp = 0.0;
  double baseline_map = 0.0, baseline_mrp = 0.0;  // mean patch feature per image
};

/// Database images hold their aggregated aligned tokens. Each query is one
/// foreground region of a separate scene (mean aligned token of prompts
/// inside it); relevant images contain a region of the same class.
RetrievalReport evaluate_retrieval(const RenParams<float>& params, const RenConfig& model, const DataConfig& data,
                                   const EvalConfig& eval);

nlohmann::json to_json(const TokenGap& g);
nlohmann::json to_json(const RecoveryReport& r);
nlohmann::json to_json(const ProbeReport& r);
nlohmann::json to_json(const RetrievalReport& r);

}  // namespace ren
