#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include <json.hpp>

#include "ren/augment.hpp"
#include "ren/backward.hpp"
#include "ren/optim.hpp"

namespace ren {

/// Synthetic dataset definition. Scenes draw region latents from a shared
/// class bank (plus jitter) so classes mean the same thing across scenes.
struct DataConfig {
  std::uint64_t seed = 1;
  int n_scenes = 64;
  int min_regions = 3;
  int max_regions = 6;
  int canvas = 96;
  int dim = 32;
  int n_classes = 8;
  double latent_jitter = 0.15;
  RenderConfig render;
  AugmentConfig augment;
  int prompts_per_view = 64;

  void validate() const;
};

struct TrainConfig {
  std::uint32_t batch_scenes = 16;
  std::uint32_t max_prompts = 256;
  AdamWConfig optim;
  LossWeights loss;
  std::uint64_t seed = 0;
  std::uint32_t checkpoint_every = 0;  // 0: final checkpoint only

  void validate() const;
};

nlohmann::json to_json(const DataConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const RenConfig& c);
/// Missing keys keep their defaults; unknown keys raise ConfigError.
DataConfig data_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);
RenConfig ren_config_from_json(const nlohmann::json& j);

enum class Split { kTrain, kHeldOut };

ClassBank dataset_classes(const DataConfig& data);
/// Scene `index` of a split; deterministic in (data.seed, split, index).
SyntheticScene dataset_scene(const DataConfig& data, const ClassBank& classes, Split split, int index);

/// Model-ready inputs for one training view: prompts capped at max_prompts,
/// mask-averaged targets, and patch targets when attention supervision is on.
ViewInputs<float> view_inputs(const TrainingView& view, std::uint32_t max_prompts, bool attention_targets);

struct StepMetrics {
  std::uint32_t step = 0;
  double l_cont = 0, l_feat = 0, l_attn = 0;
  double lr = 0, grad_norm = 0;
  int pairs = 0;  // pairs that contributed; 0 means the batch was skipped
};
nlohmann::json to_json(const StepMetrics& m);

struct TrainResult {
  RenConfig model;
  RenParams<float> params;
  std::vector<StepMetrics> metrics;
  int skipped_pairs = 0;
  double seconds = 0;
};

struct TrainOutputs {
  std::optional<std::filesystem::path> dir;  // metrics.jsonl + checkpoints
  std::function<void(const StepMetrics&)> on_step;
};

/// Runs total_steps AdamW steps. Each step draws batch_scenes training
/// scenes, builds an augmented view pair per scene, evaluates the pair
/// objective and averages gradients over the pairs in ascending slot order.
/// Pairs raising DegenerateBatchError are skipped and counted.
TrainResult train(const TrainConfig& train, const DataConfig& data, const RenConfig& model, const TrainOutputs& out = {});

}  // namespace ren
