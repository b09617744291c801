#include "ren/trainer.hpp"

#include <chrono>
#include <fstream>
#include <numeric>
#include <set>

#include "ren/checkpoint.hpp"
#include "ren/losses.hpp"

namespace ren {

namespace {

// Reads optional keys into existing defaults and rejects keys nobody asked for.
class Fields {
 public:
  Fields(const nlohmann::json& j, std::string what) : j_(j), what_(std::move(what)) {
    if (!j.is_object()) throw ConfigError(what_ + " must be a JSON object");
  }
  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(what_ + "." + key + " has the wrong type");
    }
  }
  const nlohmann::json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + what_);
  }

 private:
  const nlohmann::json& j_;
  std::string what_;
  std::set<std::string> seen_;
};

}  // namespace

void DataConfig::validate() const {
  if (n_scenes < 1) throw ConfigError("n_scenes must be positive");
  if (min_regions < 1 || max_regions < min_regions) throw ConfigError("need 1 <= min_regions <= max_regions");
  if (n_classes < max_regions + 1) throw ConfigError("n_classes must exceed max_regions");
  if (canvas < 8 || dim < 4) throw ConfigError("canvas >= 8 and dim >= 4 required");
  if (prompts_per_view < 2) throw ConfigError("prompts_per_view must be >= 2");
  if (render.h_patches < 1 || render.w_patches < 1) throw ConfigError("patch grid must be non-empty");
  augment.validate();
}

void TrainConfig::validate() const {
  if (batch_scenes < 1 || max_prompts < 2) throw ConfigError("batch_scenes >= 1 and max_prompts >= 2 required");
  optim.validate();
  loss.validate();
}

nlohmann::json to_json(const DataConfig& c) {
  return {{"seed", c.seed},
          {"n_scenes", c.n_scenes},
          {"min_regions", c.min_regions},
          {"max_regions", c.max_regions},
          {"canvas", c.canvas},
          {"dim", c.dim},
          {"n_classes", c.n_classes},
          {"latent_jitter", c.latent_jitter},
          {"h_patches", c.render.h_patches},
          {"w_patches", c.render.w_patches},
          {"noise_sigma", c.render.noise_sigma},
          {"prompts_per_view", c.prompts_per_view},
          {"augment",
           {{"flip_prob", c.augment.flip_prob},
            {"max_rotation_deg", c.augment.max_rotation_deg},
            {"min_crop_area", c.augment.min_crop_area},
            {"color_jitter", c.augment.color_jitter},
            {"sharpness_jitter", c.augment.sharpness_jitter}}}};
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_scenes", c.batch_scenes},
          {"max_prompts", c.max_prompts},
          {"lr", c.optim.lr},
          {"warmup_steps", c.optim.warmup_steps},
          {"total_steps", c.optim.total_steps},
          {"grad_clip_norm", c.optim.grad_clip_norm},
          {"weight_decay", c.optim.weight_decay},
          {"lambda_cont", c.loss.lambda_cont},
          {"lambda_feat", c.loss.lambda_feat},
          {"lambda_attn", c.loss.lambda_attn},
          {"tau", c.loss.tau},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every}};
}

nlohmann::json to_json(const RenConfig& c) {
  return {{"d_model", c.d_model},
          {"n_blocks", c.n_blocks},
          {"n_heads", c.n_heads},
          {"encoder_dim", c.encoder_dim},
          {"ffn_mult", c.ffn_mult}};
}

DataConfig data_config_from_json(const nlohmann::json& j) {
  DataConfig c;
  Fields f(j, "data config");
  f.get("seed", c.seed);
  f.get("n_scenes", c.n_scenes);
  f.get("min_regions", c.min_regions);
  f.get("max_regions", c.max_regions);
  f.get("canvas", c.canvas);
  f.get("dim", c.dim);
  f.get("n_classes", c.n_classes);
  f.get("latent_jitter", c.latent_jitter);
  f.get("h_patches", c.render.h_patches);
  f.get("w_patches", c.render.w_patches);
  f.get("noise_sigma", c.render.noise_sigma);
  f.get("prompts_per_view", c.prompts_per_view);
  if (const auto* a = f.sub("augment")) {
    Fields g(*a, "data config.augment");
    g.get("flip_prob", c.augment.flip_prob);
    g.get("max_rotation_deg", c.augment.max_rotation_deg);
    g.get("min_crop_area", c.augment.min_crop_area);
    g.get("color_jitter", c.augment.color_jitter);
    g.get("sharpness_jitter", c.augment.sharpness_jitter);
    g.finish();
  }
  f.finish();
  c.validate();
  return c;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  Fields f(j, "train config");
  f.get("batch_scenes", c.batch_scenes);
  f.get("max_prompts", c.max_prompts);
  f.get("lr", c.optim.lr);
  f.get("warmup_steps", c.optim.warmup_steps);
  f.get("total_steps", c.optim.total_steps);
  f.get("grad_clip_norm", c.optim.grad_clip_norm);
  f.get("weight_decay", c.optim.weight_decay);
  f.get("lambda_cont", c.loss.lambda_cont);
  f.get("lambda_feat", c.loss.lambda_feat);
  f.get("lambda_attn", c.loss.lambda_attn);
  f.get("tau", c.loss.tau);
  f.get("seed", c.seed);
  f.get("checkpoint_every", c.checkpoint_every);
  f.finish();
  c.validate();
  return c;
}

RenConfig ren_config_from_json(const nlohmann::json& j) {
  RenConfig c;
  Fields f(j, "model config");
  f.get("d_model", c.d_model);
  f.get("n_blocks", c.n_blocks);
  f.get("n_heads", c.n_heads);
  f.get("encoder_dim", c.encoder_dim);
  f.get("ffn_mult", c.ffn_mult);
  f.finish();
  c.validate();
  return c;
}

ClassBank dataset_classes(const DataConfig& data) {
  return make_class_bank(make_rng(data.seed, {0xc1a55})(), data.n_classes, data.dim);
}

SyntheticScene dataset_scene(const DataConfig& data, const ClassBank& classes, Split split, int index) {
  const std::uint64_t split_tag = split == Split::kTrain ? 0x7a : 0x4e;
  Rng rng = make_rng(data.seed, {split_tag, static_cast<std::uint64_t>(index)});
  SceneConfig sc;
  sc.n_regions = data.min_regions + static_cast<int>(rng() % static_cast<std::uint64_t>(data.max_regions - data.min_regions + 1));
  sc.canvas_w = sc.canvas_h = data.canvas;
  sc.dim = data.dim;
  sc.classes = classes;
  sc.latent_jitter = data.latent_jitter;
  return generate_scene(rng(), sc);
}

ViewInputs<float> view_inputs(const TrainingView& view, std::uint32_t max_prompts, bool attention_targets) {
  ViewInputs<float> in;
  const auto& map = view.render.features;
  const std::size_t n = std::min<std::size_t>(view.prompts.size(), max_prompts);
  in.features = map.data;
  in.h_patches = map.h_patches;
  in.w_patches = map.w_patches;
  in.prompts.assign(view.prompts.begin(), view.prompts.begin() + static_cast<std::ptrdiff_t>(n));
  in.ids.assign(view.ids.begin(), view.ids.begin() + static_cast<std::ptrdiff_t>(n));
  in.targets = target_tokens(map, view.render.masks, in.ids);
  if (attention_targets) {
    in.attention_targets.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(map.patch_count()));
    std::vector<RowVector<float>> cache(view.render.masks.size());
    for (std::size_t i = 0; i < n; ++i) {
      const auto id = static_cast<std::size_t>(in.ids[i]);
      if (cache[id].size() == 0) cache[id] = rasterize_to_patches(map, view.render.masks[id]);
      in.attention_targets.row(static_cast<Eigen::Index>(i)) = cache[id];
    }
  }
  return in;
}

nlohmann::json to_json(const StepMetrics& m) {
  return {{"step", m.step}, {"l_cont", m.l_cont}, {"l_feat", m.l_feat}, {"l_attn", m.l_attn},
          {"lr", m.lr},     {"grad_norm", m.grad_norm}, {"pairs", m.pairs}};
}

TrainResult train(const TrainConfig& tc, const DataConfig& data, const RenConfig& model, const TrainOutputs& out) {
  tc.validate();
  data.validate();
  model.validate();
  if (model.encoder_dim != static_cast<std::uint32_t>(data.dim)) throw ConfigError("model encoder_dim differs from data dim");
  const auto start = std::chrono::steady_clock::now();

  const ClassBank classes = dataset_classes(data);
  std::vector<SyntheticScene> scenes;
  for (int i = 0; i < data.n_scenes; ++i) scenes.push_back(dataset_scene(data, classes, Split::kTrain, i));

  TrainResult result;
  result.model = model;
  result.params = init_params(make_rng(tc.seed, {0x1417})(), model);
  AdamW opt(result.params, tc.optim);
  const bool with_attn = tc.loss.lambda_attn > 0;

  std::ofstream metrics_log;
  if (out.dir) {
    std::filesystem::create_directories(*out.dir);
    metrics_log.open(*out.dir / "metrics.jsonl");
    if (!metrics_log) throw IoError("cannot open " + (*out.dir / "metrics.jsonl").string());
  }

  std::vector<int> order(scenes.size());
  for (std::uint32_t step = 1; step <= tc.optim.total_steps; ++step) {
    Rng rng = make_rng(tc.seed, {0x57e9, step});
    std::iota(order.begin(), order.end(), 0);
    const std::size_t batch = std::min<std::size_t>(tc.batch_scenes, order.size());
    for (std::size_t i = 0; i < batch; ++i) std::swap(order[i], order[i + rng() % (order.size() - i)]);

    RenParams<float> grads = result.params.zeros_like();
    StepMetrics m;
    m.step = step;
    for (std::size_t slot = 0; slot < batch; ++slot) {
      const auto& scene = scenes[static_cast<std::size_t>(order[slot])];
      const ViewPair pair = augment_scene(scene, make_rng(tc.seed, {0x5ce, step, slot})(), data.augment, data.render,
                                          data.prompts_per_view);
      try {
        const auto first = view_inputs(pair.first, tc.max_prompts, with_attn);
        const auto second = view_inputs(pair.second, tc.max_prompts, with_attn);
        const auto obj = evaluate_pair<float>(first, second, result.params, model, tc.loss, true);
        auto g = obj.grads;
        check_gradients_finite(g);
        std::vector<MatrixF*> dst;
        grads.for_each([&](const std::string&, MatrixF& x, bool) { dst.push_back(&x); });
        std::size_t k = 0;
        g.for_each([&](const std::string&, const MatrixF& x, bool) { *dst[k++] += x; });
        m.l_cont += obj.parts.cont;
        m.l_feat += obj.parts.feat;
        m.l_attn += obj.parts.attn;
        ++m.pairs;
      } catch (const DegenerateBatchError&) {
        ++result.skipped_pairs;
      }
    }
    if (m.pairs > 0) {
      const float inv = 1.0f / static_cast<float>(m.pairs);
      grads.for_each([&](const std::string&, MatrixF& x, bool) { x *= inv; });
      m.l_cont /= m.pairs;
      m.l_feat /= m.pairs;
      m.l_attn /= m.pairs;
      m.grad_norm = clip_global_norm(grads, tc.optim.grad_clip_norm);
      m.lr = opt.step(result.params, grads, step);
    } else {
      m.lr = learning_rate(step, tc.optim);
    }
    result.metrics.push_back(m);
    if (metrics_log.is_open()) metrics_log << to_json(m).dump() << '\n';
    if (out.on_step) out.on_step(m);
    if (out.dir && tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0)
      write_checkpoint((*out.dir / ("step_" + std::to_string(step) + ".renc")).string(), model, result.params);
  }
  if (out.dir) write_checkpoint((*out.dir / "model.renc").string(), model, result.params);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace ren
