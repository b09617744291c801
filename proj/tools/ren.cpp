// ren: command-line front end for the region tokenization engine.
//
// Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerics error.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ren/aggregation.hpp"
#include "ren/checkpoint.hpp"
#include "ren/errors.hpp"
#include "ren/eval.hpp"
#include "ren/experiments.hpp"
#include "ren/extension.hpp"
#include "ren/io.hpp"
#include "ren/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ren;

namespace {

struct Common {
  std::optional<std::uint64_t> seed;
  std::string out = ".";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--seed", c.seed, "Random seed (overrides any seed in the config)");
  cmd->add_option("--out", c.out, "Output directory (created if missing)")->capture_default_str();
}

fs::path out_dir(const Common& c) {
  fs::create_directories(c.out);
  return c.out;
}

void require_file(const std::string& path) {
  if (!fs::exists(path)) throw IoError("no such file: " + path);
}

// "a.b.c=value": value parsed as JSON when possible, else taken as a string.
void apply_override(json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + assignment);
  std::string pointer = "/" + assignment.substr(0, eq);
  for (auto& ch : pointer)
    if (ch == '.') ch = '/';
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  root[json::json_pointer(pointer)] = value;
}

struct RunConfig {
  DataConfig data;
  TrainConfig train;
  RenConfig model;
};

// {"data": {...}, "train": {...}, "model": {...}}; every section optional.
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  json j = json::object();
  if (!path.empty()) {
    require_file(path);
    j = read_json(path);
  }
  for (const auto& o : overrides) apply_override(j, o);
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "data" && it.key() != "train" && it.key() != "model")
      throw ConfigError("unknown top-level config key '" + it.key() + "'");
  RunConfig c;
  c.data = data_config_from_json(j.value("data", json::object()));
  c.train = train_config_from_json(j.value("train", json::object()));
  c.model = ren_config_from_json(j.value("model", json::object()));
  if (!j.contains("model") || !j["model"].contains("encoder_dim")) c.model.encoder_dim = static_cast<std::uint32_t>(c.data.dim);
  return c;
}

json run_config_json(const RunConfig& c) {
  return {{"data", to_json(c.data)}, {"train", to_json(c.train)}, {"model", to_json(c.model)}};
}

void print(const json& j) { std::cout << j.dump(2) << '\n'; }

// grid:<G> or slic:<S>[:compactness]
struct PromptSpec {
  enum Kind { kGrid, kSlic } kind = kGrid;
  int count = 0;
  SlicOptions slic;
};

PromptSpec parse_prompt_spec(const std::string& s) {
  PromptSpec p;
  std::vector<std::string> parts;
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, ':');) parts.push_back(part);
  try {
    if (parts.size() == 2 && parts[0] == "grid") {
      p.kind = PromptSpec::kGrid;
      p.count = std::stoi(parts[1]);
    } else if ((parts.size() == 2 || parts.size() == 3) && parts[0] == "slic") {
      p.kind = PromptSpec::kSlic;
      p.count = std::stoi(parts[1]);
      if (parts.size() == 3) p.slic.compactness = std::stod(parts[2]);
    } else {
      throw ConfigError("");
    }
  } catch (const std::logic_error&) {
    throw ConfigError("bad prompt spec '" + s + "' (expected grid:<G> or slic:<S>[:compactness])");
  } catch (const ConfigError&) {
    throw ConfigError("bad prompt spec '" + s + "' (expected grid:<G> or slic:<S>[:compactness])");
  }
  if (p.count < 1) throw ConfigError("prompt count must be positive in '" + s + "'");
  return p;
}

std::optional<std::size_t> parse_min_group(const std::string& s) {
  if (s == "auto") return std::nullopt;
  try {
    const long v = std::stol(s);
    if (v < 1) throw ConfigError("");
    return static_cast<std::size_t>(v);
  } catch (const std::logic_error&) {
  } catch (const ConfigError&) {
  }
  throw ConfigError("--min-group must be 'auto' or a positive integer");
}

std::vector<double> parse_grid(const std::string& s) {
  std::vector<double> v;
  std::stringstream ss(s);
  for (std::string part; std::getline(ss, part, ':');) {
    try {
      v.push_back(std::stod(part));
    } catch (const std::logic_error&) {
      throw ConfigError("bad --grid '" + s + "'");
    }
  }
  if (v.size() != 3 || !(v[2] > 0) || v[1] < v[0]) throw ConfigError("--grid must be lo:hi:step with lo <= hi, step > 0");
  std::vector<double> out;
  for (long k = 0;; ++k) {
    const double mu = v[0] + double(k) * v[2];
    if (mu > v[1] + 1e-9 * v[2]) break;
    out.push_back(std::round(mu * 1e12) / 1e12);
  }
  return out;
}

TokenSet load_tokens(const std::string& path) {
  require_file(path);
  return read_rtok(path);
}

SuperpixelMap load_superpixels(const std::string& path) {
  require_file(path);
  return superpixels_from_json(read_json(path));
}

Checkpoint load_checkpoint(const std::string& path) {
  require_file(path);
  return read_checkpoint(path);
}

RftFile load_features(const std::string& path) {
  require_file(path);
  return read_rft(path);
}

std::string scene_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04d", index);
  return buf;
}

// ---- subcommands ----

struct SynthArgs {
  Common common;
  std::string config;
  std::vector<std::string> overrides;
  std::string split = "train";
  int start = 0;
  int count = 1;
  std::uint32_t pooling_heads = 0;
};

int cmd_synth(const SynthArgs& a) {
  RunConfig rc = load_run_config(a.config, a.overrides);
  if (a.common.seed) rc.data.seed = *a.common.seed;
  rc.data.validate();
  if (a.split != "train" && a.split != "heldout") throw ConfigError("--split must be train or heldout");
  if (a.count < 1 || a.start < 0) throw ConfigError("--count must be positive and --start non-negative");
  const Split split = a.split == "train" ? Split::kTrain : Split::kHeldOut;
  const fs::path dir = out_dir(a.common);
  const ClassBank classes = dataset_classes(rc.data);
  std::optional<PoolingHead> head;
  if (a.pooling_heads > 0) head = random_pooling_head(rc.data.seed, static_cast<std::uint32_t>(rc.data.dim), a.pooling_heads);

  json scenes = json::array();
  for (int i = a.start; i < a.start + a.count; ++i) {
    const auto scene = dataset_scene(rc.data, classes, split, i);
    const auto view = render_scene(scene, rc.data.render.h_patches, rc.data.render.w_patches, rc.data.render.noise_sigma, {},
                                   make_rng(rc.data.seed, {0x5e7d, static_cast<std::uint64_t>(split), static_cast<std::uint64_t>(i)})());
    const std::string name = scene_name(i);
    write_json(dir / (name + ".json"), scene_to_json(scene));
    write_rft(dir / (name + ".rft"), view.features, head ? &*head : nullptr);
    write_json(dir / (name + ".masks.json"), masks_to_json(view.masks));
    write_ppm(dir / (name + ".ppm"), view.rgb);
    json classes_of = json::array();
    for (std::size_t r = 0; r < scene.region_count(); ++r) classes_of.push_back(scene.class_of(RegionId(r)));
    scenes.push_back({{"index", i},
                      {"scene", name + ".json"},
                      {"features", name + ".rft"},
                      {"masks", name + ".masks.json"},
                      {"image", name + ".ppm"},
                      {"region_classes", classes_of}});
  }
  const json manifest = {{"data", to_json(rc.data)}, {"split", a.split}, {"scenes", scenes}};
  write_json(dir / "manifest.json", manifest);
  print({{"written", a.count}, {"manifest", (dir / "manifest.json").string()}});
  return 0;
}

struct TrainArgs {
  Common common;
  std::string config;
  std::vector<std::string> overrides;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  RunConfig rc = load_run_config(a.config, a.overrides);
  if (a.common.seed) rc.train.seed = *a.common.seed;
  const fs::path dir = out_dir(a.common);
  write_json(dir / "config.json", run_config_json(rc));
  TrainOutputs outs;
  outs.dir = dir;
  if (!a.quiet)
    outs.on_step = [](const StepMetrics& m) {
      if (m.step == 1 || m.step % 100 == 0)
        std::cerr << "step " << m.step << " l_cont " << m.l_cont << " l_feat " << m.l_feat << " lr " << m.lr << '\n';
    };
  const auto r = train(rc.train, rc.data, rc.model, outs);
  const auto& first = r.metrics.front();
  const auto& last = r.metrics.back();
  print({{"steps", r.metrics.size()},
         {"skipped_pairs", r.skipped_pairs},
         {"first", to_json(first)},
         {"last", to_json(last)},
         {"seconds", r.seconds},
         {"checkpoint", (dir / "model.renc").string()}});
  return 0;
}

struct GradcheckArgs {
  Common common;
  double epsilon = 1e-3;
  double tolerance = 1e-4;
  bool attention = false;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  RenConfig cfg;
  cfg.encoder_dim = 8;
  cfg.d_model = 8;
  cfg.n_blocks = 4;
  cfg.n_heads = 2;
  const auto problem = make_gradcheck_problem(a.common.seed.value_or(0), cfg, 4, 2, a.attention);
  LossWeights w;
  if (a.attention) w.lambda_attn = 1.0;
  const auto rep = gradcheck(problem.first, problem.second, problem.params, problem.config, w, a.epsilon);
  json tensors = json::array();
  for (const auto& t : rep.tensors)
    tensors.push_back({{"name", t.name},
                       {"elements", t.elements},
                       {"rel_error", t.rel_error},
                       {"max_elem_rel_error", t.max_elem_rel_error},
                       {"max_abs_error", t.max_abs_error}});
  const bool ok = rep.max_rel_error <= a.tolerance;
  const json report = {{"epsilon", a.epsilon},          {"tolerance", a.tolerance}, {"max_rel_error", rep.max_rel_error},
                       {"max_elem_rel_error", rep.max_elem_rel_error}, {"seconds", rep.seconds},
                       {"passed", ok},                  {"tensors", tensors}};
  write_json(out_dir(a.common) / "gradcheck.json", report);
  print({{"max_rel_error", rep.max_rel_error}, {"passed", ok}});
  if (!ok) {
    std::cerr << "gradient check failed: max relative error " << rep.max_rel_error << " > " << a.tolerance << '\n';
    return 3;
  }
  return 0;
}

struct TokenizeArgs {
  Common common;
  std::string checkpoint, features, prompts, image;
};

int cmd_tokenize(const TokenizeArgs& a) {
  const PromptSpec spec = parse_prompt_spec(a.prompts);
  const auto ck = load_checkpoint(a.checkpoint);
  const auto rft = load_features(a.features);
  const fs::path dir = out_dir(a.common);
  std::vector<PointPrompt> prompts;
  std::optional<SuperpixelMap> sp;
  if (spec.kind == PromptSpec::kGrid) {
    prompts = grid_prompts(spec.count);
  } else {
    if (a.image.empty()) throw ConfigError("slic prompts need --image");
    require_file(a.image);
    const RgbImage img = read_ppm(a.image);
    if (std::uint32_t(img.width) != rft.map.image_w || std::uint32_t(img.height) != rft.map.image_h)
      throw ValidationError(a.image + " is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                            " but the features describe a " + std::to_string(rft.map.image_w) + "x" +
                            std::to_string(rft.map.image_h) + " image");
    sp = slic_segment(img, spec.count, spec.slic);
    prompts = slic_prompts(*sp);
  }
  TokenSet tokens = forward(rft.map, prompts, ck.params, ck.config);
  tokens.source_id = fs::path(a.features).stem().string();
  write_rtok(dir / "tokens.rtok", tokens);
  json summary = {{"tokens", (dir / "tokens.rtok").string()}, {"n", tokens.size()}};
  if (sp) {
    write_json(dir / "superpixels.json", superpixels_to_json(*sp));
    summary["superpixels"] = (dir / "superpixels.json").string();
  }
  print(summary);
  return 0;
}

struct AggregateArgs {
  Common common;
  std::string tokens, superpixels, min_group = "auto";
  double mu = kDefaultMu;
};

TokenSet pooled_token_set(const TokenSet& in, const AggregationResult& agg) {
  TokenSet t;
  t.prompts = agg.representative_prompts;
  t.ren_tokens = agg.pooled_ren;
  t.aligned_tokens = agg.pooled_aligned;
  t.source_id = in.source_id;
  return t;
}

int cmd_aggregate(const AggregateArgs& a) {
  const auto tokens = load_tokens(a.tokens);
  const auto agg = aggregate(tokens, a.mu, parse_min_group(a.min_group));
  const fs::path dir = out_dir(a.common);
  write_rtok(dir / "aggregated.rtok", pooled_token_set(tokens, agg));
  write_json(dir / "groups.json", aggregation_report(agg, false));
  print({{"prompts", agg.n_prompts}, {"groups", agg.groups.size()}, {"discarded", agg.discarded.size()}});
  return 0;
}

int cmd_export_regions(const AggregateArgs& a) {
  const auto tokens = load_tokens(a.tokens);
  const auto sp = load_superpixels(a.superpixels);
  const auto agg = aggregate(tokens, a.mu, parse_min_group(a.min_group));
  const auto masks = masks_from_groups(sp, agg, prompt_superpixels(sp, tokens.prompts));
  const fs::path dir = out_dir(a.common);
  write_json(dir / "masks.json", masks_to_json(masks));
  write_json(dir / "groups.json", aggregation_report(agg, true));
  print({{"masks", masks.size()}, {"path", (dir / "masks.json").string()}});
  return 0;
}

struct ExtendArgs {
  Common common;
  std::string target, tokens, superpixels, min_group = "auto";
  double mu = 0.8;
};

int cmd_extend(const ExtendArgs& a) {
  const auto target = load_features(a.target);
  if (!target.pooling_head) throw FormatError(a.target + " carries no pooling head block");
  const auto tokens = load_tokens(a.tokens);
  const auto sp = load_superpixels(a.superpixels);
  const auto agg = aggregate(tokens, a.mu, parse_min_group(a.min_group));
  TokenSet out = extend(target.map, *target.pooling_head, sp, agg, prompt_superpixels(sp, tokens.prompts));
  out.source_id = fs::path(a.target).stem().string();
  const fs::path dir = out_dir(a.common);
  write_rtok(dir / "extended.rtok", out);
  print({{"regions", out.size()}, {"path", (dir / "extended.rtok").string()}});
  return 0;
}

struct EvalArgs {
  Common common;
  std::string checkpoint, config;
  std::vector<std::string> overrides;
  EvalConfig eval;
};

int cmd_probe(const EvalArgs& a) {
  const auto ck = load_checkpoint(a.checkpoint);
  RunConfig rc = load_run_config(a.config, a.overrides);
  if (a.common.seed) rc.data.seed = *a.common.seed;
  const json report = to_json(evaluate_probe(ck.params, ck.config, rc.data, a.eval));
  write_json(out_dir(a.common) / "probe.json", report);
  print(report);
  return 0;
}

int cmd_retrieve(const EvalArgs& a) {
  const auto ck = load_checkpoint(a.checkpoint);
  RunConfig rc = load_run_config(a.config, a.overrides);
  if (a.common.seed) rc.data.seed = *a.common.seed;
  const json report = to_json(evaluate_retrieval(ck.params, ck.config, rc.data, a.eval));
  write_json(out_dir(a.common) / "retrieval.json", report);
  print(report);
  return 0;
}

struct BenchArgs {
  Common common;
  std::string checkpoint, features;
  std::vector<std::size_t> counts{256, 1024, 4096};
  int runs = 20, warmups = 3;
  bool no_aggregation = false;
  double mu = kDefaultMu;
};

int cmd_bench(const BenchArgs& a) {
  const auto ck = load_checkpoint(a.checkpoint);
  PatchFeatureMap map;
  if (!a.features.empty()) {
    map = load_features(a.features).map;
  } else {
    DataConfig data;
    data.dim = static_cast<int>(ck.config.encoder_dim);
    const auto scene = dataset_scene(data, dataset_classes(data), Split::kHeldOut, 0);
    map = render_scene(scene, data.render.h_patches, data.render.w_patches, data.render.noise_sigma).features;
  }
  BenchConfig bc;
  bc.runs = a.runs;
  bc.warmups = a.warmups;
  bc.with_aggregation = !a.no_aggregation;
  bc.mu = a.mu;
  bc.seed = a.common.seed.value_or(0);
  json reports = json::array();
  std::vector<double> xs, ys;
  std::ostringstream csv;
  csv << "prompts,mean_s,std_s,mean_agg_s,std_agg_s,tokens_per_s\n";
  for (auto n : a.counts) {
    const auto r = bench_one(ck.params, ck.config, map, n, bc);
    reports.push_back(bench_to_json(r));
    if (!r.error) {
      xs.push_back(double(n));
      ys.push_back(r.mean_s);
      csv << n << ',' << r.mean_s << ',' << r.std_s << ',' << r.mean_agg_s << ',' << r.std_agg_s << ','
          << r.tokens_per_s << '\n';
    }
    std::cerr << "prompts " << n << ": " << r.mean_s << " s/img\n";
  }
  json report = {{"reports", reports}};
  if (xs.size() >= 2) {
    const auto fit = linear_fit(xs, ys);
    report["linear_fit"] = {{"slope", fit.slope}, {"intercept", fit.intercept}, {"r2", fit.r2}};
  }
  const fs::path dir = out_dir(a.common);
  write_json(dir / "bench.json", report);
  std::ofstream(dir / "bench.csv") << csv.str();
  print(report);
  return 0;
}

struct SweepArgs {
  Common common;
  std::string tokens, grid = "0.875:0.975:0.025";
};

int cmd_sweep_mu(const SweepArgs& a) {
  const auto tokens = load_tokens(a.tokens);
  const auto curve = token_count_curve(tokens, parse_grid(a.grid));
  std::ostringstream csv;
  csv << "mu,tokens\n";
  for (const auto& [mu, n] : curve) csv << mu << ',' << n << '\n';
  const fs::path path = out_dir(a.common) / "sweep_mu.csv";
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << csv.str();
  std::cout << csv.str();
  return 0;
}

void add_config_options(CLI::App* cmd, std::string& config, std::vector<std::string>& overrides) {
  cmd->add_option("--config", config, "Run config JSON {\"data\", \"train\", \"model\"}");
  cmd->add_option("--set", overrides, "Override a config key, e.g. --set train.total_steps=500")->take_all();
}

void add_eval_options(CLI::App* cmd, EvalArgs& a) {
  add_common(cmd, a.common);
  cmd->add_option("--checkpoint", a.checkpoint, "Trained model (RENC)")->required();
  add_config_options(cmd, a.config, a.overrides);
  cmd->add_option("--superpixels", a.eval.superpixels, "SLIC superpixels per image")->capture_default_str();
  cmd->add_option("--mu", a.eval.mu, "Aggregation threshold")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Region tokenization engine"};
  app.require_subcommand(1);
  app.fallthrough(false);

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Generate synthetic scenes: scene JSON, RFT features, masks, PPM image");
  add_common(c_synth, synth.common);
  add_config_options(c_synth, synth.config, synth.overrides);
  c_synth->add_option("--split", synth.split, "train or heldout")->capture_default_str();
  c_synth->add_option("--start", synth.start, "First scene index")->capture_default_str();
  c_synth->add_option("--count", synth.count, "Number of scenes")->capture_default_str();
  c_synth->add_option("--pooling-heads", synth.pooling_heads,
                      "Append a random pooling head with this many heads to each RFT (0: none)")
      ->capture_default_str();

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train a model; writes config.json, metrics.jsonl and model.renc");
  add_common(c_train, tr.common);
  add_config_options(c_train, tr.config, tr.overrides);
  c_train->add_flag("--quiet", tr.quiet, "No progress on stderr");

  GradcheckArgs gc;
  auto* c_gc = app.add_subcommand("gradcheck", "Finite-difference gradient check on a small random problem");
  add_common(c_gc, gc.common);
  c_gc->add_option("--epsilon", gc.epsilon, "Central-difference step")->capture_default_str();
  c_gc->add_option("--tolerance", gc.tolerance, "Max per-tensor relative error")->capture_default_str();
  c_gc->add_flag("--attention", gc.attention, "Include the attention supervision loss");

  TokenizeArgs tk;
  auto* c_tok = app.add_subcommand("tokenize", "Region tokens for an RFT feature file; writes tokens.rtok");
  add_common(c_tok, tk.common);
  c_tok->add_option("--checkpoint", tk.checkpoint, "Trained model (RENC)")->required();
  c_tok->add_option("--features", tk.features, "Patch features (RFT)")->required();
  c_tok->add_option("--prompts", tk.prompts, "grid:<G> or slic:<S>[:compactness]")->required();
  c_tok->add_option("--image", tk.image, "PPM image for SLIC prompting");

  AggregateArgs ag;
  auto* c_agg = app.add_subcommand("aggregate", "Merge similar tokens; writes aggregated.rtok and groups.json");
  add_common(c_agg, ag.common);
  c_agg->add_option("--tokens", ag.tokens, "Token set (RTOK)")->required();
  c_agg->add_option("--mu", ag.mu, "Cosine threshold; >= 1 disables merging")->capture_default_str();
  c_agg->add_option("--min-group", ag.min_group, "Discard groups smaller than this ('auto' or N)")->capture_default_str();

  AggregateArgs ex;
  auto* c_ex = app.add_subcommand("export-regions", "Region masks from aggregated SLIC prompts; writes masks.json");
  add_common(c_ex, ex.common);
  c_ex->add_option("--tokens", ex.tokens, "Token set from SLIC prompts (RTOK)")->required();
  c_ex->add_option("--superpixels", ex.superpixels, "superpixels.json written by tokenize")->required();
  c_ex->add_option("--mu", ex.mu, "Cosine threshold")->capture_default_str();
  c_ex->add_option("--min-group", ex.min_group, "'auto' or N")->capture_default_str();

  ExtendArgs et;
  auto* c_ext = app.add_subcommand("extend", "Target-encoder region tokens by masked attention pooling");
  add_common(c_ext, et.common);
  c_ext->add_option("--target", et.target, "Target encoder features with a pooling head (RFT)")->required();
  c_ext->add_option("--tokens", et.tokens, "Token set from SLIC prompts (RTOK)")->required();
  c_ext->add_option("--superpixels", et.superpixels, "superpixels.json written by tokenize")->required();
  c_ext->add_option("--mu", et.mu, "Cosine threshold")->capture_default_str();
  c_ext->add_option("--min-group", et.min_group, "'auto' or N")->capture_default_str();

  EvalArgs pr;
  auto* c_probe = app.add_subcommand("probe", "Linear-probe segmentation on the synthetic dataset (REN vs patch)");
  add_eval_options(c_probe, pr);
  c_probe->add_option("--epochs", pr.eval.probe.epochs, "Gradient descent epochs")->capture_default_str();
  c_probe->add_option("--lr", pr.eval.probe.lr, "Probe learning rate")->capture_default_str();

  EvalArgs rt;
  auto* c_ret = app.add_subcommand("retrieve", "Synthetic region retrieval (REN vs mean patch feature)");
  add_eval_options(c_ret, rt);
  c_ret->add_option("--database", rt.eval.retrieval_database, "Database images")->capture_default_str();
  c_ret->add_option("--queries", rt.eval.retrieval_queries, "Queries")->capture_default_str();
  c_ret->add_option("--k", rt.eval.mrp_k, "Rank cutoff for mRP@K")->capture_default_str();

  BenchArgs bn;
  auto* c_bench = app.add_subcommand("bench", "Forward (and aggregation) timing over prompt counts");
  add_common(c_bench, bn.common);
  c_bench->add_option("--checkpoint", bn.checkpoint, "Trained model (RENC)")->required();
  c_bench->add_option("--features", bn.features, "Patch features (RFT); default: a synthetic scene");
  c_bench->add_option("--counts", bn.counts, "Prompt counts")->delimiter(',')->capture_default_str();
  c_bench->add_option("--runs", bn.runs, "Measured runs")->capture_default_str();
  c_bench->add_option("--warmups", bn.warmups, "Warmup runs")->capture_default_str();
  c_bench->add_option("--mu", bn.mu, "Aggregation threshold")->capture_default_str();
  c_bench->add_flag("--no-aggregation", bn.no_aggregation, "Skip the forward + aggregation timing");

  SweepArgs sw;
  auto* c_sweep = app.add_subcommand("sweep-mu", "Token count per aggregation threshold; writes sweep_mu.csv");
  add_common(c_sweep, sw.common);
  c_sweep->add_option("--tokens", sw.tokens, "Token set (RTOK)")->required();
  c_sweep->add_option("--grid", sw.grid, "lo:hi:step")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*c_synth) return cmd_synth(synth);
    if (*c_train) return cmd_train(tr);
    if (*c_gc) return cmd_gradcheck(gc);
    if (*c_tok) return cmd_tokenize(tk);
    if (*c_agg) return cmd_aggregate(ag);
    if (*c_ex) return cmd_export_regions(ex);
    if (*c_ext) return cmd_extend(et);
    if (*c_probe) return cmd_probe(pr);
    if (*c_ret) return cmd_retrieve(rt);
    if (*c_bench) return cmd_bench(bn);
    if (*c_sweep) return cmd_sweep_mu(sw);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    switch (e.error_class()) {
      case ErrorClass::kData: return 2;
      case ErrorClass::kNumerics: return 3;
      case ErrorClass::kConfig: return 1;
    }
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
