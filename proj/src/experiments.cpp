#include "ren/experiments.hpp"

#include <set>

#include "ren/errors.hpp"
#include "ren/losses.hpp"

namespace ren {

namespace {

constexpr std::uint64_t kSplitTag[2] = {0x7a, 0x4e};

// Index ranges of the held-out split used by each protocol, kept disjoint
// where one protocol's queries must not leak into another's database.
constexpr int kProbeTestBase = 500;
constexpr int kDatabaseBase = 1000;
constexpr int kQueryBase = 2000;

std::uint64_t noise_seed(const DataConfig& data, Split split, int index) {
  return make_rng(data.seed, {0xe1, kSplitTag[split == Split::kHeldOut], static_cast<std::uint64_t>(index)})();
}

RenderedView plain_render(const DataConfig& data, const SyntheticScene& scene, Split split, int index) {
  return render_scene(scene, data.render.h_patches, data.render.w_patches, data.render.noise_sigma, {},
                      noise_seed(data, split, index));
}

double row_cosine(const MatrixF& a, Eigen::Index i, Eigen::Index j) {
  const Eigen::RowVectorXd x = a.row(i).cast<double>(), y = a.row(j).cast<double>();
  const double d = x.norm() * y.norm();
  return d > 0 ? x.dot(y) / d : 0.0;
}

MatrixF mean_rows(const MatrixF& m) { return m.colwise().mean(); }

std::set<int> visible_classes(const SyntheticScene& scene, const std::vector<RegionId>& owner) {
  std::set<RegionId> ids(owner.begin(), owner.end());
  std::set<int> classes;
  for (auto id : ids) classes.insert(scene.class_of(id));
  return classes;
}

}  // namespace

EvalImage eval_image(const DataConfig& data, const ClassBank& classes, Split split, int index, int superpixels) {
  EvalImage img;
  img.scene = dataset_scene(data, classes, split, index);
  img.view = plain_render(data, img.scene, split, index);
  img.owner = ownership(img.scene);
  img.superpixels = slic_segment(img.view.rgb, superpixels);
  img.prompts = slic_prompts(img.superpixels);
  img.prompt_superpixel = prompt_superpixels(img.superpixels, img.prompts);
  for (const auto& p : img.prompts)
    img.prompt_region.push_back(
        img.owner[static_cast<std::size_t>(p.pixel_y(img.scene.canvas_h)) * img.scene.canvas_w + p.pixel_x(img.scene.canvas_w)]);
  return img;
}

double heldout_contrastive_loss(const RenParams<float>& params, const RenConfig& model, const DataConfig& data,
                                const EvalConfig& eval) {
  const ClassBank classes = dataset_classes(data);
  const TrainConfig defaults;
  double sum = 0.0;
  int used = 0;
  for (int i = 0; i < eval.loss_pairs; ++i) {
    const auto scene = dataset_scene(data, classes, Split::kHeldOut, i);
    const auto pair = augment_scene(scene, make_rng(data.seed, {0xe2, static_cast<std::uint64_t>(i)})(), data.augment,
                                    data.render, data.prompts_per_view);
    try {
      const auto a = view_inputs(pair.first, defaults.max_prompts, false);
      const auto b = view_inputs(pair.second, defaults.max_prompts, false);
      sum += evaluate_pair<float>(a, b, params, model, defaults.loss, false).parts.cont;
      ++used;
    } catch (const DegenerateBatchError&) {
    }
  }
  if (used == 0) throw DegenerateDataError("no held-out pair had a positive");
  return sum / used;
}

TokenGap token_gap(const RenParams<float>& params, const RenConfig& model, const DataConfig& data,
                   const EvalConfig& eval) {
  const ClassBank classes = dataset_classes(data);
  TokenGap out;
  int scenes = 0;
  for (int s = 0; s < eval.gap_scenes; ++s) {
    const auto scene = dataset_scene(data, classes, Split::kHeldOut, s);
    TrainingView v;
    v.render = plain_render(data, scene, Split::kHeldOut, s);
    Rng rng = make_rng(data.seed, {0xe3, static_cast<std::uint64_t>(s)});
    sample_prompts(v, eval.gap_prompts, rng);
    if (v.prompts.size() < 2) continue;
    const MatrixF ren = forward(v.render.features, v.prompts, params, model).ren_tokens;
    double within = 0, cross = 0;
    std::size_t nw = 0, nc = 0;
    for (Eigen::Index i = 0; i < ren.rows(); ++i)
      for (Eigen::Index j = i + 1; j < ren.rows(); ++j) {
        const double c = row_cosine(ren, i, j);
        if (v.ids[std::size_t(i)] == v.ids[std::size_t(j)]) {
          within += c;
          ++nw;
        } else {
          cross += c;
          ++nc;
        }
      }
    if (nw == 0 || nc == 0) continue;
    out.within += within / double(nw);
    out.cross += cross / double(nc);
    ++scenes;
  }
  if (scenes == 0) throw DegenerateDataError("no held-out scene had both within- and cross-region pairs");
  out.within /= scenes;
  out.cross /= scenes;
  return out;
}

RecoveryReport evaluate_recovery(const RenParams<float>& params, const RenConfig& model, const DataConfig& data,
                                 const EvalConfig& eval) {
  const ClassBank classes = dataset_classes(data);
  RecoveryReport r;
  double pixel_sum = 0.0;
  for (int s = 0; s < eval.recovery_scenes; ++s) {
    const auto img = eval_image(data, classes, Split::kHeldOut, s, eval.superpixels);
    const auto tokens = forward(img.view.features, img.prompts, params, model);
    const auto agg = aggregate(tokens, eval.mu);

    // Discarded prompts become singletons of their own.
    std::vector<std::int64_t> group(img.prompts.size(), -1);
    for (std::size_t g = 0; g < agg.groups.size(); ++g)
      for (auto i : agg.groups[g]) group[i] = static_cast<std::int64_t>(g);
    std::int64_t next = static_cast<std::int64_t>(agg.groups.size());
    for (auto& g : group)
      if (g < 0) g = next++;

    const std::vector<std::int64_t> truth(img.prompt_region.begin(), img.prompt_region.end());
    const double a = ari(group, truth);
    r.per_scene_ari.push_back(a);
    r.ari += a;

    std::vector<std::int64_t> sp_group(static_cast<std::size_t>(img.superpixels.count));
    for (std::size_t i = 0; i < img.prompts.size(); ++i) sp_group[img.prompt_superpixel[i]] = group[i];
    std::vector<std::int64_t> pixel_pred, pixel_truth(img.owner.begin(), img.owner.end());
    pixel_pred.reserve(img.superpixels.labels.size());
    for (auto l : img.superpixels.labels) pixel_pred.push_back(sp_group[static_cast<std::size_t>(l)]);
    pixel_sum += ari(pixel_pred, pixel_truth);

    r.prompts += img.prompts.size();
    r.groups += static_cast<std::size_t>(next);
  }
  r.ari /= eval.recovery_scenes;
  r.pixel_ari = pixel_sum / eval.recovery_scenes;
  r.reduction = double(r.prompts) / double(r.groups);
  return r;
}

ProbeReport evaluate_probe(const RenParams<float>& params, const RenConfig& model, const DataConfig& data,
                           const EvalConfig& eval) {
  const ClassBank classes = dataset_classes(data);
  struct Encoded {
    MatrixF ren, patch;
  };
  auto encode = [&](const EvalImage& img) {
    Encoded e;
    e.ren = forward(img.view.features, img.prompts, params, model).ren_tokens;
    const auto& map = img.view.features;
    e.patch.resize(static_cast<Eigen::Index>(img.prompts.size()), map.data.cols());
    for (std::size_t i = 0; i < img.prompts.size(); ++i) {
      const auto& p = img.prompts[i];
      e.patch.row(Eigen::Index(i)) =
          map.data.row(Eigen::Index(map.patch_of_pixel(p.pixel_x(int(map.image_w)), p.pixel_y(int(map.image_h)))));
    }
    return e;
  };
  auto stack = [](const std::vector<MatrixF>& parts) {
    Eigen::Index rows = 0;
    for (const auto& p : parts) rows += p.rows();
    MatrixF out(rows, parts.front().cols());
    Eigen::Index at = 0;
    for (const auto& p : parts) {
      out.middleRows(at, p.rows()) = p;
      at += p.rows();
    }
    return out;
  };

  std::vector<MatrixF> ren_parts, patch_parts;
  std::vector<int> labels;
  for (int i = 0; i < data.n_scenes; ++i) {
    const auto img = eval_image(data, classes, Split::kTrain, i, eval.superpixels);
    auto e = encode(img);
    ren_parts.push_back(std::move(e.ren));
    patch_parts.push_back(std::move(e.patch));
    for (auto id : img.prompt_region) labels.push_back(img.scene.class_of(id));
  }
  ProbeConfig pc = eval.probe;
  pc.n_classes = data.n_classes;
  const auto ren_probe = train_probe(stack(ren_parts), labels, pc);
  const auto patch_probe = train_probe(stack(patch_parts), labels, pc);

  std::vector<int> gt, pred_ren, pred_patch;
  for (int s = 0; s < eval.probe_test_scenes; ++s) {
    const auto img = eval_image(data, classes, Split::kHeldOut, kProbeTestBase + s, eval.superpixels);
    const auto e = encode(img);
    const auto a = paint_superpixels(img.superpixels, img.prompt_superpixel, predict(ren_probe, e.ren));
    const auto b = paint_superpixels(img.superpixels, img.prompt_superpixel, predict(patch_probe, e.patch));
    pred_ren.insert(pred_ren.end(), a.begin(), a.end());
    pred_patch.insert(pred_patch.end(), b.begin(), b.end());
    for (auto id : img.owner) gt.push_back(img.scene.class_of(id));
  }
  ProbeReport r;
  r.miou_ren = miou(pred_ren, gt, data.n_classes);
  r.miou_patch = miou(pred_patch, gt, data.n_classes);
  r.train_tokens = labels.size();
  return r;
}

RetrievalReport evaluate_retrieval(const RenParams<float>& params, const RenConfig& model, const DataConfig& data,
                                   const EvalConfig& eval) {
  const ClassBank classes = dataset_classes(data);
  std::vector<TokenSet> db, baseline_db;
  std::vector<std::set<int>> db_classes;
  for (int i = 0; i < eval.retrieval_database; ++i) {
    const auto img = eval_image(data, classes, Split::kHeldOut, kDatabaseBase + i, eval.superpixels);
    const auto agg = aggregate(forward(img.view.features, img.prompts, params, model), eval.mu);
    TokenSet t;
    t.prompts = agg.representative_prompts;
    t.ren_tokens = agg.pooled_ren;
    t.aligned_tokens = agg.pooled_aligned;
    db.push_back(std::move(t));

    TokenSet b;
    b.prompts = {PointPrompt{0.5f, 0.5f}};
    b.aligned_tokens = mean_rows(img.view.features.data);
    b.ren_tokens = b.aligned_tokens;
    baseline_db.push_back(std::move(b));
    db_classes.push_back(visible_classes(img.scene, img.owner));
  }

  std::vector<std::vector<std::uint32_t>> rank_ren, rank_base, relevant;
  for (int q = 0; q < eval.retrieval_queries; ++q) {
    const int index = kQueryBase + q;
    const auto scene = dataset_scene(data, classes, Split::kHeldOut, index);
    const auto view = plain_render(data, scene, Split::kHeldOut, index);
    const auto owner = ownership(scene);

    std::vector<RegionId> foreground;
    for (RegionId id = 1; id < RegionId(scene.region_count()); ++id)
      if (view.masks[std::size_t(id)].area() > 0) foreground.push_back(id);
    if (foreground.empty()) throw GenerationError("query scene has no visible foreground region");
    const RegionId id = foreground[std::size_t(q) % foreground.size()];

    std::vector<std::size_t> pixels;
    for (std::size_t p = 0; p < owner.size(); ++p)
      if (owner[p] == id) pixels.push_back(p);
    Rng rng = make_rng(data.seed, {0xe4, static_cast<std::uint64_t>(q)});
    std::vector<PointPrompt> prompts;
    for (int k = 0; k < eval.query_prompts; ++k) {
      const std::size_t p = pixels[rng() % pixels.size()];
      prompts.push_back({(float(p % std::size_t(scene.canvas_w)) + 0.5f) / float(scene.canvas_w),
                         (float(p / std::size_t(scene.canvas_w)) + 0.5f) / float(scene.canvas_h)});
    }
    const RowVector<float> query = mean_rows(forward(view.features, prompts, params, model).aligned_tokens);

    const RowVector<float> cells = rasterize_to_patches(view.features, view.masks[std::size_t(id)]);
    RowVector<float> base_query = RowVector<float>::Zero(view.features.data.cols());
    float count = 0;
    for (Eigen::Index p = 0; p < cells.size(); ++p)
      if (cells[p] > 0) {
        base_query += view.features.data.row(p);
        ++count;
      }
    if (count == 0) {
      // Region too thin to own a patch center: take the patch under each prompt.
      for (const auto& pr : prompts)
        base_query += view.features.data.row(Eigen::Index(
            view.features.patch_of_pixel(pr.pixel_x(scene.canvas_w), pr.pixel_y(scene.canvas_h))));
      count = float(prompts.size());
    }
    base_query /= count;

    const int cls = scene.class_of(id);
    std::vector<std::uint32_t> rel;
    for (std::size_t i = 0; i < db_classes.size(); ++i)
      if (db_classes[i].count(cls)) rel.push_back(static_cast<std::uint32_t>(i));
    relevant.push_back(std::move(rel));
    rank_ren.push_back(retrieve(query, db).order);
    rank_base.push_back(retrieve(base_query, baseline_db).order);
  }
  const auto a = map_mrp(rank_ren, relevant, eval.mrp_k);
  const auto b = map_mrp(rank_base, relevant, eval.mrp_k);
  return {a.map, a.mrp, b.map, b.mrp};
}

nlohmann::json to_json(const TokenGap& g) {
  return {{"within", g.within}, {"cross", g.cross}, {"gap", g.gap()}};
}

nlohmann::json to_json(const RecoveryReport& r) {
  return {{"ari", r.ari},         {"pixel_ari", r.pixel_ari}, {"reduction", r.reduction},
          {"prompts", r.prompts}, {"groups", r.groups},       {"per_scene_ari", r.per_scene_ari}};
}

nlohmann::json to_json(const ProbeReport& r) {
  return {{"miou_ren", r.miou_ren}, {"miou_patch", r.miou_patch}, {"train_tokens", r.train_tokens}};
}

nlohmann::json to_json(const RetrievalReport& r) {
  return {{"map", r.map},
          {"mrp", r.mrp},
          {"baseline_map", r.baseline_map},
          {"baseline_mrp", r.baseline_mrp}};
}

}  // namespace ren
