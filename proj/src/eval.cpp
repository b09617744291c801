#include "ren/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <string>

#include "ren/aggregation.hpp"
#include "ren/errors.hpp"
#include "ren/rng.hpp"

namespace ren {

// ---- linear probe ----

double probe_objective(const Eigen::MatrixXd& x, const std::vector<int>& labels, const Eigen::MatrixXd& w,
                       const Eigen::VectorXd& b, double weight_decay, std::vector<double>* grad) {
  const Eigen::Index n = x.rows(), c = w.rows(), d = w.cols();
  if (static_cast<std::size_t>(n) != labels.size() || x.cols() != d || b.size() != c)
    throw ValidationError("probe shapes disagree");
  Eigen::MatrixXd logits = x * w.transpose();
  logits.rowwise() += b.transpose();
  double loss = 0;
  Eigen::MatrixXd dlogits(n, c);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mx = logits.row(i).maxCoeff();
    Eigen::RowVectorXd e = (logits.row(i).array() - mx).exp();
    const double z = e.sum();
    const int y = labels[static_cast<std::size_t>(i)];
    loss += std::log(z) + mx - logits(i, y);
    dlogits.row(i) = e / z;
    dlogits(i, y) -= 1.0;
  }
  loss = loss / static_cast<double>(n) + 0.5 * weight_decay * w.squaredNorm();
  if (grad) {
    dlogits /= static_cast<double>(n);
    const Eigen::MatrixXd gw = dlogits.transpose() * x + weight_decay * w;
    const Eigen::VectorXd gb = dlogits.colwise().sum().transpose();
    grad->clear();
    for (Eigen::Index r = 0; r < c; ++r)
      for (Eigen::Index k = 0; k < d; ++k) grad->push_back(gw(r, k));
    for (Eigen::Index r = 0; r < c; ++r) grad->push_back(gb[r]);
  }
  return loss;
}

ProbeModel train_probe(const MatrixF& tokens, const std::vector<int>& labels, const ProbeConfig& config) {
  if (static_cast<std::size_t>(tokens.rows()) != labels.size() || labels.empty())
    throw ValidationError("probe needs one label per token");
  if (!tokens.allFinite()) throw ValidationError("non-finite probe inputs");
  if (config.epochs < 1 || !(config.lr > 0) || config.weight_decay < 0) throw ConfigError("bad probe config");
  int classes = config.n_classes;
  const int max_label = *std::max_element(labels.begin(), labels.end());
  if (*std::min_element(labels.begin(), labels.end()) < 0) throw ValidationError("negative probe label");
  if (classes == 0) classes = max_label + 1;
  if (max_label >= classes) throw ValidationError("probe label exceeds n_classes");
  if (std::set<int>(labels.begin(), labels.end()).size() < 2)
    throw DegenerateDataError("probe needs at least two classes present");

  const Eigen::Index n = tokens.rows(), d = tokens.cols();
  Eigen::MatrixXd x = tokens.cast<double>();
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  Eigen::RowVectorXd sd = (x.array().square().colwise().sum() / static_cast<double>(n)).sqrt();
  for (Eigen::Index k = 0; k < d; ++k)
    if (sd[k] < 1e-12) sd[k] = 1.0;
  x.array().rowwise() /= sd.array();

  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(classes, d);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(classes);
  std::vector<double> g;
  for (int e = 0; e < config.epochs; ++e) {
    probe_objective(x, labels, w, b, config.weight_decay, &g);
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < classes; ++r)
      for (Eigen::Index c = 0; c < d; ++c) w(r, c) -= config.lr * g[k++];
    for (Eigen::Index r = 0; r < classes; ++r) b[r] -= config.lr * g[k++];
  }
  if (!w.allFinite() || !b.allFinite()) throw NumericsError("probe diverged");

  // logits = ((t - mean) / sd) W^T + b = t (W / sd)^T + (b - (W / sd) mean^T)
  const Eigen::MatrixXd wf = w.array().rowwise() / sd.array();
  ProbeModel out;
  out.w = wf.cast<float>();
  out.b = (b - wf * mean.transpose()).transpose().cast<float>();
  return out;
}

std::vector<int> predict(const ProbeModel& probe, const MatrixF& tokens) {
  if (tokens.cols() != probe.w.cols()) throw ValidationError("token width differs from probe");
  std::vector<int> out(static_cast<std::size_t>(tokens.rows()));
  for (Eigen::Index i = 0; i < tokens.rows(); ++i) {
    const Eigen::RowVectorXd s =
        tokens.row(i).cast<double>() * probe.w.cast<double>().transpose() + probe.b.cast<double>();
    Eigen::Index best = 0;
    s.maxCoeff(&best);
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

std::vector<int> paint_superpixels(const SuperpixelMap& map, const std::vector<std::uint32_t>& prompt_superpixel,
                                   const std::vector<int>& labels) {
  if (prompt_superpixel.size() != labels.size()) throw ValidationError("one label per prompt expected");
  std::vector<int> by_sp(static_cast<std::size_t>(map.count), -1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (prompt_superpixel[i] >= by_sp.size()) throw ValidationError("superpixel index out of range");
    by_sp[prompt_superpixel[i]] = labels[i];
  }
  std::vector<int> out(map.labels.size());
  for (std::size_t p = 0; p < out.size(); ++p) out[p] = by_sp[static_cast<std::size_t>(map.labels[p])];
  return out;
}

std::vector<int> paint_grid(int g, int width, int height, const std::vector<int>& labels) {
  if (g < 1 || labels.size() != static_cast<std::size_t>(g) * g) throw ValidationError("grid labels must be G*G");
  std::vector<int> out(static_cast<std::size_t>(width) * height);
  for (int y = 0; y < height; ++y) {
    const auto row = static_cast<std::size_t>(std::int64_t(y) * g / height);
    for (int x = 0; x < width; ++x) {
      const auto col = static_cast<std::size_t>(std::int64_t(x) * g / width);
      out[static_cast<std::size_t>(y) * width + x] = labels[row * g + col];
    }
  }
  return out;
}

double miou(const std::vector<int>& pred, const std::vector<int>& gt, int n_classes) {
  if (pred.size() != gt.size()) throw ValidationError("mIoU images differ in size");
  std::vector<std::int64_t> inter(static_cast<std::size_t>(n_classes), 0), uni(static_cast<std::size_t>(n_classes), 0);
  for (std::size_t p = 0; p < gt.size(); ++p) {
    const int a = pred[p], b = gt[p];
    if (b < 0) continue;
    if (a >= n_classes || b >= n_classes) throw ValidationError("label exceeds n_classes");
    if (a == b) {
      ++inter[static_cast<std::size_t>(a)];
      ++uni[static_cast<std::size_t>(a)];
    } else {
      ++uni[static_cast<std::size_t>(b)];
      if (a >= 0) ++uni[static_cast<std::size_t>(a)];
    }
  }
  double sum = 0;
  int present = 0;
  for (int k = 0; k < n_classes; ++k)
    if (uni[static_cast<std::size_t>(k)] > 0) {
      sum += static_cast<double>(inter[static_cast<std::size_t>(k)]) / static_cast<double>(uni[static_cast<std::size_t>(k)]);
      ++present;
    }
  return present ? sum / present : 0.0;
}

// ---- retrieval ----

Ranking retrieve(const RowVector<float>& query, const std::vector<TokenSet>& database, bool use_aligned) {
  if (database.empty()) throw ValidationError("empty retrieval database");
  std::vector<double> score(database.size());
  for (std::size_t i = 0; i < database.size(); ++i) {
    const MatrixF& t = use_aligned ? database[i].aligned_tokens : database[i].ren_tokens;
    if (t.cols() != query.size()) throw ValidationError("query width differs from database tokens");
    if (t.rows() == 0) throw ValidationError("database image " + std::to_string(i) + " has no tokens");
    double best = -std::numeric_limits<double>::infinity();
    for (Eigen::Index r = 0; r < t.rows(); ++r) best = std::max(best, cosine(query, t.row(r)));
    score[i] = best;
  }
  Ranking out;
  out.order.resize(database.size());
  std::iota(out.order.begin(), out.order.end(), 0u);
  std::stable_sort(out.order.begin(), out.order.end(), [&](auto a, auto b) { return score[a] > score[b]; });
  for (auto i : out.order) out.scores.push_back(score[i]);
  return out;
}

double average_precision(const std::vector<std::uint32_t>& order, const std::vector<std::uint32_t>& relevant) {
  const std::set<std::uint32_t> rel(relevant.begin(), relevant.end());
  if (rel.empty()) throw ValidationError("query without relevant items");
  double sum = 0;
  std::size_t hits = 0;
  for (std::size_t r = 0; r < order.size(); ++r)
    if (rel.count(order[r])) sum += static_cast<double>(++hits) / static_cast<double>(r + 1);
  return sum / static_cast<double>(rel.size());
}

RetrievalScores map_mrp(const std::vector<std::vector<std::uint32_t>>& rankings,
                        const std::vector<std::vector<std::uint32_t>>& relevant, std::size_t k) {
  if (rankings.size() != relevant.size() || rankings.empty()) throw ValidationError("one relevant set per ranking");
  if (k < 1) throw ConfigError("K must be >= 1");
  RetrievalScores s;
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    s.map += average_precision(rankings[q], relevant[q]);
    const std::set<std::uint32_t> rel(relevant[q].begin(), relevant[q].end());
    std::size_t hits = 0;
    for (std::size_t r = 0; r < std::min(k, rankings[q].size()); ++r) hits += rel.count(rankings[q][r]);
    s.mrp += static_cast<double>(hits) / static_cast<double>(std::min(k, rel.size()));
  }
  s.map /= static_cast<double>(rankings.size());
  s.mrp /= static_cast<double>(rankings.size());
  return s;
}

// ---- partitions ----

double ari(const std::vector<std::int64_t>& predicted, const std::vector<std::int64_t>& truth) {
  if (predicted.size() != truth.size()) throw ValidationError("ARI partitions differ in size");
  const double n = static_cast<double>(truth.size());
  if (truth.size() < 2) return 1.0;
  std::map<std::pair<std::int64_t, std::int64_t>, double> cell;
  std::map<std::int64_t, double> a, b;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    cell[{predicted[i], truth[i]}] += 1;
    a[predicted[i]] += 1;
    b[truth[i]] += 1;
  }
  auto c2 = [](double v) { return v * (v - 1) / 2; };
  double index = 0, sa = 0, sb = 0;
  for (const auto& [k, v] : cell) index += c2(v);
  for (const auto& [k, v] : a) sa += c2(v);
  for (const auto& [k, v] : b) sb += c2(v);
  const double expected = sa * sb / c2(n);
  const double max_index = 0.5 * (sa + sb);
  if (max_index == expected) return 1.0;  // both trivial partitions of the same kind
  return (index - expected) / (max_index - expected);
}

// ---- benchmark ----

namespace {

std::optional<std::int64_t> status_kb(const char* key) {
  std::ifstream f("/proc/self/status");
  std::string line;
  const std::string k(key);
  while (std::getline(f, line))
    if (line.rfind(k, 0) == 0) return std::stoll(line.substr(k.size())) * 1024;
  return std::nullopt;
}

// Resets the kernel's peak-RSS counter; false where unsupported.
bool reset_peak_rss() {
  std::ofstream f("/proc/self/clear_refs");
  if (!f) return false;
  f << "5";
  return static_cast<bool>(f.flush());
}

std::vector<PointPrompt> bench_prompts(std::size_t count, std::uint64_t seed) {
  const auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(count))));
  if (g * g == count) return grid_prompts(static_cast<int>(g));
  Rng rng = make_rng(seed, {0xbe4c, count});
  std::uniform_real_distribution<float> u(0.0f, std::nextafter(1.0f, 0.0f));
  std::vector<PointPrompt> out(count);
  for (auto& p : out) p = {u(rng), u(rng)};
  return out;
}

std::pair<double, double> mean_sd(const std::vector<double>& v) {
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
}

}  // namespace

std::size_t forward_buffer_bytes(const RenConfig& c, std::size_t n, std::size_t m) {
  const std::size_t d = c.d_model, f = c.ffn_dim();
  // Per prompt row: stream, prompt queries, attention input, two LN buffers,
  // queries, context, mid, two FFN LN buffers, output, aligned (~12 d), FFN
  // pre/post activation (2 f), one head's scores (m), two LN rstd values.
  const std::size_t per_row = 12 * d + 2 * f + m + 2;
  return sizeof(float) * (n * per_row + 2 * m * d);
}

BenchReport bench_one(const RenParams<float>& params, const RenConfig& config, const PatchFeatureMap& features,
                      std::size_t prompts, const BenchConfig& bench) {
  if (prompts < 1) throw ConfigError("prompt count must be >= 1");
  if (bench.runs < 1 || bench.warmups < 0) throw ConfigError("bad bench runs/warmups");
  BenchReport r;
  r.prompts = prompts;
  r.buffer_bytes = forward_buffer_bytes(config, prompts, features.patch_count());
  const auto ps = bench_prompts(prompts, bench.seed);
  using clock = std::chrono::steady_clock;
  try {
    const bool peak_ok = reset_peak_rss();
    const auto before = status_kb("VmRSS:");
    for (int i = 0; i < bench.warmups; ++i) forward(features, ps, params, config);
    std::vector<double> fwd, agg;
    for (int i = 0; i < bench.runs; ++i) {
      const auto t0 = clock::now();
      const TokenSet t = forward(features, ps, params, config);
      const auto t1 = clock::now();
      fwd.push_back(std::chrono::duration<double>(t1 - t0).count());
      if (bench.with_aggregation) {
        aggregate(t, bench.mu);
        agg.push_back(std::chrono::duration<double>(clock::now() - t0).count());
      }
    }
    const auto peak = status_kb("VmHWM:");
    if (peak_ok && before && peak) r.rss_delta_bytes = *peak - *before;
    r.runs = fwd.size();
    std::tie(r.mean_s, r.std_s) = mean_sd(fwd);
    if (!agg.empty()) std::tie(r.mean_agg_s, r.std_agg_s) = mean_sd(agg);
    r.tokens_per_s = static_cast<double>(prompts) / r.mean_s;
  } catch (const std::bad_alloc&) {
    r.error = "out of memory";
  }
  return r;
}

LinearFit linear_fit(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ValidationError("linear fit needs >= 2 points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0) throw ValidationError("linear fit needs distinct x");
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double ss_res = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = y[i] - (f.intercept + f.slope * x[i]);
    ss_res += e * e;
  }
  f.r2 = syy == 0 ? 1.0 : 1.0 - ss_res / syy;
  return f;
}

nlohmann::json bench_to_json(const BenchReport& r) {
  nlohmann::json j = {{"prompts", r.prompts},
                      {"runs", r.runs},
                      {"mean_s", r.mean_s},
                      {"std_s", r.std_s},
                      {"mean_with_aggregation_s", r.mean_agg_s},
                      {"std_with_aggregation_s", r.std_agg_s},
                      {"tokens_per_s", r.tokens_per_s},
                      {"buffer_bytes", r.buffer_bytes},
                      {"rss_delta_bytes", r.rss_delta_bytes ? nlohmann::json(*r.rss_delta_bytes) : nlohmann::json(nullptr)}};
  if (r.error) j["error"] = *r.error;
  return j;
}

}  // namespace ren
