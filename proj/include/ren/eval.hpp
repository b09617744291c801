#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <json.hpp>

#include "ren/model.hpp"
#include "ren/prompting.hpp"
#include "ren/types.hpp"

namespace ren {

// ---- linear probe ----

struct ProbeModel {
  MatrixF w;              // classes x token_dim
  RowVector<float> b;     // classes

  std::size_t classes() const { return static_cast<std::size_t>(w.rows()); }
};

struct ProbeConfig {
  int epochs = 300;
  double lr = 0.5;
  double weight_decay = 1e-4;
  int n_classes = 0;  // 0: max label + 1
};

/// Mean softmax cross-entropy plus 0.5 * weight_decay * ||W||^2, and its
/// gradient (w first, row-major, then b) when `grad` is non-null. Computed in
/// double on the given (already standardized) inputs.
double probe_objective(const Eigen::MatrixXd& x, const std::vector<int>& labels, const Eigen::MatrixXd& w,
                       const Eigen::VectorXd& b, double weight_decay, std::vector<double>* grad);

/// Multinomial logistic regression by full-batch gradient descent from zero
/// on per-dimension standardized tokens; the standardization is folded back
/// into W and b. Deterministic. Throws DegenerateDataError with fewer than
/// two classes present.
ProbeModel train_probe(const MatrixF& tokens, const std::vector<int>& labels, const ProbeConfig& config = {});

std::vector<int> predict(const ProbeModel& probe, const MatrixF& tokens);

/// Label image (row-major) painting each prompt's label over its superpixel.
std::vector<int> paint_superpixels(const SuperpixelMap& map, const std::vector<std::uint32_t>& prompt_superpixel,
                                   const std::vector<int>& labels);

/// Label image for a G x G grid: every pixel takes the label of the prompt
/// whose grid cell contains it.
std::vector<int> paint_grid(int g, int width, int height, const std::vector<int>& labels);

/// Mean over classes present in either image of intersection / union.
/// Negative labels are ignored (void).
double miou(const std::vector<int>& pred, const std::vector<int>& gt, int n_classes);

// ---- retrieval ----

struct Ranking {
  std::vector<std::uint32_t> order;  // image ids, best first
  std::vector<double> scores;        // score of order[i]
};

/// Image score = max cosine between the query and the image's tokens
/// (aligned tokens unless use_aligned is false). Ties go to the lower id.
Ranking retrieve(const RowVector<float>& query, const std::vector<TokenSet>& database, bool use_aligned = true);

struct RetrievalScores {
  double map = 0.0;
  double mrp = 0.0;  // mean over queries of hits in top K / min(K, #relevant)
};

/// Average precision of one ranking against a relevant-id set.
double average_precision(const std::vector<std::uint32_t>& order, const std::vector<std::uint32_t>& relevant);

RetrievalScores map_mrp(const std::vector<std::vector<std::uint32_t>>& rankings,
                        const std::vector<std::vector<std::uint32_t>>& relevant, std::size_t k);

// ---- partitions ----

/// Adjusted Rand index (pair-counting closed form). Two single-cluster or
/// two all-singleton partitions of the same set score 1.
double ari(const std::vector<std::int64_t>& predicted, const std::vector<std::int64_t>& truth);

// ---- benchmark ----

struct BenchConfig {
  int runs = 20;
  int warmups = 3;
  bool with_aggregation = true;
  double mu = 0.975;
  std::uint64_t seed = 0;
};

struct BenchReport {
  std::size_t prompts = 0;
  std::size_t runs = 0;
  double mean_s = 0, std_s = 0;          // forward only
  double mean_agg_s = 0, std_agg_s = 0;  // forward + aggregation
  double tokens_per_s = 0;
  std::size_t buffer_bytes = 0;          // analytic peak transient buffers
  std::optional<std::int64_t> rss_delta_bytes;
  std::optional<std::string> error;      // set when the pass failed (e.g. out of memory)
};

/// Peak transient bytes of one forward pass: the largest per-block working
/// set (queries, projections, one head's score matrix per prompt row batch,
/// FFN hidden) plus the outputs.
std::size_t forward_buffer_bytes(const RenConfig& config, std::size_t n_prompts, std::size_t n_patches);

/// Times forward (and forward + aggregation) over `runs` measured passes after
/// `warmups`. Square counts use a grid, others seeded uniform prompts.
BenchReport bench_one(const RenParams<float>& params, const RenConfig& config, const PatchFeatureMap& features,
                      std::size_t prompts, const BenchConfig& bench);

/// Least-squares line through (x, y) and its coefficient of determination.
struct LinearFit {
  double slope = 0, intercept = 0, r2 = 0;
};
LinearFit linear_fit(const std::vector<double>& x, const std::vector<double>& y);

nlohmann::json bench_to_json(const BenchReport& r);

}  // namespace ren
