#include "ren/extension.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "ren/errors.hpp"
#include "ren/rng.hpp"

namespace ren {

namespace {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowD = Eigen::RowVectorXd;

void check_inputs(const MatrixF& features, const PoolingHead& head) {
  head.validate();
  if (features.cols() != static_cast<Eigen::Index>(head.dim()))
    throw ValidationError("feature dim differs from pooling head dim");
  if (!features.allFinite()) throw ValidationError("non-finite target features");
}

// Per-head scaled logits of the query against every row of `keys` (H x rows).
MatD head_logits(const RowD& q, const MatD& keys, Eigen::Index heads) {
  const Eigen::Index hd = q.size() / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  MatD out(heads, keys.rows());
  for (Eigen::Index h = 0; h < heads; ++h)
    for (Eigen::Index j = 0; j < keys.rows(); ++j)
      out(h, j) = q.segment(h * hd, hd).dot(keys.row(j).segment(h * hd, hd)) * scale;
  return out;
}

}  // namespace

std::vector<std::uint32_t> patch_membership(const RegionMask& mask, const PatchFeatureMap& grid) {
  if (mask.width() != static_cast<int>(grid.image_w) || mask.height() != static_cast<int>(grid.image_h))
    throw ValidationError("mask size differs from the target image size");
  std::vector<char> hit(grid.patch_count(), 0);
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x)
      if (mask.at(x, y)) hit[grid.patch_of_pixel(x, y)] = 1;
  std::vector<std::uint32_t> out;
  for (std::size_t p = 0; p < hit.size(); ++p)
    if (hit[p]) out.push_back(static_cast<std::uint32_t>(p));
  if (out.empty()) throw EmptyRegionError("mask overlaps no patch");
  return out;
}

RowVector<float> masked_attention_pool(const MatrixF& features, const PoolingHead& head,
                                       const std::vector<std::uint32_t>& members) {
  check_inputs(features, head);
  if (members.empty()) throw EmptyRegionError("no member patches");
  const auto n = static_cast<Eigen::Index>(members.size());
  const Eigen::Index d = features.cols();
  MatD f(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto j = members[static_cast<std::size_t>(i)];
    if (j >= features.rows()) throw ValidationError("member patch out of range");
    f.row(i) = features.row(j).cast<double>();
  }
  const RowD q = head.query.cast<double>() * head.w_q.cast<double>().transpose();
  const MatD k = f * head.w_k.cast<double>().transpose();
  const MatD v = f * head.w_v.cast<double>().transpose();
  const auto heads = static_cast<Eigen::Index>(head.n_heads);
  const Eigen::Index hd = d / heads;
  const MatD logits = head_logits(q, k, heads);

  RowD o(d);
  for (Eigen::Index h = 0; h < heads; ++h) {
    const double mx = logits.row(h).maxCoeff();
    RowD w = (logits.row(h).array() - mx).exp();
    w /= w.sum();
    o.segment(h * hd, hd) = w * v.middleCols(h * hd, hd);
  }
  return (o * head.w_o.cast<double>().transpose()).cast<float>();
}

RowVector<float> global_pool(const MatrixF& features, const PoolingHead& head) {
  std::vector<std::uint32_t> all(static_cast<std::size_t>(features.rows()));
  std::iota(all.begin(), all.end(), 0u);
  return masked_attention_pool(features, head, all);
}

MatrixF masked_attention_pool_batched(const MatrixF& features, const PoolingHead& head,
                                      const std::vector<std::vector<std::uint32_t>>& members) {
  check_inputs(features, head);
  const Eigen::Index m = features.rows(), d = features.cols();
  const auto r = static_cast<Eigen::Index>(members.size());
  const MatD f = features.cast<double>();
  const RowD q = head.query.cast<double>() * head.w_q.cast<double>().transpose();
  const MatD k = f * head.w_k.cast<double>().transpose();
  const MatD v = f * head.w_v.cast<double>().transpose();
  const auto heads = static_cast<Eigen::Index>(head.n_heads);
  const Eigen::Index hd = d / heads;
  const MatD logits = head_logits(q, k, heads);

  // Additive mask: 0 for members, -inf elsewhere.
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  MatD mask = MatD::Constant(r, m, kNegInf);
  for (Eigen::Index i = 0; i < r; ++i) {
    const auto& mem = members[static_cast<std::size_t>(i)];
    if (mem.empty()) throw EmptyRegionError("region " + std::to_string(i) + " has no member patches");
    for (auto j : mem) {
      if (j >= m) throw ValidationError("member patch out of range");
      mask(i, j) = 0.0;
    }
  }

  MatD o(r, d);
  for (Eigen::Index h = 0; h < heads; ++h) {
    MatD a = mask.rowwise() + logits.row(h);
    const Eigen::VectorXd mx = a.rowwise().maxCoeff();
    a = (a.colwise() - mx).array().exp();
    a.array().colwise() /= a.rowwise().sum().array();
    o.middleCols(h * hd, hd) = a * v.middleCols(h * hd, hd);
  }
  return (o * head.w_o.cast<double>().transpose()).cast<float>();
}

TokenSet extend(const PatchFeatureMap& target, const PoolingHead& head, const SuperpixelMap& superpixels,
                const AggregationResult& aggregation, const std::vector<std::uint32_t>& prompt_superpixel) {
  target.validate();
  const auto masks = masks_from_groups(superpixels, aggregation, prompt_superpixel);
  std::vector<std::vector<std::uint32_t>> members;
  members.reserve(masks.size());
  for (const auto& mask : masks) members.push_back(patch_membership(mask, target));
  TokenSet out;
  out.prompts = aggregation.representative_prompts;
  out.ren_tokens = aggregation.pooled_ren;
  out.aligned_tokens = masked_attention_pool_batched(target.data, head, members);
  return out;
}

PoolingHead random_pooling_head(std::uint64_t seed, std::uint32_t dim, std::uint32_t n_heads) {
  if (dim == 0 || n_heads == 0 || dim % n_heads != 0) throw ConfigError("pooling head dim must be a positive multiple of n_heads");
  Rng rng = make_rng(seed, {0x9e4d});
  PoolingHead h;
  h.n_heads = n_heads;
  h.query.resize(dim);
  for (Eigen::Index i = 0; i < h.query.size(); ++i) h.query[i] = static_cast<float>(gaussian(rng));
  const double bound = 1.0 / std::sqrt(double(dim));
  for (MatrixF* w : {&h.w_q, &h.w_k, &h.w_v, &h.w_o}) {
    w->resize(dim, dim);
    for (Eigen::Index i = 0; i < w->size(); ++i) w->data()[i] = static_cast<float>(uniform(rng, -bound, bound));
  }
  return h;
}

}  // namespace ren
