#include "ren/losses.hpp"

#include <cmath>
#include <limits>

namespace ren {

namespace {

template <class T>
Matrix<T> normalized_rows(const Matrix<T>& x, Matrix<T>& norms, const char* what) {
  norms.resize(x.rows(), 1);
  Matrix<T> u(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const T nrm = x.row(i).norm();
    if (!(nrm > T(0)) || !std::isfinite(nrm)) throw NumericsError(std::string(what) + " row " + std::to_string(i) + " has zero or non-finite norm");
    norms(i, 0) = nrm;
    u.row(i) = x.row(i) / nrm;
  }
  return u;
}

// Gradient w.r.t. x of a function of u = x / |x| given dL/du.
template <class T>
Matrix<T> through_normalization(const Matrix<T>& u, const Matrix<T>& norms, const Matrix<T>& du) {
  Matrix<T> dx(u.rows(), u.cols());
  for (Eigen::Index i = 0; i < u.rows(); ++i) {
    const T radial = u.row(i).dot(du.row(i));
    dx.row(i) = (du.row(i) - radial * u.row(i)) / norms(i, 0);
  }
  return dx;
}

}  // namespace

template <class T>
LossAndGrad<T> info_nce_loss(const Matrix<T>& tokens, const std::vector<RegionId>& ids, T tau) {
  const Eigen::Index n = tokens.rows();
  if (n < 2) throw ValidationError("InfoNCE needs at least two tokens");
  if (static_cast<std::size_t>(n) != ids.size()) throw ValidationError("InfoNCE: one id per token required");
  if (!(tau > T(0))) throw ConfigError("temperature must be positive");

  Matrix<T> norms;
  const Matrix<T> u = normalized_rows(tokens, norms, "token");
  const Matrix<T> logits = (u * u.transpose()) / tau;

  std::vector<Eigen::Index> anchors;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (ids[static_cast<std::size_t>(i)] == kNoRegion) continue;
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i && ids[static_cast<std::size_t>(j)] == ids[static_cast<std::size_t>(i)]) {
        anchors.push_back(i);
        break;
      }
  }
  if (anchors.empty()) throw DegenerateBatchError("no anchor has a positive");

  const T inv_anchors = T(1) / T(anchors.size());
  T loss = 0;
  Matrix<T> g = Matrix<T>::Zero(n, n);  // dL/dlogit
  std::vector<T> w_all(static_cast<std::size_t>(n)), w_pos(static_cast<std::size_t>(n));
  for (Eigen::Index i : anchors) {
    const RegionId id = ids[static_cast<std::size_t>(i)];
    T max_all = -std::numeric_limits<T>::infinity();
    for (Eigen::Index k = 0; k < n; ++k)
      if (k != i) max_all = std::max(max_all, logits(i, k));
    T sum_all = 0, sum_pos = 0;
    for (Eigen::Index k = 0; k < n; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      w_all[ku] = w_pos[ku] = 0;
      if (k == i) continue;
      w_all[ku] = std::exp(logits(i, k) - max_all);
      sum_all += w_all[ku];
      if (ids[ku] == id) {
        w_pos[ku] = w_all[ku];
        sum_pos += w_pos[ku];
      }
    }
    loss += (std::log(sum_all) - std::log(sum_pos)) * inv_anchors;
    for (Eigen::Index k = 0; k < n; ++k) {
      const auto ku = static_cast<std::size_t>(k);
      if (k == i) continue;
      g(i, k) += inv_anchors * (w_all[ku] / sum_all - w_pos[ku] / sum_pos);
    }
  }
  // logits = U U^T / tau, so dU = (G + G^T) U / tau.
  const Matrix<T> du = ((g + g.transpose()) * u) / tau;
  return {loss, through_normalization(u, norms, du)};
}

template <class T>
LossAndGrad<T> feature_similarity_loss(const Matrix<T>& aligned, const Matrix<T>& targets) {
  if (aligned.rows() != targets.rows() || aligned.cols() != targets.cols())
    throw ValidationError("feature similarity: aligned/target shapes differ");
  if (aligned.rows() < 1) throw ValidationError("feature similarity needs at least one row");
  Matrix<T> a_norm, t_norm;
  const Matrix<T> a = normalized_rows(aligned, a_norm, "aligned token");
  const Matrix<T> t = normalized_rows(targets, t_norm, "target token");
  const T inv_n = T(1) / T(aligned.rows());
  T loss = 0;
  Matrix<T> du(aligned.rows(), aligned.cols());
  for (Eigen::Index i = 0; i < aligned.rows(); ++i) {
    loss += (T(1) - a.row(i).dot(t.row(i))) * inv_n;
    du.row(i) = -inv_n * t.row(i);
  }
  return {loss, through_normalization(a, a_norm, du)};
}

RowVector<float> rasterize_to_patches(const PatchFeatureMap& geometry, const RegionMask& mask) {
  if (mask.width() != static_cast<int>(geometry.image_w) || mask.height() != static_cast<int>(geometry.image_h))
    throw ValidationError("mask canvas differs from feature map image size");
  RowVector<float> out(static_cast<Eigen::Index>(geometry.patch_count()));
  for (std::uint32_t r = 0; r < geometry.h_patches; ++r)
    for (std::uint32_t c = 0; c < geometry.w_patches; ++c)
      out[r * geometry.w_patches + c] = mask.at(geometry.center_x(c), geometry.center_y(r)) ? 1.0f : 0.0f;
  return out;
}

MatrixF target_tokens(const PatchFeatureMap& map, const std::vector<RegionMask>& masks, const std::vector<RegionId>& ids) {
  MatrixF out(static_cast<Eigen::Index>(ids.size()), map.dim);
  std::vector<RowVector<float>> cache(masks.size());
  std::vector<bool> have(masks.size(), false);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const RegionId id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= masks.size())
      throw ValidationError("prompt " + std::to_string(i) + " has no region mask");
    const auto k = static_cast<std::size_t>(id);
    if (!have[k]) {
      const RowVector<float> member = rasterize_to_patches(map, masks[k]);
      const double count = member.sum();
      if (count == 0) throw EmptyMaskError("mask " + std::to_string(id) + " covers no patch center");
      // Ascending patch order keeps the float sum deterministic.
      RowVector<double> acc = RowVector<double>::Zero(map.dim);
      for (Eigen::Index p = 0; p < member.size(); ++p)
        if (member[p] != 0.0f) acc += map.data.row(p).cast<double>();
      cache[k] = (acc / count).cast<float>();
      have[k] = true;
    }
    out.row(static_cast<Eigen::Index>(i)) = cache[k];
  }
  return out;
}

template <class T>
LossAndGrad<T> attention_supervision_loss(const Matrix<T>& attention, const Matrix<T>& targets) {
  const Eigen::Index n = attention.rows();
  const Eigen::Index m = attention.cols();
  if (targets.rows() != n || targets.cols() != m) throw ValidationError("attention/target shapes differ");
  const T eps = T(kAttnProbEps);
  const T inv_n = T(1) / T(n);
  T loss = 0;
  Matrix<T> grad = Matrix<T>::Zero(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T t_sum = targets.row(i).sum();
    if (t_sum <= T(0)) throw EmptyMaskError("attention target row " + std::to_string(i) + " is empty");
    Eigen::Index arg = 0;
    const T mx = attention.row(i).maxCoeff(&arg);
    if (!(mx > T(0))) throw NumericsError("attention row has no positive weight");
    RowVector<T> p = attention.row(i) / mx;
    T bce = 0, inter = 0;
    RowVector<T> dp(m);
    for (Eigen::Index j = 0; j < m; ++j) {
      const T t = targets(i, j);
      const T pc = std::clamp(p[j], eps, T(1) - eps);
      bce -= (t * std::log(pc) + (T(1) - t) * std::log(T(1) - pc)) / T(m);
      const bool active = p[j] > eps && p[j] < T(1) - eps;
      dp[j] = active ? -(t / pc - (T(1) - t) / (T(1) - pc)) / T(m) : T(0);
      inter += p[j] * t;
    }
    const T num = T(2) * inter + T(1);
    const T den = p.sum() + t_sum + T(1);
    const T dice = T(1) - num / den;
    for (Eigen::Index j = 0; j < m; ++j) dp[j] += -(T(2) * targets(i, j) * den - num) / (den * den);
    loss += (bce + dice) * inv_n;
    // p_j = a_j / a_arg
    const T weighted = dp.dot(p);
    RowVector<T> da = dp / mx;
    da[arg] -= weighted / mx;
    grad.row(i) = da * inv_n;
  }
  return {loss, grad};
}

void LossWeights::validate() const {
  if (!(tau > 0)) throw ConfigError("tau must be positive");
  if (lambda_cont < 0 || lambda_feat < 0 || lambda_attn < 0) throw ConfigError("loss weights must be non-negative");
}

double total_loss(const LossParts& parts, const LossWeights& w) {
  double total = w.lambda_cont * parts.cont + w.lambda_feat * parts.feat;
  if (w.lambda_attn > 0) total += w.lambda_attn * parts.attn;
  return total;
}

template LossAndGrad<float> info_nce_loss<float>(const Matrix<float>&, const std::vector<RegionId>&, float);
template LossAndGrad<double> info_nce_loss<double>(const Matrix<double>&, const std::vector<RegionId>&, double);
template LossAndGrad<float> feature_similarity_loss<float>(const Matrix<float>&, const Matrix<float>&);
template LossAndGrad<double> feature_similarity_loss<double>(const Matrix<double>&, const Matrix<double>&);
template LossAndGrad<float> attention_supervision_loss<float>(const Matrix<float>&, const Matrix<float>&);
template LossAndGrad<double> attention_supervision_loss<double>(const Matrix<double>&, const Matrix<double>&);

}  // namespace ren
