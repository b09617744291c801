#include "ren/backward.hpp"

#include <chrono>
#include <cmath>
#include <numbers>

#include "ren/rng.hpp"

namespace ren {

namespace {

template <class T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + x * pdf;
}

// y = gain * hat + bias, hat = (x - mean) * rstd.
template <class T>
Matrix<T> layer_norm_backward(const Matrix<T>& dy, const Matrix<T>& hat, const Matrix<T>& rstd, const Matrix<T>& gain,
                              Matrix<T>& d_gain, Matrix<T>& d_bias) {
  d_gain += dy.cwiseProduct(hat).colwise().sum();
  d_bias += dy.colwise().sum();
  Matrix<T> dx(dy.rows(), dy.cols());
  const T inv_d = T(1) / T(dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const RowVector<T> dhat = dy.row(i).cwiseProduct(gain);
    const T mean_dhat = dhat.sum() * inv_d;
    const T mean_dhat_hat = dhat.dot(hat.row(i)) * inv_d;
    dx.row(i) = rstd(i, 0) * (dhat.array() - mean_dhat - hat.row(i).array() * mean_dhat_hat).matrix();
  }
  return dx;
}

template <class T>
Matrix<T> block_backward(const BlockTrace<T>& t, const Matrix<T>& keys, const Matrix<T>& values, const BlockParams<T>& p,
                         const RenConfig& c, const Matrix<T>& d_out, const Matrix<T>* d_probs_avg, BlockParams<T>& g,
                         Matrix<T>& d_keys, Matrix<T>& d_values, Matrix<T>* d_addend) {
  const Eigen::Index dh = c.d_head();
  const T scale = T(1) / std::sqrt(T(dh));

  // out = mid + GELU(LN(mid) W1^T) W2^T
  g.ffn_out += d_out.transpose() * t.hidden;
  Matrix<T> d_pre = d_out * p.ffn_out;
  for (Eigen::Index i = 0; i < d_pre.size(); ++i) d_pre.data()[i] *= gelu_grad(t.hidden_pre.data()[i]);
  g.ffn_in += d_pre.transpose() * t.ln_ffn_out;
  const Matrix<T> d_ln_ffn = d_pre * p.ffn_in;
  Matrix<T> d_mid = d_out + layer_norm_backward(d_ln_ffn, t.ln_ffn_hat, t.ln_ffn_rstd, p.ln_ffn_gain, g.ln_ffn_gain, g.ln_ffn_bias);

  // mid = stream + context Wo^T
  g.out_proj += d_mid.transpose() * t.context;
  const Matrix<T> d_ctx = d_mid * p.out_proj;
  Matrix<T> d_queries(t.queries.rows(), t.queries.cols());
  for (std::uint32_t h = 0; h < c.n_heads; ++h) {
    const Eigen::Index off = h * dh;
    const Matrix<T>& a = t.probs[h];
    Matrix<T> d_a = d_ctx.middleCols(off, dh) * values.middleCols(off, dh).transpose();
    if (d_probs_avg) d_a += *d_probs_avg / T(c.n_heads);
    d_values.middleCols(off, dh) += a.transpose() * d_ctx.middleCols(off, dh);
    Matrix<T> d_s = a.cwiseProduct(d_a);
    const Matrix<T> row_dot = d_s.rowwise().sum();
    d_s -= a.cwiseProduct(row_dot.replicate(1, a.cols()));
    d_queries.middleCols(off, dh) = scale * (d_s * keys.middleCols(off, dh));
    d_keys.middleCols(off, dh) += scale * (d_s.transpose() * t.queries.middleCols(off, dh));
  }
  g.query_proj += d_queries.transpose() * t.ln_attn_out;
  const Matrix<T> d_ln_attn = d_queries * p.query_proj;
  const Matrix<T> d_attn_in =
      layer_norm_backward(d_ln_attn, t.ln_attn_hat, t.ln_attn_rstd, p.ln_attn_gain, g.ln_attn_gain, g.ln_attn_bias);
  if (d_addend) *d_addend += d_attn_in;
  return d_mid + d_attn_in;
}

}  // namespace

template <class T>
void backward(const ForwardTrace<T>& tr, const RenParams<T>& params, const RenConfig& c, const Matrix<T>& d_ren,
              const Matrix<T>* d_aligned, const Matrix<T>* d_final_attention, RenParams<T>& grads) {
  Matrix<T> d_stream = d_ren;
  if (d_aligned) {
    grads.align_proj += d_aligned->transpose() * tr.ren;
    d_stream += *d_aligned * params.align_proj;
  }
  Matrix<T> d_keys = Matrix<T>::Zero(tr.keys.rows(), tr.keys.cols());
  Matrix<T> d_values = Matrix<T>::Zero(tr.values.rows(), tr.values.cols());
  Matrix<T> d_prompt = Matrix<T>::Zero(tr.prompt_queries.rows(), tr.prompt_queries.cols());
  for (std::uint32_t b = c.n_blocks; b-- > 0;) {
    const Matrix<T>* d_attn = (b + 1 == c.n_blocks) ? d_final_attention : nullptr;
    d_stream = block_backward(tr.blocks[b], tr.keys, tr.values, params.blocks[b], c, d_stream, d_attn, grads.blocks[b],
                              d_keys, d_values, b == 0 ? nullptr : &d_prompt);
  }
  d_prompt += d_stream;
  grads.prompt_proj += d_prompt.transpose() * tr.embeddings;
  grads.key_proj += d_keys.transpose() * tr.features;
  grads.value_proj += d_values.transpose() * tr.features;
}

template <class T>
void check_gradients_finite(const RenParams<T>& grads) {
  grads.for_each([](const std::string& name, const Matrix<T>& m, bool) {
    if (!m.allFinite()) throw NumericsError("gradient of " + name + " is not finite");
  });
}

template <class T>
PairObjective<T> evaluate_pair(const ViewInputs<T>& first, const ViewInputs<T>& second, const RenParams<T>& params,
                               const RenConfig& config, const LossWeights& w, bool with_grads) {
  w.validate();
  const ViewInputs<T>* views[2] = {&first, &second};
  ForwardTrace<T> traces[2];
  for (int v = 0; v < 2; ++v) {
    const auto& in = *views[v];
    if (in.prompts.size() != in.ids.size()) throw ValidationError("one region id per prompt required");
    if (std::size_t{in.h_patches} * in.w_patches != static_cast<std::size_t>(in.features.rows()))
      throw ConfigError("view patch grid does not match its feature rows");
    traces[v] = forward_trace<T>(in.features, patch_position_embeddings<T>(in.h_patches, in.w_patches, config.d_model),
                                 embed_prompts<T>(in.prompts, config.d_model), params, config, Evaluation::kBatched);
  }
  const Eigen::Index n0 = traces[0].ren.rows();
  const Eigen::Index n1 = traces[1].ren.rows();

  Matrix<T> joint(n0 + n1, config.d_model);
  joint << traces[0].ren, traces[1].ren;
  std::vector<RegionId> joint_ids = first.ids;
  joint_ids.insert(joint_ids.end(), second.ids.begin(), second.ids.end());
  const auto cont = info_nce_loss<T>(joint, joint_ids, T(w.tau));

  PairObjective<T> out;
  out.parts.cont = double(cont.value);
  LossAndGrad<T> feat[2];
  LossAndGrad<T> attn[2];
  const bool use_attn = w.lambda_attn > 0;
  for (int v = 0; v < 2; ++v) {
    feat[v] = feature_similarity_loss<T>(traces[v].aligned, views[v]->targets);
    out.parts.feat += 0.5 * double(feat[v].value);
    if (use_attn) {
      attn[v] = attention_supervision_loss<T>(final_attention(traces[v]), views[v]->attention_targets);
      out.parts.attn += 0.5 * double(attn[v].value);
    }
  }
  out.total = total_loss(out.parts, w);
  if (!with_grads) return out;

  out.grads = params.zeros_like();
  for (int v = 0; v < 2; ++v) {
    const Eigen::Index off = v == 0 ? 0 : n0;
    const Eigen::Index n = v == 0 ? n0 : n1;
    const Matrix<T> d_ren = T(w.lambda_cont) * cont.grad.middleRows(off, n);
    const Matrix<T> d_aligned = T(0.5 * w.lambda_feat) * feat[v].grad;
    Matrix<T> d_attn;
    if (use_attn) d_attn = T(0.5 * w.lambda_attn) * attn[v].grad;
    backward<T>(traces[v], params, config, d_ren, &d_aligned, use_attn ? &d_attn : nullptr, out.grads);
  }
  check_gradients_finite(out.grads);
  return out;
}

GradCheckReport gradcheck(const ViewInputs<double>& first, const ViewInputs<double>& second,
                          const RenParams<double>& params, const RenConfig& config, const LossWeights& weights,
                          double epsilon, double abs_floor) {
  const auto start = std::chrono::steady_clock::now();
  const auto analytic = evaluate_pair<double>(first, second, params, config, weights, true);
  RenParams<double> probe = params;
  std::vector<std::pair<std::string, MatrixD*>> probe_tensors;
  probe.for_each([&](const std::string& name, MatrixD& m, bool) { probe_tensors.emplace_back(name, &m); });
  std::vector<const MatrixD*> grad_tensors;
  analytic.grads.for_each([&](const std::string&, const MatrixD& m, bool) { grad_tensors.push_back(&m); });

  GradCheckReport report;
  for (std::size_t t = 0; t < probe_tensors.size(); ++t) {
    auto& [name, tensor] = probe_tensors[t];
    const MatrixD& a = *grad_tensors[t];
    MatrixD numeric(tensor->rows(), tensor->cols());
    for (Eigen::Index i = 0; i < tensor->size(); ++i) {
      double& x = tensor->data()[i];
      const double saved = x;
      x = saved + epsilon;
      const double up = evaluate_pair<double>(first, second, probe, config, weights, false).total;
      x = saved - epsilon;
      const double down = evaluate_pair<double>(first, second, probe, config, weights, false).total;
      x = saved;
      numeric.data()[i] = (up - down) / (2 * epsilon);
    }
    TensorGradCheck tc;
    tc.name = name;
    tc.elements = static_cast<std::size_t>(tensor->size());
    const double scale = std::max(a.norm(), numeric.norm());
    tc.rel_error = scale > 0 ? (a - numeric).norm() / scale : 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
      const double av = a.data()[i], nv = numeric.data()[i];
      const double abs_err = std::abs(av - nv);
      tc.max_abs_error = std::max(tc.max_abs_error, abs_err);
      tc.max_elem_rel_error = std::max(tc.max_elem_rel_error, abs_err / std::max({std::abs(av), std::abs(nv), abs_floor}));
    }
    report.max_rel_error = std::max(report.max_rel_error, tc.rel_error);
    report.max_elem_rel_error = std::max(report.max_elem_rel_error, tc.max_elem_rel_error);
    report.tensors.push_back(std::move(tc));
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

GradCheckProblem make_gradcheck_problem(std::uint64_t seed, const RenConfig& config, int patches, int prompts,
                                        bool with_attention_targets, double perturbation) {
  GradCheckProblem prob;
  prob.config = config;
  prob.params = init_params(seed, config).cast<double>();
  Rng rng = make_rng(seed, {0x9c});
  prob.params.for_each([&](const std::string& name, MatrixD& m, bool) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double noise = uniform(rng, -perturbation, perturbation);
      // Gains stay near 1 so LayerNorm is well conditioned.
      m.data()[i] = name.ends_with(".gain") ? 1.0 + noise : (m.data()[i] + noise);
    }
  });
  auto make_view = [&](int view) {
    ViewInputs<double> v;
    // Most square grid holding `patches` cells.
    int gh = static_cast<int>(std::sqrt(static_cast<double>(patches)));
    while (patches % gh != 0) --gh;
    v.h_patches = static_cast<std::uint32_t>(gh);
    v.w_patches = static_cast<std::uint32_t>(patches / gh);
    v.features.resize(patches, config.encoder_dim);
    for (Eigen::Index i = 0; i < v.features.size(); ++i) v.features.data()[i] = uniform(rng, -1, 1);
    for (int i = 0; i < prompts; ++i) {
      v.prompts.push_back({static_cast<float>(uniform(rng, 0.05, 0.95)), static_cast<float>(uniform(rng, 0.05, 0.95))});
      // Ids alternate so each anchor finds its positive in the other view.
      v.ids.push_back(static_cast<RegionId>(i % 2));
    }
    v.targets.resize(prompts, config.encoder_dim);
    for (Eigen::Index i = 0; i < v.targets.size(); ++i) v.targets.data()[i] = uniform(rng, -1, 1);
    if (with_attention_targets) {
      v.attention_targets = MatrixD::Zero(prompts, patches);
      for (int i = 0; i < prompts; ++i)
        for (int j = 0; j < patches; ++j) v.attention_targets(i, j) = ((i + j + view) % 2 == 0) ? 1.0 : 0.0;
    }
    return v;
  };
  prob.first = make_view(0);
  prob.second = make_view(1);
  return prob;
}

#define REN_INSTANTIATE(T)                                                                                        \
  template void backward<T>(const ForwardTrace<T>&, const RenParams<T>&, const RenConfig&, const Matrix<T>&,      \
                            const Matrix<T>*, const Matrix<T>*, RenParams<T>&);                                   \
  template void check_gradients_finite<T>(const RenParams<T>&);                                                   \
  template PairObjective<T> evaluate_pair<T>(const ViewInputs<T>&, const ViewInputs<T>&, const RenParams<T>&,     \
                                             const RenConfig&, const LossWeights&, bool);

REN_INSTANTIATE(float)
REN_INSTANTIATE(double)

#undef REN_INSTANTIATE

}  // namespace ren
