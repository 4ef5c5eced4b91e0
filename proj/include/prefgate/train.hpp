#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "prefgate/corpus.hpp"
#include "prefgate/error.hpp"
#include "prefgate/lm.hpp"
#include "prefgate/rng.hpp"
#include "prefgate/tokenizer.hpp"

namespace prefgate {

struct TrainConfig {
  double beta = 0.01;
  double learning_rate = 1e-3;
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double grad_clip_norm = 1.0;
  double delta = 0.0;  // sampling threshold, carried for config echoing

  void validate() const {
    if (!(beta > 0.0)) throw usage_error("TrainConfig: beta must be > 0");
    if (!(learning_rate > 0.0))
      throw usage_error("TrainConfig: learning_rate must be > 0");
    if (batch_size == 0)
      throw usage_error("TrainConfig: batch_size must be > 0");
    if (!(grad_clip_norm > 0.0))
      throw usage_error("TrainConfig: grad_clip_norm must be > 0");
    if (!(delta >= 0.0)) throw usage_error("TrainConfig: delta must be >= 0");
  }
};

// ---------------------------------------------------------------------------
// Reverse pass. Accumulates d(loss)/d(params) into `grads` given
// d(loss)/d(logits); hand-derived, verified against finite differences.
// ---------------------------------------------------------------------------

namespace detail {

// dW += X^T * dY
inline void accum_xt_dy(const Tensor& x, const Tensor& dy, Tensor& dw) {
  const std::size_t rows = x.rows(), inner = x.cols(), cols = dy.cols();
  for (std::size_t t = 0; t < rows; ++t) {
    const double* dyrow = &dy.data[t * cols];
    for (std::size_t i = 0; i < inner; ++i) {
      const double xv = x(t, i);
      if (xv == 0.0) continue;
      double* dwrow = &dw.data[i * cols];
      for (std::size_t c = 0; c < cols; ++c) dwrow[c] += xv * dyrow[c];
    }
  }
}

// dX = dY * W^T
inline void matmul_dy_wt(const Tensor& dy, const Tensor& w, Tensor& dx) {
  const std::size_t rows = dy.rows(), cols = dy.cols(), inner = w.rows();
  dx = Tensor::mat(rows, inner);
  for (std::size_t t = 0; t < rows; ++t) {
    const double* dyrow = &dy.data[t * cols];
    for (std::size_t i = 0; i < inner; ++i) {
      const double* wrow = &w.data[i * cols];
      double acc = 0.0;
      for (std::size_t c = 0; c < cols; ++c) acc += dyrow[c] * wrow[c];
      dx(t, i) = acc;
    }
  }
}

// Backward through y = gain * xhat + bias with xhat = (x - mean) * inv_std.
inline void ln_backward(const Tensor& dout, const Tensor& xhat,
                        const std::vector<double>& inv_std, const Tensor& gain,
                        Tensor& dgain, Tensor& dbias, Tensor& dx) {
  const std::size_t rows = dout.rows(), d = dout.cols();
  dx = Tensor::mat(rows, d);
  for (std::size_t r = 0; r < rows; ++r) {
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double dxh = dout(r, c) * gain[c];
      dgain[c] += dout(r, c) * xhat(r, c);
      dbias[c] += dout(r, c);
      dx(r, c) = dxh;  // stash dxhat
      m1 += dxh;
      m2 += dxh * xhat(r, c);
    }
    m1 /= static_cast<double>(d);
    m2 /= static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c)
      dx(r, c) = inv_std[r] * (dx(r, c) - m1 - xhat(r, c) * m2);
  }
}

}  // namespace detail

inline void backward(const ModelParams& p, const std::vector<TokenId>& ids,
                     const ForwardCache& cache, const Tensor& dlogits,
                     ModelParams& grads) {
  const ArchConfig& arch = p.arch;
  const std::size_t L = ids.size(), D = arch.d_model, H = arch.n_heads,
                    dh = arch.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  detail::accum_xt_dy(cache.y, dlogits, grads.w_out);
  Tensor dy;
  detail::matmul_dy_wt(dlogits, p.w_out, dy);

  Tensor dx;  // gradient flowing into the final layer-norm input
  detail::ln_backward(dy, cache.lnf_xhat, cache.lnf_inv_std, p.lnf_gain,
                      grads.lnf_gain, grads.lnf_bias, dx);

  for (std::size_t l = arch.n_layers; l-- > 0;) {
    const LayerParams& lp = p.layers[l];
    const LayerCache& lc = cache.layers[l];
    LayerParams& gl = grads.layers[l];

    // FFN block: x2 = x1 + relu(ln2(x1) W1 + b1) W2 + b2
    const Tensor& dx2 = dx;
    Tensor drelu;
    detail::accum_xt_dy(lc.relu, dx2, gl.w2);
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t c = 0; c < D; ++c) gl.b2[c] += dx2(t, c);
    detail::matmul_dy_wt(dx2, lp.w2, drelu);
    Tensor df1 = drelu;
    for (std::size_t i = 0; i < df1.size(); ++i)
      if (lc.f1[i] <= 0.0) df1[i] = 0.0;
    detail::accum_xt_dy(lc.ln2_out, df1, gl.w1);
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t f = 0; f < arch.ffn_hidden; ++f)
        gl.b1[f] += df1(t, f);
    Tensor dln2out;
    detail::matmul_dy_wt(df1, lp.w1, dln2out);
    Tensor dx1_ln;
    detail::ln_backward(dln2out, lc.ln2_xhat, lc.ln2_inv_std, lp.ln2_gain,
                        gl.ln2_gain, gl.ln2_bias, dx1_ln);
    Tensor dx1 = dx2;
    for (std::size_t i = 0; i < dx1.size(); ++i) dx1[i] += dx1_ln[i];

    // attention block: x1 = x + (heads(ln1(x))) Wo
    detail::accum_xt_dy(lc.head_concat, dx1, gl.wo);
    Tensor dho;
    detail::matmul_dy_wt(dx1, lp.wo, dho);

    Tensor dq = Tensor::mat(L, D), dk = Tensor::mat(L, D),
           dv = Tensor::mat(L, D);
    std::vector<double> datt_row(L);
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      const Tensor& att = lc.att[h];
      for (std::size_t t = 0; t < L; ++t) {
        double dot = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          double da = 0.0;
          for (std::size_t c = 0; c < dh; ++c) {
            da += dho(t, off + c) * lc.v(u, off + c);
            dv(u, off + c) += att(t, u) * dho(t, off + c);
          }
          datt_row[u] = da;
          dot += da * att(t, u);
        }
        for (std::size_t u = 0; u <= t; ++u) {
          const double ds = att(t, u) * (datt_row[u] - dot) * scale;
          for (std::size_t c = 0; c < dh; ++c) {
            dq(t, off + c) += ds * lc.k(u, off + c);
            dk(u, off + c) += ds * lc.q(t, off + c);
          }
        }
      }
    }

    detail::accum_xt_dy(lc.ln1_out, dq, gl.wq);
    detail::accum_xt_dy(lc.ln1_out, dk, gl.wk);
    detail::accum_xt_dy(lc.ln1_out, dv, gl.wv);
    Tensor dln1out, tmp;
    detail::matmul_dy_wt(dq, lp.wq, dln1out);
    detail::matmul_dy_wt(dk, lp.wk, tmp);
    for (std::size_t i = 0; i < dln1out.size(); ++i) dln1out[i] += tmp[i];
    detail::matmul_dy_wt(dv, lp.wv, tmp);
    for (std::size_t i = 0; i < dln1out.size(); ++i) dln1out[i] += tmp[i];

    Tensor dx_ln;
    detail::ln_backward(dln1out, lc.ln1_xhat, lc.ln1_inv_std, lp.ln1_gain,
                        gl.ln1_gain, gl.ln1_bias, dx_ln);
    for (std::size_t i = 0; i < dx1.size(); ++i) dx1[i] += dx_ln[i];
    dx = std::move(dx1);
  }

  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t c = 0; c < D; ++c) {
      grads.tok_emb(ids[t], c) += dx(t, c);
      grads.pos_emb(t, c) += dx(t, c);
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

namespace detail {

// softmax of one logits row, max-subtracted
inline void softmax_row(const Tensor& logits, std::size_t row,
                        std::vector<double>& probs) {
  const std::size_t v = logits.cols();
  const double* l = &logits.data[row * v];
  probs.resize(v);
  double mx = l[0];
  for (std::size_t c = 1; c < v; ++c)
    if (l[c] > mx) mx = l[c];
  double z = 0.0;
  for (std::size_t c = 0; c < v; ++c) {
    probs[c] = std::exp(l[c] - mx);
    z += probs[c];
  }
  for (std::size_t c = 0; c < v; ++c) probs[c] /= z;
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// -ln sigmoid(x), stable for large |x|
inline double neg_log_sigmoid(double x) {
  if (x >= 0.0) return std::log1p(std::exp(-x));
  return -x + std::log1p(std::exp(x));
}

}  // namespace detail

struct CeResult {
  double loss = 0.0;
  std::size_t n_positions = 0;
  ModelParams grads;
};

// Mean next-token negative log-likelihood over every predicted position of
// every layout in the batch, with its exact gradient.
inline CeResult ce_loss_and_grad(const ModelParams& params,
                                 const std::vector<ScoringLayout>& batch) {
  if (batch.empty()) throw usage_error("ce_loss_and_grad: empty batch");
  CeResult res;
  res.grads = zeros_like(params);
  for (const auto& layout : batch)
    res.n_positions += layout.ids.size() - 1;
  const double inv_n = 1.0 / static_cast<double>(res.n_positions);

  std::vector<double> probs;
  for (const auto& layout : batch) {
    ForwardCache cache;
    forward_cache(params, layout.ids, cache);
    const std::size_t L = layout.ids.size();
    Tensor dlogits = Tensor::mat(L, params.arch.vocab);
    for (std::size_t t = 0; t + 1 < L; ++t) {
      const TokenId target = layout.ids[t + 1];
      detail::softmax_row(cache.logits, t, probs);
      res.loss -= std::log(probs[target]) * inv_n;
      for (std::size_t c = 0; c < probs.size(); ++c)
        dlogits(t, c) = probs[c] * inv_n;
      dlogits(t, target) -= inv_n;
    }
    backward(params, layout.ids, cache, dlogits, res.grads);
  }
  return res;
}

// Loss-only variant for finite differencing.
inline double ce_loss(const ModelParams& params,
                      const std::vector<ScoringLayout>& batch) {
  if (batch.empty()) throw usage_error("ce_loss: empty batch");
  double loss = 0.0;
  std::size_t n = 0;
  for (const auto& layout : batch) {
    const Tensor logits = forward(params, layout.ids);
    for (std::size_t t = 0; t + 1 < layout.ids.size(); ++t) {
      loss -= row_log_prob(logits, t, layout.ids[t + 1]);
      ++n;
    }
  }
  return loss / static_cast<double>(n);
}

struct DpoBatchResult {
  double loss = 0.0;
  std::vector<double> margins;  // per pair, batch order
  ModelParams grads;            // w.r.t. the policy; reference gets none
};

// DPO batch loss mean(-ln sigmoid(m)) with
//   m = beta * [(logpi_theta - logpi_ref)(y_w) - (logpi_theta - logpi_ref)(y_l)]
// over unnormalized response log-prob sums, plus the analytic policy gradient.
inline DpoBatchResult dpo_loss_and_grad(const ModelParams& policy,
                                        const ModelParams& reference,
                                        const std::vector<PreferencePair>& batch,
                                        double beta) {
  if (batch.empty()) throw usage_error("dpo_loss_and_grad: empty batch");
  if (!(policy.arch == reference.arch))
    throw usage_error("dpo_loss_and_grad: policy/reference arch mismatch");
  DpoBatchResult res;
  res.grads = zeros_like(policy);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  std::vector<double> probs;

  for (const auto& pair : batch) {
    const ScoringLayout lw =
        build_sequence(pair.prompt, pair.chosen, policy.arch.max_len);
    const ScoringLayout ll =
        build_sequence(pair.prompt, pair.rejected, policy.arch.max_len);

    ForwardCache cw, cl;
    forward_cache(policy, lw.ids, cw);
    forward_cache(policy, ll.ids, cl);
    auto span_sum = [](const Tensor& logits, const ScoringLayout& lay) {
      double s = 0.0;
      for (std::size_t pos = lay.span_begin; pos < lay.span_end; ++pos)
        s += row_log_prob(logits, pos - 1, lay.ids[pos]);
      return s;
    };
    const double lp_w = span_sum(cw.logits, lw);
    const double lp_l = span_sum(cl.logits, ll);
    const double ref_w = score_layout(reference, lw).logp_sum;
    const double ref_l = score_layout(reference, ll).logp_sum;

    const double m = beta * ((lp_w - ref_w) - (lp_l - ref_l));
    res.margins.push_back(m);
    res.loss += detail::neg_log_sigmoid(m) * inv_n;

    // d(loss)/d(lp_w) = -(1 - sigmoid(m)) * beta / n, and the opposite sign
    // for lp_l; d(lp)/d(logits) at a span row is (onehot - softmax).
    const double coef = (1.0 - detail::sigmoid(m)) * beta * inv_n;
    auto add_backward = [&](const ScoringLayout& lay, const ForwardCache& cache,
                            double sign) {
      Tensor dlogits = Tensor::mat(lay.ids.size(), policy.arch.vocab);
      for (std::size_t pos = lay.span_begin; pos < lay.span_end; ++pos) {
        const std::size_t row = pos - 1;
        detail::softmax_row(cache.logits, row, probs);
        for (std::size_t c = 0; c < probs.size(); ++c)
          dlogits(row, c) = sign * coef * probs[c];
        dlogits(row, lay.ids[pos]) -= sign * coef;
      }
      backward(policy, lay.ids, cache, dlogits, res.grads);
    };
    add_backward(lw, cw, +1.0);
    add_backward(ll, cl, -1.0);
  }
  return res;
}

// Loss-only variant for finite differencing; reference log-prob sums are
// constant in the policy, so they are taken precomputed.
inline double dpo_loss(const ModelParams& policy,
                       const std::vector<PreferencePair>& batch, double beta,
                       const std::vector<std::pair<double, double>>& ref_sums) {
  if (batch.size() != ref_sums.size())
    throw usage_error("dpo_loss: ref_sums size mismatch");
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& pair = batch[i];
    const double lp_w =
        score_response(policy, pair.prompt, pair.chosen).logp_sum;
    const double lp_l =
        score_response(policy, pair.prompt, pair.rejected).logp_sum;
    const double m =
        beta * ((lp_w - ref_sums[i].first) - (lp_l - ref_sums[i].second));
    loss += detail::neg_log_sigmoid(m);
  }
  return loss / static_cast<double>(batch.size());
}

// ---------------------------------------------------------------------------
// Optimizer: Adam (0.9 / 0.999, eps 1e-8, bias correction) with global-norm
// clipping applied before the moment update.
// ---------------------------------------------------------------------------

struct OptimizerState {
  ModelParams m, v;
  std::uint64_t step = 0;
};

inline OptimizerState init_optimizer(const ModelParams& params) {
  OptimizerState s;
  s.m = zeros_like(params);
  s.v = zeros_like(params);
  return s;
}

inline void adam_step(OptimizerState& state, ModelParams& params,
                      const ModelParams& grads, const TrainConfig& cfg) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double sq = 0.0;
  for (const auto& nt : tensor_list(grads)) {
    for (double g : nt.tensor->data) {
      if (!std::isfinite(g))
        throw numeric_error("adam_step: non-finite gradient in tensor " +
                            nt.name);
      sq += g * g;
    }
  }
  const double norm = std::sqrt(sq);
  const double clip =
      norm > cfg.grad_clip_norm ? cfg.grad_clip_norm / norm : 1.0;

  state.step += 1;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));

  auto pt = tensor_list(params);
  auto gt = tensor_list(grads);
  auto mt = tensor_list(state.m);
  auto vt = tensor_list(state.v);
  for (std::size_t i = 0; i < pt.size(); ++i) {
    auto& pd = pt[i].tensor->data;
    const auto& gd = gt[i].tensor->data;
    auto& md = mt[i].tensor->data;
    auto& vd = vt[i].tensor->data;
    for (std::size_t j = 0; j < pd.size(); ++j) {
      const double g = gd[j] * clip;
      md[j] = b1 * md[j] + (1.0 - b1) * g;
      vd[j] = b2 * vd[j] + (1.0 - b2) * g * g;
      const double mhat = md[j] / bc1;
      const double vhat = vd[j] / bc2;
      pd[j] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct EpochStats {
  double mean_loss = 0.0;
  double mean_margin = 0.0;  // DPO only
};

// SFT corpus lines are "prompt<TAB>response"; a line without a tab is
// treated as a bare response with an empty prompt.
inline ScoringLayout layout_from_corpus_line(const std::string& line,
                                             std::size_t max_len) {
  const auto tab = line.find('\t');
  if (tab == std::string::npos) return build_sequence("", line, max_len);
  return build_sequence(std::string_view(line).substr(0, tab),
                        std::string_view(line).substr(tab + 1), max_len);
}

inline ModelParams train_sft(const TrainConfig& cfg, const ArchConfig& arch,
                             const std::vector<std::string>& corpus,
                             std::vector<EpochStats>* history = nullptr,
                             std::ostream* log = nullptr) {
  cfg.validate();
  arch.validate();
  if (corpus.empty()) throw usage_error("train_sft: empty corpus");
  std::vector<ScoringLayout> layouts;
  layouts.reserve(corpus.size());
  for (const auto& line : corpus)
    layouts.push_back(layout_from_corpus_line(line, arch.max_len));

  ModelParams params = init_params(arch, cfg.seed);
  OptimizerState opt = init_optimizer(params);
  Rng shuffle_rng(derive_seed(cfg.seed, "sft-shuffle"));
  std::vector<std::size_t> order(layouts.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t pos_sum = 0;
    for (std::size_t begin = 0; begin < order.size();
         begin += cfg.batch_size) {
      const std::size_t end =
          std::min(begin + cfg.batch_size, order.size());
      std::vector<ScoringLayout> batch;
      batch.reserve(end - begin);
      for (std::size_t i = begin; i < end; ++i)
        batch.push_back(layouts[order[i]]);
      CeResult res = ce_loss_and_grad(params, batch);
      adam_step(opt, params, res.grads, cfg);
      loss_sum += res.loss * static_cast<double>(res.n_positions);
      pos_sum += res.n_positions;
    }
    EpochStats stats;
    stats.mean_loss = loss_sum / static_cast<double>(pos_sum);
    if (history) history->push_back(stats);
    if (log) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%zu\t%.10g\n", epoch, stats.mean_loss);
      *log << buf << std::flush;
    }
  }
  return params;
}

inline ModelParams train_dpo(const TrainConfig& cfg, const Dataset& dataset,
                             const ModelParams& reference,
                             std::vector<EpochStats>* history = nullptr,
                             std::ostream* log = nullptr) {
  cfg.validate();
  if (dataset.pairs.empty()) throw usage_error("train_dpo: empty dataset");
  ModelParams policy = reference;  // standard DPO initialization
  OptimizerState opt = init_optimizer(policy);
  Rng shuffle_rng(derive_seed(cfg.seed, "dpo-shuffle"));
  std::vector<std::size_t> order(dataset.pairs.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0, margin_sum = 0.0;
    std::size_t n_pairs = 0;
    for (std::size_t begin = 0; begin < order.size();
         begin += cfg.batch_size) {
      const std::size_t end =
          std::min(begin + cfg.batch_size, order.size());
      std::vector<PreferencePair> batch;
      batch.reserve(end - begin);
      for (std::size_t i = begin; i < end; ++i)
        batch.push_back(dataset.pairs[order[i]]);
      DpoBatchResult res =
          dpo_loss_and_grad(policy, reference, batch, cfg.beta);
      adam_step(opt, policy, res.grads, cfg);
      loss_sum += res.loss * static_cast<double>(batch.size());
      for (double m : res.margins) margin_sum += m;
      n_pairs += batch.size();
    }
    EpochStats stats;
    stats.mean_loss = loss_sum / static_cast<double>(n_pairs);
    stats.mean_margin = margin_sum / static_cast<double>(n_pairs);
    if (history) history->push_back(stats);
    if (log) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "%zu\t%.10g\t%.10g\n", epoch,
                    stats.mean_loss, stats.mean_margin);
      *log << buf << std::flush;
    }
  }
  return policy;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification
// ---------------------------------------------------------------------------

struct GradCheckEntry {
  std::string tensor;
  double max_rel_err = 0.0;
};

inline constexpr double kGradCheckStep = 1e-5;
inline constexpr double kGradCheckTol = 1e-5;

// Central differences over every coordinate of every tensor. The error is
// |analytic - fd| / max(|analytic|, |fd|, 1e-3); the floor keeps finite-
// difference roundoff on near-zero coordinates from dominating.
template <class LossFn>
inline std::vector<GradCheckEntry> fd_compare(ModelParams& params,
                                              const ModelParams& analytic,
                                              LossFn&& loss,
                                              double step = kGradCheckStep) {
  std::vector<GradCheckEntry> entries;
  auto pt = tensor_list(params);
  auto at = tensor_list(analytic);
  for (std::size_t i = 0; i < pt.size(); ++i) {
    GradCheckEntry e;
    e.tensor = pt[i].name;
    auto& data = pt[i].tensor->data;
    const auto& grad = at[i].tensor->data;
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double orig = data[j];
      data[j] = orig + step;
      const double up = loss(params);
      data[j] = orig - step;
      const double down = loss(params);
      data[j] = orig;
      const double fd = (up - down) / (2.0 * step);
      const double err = std::abs(grad[j] - fd);
      const double rel =
          err / std::max({std::abs(grad[j]), std::abs(fd), 1e-3});
      if (rel > e.max_rel_err) e.max_rel_err = rel;
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

struct GradCheckReport {
  double tolerance = kGradCheckTol;
  std::vector<GradCheckEntry> ce_entries;
  std::vector<GradCheckEntry> dpo_entries;
  double max_rel_err = 0.0;
  bool pass = false;
};

inline GradCheckReport gradcheck(const ArchConfig& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(derive_seed(seed, "gradcheck-data"));
  auto letters = [&](std::size_t n) {
    std::string s(n, 'a');
    for (auto& c : s) c = static_cast<char>('a' + rng.below(26));
    return s;
  };

  GradCheckReport report;
  ModelParams params = init_params(arch, seed);
  ModelParams reference = init_params(arch, derive_seed(seed, "gradcheck-ref"));

  // Central differences are only a valid oracle if no ReLU pre-activation
  // sits within the perturbation's reach of its kink; a crossing turns the
  // O(step^2) fd error into O(1) for that coordinate. Redraw the probe data
  // until every pre-activation clears the step by a wide margin.
  std::vector<ScoringLayout> ce_batch;
  std::vector<PreferencePair> dpo_batch(2);
  constexpr double kKinkMargin = 5.0 * kGradCheckStep;
  for (int attempt = 0; attempt < 64; ++attempt) {
    ce_batch.clear();
    for (int i = 0; i < 2; ++i)
      ce_batch.push_back(build_sequence(letters(4), letters(6), arch.max_len));
    for (auto& p : dpo_batch) {
      p.prompt = letters(4);
      p.chosen = letters(5);
      p.rejected = letters(7);
    }
    double min_pre = std::numeric_limits<double>::infinity();
    auto scan = [&](const std::vector<TokenId>& ids) {
      ForwardCache cache;
      forward_cache(params, ids, cache);
      for (const auto& lc : cache.layers)
        for (double v : lc.f1.data) min_pre = std::min(min_pre, std::abs(v));
    };
    for (const auto& lay : ce_batch) scan(lay.ids);
    for (const auto& p : dpo_batch) {
      scan(build_sequence(p.prompt, p.chosen, arch.max_len).ids);
      scan(build_sequence(p.prompt, p.rejected, arch.max_len).ids);
    }
    if (min_pre >= kKinkMargin) break;
  }

  const CeResult ce = ce_loss_and_grad(params, ce_batch);
  report.ce_entries = fd_compare(
      params, ce.grads,
      [&](const ModelParams& p) { return ce_loss(p, ce_batch); });

  const double beta = 0.05;
  std::vector<std::pair<double, double>> ref_sums;
  for (const auto& p : dpo_batch)
    ref_sums.emplace_back(
        score_response(reference, p.prompt, p.chosen).logp_sum,
        score_response(reference, p.prompt, p.rejected).logp_sum);
  const DpoBatchResult dpo =
      dpo_loss_and_grad(params, reference, dpo_batch, beta);
  report.dpo_entries = fd_compare(params, dpo.grads, [&](const ModelParams& p) {
    return dpo_loss(p, dpo_batch, beta, ref_sums);
  });

  for (const auto* entries : {&report.ce_entries, &report.dpo_entries})
    for (const auto& e : *entries)
      report.max_rel_err = std::max(report.max_rel_err, e.max_rel_err);
  report.pass = report.max_rel_err < report.tolerance;
  return report;
}

}  // namespace prefgate
