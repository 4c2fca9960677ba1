#include "tunnelfp/losses.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <exception>
#include <thread>
#include <tuple>

namespace tunnelfp {

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::None: return "none";
    case Ablation::Src: return "src";
    case Ablation::Psm: return "psm";
    case Ablation::Cpd: return "cpd";
    case Ablation::Asa: return "asa";
    case Ablation::Asc: return "asc";
  }
  return "none";
}

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

}  // namespace

Ablation parse_ablation(std::string_view s) {
  const std::string l = lower(s);
  for (Ablation a : kAllVariants)
    if (l == to_string(a)) return a;
  throw InputError("unknown ablation '" + std::string(s) + "' (expected none|src|psm|cpd|asa|asc)");
}

std::string variant_name(Ablation a) {
  if (a == Ablation::None) return "Full";
  std::string s = to_string(a);
  for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return "/" + s;
}

std::string to_string(ModelKind k) { return k == ModelKind::DecEtt ? "decett" : "tunnel_only"; }

ModelKind parse_model_kind(std::string_view s) {
  const std::string l = lower(s);
  if (l == "decett") return ModelKind::DecEtt;
  if (l == "tunnel_only") return ModelKind::TunnelOnly;
  throw InputError("unknown model kind '" + std::string(s) + "' (expected decett|tunnel_only)");
}

void LossWeights::validate() const {
  for (double v : {lambda1, lambda2, lambda3, lambda4, lambda5})
    if (!(v >= 0.0) || !std::isfinite(v)) throw InputError("LossWeights: weights must be finite and nonnegative");
}

LossWeights LossWeights::with_ablation(Ablation a) const {
  LossWeights w = *this;
  switch (a) {
    case Ablation::None: break;
    case Ablation::Src: w.lambda1 = 0.0; break;
    case Ablation::Psm: w.lambda2 = 0.0; break;
    case Ablation::Cpd: w.lambda3 = 0.0; break;
    case Ablation::Asa: w.lambda4 = 0.0; break;
    case Ablation::Asc: w.lambda5 = 0.0; break;
  }
  return w;
}

LossReport& LossReport::operator+=(const LossReport& o) {
  src += o.src;
  psm += o.psm;
  cpd += o.cpd;
  asa += o.asa;
  asc += o.asc;
  frd += o.frd;
  afa += o.afa;
  total += o.total;
  return *this;
}

LossReport& LossReport::operator*=(double s) {
  src *= s;
  psm *= s;
  cpd *= s;
  asa *= s;
  asc *= s;
  frd *= s;
  afa *= s;
  total *= s;
  return *this;
}

LossReport total_loss(const LossReport& parts, const LossWeights& w, Ablation ablation) {
  LossReport r = parts;
  switch (ablation) {
    case Ablation::None: break;
    case Ablation::Src: r.src = 0.0; break;
    case Ablation::Psm: r.psm = 0.0; break;
    case Ablation::Cpd: r.cpd = 0.0; break;
    case Ablation::Asa: r.asa = 0.0; break;
    case Ablation::Asc: r.asc = 0.0; break;
  }
  const LossWeights e = w.with_ablation(ablation);
  r.frd = e.lambda1 * r.src + e.lambda2 * r.psm + e.lambda3 * r.cpd;
  r.afa = e.lambda4 * r.asa + e.lambda5 * r.asc;
  r.total = r.frd + r.afa;
  return r;
}

double reconstruction_error(const Mat& target, const Mat& recon, std::span<const int> steps, Mat* d_recon,
                            double scale) {
  if (steps.empty()) return 0.0;
  const double inv_t = 1.0 / static_cast<double>(steps.size());
  double sum = 0.0;
  for (int s : steps) {
    const Vec diff = recon.col(s) - target.col(s);
    sum += diff.squaredNorm();
    if (d_recon) d_recon->col(s) += (2.0 * inv_t * scale) * diff;
  }
  return sum * inv_t;
}

double cross_entropy(const Vec& logits, int label, Vec* d_logits, double scale) {
  const double m = logits.maxCoeff();
  const double lse = m + std::log((logits.array() - m).exp().sum());
  if (d_logits) {
    Vec p = (logits.array() - lse).exp().matrix();
    p(label) -= 1.0;
    *d_logits += scale * p;
  }
  return lse - logits(label);
}

double cosine_distance(const Vec& a, const Vec& b, Vec* d_a, Vec* d_b, double scale) {
  const double na = a.norm();
  const double nb = b.norm();
  const double dot = a.dot(b);
  // The floor only matters for (near) zero vectors; there den is constant.
  const bool floored = na * nb < kCosineEps;
  const double den = floored ? kCosineEps : na * nb;
  if (d_a || d_b) {
    // d(1 - dot/den) = -(d dot)/den + dot/den^2 * d den
    const double k = floored ? 0.0 : dot / (den * den);
    if (d_a) {
      Vec g = -b / den;
      if (k != 0.0) g += (k * nb / na) * a;
      *d_a += scale * g;
    }
    if (d_b) {
      Vec g = -a / den;
      if (k != 0.0) g += (k * na / nb) * b;
      *d_b += scale * g;
    }
  }
  return 1.0 - dot / den;
}

namespace {

double recon_batch(std::span<const ReconSample> batch) {
  if (batch.empty()) return 0.0;
  double sum = 0.0;
  for (const ReconSample& s : batch)
    sum += reconstruction_error(s.x_tls, s.recon_tls, s.steps_tls) +
           reconstruction_error(s.x_tun, s.recon_tun, s.steps_tun);
  return sum / static_cast<double>(batch.size());
}

double ce_batch(std::span<const LogitSample> batch) {
  if (batch.empty()) return 0.0;
  double sum = 0.0;
  for (const LogitSample& s : batch) sum += cross_entropy(s.tls, s.label) + cross_entropy(s.tun, s.label);
  return sum / static_cast<double>(batch.size());
}

}  // namespace

double loss_src(std::span<const ReconSample> batch) { return recon_batch(batch); }
double loss_cpd(std::span<const ReconSample> batch) { return recon_batch(batch); }
double loss_psm(std::span<const LogitSample> batch) { return ce_batch(batch); }
double loss_asc(std::span<const LogitSample> batch) { return ce_batch(batch); }

double loss_asa(std::span<const PooledSample> batch) {
  if (batch.empty()) return 0.0;
  double sum = 0.0;
  for (const PooledSample& s : batch) sum += cosine_distance(s.tls, s.tun);
  return sum / static_cast<double>(batch.size());
}

namespace {

struct BranchGrad {
  Mat d_zp;
  Mat d_za;
};

BranchGrad zero_grad(const BranchActivations& act) {
  BranchGrad g;
  g.d_za = Mat::Zero(act.z_a.rows(), act.z_a.cols());
  if (act.has_protocol) g.d_zp = Mat::Zero(act.z_p.rows(), act.z_p.cols());
  return g;
}

void add_pooled_grad(Mat& d_z, const Vec& d_pooled, std::span<const int> steps) {
  const Vec per_step = d_pooled / static_cast<double>(steps.size());
  for (int s : steps) d_z.col(s) += per_step;
}

Mat target_of(const ModelState& state, const ObjectiveOptions& opts, const BranchActivations& act) {
  if (!opts.target_params) return act.input.x;
  return embed_tokens(opts.target_params->data() + state.layout.embedding, state.config.embed_dim,
                      state.config.vocab, act.input.tokens);
}

// Reconstruction term for one decoded view; routes the decoder-input
// gradient to the branches that supplied Z_P and Z_A.
double recon_term(const ModelState& state, const Decoded& dec, const Mat& target, double weight, double scale,
                  double* grad, BranchGrad& p_src, BranchGrad& a_src) {
  const bool backprop = grad && weight != 0.0;
  Mat d_out;
  if (backprop) d_out = Mat::Zero(dec.out.rows(), dec.out.cols());
  const double v = reconstruction_error(target, dec.out, dec.steps, backprop ? &d_out : nullptr, weight * scale);
  if (backprop) {
    const Mat d_in = decode_backward(state, dec, d_out, grad);
    const auto h2 = p_src.d_zp.rows();
    p_src.d_zp += d_in.topRows(h2);
    a_src.d_za += d_in.bottomRows(d_in.rows() - h2);
  }
  return v;
}

double ce_head_term(const ModelState& state, const AffineSlot& head, const Vec& head_input, const Vec& logits,
                    int label, double weight, double scale, double* grad, Vec* d_head_input) {
  const bool backprop = grad && weight != 0.0;
  Vec d_logits;
  if (backprop) d_logits = Vec::Zero(logits.size());
  const double v = cross_entropy(logits, label, backprop ? &d_logits : nullptr, weight * scale);
  if (backprop) *d_head_input = affine_backward(state.data(), head, head_input, d_logits, grad);
  return v;
}

LossReport tunnel_only_objective(const ModelState& state, const ParallelFlowPair& pair, double scale,
                                 double* grad) {
  const BranchActivations act = encode_branch(state, Branch::Tun, pair.tun, false);
  LossReport parts;
  Vec d_pooled;
  parts.asc = ce_head_term(state, state.layout.app_head, act.pooled_a, act.logits_a, pair.label, 1.0, scale, grad,
                           &d_pooled);
  parts.total = parts.afa = parts.asc;
  if (grad) {
    BranchGrad g = zero_grad(act);
    add_pooled_grad(g.d_za, d_pooled, act.input.steps);
    branch_backward(state, Branch::Tun, act, g.d_zp, g.d_za, grad);
  }
  return parts;
}

}  // namespace

LossReport pair_objective(const ModelState& state, const ParallelFlowPair& pair, const ObjectiveOptions& opts,
                          double scale, double* grad) {
  if (pair.label < 0 || pair.label >= state.config.classes)
    throw InputError("pair label " + std::to_string(pair.label) + " outside [0, " +
                     std::to_string(state.config.classes) + ")");
  if (opts.kind == ModelKind::TunnelOnly) return tunnel_only_objective(state, pair, scale, grad);

  const Ablation ab = opts.ablation;
  const LossWeights w = opts.weights.with_ablation(ab);
  const bool use_src = ab != Ablation::Src;
  const bool use_psm = ab != Ablation::Psm;
  const bool use_cpd = ab != Ablation::Cpd;
  const bool use_asa = ab != Ablation::Asa;
  const bool use_asc = ab != Ablation::Asc;
  const bool need_p = use_src || use_psm || use_cpd;

  BranchActivations tls = encode_branch(state, Branch::Tls, pair.tls, need_p);
  BranchActivations tun = encode_branch(state, Branch::Tun, pair.tun, need_p);
  BranchGrad g_tls, g_tun;
  if (grad) {
    g_tls = zero_grad(tls);
    g_tun = zero_grad(tun);
  }

  LossReport parts;
  if (use_src || use_cpd) {
    const Mat x_tls = target_of(state, opts, tls);
    const Mat x_tun = target_of(state, opts, tun);
    if (use_src) {
      const Decoded self_tls = decode(state, tls.z_p, tls.z_a, tls.input.steps);
      const Decoded self_tun = decode(state, tun.z_p, tun.z_a, tun.input.steps);
      parts.src = recon_term(state, self_tls, x_tls, w.lambda1, scale, grad, g_tls, g_tls) +
                  recon_term(state, self_tun, x_tun, w.lambda1, scale, grad, g_tun, g_tun);
    }
    if (use_cpd) {
      // Protocol view of one branch with the AF view of the other,
      // reconstructing the protocol-view branch's own input.
      const Decoded cross_tls = decode(state, tls.z_p, tun.z_a, tls.input.steps);
      const Decoded cross_tun = decode(state, tun.z_p, tls.z_a, tun.input.steps);
      parts.cpd = recon_term(state, cross_tls, x_tls, w.lambda3, scale, grad, g_tls, g_tun) +
                  recon_term(state, cross_tun, x_tun, w.lambda3, scale, grad, g_tun, g_tls);
    }
  }

  if (use_psm) {
    const double grl = opts.grl_identity ? -1.0 : state.config.grl_lambda;
    for (auto [act, g, b] : {std::tuple{&tls, &g_tls, Branch::Tls}, std::tuple{&tun, &g_tun, Branch::Tun}}) {
      Vec d_head_in;
      parts.psm += ce_head_term(state, state.layout.branch(b).proto_head, grl_forward(act->pooled_p), act->logits_p,
                                pair.label, w.lambda2, scale, grad, &d_head_in);
      if (d_head_in.size() > 0) add_pooled_grad(g->d_zp, grl_backward(d_head_in, grl), act->input.steps);
    }
  }

  Vec d_pool_tls = Vec::Zero(tls.pooled_a.size());
  Vec d_pool_tun = Vec::Zero(tun.pooled_a.size());
  const bool pool_grad = grad != nullptr;
  if (use_asa) {
    const bool bp = pool_grad && w.lambda4 != 0.0;
    parts.asa = cosine_distance(tls.pooled_a, tun.pooled_a, bp ? &d_pool_tls : nullptr, bp ? &d_pool_tun : nullptr,
                                w.lambda4 * scale);
  }
  if (use_asc) {
    Vec d1, d2;
    parts.asc = ce_head_term(state, state.layout.app_head, tls.pooled_a, tls.logits_a, pair.label, w.lambda5, scale,
                             grad, &d1) +
                ce_head_term(state, state.layout.app_head, tun.pooled_a, tun.logits_a, pair.label, w.lambda5, scale,
                             grad, &d2);
    if (d1.size() > 0) d_pool_tls += d1;
    if (d2.size() > 0) d_pool_tun += d2;
  }

  if (grad) {
    add_pooled_grad(g_tls.d_za, d_pool_tls, tls.input.steps);
    add_pooled_grad(g_tun.d_za, d_pool_tun, tun.input.steps);
    branch_backward(state, Branch::Tls, tls, g_tls.d_zp, g_tls.d_za, grad);
    branch_backward(state, Branch::Tun, tun, g_tun.d_zp, g_tun.d_za, grad);
  }
  return total_loss(parts, opts.weights, ab);
}

LossReport batch_objective(const ModelState& state, std::span<const ParallelFlowPair* const> batch,
                           const ObjectiveOptions& opts, std::vector<double>* grad, int threads) {
  if (batch.empty()) throw InputError("batch_objective: empty batch");
  const double scale = 1.0 / static_cast<double>(batch.size());
  if (grad) grad->assign(state.params.size(), 0.0);
  const int workers = std::clamp(threads, 1, static_cast<int>(batch.size()));

  if (workers == 1) {
    LossReport sum;
    for (const ParallelFlowPair* p : batch) sum += pair_objective(state, *p, opts, scale, grad ? grad->data() : nullptr);
    sum *= scale;
    return sum;
  }

  std::vector<LossReport> chunk_loss(static_cast<std::size_t>(workers));
  std::vector<std::vector<double>> chunk_grad(static_cast<std::size_t>(workers));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  const std::size_t per = (batch.size() + static_cast<std::size_t>(workers) - 1) / static_cast<std::size_t>(workers);
  {
    std::vector<std::jthread> pool;
    for (int t = 0; t < workers; ++t) {
      pool.emplace_back([&, t] {
        const auto ti = static_cast<std::size_t>(t);
        try {
          if (grad) chunk_grad[ti].assign(state.params.size(), 0.0);
          const std::size_t lo = ti * per;
          const std::size_t hi = std::min(batch.size(), lo + per);
          for (std::size_t i = lo; i < hi; ++i)
            chunk_loss[ti] +=
                pair_objective(state, *batch[i], opts, scale, grad ? chunk_grad[ti].data() : nullptr);
        } catch (...) {
          errors[ti] = std::current_exception();
        }
      });
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  LossReport sum;
  for (std::size_t t = 0; t < chunk_loss.size(); ++t) {
    sum += chunk_loss[t];
    if (grad) {
      double* g = grad->data();
      const double* c = chunk_grad[t].data();
      for (std::size_t i = 0; i < grad->size(); ++i) g[i] += c[i];
    }
  }
  sum *= scale;
  return sum;
}

}  // namespace tunnelfp
