#include "tunnelfp/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "tunnelfp/rng.hpp"

namespace tunnelfp {

double GradCheckReport::worst() const {
  double w = 0.0;
  for (const GroupError& g : groups) w = std::max(w, g.rel_error);
  return w;
}

std::vector<std::string> GradCheckReport::failing() const {
  std::vector<std::string> out;
  for (const GroupError& g : groups)
    if (!(g.rel_error <= tolerance)) out.push_back(g.group);
  return out;
}

std::vector<ParallelFlowPair> random_pairs(const NetConfig& net, int count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ParallelFlowPair> out;
  auto flow = [&](FlowKind kind) {
    const auto len = rng.uniform_int(1, net.seq_len);
    std::vector<int> toks;
    for (std::int64_t i = 0; i < len; ++i) toks.push_back(static_cast<int>(rng.uniform_int(1, net.vocab - 1)));
    FlowSequence f;
    PaddedTokens p = pad_or_truncate(toks, net.seq_len);
    f.tokens = std::move(p.tokens);
    f.true_len = p.true_len;
    f.kind = kind;
    return f;
  };
  for (int i = 0; i < count; ++i) {
    ParallelFlowPair p;
    p.label = static_cast<int>(rng.uniform_int(0, net.classes - 1));
    p.tls = flow(FlowKind::Tls);
    p.tun = flow(FlowKind::Tunnel);
    p.tls.label = p.tun.label = p.label;
    out.push_back(std::move(p));
  }
  return out;
}

GradCheckReport grad_check(const GradCheckOptions& opts) {
  const ModelState state = ModelState::initialize(opts.net, opts.seed);
  return grad_check(state, random_pairs(opts.net, opts.batch, mix_seed(opts.seed, 99)), opts);
}

GradCheckReport grad_check(const ModelState& base, const std::vector<ParallelFlowPair>& pairs,
                           const GradCheckOptions& opts) {
  std::vector<const ParallelFlowPair*> batch;
  for (const auto& p : pairs) batch.push_back(&p);

  ModelState state = base;
  const std::vector<double> frozen = base.params;
  ObjectiveOptions obj;
  obj.weights = opts.weights;
  obj.ablation = opts.ablation;
  obj.target_params = &frozen;

  std::vector<double> analytic;
  batch_objective(state, batch, obj, &analytic);

  const double lambda2 = opts.weights.with_ablation(opts.ablation).lambda2;
  const double grl_factor = lambda2 * (-state.config.grl_lambda - 1.0);
  const double h = opts.step;

  GradCheckReport report;
  report.tolerance = opts.tolerance;
  for (const ParamGroup& g : state.layout.groups) {
    const bool behind_grl = g.name == "embedding" || g.name.ends_with(".enc_p");
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = g.begin; i < g.end; ++i) {
      const double orig = state.params[i];
      state.params[i] = orig + h;
      const LossReport plus = batch_objective(state, batch, obj);
      state.params[i] = orig - h;
      const LossReport minus = batch_objective(state, batch, obj);
      state.params[i] = orig;
      double numeric = (plus.total - minus.total) / (2.0 * h);
      if (behind_grl) numeric += grl_factor * (plus.psm - minus.psm) / (2.0 * h);
      const double a = analytic[i];
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
    }
    GroupError e;
    e.group = g.name;
    e.size = g.end - g.begin;
    e.analytic_norm = std::sqrt(a2);
    e.numeric_norm = std::sqrt(n2);
    e.rel_error = std::sqrt(diff2) / std::max({e.analytic_norm, e.numeric_norm, 1e-12});
    report.groups.push_back(e);
  }
  return report;
}

GrlCheck grl_negation_check(const ModelState& state, const std::vector<ParallelFlowPair>& pairs) {
  std::vector<const ParallelFlowPair*> batch;
  for (const auto& p : pairs) batch.push_back(&p);
  ObjectiveOptions obj;
  obj.weights = {.lambda1 = 0.0, .lambda2 = 1.0, .lambda3 = 0.0, .lambda4 = 0.0, .lambda5 = 0.0};
  std::vector<double> g_rev, g_id;
  batch_objective(state, batch, obj, &g_rev);
  obj.grl_identity = true;
  batch_objective(state, batch, obj, &g_id);

  GrlCheck out;
  out.exact = true;
  for (const ParamGroup& g : state.layout.groups) {
    if (!g.name.ends_with(".enc_p")) continue;
    for (std::size_t i = g.begin; i < g.end; ++i) {
      ++out.compared;
      if (g_id[i] != 0.0) ++out.nonzero;
      if (g_rev[i] != -g_id[i]) out.exact = false;
      out.max_abs_gap = std::max(out.max_abs_gap, std::abs(g_rev[i] + g_id[i]));
    }
  }
  return out;
}

}  // namespace tunnelfp
