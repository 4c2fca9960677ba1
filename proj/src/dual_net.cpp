#include "tunnelfp/dual_net.hpp"

#include <stdexcept>
#include <string>

namespace tunnelfp {

Mat embed_tokens(const double* table, int embed_dim, int vocab, std::span<const int> tokens) {
  ConstMatMap e(table, embed_dim, vocab);
  Mat x(embed_dim, static_cast<Eigen::Index>(tokens.size()));
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int t = tokens[i];
    if (t < 0 || t >= vocab)
      throw std::out_of_range("token " + std::to_string(t) + " outside vocabulary of " + std::to_string(vocab));
    x.col(static_cast<Eigen::Index>(i)) = e.col(t);
  }
  return x;
}

Embedded embed(const FlowSequence& flow, const ModelState& state) {
  const NetConfig& cfg = state.config;
  Embedded out;
  out.x = embed_tokens(state.data() + state.layout.embedding, cfg.embed_dim, cfg.vocab, flow.tokens);
  out.tokens = flow.tokens;
  out.mask.resize(flow.tokens.size());
  for (std::size_t i = 0; i < flow.tokens.size(); ++i) out.mask[i] = flow.tokens[i] != kPadToken;
  out.steps = valid_steps(out.mask);
  return out;
}

Vec masked_mean(const Mat& z, std::span<const int> steps) {
  Vec sum = Vec::Zero(z.rows());
  for (int s : steps) sum += z.col(s);
  return sum / static_cast<double>(steps.size());
}

Vec affine_forward(const double* params, const AffineSlot& slot, const Vec& in) {
  ConstMatMap w(params + slot.w, slot.out, slot.in);
  ConstVecMap b(params + slot.b, slot.out);
  return w * in + b;
}

Vec affine_backward(const double* params, const AffineSlot& slot, const Vec& in, const Vec& d_out, double* grad) {
  ConstMatMap w(params + slot.w, slot.out, slot.in);
  MatMap gw(grad + slot.w, slot.out, slot.in);
  VecMap gb(grad + slot.b, slot.out);
  gw.noalias() += d_out * in.transpose();
  gb += d_out;
  return w.transpose() * d_out;
}

BranchActivations encode_branch(const ModelState& state, Branch branch, const FlowSequence& flow,
                                bool with_protocol) {
  const auto& slots = state.layout.branch(branch);
  const double* p = state.data();
  BranchActivations act;
  act.input = embed(flow, state);
  if (act.input.steps.empty()) throw InputError("encode_branch: flow has no valid timestep");
  act.z_a = stack_forward(p, slots.enc_a, act.input.x, act.input.steps, &act.cache_a);
  act.pooled_a = masked_mean(act.z_a, act.input.steps);
  act.logits_a = affine_forward(p, state.layout.app_head, act.pooled_a);
  act.has_protocol = with_protocol;
  if (with_protocol) {
    act.z_p = stack_forward(p, slots.enc_p, act.input.x, act.input.steps, &act.cache_p);
    act.pooled_p = masked_mean(act.z_p, act.input.steps);
    act.logits_p = affine_forward(p, slots.proto_head, grl_forward(act.pooled_p));
  }
  return act;
}

void branch_backward(const ModelState& state, Branch branch, const BranchActivations& act, const Mat& d_zp,
                     const Mat& d_za, double* grad) {
  const auto& slots = state.layout.branch(branch);
  const int d = state.config.embed_dim;
  Mat d_x = stack_backward(state.data(), slots.enc_a, act.cache_a, d_za, d, grad);
  if (act.has_protocol && d_zp.size() > 0) d_x += stack_backward(state.data(), slots.enc_p, act.cache_p, d_zp, d, grad);
  MatMap d_emb(grad + state.layout.embedding, d, state.config.vocab);
  for (int s : act.input.steps) d_emb.col(act.input.tokens[static_cast<std::size_t>(s)]) += d_x.col(s);
}

Decoded decode(const ModelState& state, const Mat& z_p, const Mat& z_a, std::span<const int> steps) {
  const double* p = state.data();
  const AffineSlot& out_slot = state.layout.decoder_out;
  Decoded dec;
  dec.steps.assign(steps.begin(), steps.end());
  dec.input.resize(z_p.rows() + z_a.rows(), z_p.cols());
  dec.input.topRows(z_p.rows()) = z_p;
  dec.input.bottomRows(z_a.rows()) = z_a;
  dec.hidden = stack_forward(p, state.layout.decoder, dec.input, steps, &dec.cache);
  ConstMatMap w(p + out_slot.w, out_slot.out, out_slot.in);
  ConstVecMap b(p + out_slot.b, out_slot.out);
  dec.out = Mat::Zero(out_slot.out, z_p.cols());
  for (int s : steps) dec.out.col(s) = w * dec.hidden.col(s) + b;
  return dec;
}

Mat decode_backward(const ModelState& state, const Decoded& dec, const Mat& d_out, double* grad) {
  const double* p = state.data();
  const AffineSlot& out_slot = state.layout.decoder_out;
  ConstMatMap w(p + out_slot.w, out_slot.out, out_slot.in);
  MatMap gw(grad + out_slot.w, out_slot.out, out_slot.in);
  VecMap gb(grad + out_slot.b, out_slot.out);
  Mat d_hidden = Mat::Zero(dec.hidden.rows(), dec.hidden.cols());
  for (int s : dec.steps) {
    gw.noalias() += d_out.col(s) * dec.hidden.col(s).transpose();
    gb += d_out.col(s);
    d_hidden.col(s).noalias() = w.transpose() * d_out.col(s);
  }
  return stack_backward(p, state.layout.decoder, dec.cache, d_hidden, static_cast<int>(dec.input.rows()), grad);
}

PairActivations forward_pair(const ParallelFlowPair& pair, const ModelState& state) {
  PairActivations a;
  a.tls = encode_branch(state, Branch::Tls, pair.tls);
  a.tun = encode_branch(state, Branch::Tun, pair.tun);
  a.self_tls = decode(state, a.tls.z_p, a.tls.z_a, a.tls.input.steps);
  a.self_tun = decode(state, a.tun.z_p, a.tun.z_a, a.tun.input.steps);
  a.cross_tls = decode(state, a.tls.z_p, a.tun.z_a, a.tls.input.steps);
  a.cross_tun = decode(state, a.tun.z_p, a.tls.z_a, a.tun.input.steps);
  return a;
}

Vec softmax(const Vec& logits) {
  const Vec shifted = (logits.array() - logits.maxCoeff()).exp().matrix();
  return shifted / shifted.sum();
}

TunnelInference infer_tunnel(const ModelState& state, const FlowSequence& flow) {
  const double* p = state.data();
  const Embedded in = embed(flow, state);
  if (in.steps.empty()) throw InputError("infer_tunnel: flow has no valid timestep");
  const Mat z_a = stack_forward(p, state.layout.branch(Branch::Tun).enc_a, in.x, in.steps, nullptr);
  TunnelInference out;
  out.fingerprint = masked_mean(z_a, in.steps);
  out.logits = affine_forward(p, state.layout.app_head, out.fingerprint);
  Eigen::Index arg = 0;
  out.logits.maxCoeff(&arg);
  out.predicted = static_cast<int>(arg);
  out.confidence = softmax(out.logits)(arg);
  return out;
}

}  // namespace tunnelfp
