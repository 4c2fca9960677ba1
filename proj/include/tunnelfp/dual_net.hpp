#pragma once

// Partially parameter-shared Siamese network over flow sequences.
//
// Shared: embedding, decoder (2-layer Bi-GRU over [Z_P; Z_A] plus a 2H -> d
// map) and the app head. Per branch (tls, tun): protocol-view encoder Enc^P,
// AF-view encoder Enc^A and a protocol head reached through gradient
// reversal.

#include <span>
#include <vector>

#include "tunnelfp/gru.hpp"
#include "tunnelfp/params.hpp"

namespace tunnelfp {

struct Embedded {
  Mat x;  // d x n
  std::vector<int> tokens;
  std::vector<unsigned char> mask;
  std::vector<int> steps;  // indices where mask is set
};

/// Column i is the embedding of tokens[i]; mask[i] = tokens[i] != pad.
/// Throws std::out_of_range for tokens outside the vocabulary.
Embedded embed(const FlowSequence& flow, const ModelState& state);

/// Same lookup against an explicit d x vocab table.
Mat embed_tokens(const double* table, int embed_dim, int vocab, std::span<const int> tokens);

Vec masked_mean(const Mat& z, std::span<const int> steps);
Vec affine_forward(const double* params, const AffineSlot& slot, const Vec& in);
/// Accumulates slot gradients and returns dL/d(in).
Vec affine_backward(const double* params, const AffineSlot& slot, const Vec& in, const Vec& d_out, double* grad);

/// Identity forward; backward multiplies the incoming gradient by -lambda.
inline Vec grl_forward(const Vec& v) { return v; }
inline Vec grl_backward(const Vec& upstream, double lambda) { return -lambda * upstream; }

struct BranchActivations {
  Embedded input;
  Mat z_p;  // 2H x n, zero on pad steps
  Mat z_a;
  Vec pooled_p;
  Vec pooled_a;
  Vec logits_p;
  Vec logits_a;
  StackCache cache_p;
  StackCache cache_a;
  bool has_protocol = false;
};

/// Embeds and encodes one flow with the given branch. With
/// with_protocol=false, Enc^P and the protocol head are skipped.
BranchActivations encode_branch(const ModelState& state, Branch branch, const FlowSequence& flow,
                                bool with_protocol = true);

/// Adds embedding and encoder gradients for dL/dZ_P and dL/dZ_A.
void branch_backward(const ModelState& state, Branch branch, const BranchActivations& act, const Mat& d_zp,
                     const Mat& d_za, double* grad);

struct Decoded {
  std::vector<int> steps;
  Mat input;  // 4H x n
  StackCache cache;
  Mat hidden;  // 2H x n
  Mat out;     // d x n, zero on pad steps
};

/// Decodes [Z_P; Z_A] per timestep over `steps` (the reconstruction
/// target's valid steps).
Decoded decode(const ModelState& state, const Mat& z_p, const Mat& z_a, std::span<const int> steps);

/// Returns dL/d(input) (4H x n): rows [0, 2H) belong to Z_P, [2H, 4H) to Z_A.
Mat decode_backward(const ModelState& state, const Decoded& dec, const Mat& d_out, double* grad);

struct PairActivations {
  BranchActivations tls;
  BranchActivations tun;
  Decoded self_tls;   // Dec(Z_P_tls, Z_A_tls)
  Decoded self_tun;   // Dec(Z_P_tun, Z_A_tun)
  Decoded cross_tls;  // Dec(Z_P_tls, Z_A_tun)
  Decoded cross_tun;  // Dec(Z_P_tun, Z_A_tls)
};

PairActivations forward_pair(const ParallelFlowPair& pair, const ModelState& state);

struct TunnelInference {
  Vec fingerprint;  // masked mean of Enc^A_tun(Emb(flow)), length 2H
  Vec logits;       // shared app head
  int predicted = 0;
  double confidence = 0.0;
};

/// Tunnel-only inference. Reads the embedding, Enc^A_tun and the app head,
/// nothing else.
TunnelInference infer_tunnel(const ModelState& state, const FlowSequence& flow);

Vec softmax(const Vec& logits);

}  // namespace tunnelfp
