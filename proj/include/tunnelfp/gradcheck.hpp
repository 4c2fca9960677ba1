#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tunnelfp/losses.hpp"

namespace tunnelfp {

struct GradCheckOptions {
  NetConfig net{.vocab = kVocabSize, .embed_dim = 4, .hidden = 3, .seq_len = 6, .classes = 3, .grl_lambda = 1.0};
  int batch = 2;
  std::uint64_t seed = 7;
  double step = 1e-3;
  double tolerance = 1e-4;
  LossWeights weights;
  Ablation ablation = Ablation::None;
};

struct GroupError {
  std::string group;
  double rel_error = 0.0;
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
  std::size_t size = 0;
};

struct GradCheckReport {
  std::vector<GroupError> groups;
  double tolerance = 0.0;

  double worst() const;
  bool passed() const { return worst() <= tolerance; }
  /// Names of groups above tolerance.
  std::vector<std::string> failing() const;
};

/// Random pairs with random valid lengths in [1, n] and random tokens over
/// the full vocabulary.
std::vector<ParallelFlowPair> random_pairs(const NetConfig& net, int count, std::uint64_t seed);

/// Central differences of the batch objective against the analytic gradient,
/// per parameter group. Reconstruction targets are held fixed. The reversal
/// layer makes the analytic field differ from d(total) on parameters that
/// feed the protocol heads' inputs; there the oracle is
/// FD(total) + lambda2 * (-grl_lambda - 1) * FD(psm).
GradCheckReport grad_check(const GradCheckOptions& opts);

/// Same comparison on a caller-provided state and batch.
GradCheckReport grad_check(const ModelState& state, const std::vector<ParallelFlowPair>& pairs,
                           const GradCheckOptions& opts);

struct GrlCheck {
  bool exact = false;  // every Enc^P entry satisfies g_grl == -g_identity
  std::size_t compared = 0;
  std::size_t nonzero = 0;
  double max_abs_gap = 0.0;  // max |g_grl + g_identity|
};

/// Gradient of lambda2 * PSM alone with the reversal active versus replaced
/// by identity, compared on every Enc^P parameter of both branches.
GrlCheck grl_negation_check(const ModelState& state, const std::vector<ParallelFlowPair>& pairs);

}  // namespace tunnelfp
