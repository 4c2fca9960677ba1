#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "tunnelfp/losses.hpp"
#include "tunnelfp/metrics.hpp"

namespace tunnelfp {

struct TrainConfig {
  int batch_size = 256;
  double learning_rate = 1e-3;
  int max_epochs = 100;
  int patience = 10;
  std::uint64_t seed = 7;
  double train_fraction = 0.8;
  double val_fraction = 0.1;
  double test_fraction = 0.1;
  Ablation ablation = Ablation::None;
  ModelKind model = ModelKind::DecEtt;
  int threads = 1;

  void validate() const;
};

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;

  /// Order-sensitive digest of the three index lists.
  std::uint64_t hash() const;
};

/// Per class: shuffle that class's pair indices with a seeded generator and
/// cut round(f_train * m) / round(f_val * m) / rest. Throws InputError when
/// a class in [0, classes) has no training pair.
Split stratified_split(std::span<const ParallelFlowPair> pairs, int classes, const TrainConfig& cfg);

struct EpochRecord {
  int epoch = 0;
  LossReport train;  // mean over training pairs
  double val_accuracy = 0.0;
  double val_macro_f1 = 0.0;
};

/// One line of structured text with every LossReport field and the
/// validation metrics.
std::string format_epoch(const EpochRecord& r);

struct TrainResult {
  ModelState state;  // best validation state
  std::vector<EpochRecord> history;
  Split split;
  int best_epoch = 0;
  double best_val_macro_f1 = 0.0;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;
};

/// One Adam update (beta 0.9/0.999, eps 1e-8) with bias correction.
void adam_step(std::vector<double>& params, const std::vector<double>& grad, AdamState& opt, double lr);

struct TrainHooks {
  std::function<void(const EpochRecord&)> on_epoch;
};

TrainResult train(std::span<const ParallelFlowPair> pairs, const NetConfig& net, const TrainConfig& cfg,
                  const LossWeights& weights, const TrainHooks& hooks = {});

/// Same as train() on an existing split (for experiments that must share it).
TrainResult train_on_split(std::span<const ParallelFlowPair> pairs, const Split& split, const NetConfig& net,
                           const TrainConfig& cfg, const LossWeights& weights, const TrainHooks& hooks = {});

/// Tunnel-branch app-head metrics over pairs[indices].
MetricsReport evaluate_indices(const ModelState& state, std::span<const ParallelFlowPair> pairs,
                               std::span<const std::size_t> indices);

}  // namespace tunnelfp
