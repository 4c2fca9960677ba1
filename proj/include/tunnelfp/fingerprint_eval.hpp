#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tunnelfp/train.hpp"

namespace tunnelfp {

struct Fingerprint {
  Vec vector;  // 2H
  std::string flow_ref;
  int predicted = 0;
  double confidence = 0.0;
  std::optional<int> label;
};

/// Reference used in exports: "<5-tuple>@<start_time>".
std::string flow_ref(const FlowSequence& flow);

Fingerprint fingerprint(const FlowSequence& flow, const ModelState& state);

/// Tunnel-only metrics; every flow must carry a label.
MetricsReport evaluate(std::span<const FlowSequence> flows, const ModelState& state);
/// Uses the tunnel side of each pair and the pair label.
MetricsReport evaluate(std::span<const ParallelFlowPair> pairs, const ModelState& state);

struct AblationRow {
  Ablation variant = Ablation::None;
  MetricsReport metrics;  // test split
  std::uint64_t split_hash = 0;
  int best_epoch = 0;
};

/// Six runs on one shared split, differing only in the severed term.
std::vector<AblationRow> ablate(std::span<const ParallelFlowPair> pairs, const NetConfig& net, const TrainConfig& cfg,
                                const LossWeights& weights, const TrainHooks& hooks = {},
                                std::span<const Ablation> variants = kAllVariants);

struct BucketResult {
  int lo = 0;  // inclusive
  int hi = 0;  // exclusive, except the last bucket which includes it
  std::int64_t support = 0;
  std::int64_t correct = 0;
  double accuracy = 0.0;
};

/// Buckets [e_i, e_{i+1}) with the last one closed. Edges must be strictly
/// increasing and start at 1. Buckets without flows are omitted.
std::vector<BucketResult> bucketed_eval(std::span<const FlowSequence> flows, const ModelState& state,
                                        std::span<const int> edges);

struct SweepRow {
  int n = 0;
  MetricsReport metrics;
  int best_epoch = 0;
  int max_true_len = 0;  // largest true_len seen after re-truncation
};

/// Re-truncates every pair to each n and retrains with the same seed and
/// config. Lengths must not exceed the dataset's n.
std::vector<SweepRow> sequence_length_sweep(std::span<const ParallelFlowPair> pairs, int dataset_n,
                                            std::span<const int> lengths, const NetConfig& net,
                                            const TrainConfig& cfg, const LossWeights& weights,
                                            const TrainHooks& hooks = {});

/// CSV: flow_ref,label,predicted,fp_0..fp_{2H-1}. Returns rows written.
std::size_t export_fingerprints(std::span<const FlowSequence> flows, const ModelState& state,
                                const std::filesystem::path& path);

struct MetricsRow {
  std::string variant;
  int n = 0;
  std::string bucket;  // "all" or "lo-hi"
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::int64_t support = 0;
};

MetricsRow metrics_row(const std::string& variant, int n, const MetricsReport& m);
void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsRow> rows);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

}  // namespace tunnelfp
