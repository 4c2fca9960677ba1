#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace tunnelfp {

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::int64_t support = 0;  // true instances
};

/// Multi-class report. Classes with a zero denominator score 0 for that
/// quantity and still count in the unweighted macro means.
struct MetricsReport {
  int classes = 0;
  std::int64_t total = 0;
  std::vector<std::vector<std::int64_t>> confusion;  // [true][predicted]
  std::vector<ClassMetrics> per_class;
  double accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
};

MetricsReport metrics_from_confusion(const std::vector<std::vector<std::int64_t>>& confusion);
MetricsReport compute_metrics(std::span<const int> truth, std::span<const int> predicted, int classes);

/// Plain-text rendering with the per-class table.
std::string format_report(const MetricsReport& m, const std::string& title = "");

}  // namespace tunnelfp
