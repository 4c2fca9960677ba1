#include "tunnelfp/metrics.hpp"

#include <cstdio>

#include "tunnelfp/core_types.hpp"

namespace tunnelfp {

namespace {

double ratio(std::int64_t num, std::int64_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

MetricsReport metrics_from_confusion(const std::vector<std::vector<std::int64_t>>& confusion) {
  const int c = static_cast<int>(confusion.size());
  if (c < 1) throw InputError("metrics: no classes");
  MetricsReport m;
  m.classes = c;
  m.confusion = confusion;
  m.per_class.resize(static_cast<std::size_t>(c));
  std::vector<std::int64_t> col_sum(static_cast<std::size_t>(c), 0);
  std::int64_t trace = 0;
  for (int i = 0; i < c; ++i) {
    const auto& row = confusion[static_cast<std::size_t>(i)];
    if (static_cast<int>(row.size()) != c) throw InputError("metrics: confusion matrix is not square");
    for (int j = 0; j < c; ++j) {
      const std::int64_t v = row[static_cast<std::size_t>(j)];
      if (v < 0) throw InputError("metrics: negative confusion count");
      m.total += v;
      col_sum[static_cast<std::size_t>(j)] += v;
      m.per_class[static_cast<std::size_t>(i)].support += v;
    }
    trace += row[static_cast<std::size_t>(i)];
  }
  m.accuracy = ratio(trace, m.total);
  for (int i = 0; i < c; ++i) {
    ClassMetrics& k = m.per_class[static_cast<std::size_t>(i)];
    const std::int64_t tp = confusion[static_cast<std::size_t>(i)][static_cast<std::size_t>(i)];
    k.precision = ratio(tp, col_sum[static_cast<std::size_t>(i)]);
    k.recall = ratio(tp, k.support);
    // 2tp / (2tp + fp + fn) equals the harmonic mean of P and R and is 0
    // whenever either is.
    k.f1 = ratio(2 * tp, col_sum[static_cast<std::size_t>(i)] + k.support);
    m.macro_precision += k.precision;
    m.macro_recall += k.recall;
    m.macro_f1 += k.f1;
  }
  m.macro_precision /= c;
  m.macro_recall /= c;
  m.macro_f1 /= c;
  return m;
}

MetricsReport compute_metrics(std::span<const int> truth, std::span<const int> predicted, int classes) {
  if (truth.size() != predicted.size()) throw InputError("metrics: truth and prediction lengths differ");
  if (classes < 1) throw InputError("metrics: class count must be positive");
  std::vector<std::vector<std::int64_t>> conf(static_cast<std::size_t>(classes),
                                              std::vector<std::int64_t>(static_cast<std::size_t>(classes), 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int t = truth[i];
    const int p = predicted[i];
    if (t < 0 || t >= classes || p < 0 || p >= classes) throw InputError("metrics: label outside class range");
    ++conf[static_cast<std::size_t>(t)][static_cast<std::size_t>(p)];
  }
  return metrics_from_confusion(conf);
}

std::string format_report(const MetricsReport& m, const std::string& title) {
  std::string out;
  char buf[160];
  if (!title.empty()) out += title + "\n";
  std::snprintf(buf, sizeof(buf), "samples %lld  accuracy %.4f  macro-P %.4f  macro-R %.4f  macro-F1 %.4f\n",
                static_cast<long long>(m.total), m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1);
  out += buf;
  out += "class  precision  recall  f1      support\n";
  for (std::size_t i = 0; i < m.per_class.size(); ++i) {
    const ClassMetrics& k = m.per_class[i];
    std::snprintf(buf, sizeof(buf), "%5zu  %9.4f  %6.4f  %6.4f  %lld\n", i, k.precision, k.recall, k.f1,
                  static_cast<long long>(k.support));
    out += buf;
  }
  return out;
}

}  // namespace tunnelfp
