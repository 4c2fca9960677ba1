#include "tunnelfp/fingerprint_eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace tunnelfp {

std::string flow_ref(const FlowSequence& flow) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "@%.6f", flow.start_time);
  return to_string(flow.key) + buf;
}

Fingerprint fingerprint(const FlowSequence& flow, const ModelState& state) {
  const TunnelInference inf = infer_tunnel(state, flow);
  Fingerprint fp;
  fp.vector = inf.fingerprint;
  fp.flow_ref = flow_ref(flow);
  fp.predicted = inf.predicted;
  fp.confidence = inf.confidence;
  fp.label = flow.label;
  return fp;
}

MetricsReport evaluate(std::span<const FlowSequence> flows, const ModelState& state) {
  if (flows.empty()) throw InputError("evaluate: empty test set");
  std::vector<int> truth, pred;
  for (std::size_t i = 0; i < flows.size(); ++i) {
    if (!flows[i].label) throw InputError("evaluate: flow " + std::to_string(i) + " has no label");
    truth.push_back(*flows[i].label);
    pred.push_back(infer_tunnel(state, flows[i]).predicted);
  }
  return compute_metrics(truth, pred, state.config.classes);
}

MetricsReport evaluate(std::span<const ParallelFlowPair> pairs, const ModelState& state) {
  if (pairs.empty()) throw InputError("evaluate: empty test set");
  std::vector<int> truth, pred;
  for (const ParallelFlowPair& p : pairs) {
    truth.push_back(p.label);
    pred.push_back(infer_tunnel(state, p.tun).predicted);
  }
  return compute_metrics(truth, pred, state.config.classes);
}

std::vector<AblationRow> ablate(std::span<const ParallelFlowPair> pairs, const NetConfig& net, const TrainConfig& cfg,
                                const LossWeights& weights, const TrainHooks& hooks,
                                std::span<const Ablation> variants) {
  const Split split = stratified_split(pairs, net.classes, cfg);
  if (split.test.empty()) throw InputError("ablate: empty test split");
  std::vector<AblationRow> rows;
  for (Ablation a : variants) {
    TrainConfig c = cfg;
    c.ablation = a;
    c.model = ModelKind::DecEtt;
    const TrainResult r = train_on_split(pairs, split, net, c, weights, hooks);
    AblationRow row;
    row.variant = a;
    row.metrics = evaluate_indices(r.state, pairs, split.test);
    row.split_hash = r.split.hash();
    row.best_epoch = r.best_epoch;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<BucketResult> bucketed_eval(std::span<const FlowSequence> flows, const ModelState& state,
                                        std::span<const int> edges) {
  if (edges.size() < 2) throw InputError("bucketed_eval: need at least two edges");
  if (edges.front() != 1) throw InputError("bucketed_eval: first edge must be 1");
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (edges[i] <= edges[i - 1]) throw InputError("bucketed_eval: edges must be strictly increasing");
  const std::size_t nb = edges.size() - 1;
  std::vector<BucketResult> all(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    all[b].lo = edges[b];
    all[b].hi = edges[b + 1];
  }
  for (std::size_t i = 0; i < flows.size(); ++i) {
    const FlowSequence& f = flows[i];
    if (!f.label) throw InputError("bucketed_eval: flow " + std::to_string(i) + " has no label");
    const int len = f.true_len;
    if (len < edges.front() || len > edges.back())
      throw InputError("bucketed_eval: flow length " + std::to_string(len) + " outside the bucket range");
    std::size_t b = 0;
    while (b + 1 < nb && len >= edges[b + 1]) ++b;
    ++all[b].support;
    if (infer_tunnel(state, f).predicted == *f.label) ++all[b].correct;
  }
  std::vector<BucketResult> out;
  for (BucketResult& b : all) {
    if (b.support == 0) continue;
    b.accuracy = static_cast<double>(b.correct) / static_cast<double>(b.support);
    out.push_back(b);
  }
  return out;
}

std::vector<SweepRow> sequence_length_sweep(std::span<const ParallelFlowPair> pairs, int dataset_n,
                                            std::span<const int> lengths, const NetConfig& net,
                                            const TrainConfig& cfg, const LossWeights& weights,
                                            const TrainHooks& hooks) {
  std::vector<SweepRow> rows;
  for (int n : lengths) {
    if (n < 1 || n > dataset_n)
      throw InputError("sequence_length_sweep: n=" + std::to_string(n) + " outside [1, " +
                       std::to_string(dataset_n) + "]");
    std::vector<ParallelFlowPair> cut;
    cut.reserve(pairs.size());
    SweepRow row;
    row.n = n;
    for (const ParallelFlowPair& p : pairs) {
      ParallelFlowPair c = p;
      c.tls = retruncate(p.tls, n);
      c.tun = retruncate(p.tun, n);
      row.max_true_len = std::max({row.max_true_len, c.tls.true_len, c.tun.true_len});
      cut.push_back(std::move(c));
    }
    NetConfig nc = net;
    nc.seq_len = n;
    const TrainResult r = train(cut, nc, cfg, weights, hooks);
    if (r.split.test.empty()) throw InputError("sequence_length_sweep: empty test split");
    row.metrics = evaluate_indices(r.state, cut, r.split.test);
    row.best_epoch = r.best_epoch;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::size_t export_fingerprints(std::span<const FlowSequence> flows, const ModelState& state,
                                const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  const int dim = 2 * state.config.hidden;
  out << "flow_ref,label,predicted";
  for (int i = 0; i < dim; ++i) out << ",fp_" << i;
  out << '\n';
  char buf[32];
  for (const FlowSequence& f : flows) {
    const Fingerprint fp = fingerprint(f, state);
    out << fp.flow_ref << ',' << (fp.label ? std::to_string(*fp.label) : std::string()) << ',' << fp.predicted;
    for (Eigen::Index i = 0; i < fp.vector.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.17g", fp.vector(i));
      out << ',' << buf;
    }
    out << '\n';
  }
  if (!out) throw InputError("write failed for " + path.string());
  return flows.size();
}

MetricsRow metrics_row(const std::string& variant, int n, const MetricsReport& m) {
  return {variant, n, "all", m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1, m.total};
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsRow> rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot write " + path.string());
  out << "variant,n,bucket,accuracy,precision,recall,f1,support\n";
  char buf[256];
  for (const MetricsRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%d,%s,%.17g,%.17g,%.17g,%.17g,%lld\n", r.variant.c_str(), r.n,
                  r.bucket.c_str(), r.accuracy, r.precision, r.recall, r.f1, static_cast<long long>(r.support));
    out << buf;
  }
  if (!out) throw InputError("write failed for " + path.string());
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "variant,n,bucket,accuracy,precision,recall,f1,support")
    throw InputError(path.string() + ": unexpected metrics header");
  std::vector<MetricsRow> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw InputError(path.string() + ":" + std::to_string(line_no) + ": expected 8 fields");
    try {
      rows.push_back({f[0], std::stoi(f[1]), f[2], std::stod(f[3]), std::stod(f[4]), std::stod(f[5]),
                      std::stod(f[6]), std::stoll(f[7])});
    } catch (const std::exception&) {
      throw InputError(path.string() + ":" + std::to_string(line_no) + ": malformed number");
    }
  }
  return rows;
}

}  // namespace tunnelfp
