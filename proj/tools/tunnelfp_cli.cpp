// tunnelfp: simulate, ingest, correlate, train, eval, ablate, sweep,
// fingerprint, gradcheck.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tunnelfp/checkpoint.hpp"
#include "tunnelfp/config.hpp"
#include "tunnelfp/fingerprint_eval.hpp"
#include "tunnelfp/gradcheck.hpp"
#include "tunnelfp/ingest.hpp"
#include "tunnelfp/manifest.hpp"
#include "tunnelfp/tunnel_sim.hpp"

namespace fs = std::filesystem;
using namespace tunnelfp;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string ablation;
  std::optional<int> threads;
  std::string checkpoint;
  std::vector<std::string> argv;
};

RunConfig resolve_config(const Globals& g) {
  RunConfig cfg = g.config.empty() ? parse_run_config(nlohmann::json::object()) : load_run_config(g.config);
  if (g.seed) cfg.override_seed(*g.seed);
  if (!g.ablation.empty()) cfg.train.ablation = parse_ablation(g.ablation);
  if (g.threads) cfg.train.threads = *g.threads;
  cfg.validate();
  return cfg;
}

void require_exists(const fs::path& p, const char* what) {
  if (!fs::exists(p)) throw InputError(std::string(what) + " '" + p.string() + "' does not exist");
}

void finish(const Globals& g, const std::string& command, const RunConfig& cfg, const fs::path& out_dir,
            std::vector<fs::path> inputs, std::vector<fs::path> outputs) {
  Manifest m;
  m.command = command;
  m.arguments = g.argv;
  m.config = cfg;
  m.inputs = std::move(inputs);
  for (const auto& o : outputs) m.outputs.push_back(fs::relative(o, out_dir));
  write_manifest(out_dir / "manifest.json", m);
}

struct LoadedPairs {
  int n = 0;
  std::vector<ParallelFlowPair> pairs;
};

/// Concatenates pair files in the order given; all must share n.
LoadedPairs load_pairs(const std::vector<std::string>& files) {
  LoadedPairs out;
  for (const std::string& f : files) {
    require_exists(f, "pairs file");
    PairDataset d = read_dataset(fs::path(f));
    if (out.n != 0 && d.n != out.n)
      throw InputError("pairs file '" + f + "' has n=" + std::to_string(d.n) + ", expected " + std::to_string(out.n));
    out.n = d.n;
    for (auto& p : d.pairs) out.pairs.push_back(std::move(p));
  }
  if (out.pairs.empty()) throw InputError("no pairs loaded");
  return out;
}

/// Adapts pairs to the model's sequence length.
std::vector<ParallelFlowPair> fit_length(std::vector<ParallelFlowPair> pairs, int data_n, int model_n) {
  if (model_n > data_n)
    throw InputError("NetConfig.seq_len " + std::to_string(model_n) + " exceeds dataset n " + std::to_string(data_n));
  if (model_n == data_n) return pairs;
  for (auto& p : pairs) {
    p.tls = retruncate(p.tls, model_n);
    p.tun = retruncate(p.tun, model_n);
  }
  return pairs;
}

std::vector<int> parse_int_list(const std::string& s, const char* what) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(cell, &used));
      if (used != cell.size()) throw std::invalid_argument(cell);
    } catch (const std::exception&) {
      throw InputError(std::string(what) + ": '" + cell + "' is not an integer");
    }
  }
  if (out.empty()) throw InputError(std::string(what) + ": empty list");
  return out;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw InputError("cannot write " + p.string());
  out << text;
}

void write_split(const fs::path& p, const Split& s, std::uint64_t seed) {
  nlohmann::json j = {{"format", "tunnelfp.split"}, {"seed", seed},  {"hash", s.hash()},
                      {"train", s.train},           {"val", s.val}, {"test", s.test}};
  write_text(p, j.dump() + "\n");
}

std::vector<std::size_t> read_split_test(const fs::path& p, std::size_t pair_count) {
  require_exists(p, "split file");
  std::ifstream in(p);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
    if (j.at("format").get<std::string>() != "tunnelfp.split") throw InputError("not a split file");
    auto test = j.at("test").get<std::vector<std::size_t>>();
    for (std::size_t i : test)
      if (i >= pair_count) throw InputError("split index " + std::to_string(i) + " beyond the pair count");
    return test;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("split file '" + p.string() + "': " + e.what());
  }
}

// --- subcommands --------------------------------------------------------------

void cmd_simulate(const Globals& g, const std::string& out) {
  const RunConfig cfg = resolve_config(g);
  const fs::path dir(out);
  fs::create_directories(dir);
  const auto profiles = cfg.simulation.resolve_profiles();
  const auto apps = make_app_models(cfg.simulation.apps, cfg.simulation.options.seed);
  const auto captures = generate_corpus(apps, profiles, cfg.simulation.options);
  std::vector<fs::path> outputs;
  std::vector<fs::path> inputs;
  if (!cfg.simulation.profiles_file.empty()) inputs.push_back(cfg.simulation.profiles_file);
  for (const TunnelCapture& c : captures) {
    const fs::path sub = dir / c.profile.name;
    write_capture(c, cfg.simulation.options.n, sub);
    for (const char* f : {"tls_packets.csv", "tun_packets.csv", "mapping.csv", "tls_labels.csv", "ground_truth.jsonl"})
      outputs.push_back(sub / f);
    std::printf("%s: %zu pairs, %zu reused port pairs\n", c.profile.name.c_str(), c.ground_truth.size(),
                c.reused_sessions);
  }
  write_profiles(dir / "profiles.txt", profiles);
  outputs.push_back(dir / "profiles.txt");
  finish(g, "simulate", cfg, dir, inputs, outputs);
}

void cmd_ingest(const Globals& g, const std::string& capture, const std::string& labels_opt, const std::string& out) {
  const RunConfig cfg = resolve_config(g);
  const fs::path cap(capture);
  const fs::path tls_path = cap / "tls_packets.csv";
  const fs::path tun_path = cap / "tun_packets.csv";
  require_exists(tls_path, "capture file");
  require_exists(tun_path, "capture file");
  const fs::path labels_path = labels_opt.empty() ? cap / "tls_labels.csv" : fs::path(labels_opt);
  std::vector<fs::path> inputs = {tls_path, tun_path};

  const auto n = cfg.correlation.n;
  ReassemblyStats tls_stats, tun_stats;
  auto tls = reassemble(read_packet_records(tls_path), FlowKind::Tls, n, cfg.correlation.idle_timeout, &tls_stats);
  auto tun = reassemble(read_packet_records(tun_path), FlowKind::Tunnel, n, cfg.correlation.idle_timeout, &tun_stats);
  std::size_t labelled = 0;
  if (fs::exists(labels_path)) {
    labelled = apply_labels(tls, read_flow_labels(labels_path));
    inputs.push_back(labels_path);
  } else if (!labels_opt.empty()) {
    require_exists(labels_path, "labels file");
  }
  const fs::path dir(out);
  fs::create_directories(dir);
  write_flows(tls, n, dir / "tls_flows.jsonl");
  write_flows(tun, n, dir / "tun_flows.jsonl");
  std::printf("tls: %zu flows (%zu labelled, %zu zero-payload packets dropped)\n", tls.size(), labelled,
              tls_stats.zero_payload_packets);
  std::printf("tun: %zu flows (%zu zero-payload packets dropped)\n", tun.size(), tun_stats.zero_payload_packets);
  finish(g, "ingest", cfg, dir, inputs, {dir / "tls_flows.jsonl", dir / "tun_flows.jsonl"});
}

void cmd_correlate(const Globals& g, const std::string& flows, const std::string& mapping, const std::string& out) {
  const RunConfig cfg = resolve_config(g);
  const fs::path fdir(flows);
  const fs::path tls_path = fdir / "tls_flows.jsonl";
  const fs::path tun_path = fdir / "tun_flows.jsonl";
  require_exists(tls_path, "flows file");
  require_exists(tun_path, "flows file");
  require_exists(mapping, "mapping table");
  int n_tls = 0, n_tun = 0;
  const auto tls = read_flows(tls_path, &n_tls);
  const auto tun = read_flows(tun_path, &n_tun);
  if (n_tls != n_tun) throw InputError("tls and tunnel flow files disagree on n");
  const CorrelationResult r = correlate(tls, tun, read_mapping_table(fs::path(mapping)), cfg.correlation);
  const fs::path dir(out);
  fs::create_directories(dir);
  write_dataset(r.pairs, n_tls, dir / "pairs.jsonl");
  std::printf("%zu pairs, %zu unmatched tls, %zu unmatched tunnel, %zu unlabelled tls\n", r.pairs.size(),
              r.unmatched_tls, r.unmatched_tun, r.unlabeled_tls);
  finish(g, "correlate", cfg, dir, {tls_path, tun_path, mapping}, {dir / "pairs.jsonl"});
}

void cmd_train(const Globals& g, const std::vector<std::string>& pair_files, const std::string& model,
               const std::string& out) {
  RunConfig cfg = resolve_config(g);
  if (!model.empty()) cfg.train.model = parse_model_kind(model);
  LoadedPairs data = load_pairs(pair_files);
  const auto pairs = fit_length(std::move(data.pairs), data.n, cfg.net.seq_len);
  const fs::path dir(out);
  fs::create_directories(dir);
  std::ofstream log(dir / "train_log.txt", std::ios::trunc);
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& r) {
    const std::string line = format_epoch(r);
    log << line << '\n';
    log.flush();
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
  };
  const TrainResult r = train(pairs, cfg.net, cfg.train, cfg.weights, hooks);
  save_checkpoint(r.state, dir / "model.ckpt");
  write_split(dir / "split.json", r.split, cfg.train.seed);
  std::printf("best epoch %d, validation macro-F1 %.4f\n", r.best_epoch, r.best_val_macro_f1);
  std::vector<fs::path> inputs(pair_files.begin(), pair_files.end());
  finish(g, "train", cfg, dir, inputs, {dir / "model.ckpt", dir / "train_log.txt", dir / "split.json"});
}

void cmd_eval(const Globals& g, const std::vector<std::string>& pair_files, const std::string& split_path,
              const std::string& buckets, const std::string& label, const std::string& out) {
  const RunConfig cfg = resolve_config(g);
  if (g.checkpoint.empty()) throw InputError("eval requires --checkpoint");
  require_exists(g.checkpoint, "checkpoint");
  const ModelState state = load_checkpoint(g.checkpoint);
  LoadedPairs data = load_pairs(pair_files);
  auto pairs = fit_length(std::move(data.pairs), data.n, state.config.seq_len);
  std::vector<fs::path> inputs = {g.checkpoint};
  inputs.insert(inputs.end(), pair_files.begin(), pair_files.end());
  std::vector<ParallelFlowPair> test;
  if (!split_path.empty()) {
    for (std::size_t i : read_split_test(split_path, pairs.size())) test.push_back(pairs[i]);
    inputs.push_back(split_path);
  } else {
    test = std::move(pairs);
  }
  const MetricsReport m = evaluate(test, state);
  std::vector<MetricsRow> rows = {metrics_row(label, state.config.seq_len, m)};
  std::string report = format_report(m, label);
  if (!buckets.empty()) {
    std::vector<FlowSequence> flows;
    for (const auto& p : test) {
      FlowSequence f = p.tun;
      f.label = p.label;
      flows.push_back(std::move(f));
    }
    for (const BucketResult& b : bucketed_eval(flows, state, parse_int_list(buckets, "--buckets"))) {
      MetricsRow row;
      row.variant = label;
      row.n = state.config.seq_len;
      row.bucket = std::to_string(b.lo) + "-" + std::to_string(b.hi);
      row.accuracy = b.accuracy;
      row.support = b.support;
      rows.push_back(row);
      char buf[96];
      std::snprintf(buf, sizeof(buf), "bucket %s: accuracy %.4f (%lld flows)\n", row.bucket.c_str(), b.accuracy,
                    static_cast<long long>(b.support));
      report += buf;
    }
  }
  const fs::path dir(out);
  fs::create_directories(dir);
  write_metrics_csv(dir / "metrics.csv", rows);
  write_text(dir / "report.txt", report);
  std::fputs(report.c_str(), stdout);
  finish(g, "eval", cfg, dir, inputs, {dir / "metrics.csv", dir / "report.txt"});
}

void cmd_ablate(const Globals& g, const std::vector<std::string>& pair_files, const std::string& out) {
  const RunConfig cfg = resolve_config(g);
  LoadedPairs data = load_pairs(pair_files);
  const auto pairs = fit_length(std::move(data.pairs), data.n, cfg.net.seq_len);
  TrainHooks hooks;
  hooks.on_epoch = [](const EpochRecord& r) {
    std::printf("  %s\n", format_epoch(r).c_str());
    std::fflush(stdout);
  };
  const auto rows = ablate(pairs, cfg.net, cfg.train, cfg.weights, hooks);
  std::vector<MetricsRow> table;
  std::string report;
  for (const AblationRow& r : rows) {
    table.push_back(metrics_row(variant_name(r.variant), cfg.net.seq_len, r.metrics));
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-5s macro-F1 %.4f accuracy %.4f best-epoch %d split %016llx\n",
                  variant_name(r.variant).c_str(), r.metrics.macro_f1, r.metrics.accuracy, r.best_epoch,
                  static_cast<unsigned long long>(r.split_hash));
    report += buf;
  }
  const fs::path dir(out);
  fs::create_directories(dir);
  write_metrics_csv(dir / "metrics.csv", table);
  write_text(dir / "report.txt", report);
  std::fputs(report.c_str(), stdout);
  finish(g, "ablate", cfg, dir, {pair_files.begin(), pair_files.end()}, {dir / "metrics.csv", dir / "report.txt"});
}

void cmd_sweep(const Globals& g, const std::vector<std::string>& pair_files, const std::string& lengths,
               const std::string& out) {
  const RunConfig cfg = resolve_config(g);
  const LoadedPairs data = load_pairs(pair_files);
  const auto rows = sequence_length_sweep(data.pairs, data.n, parse_int_list(lengths, "--lengths"), cfg.net,
                                          cfg.train, cfg.weights);
  std::vector<MetricsRow> table;
  std::string report;
  for (const SweepRow& r : rows) {
    table.push_back(metrics_row(variant_name(cfg.train.ablation), r.n, r.metrics));
    char buf[128];
    std::snprintf(buf, sizeof(buf), "n=%d macro-F1 %.4f accuracy %.4f best-epoch %d\n", r.n, r.metrics.macro_f1,
                  r.metrics.accuracy, r.best_epoch);
    report += buf;
  }
  const fs::path dir(out);
  fs::create_directories(dir);
  write_metrics_csv(dir / "metrics.csv", table);
  write_text(dir / "report.txt", report);
  std::fputs(report.c_str(), stdout);
  finish(g, "sweep", cfg, dir, {pair_files.begin(), pair_files.end()}, {dir / "metrics.csv", dir / "report.txt"});
}

void cmd_fingerprint(const Globals& g, const std::vector<std::string>& pair_files, const std::string& split_path,
                     const std::string& out) {
  const RunConfig cfg = resolve_config(g);
  if (g.checkpoint.empty()) throw InputError("fingerprint requires --checkpoint");
  require_exists(g.checkpoint, "checkpoint");
  const ModelState state = load_checkpoint(g.checkpoint);
  LoadedPairs data = load_pairs(pair_files);
  const auto pairs = fit_length(std::move(data.pairs), data.n, state.config.seq_len);
  std::vector<fs::path> inputs = {g.checkpoint};
  inputs.insert(inputs.end(), pair_files.begin(), pair_files.end());
  std::vector<FlowSequence> flows;
  auto add = [&](const ParallelFlowPair& p) {
    FlowSequence f = p.tun;
    f.label = p.label;
    flows.push_back(std::move(f));
  };
  if (!split_path.empty()) {
    for (std::size_t i : read_split_test(split_path, pairs.size())) add(pairs[i]);
    inputs.push_back(split_path);
  } else {
    for (const auto& p : pairs) add(p);
  }
  const fs::path dir(out);
  fs::create_directories(dir);
  const std::size_t rows = export_fingerprints(flows, state, dir / "fingerprints.csv");
  std::printf("%zu fingerprints written\n", rows);
  finish(g, "fingerprint", cfg, dir, inputs, {dir / "fingerprints.csv"});
}

int cmd_gradcheck(const Globals& g, double tolerance) {
  const RunConfig cfg = resolve_config(g);
  GradCheckOptions opts;
  opts.seed = cfg.train.seed;
  opts.tolerance = tolerance;
  opts.weights = cfg.weights;
  opts.ablation = cfg.train.ablation;
  const GradCheckReport r = grad_check(opts);
  for (const GroupError& e : r.groups)
    std::printf("%-16s rel_error %.3e  (|analytic| %.3e, |numeric| %.3e, %zu params)\n", e.group.c_str(), e.rel_error,
                e.analytic_norm, e.numeric_norm, e.size);
  std::printf("worst %.3e tolerance %.1e %s\n", r.worst(), r.tolerance, r.passed() ? "PASS" : "FAIL");
  if (!r.passed()) {
    std::string names;
    for (const auto& n : r.failing()) names += (names.empty() ? "" : ",") + n;
    std::fprintf(stderr, "tunnelfp: error[gradcheck]: groups above tolerance: %s\n", names.c_str());
    return 1;
  }
  return 0;
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"App fingerprinting over encrypted tunnels"};
  app.require_subcommand(1);
  Globals g;
  g.argv.assign(argv + 1, argv + argc);
  app.add_option("--config", g.config, "JSON run configuration");
  app.add_option("--seed", g.seed, "overrides every seed in the configuration");
  app.add_option("--ablation", g.ablation, "severed loss term: none|src|psm|cpd|asa|asc");
  app.add_option("--threads", g.threads, "worker threads per batch (default 1)");
  app.add_option("--checkpoint", g.checkpoint, "model checkpoint (eval, fingerprint)");
  app.fallthrough();

  std::string out, capture, labels, flows, mapping, model, split, buckets, label = "eval", lengths = "20,200";
  std::vector<std::string> pairs;
  double tolerance = 1e-4;
  int status = 0;

  auto* sim = app.add_subcommand("simulate", "generate per-profile synthetic captures");
  sim->add_option("--out", out, "output directory")->required();

  auto* ing = app.add_subcommand("ingest", "reassemble packet records into flow sequences");
  ing->add_option("--capture", capture, "directory with tls_packets.csv and tun_packets.csv")->required();
  ing->add_option("--labels", labels, "TLS flow labels (default: <capture>/tls_labels.csv)");
  ing->add_option("--out", out, "output directory")->required();

  auto* cor = app.add_subcommand("correlate", "pair TLS and tunnel flows through the mapping table");
  cor->add_option("--flows", flows, "directory with tls_flows.jsonl and tun_flows.jsonl")->required();
  cor->add_option("--mapping", mapping, "mapping table CSV")->required();
  cor->add_option("--out", out, "output directory")->required();

  auto* tr = app.add_subcommand("train", "train a model on one or more pair files");
  tr->add_option("--pairs", pairs, "pair dataset (repeatable; concatenated)")->required();
  tr->add_option("--model", model, "decett|tunnel_only (default from config)");
  tr->add_option("--out", out, "output directory")->required();

  auto* ev = app.add_subcommand("eval", "tunnel-only evaluation of a checkpoint");
  ev->add_option("--pairs", pairs, "pair dataset (repeatable)")->required();
  ev->add_option("--split", split, "split.json from train; evaluates its test part");
  ev->add_option("--buckets", buckets, "comma-separated length bucket edges, e.g. 1,10,20,200");
  ev->add_option("--label", label, "variant label in metrics.csv");
  ev->add_option("--out", out, "output directory")->required();

  auto* ab = app.add_subcommand("ablate", "train Full and the five single-term ablations");
  ab->add_option("--pairs", pairs, "pair dataset (repeatable)")->required();
  ab->add_option("--out", out, "output directory")->required();

  auto* sw = app.add_subcommand("sweep", "retrain at several sequence lengths");
  sw->add_option("--pairs", pairs, "pair dataset (repeatable)")->required();
  sw->add_option("--lengths", lengths, "comma-separated lengths");
  sw->add_option("--out", out, "output directory")->required();

  auto* fp = app.add_subcommand("fingerprint", "export tunnel fingerprints");
  fp->add_option("--pairs", pairs, "pair dataset (repeatable)")->required();
  fp->add_option("--split", split, "split.json; exports its test part");
  fp->add_option("--out", out, "output directory")->required();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check on the tiny configuration");
  gc->add_option("--tolerance", tolerance, "maximum relative error per parameter group");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*sim) cmd_simulate(g, out);
    else if (*ing) cmd_ingest(g, capture, labels, out);
    else if (*cor) cmd_correlate(g, flows, mapping, out);
    else if (*tr) cmd_train(g, pairs, model, out);
    else if (*ev) cmd_eval(g, pairs, split, buckets, label, out);
    else if (*ab) cmd_ablate(g, pairs, out);
    else if (*sw) cmd_sweep(g, pairs, lengths, out);
    else if (*fp) cmd_fingerprint(g, pairs, split, out);
    else if (*gc) status = cmd_gradcheck(g, tolerance);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "tunnelfp: error[config]: %s\n", one_line(e.what()).c_str());
    return 2;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "tunnelfp: error[checkpoint]: %s\n", one_line(e.what()).c_str());
    return 1;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "tunnelfp: error[format]: %s\n", one_line(e.what()).c_str());
    return 1;
  } catch (const InputError& e) {
    std::fprintf(stderr, "tunnelfp: error[input]: %s\n", one_line(e.what()).c_str());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "tunnelfp: error[runtime]: %s\n", one_line(e.what()).c_str());
    return 1;
  }
  return status;
}
