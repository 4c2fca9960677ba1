#include "tunnelfp/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "tunnelfp/rng.hpp"

namespace tunnelfp {

namespace {

constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kShuffleStream = 2;
constexpr std::uint64_t kSplitStream = 3;

}  // namespace

void TrainConfig::validate() const {
  if (batch_size < 1) throw InputError("TrainConfig: batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw InputError("TrainConfig: learning_rate must be positive");
  if (max_epochs < 1) throw InputError("TrainConfig: max_epochs must be >= 1");
  if (patience < 1) throw InputError("TrainConfig: patience must be >= 1");
  if (threads < 1) throw InputError("TrainConfig: threads must be >= 1");
  for (double f : {train_fraction, val_fraction, test_fraction})
    if (!(f >= 0.0 && f <= 1.0)) throw InputError("TrainConfig: split fractions must lie in [0, 1]");
  if (std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9)
    throw InputError("TrainConfig: split fractions must sum to 1");
}

std::uint64_t Split::hash() const {
  std::uint64_t h = 0x5EED;
  for (const auto* part : {&train, &val, &test}) {
    h = mix_seed(h, part->size());
    for (std::size_t i : *part) h = mix_seed(h, i);
  }
  return h;
}

Split stratified_split(std::span<const ParallelFlowPair> pairs, int classes, const TrainConfig& cfg) {
  cfg.validate();
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(classes));
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const int y = pairs[i].label;
    if (y < 0 || y >= classes)
      throw InputError("pair " + std::to_string(i) + " has label " + std::to_string(y) + " outside [0, " +
                       std::to_string(classes) + ")");
    by_class[static_cast<std::size_t>(y)].push_back(i);
  }
  Split s;
  for (int c = 0; c < classes; ++c) {
    auto& idx = by_class[static_cast<std::size_t>(c)];
    Rng rng(mix_seed(cfg.seed, kSplitStream, static_cast<std::uint64_t>(c)));
    rng.shuffle(idx.begin(), idx.end());
    const auto m = static_cast<double>(idx.size());
    auto n_train = static_cast<std::size_t>(std::llround(cfg.train_fraction * m));
    auto n_val = static_cast<std::size_t>(std::llround(cfg.val_fraction * m));
    n_train = std::min(n_train, idx.size());
    n_val = std::min(n_val, idx.size() - n_train);
    if (n_train == 0) throw InputError("class " + std::to_string(c) + " has no pair in the training split");
    s.train.insert(s.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.val.insert(s.val.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train),
                 idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    s.test.insert(s.test.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

std::string format_epoch(const EpochRecord& r) {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "epoch=%d src=%.17g psm=%.17g cpd=%.17g asa=%.17g asc=%.17g frd=%.17g afa=%.17g total=%.17g "
                "val_accuracy=%.17g val_macro_f1=%.17g",
                r.epoch, r.train.src, r.train.psm, r.train.cpd, r.train.asa, r.train.asc, r.train.frd, r.train.afa,
                r.train.total, r.val_accuracy, r.val_macro_f1);
  return buf;
}

void adam_step(std::vector<double>& params, const std::vector<double>& grad, AdamState& opt, double lr) {
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  if (opt.m.size() != params.size()) {
    opt.m.assign(params.size(), 0.0);
    opt.v.assign(params.size(), 0.0);
    opt.t = 0;
  }
  ++opt.t;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(opt.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(opt.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i];
    opt.m[i] = b1 * opt.m[i] + (1.0 - b1) * g;
    opt.v[i] = b2 * opt.v[i] + (1.0 - b2) * g * g;
    params[i] -= lr * (opt.m[i] / c1) / (std::sqrt(opt.v[i] / c2) + eps);
  }
}

MetricsReport evaluate_indices(const ModelState& state, std::span<const ParallelFlowPair> pairs,
                               std::span<const std::size_t> indices) {
  std::vector<int> truth, pred;
  truth.reserve(indices.size());
  pred.reserve(indices.size());
  for (std::size_t i : indices) {
    truth.push_back(pairs[i].label);
    pred.push_back(infer_tunnel(state, pairs[i].tun).predicted);
  }
  return compute_metrics(truth, pred, state.config.classes);
}

TrainResult train(std::span<const ParallelFlowPair> pairs, const NetConfig& net, const TrainConfig& cfg,
                  const LossWeights& weights, const TrainHooks& hooks) {
  return train_on_split(pairs, stratified_split(pairs, net.classes, cfg), net, cfg, weights, hooks);
}

TrainResult train_on_split(std::span<const ParallelFlowPair> pairs, const Split& split, const NetConfig& net,
                           const TrainConfig& cfg, const LossWeights& weights, const TrainHooks& hooks) {
  net.validate();
  cfg.validate();
  weights.validate();
  if (split.train.empty()) throw InputError("train: empty training split");
  for (const ParallelFlowPair& p : pairs) {
    if (p.tls.length() != net.seq_len || p.tun.length() != net.seq_len)
      throw InputError("train: flow length differs from NetConfig.seq_len " + std::to_string(net.seq_len));
  }

  ObjectiveOptions opts;
  opts.weights = weights;
  opts.ablation = cfg.ablation;
  opts.kind = cfg.model;

  TrainResult result;
  result.split = split;
  ModelState state = ModelState::initialize(net, mix_seed(cfg.seed, kInitStream));
  result.state = state;
  result.best_val_macro_f1 = -1.0;
  AdamState opt;
  std::vector<double> grad;
  std::vector<std::size_t> order = split.train;
  std::vector<const ParallelFlowPair*> batch;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng rng(mix_seed(cfg.seed, kShuffleStream, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order.begin(), order.end());
    EpochRecord rec;
    rec.epoch = epoch;
    for (std::size_t lo = 0; lo < order.size(); lo += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t hi = std::min(order.size(), lo + static_cast<std::size_t>(cfg.batch_size));
      batch.clear();
      for (std::size_t i = lo; i < hi; ++i) batch.push_back(&pairs[order[i]]);
      LossReport r = batch_objective(state, batch, opts, &grad, cfg.threads);
      r *= static_cast<double>(hi - lo);
      rec.train += r;
      adam_step(state.params, grad, opt, cfg.learning_rate);
      ++state.step;
    }
    rec.train *= 1.0 / static_cast<double>(order.size());
    if (!state.all_finite()) throw std::runtime_error("train: parameters became non-finite at epoch " +
                                                      std::to_string(epoch));

    const bool has_val = !split.val.empty();
    if (has_val) {
      const MetricsReport m = evaluate_indices(state, pairs, split.val);
      rec.val_accuracy = m.accuracy;
      rec.val_macro_f1 = m.macro_f1;
    }
    result.history.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);

    if (!has_val || rec.val_macro_f1 > result.best_val_macro_f1) {
      result.best_val_macro_f1 = rec.val_macro_f1;
      result.best_epoch = epoch;
      result.state = state;
    } else if (epoch - result.best_epoch >= cfg.patience) {
      break;
    }
  }
  return result;
}

}  // namespace tunnelfp
