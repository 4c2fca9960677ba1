#pragma once

// Network configuration, flat parameter layout and the checkpointable model
// state. All trainable tensors live in one contiguous buffer; gradients and
// optimizer moments reuse the same layout.

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tunnelfp/core_types.hpp"

namespace tunnelfp {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;
using VecMap = Eigen::Map<Vec>;
using ConstVecMap = Eigen::Map<const Vec>;

struct NetConfig {
  int vocab = kVocabSize;
  int embed_dim = 128;  // d
  int hidden = 128;     // GRU hidden size H
  int seq_len = kDefaultSeqLen;
  int classes = 10;
  double grl_lambda = 1.0;

  void validate() const;
  bool operator==(const NetConfig&) const = default;
};

enum class Branch : int { Tls = 0, Tun = 1 };

inline const char* branch_name(Branch b) { return b == Branch::Tls ? "tls" : "tun"; }

struct GruSlot {
  std::size_t w = 0;  // 3H x in, gate rows ordered [reset; update; candidate]
  std::size_t u = 0;  // 3H x H
  std::size_t b = 0;  // 3H
  int in = 0;
  int hidden = 0;
};

struct BiGruSlot {
  GruSlot fwd;
  GruSlot bwd;
};

/// Two stacked bidirectional layers; layer 1 consumes layer 0's 2H output.
struct StackSlot {
  std::array<BiGruSlot, 2> layers;
};

struct AffineSlot {
  std::size_t w = 0;  // out x in
  std::size_t b = 0;  // out
  int in = 0;
  int out = 0;
};

struct ParamEntry {
  std::string name;
  std::string group;
  std::size_t offset = 0;
  int rows = 0;
  int cols = 0;
  double init_scale = 0.0;  // uniform(-s, s); 0 means zero-initialized

  std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

struct ParamGroup {
  std::string name;
  std::size_t begin = 0;
  std::size_t end = 0;
};

struct ModelLayout {
  std::size_t embedding = 0;  // d x vocab, one column per token
  struct BranchSlots {
    StackSlot enc_p;
    StackSlot enc_a;
    AffineSlot proto_head;
  };
  std::array<BranchSlots, 2> branches;
  StackSlot decoder;
  AffineSlot decoder_out;
  AffineSlot app_head;

  std::vector<ParamEntry> entries;
  std::vector<ParamGroup> groups;
  std::size_t total = 0;

  static ModelLayout build(const NetConfig& cfg);

  const BranchSlots& branch(Branch b) const { return branches[static_cast<std::size_t>(b)]; }
  const ParamGroup& group(const std::string& name) const;
};

/// All trainable parameters of both branches and the shared components.
struct ModelState {
  NetConfig config;
  ModelLayout layout;
  std::vector<double> params;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;

  /// Uniform(+-1/sqrt(fan_in)) weights, zero biases. The embedding is a
  /// lookup (fan_in 1), so its rows are uniform(-1, 1).
  static ModelState initialize(const NetConfig& cfg, std::uint64_t seed);

  const double* data() const { return params.data(); }
  double* data() { return params.data(); }

  /// Embedding matrix viewed as d x vocab (one column per token).
  ConstMatMap embedding() const {
    return ConstMatMap(params.data() + layout.embedding, config.embed_dim, config.vocab);
  }

  bool all_finite() const;
};

/// Overwrites every parameter of `group` with uniform(-scale, scale) noise.
void randomize_group(ModelState& state, const std::string& group, std::uint64_t seed, double scale = 1.0);

}  // namespace tunnelfp
