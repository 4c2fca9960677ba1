#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "tunnelfp/dual_net.hpp"

namespace tunnelfp {

enum class Ablation { None, Src, Psm, Cpd, Asa, Asc };

std::string to_string(Ablation a);
/// Accepts "none", "src", "psm", "cpd", "asa", "asc" (any case).
Ablation parse_ablation(std::string_view s);

inline constexpr std::array<Ablation, 6> kAllVariants = {Ablation::None, Ablation::Src, Ablation::Psm,
                                                         Ablation::Cpd,  Ablation::Asa, Ablation::Asc};

/// Variant label used in reports: "Full", "/SRC", ...
std::string variant_name(Ablation a);

struct LossWeights {
  double lambda1 = 1.0;  // SRC
  double lambda2 = 1.0;  // PSM
  double lambda3 = 1.0;  // CPD
  double lambda4 = 1.0;  // ASA
  double lambda5 = 1.0;  // ASC

  void validate() const;
  /// Copy with the ablated term's weight set to zero.
  LossWeights with_ablation(Ablation a) const;
  bool operator==(const LossWeights&) const = default;
};

struct LossReport {
  double src = 0.0;
  double psm = 0.0;
  double cpd = 0.0;
  double asa = 0.0;
  double asc = 0.0;
  double frd = 0.0;
  double afa = 0.0;
  double total = 0.0;

  LossReport& operator+=(const LossReport& o);
  LossReport& operator*=(double s);
};

/// Fills frd, afa and total from the five parts. The ablated part is zeroed
/// in the returned report.
LossReport total_loss(const LossReport& parts, const LossWeights& w, Ablation ablation = Ablation::None);

// Primitives. Each adds scale * dLoss/dInput into the optional output.

/// Mean over `steps` of the squared column distance ||recon - target||^2.
double reconstruction_error(const Mat& target, const Mat& recon, std::span<const int> steps, Mat* d_recon = nullptr,
                            double scale = 1.0);
/// -log softmax(logits)[label].
double cross_entropy(const Vec& logits, int label, Vec* d_logits = nullptr, double scale = 1.0);
/// 1 - a.b / max(|a||b|, 1e-8). The floor guards zero vectors only, so
/// identical nonzero inputs give exactly 0.
double cosine_distance(const Vec& a, const Vec& b, Vec* d_a = nullptr, Vec* d_b = nullptr, double scale = 1.0);

inline constexpr double kCosineEps = 1e-8;

// Batch forms over precomputed tensors.

struct ReconSample {
  Mat x_tls, recon_tls;
  std::vector<int> steps_tls;
  Mat x_tun, recon_tun;
  std::vector<int> steps_tun;
};

struct LogitSample {
  Vec tls;
  Vec tun;
  int label = 0;
};

struct PooledSample {
  Vec tls;
  Vec tun;
};

/// Batch mean of the per-branch reconstruction errors, summed over branches.
double loss_src(std::span<const ReconSample> batch);
/// Same reduction as loss_src, applied to cross reconstructions.
double loss_cpd(std::span<const ReconSample> batch);
/// Batch mean of CE(tls) + CE(tun) over protocol-head logits.
double loss_psm(std::span<const LogitSample> batch);
double loss_asa(std::span<const PooledSample> batch);
/// Batch mean of CE(tls) + CE(tun) over app-head logits.
double loss_asc(std::span<const LogitSample> batch);

enum class ModelKind { DecEtt, TunnelOnly };

std::string to_string(ModelKind k);
ModelKind parse_model_kind(std::string_view s);

struct ObjectiveOptions {
  LossWeights weights;
  Ablation ablation = Ablation::None;
  ModelKind kind = ModelKind::DecEtt;
  /// Replace the reversal layer by identity (used to verify reversal).
  bool grl_identity = false;
  /// Reconstruction targets are constants. When set, targets are looked up
  /// in this buffer (same layout as ModelState::params) instead of the live
  /// parameters, so finite differences see them frozen too.
  const std::vector<double>* target_params = nullptr;
};

/// Loss parts for one pair; with `grad`, adds scale * d(total)/d(params).
/// For TunnelOnly only `asc` (CE of the tunnel app logits) is active.
LossReport pair_objective(const ModelState& state, const ParallelFlowPair& pair, const ObjectiveOptions& opts,
                          double scale = 1.0, double* grad = nullptr);

/// Batch mean of pair_objective. `grad` (resized to the parameter count and
/// zeroed) receives the gradient of the mean. With threads > 1 the batch is
/// split into contiguous chunks whose results are reduced in chunk order.
LossReport batch_objective(const ModelState& state, std::span<const ParallelFlowPair* const> batch,
                           const ObjectiveOptions& opts, std::vector<double>* grad = nullptr, int threads = 1);

}  // namespace tunnelfp
