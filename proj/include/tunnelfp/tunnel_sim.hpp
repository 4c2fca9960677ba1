#pragma once

// Synthetic parallel captures: per-app TLS flows and their re-encapsulated
// tunnel counterparts, plus the client mapping table and ground truth.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tunnelfp/core_types.hpp"
#include "tunnelfp/ingest.hpp"
#include "tunnelfp/rng.hpp"

namespace tunnelfp {

struct SignedLength {
  Direction direction = Direction::Outbound;
  std::uint32_t length = 0;

  bool operator==(const SignedLength&) const = default;
};

/// Re-encapsulation policy of one tunnel implementation.
struct TunnelProfile {
  std::string name;
  std::uint32_t overhead_min = 0;  // bytes added per forwarded record
  std::uint32_t overhead_max = 0;
  std::uint32_t mtu_payload = 1448;
  std::vector<SignedLength> control_prefix;  // sent before any forwarded data
  double latency = 0.0;                      // tunnel flow starts this much after the TLS flow
  std::uint64_t seed_salt = 0;
  Protocol transport = Protocol::Tcp;
  std::uint16_t server_port = 443;
};

void validate(const TunnelProfile& profile);

/// Five stock profiles loosely themed on common proxy tunnels:
/// ss_like, ssr_like, v2ray_like, trojan_like, openvpn_like.
std::vector<TunnelProfile> stock_profiles();
const TunnelProfile& stock_profile(const std::string& name);

/// Overhead added to input packet `index`; uniform over the profile range.
std::uint32_t overhead_draw(const TunnelProfile& profile, std::uint64_t rng_seed, std::size_t index);

/// Greedy head-fill split: [mtu, mtu, ..., remainder].
std::vector<SignedLength> fragment(SignedLength packet, std::uint32_t mtu_payload);

/// control_prefix ++ concat_i fragment(len_i + overhead_i).
std::vector<SignedLength> reencapsulate(std::span<const SignedLength> tls_lengths,
                                        const TunnelProfile& profile, std::uint64_t rng_seed);

struct LengthBucket {
  Direction direction = Direction::Outbound;
  std::uint32_t lo = 1;
  std::uint32_t hi = 1;
};

/// Per-app TLS flow generator: a handshake-like template followed by a
/// Markov chain over length buckets.
struct AppTrafficModel {
  AppLabel label;
  std::vector<std::vector<SignedLength>> templates;
  std::uint32_t jitter = 0;  // +- bytes on template packet lengths
  std::vector<LengthBucket> buckets;
  std::vector<double> initial;
  std::vector<std::vector<double>> transitions;
  std::uint32_t min_packets = 8;
  std::uint32_t max_packets = 60;
  std::string server_ip;
};

void validate(const AppTrafficModel& app);

struct AppModelOptions {
  int num_apps = 10;
  int templates_per_app = 2;
  int template_min_len = 3;
  int template_max_len = 6;
  std::uint32_t jitter = 24;
  // Probability that a template is borrowed from another app instead of
  // being drawn fresh. Borrowed templates make the body the only signal.
  double shared_template_prob = 0.35;
  double transition_sharpness = 1.5;
  // Body states: length ranges of +-state_half_width bytes, most of them
  // drawn from a pool common to all apps so that apps differ mainly in
  // transition structure.
  int states_per_app = 8;
  std::uint32_t state_half_width = 24;
  double shared_state_prob = 0.8;
  std::uint32_t min_packets = 8;
  std::uint32_t max_packets = 30;
};

std::vector<AppTrafficModel> make_app_models(const AppModelOptions& opts, std::uint64_t seed);

std::vector<SignedLength> sample_flow(const AppTrafficModel& app, Rng& rng);

struct SimulationOptions {
  int pairs_per_app_per_profile = 200;
  std::uint64_t seed = 7;
  int n = kDefaultSeqLen;
  double port_reuse_fraction = 0.0;
  double reuse_gap = 15.0;        // seconds between sessions sharing a port pair
  double session_spacing = 0.25;  // seconds between consecutive session starts
  std::string device_ip = "10.0.0.2";
  std::string tunnel_server_ip = "198.51.100.7";
};

/// Everything observed for one tunnel: the two capture sides, the client's
/// mapping table, TLS-side labels and the pairs the capture should yield.
struct TunnelCapture {
  TunnelProfile profile;
  std::vector<PacketRecord> tls_packets;
  std::vector<PacketRecord> tun_packets;
  MappingTable mapping;
  std::vector<FlowLabel> tls_labels;
  std::vector<ParallelFlowPair> ground_truth;
  std::size_t reused_sessions = 0;
};

std::vector<TunnelCapture> generate_corpus(std::span<const AppTrafficModel> apps,
                                           std::span<const TunnelProfile> profiles,
                                           const SimulationOptions& opts);

/// Writes tls_packets.csv, tun_packets.csv, mapping.csv, tls_labels.csv and
/// ground_truth.jsonl under dir.
void write_capture(const TunnelCapture& capture, int n, const std::filesystem::path& dir);

/// Block format: "[profile]" headers followed by "key = value" lines.
std::vector<TunnelProfile> read_profiles(const std::filesystem::path& path);
void write_profiles(const std::filesystem::path& path, std::span<const TunnelProfile> profiles);

}  // namespace tunnelfp
