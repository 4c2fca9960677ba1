#pragma once

// Packet-record ingestion, flow reassembly and TLS/tunnel flow correlation.

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tunnelfp/core_types.hpp"

namespace tunnelfp {

/// Parse failure in one of the text formats. Carries the offending line
/// (1-based) and field name.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& source, std::size_t line, const std::string& field,
              const std::string& what);
  std::size_t line() const { return line_; }
  const std::string& field() const { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

struct MappingEntry {
  std::uint16_t inbound = 0;   // app-side source port
  std::uint16_t outbound = 0;  // tunnel-side source port
  double created_at = 0.0;

  bool operator==(const MappingEntry&) const = default;
};

/// Socket mapping log kept by a tunnel client. Entries stay sorted by
/// created_at; repeated port pairs are legal (port reuse).
class MappingTable {
 public:
  MappingTable() = default;
  explicit MappingTable(std::vector<MappingEntry> entries);

  void add(MappingEntry e);
  const std::vector<MappingEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

 private:
  std::vector<MappingEntry> entries_;
};

struct CorrelationConfig {
  double epsilon = 1.0;       // max |t_tls - t_tun|, seconds
  int n = kDefaultSeqLen;
  double idle_timeout = 5.0;  // a silent 5-tuple for this long starts a new flow
};

struct ReassemblyStats {
  std::size_t packets = 0;
  std::size_t zero_payload_packets = 0;
  std::size_t flows = 0;
  std::size_t dropped_empty_flows = 0;
  std::size_t direction_mismatches = 0;  // recorded direction disagrees with initiator
};

/// Groups records by canonical 5-tuple (splitting on idle gaps), orders each
/// flow by time, drops zero-payload packets and tokenizes to length n.
/// Output is sorted by (start_time, key).
std::vector<FlowSequence> reassemble(std::span<const PacketRecord> records, FlowKind kind,
                                     int n, double idle_timeout = 5.0,
                                     ReassemblyStats* stats = nullptr);

struct FlowLabel {
  FlowKey key;
  double start_time = 0.0;
  int label = 0;
};

/// Assigns labels to flows whose key matches and whose start time lies
/// within `tolerance` of the labelled start. Returns how many were labelled.
std::size_t apply_labels(std::vector<FlowSequence>& flows, std::span<const FlowLabel> labels,
                         double tolerance = 1e-6);

struct CorrelationResult {
  std::vector<ParallelFlowPair> pairs;
  std::size_t unmatched_tls = 0;
  std::size_t unmatched_tun = 0;
  std::size_t unlabeled_tls = 0;  // matched by ports/time but TLS side had no label
};

/// Builds parallel flow pairs: tls.src_port == inbound and tun.src_port ==
/// outbound for some table entry, and |t_tls - t_tun| <= epsilon. Competing
/// candidates resolve to the smallest gap, then the earlier start; each flow
/// joins at most one pair.
CorrelationResult correlate(std::span<const FlowSequence> tls_flows,
                            std::span<const FlowSequence> tun_flows, const MappingTable& table,
                            const CorrelationConfig& cfg);

// --- text formats -----------------------------------------------------------

std::vector<PacketRecord> read_packet_records(std::istream& in, const std::string& source = "<stream>");
std::vector<PacketRecord> read_packet_records(const std::filesystem::path& path);
void write_packet_records(std::ostream& out, std::span<const PacketRecord> records);
void write_packet_records(const std::filesystem::path& path, std::span<const PacketRecord> records);

MappingTable read_mapping_table(std::istream& in, const std::string& source = "<stream>");
MappingTable read_mapping_table(const std::filesystem::path& path);
void write_mapping_table(const std::filesystem::path& path, const MappingTable& table);

std::vector<FlowLabel> read_flow_labels(const std::filesystem::path& path);
void write_flow_labels(const std::filesystem::path& path, std::span<const FlowLabel> labels);

inline constexpr int kDatasetSchemaVersion = 1;

struct PairDataset {
  int n = kDefaultSeqLen;
  std::vector<ParallelFlowPair> pairs;
};

/// Line-delimited JSON: a header line carrying schema_version and n, then one
/// pair per line. Returns the number of pairs written.
std::size_t write_dataset(std::span<const ParallelFlowPair> pairs, int n,
                          const std::filesystem::path& path);
PairDataset read_dataset(std::istream& in, const std::string& source = "<stream>");
PairDataset read_dataset(const std::filesystem::path& path);

void write_flows(std::span<const FlowSequence> flows, int n, const std::filesystem::path& path);
std::vector<FlowSequence> read_flows(const std::filesystem::path& path, int* n_out = nullptr);

}  // namespace tunnelfp
