#pragma once

// Flow data model and the token transforms that turn packet payload lengths
// into fixed-length model inputs.

#include <compare>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tunnelfp {

enum class Protocol : std::uint8_t { Tcp, Udp };
enum class Direction : std::uint8_t { Outbound, Inbound };
enum class FlowKind : std::uint8_t { Tls, Tunnel };

inline constexpr int kPadToken = 0;
inline constexpr int kMaxTokenLength = 1500;
inline constexpr int kVocabSize = 2 * kMaxTokenLength + 1;
inline constexpr int kDefaultSeqLen = 200;

/// Raised on inputs that violate a documented precondition.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string to_string(Protocol p);
std::string to_string(Direction d);
std::string to_string(FlowKind k);
Protocol parse_protocol(std::string_view s);
Direction parse_direction(std::string_view s);
FlowKind parse_flow_kind(std::string_view s);

struct PacketRecord {
  std::string src_ip;
  std::uint16_t src_port = 0;
  std::string dst_ip;
  std::uint16_t dst_port = 0;
  Protocol protocol = Protocol::Tcp;
  double timestamp = 0.0;
  Direction direction = Direction::Outbound;
  std::uint32_t payload_len = 0;

  bool operator==(const PacketRecord&) const = default;
};

/// Transport 5-tuple. Flow keys stored on a FlowSequence are oriented so that
/// src is the flow initiator.
struct FlowKey {
  std::string src_ip;
  std::uint16_t src_port = 0;
  std::string dst_ip;
  std::uint16_t dst_port = 0;
  Protocol protocol = Protocol::Tcp;

  static FlowKey of(const PacketRecord& p);
  FlowKey reversed() const;
  /// Endpoint-ordered form: equal for both directions of one flow.
  FlowKey canonical() const;

  auto operator<=>(const FlowKey&) const = default;
  bool operator==(const FlowKey&) const = default;
};

std::string to_string(const FlowKey& k);

struct FlowSequence {
  FlowKey key;
  double start_time = 0.0;
  std::vector<int> tokens;  // exactly n entries, pad-filled tail
  int true_len = 0;
  std::optional<int> label;
  FlowKind kind = FlowKind::Tls;

  int length() const { return static_cast<int>(tokens.size()); }
  bool operator==(const FlowSequence&) const = default;
};

struct ParallelFlowPair {
  FlowSequence tls;
  FlowSequence tun;
  int label = 0;

  bool operator==(const ParallelFlowPair&) const = default;
};

struct AppLabel {
  int id = 0;
  std::string name;
};

/// Direction-signed length token in [1, 3000]. Lengths above 1500 clamp.
int tokenize(Direction direction, std::uint32_t payload_len);

struct DecodedToken {
  Direction direction;
  int length;
  bool operator==(const DecodedToken&) const = default;
};
DecodedToken decode_token(int token);

struct PaddedTokens {
  std::vector<int> tokens;
  int true_len = 0;
};

PaddedTokens pad_or_truncate(std::span<const int> tokens, int n);

/// Checks every FlowSequence invariant; throws InputError naming the first
/// violation.
void validate(const FlowSequence& flow);
void validate(const ParallelFlowPair& pair);

/// Re-truncates an already padded flow to a shorter (or longer) n.
FlowSequence retruncate(const FlowSequence& flow, int n);

}  // namespace tunnelfp
