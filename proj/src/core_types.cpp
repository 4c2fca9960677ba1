#include "tunnelfp/core_types.hpp"

#include <algorithm>

namespace tunnelfp {

std::string to_string(Protocol p) { return p == Protocol::Tcp ? "TCP" : "UDP"; }

std::string to_string(Direction d) {
  return d == Direction::Outbound ? "out" : "in";
}

std::string to_string(FlowKind k) { return k == FlowKind::Tls ? "tls" : "tunnel"; }

Protocol parse_protocol(std::string_view s) {
  if (s == "TCP" || s == "tcp" || s == "6") return Protocol::Tcp;
  if (s == "UDP" || s == "udp" || s == "17") return Protocol::Udp;
  throw InputError("unknown protocol '" + std::string(s) + "'");
}

Direction parse_direction(std::string_view s) {
  if (s == "out" || s == "outbound" || s == "Outbound") return Direction::Outbound;
  if (s == "in" || s == "inbound" || s == "Inbound") return Direction::Inbound;
  throw InputError("unknown direction '" + std::string(s) + "'");
}

FlowKind parse_flow_kind(std::string_view s) {
  if (s == "tls" || s == "TLS") return FlowKind::Tls;
  if (s == "tunnel" || s == "tun" || s == "Tunnel") return FlowKind::Tunnel;
  throw InputError("unknown flow kind '" + std::string(s) + "'");
}

FlowKey FlowKey::of(const PacketRecord& p) {
  return FlowKey{p.src_ip, p.src_port, p.dst_ip, p.dst_port, p.protocol};
}

FlowKey FlowKey::reversed() const {
  return FlowKey{dst_ip, dst_port, src_ip, src_port, protocol};
}

FlowKey FlowKey::canonical() const {
  auto lhs = std::tie(src_ip, src_port);
  auto rhs = std::tie(dst_ip, dst_port);
  return rhs < lhs ? reversed() : *this;
}

std::string to_string(const FlowKey& k) {
  return k.src_ip + ":" + std::to_string(k.src_port) + "->" + k.dst_ip + ":" +
         std::to_string(k.dst_port) + "/" + to_string(k.protocol);
}

int tokenize(Direction direction, std::uint32_t payload_len) {
  if (payload_len == 0) throw InputError("tokenize: zero-length payload");
  const int len = static_cast<int>(std::min<std::uint32_t>(payload_len, kMaxTokenLength));
  return direction == Direction::Outbound ? len : kMaxTokenLength + len;
}

DecodedToken decode_token(int token) {
  if (token <= kPadToken || token >= kVocabSize)
    throw InputError("decode_token: token " + std::to_string(token) + " outside [1, 3000]");
  if (token <= kMaxTokenLength) return {Direction::Outbound, token};
  return {Direction::Inbound, token - kMaxTokenLength};
}

PaddedTokens pad_or_truncate(std::span<const int> tokens, int n) {
  if (tokens.empty()) throw InputError("pad_or_truncate: empty token list");
  if (n < 1) throw InputError("pad_or_truncate: n must be >= 1");
  PaddedTokens out;
  out.true_len = std::min(static_cast<int>(tokens.size()), n);
  out.tokens.assign(static_cast<std::size_t>(n), kPadToken);
  std::copy_n(tokens.begin(), out.true_len, out.tokens.begin());
  return out;
}

void validate(const FlowSequence& flow) {
  const int n = flow.length();
  if (n < 1) throw InputError("flow has no token slots");
  if (flow.true_len < 1 || flow.true_len > n)
    throw InputError("flow true_len " + std::to_string(flow.true_len) + " outside [1, n]");
  for (int i = 0; i < n; ++i) {
    const int t = flow.tokens[static_cast<std::size_t>(i)];
    if (t < 0 || t >= kVocabSize)
      throw InputError("token " + std::to_string(t) + " at index " + std::to_string(i) +
                       " outside vocabulary");
    if (i < flow.true_len && t == kPadToken)
      throw InputError("pad token inside valid prefix at index " + std::to_string(i));
    if (i >= flow.true_len && t != kPadToken)
      throw InputError("non-pad token after true_len at index " + std::to_string(i));
  }
}

void validate(const ParallelFlowPair& pair) {
  validate(pair.tls);
  validate(pair.tun);
  if (pair.tls.kind != FlowKind::Tls) throw InputError("pair tls side has kind tunnel");
  if (pair.tun.kind != FlowKind::Tunnel) throw InputError("pair tunnel side has kind tls");
  if (pair.tls.label != pair.label || pair.tun.label != pair.label)
    throw InputError("pair label disagrees with flow labels");
}

FlowSequence retruncate(const FlowSequence& flow, int n) {
  FlowSequence out = flow;
  auto padded = pad_or_truncate(std::span(flow.tokens).first(static_cast<std::size_t>(flow.true_len)), n);
  out.tokens = std::move(padded.tokens);
  out.true_len = padded.true_len;
  return out;
}

}  // namespace tunnelfp
