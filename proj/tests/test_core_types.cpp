#include <doctest.h>

#include <set>

#include "tunnelfp/core_types.hpp"
#include "tunnelfp/rng.hpp"

using namespace tunnelfp;

TEST_CASE("tokenize maps signed lengths into the 3000-token range") {
  CHECK(tokenize(Direction::Outbound, 517) == 517);
  CHECK(tokenize(Direction::Inbound, 1440) == 2940);
  CHECK(tokenize(Direction::Outbound, 9000) == 1500);
  CHECK(tokenize(Direction::Inbound, 9000) == 3000);
  CHECK(tokenize(Direction::Outbound, 1) == 1);
  CHECK(tokenize(Direction::Inbound, 1) == 1501);
  CHECK_THROWS_AS(tokenize(Direction::Outbound, 0), InputError);
}

TEST_CASE("tokenize is injective over clamped lengths and never pads") {
  std::set<int> seen;
  for (Direction d : {Direction::Outbound, Direction::Inbound}) {
    for (std::uint32_t len = 1; len <= 1500; ++len) {
      const int t = tokenize(d, len);
      CHECK(t != kPadToken);
      CHECK(seen.insert(t).second);
      const DecodedToken back = decode_token(t);
      CHECK(back.direction == d);
      CHECK(back.length == static_cast<int>(len));
    }
  }
  CHECK(seen.size() == 3000);
  CHECK(*seen.begin() == 1);
  CHECK(*seen.rbegin() == 3000);
}

TEST_CASE("decode inverts tokenize for oversized payloads") {
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const Direction d = rng.uniform() < 0.5 ? Direction::Outbound : Direction::Inbound;
    const auto len = static_cast<std::uint32_t>(rng.uniform_int(1, 65535));
    const DecodedToken back = decode_token(tokenize(d, len));
    CHECK(back.direction == d);
    CHECK(back.length == static_cast<int>(std::min<std::uint32_t>(len, 1500)));
  }
  CHECK_THROWS_AS(decode_token(0), InputError);
  CHECK_THROWS_AS(decode_token(3001), InputError);
}

TEST_CASE("pad_or_truncate") {
  const std::vector<int> a = {517, 1612};
  auto p = pad_or_truncate(a, 4);
  CHECK(p.tokens == std::vector<int>{517, 1612, 0, 0});
  CHECK(p.true_len == 2);

  const std::vector<int> b = {1, 2, 3, 4, 5};
  p = pad_or_truncate(b, 3);
  CHECK(p.tokens == std::vector<int>{1, 2, 3});
  CHECK(p.true_len == 3);

  const std::vector<int> c = {7};
  p = pad_or_truncate(c, 1);
  CHECK(p.tokens == std::vector<int>{7});
  CHECK(p.true_len == 1);

  CHECK_THROWS_AS(pad_or_truncate(std::vector<int>{}, 4), InputError);
  CHECK_THROWS_AS(pad_or_truncate(a, 0), InputError);
}

TEST_CASE("pad_or_truncate is idempotent on its valid prefix") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> toks(static_cast<std::size_t>(rng.uniform_int(1, 40)));
    for (int& t : toks) t = static_cast<int>(rng.uniform_int(1, 3000));
    const int n = static_cast<int>(rng.uniform_int(1, 50));
    const auto once = pad_or_truncate(toks, n);
    const auto twice = pad_or_truncate(std::span(once.tokens).first(static_cast<std::size_t>(once.true_len)), n);
    CHECK(once.tokens == twice.tokens);
    CHECK(once.true_len == twice.true_len);
    CHECK(static_cast<int>(once.tokens.size()) == n);
  }
}

TEST_CASE("flow validation catches each invariant") {
  FlowSequence f;
  f.tokens = {5, 1600, 0, 0};
  f.true_len = 2;
  CHECK_NOTHROW(validate(f));

  FlowSequence bad = f;
  bad.true_len = 0;
  CHECK_THROWS_AS(validate(bad), InputError);
  bad = f;
  bad.tokens[3] = 4;
  CHECK_THROWS_AS(validate(bad), InputError);
  bad = f;
  bad.tokens[1] = 0;
  CHECK_THROWS_AS(validate(bad), InputError);
  bad = f;
  bad.tokens[0] = 3001;
  CHECK_THROWS_AS(validate(bad), InputError);

  ParallelFlowPair pair;
  pair.tls = f;
  pair.tun = f;
  pair.tun.kind = FlowKind::Tunnel;
  pair.label = 3;
  pair.tls.label = pair.tun.label = 3;
  CHECK_NOTHROW(validate(pair));
  pair.tun.label = 2;
  CHECK_THROWS_AS(validate(pair), InputError);
  pair.tun.label = 3;
  pair.tls.kind = FlowKind::Tunnel;
  CHECK_THROWS_AS(validate(pair), InputError);
}

TEST_CASE("flow keys compare equal across directions after canonical ordering") {
  PacketRecord p{"10.0.0.2", 50001, "1.2.3.4", 443, Protocol::Tcp, 0.0, Direction::Outbound, 10};
  PacketRecord q{"1.2.3.4", 443, "10.0.0.2", 50001, Protocol::Tcp, 0.1, Direction::Inbound, 10};
  CHECK(FlowKey::of(p) != FlowKey::of(q));
  CHECK(FlowKey::of(p).canonical() == FlowKey::of(q).canonical());
  CHECK(FlowKey::of(p).reversed() == FlowKey::of(q));
  q.protocol = Protocol::Udp;
  CHECK(FlowKey::of(p).canonical() != FlowKey::of(q).canonical());
}

TEST_CASE("retruncate shortens and re-pads") {
  FlowSequence f;
  auto p = pad_or_truncate(std::vector<int>{1, 2, 3, 4, 5, 6}, 10);
  f.tokens = p.tokens;
  f.true_len = p.true_len;
  const FlowSequence s = retruncate(f, 4);
  CHECK(s.tokens == std::vector<int>{1, 2, 3, 4});
  CHECK(s.true_len == 4);
  const FlowSequence l = retruncate(s, 6);
  CHECK(l.tokens == std::vector<int>{1, 2, 3, 4, 0, 0});
  CHECK(l.true_len == 4);
}

TEST_CASE("enum spellings round trip") {
  for (Protocol p : {Protocol::Tcp, Protocol::Udp}) CHECK(parse_protocol(to_string(p)) == p);
  for (Direction d : {Direction::Outbound, Direction::Inbound}) CHECK(parse_direction(to_string(d)) == d);
  for (FlowKind k : {FlowKind::Tls, FlowKind::Tunnel}) CHECK(parse_flow_kind(to_string(k)) == k);
  CHECK_THROWS_AS(parse_protocol("icmp"), InputError);
  CHECK_THROWS_AS(parse_direction("sideways"), InputError);
}
