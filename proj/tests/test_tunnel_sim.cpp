#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "tunnelfp/tunnel_sim.hpp"

using namespace tunnelfp;
namespace fs = std::filesystem;
using D = Direction;

namespace {

TunnelProfile fixed_overhead(std::uint32_t o, std::uint32_t mtu = 1448) {
  TunnelProfile p;
  p.name = "fixed";
  p.overhead_min = p.overhead_max = o;
  p.mtu_payload = mtu;
  return p;
}

std::uint64_t bytes(std::span<const SignedLength> xs) {
  std::uint64_t s = 0;
  for (const auto& x : xs) s += x.length;
  return s;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "tunnelfp_test_sim" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TunnelProfile random_profile(Rng& rng) {
  TunnelProfile p;
  p.name = "fuzz";
  p.overhead_min = static_cast<std::uint32_t>(rng.uniform_int(0, 120));
  p.overhead_max = p.overhead_min + static_cast<std::uint32_t>(rng.uniform_int(0, 20));
  p.mtu_payload = static_cast<std::uint32_t>(rng.uniform_int(576, 1500));
  const auto k = rng.uniform_int(0, 4);
  for (int i = 0; i < k; ++i)
    p.control_prefix.push_back({rng.uniform() < 0.5 ? D::Outbound : D::Inbound,
                                static_cast<std::uint32_t>(rng.uniform_int(1, p.mtu_payload))});
  p.seed_salt = rng.next();
  return p;
}

}  // namespace

TEST_CASE("1440-byte record fragments into 1448 + 62") {
  const std::vector<SignedLength> in = {{D::Outbound, 1440}};
  const auto out = reencapsulate(in, fixed_overhead(70), 1);
  CHECK(out == std::vector<SignedLength>{{D::Outbound, 1448}, {D::Outbound, 62}});
}

TEST_CASE("517-byte record grows to 586 under a fixed 69-byte overhead") {
  const std::vector<SignedLength> in = {{D::Outbound, 517}};
  CHECK(reencapsulate(in, fixed_overhead(69), 1) == std::vector<SignedLength>{{D::Outbound, 586}});
}

TEST_CASE("control prefix alone") {
  TunnelProfile p = fixed_overhead(0);
  p.control_prefix = {{D::Outbound, 110}};
  CHECK(reencapsulate({}, p, 1) == std::vector<SignedLength>{{D::Outbound, 110}});
}

TEST_CASE("stock profiles reproduce the observed tunnel phenomena") {
  const TunnelProfile& v2 = stock_profile("v2ray_like");
  const TunnelProfile& ssr = stock_profile("ssr_like");
  REQUIRE(v2.control_prefix.size() == 1);
  CHECK(v2.control_prefix[0] == SignedLength{D::Outbound, 110});

  // The same 517-byte record becomes 586 and 589 depending on the draw.
  std::set<std::uint32_t> v2_sizes;
  const std::vector<SignedLength> hello = {{D::Outbound, 517}};
  for (std::uint64_t seed = 0; seed < 400; ++seed) {
    const auto out = reencapsulate(hello, v2, seed);
    REQUIRE(out.size() == 2);
    CHECK(out[0] == SignedLength{D::Outbound, 110});
    v2_sizes.insert(out[1].length);
  }
  CHECK(v2_sizes == std::set<std::uint32_t>{586, 587, 588, 589});
  const auto ssr_out = reencapsulate(hello, ssr, 5);
  CHECK(ssr_out.back() == SignedLength{D::Outbound, 589});

  // Every TCP stock profile keeps the 1448-byte payload limit.
  for (const auto& p : stock_profiles()) {
    if (p.transport != Protocol::Tcp) continue;
    CHECK(p.mtu_payload == 1448);
    const std::vector<SignedLength> big = {{D::Inbound, 1440}};
    const auto out = reencapsulate(big, p, 9);
    const auto tail = out.end() - 2;
    CHECK(tail[0] == SignedLength{D::Inbound, 1448});
    CHECK(tail[1].length == 1440 + overhead_draw(p, 9, 0) - 1448);
  }
}

TEST_CASE("fragment iterates until every piece fits") {
  CHECK(fragment({D::Inbound, 3000}, 1000) ==
        std::vector<SignedLength>{{D::Inbound, 1000}, {D::Inbound, 1000}, {D::Inbound, 1000}});
  CHECK(fragment({D::Inbound, 3001}, 1000).size() == 4);
  CHECK(fragment({D::Outbound, 5}, 1448) == std::vector<SignedLength>{{D::Outbound, 5}});
  CHECK_THROWS_AS(fragment({D::Outbound, 5}, 0), InputError);
}

TEST_CASE("overhead draws stay in range and depend on seed, index and salt") {
  TunnelProfile p = fixed_overhead(0);
  p.overhead_min = 10;
  p.overhead_max = 13;
  std::set<std::uint32_t> seen;
  for (std::size_t i = 0; i < 200; ++i) {
    const auto o = overhead_draw(p, 42, i);
    CHECK(o >= 10);
    CHECK(o <= 13);
    CHECK(o == overhead_draw(p, 42, i));
    seen.insert(o);
  }
  CHECK(seen.size() == 4);
}

TEST_CASE("re-encapsulation invariants hold on 10,000 fuzzed flows") {
  Rng rng(2024);
  for (int trial = 0; trial < 10000; ++trial) {
    const TunnelProfile p = random_profile(rng);
    std::vector<SignedLength> in(static_cast<std::size_t>(rng.uniform_int(0, 30)));
    for (auto& s : in)
      s = {rng.uniform() < 0.5 ? D::Outbound : D::Inbound, static_cast<std::uint32_t>(rng.uniform_int(1, 1500))};
    const std::uint64_t seed = rng.next();
    const auto out = reencapsulate(in, p, seed);

    // Conservation.
    std::uint64_t overhead = 0;
    for (std::size_t i = 0; i < in.size(); ++i) overhead += overhead_draw(p, seed, i);
    CHECK(bytes(out) == bytes(in) + overhead + bytes(p.control_prefix));

    // MTU bound and non-empty pieces.
    for (const auto& s : out) {
      CHECK(s.length >= 1);
      CHECK(s.length <= p.mtu_payload);
    }
    std::size_t at = p.control_prefix.size();
    for (std::size_t k = 0; k < at; ++k) CHECK(out[k] == p.control_prefix[k]);

    // Ordering: walking the output reproduces each grown input in turn.
    for (std::size_t i = 0; i < in.size(); ++i) {
      const std::uint32_t grown = in[i].length + overhead_draw(p, seed, i);
      std::uint32_t got = 0;
      while (got < grown) {
        REQUIRE(at < out.size());
        CHECK(out[at].direction == in[i].direction);
        CHECK(out[at].length <= p.mtu_payload);
        got += out[at].length;
        ++at;
      }
      CHECK(got == grown);
    }
    CHECK(at == out.size());

    // Monotonicity: more bytes on one packet never shrinks the packet count.
    if (!in.empty()) {
      auto more = in;
      auto& victim = more[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(in.size()) - 1))];
      victim.length += static_cast<std::uint32_t>(rng.uniform_int(1, 3000));
      CHECK(reencapsulate(more, p, seed).size() >= out.size());
    }
  }
}

TEST_CASE("app models are valid and flows respect their bounds") {
  AppModelOptions opts;
  const auto apps = make_app_models(opts, 99);
  REQUIRE(static_cast<int>(apps.size()) == opts.num_apps);
  Rng rng(1);
  for (const auto& app : apps) {
    CHECK_NOTHROW(validate(app));
    for (int i = 0; i < 50; ++i) {
      const auto f = sample_flow(app, rng);
      CHECK(f.size() >= app.min_packets);
      CHECK(f.size() <= app.max_packets);
      for (const auto& s : f) {
        CHECK(s.length >= 1);
        CHECK(s.length <= 1500);
      }
    }
  }
  CHECK_THROWS_AS(make_app_models(AppModelOptions{.num_apps = 10, .states_per_app = 0}, 1), InputError);
}

TEST_CASE("profile validation") {
  TunnelProfile p = fixed_overhead(5);
  CHECK_NOTHROW(validate(p));
  p.mtu_payload = 500;
  CHECK_THROWS_AS(validate(p), InputError);
  p = fixed_overhead(5);
  p.overhead_min = 6;
  CHECK_THROWS_AS(validate(p), InputError);
  p = fixed_overhead(5);
  p.control_prefix = {{D::Outbound, 0}};
  CHECK_THROWS_AS(validate(p), InputError);
}

TEST_CASE("profile file round trip") {
  const fs::path dir = scratch("profiles");
  const auto stock = stock_profiles();
  write_profiles(dir / "p.txt", stock);
  const auto back = read_profiles(dir / "p.txt");
  REQUIRE(back.size() == stock.size());
  for (std::size_t i = 0; i < stock.size(); ++i) {
    CHECK(back[i].name == stock[i].name);
    CHECK(back[i].overhead_min == stock[i].overhead_min);
    CHECK(back[i].overhead_max == stock[i].overhead_max);
    CHECK(back[i].mtu_payload == stock[i].mtu_payload);
    CHECK(back[i].control_prefix == stock[i].control_prefix);
    CHECK(back[i].latency == stock[i].latency);
    CHECK(back[i].seed_salt == stock[i].seed_salt);
    CHECK(back[i].transport == stock[i].transport);
    CHECK(back[i].server_port == stock[i].server_port);
  }
}

TEST_CASE("2 apps x 1 profile x 3 pairs: correlation over the written files recovers all 6") {
  AppModelOptions ao;
  ao.num_apps = 2;
  const auto apps = make_app_models(ao, 5);
  for (const auto& profile : stock_profiles()) {
    SimulationOptions so;
    so.pairs_per_app_per_profile = 3;
    so.n = 50;
    so.seed = 11;
    const std::vector<TunnelProfile> one = {profile};
    const auto caps = generate_corpus(apps, one, so);
    REQUIRE(caps.size() == 1);
    REQUIRE(caps[0].ground_truth.size() == 6);

    const fs::path dir = scratch("e2e_" + profile.name);
    write_capture(caps[0], so.n, dir);
    auto tls = reassemble(read_packet_records(dir / "tls_packets.csv"), FlowKind::Tls, so.n);
    const auto tun = reassemble(read_packet_records(dir / "tun_packets.csv"), FlowKind::Tunnel, so.n);
    const auto labels = read_flow_labels(dir / "tls_labels.csv");
    CHECK(apply_labels(tls, labels) == 6);
    const auto r = correlate(tls, tun, read_mapping_table(dir / "mapping.csv"), CorrelationConfig{});
    CHECK(r.unmatched_tls == 0);
    CHECK(r.unmatched_tun == 0);
    REQUIRE(r.pairs.size() == 6);

    const PairDataset truth = read_dataset(dir / "ground_truth.jsonl");
    REQUIRE(truth.pairs.size() == 6);
    for (const auto& want : truth.pairs) {
      const bool found = std::any_of(r.pairs.begin(), r.pairs.end(), [&](const ParallelFlowPair& got) {
        return got.label == want.label && got.tls.key == want.tls.key && got.tun.key == want.tun.key &&
               got.tls.tokens == want.tls.tokens && got.tun.tokens == want.tun.tokens &&
               std::abs(got.tls.start_time - want.tls.start_time) < 1e-6 &&
               std::abs(got.tun.start_time - want.tun.start_time) < 1e-6;
      });
      CHECK_MESSAGE(found, "missing ground-truth pair for profile " << profile.name);
    }
  }
}

TEST_CASE("same seed gives byte-identical files") {
  AppModelOptions ao;
  ao.num_apps = 3;
  const auto apps = make_app_models(ao, 8);
  SimulationOptions so;
  so.pairs_per_app_per_profile = 4;
  so.n = 30;
  so.port_reuse_fraction = 0.3;
  const auto profiles = stock_profiles();
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  const auto ca = generate_corpus(apps, profiles, so);
  const auto cb = generate_corpus(make_app_models(ao, 8), profiles, so);
  REQUIRE(ca.size() == cb.size());
  for (std::size_t i = 0; i < ca.size(); ++i) {
    write_capture(ca[i], so.n, a / profiles[i].name);
    write_capture(cb[i], so.n, b / profiles[i].name);
    for (const char* f : {"tls_packets.csv", "tun_packets.csv", "mapping.csv", "tls_labels.csv", "ground_truth.jsonl"})
      CHECK(slurp(a / profiles[i].name / f) == slurp(b / profiles[i].name / f));
  }
  so.seed += 1;
  const auto cc = generate_corpus(apps, profiles, so);
  CHECK(cc[0].ground_truth != ca[0].ground_truth);
}

TEST_CASE("tunnel flows start exactly one latency after their TLS partner") {
  AppModelOptions ao;
  ao.num_apps = 2;
  const auto apps = make_app_models(ao, 3);
  TunnelProfile p = stock_profile("ss_like");
  p.latency = 0.2;
  SimulationOptions so;
  so.pairs_per_app_per_profile = 5;
  const std::vector<TunnelProfile> one = {p};
  const auto caps = generate_corpus(apps, one, so);
  for (const auto& pair : caps[0].ground_truth)
    CHECK(std::llround((pair.tun.start_time - pair.tls.start_time) * 1e6) == 200000);
}

TEST_CASE("port reuse injection reuses ports with spaced sessions") {
  AppModelOptions ao;
  const auto apps = make_app_models(ao, 3);
  SimulationOptions so;
  so.pairs_per_app_per_profile = 20;
  so.port_reuse_fraction = 0.4;
  const auto caps = generate_corpus(apps, std::vector<TunnelProfile>{stock_profile("trojan_like")}, so);
  const auto& cap = caps[0];
  CHECK(cap.reused_sessions > 0);
  std::map<std::pair<std::uint16_t, std::uint16_t>, std::vector<double>> by_ports;
  for (const auto& e : cap.mapping.entries()) by_ports[{e.inbound, e.outbound}].push_back(e.created_at);
  std::size_t reused = 0;
  for (auto& [ports, times] : by_ports) {
    std::sort(times.begin(), times.end());
    for (std::size_t i = 1; i < times.size(); ++i) {
      CHECK(times[i] - times[i - 1] >= so.reuse_gap);
      ++reused;
    }
  }
  CHECK(reused == cap.reused_sessions);
  CHECK_THROWS_AS(generate_corpus(std::span(apps).first(1), std::vector<TunnelProfile>{stock_profile("ss_like")}, so),
                  InputError);
}
