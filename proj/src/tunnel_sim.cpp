#include "tunnelfp/tunnel_sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace tunnelfp {

void validate(const TunnelProfile& p) {
  if (p.name.empty()) throw InputError("tunnel profile without a name");
  if (p.overhead_min > p.overhead_max)
    throw InputError("profile " + p.name + ": overhead_min > overhead_max");
  if (p.mtu_payload < 576 || p.mtu_payload > 1500)
    throw InputError("profile " + p.name + ": mtu_payload outside [576, 1500]");
  for (const SignedLength& c : p.control_prefix)
    if (c.length < 1) throw InputError("profile " + p.name + ": zero-length control packet");
  if (p.latency < 0) throw InputError("profile " + p.name + ": negative latency");
}

std::vector<TunnelProfile> stock_profiles() {
  using D = Direction;
  std::vector<TunnelProfile> out;
  out.push_back({"ss_like", 34, 40, 1448, {}, 0.02, 11, Protocol::Tcp, 8388});
  out.push_back({"ssr_like", 72, 72, 1448,
                 {{D::Outbound, 233}, {D::Inbound, 150}, {D::Outbound, 43}},
                 0.03, 23, Protocol::Tcp, 8389});
  out.push_back({"v2ray_like", 69, 72, 1448, {{D::Outbound, 110}}, 0.05, 37, Protocol::Tcp, 10086});
  out.push_back({"trojan_like", 22, 29, 1448,
                 {{D::Outbound, 571}, {D::Inbound, 1448}, {D::Inbound, 1054}, {D::Outbound, 126}},
                 0.04, 41, Protocol::Tcp, 443});
  out.push_back({"openvpn_like", 64, 68, 1420,
                 {{D::Outbound, 54}, {D::Inbound, 66}, {D::Outbound, 362}, {D::Inbound, 1182},
                  {D::Inbound, 380}, {D::Outbound, 1044}, {D::Inbound, 138}, {D::Outbound, 90}},
                 0.03, 53, Protocol::Udp, 1194});
  return out;
}

const TunnelProfile& stock_profile(const std::string& name) {
  static const std::vector<TunnelProfile> profiles = stock_profiles();
  for (const TunnelProfile& p : profiles)
    if (p.name == name) return p;
  throw InputError("unknown stock profile '" + name + "'");
}

std::uint32_t overhead_draw(const TunnelProfile& profile, std::uint64_t rng_seed, std::size_t index) {
  const std::uint64_t span = std::uint64_t{profile.overhead_max} - profile.overhead_min + 1;
  const std::uint64_t h = mix_seed(rng_seed, index, profile.seed_salt);
  return profile.overhead_min + static_cast<std::uint32_t>(h % span);
}

std::vector<SignedLength> fragment(SignedLength packet, std::uint32_t mtu_payload) {
  if (mtu_payload == 0) throw InputError("fragment: zero MTU");
  std::vector<SignedLength> out;
  std::uint32_t remaining = packet.length;
  while (remaining > mtu_payload) {
    out.push_back({packet.direction, mtu_payload});
    remaining -= mtu_payload;
  }
  out.push_back({packet.direction, remaining});
  return out;
}

std::vector<SignedLength> reencapsulate(std::span<const SignedLength> tls_lengths,
                                        const TunnelProfile& profile, std::uint64_t rng_seed) {
  std::vector<SignedLength> out(profile.control_prefix.begin(), profile.control_prefix.end());
  for (std::size_t i = 0; i < tls_lengths.size(); ++i) {
    if (tls_lengths[i].length < 1) throw InputError("reencapsulate: zero-length input packet");
    const SignedLength grown{tls_lengths[i].direction,
                             tls_lengths[i].length + overhead_draw(profile, rng_seed, i)};
    for (const SignedLength& piece : fragment(grown, profile.mtu_payload)) out.push_back(piece);
  }
  return out;
}

// --- app traffic models -------------------------------------------------------

void validate(const AppTrafficModel& app) {
  if (app.templates.empty()) throw InputError("app " + app.label.name + ": no templates");
  for (const auto& t : app.templates) {
    if (t.empty()) throw InputError("app " + app.label.name + ": empty template");
    for (const SignedLength& s : t)
      if (s.length < 1 || s.length > kMaxTokenLength)
        throw InputError("app " + app.label.name + ": template length outside [1, 1500]");
  }
  const std::size_t k = app.buckets.size();
  if (k == 0 || app.initial.size() != k || app.transitions.size() != k)
    throw InputError("app " + app.label.name + ": bucket chain shape mismatch");
  for (const auto& row : app.transitions)
    if (row.size() != k) throw InputError("app " + app.label.name + ": ragged transition matrix");
  for (const LengthBucket& b : app.buckets)
    if (b.lo < 1 || b.hi > kMaxTokenLength || b.lo > b.hi)
      throw InputError("app " + app.label.name + ": bucket outside [1, 1500]");
  if (app.min_packets < 1 || app.min_packets > app.max_packets)
    throw InputError("app " + app.label.name + ": bad flow size range");
}

namespace {

LengthBucket random_state(Rng& rng, std::uint32_t half_width) {
  const Direction dir = rng.uniform() < 0.4 ? Direction::Outbound : Direction::Inbound;
  // Small control-sized records, mid-sized API exchanges, near-MTU bulk.
  const double u = rng.uniform();
  std::int64_t c;
  if (u < 0.3)
    c = rng.uniform_int(40, 200);
  else if (u < 0.7)
    c = rng.uniform_int(200, 1000);
  else
    c = rng.uniform_int(1000, 1500);
  const auto w = static_cast<std::int64_t>(half_width);
  const auto lo = std::max<std::int64_t>(1, c - w);
  const auto hi = std::min<std::int64_t>(kMaxTokenLength, c + w);
  return {dir, static_cast<std::uint32_t>(lo), static_cast<std::uint32_t>(hi)};
}

std::vector<double> random_simplex(Rng& rng, std::size_t k, double sharpness) {
  std::vector<double> w(k);
  double total = 0;
  for (double& x : w) {
    x = std::pow(-std::log(1.0 - rng.uniform()), sharpness);
    total += x;
  }
  for (double& x : w) x /= total;
  return w;
}

std::uint32_t jittered(std::uint32_t len, std::uint32_t jitter, Rng& rng) {
  const auto j = static_cast<std::int64_t>(jitter);
  const std::int64_t v = static_cast<std::int64_t>(len) + rng.uniform_int(-j, j);
  return static_cast<std::uint32_t>(std::clamp<std::int64_t>(v, 1, kMaxTokenLength));
}

}  // namespace

std::vector<AppTrafficModel> make_app_models(const AppModelOptions& opts, std::uint64_t seed) {
  if (opts.num_apps < 2) throw InputError("make_app_models: need at least 2 apps");
  if (opts.states_per_app < 1) throw InputError("make_app_models: need at least 1 state per app");
  using D = Direction;
  Rng rng(mix_seed(seed, 0xA995u));
  std::vector<AppTrafficModel> apps;
  // States every app may draw from; they make apps overlap.
  std::vector<LengthBucket> common;
  for (int k = 0; k < opts.states_per_app; ++k) common.push_back(random_state(rng, opts.state_half_width));
  for (int a = 0; a < opts.num_apps; ++a) {
    AppTrafficModel app;
    app.label = {a, "app" + std::to_string(a)};
    app.server_ip = "203.0.113." + std::to_string(10 + a);
    app.jitter = opts.jitter;
    for (int k = 0; k < opts.states_per_app; ++k) {
      if (rng.uniform() < opts.shared_state_prob)
        app.buckets.push_back(common[static_cast<std::size_t>(rng.uniform_int(0, opts.states_per_app - 1))]);
      else
        app.buckets.push_back(random_state(rng, opts.state_half_width));
    }
    const auto& buckets = app.buckets;
    for (int t = 0; t < opts.templates_per_app; ++t) {
      if (a > 0 && rng.uniform() < opts.shared_template_prob) {
        const auto& donor = apps[static_cast<std::size_t>(rng.uniform_int(0, a - 1))];
        app.templates.push_back(donor.templates[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(donor.templates.size()) - 1))]);
        continue;
      }
      const auto len = rng.uniform_int(opts.template_min_len, opts.template_max_len);
      std::vector<SignedLength> tpl;
      tpl.push_back({D::Outbound, static_cast<std::uint32_t>(rng.uniform_int(480, 600))});
      tpl.push_back({D::Inbound, static_cast<std::uint32_t>(rng.uniform_int(1200, 1500))});
      while (static_cast<std::int64_t>(tpl.size()) < len) {
        const D dir = rng.uniform() < 0.5 ? D::Outbound : D::Inbound;
        tpl.push_back({dir, static_cast<std::uint32_t>(rng.uniform_int(40, 1500))});
      }
      app.templates.push_back(std::move(tpl));
    }
    app.initial = random_simplex(rng, buckets.size(), opts.transition_sharpness);
    for (std::size_t k = 0; k < buckets.size(); ++k)
      app.transitions.push_back(random_simplex(rng, buckets.size(), opts.transition_sharpness));
    const auto span = opts.max_packets - opts.min_packets;
    app.min_packets = opts.min_packets + static_cast<std::uint32_t>(rng.uniform_int(0, span / 4));
    app.max_packets = opts.max_packets - static_cast<std::uint32_t>(rng.uniform_int(0, span / 4));
    validate(app);
    apps.push_back(std::move(app));
  }
  return apps;
}

std::vector<SignedLength> sample_flow(const AppTrafficModel& app, Rng& rng) {
  const auto& tpl = app.templates[static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<std::int64_t>(app.templates.size()) - 1))];
  const auto total = static_cast<std::size_t>(rng.uniform_int(app.min_packets, app.max_packets));
  std::vector<SignedLength> out;
  out.reserve(total);
  for (std::size_t i = 0; i < tpl.size() && out.size() < total; ++i)
    out.push_back({tpl[i].direction, jittered(tpl[i].length, app.jitter, rng)});
  std::size_t state = rng.categorical(app.initial);
  while (out.size() < total) {
    const LengthBucket& b = app.buckets[state];
    out.push_back({b.direction, static_cast<std::uint32_t>(rng.uniform_int(b.lo, b.hi))});
    state = rng.categorical(app.transitions[state]);
  }
  return out;
}

// --- corpus -------------------------------------------------------------------

namespace {

constexpr std::int64_t kMicros = 1000000;

double to_seconds(std::int64_t us) { return static_cast<double>(us) / static_cast<double>(kMicros); }

struct Session {
  int app = 0;
  std::int64_t start_us = 0;
  std::uint16_t inbound = 0;
  std::uint16_t outbound = 0;
  std::vector<SignedLength> tls;
  std::vector<std::int64_t> tls_times;  // per tls packet, absolute us
  std::uint64_t tunnel_seed = 0;
};

FlowSequence sequence_of(const FlowKey& key, std::int64_t start_us, std::span<const SignedLength> lengths,
                         FlowKind kind, int label, int n) {
  std::vector<int> toks;
  toks.reserve(lengths.size());
  for (const SignedLength& s : lengths) toks.push_back(tokenize(s.direction, s.length));
  auto padded = pad_or_truncate(toks, n);
  FlowSequence f;
  f.key = key;
  f.start_time = to_seconds(start_us);
  f.tokens = std::move(padded.tokens);
  f.true_len = padded.true_len;
  f.label = label;
  f.kind = kind;
  return f;
}

PacketRecord packet(const FlowKey& initiator, Direction dir, std::int64_t t_us, std::uint32_t len) {
  const FlowKey k = dir == Direction::Outbound ? initiator : initiator.reversed();
  return PacketRecord{k.src_ip, k.src_port, k.dst_ip, k.dst_port, k.protocol, to_seconds(t_us), dir, len};
}

void sort_by_time(std::vector<PacketRecord>& records) {
  std::stable_sort(records.begin(), records.end(),
                   [](const PacketRecord& a, const PacketRecord& b) { return a.timestamp < b.timestamp; });
}

}  // namespace

std::vector<TunnelCapture> generate_corpus(std::span<const AppTrafficModel> apps,
                                           std::span<const TunnelProfile> profiles,
                                           const SimulationOptions& opts) {
  if (apps.size() < 2) throw InputError("generate_corpus: need at least 2 apps");
  if (opts.pairs_per_app_per_profile < 1) throw InputError("generate_corpus: pairs_per_app_per_profile < 1");
  if (opts.port_reuse_fraction < 0 || opts.port_reuse_fraction > 1)
    throw InputError("generate_corpus: port_reuse_fraction outside [0, 1]");
  for (const auto& a : apps) validate(a);

  const auto num_apps = static_cast<int>(apps.size());
  const int per_cell = opts.pairs_per_app_per_profile;
  const auto spacing_us = static_cast<std::int64_t>(std::llround(opts.session_spacing * kMicros));
  const auto reuse_back = static_cast<int>(std::ceil(opts.reuse_gap / opts.session_spacing)) + 1;

  std::vector<TunnelCapture> out;
  for (std::size_t pi = 0; pi < profiles.size(); ++pi) {
    const TunnelProfile& profile = profiles[pi];
    validate(profile);
    const auto latency_us = static_cast<std::int64_t>(std::llround(profile.latency * kMicros));

    // Each (app, profile) cell owns its generator, so cells can be produced
    // in any order with identical output.
    std::vector<Rng> cell_rng;
    for (int a = 0; a < num_apps; ++a) cell_rng.emplace_back(mix_seed(opts.seed, pi, a, 0xCE11u));
    Rng schedule_rng(mix_seed(opts.seed, pi, 0x5CEDu));

    TunnelCapture cap;
    cap.profile = profile;
    std::vector<Session> sessions;
    const int total = num_apps * per_cell;
    sessions.reserve(static_cast<std::size_t>(total));
    for (int s = 0; s < total; ++s) {
      Session ses;
      ses.app = s % num_apps;
      Rng& rng = cell_rng[static_cast<std::size_t>(ses.app)];
      ses.start_us = 1'000'000 + s * spacing_us + schedule_rng.uniform_int(0, spacing_us / 2);
      ses.inbound = static_cast<std::uint16_t>(20000 + s % 25000);
      ses.outbound = static_cast<std::uint16_t>(45000 + s % 20000);
      if (s >= reuse_back && schedule_rng.uniform() < opts.port_reuse_fraction) {
        const Session& prev = sessions[static_cast<std::size_t>(s - reuse_back)];
        ses.inbound = prev.inbound;
        ses.outbound = prev.outbound;
        ++cap.reused_sessions;
      }
      ses.tls = sample_flow(apps[static_cast<std::size_t>(ses.app)], rng);
      std::int64_t t = ses.start_us;
      for (std::size_t i = 0; i < ses.tls.size(); ++i) {
        t += rng.uniform_int(1000, 15000);
        ses.tls_times.push_back(t);
      }
      ses.tunnel_seed = rng.next();
      sessions.push_back(std::move(ses));
    }

    for (const Session& ses : sessions) {
      const AppTrafficModel& app = apps[static_cast<std::size_t>(ses.app)];
      const FlowKey tls_key{opts.device_ip, ses.inbound, app.server_ip, 443, Protocol::Tcp};
      const FlowKey tun_key{opts.device_ip, ses.outbound, opts.tunnel_server_ip, profile.server_port,
                            profile.transport};

      cap.tls_packets.push_back(packet(tls_key, Direction::Outbound, ses.start_us, 0));
      for (std::size_t i = 0; i < ses.tls.size(); ++i)
        cap.tls_packets.push_back(packet(tls_key, ses.tls[i].direction, ses.tls_times[i], ses.tls[i].length));

      const std::int64_t tun_start = ses.start_us + latency_us;
      std::int64_t t = tun_start;
      if (profile.transport == Protocol::Tcp) {
        cap.tun_packets.push_back(packet(tun_key, Direction::Outbound, t, 0));
        t += 50;
      }
      for (const SignedLength& c : profile.control_prefix) {
        cap.tun_packets.push_back(packet(tun_key, c.direction, t, c.length));
        t += 50;
      }
      std::vector<SignedLength> tun_lengths(profile.control_prefix.begin(), profile.control_prefix.end());
      for (std::size_t i = 0; i < ses.tls.size(); ++i) {
        const SignedLength grown{ses.tls[i].direction,
                                 ses.tls[i].length + overhead_draw(profile, ses.tunnel_seed, i)};
        std::int64_t ft = std::max(t, ses.tls_times[i] + latency_us);
        for (const SignedLength& piece : fragment(grown, profile.mtu_payload)) {
          cap.tun_packets.push_back(packet(tun_key, piece.direction, ft, piece.length));
          tun_lengths.push_back(piece);
          t = ++ft;
        }
      }

      cap.mapping.add({ses.inbound, ses.outbound, to_seconds(ses.start_us)});
      cap.tls_labels.push_back({tls_key, to_seconds(ses.start_us), app.label.id});
      ParallelFlowPair pair;
      pair.label = app.label.id;
      pair.tls = sequence_of(tls_key, ses.start_us, ses.tls, FlowKind::Tls, pair.label, opts.n);
      const std::int64_t observed_tun_start =
          profile.transport == Protocol::Tcp || !profile.control_prefix.empty()
              ? tun_start
              : std::max(tun_start, ses.tls_times.front() + latency_us);
      pair.tun = sequence_of(tun_key, observed_tun_start, tun_lengths, FlowKind::Tunnel, pair.label, opts.n);
      cap.ground_truth.push_back(std::move(pair));
    }
    sort_by_time(cap.tls_packets);
    sort_by_time(cap.tun_packets);
    out.push_back(std::move(cap));
  }
  return out;
}

void write_capture(const TunnelCapture& capture, int n, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_packet_records(dir / "tls_packets.csv", capture.tls_packets);
  write_packet_records(dir / "tun_packets.csv", capture.tun_packets);
  write_mapping_table(dir / "mapping.csv", capture.mapping);
  write_flow_labels(dir / "tls_labels.csv", capture.tls_labels);
  write_dataset(capture.ground_truth, n, dir / "ground_truth.jsonl");
}

// --- profile file ---------------------------------------------------------------

namespace {

std::string trim_copy(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<SignedLength> parse_control_prefix(const std::string& v) {
  std::vector<SignedLength> out;
  std::istringstream is(v);
  std::string item;
  while (is >> item) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw InputError("control_prefix item '" + item + "' is not dir:len");
    out.push_back({parse_direction(item.substr(0, colon)),
                   static_cast<std::uint32_t>(std::stoul(item.substr(colon + 1)))});
  }
  return out;
}

}  // namespace

std::vector<TunnelProfile> read_profiles(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<TunnelProfile> out;
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& field, const std::string& what) {
    throw FormatError(path.string(), line_no, field, what);
  };
  while (std::getline(in, line)) {
    ++line_no;
    line = trim_copy(line);
    if (line.empty() || line.front() == '#') continue;
    if (line == "[profile]") {
      out.emplace_back();
      continue;
    }
    if (out.empty()) fail("<line>", "key outside a [profile] block");
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("<line>", "expected key = value");
    const std::string key = trim_copy(line.substr(0, eq));
    const std::string value = trim_copy(line.substr(eq + 1));
    TunnelProfile& p = out.back();
    try {
      if (key == "name") p.name = value;
      else if (key == "overhead_min") p.overhead_min = static_cast<std::uint32_t>(std::stoul(value));
      else if (key == "overhead_max") p.overhead_max = static_cast<std::uint32_t>(std::stoul(value));
      else if (key == "mtu_payload") p.mtu_payload = static_cast<std::uint32_t>(std::stoul(value));
      else if (key == "control_prefix") p.control_prefix = parse_control_prefix(value);
      else if (key == "latency") p.latency = std::stod(value);
      else if (key == "seed_salt") p.seed_salt = std::stoull(value);
      else if (key == "transport") p.transport = parse_protocol(value);
      else if (key == "server_port") p.server_port = static_cast<std::uint16_t>(std::stoul(value));
      else fail(key, "unknown profile key");
    } catch (const FormatError&) {
      throw;
    } catch (const std::exception& e) {
      fail(key, e.what());
    }
  }
  for (const TunnelProfile& p : out) validate(p);
  return out;
}

void write_profiles(const std::filesystem::path& path, std::span<const TunnelProfile> profiles) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const TunnelProfile& p : profiles) {
    out << "[profile]\n"
        << "name = " << p.name << '\n'
        << "overhead_min = " << p.overhead_min << '\n'
        << "overhead_max = " << p.overhead_max << '\n'
        << "mtu_payload = " << p.mtu_payload << '\n'
        << "control_prefix =";
    for (const SignedLength& c : p.control_prefix) out << ' ' << to_string(c.direction) << ':' << c.length;
    out << '\n'
        << "latency = " << p.latency << '\n'
        << "seed_salt = " << p.seed_salt << '\n'
        << "transport = " << to_string(p.transport) << '\n'
        << "server_port = " << p.server_port << "\n\n";
  }
}

}  // namespace tunnelfp
