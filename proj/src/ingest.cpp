#include "tunnelfp/ingest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <tuple>
#include <unordered_map>

#include <json.hpp>

namespace tunnelfp {

using nlohmann::json;

FormatError::FormatError(const std::string& source, std::size_t line, const std::string& field,
                         const std::string& what)
    : std::runtime_error(source + ":" + std::to_string(line) + ": field '" + field + "': " + what),
      line_(line),
      field_(field) {}

MappingTable::MappingTable(std::vector<MappingEntry> entries) : entries_(std::move(entries)) {
  std::stable_sort(entries_.begin(), entries_.end(),
                   [](const MappingEntry& a, const MappingEntry& b) { return a.created_at < b.created_at; });
}

void MappingTable::add(MappingEntry e) {
  auto pos = std::upper_bound(entries_.begin(), entries_.end(), e,
                              [](const MappingEntry& a, const MappingEntry& b) {
                                return a.created_at < b.created_at;
                              });
  entries_.insert(pos, e);
}

// --- reassembly -------------------------------------------------------------

namespace {

struct OpenFlow {
  FlowKey initiator;
  double start_time = 0.0;
  double last_time = 0.0;
  std::vector<int> tokens;
};

}  // namespace

std::vector<FlowSequence> reassemble(std::span<const PacketRecord> records, FlowKind kind, int n,
                                     double idle_timeout, ReassemblyStats* stats) {
  if (n < 1) throw InputError("reassemble: n must be >= 1");
  ReassemblyStats local;
  std::vector<OpenFlow> finished;
  std::map<FlowKey, OpenFlow> open;

  for (const PacketRecord& p : records) {
    ++local.packets;
    const FlowKey key = FlowKey::of(p);
    const FlowKey ck = key.canonical();
    auto it = open.find(ck);
    if (it != open.end() && p.timestamp - it->second.last_time > idle_timeout) {
      finished.push_back(std::move(it->second));
      open.erase(it);
      it = open.end();
    }
    if (it == open.end()) {
      OpenFlow f;
      f.initiator = key;
      f.start_time = p.timestamp;
      f.last_time = p.timestamp;
      it = open.emplace(ck, std::move(f)).first;
    }
    OpenFlow& flow = it->second;
    flow.last_time = std::max(flow.last_time, p.timestamp);
    const Direction dir = key == flow.initiator ? Direction::Outbound : Direction::Inbound;
    if (dir != p.direction) ++local.direction_mismatches;
    if (p.payload_len == 0) {
      ++local.zero_payload_packets;
      continue;
    }
    flow.tokens.push_back(tokenize(dir, p.payload_len));
  }
  for (auto& [ck, f] : open) finished.push_back(std::move(f));

  std::vector<FlowSequence> out;
  out.reserve(finished.size());
  for (OpenFlow& f : finished) {
    if (f.tokens.empty()) {
      ++local.dropped_empty_flows;
      continue;
    }
    auto padded = pad_or_truncate(f.tokens, n);
    FlowSequence seq;
    seq.key = f.initiator;
    seq.start_time = f.start_time;
    seq.tokens = std::move(padded.tokens);
    seq.true_len = padded.true_len;
    seq.kind = kind;
    out.push_back(std::move(seq));
  }
  std::sort(out.begin(), out.end(), [](const FlowSequence& a, const FlowSequence& b) {
    return std::tie(a.start_time, a.key) < std::tie(b.start_time, b.key);
  });
  local.flows = out.size();
  if (stats) *stats = local;
  return out;
}

std::size_t apply_labels(std::vector<FlowSequence>& flows, std::span<const FlowLabel> labels,
                         double tolerance) {
  std::multimap<FlowKey, const FlowLabel*> by_key;
  for (const FlowLabel& l : labels) by_key.emplace(l.key, &l);
  std::size_t labelled = 0;
  for (FlowSequence& f : flows) {
    auto [lo, hi] = by_key.equal_range(f.key);
    const FlowLabel* best = nullptr;
    for (auto it = lo; it != hi; ++it) {
      const double gap = std::abs(it->second->start_time - f.start_time);
      if (gap <= tolerance && (!best || gap < std::abs(best->start_time - f.start_time)))
        best = it->second;
    }
    if (best) {
      f.label = best->label;
      ++labelled;
    }
  }
  return labelled;
}

// --- correlation ------------------------------------------------------------

CorrelationResult correlate(std::span<const FlowSequence> tls_flows,
                            std::span<const FlowSequence> tun_flows, const MappingTable& table,
                            const CorrelationConfig& cfg) {
  if (!(cfg.epsilon > 0.0)) throw InputError("correlate: epsilon must be > 0");
  for (const auto& f : tls_flows)
    if (f.kind != FlowKind::Tls) throw InputError("correlate: tunnel flow in TLS list");
  for (const auto& f : tun_flows)
    if (f.kind != FlowKind::Tunnel) throw InputError("correlate: TLS flow in tunnel list");

  std::map<std::uint16_t, std::set<std::uint16_t>> outbound_for;
  for (const MappingEntry& e : table.entries()) outbound_for[e.inbound].insert(e.outbound);

  std::unordered_map<std::uint16_t, std::vector<std::size_t>> tun_by_port;
  for (std::size_t j = 0; j < tun_flows.size(); ++j)
    tun_by_port[tun_flows[j].key.src_port].push_back(j);

  struct Edge {
    double gap;
    std::size_t tls;
    std::size_t tun;
  };
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < tls_flows.size(); ++i) {
    auto it = outbound_for.find(tls_flows[i].key.src_port);
    if (it == outbound_for.end()) continue;
    for (std::uint16_t outbound : it->second) {
      auto tj = tun_by_port.find(outbound);
      if (tj == tun_by_port.end()) continue;
      for (std::size_t j : tj->second) {
        const double gap = std::abs(tls_flows[i].start_time - tun_flows[j].start_time);
        if (gap <= cfg.epsilon) edges.push_back({gap, i, j});
      }
    }
  }

  // Content-only ordering keeps the result independent of input order.
  std::sort(edges.begin(), edges.end(), [&](const Edge& a, const Edge& b) {
    const FlowSequence& ta = tls_flows[a.tls];
    const FlowSequence& tb = tls_flows[b.tls];
    const FlowSequence& ua = tun_flows[a.tun];
    const FlowSequence& ub = tun_flows[b.tun];
    return std::tie(a.gap, ta.start_time, ua.start_time, ta.key, ua.key, ta.tokens, ua.tokens) <
           std::tie(b.gap, tb.start_time, ub.start_time, tb.key, ub.key, tb.tokens, ub.tokens);
  });

  CorrelationResult result;
  std::vector<bool> tls_used(tls_flows.size(), false), tun_used(tun_flows.size(), false);
  for (const Edge& e : edges) {
    if (tls_used[e.tls] || tun_used[e.tun]) continue;
    tls_used[e.tls] = tun_used[e.tun] = true;
    const FlowSequence& tls = tls_flows[e.tls];
    if (!tls.label) {
      ++result.unlabeled_tls;
      continue;
    }
    ParallelFlowPair pair{tls, tun_flows[e.tun], *tls.label};
    pair.tun.label = pair.label;
    result.pairs.push_back(std::move(pair));
  }
  result.unmatched_tls = static_cast<std::size_t>(std::count(tls_used.begin(), tls_used.end(), false));
  result.unmatched_tun = static_cast<std::size_t>(std::count(tun_used.begin(), tun_used.end(), false));
  std::sort(result.pairs.begin(), result.pairs.end(),
            [](const ParallelFlowPair& a, const ParallelFlowPair& b) {
              return std::tie(a.tls.start_time, a.tls.key, a.tun.start_time, a.tun.key) <
                     std::tie(b.tls.start_time, b.tls.key, b.tun.start_time, b.tun.key);
            });
  return result;
}

// --- CSV helpers --------------------------------------------------------------

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    fields.push_back(trim(line.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return fields;
}

class CsvReader {
 public:
  CsvReader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}

  // Returns false at end of input; skips blank and '#' lines.
  bool next(std::vector<std::string_view>& fields) {
    while (std::getline(in_, line_)) {
      ++line_no_;
      std::string_view v = trim(line_);
      if (v.empty() || v.front() == '#') continue;
      fields = split_csv(v);
      return true;
    }
    return false;
  }

  [[noreturn]] void fail(const std::string& field, const std::string& what) const {
    throw FormatError(source_, line_no_, field, what);
  }

  template <typename Int>
  Int integer(std::string_view s, const std::string& field, long long lo, long long hi) const {
    long long v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) fail(field, "not an integer: '" + std::string(s) + "'");
    if (v < lo || v > hi)
      fail(field, "value " + std::to_string(v) + " outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    return static_cast<Int>(v);
  }

  double real(std::string_view s, const std::string& field) const {
    double v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v))
      fail(field, "not a number: '" + std::string(s) + "'");
    return v;
  }

  void expect_fields(const std::vector<std::string_view>& fields, std::size_t count,
                     const std::string& layout) const {
    if (fields.size() != count)
      fail("<line>", "expected " + std::to_string(count) + " fields (" + layout + "), got " +
                         std::to_string(fields.size()));
  }

 private:
  std::istream& in_;
  std::string source_;
  std::string line_;
  std::size_t line_no_ = 0;
};

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

std::string format_time(double t) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << t;
  return os.str();
}

constexpr const char* kPacketLayout =
    "src_ip,src_port,dst_ip,dst_port,proto,timestamp,direction,payload_len";

}  // namespace

std::vector<PacketRecord> read_packet_records(std::istream& in, const std::string& source) {
  CsvReader reader(in, source);
  std::vector<std::string_view> f;
  std::vector<PacketRecord> out;
  while (reader.next(f)) {
    reader.expect_fields(f, 8, kPacketLayout);
    PacketRecord p;
    p.src_ip = std::string(f[0]);
    p.src_port = reader.integer<std::uint16_t>(f[1], "src_port", 0, 65535);
    p.dst_ip = std::string(f[2]);
    p.dst_port = reader.integer<std::uint16_t>(f[3], "dst_port", 0, 65535);
    try {
      p.protocol = parse_protocol(f[4]);
    } catch (const InputError& e) {
      reader.fail("proto", e.what());
    }
    p.timestamp = reader.real(f[5], "timestamp");
    try {
      p.direction = parse_direction(f[6]);
    } catch (const InputError& e) {
      reader.fail("direction", e.what());
    }
    p.payload_len = reader.integer<std::uint32_t>(f[7], "payload_len", 0, 65535);
    if (p.src_ip.empty()) reader.fail("src_ip", "empty address");
    if (p.dst_ip.empty()) reader.fail("dst_ip", "empty address");
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<PacketRecord> read_packet_records(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_packet_records(in, path.string());
}

void write_packet_records(std::ostream& out, std::span<const PacketRecord> records) {
  out << "# " << kPacketLayout << '\n';
  for (const PacketRecord& p : records) {
    out << p.src_ip << ',' << p.src_port << ',' << p.dst_ip << ',' << p.dst_port << ','
        << to_string(p.protocol) << ',' << format_time(p.timestamp) << ','
        << to_string(p.direction) << ',' << p.payload_len << '\n';
  }
}

void write_packet_records(const std::filesystem::path& path, std::span<const PacketRecord> records) {
  auto out = open_out(path);
  write_packet_records(out, records);
}

MappingTable read_mapping_table(std::istream& in, const std::string& source) {
  CsvReader reader(in, source);
  std::vector<std::string_view> f;
  std::vector<MappingEntry> entries;
  while (reader.next(f)) {
    reader.expect_fields(f, 3, "inbound_port,outbound_port,created_at");
    MappingEntry e;
    e.inbound = reader.integer<std::uint16_t>(f[0], "inbound_port", 1, 65535);
    e.outbound = reader.integer<std::uint16_t>(f[1], "outbound_port", 1, 65535);
    e.created_at = reader.real(f[2], "created_at");
    entries.push_back(e);
  }
  return MappingTable(std::move(entries));
}

MappingTable read_mapping_table(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_mapping_table(in, path.string());
}

void write_mapping_table(const std::filesystem::path& path, const MappingTable& table) {
  auto out = open_out(path);
  out << "# inbound_port,outbound_port,created_at\n";
  for (const MappingEntry& e : table.entries())
    out << e.inbound << ',' << e.outbound << ',' << format_time(e.created_at) << '\n';
}

std::vector<FlowLabel> read_flow_labels(const std::filesystem::path& path) {
  auto in = open_in(path);
  CsvReader reader(in, path.string());
  std::vector<std::string_view> f;
  std::vector<FlowLabel> out;
  while (reader.next(f)) {
    reader.expect_fields(f, 7, "src_ip,src_port,dst_ip,dst_port,proto,start_time,label");
    FlowLabel l;
    l.key.src_ip = std::string(f[0]);
    l.key.src_port = reader.integer<std::uint16_t>(f[1], "src_port", 0, 65535);
    l.key.dst_ip = std::string(f[2]);
    l.key.dst_port = reader.integer<std::uint16_t>(f[3], "dst_port", 0, 65535);
    try {
      l.key.protocol = parse_protocol(f[4]);
    } catch (const InputError& e) {
      reader.fail("proto", e.what());
    }
    l.start_time = reader.real(f[5], "start_time");
    l.label = reader.integer<int>(f[6], "label", 0, 1 << 20);
    out.push_back(std::move(l));
  }
  return out;
}

void write_flow_labels(const std::filesystem::path& path, std::span<const FlowLabel> labels) {
  auto out = open_out(path);
  out << "# src_ip,src_port,dst_ip,dst_port,proto,start_time,label\n";
  for (const FlowLabel& l : labels)
    out << l.key.src_ip << ',' << l.key.src_port << ',' << l.key.dst_ip << ',' << l.key.dst_port
        << ',' << to_string(l.key.protocol) << ',' << format_time(l.start_time) << ',' << l.label
        << '\n';
}

// --- line-delimited JSON datasets ----------------------------------------------

namespace {

json key_to_json(const FlowKey& k) {
  return json::array({k.src_ip, k.src_port, k.dst_ip, k.dst_port, to_string(k.protocol)});
}

json flow_to_json(const FlowSequence& f, bool with_label) {
  json j;
  j["key"] = key_to_json(f.key);
  j["start_time"] = f.start_time;
  j["tokens"] = std::vector<int>(f.tokens.begin(), f.tokens.begin() + f.true_len);
  if (with_label && f.label) j["label"] = *f.label;
  return j;
}

class JsonlReader {
 public:
  JsonlReader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}

  bool next(json& out) {
    while (std::getline(in_, line_)) {
      ++line_no_;
      if (trim(line_).empty()) continue;
      try {
        out = json::parse(line_);
      } catch (const json::parse_error& e) {
        fail("<line>", std::string("malformed JSON: ") + e.what());
      }
      if (!out.is_object()) fail("<line>", "expected a JSON object");
      return true;
    }
    return false;
  }

  [[noreturn]] void fail(const std::string& field, const std::string& what) const {
    throw FormatError(source_, line_no_, field, what);
  }

  const json& member(const json& obj, const std::string& name, const std::string& path) const {
    auto it = obj.find(name);
    if (it == obj.end()) fail(path, "missing");
    return *it;
  }

  long long integer(const json& obj, const std::string& name, const std::string& path,
                    long long lo, long long hi) const {
    const json& v = member(obj, name, path);
    if (!v.is_number_integer()) fail(path, "expected an integer");
    const long long x = v.get<long long>();
    if (x < lo || x > hi) fail(path, "value " + std::to_string(x) + " out of range");
    return x;
  }

  double real(const json& obj, const std::string& name, const std::string& path) const {
    const json& v = member(obj, name, path);
    if (!v.is_number()) fail(path, "expected a number");
    return v.get<double>();
  }

  FlowKey key(const json& obj, const std::string& path) const {
    const json& k = member(obj, "key", path);
    if (!k.is_array() || k.size() != 5) fail(path, "expected [src_ip, src_port, dst_ip, dst_port, proto]");
    try {
      FlowKey out;
      out.src_ip = k[0].get<std::string>();
      out.src_port = k[1].get<std::uint16_t>();
      out.dst_ip = k[2].get<std::string>();
      out.dst_port = k[3].get<std::uint16_t>();
      out.protocol = parse_protocol(k[4].get<std::string>());
      return out;
    } catch (const std::exception& e) {
      fail(path, e.what());
    }
  }

  FlowSequence flow(const json& obj, const std::string& path, FlowKind kind, int n) const {
    FlowSequence f;
    f.kind = kind;
    f.key = key(obj, path + ".key");
    f.start_time = real(obj, "start_time", path + ".start_time");
    const json& toks = member(obj, "tokens", path + ".tokens");
    if (!toks.is_array() || toks.empty()) fail(path + ".tokens", "expected a non-empty array");
    if (static_cast<int>(toks.size()) > n)
      fail(path + ".tokens", "has " + std::to_string(toks.size()) + " tokens, n is " + std::to_string(n));
    std::vector<int> raw;
    raw.reserve(toks.size());
    for (const json& t : toks) {
      if (!t.is_number_integer()) fail(path + ".tokens", "non-integer token");
      const int v = t.get<int>();
      if (v <= kPadToken || v >= kVocabSize) fail(path + ".tokens", "token " + std::to_string(v) + " outside [1, 3000]");
      raw.push_back(v);
    }
    auto padded = pad_or_truncate(raw, n);
    f.tokens = std::move(padded.tokens);
    f.true_len = padded.true_len;
    return f;
  }

  int header_n(const json& header, const std::string& format) const {
    if (!header.contains("format") || header["format"] != format) fail("format", "expected '" + format + "'");
    const long long version = integer(header, "schema_version", "schema_version", 0, 1 << 20);
    if (version != kDatasetSchemaVersion)
      fail("schema_version", "unsupported version " + std::to_string(version));
    return static_cast<int>(integer(header, "n", "n", 1, 1 << 20));
  }

 private:
  std::istream& in_;
  std::string source_;
  std::string line_;
  std::size_t line_no_ = 0;
};

}  // namespace

std::size_t write_dataset(std::span<const ParallelFlowPair> pairs, int n,
                          const std::filesystem::path& path) {
  auto out = open_out(path);
  out << json{{"format", "tunnelfp.pairs"}, {"schema_version", kDatasetSchemaVersion}, {"n", n}}.dump() << '\n';
  for (const ParallelFlowPair& p : pairs) {
    if (p.tls.length() != n || p.tun.length() != n)
      throw InputError("write_dataset: pair length differs from n=" + std::to_string(n));
    json j;
    j["label"] = p.label;
    j["tls"] = flow_to_json(p.tls, false);
    j["tun"] = flow_to_json(p.tun, false);
    out << j.dump() << '\n';
  }
  return pairs.size();
}

PairDataset read_dataset(std::istream& in, const std::string& source) {
  JsonlReader reader(in, source);
  json j;
  if (!reader.next(j)) throw FormatError(source, 0, "header", "missing header line");
  PairDataset ds;
  ds.n = reader.header_n(j, "tunnelfp.pairs");
  while (reader.next(j)) {
    ParallelFlowPair p;
    p.label = static_cast<int>(reader.integer(j, "label", "label", 0, 1 << 20));
    p.tls = reader.flow(reader.member(j, "tls", "tls"), "tls", FlowKind::Tls, ds.n);
    p.tun = reader.flow(reader.member(j, "tun", "tun"), "tun", FlowKind::Tunnel, ds.n);
    p.tls.label = p.tun.label = p.label;
    ds.pairs.push_back(std::move(p));
  }
  return ds;
}

PairDataset read_dataset(const std::filesystem::path& path) {
  auto in = open_in(path);
  return read_dataset(in, path.string());
}

void write_flows(std::span<const FlowSequence> flows, int n, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << json{{"format", "tunnelfp.flows"}, {"schema_version", kDatasetSchemaVersion}, {"n", n}}.dump() << '\n';
  for (const FlowSequence& f : flows) {
    json j = flow_to_json(f, true);
    j["kind"] = to_string(f.kind);
    out << j.dump() << '\n';
  }
}

std::vector<FlowSequence> read_flows(const std::filesystem::path& path, int* n_out) {
  auto in = open_in(path);
  JsonlReader reader(in, path.string());
  json j;
  if (!reader.next(j)) throw FormatError(path.string(), 0, "header", "missing header line");
  const int n = reader.header_n(j, "tunnelfp.flows");
  if (n_out) *n_out = n;
  std::vector<FlowSequence> flows;
  while (reader.next(j)) {
    FlowKind kind = FlowKind::Tls;
    try {
      kind = parse_flow_kind(reader.member(j, "kind", "kind").get<std::string>());
    } catch (const std::exception& e) {
      reader.fail("kind", e.what());
    }
    FlowSequence f = reader.flow(j, "flow", kind, n);
    if (j.contains("label")) f.label = static_cast<int>(reader.integer(j, "label", "label", 0, 1 << 20));
    flows.push_back(std::move(f));
  }
  return flows;
}

}  // namespace tunnelfp
