#include "tunnelfp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace tunnelfp {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes little-endian hosts");

namespace {

constexpr char kMagic[8] = {'T', 'F', 'P', 'C', 'K', 'P', 'T', '\0'};

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) throw CheckpointError("checkpoint truncated reading " + what);
  return v;
}

std::string get_string(std::istream& in, const std::string& what) {
  const auto len = get<std::uint32_t>(in, what + " length");
  if (len > (1u << 24)) throw CheckpointError("checkpoint " + what + " length implausible");
  std::string s(len, '\0');
  if (!in.read(s.data(), len)) throw CheckpointError("checkpoint truncated reading " + what);
  return s;
}

void put_string(std::ostream& out, const std::string& s) {
  put(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

nlohmann::json config_json(const NetConfig& c) {
  return {{"vocab", c.vocab},     {"embed_dim", c.embed_dim}, {"hidden", c.hidden},
          {"seq_len", c.seq_len}, {"classes", c.classes},     {"grl_lambda", c.grl_lambda}};
}

NetConfig config_from_json(const nlohmann::json& j) {
  NetConfig c;
  try {
    c.vocab = j.at("vocab").get<int>();
    c.embed_dim = j.at("embed_dim").get<int>();
    c.hidden = j.at("hidden").get<int>();
    c.seq_len = j.at("seq_len").get<int>();
    c.classes = j.at("classes").get<int>();
    c.grl_lambda = j.at("grl_lambda").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
  }
  return c;
}

}  // namespace

void save_checkpoint(const ModelState& state, const std::filesystem::path& path) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(kMagic, sizeof(kMagic));
    put(out, kCheckpointVersion);
    put_string(out, config_json(state.config).dump());
    put(out, state.seed);
    put(out, state.step);
    put(out, static_cast<std::uint32_t>(state.layout.entries.size()));
    for (const ParamEntry& e : state.layout.entries) {
      put_string(out, e.name);
      put(out, static_cast<std::uint32_t>(e.rows));
      put(out, static_cast<std::uint32_t>(e.cols));
      out.write(reinterpret_cast<const char*>(state.params.data() + e.offset),
                static_cast<std::streamsize>(e.size() * sizeof(double)));
    }
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

ModelState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[sizeof(kMagic)];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError(path.string() + " is not a checkpoint");
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  NetConfig cfg;
  try {
    cfg = config_from_json(nlohmann::json::parse(get_string(in, "config")));
    cfg.validate();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint config unreadable: ") + e.what());
  } catch (const InputError& e) {
    throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
  }
  ModelState state;
  state.config = cfg;
  state.layout = ModelLayout::build(cfg);
  state.params.assign(state.layout.total, 0.0);
  state.seed = get<std::uint64_t>(in, "seed");
  state.step = get<std::uint64_t>(in, "step");
  const auto count = get<std::uint32_t>(in, "tensor count");
  if (count != state.layout.entries.size())
    throw CheckpointError("checkpoint has " + std::to_string(count) + " tensors, layout expects " +
                          std::to_string(state.layout.entries.size()));
  for (const ParamEntry& e : state.layout.entries) {
    const std::string name = get_string(in, "tensor name");
    const auto rows = get<std::uint32_t>(in, "rows");
    const auto cols = get<std::uint32_t>(in, "cols");
    if (name != e.name) throw CheckpointError("checkpoint tensor '" + name + "' where '" + e.name + "' expected");
    if (rows != static_cast<std::uint32_t>(e.rows) || cols != static_cast<std::uint32_t>(e.cols))
      throw CheckpointError("shape mismatch for " + e.name + ": file " + std::to_string(rows) + "x" +
                            std::to_string(cols) + ", expected " + std::to_string(e.rows) + "x" +
                            std::to_string(e.cols));
    if (!in.read(reinterpret_cast<char*>(state.params.data() + e.offset),
                 static_cast<std::streamsize>(e.size() * sizeof(double))))
      throw CheckpointError("checkpoint truncated in " + e.name);
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError("trailing bytes after checkpoint tensors");
  return state;
}

}  // namespace tunnelfp
