#include "tunnelfp/params.hpp"

#include <cmath>

#include "tunnelfp/rng.hpp"

namespace tunnelfp {

void NetConfig::validate() const {
  if (vocab < 2) throw InputError("NetConfig: vocab must be >= 2");
  if (embed_dim < 1) throw InputError("NetConfig: embed_dim must be >= 1");
  if (hidden < 1) throw InputError("NetConfig: hidden must be >= 1");
  if (seq_len < 1) throw InputError("NetConfig: seq_len must be >= 1");
  if (classes < 2) throw InputError("NetConfig: classes must be >= 2");
  if (!(grl_lambda > 0)) throw InputError("NetConfig: grl_lambda must be > 0");
}

namespace {

class LayoutBuilder {
 public:
  explicit LayoutBuilder(ModelLayout& layout) : layout_(layout) {}

  void begin_group(const std::string& name) {
    close_group();
    layout_.groups.push_back({name, layout_.total, layout_.total});
  }

  void close_group() {
    if (!layout_.groups.empty()) layout_.groups.back().end = layout_.total;
  }

  std::size_t add(const std::string& name, int rows, int cols, double init_scale) {
    ParamEntry e;
    e.name = name;
    e.group = layout_.groups.back().name;
    e.offset = layout_.total;
    e.rows = rows;
    e.cols = cols;
    e.init_scale = init_scale;
    layout_.total += e.size();
    layout_.entries.push_back(std::move(e));
    return layout_.entries.back().offset;
  }

  GruSlot gru(const std::string& prefix, int in, int hidden) {
    GruSlot s;
    s.in = in;
    s.hidden = hidden;
    s.w = add(prefix + ".W", 3 * hidden, in, 1.0 / std::sqrt(static_cast<double>(in)));
    s.u = add(prefix + ".U", 3 * hidden, hidden, 1.0 / std::sqrt(static_cast<double>(hidden)));
    s.b = add(prefix + ".b", 3 * hidden, 1, 0.0);
    return s;
  }

  StackSlot stack(const std::string& prefix, int in, int hidden) {
    StackSlot s;
    for (int l = 0; l < 2; ++l) {
      const int layer_in = l == 0 ? in : 2 * hidden;
      const std::string p = prefix + ".l" + std::to_string(l);
      s.layers[static_cast<std::size_t>(l)].fwd = gru(p + ".fwd", layer_in, hidden);
      s.layers[static_cast<std::size_t>(l)].bwd = gru(p + ".bwd", layer_in, hidden);
    }
    return s;
  }

  AffineSlot affine(const std::string& prefix, int in, int out) {
    AffineSlot s;
    s.in = in;
    s.out = out;
    s.w = add(prefix + ".W", out, in, 1.0 / std::sqrt(static_cast<double>(in)));
    s.b = add(prefix + ".b", out, 1, 0.0);
    return s;
  }

 private:
  ModelLayout& layout_;
};

}  // namespace

ModelLayout ModelLayout::build(const NetConfig& cfg) {
  cfg.validate();
  ModelLayout layout;
  LayoutBuilder b(layout);
  const int d = cfg.embed_dim;
  const int h = cfg.hidden;

  b.begin_group("embedding");
  layout.embedding = b.add("embedding", d, cfg.vocab, 1.0);

  for (Branch br : {Branch::Tls, Branch::Tun}) {
    const std::string name = branch_name(br);
    auto& slots = layout.branches[static_cast<std::size_t>(br)];
    b.begin_group(name + ".enc_p");
    slots.enc_p = b.stack(name + ".enc_p", d, h);
    b.begin_group(name + ".enc_a");
    slots.enc_a = b.stack(name + ".enc_a", d, h);
    b.begin_group(name + ".proto_head");
    slots.proto_head = b.affine(name + ".proto_head", 2 * h, cfg.classes);
  }

  b.begin_group("decoder");
  layout.decoder = b.stack("decoder", 4 * h, h);
  b.begin_group("decoder.out");
  layout.decoder_out = b.affine("decoder.out", 2 * h, d);
  b.begin_group("app_head");
  layout.app_head = b.affine("app_head", 2 * h, cfg.classes);
  b.close_group();
  return layout;
}

const ParamGroup& ModelLayout::group(const std::string& name) const {
  for (const ParamGroup& g : groups)
    if (g.name == name) return g;
  throw InputError("unknown parameter group '" + name + "'");
}

ModelState ModelState::initialize(const NetConfig& cfg, std::uint64_t seed) {
  ModelState s;
  s.config = cfg;
  s.layout = ModelLayout::build(cfg);
  s.params.assign(s.layout.total, 0.0);
  s.seed = seed;
  for (std::size_t i = 0; i < s.layout.entries.size(); ++i) {
    const ParamEntry& e = s.layout.entries[i];
    if (e.init_scale == 0.0) continue;
    Rng rng(mix_seed(seed, i, 0x1417u));
    for (std::size_t k = 0; k < e.size(); ++k) s.params[e.offset + k] = rng.uniform(-e.init_scale, e.init_scale);
  }
  return s;
}

bool ModelState::all_finite() const {
  for (double v : params)
    if (!std::isfinite(v)) return false;
  return true;
}

void randomize_group(ModelState& state, const std::string& group, std::uint64_t seed, double scale) {
  const ParamGroup& g = state.layout.group(group);
  Rng rng(mix_seed(seed, 0x7A5Du));
  for (std::size_t i = g.begin; i < g.end; ++i) state.params[i] = rng.uniform(-scale, scale);
}

}  // namespace tunnelfp
