#include "tunnelfp/config.hpp"

#include <climits>
#include <fstream>
#include <optional>
#include <set>

namespace tunnelfp {

using nlohmann::json;

namespace {

// Reads keys from one JSON object and rejects whatever it did not consume.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: '" + label() + "' must be an object");
  }

  // Literals built in code are signed; parsed text is unsigned.
  static bool nonnegative(const json& v) {
    return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
  }

  void read(const char* key, int& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer() || v->get<std::int64_t>() < INT_MIN || v->get<std::int64_t>() > INT_MAX)
        fail(key, "an integer");
      out = v->get<int>();
    }
  }
  void read(const char* key, std::uint32_t& out) {
    if (const json* v = take(key)) {
      if (!nonnegative(*v) || v->get<std::uint64_t>() > UINT32_MAX) fail(key, "a nonnegative 32-bit integer");
      out = v->get<std::uint32_t>();
    }
  }
  void read(const char* key, std::uint64_t& out) {
    if (const json* v = take(key)) {
      if (!nonnegative(*v)) fail(key, "a nonnegative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void read(const char* key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) fail(key, "a number");
      out = v->get<double>();
    }
  }
  void read(const char* key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    }
  }
  void read(const char* key, std::vector<std::string>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) fail(key, "an array of strings");
      out.clear();
      for (const json& e : *v) {
        if (!e.is_string()) fail(key, "an array of strings");
        out.push_back(e.get<std::string>());
      }
    }
  }
  template <typename E, typename Parse>
  void read_enum(const char* key, E& out, Parse parse) {
    std::string s;
    read(key, s);
    if (s.empty()) return;
    try {
      out = parse(s);
    } catch (const InputError& e) {
      throw ConfigError("config: " + label() + "." + key + ": " + e.what());
    }
  }
  bool has(const char* key) const { return j_.contains(key); }

  /// Child section, or nullptr when absent.
  std::optional<Section> child(const char* key) {
    const json* v = take(key);
    if (!v) return std::nullopt;
    return Section(*v, path_.empty() ? key : path_ + "." + key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key()))
        throw ConfigError("config: unknown key '" + (path_.empty() ? it.key() : path_ + "." + it.key()) + "'");
  }

 private:
  std::string label() const { return path_.empty() ? "<root>" : path_; }
  const json* take(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }
  [[noreturn]] void fail(const char* key, const char* what) const {
    throw ConfigError("config: " + (path_.empty() ? std::string(key) : path_ + "." + key) + " must be " + what);
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

std::vector<TunnelProfile> SimulationConfig::resolve_profiles() const {
  if (!profiles_file.empty()) return read_profiles(profiles_file);
  if (profiles.empty()) return stock_profiles();
  std::vector<TunnelProfile> out;
  for (const std::string& name : profiles) {
    try {
      out.push_back(stock_profile(name));
    } catch (const InputError& e) {
      throw ConfigError(std::string("config: Simulation.profiles: ") + e.what());
    }
  }
  return out;
}

void RunConfig::validate() const {
  try {
    net.validate();
    train.validate();
    weights.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const InputError& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (!(correlation.epsilon >= 0.0)) throw ConfigError("config: CorrelationConfig.epsilon must be >= 0");
  if (correlation.n < 1) throw ConfigError("config: CorrelationConfig.n must be >= 1");
  if (!(correlation.idle_timeout > 0.0)) throw ConfigError("config: CorrelationConfig.idle_timeout must be > 0");
  if (simulation.options.pairs_per_app_per_profile < 1)
    throw ConfigError("config: Simulation.pairs_per_app_per_profile must be >= 1");
  if (!(simulation.options.port_reuse_fraction >= 0.0 && simulation.options.port_reuse_fraction <= 1.0))
    throw ConfigError("config: Simulation.port_reuse_fraction must lie in [0, 1]");
  if (!simulation.profiles_file.empty()) {
    if (!std::filesystem::exists(simulation.profiles_file))
      throw ConfigError("config: Simulation.profiles_file '" + simulation.profiles_file + "' does not exist");
  } else {
    simulation.resolve_profiles();
  }
}

void RunConfig::override_seed(std::uint64_t s) {
  seed = s;
  train.seed = s;
  simulation.options.seed = s;
}

RunConfig parse_run_config(const json& doc) {
  RunConfig cfg;
  Section root(doc, "");
  root.read("seed", cfg.seed);
  cfg.train.seed = cfg.seed;
  cfg.simulation.options.seed = cfg.seed;

  if (auto s = root.child("CorrelationConfig")) {
    s->read("epsilon", cfg.correlation.epsilon);
    s->read("n", cfg.correlation.n);
    s->read("idle_timeout", cfg.correlation.idle_timeout);
    s->finish();
  }
  if (auto s = root.child("NetConfig")) {
    s->read("vocab", cfg.net.vocab);
    s->read("embed_dim", cfg.net.embed_dim);
    s->read("hidden", cfg.net.hidden);
    s->read("seq_len", cfg.net.seq_len);
    s->read("classes", cfg.net.classes);
    s->read("grl_lambda", cfg.net.grl_lambda);
    s->finish();
  }
  if (auto s = root.child("TrainConfig")) {
    TrainConfig& t = cfg.train;
    s->read("batch_size", t.batch_size);
    s->read("learning_rate", t.learning_rate);
    s->read("max_epochs", t.max_epochs);
    s->read("patience", t.patience);
    s->read("seed", t.seed);
    s->read("train_fraction", t.train_fraction);
    s->read("val_fraction", t.val_fraction);
    s->read("test_fraction", t.test_fraction);
    s->read_enum("ablation", t.ablation, parse_ablation);
    s->read_enum("model", t.model, parse_model_kind);
    s->read("threads", t.threads);
    s->finish();
  }
  if (auto s = root.child("LossWeights")) {
    s->read("lambda1", cfg.weights.lambda1);
    s->read("lambda2", cfg.weights.lambda2);
    s->read("lambda3", cfg.weights.lambda3);
    s->read("lambda4", cfg.weights.lambda4);
    s->read("lambda5", cfg.weights.lambda5);
    s->finish();
  }
  if (auto s = root.child("Simulation")) {
    SimulationOptions& o = cfg.simulation.options;
    AppModelOptions& a = cfg.simulation.apps;
    s->read("seed", o.seed);
    s->read("pairs_per_app_per_profile", o.pairs_per_app_per_profile);
    s->read("n", o.n);
    s->read("port_reuse_fraction", o.port_reuse_fraction);
    s->read("reuse_gap", o.reuse_gap);
    s->read("session_spacing", o.session_spacing);
    s->read("device_ip", o.device_ip);
    s->read("tunnel_server_ip", o.tunnel_server_ip);
    s->read("profiles", cfg.simulation.profiles);
    s->read("profiles_file", cfg.simulation.profiles_file);
    if (auto m = s->child("apps")) {
      m->read("num_apps", a.num_apps);
      m->read("templates_per_app", a.templates_per_app);
      m->read("template_min_len", a.template_min_len);
      m->read("template_max_len", a.template_max_len);
      m->read("jitter", a.jitter);
      m->read("shared_template_prob", a.shared_template_prob);
      m->read("transition_sharpness", a.transition_sharpness);
      m->read("states_per_app", a.states_per_app);
      m->read("state_half_width", a.state_half_width);
      m->read("shared_state_prob", a.shared_state_prob);
      m->read("min_packets", a.min_packets);
      m->read("max_packets", a.max_packets);
      m->finish();
    }
    s->finish();
  }
  root.finish();
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path.string() + ": " + e.what());
  }
  return parse_run_config(doc);
}

json to_json(const RunConfig& c) {
  const SimulationOptions& o = c.simulation.options;
  const AppModelOptions& a = c.simulation.apps;
  json j;
  j["seed"] = c.seed;
  j["CorrelationConfig"] = {
      {"epsilon", c.correlation.epsilon}, {"n", c.correlation.n}, {"idle_timeout", c.correlation.idle_timeout}};
  j["NetConfig"] = {{"vocab", c.net.vocab},     {"embed_dim", c.net.embed_dim}, {"hidden", c.net.hidden},
                    {"seq_len", c.net.seq_len}, {"classes", c.net.classes},     {"grl_lambda", c.net.grl_lambda}};
  j["TrainConfig"] = {{"batch_size", c.train.batch_size},
                      {"learning_rate", c.train.learning_rate},
                      {"max_epochs", c.train.max_epochs},
                      {"patience", c.train.patience},
                      {"seed", c.train.seed},
                      {"train_fraction", c.train.train_fraction},
                      {"val_fraction", c.train.val_fraction},
                      {"test_fraction", c.train.test_fraction},
                      {"ablation", to_string(c.train.ablation)},
                      {"model", to_string(c.train.model)},
                      {"threads", c.train.threads}};
  j["LossWeights"] = {{"lambda1", c.weights.lambda1},
                      {"lambda2", c.weights.lambda2},
                      {"lambda3", c.weights.lambda3},
                      {"lambda4", c.weights.lambda4},
                      {"lambda5", c.weights.lambda5}};
  j["Simulation"] = {{"seed", o.seed},
                     {"pairs_per_app_per_profile", o.pairs_per_app_per_profile},
                     {"n", o.n},
                     {"port_reuse_fraction", o.port_reuse_fraction},
                     {"reuse_gap", o.reuse_gap},
                     {"session_spacing", o.session_spacing},
                     {"device_ip", o.device_ip},
                     {"tunnel_server_ip", o.tunnel_server_ip},
                     {"profiles", c.simulation.profiles},
                     {"profiles_file", c.simulation.profiles_file},
                     {"apps",
                      {{"num_apps", a.num_apps},
                       {"templates_per_app", a.templates_per_app},
                       {"template_min_len", a.template_min_len},
                       {"template_max_len", a.template_max_len},
                       {"jitter", a.jitter},
                       {"shared_template_prob", a.shared_template_prob},
                       {"transition_sharpness", a.transition_sharpness},
                       {"states_per_app", a.states_per_app},
                       {"state_half_width", a.state_half_width},
                       {"shared_state_prob", a.shared_state_prob},
                       {"min_packets", a.min_packets},
                       {"max_packets", a.max_packets}}}};
  return j;
}

}  // namespace tunnelfp
