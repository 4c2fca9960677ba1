#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tunnelfp/checkpoint.hpp"
#include "tunnelfp/config.hpp"
#include "tunnelfp/fingerprint_eval.hpp"
#include "tunnelfp/gradcheck.hpp"
#include "tunnelfp/manifest.hpp"

using namespace tunnelfp;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "tunnelfp_test_config" / name;
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

void write(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

struct Run {
  int status = -1;
  std::string out;
  std::string err;
};

Run cli(const fs::path& work, const std::string& args) {
  const fs::path o = work / "stdout.txt", e = work / "stderr.txt";
  const std::string cmd = std::string("\"") + TUNNELFP_CLI + "\" " + args + " > \"" + o.string() + "\" 2> \"" +
                          e.string() + "\"";
  const int raw = std::system(cmd.c_str());
  Run r;
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = slurp(o);
  r.err = slurp(e);
  return r;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

// Small enough that the whole pipeline runs in a few seconds.
json small_config() {
  return json{{"seed", 3},
              {"CorrelationConfig", {{"n", 16}}},
              {"NetConfig", {{"embed_dim", 4}, {"hidden", 3}, {"seq_len", 16}, {"classes", 2}}},
              {"TrainConfig", {{"batch_size", 8}, {"max_epochs", 2}, {"learning_rate", 0.01}}},
              {"Simulation",
               {{"pairs_per_app_per_profile", 10},
                {"n", 16},
                {"profiles", {"v2ray_like"}},
                {"port_reuse_fraction", 0.2},
                {"apps", {{"num_apps", 2}}}}}};
}

}  // namespace

TEST_CASE("defaults mirror the documented values") {
  const RunConfig c = parse_run_config(json::object());
  CHECK(c.seed == 7);
  CHECK(c.correlation.epsilon == 1.0);
  CHECK(c.correlation.n == 200);
  CHECK(c.net.embed_dim == 128);
  CHECK(c.net.hidden == 128);
  CHECK(c.net.classes == 10);
  CHECK(c.train.batch_size == 256);
  CHECK(c.train.learning_rate == 1e-3);
  CHECK(c.train.patience == 10);
  CHECK(c.weights == LossWeights{});
  CHECK(c.simulation.options.pairs_per_app_per_profile == 200);
  CHECK(c.simulation.resolve_profiles().size() == 5);
}

TEST_CASE("seed propagates and sections override it") {
  RunConfig c = parse_run_config(json{{"seed", 11}});
  CHECK(c.train.seed == 11);
  CHECK(c.simulation.options.seed == 11);
  c = parse_run_config(json{{"seed", 11}, {"TrainConfig", {{"seed", 4}}}});
  CHECK(c.train.seed == 4);
  CHECK(c.simulation.options.seed == 11);
  c.override_seed(99);
  CHECK(c.seed == 99);
  CHECK(c.train.seed == 99);
  CHECK(c.simulation.options.seed == 99);
}

TEST_CASE("unknown keys and wrong types fail fast with the key path") {
  auto message = [](const json& j) {
    try {
      parse_run_config(j);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  CHECK(message(json{{"sed", 1}}) == "config: unknown key 'sed'");
  CHECK(message(json{{"NetConfig", {{"hiden", 3}}}}) == "config: unknown key 'NetConfig.hiden'");
  CHECK(message(json{{"Simulation", {{"apps", {{"num_app", 3}}}}}}) ==
        "config: unknown key 'Simulation.apps.num_app'");
  CHECK(message(json{{"TrainConfig", {{"batch_size", "big"}}}}).find("TrainConfig.batch_size") != std::string::npos);
  CHECK(message(json{{"TrainConfig", {{"ablation", "frd"}}}}).find("TrainConfig.ablation") != std::string::npos);
  CHECK(message(json{{"NetConfig", {{"classes", 1}}}}).find("classes") != std::string::npos);
  CHECK(message(json{{"TrainConfig", {{"train_fraction", 0.5}}}}) != "no error");
  CHECK(message(json{{"Simulation", {{"profiles", {"wireguard_like"}}}}}).find("wireguard_like") != std::string::npos);
  CHECK(message(json{{"Simulation", {{"profiles_file", "/nonexistent/p.txt"}}}}).find("does not exist") !=
        std::string::npos);
  CHECK(message(json::array()) != "no error");
}

TEST_CASE("config snapshot round trips through JSON") {
  const RunConfig a = parse_run_config(small_config());
  const RunConfig b = parse_run_config(to_json(a));
  CHECK(to_json(a) == to_json(b));
  CHECK(b.net == a.net);
  CHECK(b.simulation.profiles == std::vector<std::string>{"v2ray_like"});
}

TEST_CASE("manifest lists digests and no timestamps") {
  const fs::path dir = scratch("manifest");
  write(dir / "in.txt", "abc");
  CHECK(sha256_file(dir / "in.txt") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  write(dir / "empty.txt", "");
  CHECK(sha256_file(dir / "empty.txt") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  Manifest m;
  m.command = "eval";
  m.arguments = {"eval", "--out", "x"};
  m.config = parse_run_config(json::object());
  m.inputs = {dir / "in.txt"};
  m.outputs = {"metrics.csv"};
  write_manifest(dir / "manifest.json", m);
  const std::string first = slurp(dir / "manifest.json");
  write_manifest(dir / "manifest.json", m);
  CHECK(slurp(dir / "manifest.json") == first);
  const json j = json::parse(first);
  CHECK(j["format"] == "tunnelfp.manifest");
  CHECK(j["inputs"][0]["bytes"] == 3);
  CHECK(j["inputs"][0]["sha256"] == sha256_file(dir / "in.txt"));
  CHECK(parse_run_config(j["config"]).seed == 7);
}

TEST_CASE("command line pipeline: simulate, ingest, correlate, train, eval") {
  const fs::path w = scratch("pipeline");
  write(w / "run.json", small_config().dump(2));
  const std::string cfg = "--config " + q(w / "run.json");

  Run r = cli(w, cfg + " simulate --out " + q(w / "sim"));
  REQUIRE_MESSAGE(r.status == 0, r.err);
  CHECK(fs::exists(w / "sim" / "manifest.json"));
  CHECK(fs::exists(w / "sim" / "v2ray_like" / "mapping.csv"));
  const fs::path cap = w / "sim" / "v2ray_like";
  const std::string tls_before = slurp(cap / "tls_packets.csv");

  r = cli(w, cfg + " ingest --capture " + q(cap) + " --out " + q(w / "flows"));
  REQUIRE_MESSAGE(r.status == 0, r.err);
  CHECK(slurp(cap / "tls_packets.csv") == tls_before);

  r = cli(w, cfg + " correlate --flows " + q(w / "flows") + " --mapping " + q(cap / "mapping.csv") + " --out " +
                 q(w / "pairs"));
  REQUIRE_MESSAGE(r.status == 0, r.err);
  const PairDataset got = read_dataset(w / "pairs" / "pairs.jsonl");
  const PairDataset truth = read_dataset(cap / "ground_truth.jsonl");
  CHECK(got.pairs.size() == truth.pairs.size());
  CHECK(got.pairs.size() == 20);

  r = cli(w, cfg + " --threads 1 train --pairs " + q(w / "pairs" / "pairs.jsonl") + " --out " + q(w / "model"));
  REQUIRE_MESSAGE(r.status == 0, r.err);
  const std::string log = slurp(w / "model" / "train_log.txt");
  CHECK(std::count(log.begin(), log.end(), '\n') == 2);
  CHECK(log.find("val_macro_f1=") != std::string::npos);

  const std::string eval = cfg + " --checkpoint " + q(w / "model" / "model.ckpt") + " eval --pairs " +
                           q(w / "pairs" / "pairs.jsonl") + " --split " + q(w / "model" / "split.json") +
                           " --buckets 1,8,16 --out ";
  r = cli(w, eval + q(w / "eval1"));
  REQUIRE_MESSAGE(r.status == 0, r.err);
  r = cli(w, eval + q(w / "eval2"));
  REQUIRE_MESSAGE(r.status == 0, r.err);
  CHECK(slurp(w / "eval1" / "metrics.csv") == slurp(w / "eval2" / "metrics.csv"));
  CHECK(slurp(w / "eval1" / "report.txt") == slurp(w / "eval2" / "report.txt"));
  const auto rows = read_metrics_csv(w / "eval1" / "metrics.csv");
  REQUIRE(!rows.empty());
  CHECK(rows[0].bucket == "all");

  // Retraining from the manifest's config reproduces the log.
  const json manifest = json::parse(slurp(w / "model" / "manifest.json"));
  write(w / "from_manifest.json", manifest["config"].dump());
  r = cli(w, "--config " + q(w / "from_manifest.json") + " train --pairs " + q(w / "pairs" / "pairs.jsonl") +
                 " --out " + q(w / "model2"));
  REQUIRE_MESSAGE(r.status == 0, r.err);
  CHECK(slurp(w / "model2" / "train_log.txt") == log);
  CHECK(slurp(w / "model2" / "model.ckpt") == slurp(w / "model" / "model.ckpt"));

  r = cli(w, cfg + " --checkpoint " + q(w / "model" / "model.ckpt") + " fingerprint --pairs " +
                 q(w / "pairs" / "pairs.jsonl") + " --out " + q(w / "fp"));
  REQUIRE_MESSAGE(r.status == 0, r.err);
  const std::string fps = slurp(w / "fp" / "fingerprints.csv");
  CHECK(std::count(fps.begin(), fps.end(), '\n') == 21);
}

TEST_CASE("command line errors are single machine-parsable lines") {
  const fs::path w = scratch("errors");
  write(w / "bad.json", R"({"NetConfig": {"hiden": 3}})");
  Run r = cli(w, "--config " + q(w / "bad.json") + " gradcheck");
  CHECK(r.status == 2);
  CHECK(r.err == "tunnelfp: error[config]: config: unknown key 'NetConfig.hiden'\n");

  // A checkpoint written under another format version is refused.
  ModelState s = ModelState::initialize(GradCheckOptions{}.net, 1);
  save_checkpoint(s, w / "m.ckpt");
  std::string bytes = slurp(w / "m.ckpt");
  bytes[8] = static_cast<char>(kCheckpointVersion + 1);
  write(w / "old.ckpt", bytes);
  write(w / "pairs.jsonl", R"({"format":"tunnelfp.pairs","schema_version":1,"n":6})"
                           "\n");
  r = cli(w, "--checkpoint " + q(w / "old.ckpt") + " eval --pairs " + q(w / "pairs.jsonl") + " --out " + q(w / "o"));
  CHECK(r.status == 1);
  CHECK(r.err.rfind("tunnelfp: error[checkpoint]: ", 0) == 0);
  CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);

  r = cli(w, "train --pairs " + q(w / "missing.jsonl") + " --out " + q(w / "o"));
  CHECK(r.status == 1);
  CHECK(r.err.rfind("tunnelfp: error[input]: ", 0) == 0);

  r = cli(w, "--ablation frd gradcheck");
  CHECK(r.status != 0);
}

TEST_CASE("gradcheck subcommand reports per group and sets the exit status") {
  const fs::path w = scratch("gradcheck");
  Run r = cli(w, "gradcheck");
  CHECK(r.status == 0);
  CHECK(r.out.find("embedding") != std::string::npos);
  CHECK(r.out.find("tun.enc_a") != std::string::npos);
  CHECK(r.out.find("PASS") != std::string::npos);
  r = cli(w, "gradcheck --tolerance 1e-300");
  CHECK(r.status == 1);
  CHECK(r.err.rfind("tunnelfp: error[gradcheck]: ", 0) == 0);
}
