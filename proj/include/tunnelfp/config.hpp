#pragma once

// Declarative run configuration. One JSON document with sections named
// after the types they fill:
//
//   { "seed": 7,
//     "CorrelationConfig": {...}, "NetConfig": {...}, "TrainConfig": {...},
//     "LossWeights": {...}, "Simulation": {...} }
//
// Unknown keys anywhere are rejected. The top-level seed feeds the
// simulator and the trainer unless a section sets its own "seed".

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "tunnelfp/ingest.hpp"
#include "tunnelfp/losses.hpp"
#include "tunnelfp/train.hpp"
#include "tunnelfp/tunnel_sim.hpp"

namespace tunnelfp {

class ConfigError : public InputError {
 public:
  using InputError::InputError;
};

struct SimulationConfig {
  SimulationOptions options;
  AppModelOptions apps;
  std::vector<std::string> profiles;  // stock profile names; empty = all five
  std::string profiles_file;          // overrides `profiles` when set

  std::vector<TunnelProfile> resolve_profiles() const;
};

struct RunConfig {
  std::uint64_t seed = 7;
  CorrelationConfig correlation;
  NetConfig net;
  TrainConfig train;
  LossWeights weights;
  SimulationConfig simulation;

  void validate() const;
  /// Sets every seed (top level, simulator, trainer).
  void override_seed(std::uint64_t s);
};

RunConfig parse_run_config(const nlohmann::json& doc);
RunConfig load_run_config(const std::filesystem::path& path);
/// Full snapshot with every key, suitable for parse_run_config.
nlohmann::json to_json(const RunConfig& cfg);

}  // namespace tunnelfp
