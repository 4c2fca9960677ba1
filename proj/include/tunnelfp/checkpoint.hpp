#pragma once

#include <filesystem>
#include <stdexcept>

#include "tunnelfp/params.hpp"

namespace tunnelfp {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Binary container: magic, version, NetConfig (JSON), seed, step, then
/// every named tensor with its shape. Written to a temporary file and
/// renamed into place.
void save_checkpoint(const ModelState& state, const std::filesystem::path& path);

/// Rejects unknown versions and any tensor whose name or shape disagrees
/// with the layout implied by the stored NetConfig.
ModelState load_checkpoint(const std::filesystem::path& path);

}  // namespace tunnelfp
