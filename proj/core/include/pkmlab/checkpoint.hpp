#pragma once

#include <cstdint>
#include <filesystem>

#include <json.hpp>

#include "pkmlab/encoder.hpp"

namespace pkmlab {

inline constexpr const char* kCheckpointFormat = "pkmlab.checkpoint";
inline constexpr int kCheckpointVersion = 1;

// Writes `dir`/manifest.json and `dir`/params.bin. Tensors are stored in
// lexicographic name order as little-endian float32; batch-norm running
// statistics are included. `extra` is stored verbatim under "run".
void save_checkpoint(Encoder<float>& model, const std::filesystem::path& dir, std::int64_t step,
                     const nlohmann::json& extra = nlohmann::json::object());

struct Checkpoint {
  Encoder<float> model;
  std::int64_t step = 0;
  nlohmann::json manifest;
};

// Throws std::runtime_error on an unknown format or version, a blob whose
// length disagrees with the manifest, or a tensor missing from either side.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// FNV-1a over the raw bytes of every parameter in name order; restricted to
// memory parameters when `memory_only`.
std::uint64_t parameter_hash(Encoder<float>& model, bool memory_only = false);

}  // namespace pkmlab
