#pragma once

#include <cstdint>
#include <filesystem>

#include "fedseg/model.hpp"

namespace fedseg {

/// Binary checkpoint: "FSEG1" magic, little-endian u64 config digest, then one
/// record per entry (u32 name length, name bytes, tag byte, u32 rank, u64
/// extents, little-endian f64 payload). Round-trips bit-exactly.
void save_checkpoint(const std::filesystem::path& path, const ParamSet& params,
                     std::uint64_t config_digest);

struct LoadedCheckpoint {
  ParamSet params;
  std::uint64_t config_digest = 0;
};

/// Throws with the byte offset on magic/structure corruption or truncation.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace fedseg
