#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ren/model.hpp"

namespace ren {

/// On-disk model: "RENC", u32 version, the five u32 config fields, u32
/// tensor count, then per tensor: u32 name length, name bytes, u32 rows,
/// u32 cols, rows*cols little-endian f32 (row-major).
struct Checkpoint {
  RenConfig config;
  RenParams<float> params;
};

std::vector<std::uint8_t> encode_checkpoint(const RenConfig& config, const RenParams<float>& params);
/// Throws FormatError on bad magic, truncation, unknown or missing tensors
/// and shape mismatches.
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint(const std::string& path, const RenConfig& config, const RenParams<float>& params);
Checkpoint read_checkpoint(const std::string& path);

}  // namespace ren
