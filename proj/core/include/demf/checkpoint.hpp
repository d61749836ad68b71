#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "demf/params.hpp"

namespace demf {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout: "DEMF", u32 version, then for each parameter in registration order:
// u32 name length, UTF-8 name, u32 rank, u64 extents, float64 payload. All
// integers and floats little-endian. The file ends after the last parameter.
void write_checkpoint(std::ostream& out, const ParamStore& store);
void save_checkpoint(const std::string& path, const ParamStore& store);

// Overwrites the store's values. Throws CheckpointMismatch unless the file
// holds exactly the store's name set with identical shapes.
void read_checkpoint(std::istream& in, ParamStore& store);
void load_checkpoint(const std::string& path, ParamStore& store);

}  // namespace demf
