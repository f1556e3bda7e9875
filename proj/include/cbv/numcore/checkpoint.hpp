#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cbv/numcore/tensor.hpp"

namespace cbv::numcore {

/// Ordered map keeps parameter iteration deterministic everywhere.
using ParamMap = std::map<std::string, Tensor>;

/// Binary tensor container, little-endian throughout:
///   magic "CBVW" | u16 version (=1) | u32 tensor count
///   per tensor: u16 name length | name bytes | u8 rank | u32 extents[rank]
///               | f32 payload, row-major
/// Round-trips are bit-exact.
void save_checkpoint(const std::string& path, const ParamMap& tensors);
ParamMap load_checkpoint(const std::string& path);

inline constexpr std::uint16_t kCheckpointVersion = 1;

}  // namespace cbv::numcore
