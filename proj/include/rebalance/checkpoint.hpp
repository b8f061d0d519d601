#pragma once

#include <cstdint>
#include <filesystem>

#include "rebalance/network.hpp"

namespace rebalance {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  NetworkSpec spec;
  ParamSet params;
};

/// Layout: magic "RBLC", u32 LE version, u32 LE length + JSON header (spec and
/// slot shapes), then each slot's values followed by its momentum buffer as
/// little-endian f64 in canonical slot order.
void save_checkpoint(const NetworkSpec& spec, const ParamSet& params,
                     const std::filesystem::path& path);

Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Loads and additionally requires the stored spec to equal `expected`.
Checkpoint load_checkpoint(const std::filesystem::path& path, const NetworkSpec& expected);

}  // namespace rebalance
