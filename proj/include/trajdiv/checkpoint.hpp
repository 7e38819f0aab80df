#pragma once

// Binary parameter checkpoints.
//
// Layout (all integers and reals little-endian):
//   magic "TDCKPT01" (8 bytes), u32 format version, u32 entry count,
//   then per entry: u32 path length, path bytes, u32 rank, u64 dims[rank],
//   f64 values[prod(dims)] in row-major order.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "trajdiv/nn.hpp"

namespace trajdiv::checkpoint {

inline constexpr std::uint32_t kFormatVersion = 1;

using Entry = std::pair<std::string, Tensor>;

void write_entries(const std::filesystem::path& path, const std::vector<Entry>& entries);
std::vector<Entry> read_entries(const std::filesystem::path& path);

/// Parameters then buffers, in collection order.
void save(const std::filesystem::path& path, const nn::ParameterList& params);
/// Every parameter and buffer must be present with a matching shape.
void load(const std::filesystem::path& path, const nn::ParameterList& params);

std::vector<Entry> snapshot(const nn::ParameterList& params);
void restore(const std::vector<Entry>& entries, const nn::ParameterList& params);

}  // namespace trajdiv::checkpoint
