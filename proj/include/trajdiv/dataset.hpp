#pragma once

// Synthetic datasets of scene records and their on-disk form.
//
// A dataset directory holds `index.json` and one raster blob `rasters.bin`:
//   magic "TDRASTER" (8 bytes), u32 version, u32 H, u32 W, u32 C, u64 count,
//   then count * H * W * C little-endian f64 values, each raster row-major HWC.
// Each index record references its raster by position in the blob.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "trajdiv/scene.hpp"

namespace trajdiv::data {

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr const char* kIndexFile = "index.json";
inline constexpr const char* kRasterFile = "rasters.bin";

/// Relative weights of the layout kinds, in kAllLayoutKinds order.
struct LayoutMix {
  std::array<double, 4> weights = {0.4, 0.3, 0.2, 0.1};

  /// Accepts "0.4,0.3,0.2,0.1" or "straight=1,curve=0.5" (missing kinds get 0).
  /// Throws std::invalid_argument on negative, non-numeric or all-zero input.
  static LayoutMix parse(std::string_view text);
  std::string to_string() const;
  /// Kind counts for n scenes by largest remainder; sums to n.
  std::array<std::size_t, 4> counts(std::size_t n) const;
};

struct DatasetSpec {
  std::size_t n_train = 2000;
  std::size_t n_val = 400;
  std::size_t grid_size = 64;
  std::uint64_t seed = 1;
  LayoutMix mix;
};

struct Dataset {
  DatasetSpec spec;
  std::vector<scene::SceneRecord> train;
  std::vector<scene::SceneRecord> val;

  /// Record by id in either split, or nullptr.
  const scene::SceneRecord* find(std::string_view id) const;
};

/// Deterministic in the spec. Kinds follow the mix exactly (largest
/// remainder) in a seeded shuffled order.
Dataset generate(const DatasetSpec& spec);

void write(const Dataset& dataset, const std::filesystem::path& dir);
/// Throws std::runtime_error on missing files, a bad header or a version mismatch.
Dataset read(const std::filesystem::path& dir);

}  // namespace trajdiv::data
