#pragma once

// Deterministic SVG rendering of scenes and sweep plots.

#include <span>
#include <string>
#include <vector>

#include "trajdiv/scene.hpp"

namespace trajdiv::svg {

/// Raster cells (drivable gray, other dark), past in blue, ground-truth
/// future in green and one red polyline per prediction. World-frame input.
/// Points are drawn in grid coordinates, one unit per cell, scaled by
/// `cell_px`.
std::string scene_plot(const scene::SceneRecord& record, const std::vector<std::vector<scene::Point2>>& predictions,
                       double cell_px = 8.0);

/// FSD on the left axis and DAC on the right axis against lambda.
std::string lambda_plot(std::span<const double> lambdas, std::span<const double> fsd, std::span<const double> dac);

}  // namespace trajdiv::svg
