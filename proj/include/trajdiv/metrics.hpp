#pragma once

// Accuracy, spread and admissibility metrics over a set of N predicted
// futures of one scene, plus corpus aggregation.

#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "trajdiv/scene.hpp"

namespace trajdiv::metrics {

using scene::Point2;
using TrajectorySet = std::vector<std::vector<Point2>>;

inline constexpr double kRfCap = 1e6;
inline constexpr double kDaoScale = 1e4;

struct Accuracy {
  double made = 0.0;
  double mfde = 0.0;
  double avg_fde = 0.0;
};

/// Throws std::invalid_argument on an empty set or a horizon mismatch.
Accuracy made_mfde(const TrajectorySet& set, std::span<const Point2> truth);

struct RfValue {
  double value = 1.0;
  bool capped = false;  // mFDE was zero
};

/// avgFDE / mFDE, or kRfCap when mFDE is zero.
RfValue rf(const TrajectorySet& set, std::span<const Point2> truth);

struct SelfDistance {
  double asd = 0.0;
  double fsd = 0.0;
};

/// Mean over predictions of the distance to the nearest other prediction.
/// Throws std::invalid_argument when N < 2.
SelfDistance asd_fsd(const TrajectorySet& set);

/// Fraction of predictions with every point on a drivable cell of the raster.
double dac(const TrajectorySet& set, const scene::SceneMap& map);

/// Distinct drivable cells hit by any predicted point, per 1e4 drivable cells.
double dao(const TrajectorySet& set, const scene::SceneMap& map);

struct SceneMetrics {
  std::string id;
  double made = 0.0, mfde = 0.0, avg_fde = 0.0;
  double rf = 1.0;
  bool rf_capped = false;
  double asd = 0.0, fsd = 0.0;
  double dac = 0.0, dao = 0.0;
};

SceneMetrics evaluate_scene(const std::string& id, const TrajectorySet& set, std::span<const Point2> truth,
                            const scene::SceneMap& map);

struct EvalReport {
  std::size_t n_samples = 0;
  std::vector<SceneMetrics> scenes;
  /// Corpus means in scene order. rF averages only uncapped scenes.
  SceneMetrics mean;
  std::size_t rf_capped_count = 0;

  nlohmann::json to_json() const;
  /// Header plus one row per scene.
  std::string to_csv() const;
};

EvalReport summarize(std::vector<SceneMetrics> scenes, std::size_t n_samples);

}  // namespace trajdiv::metrics
