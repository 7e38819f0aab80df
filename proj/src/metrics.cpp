#include "trajdiv/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>
#include <stdexcept>

namespace trajdiv::metrics {
namespace {

void check_set(const TrajectorySet& set, std::size_t horizon) {
  if (set.empty()) throw std::invalid_argument("empty trajectory set");
  for (const auto& traj : set) {
    if (traj.size() != horizon || horizon == 0) {
      throw std::invalid_argument("trajectory horizon mismatch: " + std::to_string(traj.size()) + " vs " +
                                  std::to_string(horizon));
    }
  }
}

double mean_distance(const std::vector<Point2>& a, std::span<const Point2> b) {
  double total = 0.0;
  for (std::size_t t = 0; t < a.size(); ++t) total += scene::distance(a[t], b[t]);
  return total / static_cast<double>(a.size());
}

}  // namespace

Accuracy made_mfde(const TrajectorySet& set, std::span<const Point2> truth) {
  check_set(set, truth.size());
  Accuracy acc;
  acc.made = std::numeric_limits<double>::infinity();
  acc.mfde = std::numeric_limits<double>::infinity();
  for (const auto& traj : set) {
    const double fde = scene::distance(traj.back(), truth.back());
    acc.made = std::min(acc.made, mean_distance(traj, truth));
    acc.mfde = std::min(acc.mfde, fde);
    acc.avg_fde += fde;
  }
  acc.avg_fde /= static_cast<double>(set.size());
  return acc;
}

RfValue rf(const TrajectorySet& set, std::span<const Point2> truth) {
  const Accuracy acc = made_mfde(set, truth);
  if (acc.mfde == 0.0) return {kRfCap, true};
  // mean >= min holds exactly in exact arithmetic; guard the rounding.
  return {std::max(1.0, acc.avg_fde / acc.mfde), false};
}

SelfDistance asd_fsd(const TrajectorySet& set) {
  if (set.size() < 2) throw std::invalid_argument("self distance needs at least two predictions");
  check_set(set, set.front().size());
  const std::size_t n = set.size();
  SelfDistance out;
  for (std::size_t i = 0; i < n; ++i) {
    double nearest_avg = std::numeric_limits<double>::infinity();
    double nearest_final = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      nearest_avg = std::min(nearest_avg, mean_distance(set[i], set[j]));
      nearest_final = std::min(nearest_final, scene::distance(set[i].back(), set[j].back()));
    }
    out.asd += nearest_avg;
    out.fsd += nearest_final;
  }
  out.asd /= static_cast<double>(n);
  out.fsd /= static_cast<double>(n);
  return out;
}

double dac(const TrajectorySet& set, const scene::SceneMap& map) {
  if (set.empty()) throw std::invalid_argument("empty trajectory set");
  std::size_t inside = 0;
  for (const auto& traj : set) {
    if (std::all_of(traj.begin(), traj.end(), [&](Point2 p) { return map.drivable_at(p); })) ++inside;
  }
  return static_cast<double>(inside) / static_cast<double>(set.size());
}

double dao(const TrajectorySet& set, const scene::SceneMap& map) {
  const std::size_t drivable = map.drivable_count();
  if (drivable == 0) throw std::invalid_argument("raster has no drivable cell");
  std::set<std::size_t> cells;
  for (const auto& traj : set) {
    for (Point2 p : traj) {
      if (!map.drivable_at(p)) continue;
      const Point2 g = map.to_grid(p);
      cells.insert(static_cast<std::size_t>(std::lround(g.y)) * map.width + static_cast<std::size_t>(std::lround(g.x)));
    }
  }
  return kDaoScale * static_cast<double>(cells.size()) / static_cast<double>(drivable);
}

SceneMetrics evaluate_scene(const std::string& id, const TrajectorySet& set, std::span<const Point2> truth,
                            const scene::SceneMap& map) {
  SceneMetrics m;
  m.id = id;
  const Accuracy acc = made_mfde(set, truth);
  m.made = acc.made;
  m.mfde = acc.mfde;
  m.avg_fde = acc.avg_fde;
  const RfValue r = rf(set, truth);
  m.rf = r.value;
  m.rf_capped = r.capped;
  const SelfDistance sd = asd_fsd(set);
  m.asd = sd.asd;
  m.fsd = sd.fsd;
  m.dac = dac(set, map);
  m.dao = dao(set, map);
  return m;
}

EvalReport summarize(std::vector<SceneMetrics> scenes, std::size_t n_samples) {
  EvalReport report;
  report.n_samples = n_samples;
  report.scenes = std::move(scenes);
  report.mean.id = "mean";
  const double count = static_cast<double>(report.scenes.size());
  if (report.scenes.empty()) return report;
  double rf_sum = 0.0;
  for (const SceneMetrics& s : report.scenes) {
    report.mean.made += s.made / count;
    report.mean.mfde += s.mfde / count;
    report.mean.avg_fde += s.avg_fde / count;
    report.mean.asd += s.asd / count;
    report.mean.fsd += s.fsd / count;
    report.mean.dac += s.dac / count;
    report.mean.dao += s.dao / count;
    if (s.rf_capped) {
      ++report.rf_capped_count;
    } else {
      rf_sum += s.rf;
    }
  }
  const std::size_t uncapped = report.scenes.size() - report.rf_capped_count;
  report.mean.rf = uncapped > 0 ? rf_sum / static_cast<double>(uncapped) : kRfCap;
  report.mean.rf_capped = uncapped == 0;
  return report;
}

namespace {

nlohmann::json scene_json(const SceneMetrics& s) {
  return {{"id", s.id},   {"made", s.made}, {"mfde", s.mfde}, {"avg_fde", s.avg_fde}, {"rf", s.rf},
          {"rf_capped", s.rf_capped}, {"asd", s.asd}, {"fsd", s.fsd}, {"dac", s.dac}, {"dao", s.dao}};
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

nlohmann::json EvalReport::to_json() const {
  nlohmann::json per_scene = nlohmann::json::array();
  for (const SceneMetrics& s : scenes) per_scene.push_back(scene_json(s));
  nlohmann::json m = scene_json(mean);
  m.erase("id");
  return {{"n_samples", n_samples},
          {"scene_count", scenes.size()},
          {"rf_capped_count", rf_capped_count},
          {"mean", m},
          {"scenes", per_scene}};
}

std::string EvalReport::to_csv() const {
  std::string out = "id,made,mfde,avg_fde,rf,rf_capped,asd,fsd,dac,dao\n";
  for (const SceneMetrics& s : scenes) {
    out += s.id + "," + fmt(s.made) + "," + fmt(s.mfde) + "," + fmt(s.avg_fde) + "," + fmt(s.rf) + "," +
           (s.rf_capped ? "1" : "0") + "," + fmt(s.asd) + "," + fmt(s.fsd) + "," + fmt(s.dac) + "," + fmt(s.dao) +
           "\n";
  }
  return out;
}

}  // namespace trajdiv::metrics
