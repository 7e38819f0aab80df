#pragma once

// Procedural road scenes: layouts, simulated agent trajectories, agent-centred
// rasters and the chamfer distance field used by the layout penalty.

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "trajdiv/autodiff.hpp"

namespace trajdiv::scene {

struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend Point2 operator+(Point2 a, Point2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Point2 operator-(Point2 a, Point2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Point2 operator*(double s, Point2 p) { return {s * p.x, s * p.y}; }
  friend bool operator==(Point2 a, Point2 b) = default;
};

double norm(Point2 p);
double distance(Point2 a, Point2 b);

using Polyline = std::vector<Point2>;

struct Polygon {
  std::vector<Point2> vertices;

  bool contains(Point2 p) const;
  /// True when no two non-adjacent edges intersect.
  bool is_simple() const;
};

inline constexpr std::size_t kPastLen = 12;
inline constexpr std::size_t kFutureLen = 6;
inline constexpr double kRateHz = 2.0;
inline constexpr double kMaxSpeed = 15.0;

struct Trajectory {
  std::vector<Point2> points;
  double rate_hz = kRateHz;
  std::size_t past_len = kPastLen;

  std::span<const Point2> past() const { return std::span(points).first(past_len); }
  std::span<const Point2> future() const { return std::span(points).subspan(past_len); }
  std::size_t future_len() const { return points.size() - past_len; }
  /// S_p(T_p): the last past point.
  Point2 current() const { return points.at(past_len - 1); }
};

enum class LayoutKind { straight, t_intersection, crossroad, curve };

std::string to_string(LayoutKind kind);
LayoutKind parse_layout_kind(std::string_view name);
inline constexpr std::array<LayoutKind, 4> kAllLayoutKinds = {LayoutKind::straight, LayoutKind::t_intersection,
                                                             LayoutKind::crossroad, LayoutKind::curve};

struct GeometryParams {
  double road_width = 6.0;     // [3, 8] m
  double curve_radius = 20.0;  // >= 8 m
  int curve_direction = 1;     // +1 left, -1 right
  double road_length = 100.0;  // half-length of each arm
};

/// Draws geometry parameters inside the valid ranges.
GeometryParams sample_geometry(std::mt19937_64& rng);

struct Route {
  Polyline points;
  /// Arc length at which the route starts to leave the approach road.
  double junction_s = 0.0;

  double length() const;
  Point2 point_at(double s) const;
};

struct Layout {
  LayoutKind kind = LayoutKind::straight;
  std::vector<Polygon> drivable;
  std::vector<Polyline> centerlines;
  /// Every way through the layout from the approach road; one is drawn
  /// uniformly per simulated agent.
  std::vector<Route> routes;

  bool drivable_at(Point2 p) const;
};

/// Deterministic in (kind, seed, params). Throws std::invalid_argument on
/// geometry outside the documented ranges or self-intersecting roads.
Layout generate_layout(LayoutKind kind, std::uint64_t seed, const GeometryParams& params);

struct AgentOptions {
  double speed_min = 3.0;
  double speed_max = 6.0;
  /// Std-dev of the multiplicative per-step speed noise (clamped at 3 sigma).
  double speed_noise = 0.1;
  std::size_t past_len = kPastLen;
  std::size_t future_len = kFutureLen;
  double rate_hz = kRateHz;
  double max_speed = kMaxSpeed;
};

struct SimulatedAgent {
  Trajectory trajectory;
  std::size_t route_index = 0;
};

/// Follows one uniformly chosen route. Throws std::runtime_error when the
/// route is too short for the requested horizon.
SimulatedAgent simulate_agent(const Layout& layout, std::uint64_t seed, const AgentOptions& options = {});

/// p -> [a b; c d] p + t
struct Affine2 {
  double a = 1, b = 0, c = 0, d = 1, tx = 0, ty = 0;

  Point2 apply(Point2 p) const { return {a * p.x + b * p.y + tx, c * p.x + d * p.y + ty}; }
  Affine2 inverse() const;
  /// (this o other)(p) = this(other(p))
  Affine2 compose(const Affine2& other) const;
  static Affine2 rigid(double angle, Point2 translation);
  std::array<double, 6> to_array() const { return {a, b, c, d, tx, ty}; }
  static Affine2 from_array(const std::array<double, 6>& v) { return {v[0], v[1], v[2], v[3], v[4], v[5]}; }
};

enum Channel : std::size_t { kDrivable = 0, kLanes = 1, kAgents = 2, kChannels = 3 };

inline constexpr double kExtent = 50.0;
inline constexpr double kBehind = 10.0;

/// Agent-centred, heading-aligned raster. Cell (r, c) has its centre at grid
/// coordinate (c, r); the current agent position maps to the centre of the
/// anchor cell (anchor_row, anchor_col).
struct SceneMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> grid;  // H x W x 3, row-major
  Affine2 world_to_agent;
  Affine2 world_to_grid;

  double resolution() const { return kExtent / static_cast<double>(width); }
  double at(std::size_t r, std::size_t c, std::size_t ch) const { return grid[(r * width + c) * kChannels + ch]; }
  double& at(std::size_t r, std::size_t c, std::size_t ch) { return grid[(r * width + c) * kChannels + ch]; }
  std::vector<double> drivable_mask() const;
  Point2 to_grid(Point2 world) const { return world_to_grid.apply(world); }
  Point2 to_world(Point2 grid_point) const { return world_to_grid.inverse().apply(grid_point); }
  /// Whether the cell containing the point lies inside the raster and is drivable.
  bool drivable_at(Point2 world) const;
  std::size_t anchor_row() const { return height / 2; }
  std::size_t anchor_col() const;
  std::size_t drivable_count() const;
};

/// Affine map from the agent frame to grid coordinates for a square raster.
Affine2 agent_to_grid(std::size_t grid_size);

/// Heading of the last past displacement.
double heading_of(const Trajectory& trajectory);

/// Throws std::invalid_argument when grid_size < 32.
SceneMap rasterize(const Layout& layout, const Trajectory& trajectory, std::size_t grid_size);

/// Normalized distance to the drivable set, values in [0, 1].
struct ChamferField {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;
  Affine2 world_to_grid;

  double at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
};

/// Two-pass 3/4 chamfer distance to the nonzero cells of `mask`, normalized
/// by its maximum. Throws std::invalid_argument when no cell is drivable.
ChamferField chamfer_transform(std::span<const double> mask, std::size_t height, std::size_t width,
                               const Affine2& world_to_grid = {});
ChamferField chamfer_transform(const SceneMap& map);

/// Bilinear lookup at a world point. Outside the cell-centre hull of the
/// raster the value is 1 and the gradient zero.
double sample_field(const ChamferField& field, Point2 world, Point2* gradient = nullptr);

/// Differentiable lookup of K world points given as a Kx2 Var; returns K values.
ad::Var sample_field(const ChamferField& field, const ad::Var& world_points);

struct SceneRecord {
  std::string id;
  LayoutKind kind = LayoutKind::straight;
  std::uint64_t seed = 0;
  Trajectory trajectory;
  SceneMap map;
};

/// Stable identifier: hex FNV-1a hash of (kind, seed).
std::string scene_id(LayoutKind kind, std::uint64_t seed);

/// Layout + agent + raster, redrawn with derived sub-seeds until the ground
/// truth future stays on drivable cells with a zero chamfer penalty.
SceneRecord generate_record(LayoutKind kind, std::uint64_t seed, std::size_t grid_size);

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace trajdiv::scene
