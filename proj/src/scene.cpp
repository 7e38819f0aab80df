#include "trajdiv/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace trajdiv::scene {
namespace {

constexpr double kPi = std::numbers::pi;

double cross(Point2 a, Point2 b) { return a.x * b.y - a.y * b.x; }

int orientation(Point2 a, Point2 b, Point2 c) {
  const double v = cross(b - a, c - a);
  if (v > 1e-12) return 1;
  if (v < -1e-12) return -1;
  return 0;
}

bool on_segment(Point2 a, Point2 b, Point2 p) {
  return std::min(a.x, b.x) - 1e-12 <= p.x && p.x <= std::max(a.x, b.x) + 1e-12 &&
         std::min(a.y, b.y) - 1e-12 <= p.y && p.y <= std::max(a.y, b.y) + 1e-12;
}

bool segments_intersect(Point2 p1, Point2 p2, Point2 q1, Point2 q2) {
  const int o1 = orientation(p1, p2, q1), o2 = orientation(p1, p2, q2);
  const int o3 = orientation(q1, q2, p1), o4 = orientation(q1, q2, p2);
  if (o1 != o2 && o3 != o4) return true;
  if (o1 == 0 && on_segment(p1, p2, q1)) return true;
  if (o2 == 0 && on_segment(p1, p2, q2)) return true;
  if (o3 == 0 && on_segment(q1, q2, p1)) return true;
  if (o4 == 0 && on_segment(q1, q2, p2)) return true;
  return false;
}

double point_segment_distance(Point2 p, Point2 a, Point2 b) {
  const Point2 ab = b - a;
  const double len2 = ab.x * ab.x + ab.y * ab.y;
  double t = len2 > 0 ? ((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return distance(p, a + t * ab);
}

Point2 unit(Point2 p) {
  const double n = norm(p);
  return n > 0 ? Point2{p.x / n, p.y / n} : Point2{1.0, 0.0};
}

// Closed polygon covering a band of half-width `half_width` around `line`.
Polygon strip_polygon(const Polyline& line, double half_width) {
  const std::size_t n = line.size();
  std::vector<Point2> left(n), right(n);
  for (std::size_t i = 0; i < n; ++i) {
    Point2 tangent;
    double miter = 1.0;
    if (i == 0) {
      tangent = unit(line[1] - line[0]);
    } else if (i + 1 == n) {
      tangent = unit(line[n - 1] - line[n - 2]);
    } else {
      const Point2 t0 = unit(line[i] - line[i - 1]);
      const Point2 t1 = unit(line[i + 1] - line[i]);
      tangent = unit(t0 + t1);
      miter = 1.0 / std::max(0.2, tangent.x * t0.x + tangent.y * t0.y);
    }
    const Point2 normal{-tangent.y, tangent.x};
    left[i] = line[i] + (half_width * miter) * normal;
    right[i] = line[i] - (half_width * miter) * normal;
  }
  Polygon poly;
  poly.vertices = left;
  poly.vertices.insert(poly.vertices.end(), right.rbegin(), right.rend());
  return poly;
}

void append_arc(Polyline& line, Point2 center, double radius, double start_angle, double sweep, int segments) {
  for (int k = 1; k <= segments; ++k) {
    const double a = start_angle + sweep * static_cast<double>(k) / segments;
    line.push_back({center.x + radius * std::cos(a), center.y + radius * std::sin(a)});
  }
}

// Approach along -x, turn onto the road x = 0 towards sign(+y).
Route turn_route(double length, double half_width, int sign) {
  Route r;
  r.points = {{-length, 0.0}, {-half_width, 0.0}};
  // Quarter arc of radius half_width centred on the intersection corner.
  const Point2 center{-half_width, sign * half_width};
  const double start = sign > 0 ? -kPi / 2 : kPi / 2;
  append_arc(r.points, center, half_width, start, sign * kPi / 2, 12);
  r.points.push_back({0.0, sign * length});
  r.junction_s = length - half_width;
  return r;
}

Polyline transform_line(const Polyline& line, const Affine2& t) {
  Polyline out;
  out.reserve(line.size());
  for (Point2 p : line) out.push_back(t.apply(p));
  return out;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

double norm(Point2 p) { return std::hypot(p.x, p.y); }
double distance(Point2 a, Point2 b) { return norm(a - b); }

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(seed ^ splitmix64(stream + 0x632BE59BD9B4E019ULL));
}

bool Polygon::contains(Point2 p) const {
  bool inside = false;
  const std::size_t n = vertices.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Point2 a = vertices[i], b = vertices[j];
    if ((a.y > p.y) != (b.y > p.y)) {
      const double x = (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x;
      if (p.x < x) inside = !inside;
    }
  }
  return inside;
}

bool Polygon::is_simple() const {
  const std::size_t n = vertices.size();
  if (n < 3) return false;
  for (std::size_t i = 0; i < n; ++i) {
    const Point2 a1 = vertices[i], a2 = vertices[(i + 1) % n];
    for (std::size_t j = i + 2; j < n; ++j) {
      if (i == 0 && j == n - 1) continue;  // adjacent through the closing edge
      if (segments_intersect(a1, a2, vertices[j], vertices[(j + 1) % n])) return false;
    }
  }
  return true;
}

std::string to_string(LayoutKind kind) {
  switch (kind) {
    case LayoutKind::straight:
      return "straight";
    case LayoutKind::t_intersection:
      return "t-intersection";
    case LayoutKind::crossroad:
      return "crossroad";
    case LayoutKind::curve:
      return "curve";
  }
  return "unknown";
}

LayoutKind parse_layout_kind(std::string_view name) {
  for (LayoutKind k : kAllLayoutKinds) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown layout kind '" + std::string(name) + "'");
}

GeometryParams sample_geometry(std::mt19937_64& rng) {
  GeometryParams p;
  p.road_width = std::uniform_real_distribution<double>(4.0, 8.0)(rng);
  p.curve_radius = std::uniform_real_distribution<double>(12.0, 35.0)(rng);
  p.curve_direction = std::bernoulli_distribution(0.5)(rng) ? 1 : -1;
  return p;
}

double Route::length() const {
  double s = 0.0;
  for (std::size_t i = 1; i < points.size(); ++i) s += distance(points[i - 1], points[i]);
  return s;
}

Point2 Route::point_at(double s) const {
  if (s <= 0.0) return points.front();
  for (std::size_t i = 1; i < points.size(); ++i) {
    const double seg = distance(points[i - 1], points[i]);
    if (s <= seg && seg > 0) return points[i - 1] + (s / seg) * (points[i] - points[i - 1]);
    s -= seg;
  }
  return points.back();
}

bool Layout::drivable_at(Point2 p) const {
  return std::any_of(drivable.begin(), drivable.end(), [p](const Polygon& poly) { return poly.contains(p); });
}

Layout generate_layout(LayoutKind kind, std::uint64_t seed, const GeometryParams& params) {
  if (!(params.road_width >= 3.0 && params.road_width <= 8.0)) {
    throw std::invalid_argument("road width " + std::to_string(params.road_width) + " outside [3, 8] m");
  }
  if (kind == LayoutKind::curve && !(params.curve_radius >= 8.0)) {
    throw std::invalid_argument("curve radius " + std::to_string(params.curve_radius) + " below 8 m");
  }
  if (params.curve_direction != 1 && params.curve_direction != -1) {
    throw std::invalid_argument("curve direction must be +1 or -1");
  }
  if (!(params.road_length >= 60.0)) throw std::invalid_argument("road length must be at least 60 m");

  const double len = params.road_length;
  const double hw = params.road_width / 2.0;
  Layout layout;
  layout.kind = kind;
  switch (kind) {
    case LayoutKind::straight: {
      const Polyline line{{-len, 0.0}, {len, 0.0}};
      layout.centerlines = {line};
      layout.routes = {Route{line, len}};
      break;
    }
    case LayoutKind::t_intersection: {
      layout.centerlines = {{{-len, 0.0}, {0.0, 0.0}}, {{0.0, -len}, {0.0, len}}};
      layout.routes = {turn_route(len, hw, 1), turn_route(len, hw, -1)};
      break;
    }
    case LayoutKind::crossroad: {
      layout.centerlines = {{{-len, 0.0}, {len, 0.0}}, {{0.0, -len}, {0.0, len}}};
      layout.routes = {Route{{{-len, 0.0}, {len, 0.0}}, len - hw}, turn_route(len, hw, 1), turn_route(len, hw, -1)};
      break;
    }
    case LayoutKind::curve: {
      const double r = params.curve_radius;
      const int dir = params.curve_direction;
      Polyline line{{-len, 0.0}, {0.0, 0.0}};
      append_arc(line, {0.0, dir * r}, r, -dir * kPi / 2, dir * kPi / 2, 45);
      line.push_back({r, dir * (r + len)});
      layout.centerlines = {line};
      layout.routes = {Route{line, len}};
      break;
    }
  }
  for (const Polyline& line : layout.centerlines) {
    Polygon poly = strip_polygon(line, hw);
    if (!poly.is_simple()) throw std::invalid_argument("road geometry is self-intersecting");
    layout.drivable.push_back(std::move(poly));
  }

  // Random placement of the whole layout in the world frame.
  std::mt19937_64 rng(mix_seed(seed, 1));
  const double angle = std::uniform_real_distribution<double>(0.0, 2.0 * kPi)(rng);
  std::uniform_real_distribution<double> shift(-200.0, 200.0);
  const double tx = shift(rng);
  const double ty = shift(rng);
  const Affine2 place = Affine2::rigid(angle, {tx, ty});
  for (Polygon& poly : layout.drivable) poly.vertices = transform_line(poly.vertices, place);
  for (Polyline& line : layout.centerlines) line = transform_line(line, place);
  for (Route& route : layout.routes) route.points = transform_line(route.points, place);
  return layout;
}

SimulatedAgent simulate_agent(const Layout& layout, std::uint64_t seed, const AgentOptions& options) {
  if (layout.routes.empty()) throw std::runtime_error("layout has no route through the spawn region");
  if (options.past_len < 2) throw std::invalid_argument("past horizon must hold at least two points");
  if (options.speed_max * (1.0 + 3.0 * options.speed_noise) > options.max_speed) {
    throw std::invalid_argument("nominal speed range exceeds the kinematic limit");
  }
  std::mt19937_64 rng(mix_seed(seed, 2));
  SimulatedAgent agent;
  agent.route_index =
      std::uniform_int_distribution<std::size_t>(0, layout.routes.size() - 1)(rng);
  const Route& route = layout.routes[agent.route_index];

  const double speed = std::uniform_real_distribution<double>(options.speed_min, options.speed_max)(rng);
  double s_cur = 0.0;
  switch (layout.kind) {
    case LayoutKind::straight:
      s_cur = std::uniform_real_distribution<double>(route.junction_s - 20.0, route.junction_s + 20.0)(rng);
      break;
    case LayoutKind::t_intersection:
    case LayoutKind::crossroad:
      s_cur = route.junction_s - std::uniform_real_distribution<double>(0.0, 12.0)(rng);
      break;
    case LayoutKind::curve:
      s_cur = route.junction_s - std::uniform_real_distribution<double>(-5.0, 15.0)(rng);
      break;
  }

  const std::size_t total = options.past_len + options.future_len;
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<double> step(total - 1);
  for (double& l : step) {
    const double m = std::clamp(1.0 + options.speed_noise * noise(rng), 1.0 - 3.0 * options.speed_noise,
                                1.0 + 3.0 * options.speed_noise);
    l = speed * m / options.rate_hz;
  }

  std::vector<double> s(total);
  const std::size_t cur = options.past_len - 1;
  s[cur] = s_cur;
  for (std::size_t i = cur; i-- > 0;) s[i] = s[i + 1] - step[i];
  for (std::size_t i = cur + 1; i < total; ++i) s[i] = s[i - 1] + step[i - 1];
  if (s.front() < 0.0 || s.back() > route.length()) {
    throw std::runtime_error("no feasible path of sufficient length along the chosen route");
  }

  agent.trajectory.rate_hz = options.rate_hz;
  agent.trajectory.past_len = options.past_len;
  agent.trajectory.points.reserve(total);
  for (double si : s) agent.trajectory.points.push_back(route.point_at(si));
  return agent;
}

Affine2 Affine2::inverse() const {
  const double det = a * d - b * c;
  if (det == 0.0) throw std::runtime_error("affine map is singular");
  Affine2 inv;
  inv.a = d / det;
  inv.b = -b / det;
  inv.c = -c / det;
  inv.d = a / det;
  inv.tx = -(inv.a * tx + inv.b * ty);
  inv.ty = -(inv.c * tx + inv.d * ty);
  return inv;
}

Affine2 Affine2::compose(const Affine2& o) const {
  Affine2 r;
  r.a = a * o.a + b * o.c;
  r.b = a * o.b + b * o.d;
  r.c = c * o.a + d * o.c;
  r.d = c * o.b + d * o.d;
  r.tx = a * o.tx + b * o.ty + tx;
  r.ty = c * o.tx + d * o.ty + ty;
  return r;
}

Affine2 Affine2::rigid(double angle, Point2 translation) {
  const double cs = std::cos(angle), sn = std::sin(angle);
  return {cs, -sn, sn, cs, translation.x, translation.y};
}

std::vector<double> SceneMap::drivable_mask() const {
  std::vector<double> mask(height * width);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = grid[i * kChannels + kDrivable];
  return mask;
}

std::size_t SceneMap::anchor_col() const {
  return static_cast<std::size_t>(std::lround(static_cast<double>(width) * kBehind / kExtent));
}

bool SceneMap::drivable_at(Point2 world) const {
  const Point2 g = to_grid(world);
  const long c = std::lround(g.x);
  const long r = std::lround(g.y);
  if (c < 0 || r < 0 || c >= static_cast<long>(width) || r >= static_cast<long>(height)) return false;
  return at(static_cast<std::size_t>(r), static_cast<std::size_t>(c), kDrivable) > 0.5;
}

std::size_t SceneMap::drivable_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < height * width; ++i) n += grid[i * kChannels + kDrivable] > 0.5 ? 1 : 0;
  return n;
}

Affine2 agent_to_grid(std::size_t grid_size) {
  const double res = kExtent / static_cast<double>(grid_size);
  const double anchor_col = static_cast<double>(std::lround(static_cast<double>(grid_size) * kBehind / kExtent));
  const double anchor_row = static_cast<double>(grid_size / 2);
  // x forward -> columns, y left -> rows decreasing.
  return {1.0 / res, 0.0, 0.0, -1.0 / res, anchor_col, anchor_row};
}

double heading_of(const Trajectory& trajectory) {
  const Point2 d = trajectory.points.at(trajectory.past_len - 1) - trajectory.points.at(trajectory.past_len - 2);
  if (d.x == 0.0 && d.y == 0.0) return 0.0;
  return std::atan2(d.y, d.x);
}

SceneMap rasterize(const Layout& layout, const Trajectory& trajectory, std::size_t grid_size) {
  if (grid_size < 32) throw std::invalid_argument("grid size must be at least 32");
  SceneMap map;
  map.height = map.width = grid_size;
  map.grid.assign(grid_size * grid_size * kChannels, 0.0);
  const Point2 cur = trajectory.current();
  const Affine2 rot = Affine2::rigid(-heading_of(trajectory), {0.0, 0.0});
  map.world_to_agent = rot.compose(Affine2{1, 0, 0, 1, -cur.x, -cur.y});
  map.world_to_grid = agent_to_grid(grid_size).compose(map.world_to_agent);
  const Affine2 grid_to_world = map.world_to_grid.inverse();
  const Affine2 grid_to_agent = agent_to_grid(grid_size).inverse();
  const double res = map.resolution();

  for (std::size_t r = 0; r < grid_size; ++r) {
    for (std::size_t c = 0; c < grid_size; ++c) {
      const Point2 gp{static_cast<double>(c), static_cast<double>(r)};
      const Point2 w = grid_to_world.apply(gp);
      map.at(r, c, kDrivable) = layout.drivable_at(w) ? 1.0 : 0.0;
      double dmin = std::numeric_limits<double>::infinity();
      for (const Polyline& line : layout.centerlines) {
        for (std::size_t i = 1; i < line.size(); ++i) dmin = std::min(dmin, point_segment_distance(w, line[i - 1], line[i]));
      }
      map.at(r, c, kLanes) = std::max(0.0, 1.0 - dmin / res);
      const Point2 a = grid_to_agent.apply(gp);
      map.at(r, c, kAgents) = (a.x >= -3.5 && a.x <= 1.0 && std::abs(a.y) <= 1.0) ? 1.0 : 0.0;
    }
  }
  return map;
}

ChamferField chamfer_transform(std::span<const double> mask, std::size_t height, std::size_t width,
                               const Affine2& world_to_grid) {
  if (mask.size() != height * width) throw std::invalid_argument("chamfer: mask size does not match H x W");
  constexpr long kInf = std::numeric_limits<long>::max() / 4;
  std::vector<long> d(height * width, kInf);
  bool any = false;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] > 0.5) {
      d[i] = 0;
      any = true;
    }
  }
  if (!any) throw std::invalid_argument("chamfer: mask contains no drivable cell");

  const long h = static_cast<long>(height), w = static_cast<long>(width);
  auto cell = [&](long r, long c) -> long& { return d[static_cast<std::size_t>(r * w + c)]; };
  auto relax = [&](long r, long c, long rr, long cc, long cost) {
    if (rr < 0 || cc < 0 || rr >= h || cc >= w) return;
    cell(r, c) = std::min(cell(r, c), cell(rr, cc) + cost);
  };
  for (long r = 0; r < h; ++r) {
    for (long c = 0; c < w; ++c) {
      relax(r, c, r - 1, c - 1, 4);
      relax(r, c, r - 1, c, 3);
      relax(r, c, r - 1, c + 1, 4);
      relax(r, c, r, c - 1, 3);
    }
  }
  for (long r = h - 1; r >= 0; --r) {
    for (long c = w - 1; c >= 0; --c) {
      relax(r, c, r + 1, c + 1, 4);
      relax(r, c, r + 1, c, 3);
      relax(r, c, r + 1, c - 1, 4);
      relax(r, c, r, c + 1, 3);
    }
  }
  const long dmax = *std::max_element(d.begin(), d.end());

  ChamferField field;
  field.height = height;
  field.width = width;
  field.world_to_grid = world_to_grid;
  field.values.resize(d.size());
  // The 1/3 scaling to cell units cancels in the normalization.
  for (std::size_t i = 0; i < d.size(); ++i) {
    field.values[i] = dmax > 0 ? static_cast<double>(d[i]) / static_cast<double>(dmax) : 0.0;
  }
  return field;
}

ChamferField chamfer_transform(const SceneMap& map) {
  const std::vector<double> mask = map.drivable_mask();
  return chamfer_transform(mask, map.height, map.width, map.world_to_grid);
}

double sample_field(const ChamferField& field, Point2 world, Point2* gradient) {
  const Point2 g = field.world_to_grid.apply(world);
  const double wmax = static_cast<double>(field.width - 1);
  const double hmax = static_cast<double>(field.height - 1);
  if (!(g.x >= 0.0 && g.x <= wmax && g.y >= 0.0 && g.y <= hmax)) {
    if (gradient) *gradient = {0.0, 0.0};
    return 1.0;
  }
  const std::size_t x0 = std::min(static_cast<std::size_t>(std::floor(g.x)), field.width - 2);
  const std::size_t y0 = std::min(static_cast<std::size_t>(std::floor(g.y)), field.height - 2);
  const double fx = g.x - static_cast<double>(x0);
  const double fy = g.y - static_cast<double>(y0);
  const double v00 = field.at(y0, x0), v01 = field.at(y0, x0 + 1);
  const double v10 = field.at(y0 + 1, x0), v11 = field.at(y0 + 1, x0 + 1);
  const double value =
      (1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v01 + (1 - fx) * fy * v10 + fx * fy * v11;
  if (gradient) {
    const double dgx = (1 - fy) * (v01 - v00) + fy * (v11 - v10);
    const double dgy = (1 - fx) * (v10 - v00) + fx * (v11 - v01);
    const Affine2& t = field.world_to_grid;
    *gradient = {dgx * t.a + dgy * t.c, dgx * t.b + dgy * t.d};
  }
  return value;
}

ad::Var sample_field(const ChamferField& field, const ad::Var& world_points) {
  const Shape& s = world_points.shape();
  if (s.size() != 2 || s[1] != 2) throw ShapeError("sample_field: expected Kx2 points, got " + shape_str(s));
  const std::size_t k = s[0];
  Tensor out({k});
  auto grads = std::make_shared<std::vector<Point2>>(k);
  const auto& pts = world_points.value();
  for (std::size_t i = 0; i < k; ++i) {
    out[i] = sample_field(field, {pts[2 * i], pts[2 * i + 1]}, &(*grads)[i]);
  }
  return ad::make_op(std::move(out), {world_points}, "sample_field", [world_points, grads, k](ad::Node& self) {
    Tensor g(world_points.shape());
    for (std::size_t i = 0; i < k; ++i) {
      g[2 * i] = self.grad[i] * (*grads)[i].x;
      g[2 * i + 1] = self.grad[i] * (*grads)[i].y;
    }
    ad::accumulate_grad(world_points, std::move(g));
  });
}

std::string scene_id(LayoutKind kind, std::uint64_t seed) {
  const std::string key = to_string(kind) + ":" + std::to_string(seed);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : key) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

SceneRecord generate_record(LayoutKind kind, std::uint64_t seed, std::size_t grid_size) {
  for (std::uint64_t attempt = 0; attempt < 64; ++attempt) {
    const std::uint64_t sub = mix_seed(seed, attempt);
    std::mt19937_64 geo_rng(mix_seed(sub, 11));
    const GeometryParams geometry = sample_geometry(geo_rng);
    const Layout layout = generate_layout(kind, mix_seed(sub, 12), geometry);
    SimulatedAgent agent;
    try {
      agent = simulate_agent(layout, mix_seed(sub, 13));
    } catch (const std::runtime_error&) {
      continue;
    }
    SceneMap map = rasterize(layout, agent.trajectory, grid_size);
    const ChamferField field = chamfer_transform(map);
    bool admissible = true;
    for (Point2 p : agent.trajectory.future()) {
      if (!map.drivable_at(p) || sample_field(field, p) != 0.0) {
        admissible = false;
        break;
      }
    }
    if (!admissible) continue;
    SceneRecord rec;
    rec.id = scene_id(kind, seed);
    rec.kind = kind;
    rec.seed = seed;
    rec.trajectory = std::move(agent.trajectory);
    rec.map = std::move(map);
    return rec;
  }
  throw std::runtime_error("could not generate an admissible scene for seed " + std::to_string(seed));
}

}  // namespace trajdiv::scene
