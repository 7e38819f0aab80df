#include "trajdiv/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace trajdiv::svg {
namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  std::string s = buf;
  // Avoid "-0.000", which would make otherwise equal files differ.
  if (s == "-0.000") s = "0.000";
  return s;
}

std::string polyline(const std::vector<scene::Point2>& grid_points, double cell_px, const char* color,
                     double width) {
  std::string out = "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"" + num(width) +
                    "\" points=\"";
  for (std::size_t i = 0; i < grid_points.size(); ++i) {
    // Grid coordinate (c, r) is the centre of cell (r, c).
    out += (i ? " " : "") + num((grid_points[i].x + 0.5) * cell_px) + "," + num((grid_points[i].y + 0.5) * cell_px);
  }
  return out + "\"/>\n";
}

std::vector<scene::Point2> to_grid(const scene::SceneMap& map, std::span<const scene::Point2> world) {
  std::vector<scene::Point2> out;
  out.reserve(world.size());
  for (scene::Point2 p : world) out.push_back(map.to_grid(p));
  return out;
}

}  // namespace

std::string scene_plot(const scene::SceneRecord& record, const std::vector<std::vector<scene::Point2>>& predictions,
                       double cell_px) {
  const scene::SceneMap& map = record.map;
  const double w = static_cast<double>(map.width) * cell_px;
  const double h = static_cast<double>(map.height) * cell_px;
  std::string out = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(w) + "\" height=\"" + num(h) + "\" viewBox=\"0 0 " +
         num(w) + " " + num(h) + "\">\n";
  out += "<title>" + record.id + " (" + scene::to_string(record.kind) + ")</title>\n";
  out += "<rect x=\"0\" y=\"0\" width=\"" + num(w) + "\" height=\"" + num(h) + "\" fill=\"#202020\"/>\n";
  out += "<g fill=\"#b0b0b0\" shape-rendering=\"crispEdges\">\n";
  // Runs of drivable cells per row keep the file small.
  for (std::size_t r = 0; r < map.height; ++r) {
    std::size_t c = 0;
    while (c < map.width) {
      if (map.at(r, c, scene::kDrivable) <= 0.5) {
        ++c;
        continue;
      }
      const std::size_t start = c;
      while (c < map.width && map.at(r, c, scene::kDrivable) > 0.5) ++c;
      out += "<rect x=\"" + num(static_cast<double>(start) * cell_px) + "\" y=\"" +
             num(static_cast<double>(r) * cell_px) + "\" width=\"" + num(static_cast<double>(c - start) * cell_px) +
             "\" height=\"" + num(cell_px) + "\"/>\n";
    }
  }
  out += "</g>\n";
  const auto past = record.trajectory.past();
  std::vector<scene::Point2> future(1, record.trajectory.current());
  for (scene::Point2 p : record.trajectory.future()) future.push_back(p);
  out += polyline(to_grid(map, past), cell_px, "blue", 2.0);
  out += polyline(to_grid(map, future), cell_px, "green", 2.0);
  for (const auto& pred : predictions) {
    std::vector<scene::Point2> pts(1, record.trajectory.current());
    pts.insert(pts.end(), pred.begin(), pred.end());
    std::vector<scene::Point2> g = to_grid(map, pts);
    // Keep every drawn vertex inside the viewport.
    for (scene::Point2& p : g) {
      p.x = std::clamp(p.x, -0.5, static_cast<double>(map.width) - 0.5);
      p.y = std::clamp(p.y, -0.5, static_cast<double>(map.height) - 0.5);
    }
    out += polyline(g, cell_px, "red", 1.5);
  }
  out += "</svg>\n";
  return out;
}

std::string lambda_plot(std::span<const double> lambdas, std::span<const double> fsd, std::span<const double> dac) {
  if (lambdas.size() != fsd.size() || lambdas.size() != dac.size() || lambdas.empty()) {
    throw std::invalid_argument("lambda_plot: series lengths differ or are empty");
  }
  const double width = 480, height = 320, left = 60, right = 420, top = 30, bottom = 270;
  const double fsd_max = std::max(1e-9, *std::max_element(fsd.begin(), fsd.end())) * 1.1;
  auto x_of = [&](double l) { return left + l * (right - left); };
  auto y_fsd = [&](double v) { return bottom - v / fsd_max * (bottom - top); };
  auto y_dac = [&](double v) { return bottom - v * (bottom - top); };

  std::string out = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(width) + "\" height=\"" + num(height) +
         "\" viewBox=\"0 0 " + num(width) + " " + num(height) + "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  out += "<rect x=\"0\" y=\"0\" width=\"" + num(width) + "\" height=\"" + num(height) + "\" fill=\"white\"/>\n";
  out += "<line x1=\"" + num(left) + "\" y1=\"" + num(bottom) + "\" x2=\"" + num(right) + "\" y2=\"" + num(bottom) +
         "\" stroke=\"black\"/>\n";
  out += "<line x1=\"" + num(left) + "\" y1=\"" + num(top) + "\" x2=\"" + num(left) + "\" y2=\"" + num(bottom) +
         "\" stroke=\"#1f77b4\"/>\n";
  out += "<line x1=\"" + num(right) + "\" y1=\"" + num(top) + "\" x2=\"" + num(right) + "\" y2=\"" + num(bottom) +
         "\" stroke=\"#d62728\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double t = k / 4.0;
    out += "<text x=\"" + num(x_of(t)) + "\" y=\"" + num(bottom + 16) + "\" text-anchor=\"middle\">" + num(t) +
           "</text>\n";
    out += "<text x=\"" + num(left - 6) + "\" y=\"" + num(y_fsd(t * fsd_max) + 4) + "\" text-anchor=\"end\">" +
           num(t * fsd_max) + "</text>\n";
    out += "<text x=\"" + num(right + 6) + "\" y=\"" + num(y_dac(t) + 4) + "\">" + num(t) + "</text>\n";
  }
  out += "<text x=\"" + num((left + right) / 2) + "\" y=\"" + num(height - 8) +
         "\" text-anchor=\"middle\">lambda</text>\n";
  out += "<text x=\"14\" y=\"" + num(top - 10) + "\" fill=\"#1f77b4\">FSD</text>\n";
  out += "<text x=\"" + num(right - 10) + "\" y=\"" + num(top - 10) + "\" fill=\"#d62728\">DAC</text>\n";
  std::string fsd_pts, dac_pts;
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    fsd_pts += (i ? " " : "") + num(x_of(lambdas[i])) + "," + num(y_fsd(fsd[i]));
    dac_pts += (i ? " " : "") + num(x_of(lambdas[i])) + "," + num(y_dac(dac[i]));
  }
  out += "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"" + fsd_pts + "\"/>\n";
  out += "<polyline fill=\"none\" stroke=\"#d62728\" stroke-width=\"2\" points=\"" + dac_pts + "\"/>\n";
  out += "</svg>\n";
  return out;
}

}  // namespace trajdiv::svg
