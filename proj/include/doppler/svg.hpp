#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "doppler/maze.hpp"

namespace doppler::svg {

// Vector rendering of a maze, its propositional regions and an executed
// trace (blue start to red end), one SVG per episode.
inline void write_maze_trace(const maze::MazeSpec& spec,
                             const std::vector<maze::State>& trace,
                             const std::vector<int>& perturb_steps, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write plot '" + path + "'");
  const int scale = 60;
  const int w = spec.width * scale, h = spec.height * scale;
  auto X = [&](double x) { return x * scale; };
  auto Y = [&](double y) { return h - y * scale; };  // flip so +y is up

  os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
  os << "<rect width='" << w << "' height='" << h << "' fill='white'/>\n";
  for (int cy = 0; cy < spec.height; ++cy)
    for (int cx = 0; cx < spec.width; ++cx)
      if (spec.wall_at(cx, cy))
        os << "<rect x='" << X(cx) << "' y='" << Y(cy + 1) << "' width='" << scale
           << "' height='" << scale << "' fill='#444'/>\n";
  for (const maze::Region& r : spec.regions) {
    const double cx = r.cx + 0.5, cy = r.cy + 0.5, hw = r.half_width;
    os << "<rect x='" << X(cx - hw) << "' y='" << Y(cy + hw) << "' width='" << 2 * hw * scale
       << "' height='" << 2 * hw * scale
       << "' fill='#88c999' fill-opacity='0.5' stroke='#2a7' stroke-width='2'/>\n";
    os << "<text x='" << X(cx) << "' y='" << Y(cy) + 5
       << "' font-size='18' text-anchor='middle' fill='#154'>p" << r.prop << "</text>\n";
  }
  const size_t n = trace.size();
  for (size_t i = 0; i + 1 < n; ++i) {
    const double f = n > 2 ? static_cast<double>(i) / (n - 2) : 0.0;
    const int red = static_cast<int>(255 * f), blue = static_cast<int>(255 * (1 - f));
    os << "<line x1='" << X(trace[i].x) << "' y1='" << Y(trace[i].y) << "' x2='"
       << X(trace[i + 1].x) << "' y2='" << Y(trace[i + 1].y) << "' stroke='rgb(" << red << ",40,"
       << blue << ")' stroke-width='2.5'/>\n";
  }
  if (!trace.empty()) {
    os << "<circle cx='" << X(trace.front().x) << "' cy='" << Y(trace.front().y)
       << "' r='6' fill='blue'/>\n";
    os << "<circle cx='" << X(trace.back().x) << "' cy='" << Y(trace.back().y)
       << "' r='6' fill='red'/>\n";
  }
  for (int step : perturb_steps)
    if (step >= 0 && step < static_cast<int>(trace.size()))
      os << "<circle cx='" << X(trace[step].x) << "' cy='" << Y(trace[step].y)
         << "' r='8' fill='none' stroke='orange' stroke-width='3'/>\n";
  os << "</svg>\n";
}

}  // namespace doppler::svg
