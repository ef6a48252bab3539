#include "trackrl/trajectory.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

namespace trackrl {
namespace {

constexpr double kCoincidentTol = 1e-9;

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r'))
    s.remove_suffix(1);
  return s;
}

bool parse_double(std::string_view field, double& out) {
  field = trim(field);
  if (field.empty()) return false;
  if (field.front() == '+') field.remove_prefix(1);
  const auto* end = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(field.data(), end, out);
  return ec == std::errc() && ptr == end && std::isfinite(out);
}

}  // namespace

Trajectory::Trajectory(std::vector<Waypoint> waypoints)
    : Trajectory(std::move(waypoints), -1.0) {}

Trajectory::Trajectory(std::vector<Waypoint> waypoints, double spacing_hint)
    : waypoints_(std::move(waypoints)) {
  if (waypoints_.size() < 2) {
    throw TooFewWaypoints("trajectory needs at least 2 waypoints, got " +
                          std::to_string(waypoints_.size()));
  }
  arc_length_.resize(waypoints_.size());
  arc_length_[0] = 0.0;
  for (std::size_t i = 0; i < waypoints_.size(); ++i) {
    auto& w = waypoints_[i];
    if (!std::isfinite(w.x) || !std::isfinite(w.y) || !std::isfinite(w.theta) ||
        !std::isfinite(w.v)) {
      throw InvalidParams("waypoint " + std::to_string(i) + " is not finite");
    }
    if (w.v < 0.0) {
      throw InvalidParams("waypoint " + std::to_string(i) +
                          " has negative speed");
    }
    w.theta = wrap_angle(w.theta);
    if (i > 0) {
      const auto& p = waypoints_[i - 1];
      const double d = std::hypot(w.x - p.x, w.y - p.y);
      if (d <= kCoincidentTol) {
        throw CoincidentWaypoints("waypoints " + std::to_string(i - 1) +
                                  " and " + std::to_string(i) +
                                  " coincide");
      }
      arc_length_[i] = arc_length_[i - 1] + d;
    }
  }
  spacing_hint_ = spacing_hint > 0.0
                      ? spacing_hint
                      : arc_length_.back() /
                            static_cast<double>(waypoints_.size() - 1);
}

Waypoint Trajectory::interpolate(double s) const {
  if (s <= 0.0) return waypoints_.front();
  if (s >= arc_length_.back()) return waypoints_.back();
  auto it = std::upper_bound(arc_length_.begin(), arc_length_.end(), s);
  const std::size_t hi = static_cast<std::size_t>(it - arc_length_.begin());
  const std::size_t lo = hi - 1;
  const double u = (s - arc_length_[lo]) / (arc_length_[hi] - arc_length_[lo]);
  const auto& a = waypoints_[lo];
  const auto& b = waypoints_[hi];
  return Waypoint{a.x + u * (b.x - a.x), a.y + u * (b.y - a.y),
                  wrap_angle(a.theta + u * wrap_angle(b.theta - a.theta)),
                  a.v + u * (b.v - a.v)};
}

Trajectory parse_trajectory_csv(std::string_view text) {
  std::vector<Waypoint> wps;
  std::size_t line_no = 0;
  bool header_seen = false;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    line = trim(line);
    if (line.empty()) continue;
    if (!header_seen) {
      if (line != "x,y,theta,v") {
        throw MalformedRecord("line " + std::to_string(line_no) +
                              ": expected header 'x,y,theta,v'");
      }
      header_seen = true;
      continue;
    }
    double f[4];
    std::size_t count = 0;
    std::string_view rest = line;
    bool ok = true;
    while (true) {
      const auto comma = rest.find(',');
      const auto field = rest.substr(0, comma);
      if (count >= 4 || !parse_double(field, f[count])) {
        ok = false;
        break;
      }
      ++count;
      if (comma == std::string_view::npos) break;
      rest = rest.substr(comma + 1);
    }
    if (!ok || count != 4) {
      throw MalformedRecord("line " + std::to_string(line_no) +
                            ": expected 4 numeric fields x,y,theta,v");
    }
    wps.push_back({f[0], f[1], f[2], f[3]});
  }
  if (!header_seen) throw MalformedRecord("line 1: missing header");
  return Trajectory(std::move(wps));
}

Trajectory load_trajectory(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open track file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_trajectory_csv(ss.str());
}

void save_trajectory(const Trajectory& traj, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write track file " + path.string());
  out << std::setprecision(17) << "x,y,theta,v\n";
  for (const auto& w : traj.waypoints()) {
    out << w.x << ',' << w.y << ',' << w.theta << ',' << w.v << '\n';
  }
}

std::size_t closest_waypoint(const Trajectory& traj, double x, double y,
                             std::size_t prev, std::size_t window) {
  const std::size_t n = traj.size();
  prev = std::min(prev, n - 1);
  const std::size_t last = std::min(n - 1, prev + window);
  std::size_t best = prev;
  double best_d2 = INFINITY;
  for (std::size_t k = prev; k <= last; ++k) {
    const double dx = traj[k].x - x;
    const double dy = traj[k].y - y;
    const double d2 = dx * dx + dy * dy;
    if (d2 <= best_d2) {
      best_d2 = d2;
      best = k;
    }
  }
  return best;
}

namespace {

// Unit direction of the segment used for waypoint i.
void segment_direction(const Trajectory& traj, std::size_t i, double& ux,
                       double& uy) {
  const std::size_t n = traj.size();
  const auto& a = i + 1 < n ? traj[i] : traj[i - 1];
  const auto& b = i + 1 < n ? traj[i + 1] : traj[i];
  const double dx = b.x - a.x;
  const double dy = b.y - a.y;
  const double len = std::hypot(dx, dy);
  ux = dx / len;
  uy = dy / len;
}

}  // namespace

double crosstrack_error(const Trajectory& traj, double x, double y,
                        std::size_t i) {
  double ux, uy;
  segment_direction(traj, i, ux, uy);
  const auto& w = traj[i];
  return ux * (y - w.y) - uy * (x - w.x);
}

double project_arc_length(const Trajectory& traj, double x, double y,
                          std::size_t i) {
  double ux, uy;
  segment_direction(traj, i, ux, uy);
  const auto& w = traj[i];
  return traj.arc_length()[i] + ux * (x - w.x) + uy * (y - w.y);
}

TrackKind parse_track_kind(std::string_view name) {
  if (name == "circle") return TrackKind::kCircle;
  if (name == "figure-eight" || name == "figure8") return TrackKind::kFigureEight;
  if (name == "straight") return TrackKind::kStraight;
  throw InvalidParams("unknown track kind '" + std::string(name) + "'");
}

std::string_view to_string(TrackKind kind) {
  switch (kind) {
    case TrackKind::kCircle:
      return "circle";
    case TrackKind::kFigureEight:
      return "figure-eight";
    case TrackKind::kStraight:
      return "straight";
  }
  return "unknown";
}

Trajectory generate_track(TrackKind kind, const TrackParams& p) {
  if (!(p.spacing > 0.0) || !(p.speed >= 0.0)) {
    throw InvalidParams("track spacing must be > 0 and speed >= 0");
  }
  std::vector<Waypoint> wps;
  switch (kind) {
    case TrackKind::kStraight: {
      if (!(p.length > p.spacing)) {
        throw InvalidParams("straight track length must exceed spacing");
      }
      const auto segments =
          static_cast<std::size_t>(std::llround(p.length / p.spacing));
      const double step = p.length / static_cast<double>(segments);
      for (std::size_t k = 0; k <= segments; ++k) {
        wps.push_back({static_cast<double>(k) * step, 0.0, 0.0, p.speed});
      }
      break;
    }
    case TrackKind::kCircle:
    case TrackKind::kFigureEight: {
      if (!(p.radius > p.spacing)) {
        throw InvalidParams("track radius must exceed spacing");
      }
      const double r = p.radius;
      const double loop = 2.0 * kPi * r;
      const double total = kind == TrackKind::kCircle ? loop : 2.0 * loop;
      const auto n = static_cast<std::size_t>(std::llround(total / p.spacing));
      const double step = total / static_cast<double>(n);
      for (std::size_t k = 0; k < n; ++k) {
        const double s = static_cast<double>(k) * step;
        if (s < loop) {
          const double a = s / r;
          wps.push_back({r * std::sin(a), r * (1.0 - std::cos(a)), a, p.speed});
        } else {
          const double a = (s - loop) / r;
          wps.push_back(
              {r * std::sin(a), -r * (1.0 - std::cos(a)), -a, p.speed});
        }
      }
      return Trajectory(std::move(wps), step);
    }
  }
  const double hint = wps.size() > 1 ? wps[1].x - wps[0].x : p.spacing;
  return Trajectory(std::move(wps), hint);
}

Trajectory generate_random_track(const RandomTrackParams& p,
                                 std::mt19937_64& rng) {
  if (!(p.spacing > 0.0) || !(p.length > p.spacing) ||
      !(p.min_segment > 0.0) || p.max_segment < p.min_segment) {
    throw InvalidParams("invalid random track parameters");
  }
  std::uniform_real_distribution<double> kappa_dist(-p.max_curvature,
                                                    p.max_curvature);
  std::uniform_real_distribution<double> len_dist(p.min_segment, p.max_segment);

  // Curvature knots (arc length, curvature) of a piecewise-linear profile.
  std::vector<std::pair<double, double>> knots{{0.0, 0.0}};
  double s = 0.0;
  while (s < p.length) {
    const double next = kappa_dist(rng);
    const double seg = len_dist(rng);
    knots.push_back({s + p.ramp, next});
    knots.push_back({s + seg, next});
    s += seg;
  }

  const auto n = static_cast<std::size_t>(std::llround(p.length / p.spacing));
  const int substeps = 20;
  const double h = p.spacing / substeps;
  std::vector<Waypoint> wps;
  wps.reserve(n + 1);
  double x = 0.0, y = 0.0, theta = 0.0, arc = 0.0;
  std::size_t knot = 0;
  auto curvature_at = [&](double at) {
    while (knot + 1 < knots.size() && knots[knot + 1].first < at) ++knot;
    if (knot + 1 >= knots.size()) return knots.back().second;
    const auto [s0, k0] = knots[knot];
    const auto [s1, k1] = knots[knot + 1];
    return s1 > s0 ? k0 + (k1 - k0) * (at - s0) / (s1 - s0) : k1;
  };
  wps.push_back({x, y, theta, p.speed});
  for (std::size_t k = 1; k <= n; ++k) {
    for (int j = 0; j < substeps; ++j) {
      const double mid = theta + 0.5 * h * curvature_at(arc + 0.5 * h);
      x += h * std::cos(mid);
      y += h * std::sin(mid);
      theta += h * curvature_at(arc + 0.5 * h);
      arc += h;
    }
    wps.push_back({x, y, wrap_angle(theta), p.speed});
  }
  return Trajectory(std::move(wps), p.spacing);
}

}  // namespace trackrl
