#pragma once

#include <cstddef>
#include <filesystem>
#include <random>
#include <span>
#include <string_view>
#include <vector>

#include "trackrl/common.hpp"

namespace trackrl {

struct Waypoint {
  double x = 0.0;
  double y = 0.0;
  double theta = 0.0;  // desired heading, (-pi, pi]
  double v = 0.0;      // desired speed, >= 0
};

// Ordered, immutable waypoint sequence. Construction validates n >= 2, no
// coincident neighbours and v >= 0; headings are wrapped on the way in.
class Trajectory {
 public:
  explicit Trajectory(std::vector<Waypoint> waypoints);
  Trajectory(std::vector<Waypoint> waypoints, double spacing_hint);

  std::size_t size() const { return waypoints_.size(); }
  const Waypoint& operator[](std::size_t i) const { return waypoints_[i]; }
  std::span<const Waypoint> waypoints() const { return waypoints_; }
  double spacing_hint() const { return spacing_hint_; }

  // Cumulative arc length at each waypoint (s[0] == 0).
  const std::vector<double>& arc_length() const { return arc_length_; }
  double length() const { return arc_length_.back(); }

  // Linear interpolation along the polyline at arc length s, clamped to
  // [0, length()]. Heading is interpolated on the circle.
  Waypoint interpolate(double s) const;

 private:
  std::vector<Waypoint> waypoints_;
  std::vector<double> arc_length_;
  double spacing_hint_ = 0.0;
};

inline constexpr std::size_t kDefaultSearchWindow = 20;

Trajectory load_trajectory(const std::filesystem::path& path);
Trajectory parse_trajectory_csv(std::string_view text);
void save_trajectory(const Trajectory& traj, const std::filesystem::path& path);

// Index of the waypoint nearest to (x, y) within [prev, prev + window],
// ties resolved toward the larger index.
std::size_t closest_waypoint(const Trajectory& traj, double x, double y,
                             std::size_t prev,
                             std::size_t window = kDefaultSearchWindow);

// Signed perpendicular distance from (x, y) to the line through waypoint i
// along the local segment direction. Positive to the left of travel.
double crosstrack_error(const Trajectory& traj, double x, double y,
                        std::size_t i);

// Arc length of the projection of (x, y) onto the segment leaving waypoint i
// (or entering it, for the last waypoint).
double project_arc_length(const Trajectory& traj, double x, double y,
                          std::size_t i);

enum class TrackKind { kCircle, kFigureEight, kStraight };

struct TrackParams {
  double radius = 10.0;  // circle / figure-eight
  double length = 10.0;  // straight
  double spacing = 0.5;
  double speed = 4.0;
};

TrackKind parse_track_kind(std::string_view name);
std::string_view to_string(TrackKind kind);

// Synthetic tracks sampled at (approximately) `spacing` arc-length steps.
// Circle: counter-clockwise from the origin heading +x. Figure-eight: a
// counter-clockwise loop followed by a clockwise loop, both of `radius`,
// meeting tangentially at the origin. Closed loops do not repeat the start.
Trajectory generate_track(TrackKind kind, const TrackParams& params);

// Curvy training tracks: piecewise-constant curvature segments joined by
// linear curvature ramps, starting at the origin heading +x.
struct RandomTrackParams {
  double length = 200.0;
  double spacing = 0.5;
  double speed = 4.0;
  double max_curvature = 0.2;
  double min_segment = 5.0;
  double max_segment = 25.0;
  double ramp = 2.0;
};

Trajectory generate_random_track(const RandomTrackParams& params,
                                 std::mt19937_64& rng);

}  // namespace trackrl
