#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace trackrl {

// Base for every error the library reports. Each failure kind named in the
// module contracts gets its own subclass so callers can catch selectively.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define TRACKRL_DEFINE_ERROR(Name)         \
  class Name : public Error {              \
   public:                                 \
    using Error::Error;                    \
  }

TRACKRL_DEFINE_ERROR(MalformedRecord);
TRACKRL_DEFINE_ERROR(TooFewWaypoints);
TRACKRL_DEFINE_ERROR(CoincidentWaypoints);
TRACKRL_DEFINE_ERROR(InvalidParams);
TRACKRL_DEFINE_ERROR(UnknownPreset);
TRACKRL_DEFINE_ERROR(SteppedAfterDone);
TRACKRL_DEFINE_ERROR(NonFiniteInput);
TRACKRL_DEFINE_ERROR(MalformedCheckpoint);
TRACKRL_DEFINE_ERROR(ShapeMismatch);
TRACKRL_DEFINE_ERROR(NonFiniteLoss);
TRACKRL_DEFINE_ERROR(EmptyLog);
TRACKRL_DEFINE_ERROR(MissingArtifact);
TRACKRL_DEFINE_ERROR(StageFailed);
TRACKRL_DEFINE_ERROR(SegmentTooShort);

#undef TRACKRL_DEFINE_ERROR

inline constexpr double kPi = std::numbers::pi;

// Wraps an angle into (-pi, pi].
inline double wrap_angle(double a) {
  if (a > -kPi && a <= kPi) return a;
  double r = std::fmod(a + kPi, 2.0 * kPi);
  if (r <= 0.0) r += 2.0 * kPi;
  return r - kPi;
}

}  // namespace trackrl
