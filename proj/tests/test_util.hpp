#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "dist/geometry.hpp"
#include "dist/rng.hpp"

namespace dist::test {

inline Vec3 random_unit(Rng& rng) {
  while (true) {
    const Vec3 v(rng.normal(), rng.normal(), rng.normal());
    const double n = v.norm();
    if (n > 1e-6) return v / n;
  }
}

inline Axis random_axis(Rng& rng) { return Axis(random_unit(rng)); }

// Axis within `max_angle_rad` of the center, uniform in the tangent disc.
inline Axis random_axis_near(const Axis& center, double max_angle_rad, Rng& rng) {
  const auto [e1, e2] = tangent_basis(center);
  const double angle = max_angle_rad * std::sqrt(rng.uniform());
  const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const Vec3 u = angle * (std::cos(phi) * e1 + std::sin(phi) * e2);
  return Axis(exp_map(center.vec(), u));
}

constexpr double deg = std::numbers::pi / 180.0;

}  // namespace dist::test
