#include "dist/tracking.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dist {

const char* to_string(StopReason r) {
  switch (r) {
    case StopReason::out_of_volume: return "out_of_volume";
    case StopReason::gate_fail: return "gate_fail";
    case StopReason::isotropic: return "isotropic";
    case StopReason::step_cap: return "step_cap";
  }
  return "unknown";
}

double Tract::length() const {
  double len = 0.0;
  for (size_t i = 1; i < points.size(); ++i) len += (points[i] - points[i - 1]).norm();
  return len;
}

RayExit ray_voxel_exit(const Vec3& point, const Vec3& direction, const Eigen::Vector3i& current,
                       const VoxelGrid& grid) {
  double best_t = std::numeric_limits<double>::infinity();
  std::array<double, 3> t_axis = {best_t, best_t, best_t};
  for (int a = 0; a < 3; ++a) {
    if (direction[a] == 0.0) continue;
    const double face =
        grid.origin[a] + grid.voxel_size[a] * (current[a] + (direction[a] > 0.0 ? 1 : 0));
    t_axis[a] = std::max(0.0, (face - point[a]) / direction[a]);
    best_t = std::min(best_t, t_axis[a]);
  }

  RayExit out;
  out.exit_point = point + best_t * direction;
  out.next_voxel = current;
  for (int a = 0; a < 3; ++a) {
    if (t_axis[a] <= best_t + 1e-12) {  // corner/edge ties advance every axis
      const int step = direction[a] > 0.0 ? 1 : -1;
      out.next_voxel[a] += step;
      // land exactly on the face so repeated traversal cannot drift
      out.exit_point[a] =
          grid.origin[a] + grid.voxel_size[a] * (current[a] + (direction[a] > 0.0 ? 1 : 0));
    }
  }
  out.inside = grid.contains(out.next_voxel);
  return out;
}

std::optional<Vec3> pick_direction(std::span<const Axis> candidates, const Vec3& incoming,
                                   double gate) {
  if (candidates.empty()) return std::nullopt;
  int best = -1;
  double best_angle = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < candidates.size(); ++i) {
    const double c = std::min(1.0, std::abs(candidates[i].vec().dot(incoming)));
    const double angle = std::acos(c);
    if (angle < best_angle) {
      best_angle = angle;
      best = static_cast<int>(i);
    }
  }
  if (best_angle > gate) return std::nullopt;
  const Vec3& v = candidates[best].vec();
  return v.dot(incoming) >= 0.0 ? v : Vec3(-v);
}

namespace {

struct HalfTract {
  std::vector<Vec3> points;      // excluding the seed center
  std::vector<Axis> directions;  // one per segment
  StopReason reason = StopReason::out_of_volume;
};

using VoxelAxes = std::unordered_map<int, std::vector<Axis>>;

HalfTract propagate(const Eigen::Vector3i& seed, const Vec3& start_dir, const VoxelAxes& axes,
                    const VoxelGrid& grid, const TrackerConfig& cfg) {
  HalfTract half;
  Eigen::Vector3i cur = seed;
  Vec3 point = grid.center(seed);
  Vec3 dir = start_dir;

  auto axes_at = [&](const Eigen::Vector3i& v) -> std::span<const Axis> {
    const auto it = axes.find(grid.linear(v));
    if (it == axes.end()) return {};
    return it->second;
  };

  int zero_run = 0;
  while (true) {
    if (static_cast<int>(half.points.size()) >= cfg.step_cap) {
      half.reason = StopReason::step_cap;
      break;
    }
    const RayExit exit = ray_voxel_exit(point, dir, cur, grid);
    if ((exit.exit_point - point).norm() > 1e-12) {
      half.points.push_back(exit.exit_point);
      half.directions.emplace_back(dir);
      zero_run = 0;
    } else if (++zero_run > 4) {
      // a picked direction pointing back through the entry face makes the
      // tract bounce on the spot; there is no viable continuation
      half.reason = StopReason::gate_fail;
      break;
    }
    if (!exit.inside) {
      half.reason = StopReason::out_of_volume;
      break;
    }

    const std::span<const Axis> candidates = axes_at(exit.next_voxel);
    if (const auto picked = pick_direction(candidates, dir, cfg.angle_gate)) {
      cur = exit.next_voxel;
      point = exit.exit_point;
      dir = *picked;
      continue;
    }

    // No viable direction in the destination voxel: continue straight through
    // up to max_skip voxels looking for one, else stop at the current voxel.
    const StopReason fail_reason =
        candidates.empty() ? StopReason::isotropic : StopReason::gate_fail;
    std::vector<Vec3> pending_points;
    std::vector<Axis> pending_dirs;
    Eigen::Vector3i skip_cur = exit.next_voxel;
    Vec3 skip_point = exit.exit_point;
    bool resumed = false;
    for (int skipped = 0; skipped < cfg.max_skip; ++skipped) {
      const RayExit through = ray_voxel_exit(skip_point, dir, skip_cur, grid);
      pending_points.push_back(through.exit_point);
      pending_dirs.emplace_back(dir);
      if (!through.inside) break;
      const std::span<const Axis> ahead = axes_at(through.next_voxel);
      if (const auto picked = pick_direction(ahead, dir, cfg.angle_gate)) {
        for (size_t i = 0; i < pending_points.size(); ++i) {
          half.points.push_back(pending_points[i]);
          half.directions.push_back(pending_dirs[i]);
        }
        cur = through.next_voxel;
        point = through.exit_point;
        dir = *picked;
        resumed = true;
        break;
      }
      skip_cur = through.next_voxel;
      skip_point = through.exit_point;
    }
    if (resumed) continue;
    half.reason = fail_reason;
    break;
  }
  return half;
}

}  // namespace

Tract track_from_seed(const Eigen::Vector3i& seed, const DirectionField& field,
                      const VoxelGrid& grid, const TrackerConfig& cfg, int dir_index) {
  VoxelAxes axes;
  for (const FieldEntry& e : field.entries) axes[e.linear_voxel].push_back(e.axis);

  Tract tract;
  tract.seed = seed;
  const auto it = axes.find(grid.linear(seed));
  if (it == axes.end() || dir_index >= static_cast<int>(it->second.size())) {
    return tract;  // empty: no direction to launch from
  }
  const Vec3 v = it->second[dir_index].vec();

  const HalfTract backward = propagate(seed, -v, axes, grid, cfg);
  const HalfTract forward = propagate(seed, v, axes, grid, cfg);

  tract.points.reserve(backward.points.size() + forward.points.size() + 1);
  tract.directions.reserve(backward.directions.size() + forward.directions.size());
  for (size_t i = backward.points.size(); i-- > 0;) tract.points.push_back(backward.points[i]);
  tract.points.push_back(grid.center(seed));
  for (const Vec3& p : forward.points) tract.points.push_back(p);
  for (size_t i = backward.directions.size(); i-- > 0;) {
    tract.directions.push_back(backward.directions[i]);
  }
  for (const Axis& d : forward.directions) tract.directions.push_back(d);
  tract.begin_reason = backward.reason;
  tract.end_reason = forward.reason;
  return tract;
}

std::vector<Tract> track_all(const DirectionField& field, const VoxelGrid& grid,
                             const TrackerConfig& cfg, const std::vector<int>* roi_linear) {
  const auto by_voxel = field.by_voxel();
  std::vector<int> seeds;
  if (roi_linear != nullptr) {
    seeds = *roi_linear;
    std::sort(seeds.begin(), seeds.end());
    seeds.erase(std::unique(seeds.begin(), seeds.end()), seeds.end());
  } else {
    seeds.reserve(by_voxel.size());
    for (const auto& [id, _] : by_voxel) seeds.push_back(id);
    std::sort(seeds.begin(), seeds.end());
  }

  std::vector<Tract> tracts;
  for (int seed_id : seeds) {
    const auto it = by_voxel.find(seed_id);
    if (it == by_voxel.end()) continue;
    const int num_dirs = static_cast<int>(it->second.size());
    for (int d = 0; d < num_dirs; ++d) {
      Tract t = track_from_seed(grid.unlinear(seed_id), field, grid, cfg, d);
      if (t.points.size() >= 2 && t.length() >= cfg.min_tract_len_mm) {
        tracts.push_back(std::move(t));
      }
    }
  }
  std::stable_sort(tracts.begin(), tracts.end(),
                   [](const Tract& a, const Tract& b) { return a.length() > b.length(); });
  return tracts;
}

std::vector<std::array<double, 3>> tract_rgb(const Tract& tract) {
  if (tract.points.empty()) throw std::invalid_argument("tract_rgb: empty tract");
  std::vector<std::array<double, 3>> rgb;
  rgb.reserve(tract.directions.size());
  for (const Axis& d : tract.directions) {
    rgb.push_back({std::abs(d[0]), std::abs(d[1]), std::abs(d[2])});
  }
  return rgb;
}

}  // namespace dist
