#include "dist/smoothing.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dist/errors.hpp"

namespace dist {

std::unordered_map<int, std::vector<int>> DirectionField::by_voxel() const {
  std::unordered_map<int, std::vector<int>> map;
  for (size_t i = 0; i < entries.size(); ++i) {
    map[entries[i].linear_voxel].push_back(static_cast<int>(i));
  }
  return map;
}

std::vector<double> neighbor_weights(const Vec3& s0, const DirectionField& field, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("neighbor_weights: h must be positive");
  const double norm = std::pow(2.0 * std::numbers::pi, -1.5) / (h * h * h);
  std::vector<double> weights(field.entries.size());
  for (size_t i = 0; i < field.entries.size(); ++i) {
    const double d2 = (field.entries[i].pos - s0).squaredNorm();
    weights[i] = norm * std::exp(-0.5 * d2 / (h * h));
  }
  return weights;
}

std::vector<int> select_neighbors(std::span<const double> weights, double threshold) {
  std::vector<int> selected;
  if (weights.empty()) return selected;
  const double wmax = *std::max_element(weights.begin(), weights.end());
  const double cut = std::min(threshold, 1.0) * wmax;
  for (size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] >= cut) selected.push_back(static_cast<int>(i));
  }
  return selected;
}

int choose_cluster_count(std::span<const Axis> axes, const SmoothingConfig& cfg) {
  const int n = static_cast<int>(axes.size());
  if (n == 0) throw std::invalid_argument("choose_cluster_count: empty input");
  if (n < 3) return 1;
  const Eigen::MatrixXd diss = dissimilarity_matrix(axes);
  int best_k = 1;
  double best_sil = -2.0;
  for (int k = 2; k <= std::min(cfg.k_max, n - 1); ++k) {
    const ClusterResult clusters = pam_cluster(axes, k);
    const double sil = average_silhouette(diss, clusters.assignment);
    if (sil > best_sil + 1e-15) {
      best_sil = sil;
      best_k = k;
    }
  }
  return best_sil >= cfg.silhouette_floor ? best_k : 1;
}

namespace {

struct Neighborhood {
  std::vector<Axis> axes;
  std::vector<double> weights;
};

// Thresholded kernel neighborhood of s0, optionally excluding one voxel's
// own entries (for cross-validation).
Neighborhood gather(const Vec3& s0, const DirectionField& field, const SmoothingConfig& cfg,
                    double h, int exclude_voxel) {
  const double radius = cfg.truncation_radius_factor * h;
  const double r2 = radius * radius;
  const double norm = std::pow(2.0 * std::numbers::pi, -1.5) / (h * h * h);

  std::vector<double> weights;
  std::vector<int> idx;
  for (size_t i = 0; i < field.entries.size(); ++i) {
    const FieldEntry& e = field.entries[i];
    if (e.linear_voxel == exclude_voxel) continue;
    const double d2 = (e.pos - s0).squaredNorm();
    if (d2 > r2) continue;
    idx.push_back(static_cast<int>(i));
    weights.push_back(norm * std::exp(-0.5 * d2 / (h * h)));
  }

  Neighborhood out;
  for (int sel : select_neighbors(weights, cfg.weight_threshold)) {
    out.axes.push_back(field.entries[idx[sel]].axis);
    out.weights.push_back(weights[sel]);
  }
  return out;
}

std::vector<Axis> smooth_from_neighborhood(const Neighborhood& nb, const SmoothingConfig& cfg) {
  if (nb.axes.empty()) return {};
  const int k = choose_cluster_count(nb.axes, cfg);
  if (k == 1) {
    return {weighted_karcher_mean(nb.axes, nb.weights)};
  }
  const ClusterResult clusters = pam_cluster(nb.axes, k);
  std::vector<Axis> out;
  std::vector<double> mass;
  for (int c = 0; c < k; ++c) {
    std::vector<Axis> members;
    std::vector<double> w;
    for (size_t i = 0; i < nb.axes.size(); ++i) {
      if (clusters.assignment[i] == c) {
        members.push_back(nb.axes[i]);
        w.push_back(nb.weights[i]);
      }
    }
    out.push_back(weighted_karcher_mean(members, w));
    double total = 0.0;
    for (double wi : w) total += wi;
    mass.push_back(total);
  }

  // Debris clusters: a lone stray direction splits off with a high
  // silhouette because it sits far from the main population. Keep only
  // clusters with a meaningful share of the kernel mass.
  double total_mass = 0.0;
  for (double mw : mass) total_mass += mw;
  for (size_t c = out.size(); c-- > 0;) {
    if (mass[c] < cfg.min_cluster_mass * total_mass && out.size() > 1) {
      out.erase(out.begin() + c);
      mass.erase(mass.begin() + c);
    }
  }

  // An elongated single population can clear the silhouette floor as a
  // sub-degree split; collapse means that ended up nearly parallel.
  const double merge_rad = cfg.merge_angle_deg * std::numbers::pi / 180.0;
  bool merged = true;
  while (merged && out.size() > 1) {
    merged = false;
    for (size_t i = 0; i < out.size() && !merged; ++i) {
      for (size_t j = i + 1; j < out.size() && !merged; ++j) {
        if (geodesic_distance(out[i], out[j]) < merge_rad) {
          const std::vector<Axis> pair = {out[i], out[j]};
          const std::vector<double> w = {mass[i], mass[j]};
          out[i] = weighted_karcher_mean(pair, w);
          mass[i] += mass[j];
          out.erase(out.begin() + j);
          mass.erase(mass.begin() + j);
          merged = true;
        }
      }
    }
  }
  return out;
}

double aggregate(std::vector<double> scores, CvMode mode) {
  if (scores.empty()) return std::numeric_limits<double>::infinity();
  std::sort(scores.begin(), scores.end());
  const size_t n = scores.size();
  switch (mode) {
    case CvMode::mcv: {
      const double mid = scores[n / 2];
      return n % 2 == 0 ? 0.5 * (mid + scores[n / 2 - 1]) : mid;
    }
    case CvMode::tcv: {
      const size_t trim = n / 10;
      double sum = 0.0;
      size_t count = 0;
      for (size_t i = trim; i + trim < n; ++i) {
        sum += scores[i];
        ++count;
      }
      return count > 0 ? sum / count : scores[n / 2];
    }
    case CvMode::ocv:
    default: {
      double sum = 0.0;
      for (double s : scores) sum += s;
      return sum / n;
    }
  }
}

}  // namespace

std::vector<Axis> smooth_voxel(const Vec3& s0, const DirectionField& field,
                               const SmoothingConfig& cfg) {
  const Neighborhood nb = gather(s0, field, cfg, cfg.h, -1);
  return smooth_from_neighborhood(nb, cfg);
}

CvResult cv_bandwidth(const DirectionField& field, std::span<const double> h_grid,
                      CvMode mode, const SmoothingConfig& cfg) {
  if (h_grid.empty()) throw std::invalid_argument("cv_bandwidth: empty bandwidth grid");
  const auto by_voxel = field.by_voxel();
  if (by_voxel.size() < 2) {
    throw std::invalid_argument("cv_bandwidth: needs at least 2 voxels with directions");
  }
  std::vector<int> voxel_ids;
  voxel_ids.reserve(by_voxel.size());
  for (const auto& [id, _] : by_voxel) voxel_ids.push_back(id);
  std::sort(voxel_ids.begin(), voxel_ids.end());

  std::vector<double> grid(h_grid.begin(), h_grid.end());
  std::sort(grid.begin(), grid.end());

  CvResult result;
  result.scores.resize(grid.size());
  double best = std::numeric_limits<double>::infinity();
  for (size_t gi = 0; gi < grid.size(); ++gi) {
    const double h = grid[gi];
    std::vector<double> scores;
    for (int vid : voxel_ids) {
      const auto& own = by_voxel.at(vid);
      const Vec3& pos = field.entries[own.front()].pos;
      const Neighborhood nb = gather(pos, field, cfg, h, vid);
      if (nb.axes.empty()) continue;
      const std::vector<Axis> predicted = smooth_from_neighborhood(nb, cfg);
      for (int ei : own) {
        double bestd = std::numeric_limits<double>::infinity();
        for (const Axis& p : predicted) {
          bestd = std::min(bestd, geodesic_distance(field.entries[ei].axis, p));
        }
        scores.push_back(bestd * bestd);
      }
    }
    result.scores[gi] = aggregate(std::move(scores), mode);
    if (result.scores[gi] < best) {  // strict: ties keep the smaller h
      best = result.scores[gi];
      result.h = h;
    }
  }
  return result;
}

DirectionField smooth_field(const DirectionField& field, const SmoothingConfig& cfg) {
  const auto by_voxel = field.by_voxel();
  std::vector<int> voxel_ids;
  voxel_ids.reserve(by_voxel.size());
  for (const auto& [id, _] : by_voxel) voxel_ids.push_back(id);
  std::sort(voxel_ids.begin(), voxel_ids.end());

  DirectionField out;
  out.isotropic_voxels = field.isotropic_voxels;
  for (int vid : voxel_ids) {
    const FieldEntry& proto = field.entries[by_voxel.at(vid).front()];
    const std::vector<Axis> smoothed = smooth_voxel(proto.pos, field, cfg);
    for (const Axis& a : smoothed) {
      FieldEntry e;
      e.pos = proto.pos;
      e.voxel = proto.voxel;
      e.linear_voxel = vid;
      e.axis = a;
      e.source = EntrySource::smoothed;
      out.entries.push_back(e);
    }
  }
  return out;
}

}  // namespace dist
