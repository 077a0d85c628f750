#include "dist/geometry.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <map>
#include <numeric>

namespace dist {

Vec3 exp_map(const Vec3& base, const Vec3& u) {
  const double r = u.norm();
  if (r == 0.0) return base;
  double c, sc;
  if (r < 1e-8) {
    // series for cos(r) and sin(r)/r
    c = 1.0 - 0.5 * r * r;
    sc = 1.0 - r * r / 6.0;
  } else {
    c = std::cos(r);
    sc = std::sin(r) / r;
  }
  Vec3 out = c * base + sc * u;
  return out.normalized();
}

Tangent log_map(const Vec3& base, const Vec3& v) {
  const double c = std::clamp(v.dot(base), -1.0, 1.0);
  if (c <= -1.0 + 1e-12) {
    throw std::domain_error("log_map: v is antipodal to base");
  }
  Tangent t;
  t.base = base;
  const double s2 = 1.0 - c * c;
  if (s2 < 1e-24) {
    t.u.setZero();
    return t;
  }
  const double factor = std::acos(c) / std::sqrt(s2);
  t.u = factor * (v - c * base);
  // remove any residual normal component from rounding
  t.u -= t.u.dot(base) * base;
  return t;
}

std::pair<Vec3, Vec3> tangent_basis(const Axis& a) {
  const Vec3& v = a.vec();
  int smallest = 0;
  for (int i = 1; i < 3; ++i) {
    if (std::abs(v[i]) < std::abs(v[smallest])) smallest = i;
  }
  Vec3 e = Vec3::Zero();
  e[smallest] = 1.0;
  Vec3 t1 = e.cross(v).normalized();
  Vec3 t2 = v.cross(t1);
  return {t1, t2};
}

double karcher_objective(std::span<const Axis> axes, std::span<const double> weights,
                         const Axis& v) {
  double obj = 0.0;
  for (size_t i = 0; i < axes.size(); ++i) {
    const double d = geodesic_distance(axes[i], v);
    obj += weights[i] * d * d;
  }
  return obj;
}

Axis weighted_karcher_mean(std::span<const Axis> axes, std::span<const double> weights,
                           const KarcherOptions& opts) {
  if (axes.empty() || axes.size() != weights.size()) {
    throw std::invalid_argument("weighted_karcher_mean: size mismatch or empty input");
  }
  double wsum = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw std::invalid_argument("weighted_karcher_mean: negative weight");
    wsum += w;
  }
  if (!(wsum > 0.0)) {
    throw std::invalid_argument("weighted_karcher_mean: all weights zero");
  }
  int positive = 0, last_positive = 0;
  for (size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] > 0.0) {
      ++positive;
      last_positive = static_cast<int>(i);
    }
  }
  if (positive == 1) return axes[last_positive];

  // Directional-mean initialization: principal eigenvector of sum w v v^T.
  Eigen::Matrix3d scatter = Eigen::Matrix3d::Zero();
  for (size_t i = 0; i < axes.size(); ++i) {
    scatter += weights[i] * (axes[i].vec() * axes[i].vec().transpose());
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(scatter);
  Vec3 v = eig.eigenvectors().col(2);  // largest eigenvalue

  for (int iter = 0; iter < opts.max_iterations; ++iter) {
    Vec3 mean_tangent = Vec3::Zero();
    for (size_t i = 0; i < axes.size(); ++i) {
      if (weights[i] == 0.0) continue;
      const Vec3 rep = align(axes[i].vec(), v);
      mean_tangent += weights[i] * log_map(v, rep).u;
    }
    mean_tangent /= wsum;
    v = exp_map(v, mean_tangent);
    if (mean_tangent.norm() <= opts.tolerance) {
      return Axis(v);
    }
  }
  throw ConvergenceError("weighted_karcher_mean: no convergence",
                         {v[0], v[1], v[2]}, opts.max_iterations);
}

namespace {

struct IcoMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
};

IcoMesh base_icosahedron() {
  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  IcoMesh mesh;
  const double a = 1.0, b = phi;
  const std::array<Vec3, 12> raw = {{
      {-a, b, 0}, {a, b, 0}, {-a, -b, 0}, {a, -b, 0},
      {0, -a, b}, {0, a, b}, {0, -a, -b}, {0, a, -b},
      {b, 0, -a}, {b, 0, a}, {-b, 0, -a}, {-b, 0, a},
  }};
  for (const Vec3& v : raw) mesh.vertices.push_back(v.normalized());
  mesh.faces = {
      {0, 11, 5}, {0, 5, 1}, {0, 1, 7}, {0, 7, 10}, {0, 10, 11},
      {1, 5, 9}, {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
      {3, 9, 4}, {3, 4, 2}, {3, 2, 6}, {3, 6, 8}, {3, 8, 9},
      {4, 9, 5}, {2, 4, 11}, {6, 2, 10}, {8, 6, 7}, {9, 8, 1},
  };
  return mesh;
}

IcoMesh subdivide(const IcoMesh& in) {
  IcoMesh out;
  out.vertices = in.vertices;
  std::map<std::pair<int, int>, int> midpoint;
  auto mid = [&](int i, int j) {
    const auto key = std::minmax(i, j);
    auto it = midpoint.find(key);
    if (it != midpoint.end()) return it->second;
    const Vec3 m = (out.vertices[i] + out.vertices[j]).normalized();
    const int idx = static_cast<int>(out.vertices.size());
    out.vertices.push_back(m);
    midpoint.emplace(key, idx);
    return idx;
  };
  for (const auto& f : in.faces) {
    const int ab = mid(f[0], f[1]);
    const int bc = mid(f[1], f[2]);
    const int ca = mid(f[2], f[0]);
    out.faces.push_back({f[0], ab, ca});
    out.faces.push_back({f[1], bc, ab});
    out.faces.push_back({f[2], ca, bc});
    out.faces.push_back({ab, bc, ca});
  }
  return out;
}

}  // namespace

std::vector<Axis> icosphere_axes(int subdivisions) {
  if (subdivisions < 0 || subdivisions > 3) {
    throw std::invalid_argument("icosphere_axes: subdivisions must be in 0..3");
  }
  // Level is calibrated so level 2 reproduces the 321-direction grid
  // (642 vertices); levels map to 0/2/3/4 triangle bisection rounds.
  static constexpr int kBisections[4] = {0, 2, 3, 4};
  IcoMesh mesh = base_icosahedron();
  for (int i = 0; i < kBisections[subdivisions]; ++i) mesh = subdivide(mesh);

  std::vector<Axis> axes;
  axes.reserve(mesh.vertices.size());
  for (const Vec3& v : mesh.vertices) axes.emplace_back(v);

  std::sort(axes.begin(), axes.end(), [](const Axis& a, const Axis& b) {
    if (a[0] != b[0]) return a[0] < b[0];
    if (a[1] != b[1]) return a[1] < b[1];
    return a[2] < b[2];
  });
  // antipodal pairs canonicalize to nearly identical representatives; real
  // neighbors are ~1e-2 rad apart even at the deepest level
  std::vector<Axis> unique_axes;
  for (const Axis& a : axes) {
    if (unique_axes.empty() || geodesic_distance(unique_axes.back(), a) > 1e-6) {
      unique_axes.push_back(a);
    }
  }
  return unique_axes;
}

Eigen::MatrixXd dissimilarity_matrix(std::span<const Axis> axes) {
  const int n = static_cast<int>(axes.size());
  Eigen::MatrixXd d(n, n);
  for (int i = 0; i < n; ++i) {
    d(i, i) = 0.0;
    for (int j = i + 1; j < n; ++j) {
      d(i, j) = d(j, i) = geodesic_distance(axes[i], axes[j]);
    }
  }
  return d;
}

namespace {

double total_dissimilarity(const Eigen::MatrixXd& d, const std::vector<int>& medoids) {
  const int n = static_cast<int>(d.rows());
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int m : medoids) best = std::min(best, d(i, m));
    total += best;
  }
  return total;
}

std::vector<int> assign_to_medoids(const Eigen::MatrixXd& d, const std::vector<int>& medoids) {
  const int n = static_cast<int>(d.rows());
  std::vector<int> assignment(n, 0);
  for (int i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (size_t c = 0; c < medoids.size(); ++c) {
      // a medoid always owns itself, so ties cannot empty a cluster
      if (medoids[c] == i) {
        assignment[i] = static_cast<int>(c);
        break;
      }
      if (d(i, medoids[c]) < best) {
        best = d(i, medoids[c]);
        assignment[i] = static_cast<int>(c);
      }
    }
  }
  return assignment;
}

}  // namespace

ClusterResult pam_cluster(std::span<const Axis> axes, int k) {
  const int n = static_cast<int>(axes.size());
  if (k < 1 || k > n) throw std::invalid_argument("pam_cluster: k out of range");

  const Eigen::MatrixXd d = dissimilarity_matrix(axes);

  // BUILD: first medoid minimizes total dissimilarity, the rest greedily
  // maximize the decrease.
  std::vector<int> medoids;
  std::vector<bool> is_medoid(n, false);
  {
    int best = 0;
    double best_total = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
      const double t = d.col(i).sum();
      if (t < best_total) {
        best_total = t;
        best = i;
      }
    }
    medoids.push_back(best);
    is_medoid[best] = true;
  }
  std::vector<double> nearest(n);
  for (int i = 0; i < n; ++i) nearest[i] = d(i, medoids[0]);
  while (static_cast<int>(medoids.size()) < k) {
    int best = -1;
    double best_gain = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < n; ++c) {
      if (is_medoid[c]) continue;
      double gain = 0.0;
      for (int i = 0; i < n; ++i) {
        gain += std::max(0.0, nearest[i] - d(i, c));
      }
      if (gain > best_gain) {
        best_gain = gain;
        best = c;
      }
    }
    medoids.push_back(best);
    is_medoid[best] = true;
    for (int i = 0; i < n; ++i) nearest[i] = std::min(nearest[i], d(i, best));
  }

  ClusterResult result;
  result.swap_objectives.push_back(total_dissimilarity(d, medoids));

  // SWAP: apply the best strictly improving (medoid, candidate) exchange
  // until none remains. Ties go to the lowest (medoid, candidate) pair.
  bool improved = true;
  while (improved) {
    improved = false;
    double best_total = result.swap_objectives.back();
    int best_m = -1, best_c = -1;
    for (size_t mi = 0; mi < medoids.size(); ++mi) {
      for (int c = 0; c < n; ++c) {
        if (is_medoid[c]) continue;
        std::vector<int> trial = medoids;
        trial[mi] = c;
        const double t = total_dissimilarity(d, trial);
        if (t < best_total - 1e-15) {
          best_total = t;
          best_m = static_cast<int>(mi);
          best_c = c;
        }
      }
    }
    if (best_m >= 0) {
      is_medoid[medoids[best_m]] = false;
      medoids[best_m] = best_c;
      is_medoid[best_c] = true;
      result.swap_objectives.push_back(best_total);
      improved = true;
    }
  }

  result.k = k;
  result.medoids = medoids;
  result.assignment = assign_to_medoids(d, medoids);
  result.mean_axes.reserve(k);
  for (int c = 0; c < k; ++c) {
    std::vector<Axis> members;
    for (int i = 0; i < n; ++i) {
      if (result.assignment[i] == c) members.push_back(axes[i]);
    }
    result.mean_axes.push_back(karcher_mean(members));
  }
  return result;
}

double average_silhouette(const Eigen::MatrixXd& diss, std::span<const int> assignment) {
  const int n = static_cast<int>(assignment.size());
  int k = 0;
  for (int a : assignment) k = std::max(k, a + 1);
  if (k < 2) throw std::invalid_argument("average_silhouette: needs at least 2 clusters");

  std::vector<int> counts(k, 0);
  for (int a : assignment) counts[a]++;
  for (int c = 0; c < k; ++c) {
    if (counts[c] == 0) throw std::invalid_argument("average_silhouette: empty cluster");
  }

  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const int ci = assignment[i];
    if (counts[ci] == 1) continue;  // singleton contributes 0
    std::vector<double> sums(k, 0.0);
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      sums[assignment[j]] += diss(i, j);
    }
    const double a = sums[ci] / (counts[ci] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) {
      if (c == ci) continue;
      b = std::min(b, sums[c] / counts[c]);
    }
    const double m = std::max(a, b);
    total += m > 0.0 ? (b - a) / m : 0.0;
  }
  return total / n;
}

double average_silhouette(std::span<const Axis> axes, std::span<const int> assignment) {
  return average_silhouette(dissimilarity_matrix(axes), assignment);
}

}  // namespace dist
