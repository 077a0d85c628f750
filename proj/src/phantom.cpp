#include "dist/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>

namespace dist {

GradientScheme fibonacci_scheme(int m, double b_value, int n_b0) {
  GradientScheme scheme;
  scheme.b_value = b_value;
  scheme.n_b0 = n_b0;
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < m; ++i) {
    const double z = (i + 0.5) / m;  // upper hemisphere
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double a = golden * i;
    scheme.directions.emplace_back(r * std::cos(a), r * std::sin(a), z);
  }
  return scheme;
}

GenerativeTensor wm_tensor(const Axis& axis, double weight) {
  GenerativeTensor t;
  t.lambda_major = 1.7e-3;
  t.lambda_minor = 0.3e-3;
  t.axis = axis;
  t.weight = weight;
  return t;
}

GenerativeTensor isotropic_tensor(double lambda, double weight) {
  GenerativeTensor t;
  t.lambda_major = lambda;
  t.lambda_minor = lambda;
  t.axis = Axis(1.0, 0.0, 0.0);
  t.weight = weight;
  return t;
}

VoxelModel to_direction_model(std::span<const GenerativeTensor> tensors, double b_value) {
  VoxelModel model;
  for (const GenerativeTensor& t : tensors) {
    if (t.lambda_major - t.lambda_minor > 1e-12) {
      TensorComponent c;
      c.tau = t.weight * std::exp(-b_value * t.lambda_minor);
      c.alpha = t.lambda_major - t.lambda_minor;
      c.axis = t.axis;
      model.components.push_back(c);
    } else {
      model.isotropic_tau += t.weight * std::exp(-b_value * t.lambda_minor);
    }
  }
  model.canonicalize();
  return model;
}

namespace {

PhantomSpec base_spec(const std::string& name, const Eigen::Vector3i& dims, std::uint64_t seed) {
  PhantomSpec spec;
  spec.name = name;
  spec.grid.dims = dims;
  spec.grid.voxel_size = Vec3(2.0, 2.0, 2.0);
  spec.grid.origin = Vec3(0.0, 0.0, 0.0);
  spec.scheme = fibonacci_scheme(41, 1000.0, 5);
  spec.seed = seed;
  spec.voxels.assign(spec.grid.num_voxels(), {isotropic_tensor()});
  return spec;
}

void fill_crossing(PhantomSpec& spec, const Vec3& dir_a, const Vec3& dir_b, int band_lo,
                   int band_hi) {
  const Eigen::Vector3i dims = spec.grid.dims;
  const Axis a(dir_a), b(dir_b);
  for (int z = 0; z < dims[2]; ++z) {
    for (int y = 0; y < dims[1]; ++y) {
      for (int x = 0; x < dims[0]; ++x) {
        const bool in_a = y >= band_lo && y <= band_hi;  // sheet A runs along x
        const bool in_b = x >= band_lo && x <= band_hi;  // sheet B runs along y
        if (!in_a && !in_b) continue;
        auto& voxel = spec.voxels[spec.grid.linear({x, y, z})];
        voxel.clear();
        if (in_a && in_b) {
          voxel.push_back(wm_tensor(a, 0.5));
          voxel.push_back(wm_tensor(b, 0.5));
        } else {
          voxel.push_back(wm_tensor(in_a ? a : b, 1.0));
        }
      }
    }
  }
}

}  // namespace

PhantomSpec make_phantom(const std::string& name, std::uint64_t seed) {
  if (name == "P1") {  // uniform single-fiber slab along x
    PhantomSpec spec = base_spec(name, {16, 8, 3}, seed);
    const Axis along_x(1.0, 0.0, 0.0);
    for (auto& voxel : spec.voxels) voxel = {wm_tensor(along_x)};
    return spec;
  }
  if (name == "P2") {  // quarter-circle bundle in the xy-plane
    // Gentle curvature (about 2 degrees of tangent change per voxel) and a
    // low-SNR acquisition: the regime where borrowing strength from
    // neighbors pays off.
    PhantomSpec spec = base_spec(name, {36, 36, 3}, seed);
    spec.sigma = 150.0;
    const double r_lo = 56.0, r_hi = 64.0;  // mm from the volume corner
    for (int z = 0; z < spec.grid.dims[2]; ++z) {
      for (int y = 0; y < spec.grid.dims[1]; ++y) {
        for (int x = 0; x < spec.grid.dims[0]; ++x) {
          const Vec3 c = spec.grid.center({x, y, z});
          const double r = std::hypot(c[0], c[1]);
          if (r < r_lo || r > r_hi) continue;
          const double phi = std::atan2(c[1], c[0]);
          const Axis tangent(-std::sin(phi), std::cos(phi), 0.0);
          spec.voxels[spec.grid.linear({x, y, z})] = {wm_tensor(tangent)};
        }
      }
    }
    return spec;
  }
  if (name == "P3") {  // orthogonal crossing sheets
    PhantomSpec spec = base_spec(name, {16, 16, 3}, seed);
    fill_crossing(spec, Vec3(1, 0, 0), Vec3(0, 1, 0), 6, 9);
    return spec;
  }
  if (name == "P4") {  // 60-degree crossing
    PhantomSpec spec = base_spec(name, {16, 16, 3}, seed);
    const double rad = 60.0 * std::numbers::pi / 180.0;
    fill_crossing(spec, Vec3(1, 0, 0), Vec3(std::cos(rad), std::sin(rad), 0), 6, 9);
    return spec;
  }
  if (name == "P5") {  // three-way crossing block
    PhantomSpec spec = base_spec(name, {12, 12, 3}, seed);
    std::vector<GenerativeTensor> three;
    for (int i = 0; i < 3; ++i) {
      const double a = i * 60.0 * std::numbers::pi / 180.0;
      three.push_back(wm_tensor(Axis(std::cos(a), std::sin(a), 0.0), 1.0 / 3.0));
    }
    for (int z = 0; z < spec.grid.dims[2]; ++z) {
      for (int y = 2; y < 10; ++y) {
        for (int x = 2; x < 10; ++x) {
          spec.voxels[spec.grid.linear({x, y, z})] = three;
        }
      }
    }
    return spec;
  }
  if (name == "P6") {  // isotropic background only
    return base_spec(name, {10, 10, 3}, seed);
  }
  throw std::invalid_argument("make_phantom: unknown phantom '" + name + "'");
}

namespace {

std::uint64_t hash_bytes(const void* data, size_t n, std::uint64_t h) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t hash_gradient(const Vec3& u) {
  std::uint64_t h = 14695981039346656037ull;
  for (int a = 0; a < 3; ++a) {
    double v = u[a];
    h = hash_bytes(&v, sizeof(v), h);
  }
  return h;
}

}  // namespace

std::vector<double> simulate_intensities(std::span<const GenerativeTensor> tensors,
                                         const GradientScheme& scheme, double s0, double sigma,
                                         Rng& rng) {
  std::vector<double> out(scheme.size());
  for (int i = 0; i < scheme.size(); ++i) {
    out[i] = rician_sample(generative_signal(tensors, s0, scheme, i), sigma, rng);
  }
  return out;
}

Dataset generate(const PhantomSpec& spec) {
  const int n = spec.grid.num_voxels();
  if (static_cast<int>(spec.voxels.size()) != n) {
    throw std::invalid_argument("generate: voxel list does not match the grid");
  }
  Dataset out;
  out.grid = spec.grid;
  out.scheme = spec.scheme;
  out.s0 = spec.s0;
  out.sigma = spec.sigma;
  out.dwi.resize(n);
  out.b0.resize(n);
  out.truth_count.assign(n, 0);

  for (int v = 0; v < n; ++v) {
    out.dwi[v].resize(spec.scheme.size());
    // Noise is keyed to the gradient vector itself, so the dataset is
    // equivariant under gradient permutations.
    for (int i = 0; i < spec.scheme.size(); ++i) {
      Rng rng = Rng::stream(spec.seed ^ hash_gradient(spec.scheme.directions[i]),
                            static_cast<std::uint64_t>(v));
      const double mean = generative_signal(spec.voxels[v], spec.s0, spec.scheme, i);
      out.dwi[v][i] = rician_sample(mean, spec.sigma, rng);
    }
    out.b0[v].resize(spec.scheme.n_b0);
    for (int r = 0; r < spec.scheme.n_b0; ++r) {
      Rng rng = Rng::stream(spec.seed ^ (0xb0b0ull + r), static_cast<std::uint64_t>(v));
      out.b0[v][r] = rician_sample(spec.s0, spec.sigma, rng);
    }

    const Eigen::Vector3i idx = spec.grid.unlinear(v);
    int count = 0;
    for (const GenerativeTensor& t : spec.voxels[v]) {
      if (t.lambda_major - t.lambda_minor > 1e-12) {
        FieldEntry e;
        e.pos = spec.grid.center(idx);
        e.voxel = idx;
        e.linear_voxel = v;
        e.axis = t.axis;
        e.source = EntrySource::voxelwise;
        out.truth.entries.push_back(e);
        ++count;
      }
    }
    out.truth_count[v] = count;
    if (count == 0) out.truth.isotropic_voxels.push_back(v);
  }
  return out;
}

AngularMatch angular_error(std::span<const Axis> estimated, std::span<const Axis> truth) {
  if (estimated.size() > 4 || truth.size() > 4) {
    throw std::invalid_argument("angular_error: more than 4 directions");
  }
  AngularMatch out;
  const int ne = static_cast<int>(estimated.size());
  const int nt = static_cast<int>(truth.size());
  const int npair = std::min(ne, nt);
  if (npair == 0) {
    out.misses = nt;
    out.extras = ne;
    return out;
  }

  // Exhaustive assignment over permutations of the larger list.
  const bool est_small = ne <= nt;
  const int big = std::max(ne, nt);
  std::vector<int> perm(big);
  for (int i = 0; i < big; ++i) perm[i] = i;
  std::vector<int> best_perm;
  double best_total = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (int i = 0; i < npair; ++i) {
      const Axis& a = est_small ? estimated[i] : estimated[perm[i]];
      const Axis& b = est_small ? truth[perm[i]] : truth[i];
      total += geodesic_distance(a, b);
    }
    if (total < best_total) {
      best_total = total;
      best_perm.assign(perm.begin(), perm.begin() + npair);
    }
  } while (std::next_permutation(perm.begin(), perm.end()));

  for (int i = 0; i < npair; ++i) {
    const Axis& a = est_small ? estimated[i] : estimated[best_perm[i]];
    const Axis& b = est_small ? truth[best_perm[i]] : truth[i];
    out.matched_deg.push_back(geodesic_distance(a, b) * 180.0 / std::numbers::pi);
  }
  out.misses = nt - npair;
  out.extras = ne - npair;
  return out;
}

ConfusionMatrix count_confusion(std::span<const int> estimated_counts,
                                std::span<const int> truth_counts) {
  if (estimated_counts.size() != truth_counts.size()) {
    throw std::invalid_argument("count_confusion: grids of different sizes");
  }
  ConfusionMatrix m{};
  for (size_t i = 0; i < truth_counts.size(); ++i) {
    const int t = std::clamp(truth_counts[i], 0, 4);
    const int e = std::clamp(estimated_counts[i], 0, 4);
    m[t][e]++;
  }
  return m;
}

EvalReport evaluate_field(const DirectionField& estimated, const std::vector<int>& est_counts,
                          const DirectionField& truth, const std::vector<int>& truth_counts,
                          const VoxelGrid& grid) {
  EvalReport report;
  report.confusion = count_confusion(est_counts, truth_counts);
  report.voxels = grid.num_voxels();

  const auto est_map = estimated.by_voxel();
  const auto truth_map = truth.by_voxel();
  for (int v = 0; v < grid.num_voxels(); ++v) {
    std::vector<Axis> ea, ta;
    if (const auto it = est_map.find(v); it != est_map.end()) {
      for (int i : it->second) ea.push_back(estimated.entries[i].axis);
    }
    if (const auto it = truth_map.find(v); it != truth_map.end()) {
      for (int i : it->second) ta.push_back(truth.entries[i].axis);
    }
    if (ea.empty() && ta.empty()) continue;
    const AngularMatch match = angular_error(ea, ta);
    report.matched_errors_deg.insert(report.matched_errors_deg.end(), match.matched_deg.begin(),
                                     match.matched_deg.end());
    report.misses += match.misses;
    report.extras += match.extras;
  }

  if (!report.matched_errors_deg.empty()) {
    std::vector<double> sorted = report.matched_errors_deg;
    std::sort(sorted.begin(), sorted.end());
    double sum = 0.0;
    for (double e : sorted) sum += e;
    report.mean_error_deg = sum / sorted.size();
    const size_t mid = sorted.size() / 2;
    report.median_error_deg =
        sorted.size() % 2 == 0 ? 0.5 * (sorted[mid - 1] + sorted[mid]) : sorted[mid];
  }
  return report;
}

}  // namespace dist
