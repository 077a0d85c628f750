#include <doctest.h>

#include <algorithm>
#include <numbers>

#include "dist/geometry.hpp"
#include "test_util.hpp"

using namespace dist;
using dist::test::deg;

namespace {

constexpr double pi = std::numbers::pi;

// Independent minimizer of the weighted Karcher objective: brute force over a
// dense icosphere grid, then two rounds of local tangent-grid refinement.
Axis karcher_grid_oracle(std::span<const Axis> axes, std::span<const double> weights) {
  Axis best = axes[0];
  double best_obj = karcher_objective(axes, weights, best);
  for (const Axis& candidate : icosphere_axes(3)) {
    const double obj = karcher_objective(axes, weights, candidate);
    if (obj < best_obj) {
      best_obj = obj;
      best = candidate;
    }
  }
  double window = 6.0 * deg;
  for (int round = 0; round < 2; ++round) {
    const auto [e1, e2] = tangent_basis(best);
    const Axis center = best;
    const double step = window / 12.0;
    for (double a = -window; a <= window; a += step) {
      for (double b = -window; b <= window; b += step) {
        const Axis candidate(exp_map(center.vec(), a * e1 + b * e2));
        const double obj = karcher_objective(axes, weights, candidate);
        if (obj < best_obj) {
          best_obj = obj;
          best = candidate;
        }
      }
    }
    window = 2.0 * step;
  }
  return best;
}

}  // namespace

TEST_SUITE_BEGIN("geometry");

TEST_CASE("axis canonical representative and invariants") {
  const Axis a(0.0, -2.0, 1.0);  // first nonzero coordinate becomes >= 0
  CHECK(a[1] > 0.0);
  CHECK(a.vec().norm() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(Axis(1.0, 2.0, 3.0) == Axis(-1.0, -2.0, -3.0));
  CHECK_THROWS_AS(Axis(0.0, 0.0, 0.0), std::invalid_argument);
}

TEST_CASE("geodesic distance examples") {
  const Axis e1(1, 0, 0), e2(0, 1, 0);
  CHECK(geodesic_distance(e1, e1) == doctest::Approx(0.0));
  CHECK(geodesic_distance(e1, e2) == doctest::Approx(pi / 2));
  CHECK(geodesic_distance(e1, Axis(-1, 0, 0)) == doctest::Approx(0.0));
  // arccos(1/sqrt(2)) by hand
  CHECK(geodesic_distance(e1, Axis(1, 1, 0)) == doctest::Approx(pi / 4).epsilon(1e-12));
}

TEST_CASE("align") {
  const Vec3 e1(1, 0, 0), e2(0, 1, 0);
  CHECK(align(-e1, e1) == e1);
  CHECK(align(e1, e1) == e1);
  CHECK(align(e2, e1) == e2);  // orthogonal input passes through unchanged
}

TEST_CASE("exp map examples") {
  const Vec3 e1(1, 0, 0), e2(0, 1, 0);
  CHECK((exp_map(e1, Vec3::Zero()) - e1).norm() == doctest::Approx(0.0));
  CHECK((exp_map(e1, (pi / 2) * e2) - e2).norm() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK((exp_map(e1, pi * e2) + e1).norm() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("log map examples") {
  const Vec3 e1(1, 0, 0), e2(0, 1, 0);
  CHECK(log_map(e1, e1).u.norm() == doctest::Approx(0.0));
  const Tangent t = log_map(e1, e2);
  CHECK((t.u - (pi / 2) * e2).norm() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK_THROWS_AS(log_map(e1, Vec3(-1, 0, 0)), std::domain_error);
}

TEST_CASE("exp and log are mutual inverses") {
  Rng rng(11);
  for (int i = 0; i < 300; ++i) {
    const Vec3 p = test::random_unit(rng);
    const Vec3 v = test::random_unit(rng);
    if (sphere_distance(p, v) >= pi - 0.1) continue;
    const Vec3 back = exp_map(p, log_map(p, v).u);
    CHECK((back - v).norm() < 1e-10);
  }
}

TEST_CASE("metric axioms on random triples") {
  Rng rng(12);
  for (int i = 0; i < 1000; ++i) {
    const Axis a = test::random_axis(rng), b = test::random_axis(rng),
               c = test::random_axis(rng);
    const double ab = geodesic_distance(a, b);
    CHECK(ab == doctest::Approx(geodesic_distance(b, a)));
    CHECK(geodesic_distance(a, a) == doctest::Approx(0.0));
    CHECK(ab <= geodesic_distance(a, c) + geodesic_distance(c, b) + 1e-12);
    CHECK(ab >= 0.0);
    CHECK(ab <= pi / 2 + 1e-12);
  }
}

TEST_CASE("karcher mean basic cases") {
  const Axis a(0.3, 0.4, 0.5);
  const std::vector<Axis> same = {a, a, a};
  const std::vector<double> w = {0.2, 1.0, 3.0};
  CHECK((weighted_karcher_mean(same, w).vec() - a.vec()).norm() < 1e-9);

  const std::vector<Axis> two = {Axis(1, 0, 0), Axis(0, 1, 0)};
  const std::vector<double> degenerate = {1.0, 0.0};
  CHECK(weighted_karcher_mean(two, degenerate) == two[0]);

  const std::vector<double> zeros = {0.0, 0.0};
  CHECK_THROWS_AS(weighted_karcher_mean(two, zeros), std::invalid_argument);
}

TEST_CASE("karcher mean of a symmetric pair is the bisector") {
  const double t = 15.0 * deg;
  const std::vector<Axis> axes = {Axis(std::cos(t), std::sin(t), 0.0),
                                  Axis(std::cos(t), -std::sin(t), 0.0)};
  const std::vector<double> w = {1.0, 1.0};
  const Axis mean = weighted_karcher_mean(axes, w);
  const Axis e1(1, 0, 0);
  CHECK(geodesic_distance(mean, e1) < 1e-9);
  // the bisector beats both inputs on the objective
  CHECK(karcher_objective(axes, w, e1) < karcher_objective(axes, w, axes[0]));
  CHECK(karcher_objective(axes, w, e1) < karcher_objective(axes, w, axes[1]));
}

TEST_CASE("karcher mean matches the dense grid-search oracle") {
  Rng rng(21);
  for (int rep = 0; rep < 5; ++rep) {
    const Axis center = test::random_axis(rng);
    std::vector<Axis> axes;
    std::vector<double> weights;
    for (int i = 0; i < 20; ++i) {
      axes.push_back(test::random_axis_near(center, 10.0 * deg, rng));
      weights.push_back(rng.uniform(0.5, 2.0));
    }
    const Axis mean = weighted_karcher_mean(axes, weights);
    const Axis oracle = karcher_grid_oracle(axes, weights);
    CHECK(geodesic_distance(mean, oracle) < 0.5 * deg);
  }
}

TEST_CASE("karcher mean is sign invariant") {
  Rng rng(22);
  const Axis center = test::random_axis(rng);
  std::vector<Axis> axes;
  std::vector<double> weights;
  for (int i = 0; i < 8; ++i) {
    axes.push_back(test::random_axis_near(center, 20.0 * deg, rng));
    weights.push_back(rng.uniform(0.1, 1.0));
  }
  const Axis base = weighted_karcher_mean(axes, weights);
  std::vector<Axis> flipped = axes;
  for (size_t i = 0; i < flipped.size(); i += 2) {
    flipped[i] = Axis(-flipped[i].vec());  // same Axis after canonicalization
  }
  for (size_t i = 0; i < axes.size(); ++i) CHECK(flipped[i] == axes[i]);
  CHECK(geodesic_distance(weighted_karcher_mean(flipped, weights), base) == doctest::Approx(0.0));
}

TEST_CASE("icosphere counts and separation") {
  CHECK(icosphere_axes(0).size() == 6);
  CHECK(icosphere_axes(1).size() == 81);
  CHECK(icosphere_axes(2).size() == 321);
  CHECK(icosphere_axes(3).size() == 1281);
  CHECK_THROWS_AS(icosphere_axes(4), std::invalid_argument);

  for (int level : {0, 1, 2}) {
    const std::vector<Axis> axes = icosphere_axes(level);
    double min_dist = pi;
    for (size_t i = 0; i < axes.size(); ++i) {
      for (size_t j = i + 1; j < axes.size(); ++j) {
        min_dist = std::min(min_dist, geodesic_distance(axes[i], axes[j]));
      }
    }
    CHECK(min_dist > 1e-6);
  }
}

TEST_CASE("pam clustering") {
  Rng rng(31);
  SUBCASE("k=1 medoid minimizes total dissimilarity") {
    std::vector<Axis> axes;
    for (int i = 0; i < 12; ++i) axes.push_back(test::random_axis(rng));
    const ClusterResult r = pam_cluster(axes, 1);
    const Eigen::MatrixXd d = dissimilarity_matrix(axes);
    double best = std::numeric_limits<double>::infinity();
    int best_idx = -1;
    for (int i = 0; i < 12; ++i) {
      if (d.col(i).sum() < best) {
        best = d.col(i).sum();
        best_idx = i;
      }
    }
    CHECK(r.medoids[0] == best_idx);
  }

  SUBCASE("two tight bundles 80 degrees apart separate exactly") {
    const Axis c1(1, 0, 0);
    const Axis c2(std::cos(80.0 * deg), std::sin(80.0 * deg), 0.0);
    std::vector<Axis> axes;
    std::vector<int> truth;
    for (int i = 0; i < 10; ++i) {
      axes.push_back(test::random_axis_near(c1, 5.0 * deg, rng));
      truth.push_back(0);
      axes.push_back(test::random_axis_near(c2, 5.0 * deg, rng));
      truth.push_back(1);
    }
    const ClusterResult r = pam_cluster(axes, 2);
    // same partition as the ground truth, up to label swap
    const int label0 = r.assignment[0];
    for (size_t i = 0; i < axes.size(); ++i) {
      CHECK((r.assignment[i] == label0) == (truth[i] == truth[0]));
    }
    CHECK(geodesic_distance(r.mean_axes[r.assignment[0]], c1) < 5.0 * deg);
  }

  SUBCASE("k equal to n gives singletons") {
    std::vector<Axis> axes;
    for (int i = 0; i < 5; ++i) axes.push_back(test::random_axis(rng));
    const ClusterResult r = pam_cluster(axes, 5);
    std::vector<int> seen(5, 0);
    for (int a : r.assignment) seen[a]++;
    for (int s : seen) CHECK(s == 1);
  }

  SUBCASE("swap objective is non-increasing") {
    std::vector<Axis> axes;
    for (int i = 0; i < 25; ++i) axes.push_back(test::random_axis(rng));
    const ClusterResult r = pam_cluster(axes, 3);
    for (size_t i = 1; i < r.swap_objectives.size(); ++i) {
      CHECK(r.swap_objectives[i] <= r.swap_objectives[i - 1] + 1e-12);
    }
  }
}

TEST_CASE("average silhouette") {
  Rng rng(41);
  const Axis c1(1, 0, 0), c2(0, 1, 0);
  std::vector<Axis> axes;
  std::vector<int> labels;
  for (int i = 0; i < 15; ++i) {
    axes.push_back(test::random_axis_near(c1, 4.0 * deg, rng));
    labels.push_back(0);
    axes.push_back(test::random_axis_near(c2, 4.0 * deg, rng));
    labels.push_back(1);
  }
  CHECK(average_silhouette(axes, labels) > 0.8);

  std::vector<int> random_labels(labels.size());
  for (size_t i = 0; i < random_labels.size(); ++i) {
    random_labels[i] = static_cast<int>(rng.uniform_index(2));
  }
  random_labels[0] = 0;  // keep both clusters nonempty
  random_labels[1] = 1;
  CHECK(average_silhouette(axes, random_labels) < 0.3);

  SUBCASE("identical points do not divide by zero") {
    const std::vector<Axis> same = {c1, c1, c1, c1};
    const std::vector<int> two_clusters = {0, 0, 1, 1};
    const double s = average_silhouette(same, two_clusters);
    CHECK(std::isfinite(s));
    CHECK(s == doctest::Approx(0.0));
  }

  SUBCASE("single cluster is an error") {
    const std::vector<int> ones(axes.size(), 0);
    CHECK_THROWS_AS(average_silhouette(axes, ones), std::invalid_argument);
  }
}

TEST_SUITE_END();
