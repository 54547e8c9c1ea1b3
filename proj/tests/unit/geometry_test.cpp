#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <set>

#include "../oracles.hpp"
#include "tpm/error.hpp"
#include "tpm/geometry.hpp"
#include "tpm/random.hpp"

using namespace tpm;

namespace {

std::vector<oracle::P> to_oracle(const PointCloud& c) {
  std::vector<oracle::P> out;
  for (auto p : c.points) out.push_back({p.x, p.y, p.z});
  return out;
}

PointCloud random_cloud(std::size_t n, std::uint64_t seed, bool lattice = false) {
  Rng rng(seed);
  PointCloud c;
  for (std::size_t i = 0; i < n; ++i) {
    if (lattice) {
      // Small integer grid produces many exact distance ties.
      c.points.push_back({double(rng.below(4)), double(rng.below(4)), double(rng.below(2))});
    } else {
      c.points.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
    }
  }
  return c;
}

Point3 centroid(const PointCloud& c) {
  Point3 s;
  for (auto p : c.points) s = s + p;
  return s * (1.0 / double(c.size()));
}

double max_norm(const PointCloud& c) {
  double m = 0;
  for (auto p : c.points) m = std::max(m, norm(p));
  return m;
}

}  // namespace

TEST_SUITE("geometry") {
  TEST_CASE("generate_shape is deterministic per arguments") {
    const auto a = generate_shape(0, 256, 42);
    const auto b = generate_shape(0, 256, 42);
    REQUIRE(a.size() == b.size());
    CHECK(std::memcmp(a.points.data(), b.points.data(), a.size() * sizeof(Point3)) == 0);
    CHECK(a.label == 0);
    const auto c = generate_shape(0, 256, 43);
    CHECK_FALSE(a.points == c.points);
  }

  TEST_CASE("sphere points stay within 0.05 of unit radius") {
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      const auto cloud = generate_shape(0, 256, seed);
      const Point3 mid = centroid(cloud);
      for (auto p : cloud.points) {
        const double r = norm(p - mid);
        REQUIRE(r <= 1.05);
        REQUIRE(r >= 0.95);
      }
    }
  }

  TEST_CASE("every class normalizes and labels") {
    for (int cls = 0; cls < kShapeClassCount; ++cls) {
      const auto cloud = generate_shape(cls, 300, 11 + cls);
      CHECK(cloud.size() == 300);
      CHECK(cloud.label == cls);
      const Point3 m = centroid(cloud);
      CHECK(norm(m) < 1e-6);
      CHECK(max_norm(cloud) == doctest::Approx(1.0).epsilon(1e-6));
    }
  }

  TEST_CASE("minimal cube cloud") {
    const auto cloud = generate_shape(1, 8, 7);
    CHECK(cloud.size() == 8);
    for (auto p : cloud.points) CHECK((std::isfinite(p.x) && std::isfinite(p.y) && std::isfinite(p.z)));
    CHECK(norm(centroid(cloud)) < 1e-6);
  }

  TEST_CASE("generate_shape rejects bad arguments") {
    CHECK_THROWS_AS(generate_shape(8, 256, 1), ParameterError);
    CHECK_THROWS_AS(generate_shape(-1, 256, 1), ParameterError);
    CHECK_THROWS_AS(generate_shape(0, 7, 1), ParameterError);
  }

  TEST_CASE("normalize") {
    PointCloud same{{{1, 1, 1}, {1, 1, 1}, {1, 1, 1}, {1, 1, 1}}, std::nullopt};
    CHECK_THROWS_AS(normalize(same), DegenerateError);

    PointCloud two{{{0, 0, 0}, {2, 0, 0}}, std::nullopt};
    const auto n = normalize(two);
    CHECK(n.points[0].x == doctest::Approx(-1.0));
    CHECK(n.points[1].x == doctest::Approx(1.0));
    CHECK(n.points[0].y == 0.0);

    const auto cloud = random_cloud(50, 3);
    const auto once = normalize(cloud);
    const auto twice = normalize(once);
    for (std::size_t i = 0; i < once.size(); ++i) CHECK(norm(once.points[i] - twice.points[i]) < 1e-6);

    const auto t = fit_normalization(cloud);
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      CHECK(norm(t.invert(t.apply(cloud.points[i])) - cloud.points[i]) < 1e-6);
      CHECK(norm(t.apply(cloud.points[i]) - once.points[i]) < 1e-12);
    }
    CHECK(norm(centroid(once)) < 1e-6);
    CHECK(max_norm(once) == doctest::Approx(1.0).epsilon(1e-6));
  }

  TEST_CASE("fps on a unit square picks the far corner") {
    PointCloud square{{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {1, 1, 0}}, std::nullopt};
    const auto idx = farthest_point_sample_from(square, 2, 0);
    CHECK(idx == std::vector<std::size_t>{0, 3});
  }

  TEST_CASE("fps base cases") {
    const auto cloud = random_cloud(20, 9);
    const auto all = farthest_point_sample(cloud, 20, 5);
    std::vector<std::size_t> sorted = all;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < 20; ++i) CHECK(sorted[i] == i);

    const auto one = farthest_point_sample(cloud, 1, 5);
    REQUIRE(one.size() == 1);
    CHECK(one[0] == all[0]);
    CHECK(farthest_point_sample(cloud, 4, 5) == farthest_point_sample(cloud, 4, 5));
    CHECK_THROWS_AS(farthest_point_sample(cloud, 21, 5), ParameterError);
    CHECK_THROWS_AS(farthest_point_sample(cloud, 0, 5), ParameterError);
  }

  TEST_CASE("fps first index is uniform over seeds") {
    const auto cloud = random_cloud(4, 1);
    std::vector<int> counts(4, 0);
    for (std::uint64_t s = 0; s < 4000; ++s) ++counts[farthest_point_sample(cloud, 1, s)[0]];
    for (int c : counts) CHECK(std::abs(c - 1000) < 120);
  }

  TEST_CASE("fps matches the brute-force oracle") {
    for (std::uint64_t trial = 0; trial < 300; ++trial) {
      Rng rng(trial);
      const std::size_t n = 1 + rng.below(64);
      const std::size_t k = 1 + rng.below(std::min<std::size_t>(n, 8));
      const auto cloud = random_cloud(n, trial * 7 + 1, trial % 2 == 0);
      const auto got = farthest_point_sample(cloud, k, trial);
      const auto want = oracle::fps(to_oracle(cloud), k, got[0]);
      REQUIRE(got == want);
    }
  }

  TEST_CASE("knn on a line") {
    PointCloud line{{{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}}, std::nullopt};
    const std::vector<std::size_t> centers{0};
    const auto ps = knn_group(line, centers, 2);
    REQUIRE(ps.patch(0).size() == 2);
    CHECK(ps.patch(0)[0] == Point3{0, 0, 0});
    CHECK(ps.patch(0)[1] == Point3{1, 0, 0});
  }

  TEST_CASE("knn invariants") {
    const auto cloud = random_cloud(40, 5);
    const auto centers = farthest_point_sample(cloud, 6, 2);
    const auto single = knn_group(cloud, centers, 1);
    for (std::size_t g = 0; g < 6; ++g) CHECK(single.patch(g)[0] == Point3{0, 0, 0});

    const auto ps = knn_group(cloud, centers, 10);
    CHECK(ps.patch_count == 6);
    CHECK(ps.patch_size == 10);
    CHECK(std::set<std::size_t>(ps.center_indices.begin(), ps.center_indices.end()).size() == 6);
    for (std::size_t g = 0; g < 6; ++g) {
      const auto patch = ps.patch(g);
      CHECK(std::find(patch.begin(), patch.end(), Point3{0, 0, 0}) != patch.end());
    }
    CHECK_THROWS_AS(knn_group(cloud, centers, 41), ParameterError);
    const std::vector<std::size_t> dup{1, 1};
    CHECK_THROWS_AS(knn_group(cloud, dup, 3), ParameterError);
  }

  TEST_CASE("knn matches the brute-force oracle") {
    for (std::uint64_t trial = 0; trial < 300; ++trial) {
      Rng rng(trial + 1000);
      const std::size_t n = 1 + rng.below(64);
      const std::size_t s = 1 + rng.below(n);
      const std::size_t g = 1 + rng.below(std::min<std::size_t>(n, 8));
      const auto cloud = random_cloud(n, trial * 13 + 5, trial % 2 == 1);
      const auto centers = farthest_point_sample(cloud, g, trial);
      const auto ps = knn_group(cloud, centers, s);
      const auto pts = to_oracle(cloud);
      for (std::size_t c = 0; c < g; ++c) {
        const auto want = oracle::knn(pts, centers[c], s);
        for (std::size_t j = 0; j < s; ++j) {
          const Point3 expect = cloud.points[want[j]] - cloud.points[centers[c]];
          REQUIRE(ps.patch(c)[j] == expect);
        }
      }
    }
  }

  TEST_CASE("patchify is fps followed by knn") {
    const auto cloud = generate_shape(4, 128, 8);
    const auto ps = patchify(cloud, 16, 8, 99);
    const auto centers = farthest_point_sample(cloud, 16, 99);
    CHECK(ps.center_indices == centers);
    for (std::size_t g = 0; g < 16; ++g) CHECK(ps.centers[g] == cloud.points[centers[g]]);
  }
}
