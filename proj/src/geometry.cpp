#include "tpm/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>

#include "tpm/error.hpp"
#include "tpm/random.hpp"

namespace tpm {

double dot(Point3 a, Point3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
double squared_norm(Point3 p) { return dot(p, p); }
double norm(Point3 p) { return std::sqrt(squared_norm(p)); }
double squared_distance(Point3 a, Point3 b) { return squared_norm(a - b); }

namespace {

constexpr double kJitterSigma = 0.01;
constexpr double kJitterClip = 0.02;
constexpr double kPi = std::numbers::pi;

Point3 random_unit_vector(Rng& rng) {
  for (;;) {
    Point3 v{rng.normal(), rng.normal(), rng.normal()};
    const double n = norm(v);
    if (n > 1e-12) return v * (1.0 / n);
  }
}

Point3 sample_triangle(Rng& rng, Point3 a, Point3 b, Point3 c) {
  double u = rng.uniform();
  double v = rng.uniform();
  if (u + v > 1.0) {
    u = 1.0 - u;
    v = 1.0 - v;
  }
  return a + (b - a) * u + (c - a) * v;
}

double triangle_area(Point3 a, Point3 b, Point3 c) {
  const Point3 e1 = b - a;
  const Point3 e2 = c - a;
  const Point3 cr{e1.y * e2.z - e1.z * e2.y, e1.z * e2.x - e1.x * e2.z, e1.x * e2.y - e1.y * e2.x};
  return 0.5 * norm(cr);
}

// Golden-angle lattice: near-uniform coverage with a centroid that stays at the origin.
std::vector<Point3> sample_sphere(Rng& rng, std::size_t n) {
  const double golden = kPi * (3.0 - std::sqrt(5.0));
  const double offset = rng.uniform(0.0, 2.0 * kPi);
  std::vector<Point3> pts(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double z = 1.0 - (2.0 * static_cast<double>(i) + 1.0) / static_cast<double>(n);
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden * static_cast<double>(i) + offset;
    pts[i] = {r * std::cos(phi), r * std::sin(phi), z};
  }
  return pts;
}

std::vector<Point3> sample_cube(Rng& rng, std::size_t n) {
  std::vector<Point3> pts(n);
  for (auto& p : pts) {
    const auto face = rng.below(6);
    const double a = rng.uniform(-1.0, 1.0);
    const double b = rng.uniform(-1.0, 1.0);
    const double s = (face % 2 == 0) ? 1.0 : -1.0;
    switch (face / 2) {
      case 0: p = {s, a, b}; break;
      case 1: p = {a, s, b}; break;
      default: p = {a, b, s}; break;
    }
  }
  return pts;
}

std::vector<Point3> sample_cylinder(Rng& rng, std::size_t n) {
  constexpr double r = 0.6;
  constexpr double h = 2.0;
  const double lateral = 2.0 * kPi * r * h;
  const double caps = 2.0 * kPi * r * r;
  std::vector<Point3> pts(n);
  for (auto& p : pts) {
    const double theta = rng.uniform(0.0, 2.0 * kPi);
    if (rng.uniform() * (lateral + caps) < lateral) {
      p = {r * std::cos(theta), r * std::sin(theta), rng.uniform(-1.0, 1.0)};
    } else {
      const double rad = r * std::sqrt(rng.uniform());
      const double z = rng.below(2) == 0 ? -1.0 : 1.0;
      p = {rad * std::cos(theta), rad * std::sin(theta), z};
    }
  }
  return pts;
}

std::vector<Point3> sample_cone(Rng& rng, std::size_t n) {
  constexpr double r = 0.8;
  constexpr double h = 2.0;
  const double slant = std::sqrt(r * r + h * h);
  const double lateral = kPi * r * slant;
  const double base = kPi * r * r;
  std::vector<Point3> pts(n);
  for (auto& p : pts) {
    const double theta = rng.uniform(0.0, 2.0 * kPi);
    if (rng.uniform() * (lateral + base) < lateral) {
      const double t = std::sqrt(rng.uniform());  // fraction of the way from apex to rim
      p = {r * t * std::cos(theta), r * t * std::sin(theta), 1.0 - h * t};
    } else {
      const double rad = r * std::sqrt(rng.uniform());
      p = {rad * std::cos(theta), rad * std::sin(theta), -1.0};
    }
  }
  return pts;
}

std::vector<Point3> sample_torus(Rng& rng, std::size_t n) {
  constexpr double major = 0.7;
  constexpr double minor = 0.3;
  std::vector<Point3> pts(n);
  for (auto& p : pts) {
    double v;
    // Area element is proportional to (major + minor cos v).
    do {
      v = rng.uniform(0.0, 2.0 * kPi);
    } while (rng.uniform() * (major + minor) > major + minor * std::cos(v));
    const double u = rng.uniform(0.0, 2.0 * kPi);
    const double ring = major + minor * std::cos(v);
    p = {ring * std::cos(u), ring * std::sin(u), minor * std::sin(v)};
  }
  return pts;
}

std::vector<Point3> sample_pyramid(Rng& rng, std::size_t n) {
  const Point3 apex{0.0, 0.0, 1.0};
  const std::array<Point3, 4> base = {
      Point3{-1.0, -1.0, -0.8}, Point3{1.0, -1.0, -0.8}, Point3{1.0, 1.0, -0.8}, Point3{-1.0, 1.0, -0.8}};
  std::array<std::array<Point3, 3>, 6> tris = {{
      {base[0], base[1], apex},
      {base[1], base[2], apex},
      {base[2], base[3], apex},
      {base[3], base[0], apex},
      {base[0], base[1], base[2]},
      {base[0], base[2], base[3]},
  }};
  std::array<double, 6> cumulative{};
  double total = 0.0;
  for (std::size_t i = 0; i < tris.size(); ++i) {
    total += triangle_area(tris[i][0], tris[i][1], tris[i][2]);
    cumulative[i] = total;
  }
  std::vector<Point3> pts(n);
  for (auto& p : pts) {
    const double pick = rng.uniform() * total;
    std::size_t t = 0;
    while (t + 1 < tris.size() && pick >= cumulative[t]) ++t;
    p = sample_triangle(rng, tris[t][0], tris[t][1], tris[t][2]);
  }
  return pts;
}

std::vector<Point3> sample_plane_with_ridge(Rng& rng, std::size_t n) {
  constexpr double height = 0.5;
  constexpr double half_width = 0.3;
  const double slope = height / half_width;
  const double max_stretch = std::sqrt(1.0 + slope * slope);
  std::vector<Point3> pts(n);
  for (auto& p : pts) {
    double x;
    double stretch;
    do {
      x = rng.uniform(-1.0, 1.0);
      stretch = std::abs(x) < half_width ? max_stretch : 1.0;
    } while (rng.uniform() * max_stretch > stretch);
    const double y = rng.uniform(-1.0, 1.0);
    p = {x, y, height * std::max(0.0, 1.0 - std::abs(x) / half_width)};
  }
  return pts;
}

std::vector<Point3> sample_two_spheres(Rng& rng, std::size_t n) {
  constexpr double radius = 0.5;
  constexpr double offset = 0.6;
  std::vector<Point3> pts(n);
  for (auto& p : pts) {
    const double cx = rng.below(2) == 0 ? -offset : offset;
    p = random_unit_vector(rng) * radius + Point3{cx, 0.0, 0.0};
  }
  return pts;
}

Point3 rotate(Point3 p, Point3 axis, double angle) {
  // Rodrigues' rotation formula.
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  const Point3 cr{axis.y * p.z - axis.z * p.y, axis.z * p.x - axis.x * p.z, axis.x * p.y - axis.y * p.x};
  return p * c + cr * s + axis * (dot(axis, p) * (1.0 - c));
}

}  // namespace

PointCloud generate_shape(int class_id, std::size_t n_points, std::uint64_t seed) {
  if (class_id < 0 || class_id >= kShapeClassCount) {
    throw ParameterError("shape class id must be in [0, 7], got " + std::to_string(class_id));
  }
  if (n_points < 8) throw ParameterError("a generated shape needs at least 8 points");

  Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(class_id), n_points}));
  std::vector<Point3> pts;
  switch (class_id) {
    case 0: pts = sample_sphere(rng, n_points); break;
    case 1: pts = sample_cube(rng, n_points); break;
    case 2: pts = sample_cylinder(rng, n_points); break;
    case 3: pts = sample_cone(rng, n_points); break;
    case 4: pts = sample_torus(rng, n_points); break;
    case 5: pts = sample_pyramid(rng, n_points); break;
    case 6: pts = sample_plane_with_ridge(rng, n_points); break;
    default: pts = sample_two_spheres(rng, n_points); break;
  }

  for (auto& p : pts) {
    Point3 d{kJitterSigma * rng.normal(), kJitterSigma * rng.normal(), kJitterSigma * rng.normal()};
    const double len = norm(d);
    if (len > kJitterClip) d = d * (kJitterClip / len);
    p = p + d;
  }
  const double scale = rng.uniform(0.8, 1.2);
  const Point3 axis = random_unit_vector(rng);
  const double angle = rng.uniform(0.0, 2.0 * kPi);
  for (auto& p : pts) p = rotate(p * scale, axis, angle);

  PointCloud cloud{std::move(pts), class_id};
  return normalize(cloud);
}

Normalization fit_normalization(const PointCloud& cloud) {
  if (cloud.points.empty()) throw ParameterError("cannot normalize an empty cloud");
  Point3 sum;
  for (const auto& p : cloud.points) sum = sum + p;
  const Point3 centroid = sum * (1.0 / static_cast<double>(cloud.size()));
  double max_sq = 0.0;
  for (const auto& p : cloud.points) max_sq = std::max(max_sq, squared_distance(p, centroid));
  if (!(max_sq > 0.0)) throw DegenerateError("cannot normalize a cloud whose points all coincide");
  return {centroid, std::sqrt(max_sq)};
}

PointCloud normalize(const PointCloud& cloud) {
  const Normalization t = fit_normalization(cloud);
  PointCloud out{std::vector<Point3>(cloud.size()), cloud.label};
  for (std::size_t i = 0; i < cloud.size(); ++i) out.points[i] = t.apply(cloud.points[i]);
  return out;
}

std::vector<std::size_t> farthest_point_sample_from(const PointCloud& cloud, std::size_t k,
                                                    std::size_t first_index) {
  const std::size_t n = cloud.size();
  if (k < 1 || k > n) {
    throw ParameterError("farthest point sampling needs 1 <= k <= n (k=" + std::to_string(k) +
                         ", n=" + std::to_string(n) + ")");
  }
  if (first_index >= n) throw ParameterError("first FPS index out of range");

  std::vector<std::size_t> selected;
  selected.reserve(k);
  selected.push_back(first_index);
  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  min_dist[first_index] = -1.0;
  std::size_t last = first_index;
  while (selected.size() < k) {
    std::size_t best = n;
    double best_dist = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      min_dist[i] = std::min(min_dist[i], squared_distance(cloud.points[i], cloud.points[last]));
      if (min_dist[i] > best_dist) {
        best_dist = min_dist[i];
        best = i;
      }
    }
    // Only duplicates of already-selected points remain; fall back to the lowest unused index.
    if (best_dist <= 0.0) {
      std::vector<bool> used(n, false);
      for (auto s : selected) used[s] = true;
      best = static_cast<std::size_t>(std::find(used.begin(), used.end(), false) - used.begin());
    }
    selected.push_back(best);
    min_dist[best] = -1.0;
    last = best;
  }
  return selected;
}

std::vector<std::size_t> farthest_point_sample(const PointCloud& cloud, std::size_t k,
                                               std::uint64_t seed) {
  if (cloud.size() == 0) throw ParameterError("farthest point sampling on an empty cloud");
  Rng rng(derive_seed(seed, {0xf95ULL}));
  return farthest_point_sample_from(cloud, k, static_cast<std::size_t>(rng.below(cloud.size())));
}

PatchSet knn_group(const PointCloud& cloud, std::span<const std::size_t> center_indices,
                   std::size_t patch_size) {
  const std::size_t n = cloud.size();
  if (patch_size < 1 || patch_size > n) {
    throw ParameterError("patch size must be in [1, n] (S=" + std::to_string(patch_size) +
                         ", n=" + std::to_string(n) + ")");
  }
  std::vector<bool> seen(n, false);
  for (auto c : center_indices) {
    if (c >= n) throw ParameterError("center index out of range");
    if (seen[c]) throw ParameterError("center indices must be distinct");
    seen[c] = true;
  }

  PatchSet out;
  out.patch_count = center_indices.size();
  out.patch_size = patch_size;
  out.center_indices.assign(center_indices.begin(), center_indices.end());
  out.centers.reserve(out.patch_count);
  out.local_points.reserve(out.patch_count * patch_size);

  std::vector<std::size_t> order(n);
  std::vector<double> dist(n);
  for (auto c : center_indices) {
    const Point3 center = cloud.points[c];
    out.centers.push_back(center);
    for (std::size_t i = 0; i < n; ++i) dist[i] = squared_distance(cloud.points[i], center);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(patch_size),
                      order.end(), [&](std::size_t a, std::size_t b) {
                        return dist[a] < dist[b] || (dist[a] == dist[b] && a < b);
                      });
    for (std::size_t j = 0; j < patch_size; ++j) {
      out.local_points.push_back(cloud.points[order[j]] - center);
    }
  }
  return out;
}

PatchSet patchify(const PointCloud& cloud, std::size_t patch_count, std::size_t patch_size,
                  std::uint64_t seed) {
  const auto centers = farthest_point_sample(cloud, patch_count, seed);
  return knn_group(cloud, centers, patch_size);
}

}  // namespace tpm
