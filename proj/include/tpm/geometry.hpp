#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace tpm {

struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  friend Point3 operator+(Point3 a, Point3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Point3 operator-(Point3 a, Point3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Point3 operator*(Point3 a, double s) { return {a.x * s, a.y * s, a.z * s}; }
  friend bool operator==(const Point3&, const Point3&) = default;
};

double dot(Point3 a, Point3 b);
double squared_norm(Point3 p);
double norm(Point3 p);
double squared_distance(Point3 a, Point3 b);

struct PointCloud {
  std::vector<Point3> points;
  std::optional<int> label;

  std::size_t size() const { return points.size(); }
};

/// Centroid/scale pair mapping a cloud into the unit ball: p -> (p - centroid) / scale.
struct Normalization {
  Point3 centroid;
  double scale = 1.0;

  Point3 apply(Point3 p) const { return (p - centroid) * (1.0 / scale); }
  Point3 invert(Point3 p) const { return p * scale + centroid; }
};

/// FPS centers plus their kNN groups. Patch g occupies local_points[g*patch_size, (g+1)*patch_size)
/// and is expressed relative to centers[g].
struct PatchSet {
  std::vector<Point3> centers;
  std::vector<std::size_t> center_indices;
  std::vector<Point3> local_points;
  std::size_t patch_count = 0;
  std::size_t patch_size = 0;

  std::span<const Point3> patch(std::size_t g) const {
    return {local_points.data() + g * patch_size, patch_size};
  }
};

inline constexpr int kShapeClassCount = 8;
inline constexpr std::array<std::string_view, kShapeClassCount> kShapeNames = {
    "sphere", "cube", "cylinder", "cone", "torus", "pyramid", "plane-with-ridge", "two-spheres"};

/// Samples a normalized, labeled cloud from the surface of one of the procedural shape classes.
/// The shape gets a random rotation about a random axis, an isotropic scale in [0.8, 1.2] and
/// per-point Gaussian jitter (sigma 0.01, displacement clipped at 0.02) before normalization.
PointCloud generate_shape(int class_id, std::size_t n_points, std::uint64_t seed);

/// Throws DegenerateError when every point coincides.
Normalization fit_normalization(const PointCloud& cloud);
PointCloud normalize(const PointCloud& cloud);

/// Greedy max-min selection. The first index is drawn uniformly from `seed`; later ties go to the
/// lowest index.
std::vector<std::size_t> farthest_point_sample(const PointCloud& cloud, std::size_t k,
                                               std::uint64_t seed);
std::vector<std::size_t> farthest_point_sample_from(const PointCloud& cloud, std::size_t k,
                                                    std::size_t first_index);

/// Each patch is the `patch_size` nearest points to its center (distance ties by lowest index),
/// translated so the center sits at the origin.
PatchSet knn_group(const PointCloud& cloud, std::span<const std::size_t> center_indices,
                   std::size_t patch_size);

/// farthest_point_sample followed by knn_group.
PatchSet patchify(const PointCloud& cloud, std::size_t patch_count, std::size_t patch_size,
                  std::uint64_t seed);

}  // namespace tpm
