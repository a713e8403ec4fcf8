#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace multibert::codebook {

/// Row-major set of equal-length vectors.
struct PointSet {
  std::size_t dim = 0;
  std::vector<float> values;

  std::size_t size() const { return dim == 0 ? 0 : values.size() / dim; }
  std::span<const float> row(std::size_t i) const { return {values.data() + i * dim, dim}; }

  /// Flattens a list of vectors; throws a shape error on ragged input.
  static PointSet from_rows(const std::vector<std::vector<float>>& rows);
};

/// k centroids learned by k-means: the sentence-token vocabulary.
struct Codebook {
  std::uint32_t k = 0;
  std::uint32_t dim = 0;
  std::vector<float> centroids;  // k x dim
  double inertia = 0.0;
  std::int64_t seed = 0;
  std::uint32_t iterations_run = 0;

  std::span<const float> centroid(std::size_t i) const {
    return {centroids.data() + i * dim, dim};
  }

  bool operator==(const Codebook&) const = default;
};

struct KMeansOptions {
  std::uint32_t k = 200;
  std::uint32_t max_iter = 100;
  double tol = 1e-4;
  std::int64_t seed = 0;
};

struct FitResult {
  Codebook codebook;
  /// Objective after each assignment step, one entry per Lloyd iteration.
  std::vector<double> inertia_trace;
  /// Cluster of each training vector under the stored centroids.
  std::vector<std::uint32_t> assignments;
};

/// Lloyd's algorithm with greedy k-means++ seeding. An empty cluster is re-seeded at
/// the point with the largest current squared distance. Stops once the
/// largest centroid shift drops below tol, or after max_iter iterations.
FitResult kmeans_fit(const PointSet& points, const KMeansOptions& options);

/// Index of the nearest centroid by squared Euclidean distance; ties go to the
/// lowest index.
std::uint32_t assign(const Codebook& codebook, std::span<const float> vector);

double inertia(const Codebook& codebook, const PointSet& points);

double squared_distance(std::span<const float> a, std::span<const float> b);

/// "SCBK" | version u32 | k u32 | dim u32 | seed i64 | iterations u32 |
/// inertia f64 | k*dim f32, little-endian.
void save_codebook(const Codebook& codebook, const std::filesystem::path& path);
Codebook load_codebook(const std::filesystem::path& path);

inline constexpr std::uint32_t kCodebookVersion = 1;

}  // namespace multibert::codebook
