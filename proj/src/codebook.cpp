#include "multibert/codebook.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "multibert/common.hpp"

namespace multibert::codebook {

namespace {

constexpr char kMagic[4] = {'S', 'C', 'B', 'K'};

double squared_distance_mixed(std::span<const float> x, const double* c) {
  double d = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    double t = static_cast<double>(x[j]) - c[j];
    d += t * t;
  }
  return d;
}

std::size_t count_distinct(const PointSet& points, std::size_t stop_after) {
  std::vector<std::size_t> order(points.size());
  std::iota(order.begin(), order.end(), 0);
  auto less = [&](std::size_t a, std::size_t b) {
    auto ra = points.row(a), rb = points.row(b);
    return std::lexicographical_compare(ra.begin(), ra.end(), rb.begin(), rb.end());
  };
  std::sort(order.begin(), order.end(), less);
  std::size_t distinct = order.empty() ? 0 : 1;
  for (std::size_t i = 1; i < order.size() && distinct < stop_after; ++i) {
    if (less(order[i - 1], order[i])) ++distinct;
  }
  return distinct;
}

struct Nearest {
  std::uint32_t index;
  double distance;
};

Nearest nearest(std::span<const float> x, const std::vector<double>& centroids, std::size_t k) {
  std::size_t dim = x.size();
  Nearest best{0, std::numeric_limits<double>::infinity()};
  for (std::size_t c = 0; c < k; ++c) {
    double d = squared_distance_mixed(x, centroids.data() + c * dim);
    if (d < best.distance) best = {static_cast<std::uint32_t>(c), d};
  }
  return best;
}

std::vector<double> kmeanspp_init(const PointSet& points, std::size_t k, Rng& rng) {
  const std::size_t n = points.size(), dim = points.dim;
  std::vector<double> centroids(k * dim);
  auto place = [&](std::size_t c, std::size_t point) {
    auto r = points.row(point);
    std::copy(r.begin(), r.end(), centroids.begin() + static_cast<std::ptrdiff_t>(c * dim));
  };
  place(0, rng.below(n));
  std::vector<double> d2(n);
  parallel_for(n, [&](std::size_t i) { d2[i] = squared_distance_mixed(points.row(i), centroids.data()); });
  // Greedy variant: 2 + floor(ln k) candidates per step, keep the one that
  // lowers the potential most.
  const std::size_t trials = 2 + static_cast<std::size_t>(std::log(static_cast<double>(k)));
  std::vector<double> best_d2(n), cand_d2(n);
  for (std::size_t c = 1; c < k; ++c) {
    double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    std::size_t best = n;
    double best_potential = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < trials; ++t) {
      double target = rng.uniform() * total;
      std::size_t pick = n;
      double running = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;
        running += d2[i];
        pick = i;
        if (running > target) break;
      }
      if (pick == n) pick = rng.below(n);
      auto candidate = points.row(pick);
      std::vector<double> row(candidate.begin(), candidate.end());
      parallel_for(n, [&](std::size_t i) {
        cand_d2[i] = std::min(d2[i], squared_distance_mixed(points.row(i), row.data()));
      });
      double potential = std::accumulate(cand_d2.begin(), cand_d2.end(), 0.0);
      if (potential < best_potential) {
        best_potential = potential;
        best = pick;
        best_d2.swap(cand_d2);
      }
    }
    place(c, best);
    d2.swap(best_d2);
  }
  return centroids;
}

}  // namespace

PointSet PointSet::from_rows(const std::vector<std::vector<float>>& rows) {
  PointSet ps;
  if (rows.empty()) return ps;
  ps.dim = rows.front().size();
  ps.values.reserve(rows.size() * ps.dim);
  for (const auto& r : rows) {
    if (r.size() != ps.dim) {
      throw Error(ErrorKind::kShape, "vector of length " + std::to_string(r.size()) +
                                         " in a set of dimension " + std::to_string(ps.dim));
    }
    ps.values.insert(ps.values.end(), r.begin(), r.end());
  }
  return ps;
}

double squared_distance(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw Error(ErrorKind::kShape, "squared_distance: dimension mismatch");
  double d = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    double t = static_cast<double>(a[j]) - static_cast<double>(b[j]);
    d += t * t;
  }
  return d;
}

FitResult kmeans_fit(const PointSet& points, const KMeansOptions& options) {
  const std::size_t n = points.size(), dim = points.dim, k = options.k;
  if (n == 0 || dim == 0) throw Error(ErrorKind::kShape, "kmeans_fit: empty point set");
  if (points.values.size() != n * dim) throw Error(ErrorKind::kShape, "kmeans_fit: ragged point set");
  if (k == 0) throw Error(ErrorKind::kInfeasible, "kmeans_fit: k must be positive");
  if (options.max_iter == 0) throw Error(ErrorKind::kConfig, "kmeans_fit: max_iter must be positive");
  if (!all_finite(points.values)) throw Error(ErrorKind::kNonFinite, "kmeans_fit: non-finite input");
  std::size_t distinct = count_distinct(points, k);
  if (distinct < k) {
    throw Error(ErrorKind::kInfeasible, "k=" + std::to_string(k) + " exceeds the " +
                                            std::to_string(distinct) + " distinct vectors");
  }

  Rng rng(static_cast<std::uint64_t>(options.seed));
  std::vector<double> centroids = kmeanspp_init(points, k, rng);
  std::vector<Nearest> nearest_of(n);
  FitResult result;
  std::uint32_t iterations = 0;

  for (std::uint32_t it = 0; it < options.max_iter; ++it) {
    ++iterations;
    parallel_for(n, [&](std::size_t i) { nearest_of[i] = nearest(points.row(i), centroids, k); });
    double objective = 0.0;
    for (const auto& nb : nearest_of) objective += nb.distance;
    result.inertia_trace.push_back(objective);

    std::vector<double> sums(k * dim, 0.0);
    std::vector<std::size_t> sizes(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto c = nearest_of[i].index;
      ++sizes[c];
      auto r = points.row(i);
      for (std::size_t j = 0; j < dim; ++j) sums[c * dim + j] += r[j];
    }
    std::vector<double> updated(k * dim);
    std::vector<double> residual(n);
    for (std::size_t i = 0; i < n; ++i) residual[i] = nearest_of[i].distance;
    for (std::size_t c = 0; c < k; ++c) {
      if (sizes[c] > 0) {
        for (std::size_t j = 0; j < dim; ++j) {
          updated[c * dim + j] = sums[c * dim + j] / static_cast<double>(sizes[c]);
        }
        continue;
      }
      // Empty cluster: move to the worst-served point; lowest index on ties.
      std::size_t far = static_cast<std::size_t>(
          std::max_element(residual.begin(), residual.end()) - residual.begin());
      auto r = points.row(far);
      std::copy(r.begin(), r.end(), updated.begin() + static_cast<std::ptrdiff_t>(c * dim));
      residual[far] = 0.0;
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        double t = updated[c * dim + j] - centroids[c * dim + j];
        s += t * t;
      }
      shift = std::max(shift, std::sqrt(s));
    }
    centroids = std::move(updated);
    if (shift < options.tol || shift == 0.0) break;
  }

  Codebook& cb = result.codebook;
  cb.k = static_cast<std::uint32_t>(k);
  cb.dim = static_cast<std::uint32_t>(dim);
  cb.centroids.assign(centroids.begin(), centroids.end());
  cb.seed = options.seed;
  cb.iterations_run = iterations;
  result.assignments.resize(n);
  std::vector<double> dist(n);
  parallel_for(n, [&](std::size_t i) {
    auto c = assign(cb, points.row(i));
    result.assignments[i] = c;
    dist[i] = squared_distance(points.row(i), cb.centroid(c));
  });
  cb.inertia = std::accumulate(dist.begin(), dist.end(), 0.0);
  return result;
}

std::uint32_t assign(const Codebook& codebook, std::span<const float> vector) {
  if (vector.size() != codebook.dim) {
    throw Error(ErrorKind::kShape, "assign: vector dim " + std::to_string(vector.size()) +
                                       " != codebook dim " + std::to_string(codebook.dim));
  }
  std::uint32_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::uint32_t c = 0; c < codebook.k; ++c) {
    double d = squared_distance(vector, codebook.centroid(c));
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

double inertia(const Codebook& codebook, const PointSet& points) {
  if (points.size() > 0 && points.dim != codebook.dim) {
    throw Error(ErrorKind::kShape, "inertia: point dim " + std::to_string(points.dim) +
                                       " != codebook dim " + std::to_string(codebook.dim));
  }
  std::vector<double> dist(points.size());
  parallel_for(points.size(), [&](std::size_t i) {
    dist[i] = squared_distance(points.row(i), codebook.centroid(assign(codebook, points.row(i))));
  });
  return std::accumulate(dist.begin(), dist.end(), 0.0);
}

void save_codebook(const Codebook& cb, const std::filesystem::path& path) {
  if (cb.centroids.size() != static_cast<std::size_t>(cb.k) * cb.dim) {
    throw Error(ErrorKind::kShape, "save_codebook: centroid storage does not match k x dim");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  binio::write_bytes(out, {kMagic, 4});
  binio::write_u32(out, kCodebookVersion);
  binio::write_u32(out, cb.k);
  binio::write_u32(out, cb.dim);
  binio::write_i64(out, cb.seed);
  binio::write_u32(out, cb.iterations_run);
  binio::write_f64(out, cb.inertia);
  binio::write_bytes(out, {reinterpret_cast<const char*>(cb.centroids.data()),
                           cb.centroids.size() * sizeof(float)});
  if (!out) throw Error(ErrorKind::kIo, "write failure on " + path.string());
}

Codebook load_codebook(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot read " + path.string());
  binio::Reader reader(in, path.string());
  if (reader.bytes(4) != std::string_view(kMagic, 4)) {
    throw Error(ErrorKind::kFormat, path.string() + ": bad magic, expected SCBK");
  }
  if (auto v = reader.u32(); v != kCodebookVersion) {
    throw Error(ErrorKind::kFormat, path.string() + ": unsupported version " + std::to_string(v));
  }
  Codebook cb;
  cb.k = reader.u32();
  cb.dim = reader.u32();
  cb.seed = reader.i64();
  cb.iterations_run = reader.u32();
  cb.inertia = reader.f64();
  if (cb.k == 0 || cb.dim == 0) throw Error(ErrorKind::kFormat, path.string() + ": empty codebook");
  cb.centroids.resize(static_cast<std::size_t>(cb.k) * cb.dim);
  reader.f32_array(cb.centroids);
  if (!reader.at_end()) {
    throw Error(ErrorKind::kFormat, path.string() + ": trailing bytes at offset " +
                                        std::to_string(reader.offset()));
  }
  if (!all_finite(cb.centroids)) throw Error(ErrorKind::kFormat, path.string() + ": non-finite centroid");
  return cb;
}

}  // namespace multibert::codebook
