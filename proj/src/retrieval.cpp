#include "multibert/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <unordered_set>

#include "multibert/common.hpp"

namespace multibert::retrieval {

namespace {

double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) s += static_cast<double>(a[j]) * static_cast<double>(b[j]);
  return s;
}

double clamp_unit(double x) { return std::clamp(x, -1.0, 1.0); }

std::size_t require_query(const EmbeddingIndex& index, const std::string& query_id) {
  auto q = index.find(query_id);
  if (!q) throw Error(ErrorKind::kNotFound, "book '" + query_id + "' is not in the index");
  if (index.norm(*q) == 0.0) {
    throw Error(ErrorKind::kUndefinedSimilarity, "book '" + query_id + "' has a zero embedding");
  }
  return *q;
}

ScoredId score_row(const EmbeddingIndex& index, std::size_t query, std::size_t row) {
  double s = dot(index.row(query), index.row(row)) / (index.norm(query) * index.norm(row));
  return {index.ids()[row], clamp_unit(s)};
}

}  // namespace

double cosine(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw Error(ErrorKind::kShape, "cosine: dimension mismatch");
  double na = std::sqrt(dot(a, a)), nb = std::sqrt(dot(b, b));
  if (na == 0.0 || nb == 0.0) throw Error(ErrorKind::kUndefinedSimilarity, "cosine of a zero vector");
  return clamp_unit(dot(a, b) / (na * nb));
}

void rank(std::vector<ScoredId>& candidates, std::size_t k) {
  auto better = [](const ScoredId& a, const ScoredId& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.book_id < b.book_id;
  };
  if (k < candidates.size()) {
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k), candidates.end(),
                      better);
    candidates.resize(k);
  } else {
    std::sort(candidates.begin(), candidates.end(), better);
  }
}

EmbeddingIndex::EmbeddingIndex(std::vector<std::string> ids, std::size_t dim, std::vector<float> matrix)
    : ids_(std::move(ids)), dim_(dim), matrix_(std::move(matrix)) {
  if (matrix_.size() != ids_.size() * dim_) {
    throw Error(ErrorKind::kContract, "index matrix does not hold ids x dim values");
  }
  if (!all_finite(matrix_)) throw Error(ErrorKind::kNonFinite, "index matrix has non-finite values");
  norms_.resize(ids_.size());
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (!by_id_.emplace(ids_[i], i).second) {
      throw Error(ErrorKind::kContract, "duplicate id '" + ids_[i] + "' in index");
    }
    norms_[i] = std::sqrt(dot(row(i), row(i)));
  }
}

std::optional<std::size_t> EmbeddingIndex::find(const std::string& book_id) const {
  auto it = by_id_.find(book_id);
  if (it == by_id_.end()) return std::nullopt;
  return it->second;
}

void EmbeddingIndex::set_clusters(ClusterIndex clusters) {
  if (clusters.cluster_of.size() != size()) {
    throw Error(ErrorKind::kContract, "cluster assignment does not cover the index");
  }
  clusters_ = std::move(clusters);
}

std::vector<ScoredId> top_k(const EmbeddingIndex& index, const std::string& query_id, std::size_t k) {
  std::size_t q = require_query(index, query_id);
  std::vector<ScoredId> scored;
  scored.reserve(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (i == q || index.norm(i) == 0.0) continue;
    scored.push_back(score_row(index, q, i));
  }
  rank(scored, k);
  return scored;
}

std::uint32_t default_cluster_count(std::size_t n) {
  auto c = static_cast<std::uint32_t>(std::ceil(std::sqrt(static_cast<double>(n))));
  while (static_cast<std::size_t>(c) * c < n) ++c;
  while (c > 1 && static_cast<std::size_t>(c - 1) * (c - 1) >= n) --c;
  return std::max<std::uint32_t>(1, c);
}

void build_cluster_index(EmbeddingIndex& index, const ClusterOptions& options) {
  const std::size_t n = index.size();
  std::uint32_t k = options.n_clusters ? options.n_clusters : default_cluster_count(n);
  if (n == 0 || k > n) {
    throw Error(ErrorKind::kConfig, "cannot build " + std::to_string(k) + " clusters over " + std::to_string(n) +
                                        " documents");
  }
  codebook::PointSet points;
  points.dim = index.dim();
  points.values.resize(n * index.dim());
  for (std::size_t i = 0; i < n; ++i) {
    double inv = index.norm(i) > 0.0 ? 1.0 / index.norm(i) : 0.0;
    auto r = index.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) points.values[i * index.dim() + j] = static_cast<float>(r[j] * inv);
  }
  codebook::FitResult fit;
  try {
    fit = codebook::kmeans_fit(points, {k, options.max_iter, options.tol, options.seed});
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kInfeasible) throw Error(ErrorKind::kConfig, e.what());
    throw;
  }
  ClusterIndex ci;
  ci.codebook = std::move(fit.codebook);
  ci.cluster_of = std::move(fit.assignments);
  ci.members.resize(k);
  for (std::size_t i = 0; i < n; ++i) ci.members[ci.cluster_of[i]].push_back(i);
  index.set_clusters(std::move(ci));
}

std::vector<ScoredId> cluster_retrieve(const EmbeddingIndex& index, const std::string& query_id, std::size_t k) {
  if (!index.clusters()) throw Error(ErrorKind::kContract, "cluster index has not been built");
  std::size_t q = require_query(index, query_id);
  const auto& ci = *index.clusters();
  const std::uint32_t home = ci.cluster_of[q];

  std::vector<float> query(index.dim());
  auto qr = index.row(q);
  for (std::size_t j = 0; j < query.size(); ++j) query[j] = static_cast<float>(qr[j] / index.norm(q));
  std::vector<std::pair<double, std::uint32_t>> order;
  for (std::uint32_t c = 0; c < ci.codebook.k; ++c) {
    if (c == home) continue;
    order.emplace_back(codebook::squared_distance(query, ci.codebook.centroid(c)), c);
  }
  std::sort(order.begin(), order.end());

  std::vector<ScoredId> scored;
  auto take = [&](std::uint32_t c) {
    for (std::size_t i : ci.members[c]) {
      if (i == q || index.norm(i) == 0.0) continue;
      scored.push_back(score_row(index, q, i));
    }
  };
  take(home);
  for (std::size_t next = 0; scored.size() < k && next < order.size(); ++next) take(order[next].second);
  rank(scored, k);
  return scored;
}

double recall(const std::vector<ScoredId>& approximate, const std::vector<ScoredId>& exact) {
  if (exact.empty()) return 1.0;
  std::unordered_set<std::string> got;
  for (const auto& s : approximate) got.insert(s.book_id);
  std::size_t hit = 0;
  for (const auto& s : exact) hit += got.count(s.book_id);
  return static_cast<double>(hit) / static_cast<double>(exact.size());
}

std::string format_results(const std::vector<ScoredId>& results, const std::map<std::string, std::string>* titles) {
  std::string out;
  char score[64];
  for (std::size_t i = 0; i < results.size(); ++i) {
    std::snprintf(score, sizeof score, "%.9g", results[i].score);
    out += std::to_string(i + 1) + "\t" + results[i].book_id + "\t" + score;
    if (titles) {
      auto it = titles->find(results[i].book_id);
      out += "\t";
      if (it != titles->end()) out += it->second;
    }
    out += "\n";
  }
  return out;
}

}  // namespace multibert::retrieval
