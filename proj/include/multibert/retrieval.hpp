#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "multibert/codebook.hpp"

namespace multibert::retrieval {

struct ScoredId {
  std::string book_id;
  double score = 0.0;

  bool operator==(const ScoredId&) const = default;
};

/// dot(a, b) / (|a| |b|) clamped to [-1, 1]. Throws undefined-similarity on a
/// zero vector and shape on a length mismatch.
double cosine(std::span<const float> a, std::span<const float> b);

/// Sorts by descending score, ascending book_id on ties, and keeps the first k.
void rank(std::vector<ScoredId>& candidates, std::size_t k);

struct ClusterIndex {
  codebook::Codebook codebook;
  std::vector<std::uint32_t> cluster_of;           // per row
  std::vector<std::vector<std::size_t>> members;   // per cluster, ascending row order
};

class EmbeddingIndex {
 public:
  EmbeddingIndex() = default;
  /// Throws a contract error on duplicate ids or a ragged matrix.
  EmbeddingIndex(std::vector<std::string> ids, std::size_t dim, std::vector<float> matrix);

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  const std::vector<std::string>& ids() const { return ids_; }
  std::span<const float> row(std::size_t i) const { return {matrix_.data() + i * dim_, dim_}; }
  double norm(std::size_t i) const { return norms_[i]; }
  std::optional<std::size_t> find(const std::string& book_id) const;

  const std::optional<ClusterIndex>& clusters() const { return clusters_; }
  void set_clusters(ClusterIndex clusters);

 private:
  std::vector<std::string> ids_;
  std::size_t dim_ = 0;
  std::vector<float> matrix_;
  std::vector<double> norms_;
  std::unordered_map<std::string, std::size_t> by_id_;
  std::optional<ClusterIndex> clusters_;
};

/// Exact cosine scan: the k best entries other than the query. Rows with zero
/// norm are never returned.
std::vector<ScoredId> top_k(const EmbeddingIndex& index, const std::string& query_id, std::size_t k);

struct ClusterOptions {
  std::uint32_t n_clusters = 0;  // 0 selects ceil(sqrt(n))
  std::int64_t seed = 0;
  std::uint32_t max_iter = 100;
  double tol = 1e-4;
};

std::uint32_t default_cluster_count(std::size_t n);

/// k-means over the L2-normalized rows; records per-cluster membership.
void build_cluster_index(EmbeddingIndex& index, const ClusterOptions& options);

/// Cosine ranking restricted to the query's cluster. When the cluster holds
/// fewer than k other members, whole clusters are added in order of their
/// centroid's distance to the normalized query until k candidates exist or
/// the corpus is exhausted.
std::vector<ScoredId> cluster_retrieve(const EmbeddingIndex& index, const std::string& query_id, std::size_t k);

/// Fraction of `exact` ids that also appear in `approximate`.
double recall(const std::vector<ScoredId>& approximate, const std::vector<ScoredId>& exact);

/// TSV lines "rank\tbook_id\tscore" with 9 significant digits, plus a title
/// column when titles are supplied.
std::string format_results(const std::vector<ScoredId>& results,
                           const std::map<std::string, std::string>* titles = nullptr);

}  // namespace multibert::retrieval
