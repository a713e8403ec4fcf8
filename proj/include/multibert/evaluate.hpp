#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "multibert/embedstore.hpp"
#include "multibert/retrieval.hpp"

namespace multibert::evaluate {

enum class RatioRule { kQueryFraction, kJaccard, kOverlapCoefficient };

RatioRule parse_ratio_rule(std::string_view name);
std::string_view to_string(RatioRule rule);

struct RelevanceConfig {
  double threshold = 0.4;  // strict: a ratio must exceed it
  std::vector<std::string> vocabulary;
  RatioRule rule = RatioRule::kQueryFraction;

  void validate() const;
};

std::vector<std::uint8_t> one_hot_genres(const std::set<std::string>& genres,
                                         const std::vector<std::string>& vocabulary);

/// Overlap ratio of the one-hot genre vectors under the configured rule,
/// compared strictly against the threshold.
bool is_relevant(const std::set<std::string>& query, const std::set<std::string>& candidate,
                 const RelevanceConfig& config);

/// Relevant hits among the first k labels, divided by k even when fewer than
/// k results exist.
double precision_at_k(const std::vector<std::uint8_t>& relevance, int k);

// ---- TF-IDF baseline ----------------------------------------------------

/// Lowercases and splits on runs of non-alphanumeric bytes. Bytes >= 0x80 count
/// as word characters so UTF-8 words stay whole.
std::vector<std::string> tokenize(std::string_view text);

struct SparseRow {
  std::vector<std::uint32_t> terms;  // ascending term index
  std::vector<double> weights;
};

struct TfidfMatrix {
  std::vector<std::string> terms;  // sorted vocabulary
  std::vector<double> idf;
  std::vector<SparseRow> rows;

  /// Dense copy of one row, for tests and small corpora.
  std::vector<double> dense_row(std::size_t i) const;
};

/// tf = count / document length, idf = ln((1 + N) / (1 + df)) + 1,
/// rows L2-normalized.
TfidfMatrix tfidf_vectorize(const std::vector<std::string>& texts);

double sparse_dot(const SparseRow& a, const SparseRow& b);

class TfidfIndex {
 public:
  TfidfIndex(std::vector<std::string> ids, TfidfMatrix matrix);
  std::vector<retrieval::ScoredId> top_k(const std::string& query_id, std::size_t k) const;
  const std::vector<std::string>& ids() const { return ids_; }
  const TfidfMatrix& matrix() const { return matrix_; }

 private:
  std::vector<std::string> ids_;
  TfidfMatrix matrix_;
  std::map<std::string, std::size_t> by_id_;
};

/// Mean sentence vector per book, packaged as a retrieval index.
retrieval::EmbeddingIndex baseline_sentence_mean(
    const std::vector<embedstore::SentenceEmbeddingSet>& sets);

// ---- benchmark ----------------------------------------------------------

struct BookLabels {
  std::string book_id;
  std::set<std::string> genres;
};

struct ModelUnderTest {
  std::string name;
  std::vector<std::string> ids;  // coverage, checked against the corpus
  std::function<std::vector<retrieval::ScoredId>(const std::string& query, std::size_t k)> retrieve;
};

struct QueryDetail {
  std::string query_id;
  std::string model;
  std::size_t k = 0;
  double precision = 0.0;
  std::vector<std::string> retrieved;
};

struct EvalReport {
  std::vector<std::string> models;
  std::vector<std::size_t> ks;
  std::map<std::string, std::map<std::size_t, double>> precision;
  std::vector<QueryDetail> details;
  std::size_t n_books = 0;
  std::size_t n_queries = 0;
  std::size_t vocabulary_size = 0;
  /// Free-form extra lines printed under the table (e.g. cluster recall).
  std::vector<std::string> notes;
};

inline const std::vector<std::size_t> kDefaultKs = {5, 10, 25};

/// Every book with at least one genre is a query. Each model retrieves
/// max(ks) results once; precision at each k is averaged over queries. A query
/// the model cannot score (zero embedding) contributes precision 0.
EvalReport run_benchmark(const std::vector<BookLabels>& books, const std::vector<ModelUnderTest>& models,
                         const RelevanceConfig& config, const std::vector<std::size_t>& ks = kDefaultKs);

/// Aligned text table: one row per model, one P@k column per k.
std::string format_table(const EvalReport& report);

/// One JSON object per line: query_id, model, k, precision, retrieved.
void write_details(const EvalReport& report, const std::filesystem::path& path);

/// Closed-form expected P@k of a uniformly random ranking: per query the
/// fraction of other books that are relevant, averaged over queries. The
/// value does not depend on k.
double expected_random_precision(const std::vector<BookLabels>& books, const RelevanceConfig& config);

/// Mean P@k of seeded random permutations, for cross-checking the closed form.
double simulated_random_precision(const std::vector<BookLabels>& books, const RelevanceConfig& config,
                                  std::size_t k, std::uint64_t seed);

}  // namespace multibert::evaluate
