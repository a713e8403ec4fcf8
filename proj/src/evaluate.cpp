#include "multibert/evaluate.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "json.hpp"
#include "multibert/common.hpp"
#include "multibert/docvec.hpp"

namespace multibert::evaluate {

RatioRule parse_ratio_rule(std::string_view name) {
  if (name == "query-fraction") return RatioRule::kQueryFraction;
  if (name == "jaccard") return RatioRule::kJaccard;
  if (name == "overlap-coefficient") return RatioRule::kOverlapCoefficient;
  throw Error(ErrorKind::kConfig, "unknown ratio rule '" + std::string(name) + "'");
}

std::string_view to_string(RatioRule rule) {
  switch (rule) {
    case RatioRule::kQueryFraction: return "query-fraction";
    case RatioRule::kJaccard: return "jaccard";
    case RatioRule::kOverlapCoefficient: return "overlap-coefficient";
  }
  return "unknown";
}

void RelevanceConfig::validate() const {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw Error(ErrorKind::kConfig, "threshold must lie in (0, 1]");
  if (vocabulary.empty()) throw Error(ErrorKind::kConfig, "genre vocabulary is empty");
  std::set<std::string> unique(vocabulary.begin(), vocabulary.end());
  if (unique.size() != vocabulary.size()) throw Error(ErrorKind::kConfig, "genre vocabulary has duplicates");
}

std::vector<std::uint8_t> one_hot_genres(const std::set<std::string>& genres,
                                         const std::vector<std::string>& vocabulary) {
  std::vector<std::uint8_t> bits(vocabulary.size(), 0);
  std::size_t matched = 0;
  for (std::size_t i = 0; i < vocabulary.size(); ++i) {
    if (genres.count(vocabulary[i])) {
      bits[i] = 1;
      ++matched;
    }
  }
  if (matched != genres.size()) {
    for (const auto& g : genres) {
      if (std::find(vocabulary.begin(), vocabulary.end(), g) == vocabulary.end()) {
        throw Error(ErrorKind::kContract, "genre '" + g + "' is not in the vocabulary");
      }
    }
  }
  return bits;
}

bool is_relevant(const std::set<std::string>& query, const std::set<std::string>& candidate,
                 const RelevanceConfig& config) {
  if (query.empty()) throw Error(ErrorKind::kContract, "query has no genres");
  auto q = one_hot_genres(query, config.vocabulary);
  auto c = one_hot_genres(candidate, config.vocabulary);
  std::size_t both = 0, either = 0, nq = 0, nc = 0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    both += q[i] & c[i];
    either += q[i] | c[i];
    nq += q[i];
    nc += c[i];
  }
  double ratio = 0.0;
  switch (config.rule) {
    case RatioRule::kQueryFraction:
      ratio = static_cast<double>(both) / static_cast<double>(nq);
      break;
    case RatioRule::kJaccard:
      ratio = static_cast<double>(both) / static_cast<double>(either);
      break;
    case RatioRule::kOverlapCoefficient:
      ratio = nc == 0 ? 0.0 : static_cast<double>(both) / static_cast<double>(std::min(nq, nc));
      break;
  }
  return ratio > config.threshold;
}

double precision_at_k(const std::vector<std::uint8_t>& relevance, int k) {
  if (k <= 0) throw Error(ErrorKind::kContract, "precision_at_k requires k > 0");
  std::size_t limit = std::min(relevance.size(), static_cast<std::size_t>(k));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < limit; ++i) hits += relevance[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(k);
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c) || c >= 0x80) {
      cur.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::vector<double> TfidfMatrix::dense_row(std::size_t i) const {
  std::vector<double> d(terms.size(), 0.0);
  const auto& r = rows[i];
  for (std::size_t j = 0; j < r.terms.size(); ++j) d[r.terms[j]] = r.weights[j];
  return d;
}

TfidfMatrix tfidf_vectorize(const std::vector<std::string>& texts) {
  if (texts.empty()) throw Error(ErrorKind::kEmptyCorpus, "tfidf_vectorize: empty corpus");
  std::vector<std::map<std::string, std::size_t>> counts(texts.size());
  std::vector<std::size_t> lengths(texts.size());
  std::map<std::string, std::size_t> df;
  for (std::size_t d = 0; d < texts.size(); ++d) {
    auto tokens = tokenize(texts[d]);
    lengths[d] = tokens.size();
    for (auto& t : tokens) ++counts[d][t];
    for (const auto& [term, _] : counts[d]) ++df[term];
  }
  if (df.empty()) throw Error(ErrorKind::kEmptyVocabulary, "tfidf_vectorize: no tokens in any document");

  TfidfMatrix m;
  std::map<std::string, std::uint32_t> index;
  const double n_docs = static_cast<double>(texts.size());
  for (const auto& [term, freq] : df) {
    index.emplace(term, static_cast<std::uint32_t>(m.terms.size()));
    m.terms.push_back(term);
    m.idf.push_back(std::log((1.0 + n_docs) / (1.0 + static_cast<double>(freq))) + 1.0);
  }
  m.rows.resize(texts.size());
  for (std::size_t d = 0; d < texts.size(); ++d) {
    auto& row = m.rows[d];
    double norm2 = 0.0;
    for (const auto& [term, count] : counts[d]) {
      std::uint32_t t = index.at(term);
      double w = static_cast<double>(count) / static_cast<double>(lengths[d]) * m.idf[t];
      row.terms.push_back(t);
      row.weights.push_back(w);
      norm2 += w * w;
    }
    if (norm2 > 0.0) {
      double inv = 1.0 / std::sqrt(norm2);
      for (auto& w : row.weights) w *= inv;
    }
  }
  return m;
}

double sparse_dot(const SparseRow& a, const SparseRow& b) {
  double s = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.terms.size() && j < b.terms.size()) {
    if (a.terms[i] == b.terms[j]) {
      s += a.weights[i++] * b.weights[j++];
    } else if (a.terms[i] < b.terms[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  return s;
}

TfidfIndex::TfidfIndex(std::vector<std::string> ids, TfidfMatrix matrix)
    : ids_(std::move(ids)), matrix_(std::move(matrix)) {
  if (ids_.size() != matrix_.rows.size()) throw Error(ErrorKind::kContract, "tfidf ids and rows differ in count");
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (!by_id_.emplace(ids_[i], i).second) throw Error(ErrorKind::kContract, "duplicate id '" + ids_[i] + "'");
  }
}

std::vector<retrieval::ScoredId> TfidfIndex::top_k(const std::string& query_id, std::size_t k) const {
  auto it = by_id_.find(query_id);
  if (it == by_id_.end()) throw Error(ErrorKind::kNotFound, "book '" + query_id + "' is not in the index");
  const auto& q = matrix_.rows[it->second];
  if (q.terms.empty()) throw Error(ErrorKind::kUndefinedSimilarity, "book '" + query_id + "' has no terms");
  std::vector<retrieval::ScoredId> scored;
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (i == it->second || matrix_.rows[i].terms.empty()) continue;
    // Rows are unit-norm, so the dot product is the cosine.
    scored.push_back({ids_[i], std::clamp(sparse_dot(q, matrix_.rows[i]), -1.0, 1.0)});
  }
  retrieval::rank(scored, k);
  return scored;
}

retrieval::EmbeddingIndex baseline_sentence_mean(const std::vector<embedstore::SentenceEmbeddingSet>& sets) {
  std::vector<std::string> ids;
  std::vector<float> matrix;
  std::size_t dim = sets.empty() ? 0 : sets.front().dim;
  for (const auto& s : sets) {
    auto v = docvec::sentence_docvec(s);
    ids.push_back(s.book_id);
    matrix.insert(matrix.end(), v.begin(), v.end());
  }
  return {std::move(ids), dim, std::move(matrix)};
}

EvalReport run_benchmark(const std::vector<BookLabels>& books, const std::vector<ModelUnderTest>& models,
                         const RelevanceConfig& config, const std::vector<std::size_t>& ks) {
  config.validate();
  if (ks.empty() || std::find(ks.begin(), ks.end(), 0u) != ks.end()) {
    throw Error(ErrorKind::kContract, "ks must be nonempty and positive");
  }
  const std::size_t max_k = *std::max_element(ks.begin(), ks.end());
  if (books.size() < max_k + 1) {
    throw Error(ErrorKind::kContract, "benchmark needs at least " + std::to_string(max_k + 1) + " books, got " +
                                          std::to_string(books.size()));
  }
  std::map<std::string, const BookLabels*> by_id;
  for (const auto& b : books) by_id[b.book_id] = &b;
  for (const auto& m : models) {
    std::set<std::string> covered(m.ids.begin(), m.ids.end());
    if (covered.size() != by_id.size() ||
        !std::all_of(by_id.begin(), by_id.end(), [&](const auto& kv) { return covered.count(kv.first) > 0; })) {
      throw Error(ErrorKind::kContract, "model '" + m.name + "' does not cover the benchmark's book ids");
    }
  }

  EvalReport report;
  report.ks = ks;
  report.n_books = books.size();
  report.vocabulary_size = config.vocabulary.size();
  std::vector<const BookLabels*> queries;
  for (const auto& b : books) {
    if (!b.genres.empty()) queries.push_back(&b);
  }
  report.n_queries = queries.size();

  for (const auto& m : models) {
    report.models.push_back(m.name);
    // Per query: retrieved ids and relevance labels, filled in parallel.
    std::vector<std::vector<std::string>> retrieved(queries.size());
    std::vector<std::vector<std::uint8_t>> labels(queries.size());
    parallel_for(queries.size(), [&](std::size_t qi) {
      const auto* q = queries[qi];
      std::vector<retrieval::ScoredId> results;
      try {
        results = m.retrieve(q->book_id, max_k);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::kUndefinedSimilarity) throw;
      }
      for (const auto& r : results) {
        retrieved[qi].push_back(r.book_id);
        labels[qi].push_back(is_relevant(q->genres, by_id.at(r.book_id)->genres, config) ? 1 : 0);
      }
    });
    for (std::size_t k : ks) {
      double total = 0.0;
      for (std::size_t qi = 0; qi < queries.size(); ++qi) {
        double p = precision_at_k(labels[qi], static_cast<int>(k));
        total += p;
        QueryDetail d{queries[qi]->book_id, m.name, k, p, {}};
        std::size_t keep = std::min(k, retrieved[qi].size());
        d.retrieved.assign(retrieved[qi].begin(), retrieved[qi].begin() + static_cast<std::ptrdiff_t>(keep));
        report.details.push_back(std::move(d));
      }
      report.precision[m.name][k] = queries.empty() ? 0.0 : total / static_cast<double>(queries.size());
    }
  }
  return report;
}

std::string format_table(const EvalReport& report) {
  std::size_t width = std::string("Models").size();
  for (const auto& m : report.models) width = std::max(width, m.size());
  std::ostringstream out;
  char cell[32];
  out << "Models" << std::string(width - 6, ' ');
  for (auto k : report.ks) {
    std::snprintf(cell, sizeof cell, "  %8s", ("P@" + std::to_string(k)).c_str());
    out << cell;
  }
  out << '\n';
  for (const auto& m : report.models) {
    out << m << std::string(width - m.size(), ' ');
    for (auto k : report.ks) {
      std::snprintf(cell, sizeof cell, "  %8.4f", report.precision.at(m).at(k));
      out << cell;
    }
    out << '\n';
  }
  out << "\nbooks: " << report.n_books << "  queries: " << report.n_queries
      << "  genre vocabulary: " << report.vocabulary_size << '\n';
  for (const auto& note : report.notes) out << note << '\n';
  return out.str();
}

void write_details(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  for (const auto& d : report.details) {
    nlohmann::ordered_json row;
    row["query_id"] = d.query_id;
    row["model"] = d.model;
    row["k"] = d.k;
    row["precision"] = d.precision;
    row["retrieved"] = d.retrieved;
    out << row.dump() << '\n';
  }
  if (!out) throw Error(ErrorKind::kIo, "write failure on " + path.string());
}

double expected_random_precision(const std::vector<BookLabels>& books, const RelevanceConfig& config) {
  double total = 0.0;
  std::size_t queries = 0;
  for (const auto& q : books) {
    if (q.genres.empty()) continue;
    std::size_t relevant = 0;
    for (const auto& c : books) {
      if (&c != &q && is_relevant(q.genres, c.genres, config)) ++relevant;
    }
    total += static_cast<double>(relevant) / static_cast<double>(books.size() - 1);
    ++queries;
  }
  return queries ? total / static_cast<double>(queries) : 0.0;
}

double simulated_random_precision(const std::vector<BookLabels>& books, const RelevanceConfig& config,
                                  std::size_t k, std::uint64_t seed) {
  Rng rng(seed);
  double total = 0.0;
  std::size_t queries = 0;
  for (std::size_t qi = 0; qi < books.size(); ++qi) {
    const auto& q = books[qi];
    if (q.genres.empty()) continue;
    std::vector<std::size_t> others;
    for (std::size_t i = 0; i < books.size(); ++i) {
      if (i != qi) others.push_back(i);
    }
    shuffle(others, rng);
    std::vector<std::uint8_t> labels;
    for (std::size_t i = 0; i < std::min(k, others.size()); ++i) {
      labels.push_back(is_relevant(q.genres, books[others[i]].genres, config) ? 1 : 0);
    }
    total += precision_at_k(labels, static_cast<int>(k));
    ++queries;
  }
  return queries ? total / static_cast<double>(queries) : 0.0;
}

}  // namespace multibert::evaluate
