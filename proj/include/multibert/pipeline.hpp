#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "multibert/codebook.hpp"
#include "multibert/corpus.hpp"
#include "multibert/docvec.hpp"
#include "multibert/encoder.hpp"
#include "multibert/evaluate.hpp"

namespace multibert::pipeline {

namespace fs = std::filesystem;

enum class RetrievalMode { kCosine, kCluster };

/// Everything a run needs. Defaults follow the published recipe where one
/// exists (k=200, 12 heads, 6 layers, batch 16, lr 1e-4, 512 positions,
/// threshold 0.4); the rest are artifact defaults documented in the README.
struct RunConfig {
  // paths
  std::optional<fs::path> books;
  std::optional<fs::path> reviews;
  std::optional<fs::path> embeddings;       // sentence "SEMB"; defaults to run_dir/sentences.semb
  std::optional<fs::path> sbert_documents;  // optional whole-document baseline vectors
  fs::path run_dir = "run";

  // corpus
  bool include_reviews = false;
  corpus::FieldDefaults defaults{std::string(""), std::string("eng"), 0.0};
  corpus::GenreConfig genres{{"adventure", "animals", "classics", "fairy-tales", "fantasy", "history", "humor",
                               "mystery", "non-fiction", "picture-books", "poetry", "science"},
                              1};

  // synthetic sentence embeddings
  bool synthetic = true;
  bool synthetic_correlated = true;
  std::uint32_t synthetic_dim = 64;
  std::int64_t synthetic_seed = 0;

  codebook::KMeansOptions kmeans;
  encoder::EncoderConfig encoder;  // vocab_size is derived from kmeans.k
  encoder::TrainConfig train;
  docvec::Pooling pooling = docvec::Pooling::kMean;

  RetrievalMode retrieval = RetrievalMode::kCosine;
  std::uint32_t n_clusters = 0;  // 0 selects ceil(sqrt(n))
  std::int64_t cluster_seed = 0;

  evaluate::RelevanceConfig relevance;  // vocabulary mirrors genres.vocabulary
  unsigned threads = 0;

  nlohmann::ordered_json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  /// Canonical digest of to_json().
  std::string digest() const;
};

/// The configuration with every default applied, as JSON.
nlohmann::ordered_json default_config_json();

/// Loads a config file (may be partial) over the defaults and applies
/// "dotted.key=value" overrides; values parse as JSON, falling back to strings.
RunConfig load_config(const std::optional<fs::path>& path, const std::vector<std::string>& overrides);

/// File names inside the run directory.
struct RunFiles {
  fs::path dir;
  fs::path corpus() const { return dir / "corpus.jsonl"; }
  fs::path sentences() const { return dir / "sentences.semb"; }
  fs::path codebook() const { return dir / "codebook.scbk"; }
  fs::path sequences() const { return dir / "sequences.tsv"; }
  fs::path checkpoint() const { return dir / "encoder.mbrt"; }
  fs::path loss() const { return dir / "loss.tsv"; }
  fs::path documents() const { return dir / "documents.semb"; }
  fs::path report() const { return dir / "report.txt"; }
  fs::path details() const { return dir / "details.jsonl"; }
  fs::path manifest() const { return dir / "manifest.json"; }
  fs::path config() const { return dir / "config.json"; }
};

struct IngestSummary {
  std::size_t records = 0;
  std::size_t skipped_books = 0;
  std::size_t reviews = 0;
  std::size_t skipped_reviews = 0;
  std::size_t orphan_reviews = 0;
};

IngestSummary cmd_ingest(const RunConfig& config, std::ostream& log);
/// Synthetic sentence embeddings for every admitted document of the corpus.
void cmd_embed_sentences(const RunConfig& config, std::ostream& log);
/// Writes "book_id TAB sentence" lines in document order.
void cmd_dump_sentences(const RunConfig& config, std::ostream& out);
codebook::Codebook cmd_build_codebook(const RunConfig& config, std::ostream& log);
std::vector<double> cmd_train(const RunConfig& config, bool resume, std::ostream& log);
void cmd_embed(const RunConfig& config, std::ostream& log);
std::vector<retrieval::ScoredId> cmd_recommend(const RunConfig& config, const std::string& query_id,
                                               std::size_t k, std::ostream& out);
evaluate::EvalReport cmd_evaluate(const RunConfig& config, std::ostream& log);
encoder::GradCheckResult cmd_gradcheck(double step, std::ostream& out);

/// The desk-scale encoder used by tests and the tiny gradient check.
encoder::EncoderConfig toy_encoder_config(std::uint32_t vocab_size);
encoder::EncoderConfig gradcheck_encoder_config();
/// Gradient-check fixture: the tiny config with N(0,1) embedding tables,
/// N(0, 1/fan_in) projections, N(0, 0.01) biases and layer-norm gains
/// 1 + 0.1 N(0,1). At the 0.02 training init, hidden 4 puts every layer-norm
/// input near zero and the 1e-3 central difference is dominated by its own
/// truncation error.
encoder::EncoderModel<double> gradcheck_model(std::uint64_t seed = 0);
/// Fixed batch for the gradient check: one sequence of length 4 over vocab 8.
encoder::ReconstructionBatch gradcheck_batch();

struct SyntheticCorpusOptions {
  std::size_t n_books = 500;
  std::vector<std::string> genres = {"fantasy", "mystery", "science", "history", "poetry"};
  std::uint64_t seed = 0;
  std::size_t min_sentences = 4;
  std::size_t max_sentences = 10;
};

/// Genre-structured books and reviews: book i belongs to genre i mod |genres|
/// (equal groups), carried by a popular shelf and by genre-specific words in
/// the description.
void write_synthetic_corpus(const SyntheticCorpusOptions& options, const fs::path& books,
                            const fs::path& reviews);

/// Records digests of every run artifact present plus the config digest.
void update_manifest(const RunConfig& config);

}  // namespace multibert::pipeline
