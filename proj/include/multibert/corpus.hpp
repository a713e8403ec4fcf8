#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace multibert::corpus {

struct Shelf {
  std::string name;
  std::int64_t count = 0;

  bool operator==(const Shelf&) const = default;
};

/// One book merged with its reviews. The three optional fields may be null
/// in raw input; fill_defaults() guarantees they are set.
struct BookRecord {
  std::string book_id;
  std::string title;
  std::optional<std::string> description;
  std::vector<std::string> authors;
  std::optional<std::string> language_code;
  bool is_ebook = false;
  std::optional<double> average_rating;
  std::int64_t ratings_count = 0;
  std::vector<Shelf> shelves;
  std::vector<std::string> reviews;
  std::set<std::string> genres;

  bool operator==(const BookRecord&) const = default;
};

struct Review {
  std::string book_id;
  std::string review_text;
  double rating = 0.0;
  std::int64_t n_votes = 0;
};

/// A document admitted to the pipeline: its ordered, nonempty sentences.
struct Document {
  std::string book_id;
  std::vector<std::string> sentences;
};

struct LoadResult {
  std::vector<BookRecord> records;
  std::size_t skipped = 0;
};

struct ReviewLoadResult {
  std::vector<Review> reviews;
  std::size_t skipped = 0;
};

struct MergeResult {
  std::vector<BookRecord> books;
  std::size_t orphans = 0;
};

struct FieldDefaults {
  std::optional<std::string> description;
  std::optional<std::string> language_code;
  std::optional<double> average_rating;
};

struct GenreConfig {
  std::vector<std::string> vocabulary;
  std::int64_t min_count = 1;
};

/// Reads line-delimited JSON book records. Malformed lines (bad JSON, missing
/// or mistyped required fields, empty or duplicate book_id, negative counts)
/// are skipped and counted.
LoadResult load_books(const std::filesystem::path& path);

/// Parses one book line; returns nullopt when the line is malformed.
std::optional<BookRecord> parse_book(std::string_view line);

ReviewLoadResult load_reviews(const std::filesystem::path& path);

/// Each book's reviews are replaced by the texts of matching reviews in input
/// order, so merging twice with the same reviews is a no-op.
MergeResult merge_reviews(std::vector<BookRecord> books, const std::vector<Review>& reviews);

std::vector<BookRecord> fill_defaults(std::vector<BookRecord> records,
                                      const FieldDefaults& defaults);

/// Splits after '.', '!' or '?' when the mark is followed by whitespace and
/// an ASCII uppercase letter, or by optional whitespace and end of text.
/// A mark ending one of the abbreviations in kAbbreviations never splits.
/// Whitespace runs inside a sentence collapse to one space.
std::vector<std::string> split_sentences(std::string_view text);

inline constexpr std::string_view kAbbreviations[] = {"Mr.", "Mrs.", "Dr.", "St.", "vs."};

std::set<std::string> derive_genres(const BookRecord& record, const GenreConfig& config);

/// Derives genres for every record in place.
void label_genres(std::vector<BookRecord>& records, const GenreConfig& config);

/// Text that enters the embedding path: description, optionally followed by
/// the reviews.
std::string document_text(const BookRecord& record, bool include_reviews);

/// Text that enters the TF-IDF baseline: title, then document_text().
std::string tfidf_text(const BookRecord& record, bool include_reviews);

/// Returns nullopt for books with no sentences (empty description).
std::optional<Document> make_document(const BookRecord& record, bool include_reviews);

std::string to_json_line(const BookRecord& record);
void write_corpus(const std::vector<BookRecord>& records, const std::filesystem::path& path);

}  // namespace multibert::corpus
