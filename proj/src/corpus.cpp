#include "multibert/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"
#include "multibert/common.hpp"

namespace multibert::corpus {

using nlohmann::json;

namespace {

// Goodreads dumps store most scalars as strings, so numeric and boolean
// fields accept either the native JSON type or a string spelling of it.
struct Malformed {};

const json& require(const json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end()) throw Malformed{};
  return *it;
}

std::string as_string(const json& v) {
  if (!v.is_string()) throw Malformed{};
  return v.get<std::string>();
}

std::optional<std::string> as_nullable_string(const json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return std::nullopt;
  return as_string(*it);
}

std::int64_t as_count(const json& v) {
  std::int64_t out = 0;
  if (v.is_number_integer()) {
    out = v.get<std::int64_t>();
  } else if (v.is_number_float()) {
    double d = v.get<double>();
    if (d != static_cast<double>(static_cast<std::int64_t>(d))) throw Malformed{};
    out = static_cast<std::int64_t>(d);
  } else if (v.is_string()) {
    auto s = v.get<std::string>();
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    if (ec != std::errc{} || ptr != s.data() + s.size()) throw Malformed{};
  } else {
    throw Malformed{};
  }
  if (out < 0) throw Malformed{};
  return out;
}

double as_real(const json& v) {
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) {
    auto s = v.get<std::string>();
    try {
      std::size_t used = 0;
      double d = std::stod(s, &used);
      if (used != s.size()) throw Malformed{};
      return d;
    } catch (const std::logic_error&) {
      throw Malformed{};
    }
  }
  throw Malformed{};
}

std::optional<double> as_nullable_real(const json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return std::nullopt;
  // Goodreads writes "" for an unknown rating.
  if (it->is_string() && it->get<std::string>().empty()) return std::nullopt;
  return as_real(*it);
}

bool as_bool(const json& v) {
  if (v.is_boolean()) return v.get<bool>();
  if (v.is_string()) {
    auto s = v.get<std::string>();
    if (s == "true") return true;
    if (s == "false" || s.empty()) return false;
  }
  throw Malformed{};
}

std::string lowercase(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

bool is_upper(char c) { return c >= 'A' && c <= 'Z'; }

bool is_terminator(char c) { return c == '.' || c == '!' || c == '?'; }

// True when text[0..end) ends with an abbreviation that starts at a word
// boundary.
bool ends_with_abbreviation(std::string_view text, std::size_t end) {
  for (std::string_view abbr : kAbbreviations) {
    if (end < abbr.size()) continue;
    std::size_t start = end - abbr.size();
    if (text.substr(start, abbr.size()) != abbr) continue;
    if (start == 0 || is_space(text[start - 1])) return true;
  }
  return false;
}

std::string collapse_whitespace(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool pending_space = false;
  for (char c : s) {
    if (is_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

}  // namespace

std::optional<BookRecord> parse_book(std::string_view line) {
  json obj = json::parse(line, nullptr, /*allow_exceptions=*/false);
  if (!obj.is_object()) return std::nullopt;
  try {
    BookRecord rec;
    rec.book_id = as_string(require(obj, "book_id"));
    if (rec.book_id.empty()) return std::nullopt;
    rec.title = as_string(require(obj, "title"));
    rec.description = as_nullable_string(obj, "description");
    for (const auto& a : require(obj, "authors")) {
      // Goodreads lists authors as {"author_id": ..., "role": ...} objects.
      if (a.is_object()) {
        rec.authors.push_back(as_string(require(a, "author_id")));
      } else {
        rec.authors.push_back(as_string(a));
      }
    }
    rec.language_code = as_nullable_string(obj, "language_code");
    rec.is_ebook = as_bool(require(obj, "is_ebook"));
    rec.average_rating = as_nullable_real(obj, "average_rating");
    if (rec.average_rating && (*rec.average_rating < 0.0 || *rec.average_rating > 5.0)) {
      return std::nullopt;
    }
    rec.ratings_count = as_count(require(obj, "ratings_count"));
    const json& shelves = require(obj, "popular_shelves");
    if (!shelves.is_array()) return std::nullopt;
    for (const auto& s : shelves) {
      if (!s.is_object()) return std::nullopt;
      rec.shelves.push_back({as_string(require(s, "name")), as_count(require(s, "count"))});
    }
    if (auto it = obj.find("reviews"); it != obj.end()) {
      for (const auto& r : *it) rec.reviews.push_back(as_string(r));
    }
    if (auto it = obj.find("genres"); it != obj.end()) {
      for (const auto& g : *it) rec.genres.insert(as_string(g));
    }
    return rec;
  } catch (const Malformed&) {
    return std::nullopt;
  } catch (const json::exception&) {
    return std::nullopt;
  }
}

LoadResult load_books(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot read books file " + path.string());
  LoadResult result;
  std::unordered_set<std::string> seen;
  std::string line;
  while (std::getline(in, line)) {
    if (collapse_whitespace(line).empty()) continue;
    auto rec = parse_book(line);
    if (!rec || !seen.insert(rec->book_id).second) {
      ++result.skipped;
      continue;
    }
    result.records.push_back(std::move(*rec));
  }
  if (in.bad()) throw Error(ErrorKind::kIo, "read failure on " + path.string());
  if (result.records.empty()) {
    throw Error(ErrorKind::kEmptyCorpus, "no well-formed book records in " + path.string());
  }
  return result;
}

ReviewLoadResult load_reviews(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot read reviews file " + path.string());
  ReviewLoadResult result;
  std::string line;
  while (std::getline(in, line)) {
    if (collapse_whitespace(line).empty()) continue;
    json obj = json::parse(line, nullptr, false);
    try {
      if (!obj.is_object()) throw Malformed{};
      Review r;
      r.book_id = as_string(require(obj, "book_id"));
      r.review_text = as_string(require(obj, "review_text"));
      r.rating = as_real(require(obj, "rating"));
      r.n_votes = as_count(require(obj, "n_votes"));
      result.reviews.push_back(std::move(r));
    } catch (const Malformed&) {
      ++result.skipped;
    } catch (const json::exception&) {
      ++result.skipped;
    }
  }
  if (in.bad()) throw Error(ErrorKind::kIo, "read failure on " + path.string());
  return result;
}

MergeResult merge_reviews(std::vector<BookRecord> books, const std::vector<Review>& reviews) {
  std::unordered_map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < books.size(); ++i) {
    by_id.emplace(books[i].book_id, i);
    books[i].reviews.clear();
  }
  MergeResult result;
  for (const auto& r : reviews) {
    auto it = by_id.find(r.book_id);
    if (it == by_id.end()) {
      ++result.orphans;
      continue;
    }
    books[it->second].reviews.push_back(r.review_text);
  }
  result.books = std::move(books);
  return result;
}

std::vector<BookRecord> fill_defaults(std::vector<BookRecord> records,
                                      const FieldDefaults& defaults) {
  auto missing = [](const char* field) {
    return Error(ErrorKind::kConfig, std::string("no default configured for null field ") + field);
  };
  for (auto& r : records) {
    if (!r.description) {
      if (!defaults.description) throw missing("description");
      r.description = defaults.description;
    }
    if (!r.language_code) {
      if (!defaults.language_code) throw missing("language_code");
      r.language_code = defaults.language_code;
    }
    if (!r.average_rating) {
      if (!defaults.average_rating) throw missing("average_rating");
      r.average_rating = defaults.average_rating;
    }
  }
  return records;
}

std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  auto emit = [&](std::size_t end) {
    std::string s = collapse_whitespace(text.substr(start, end - start));
    if (!s.empty()) out.push_back(std::move(s));
    start = end;
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (!is_terminator(text[i])) continue;
    std::size_t end = i + 1;
    std::size_t j = end;
    while (j < text.size() && is_space(text[j])) ++j;
    bool boundary = (j == text.size()) || (j > end && is_upper(text[j]));
    if (!boundary || ends_with_abbreviation(text, end)) continue;
    emit(end);
  }
  emit(text.size());
  return out;
}

std::set<std::string> derive_genres(const BookRecord& record, const GenreConfig& config) {
  std::set<std::string> vocab;
  for (const auto& g : config.vocabulary) vocab.insert(lowercase(g));
  std::set<std::string> genres;
  for (const auto& shelf : record.shelves) {
    std::string name = lowercase(shelf.name);
    if (shelf.count >= config.min_count && vocab.count(name)) genres.insert(std::move(name));
  }
  return genres;
}

void label_genres(std::vector<BookRecord>& records, const GenreConfig& config) {
  for (auto& r : records) r.genres = derive_genres(r, config);
}

std::string document_text(const BookRecord& record, bool include_reviews) {
  std::string text = record.description.value_or("");
  if (include_reviews) {
    for (const auto& r : record.reviews) {
      if (!text.empty()) text.push_back(' ');
      text += r;
    }
  }
  return text;
}

std::string tfidf_text(const BookRecord& record, bool include_reviews) {
  return record.title + " " + document_text(record, include_reviews);
}

std::optional<Document> make_document(const BookRecord& record, bool include_reviews) {
  auto sentences = split_sentences(document_text(record, include_reviews));
  if (sentences.empty()) return std::nullopt;
  return Document{record.book_id, std::move(sentences)};
}

std::string to_json_line(const BookRecord& r) {
  json obj;
  obj["book_id"] = r.book_id;
  obj["title"] = r.title;
  obj["description"] = r.description ? json(*r.description) : json(nullptr);
  obj["authors"] = r.authors;
  obj["language_code"] = r.language_code ? json(*r.language_code) : json(nullptr);
  obj["is_ebook"] = r.is_ebook;
  obj["average_rating"] = r.average_rating ? json(*r.average_rating) : json(nullptr);
  obj["ratings_count"] = r.ratings_count;
  json shelves = json::array();
  for (const auto& s : r.shelves) shelves.push_back({{"name", s.name}, {"count", s.count}});
  obj["popular_shelves"] = std::move(shelves);
  obj["reviews"] = r.reviews;
  obj["genres"] = r.genres;
  return obj.dump();
}

void write_corpus(const std::vector<BookRecord>& records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write corpus file " + path.string());
  for (const auto& r : records) out << to_json_line(r) << '\n';
  if (!out) throw Error(ErrorKind::kIo, "write failure on " + path.string());
}

}  // namespace multibert::corpus
