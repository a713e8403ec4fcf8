#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace multibert {

enum class ErrorKind {
  kIo,
  kFormat,
  kEmptyCorpus,
  kConfig,
  kShape,
  kInfeasible,
  kContract,
  kNotFound,
  kEmptyDocument,
  kUndefinedSimilarity,
  kNonFinite,
  kEmptyVocabulary,
};

std::string_view to_string(ErrorKind kind);

/// Every failure raised by the library carries a kind so the CLI can emit a
/// one-line machine-parsable error.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message);

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Deterministic, platform-independent generator (splitmix64). Every seeded
/// draw in the project goes through this class so results never depend on
/// the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  /// Standard normal via Box-Muller (one draw per call, the sine branch is discarded).
  double normal();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

 private:
  std::uint64_t state_;
};

std::uint64_t splitmix64(std::uint64_t x);
/// FNV-1a 64-bit over raw bytes.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis = 0xcbf29ce484222325ULL);

/// Fisher-Yates shuffle driven by Rng, identical on every platform.
template <typename T>
void shuffle(std::vector<T>& items, Rng& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(items[i - 1], items[j]);
  }
}

/// Worker-count cap shared by the parallel stages. 0 means hardware concurrency.
void set_thread_limit(unsigned threads);
unsigned thread_limit();

/// Runs body(i) for i in [0, n) across worker threads. Callers must write
/// results only to slot i so the outcome matches the sequential loop.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

bool all_finite(std::span<const float> values);
bool all_finite(std::span<const double> values);

namespace binio {

void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_i64(std::ostream& out, std::int64_t v);
void write_f32(std::ostream& out, float v);
void write_f64(std::ostream& out, double v);
void write_bytes(std::ostream& out, std::string_view bytes);

/// Little-endian reader that reports the byte offset of any truncation.
class Reader {
 public:
  Reader(std::istream& in, std::string source) : in_(in), source_(std::move(source)) {}

  std::uint32_t u32();
  std::uint64_t u64();
  std::int64_t i64();
  float f32();
  double f64();
  std::string bytes(std::size_t n);
  void f32_array(std::span<float> out);

  std::uint64_t offset() const noexcept { return offset_; }
  /// True when the stream has no bytes left.
  bool at_end();

 private:
  void read_raw(char* dst, std::size_t n);

  std::istream& in_;
  std::string source_;
  std::uint64_t offset_ = 0;
};

}  // namespace binio

/// Hex SHA-256 of a file's bytes.
std::string file_sha256(const std::string& path);
std::string sha256_hex(std::string_view bytes);

}  // namespace multibert
