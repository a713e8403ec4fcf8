#include "multibert/common.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numbers>
#include <thread>

namespace multibert {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kIo: return "io";
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kEmptyCorpus: return "empty-corpus";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kShape: return "shape";
    case ErrorKind::kInfeasible: return "infeasible";
    case ErrorKind::kContract: return "contract";
    case ErrorKind::kNotFound: return "not-found";
    case ErrorKind::kEmptyDocument: return "empty-document";
    case ErrorKind::kUndefinedSimilarity: return "undefined-similarity";
    case ErrorKind::kNonFinite: return "non-finite";
    case ErrorKind::kEmptyVocabulary: return "empty-vocabulary";
  }
  return "unknown";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(message), kind_(kind) {}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t Rng::next_u64() {
  state_ += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  // 1 - u keeps the log argument in (0, 1].
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw Error(ErrorKind::kContract, "Rng::below(0)");
  // Rejection sampling removes modulo bias.
  std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                        std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

namespace {
std::atomic<unsigned> g_thread_limit{0};
}

void set_thread_limit(unsigned threads) { g_thread_limit = threads; }

unsigned thread_limit() {
  unsigned limit = g_thread_limit.load();
  if (limit == 0) limit = std::max(1u, std::thread::hardware_concurrency());
  return limit;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body) {
  std::size_t workers = std::min<std::size_t>(thread_limit(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::atomic<bool> failed{false};
  auto run = [&] {
    for (std::size_t i = next++; i < n && !failed; i = next++) {
      try {
        body(i);
      } catch (...) {
        if (!failed.exchange(true)) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(run);
  run();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

bool all_finite(std::span<const float> values) {
  return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

namespace binio {

namespace {
template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
}  // namespace

void write_u32(std::ostream& out, std::uint32_t v) { write_pod(out, v); }
void write_u64(std::ostream& out, std::uint64_t v) { write_pod(out, v); }
void write_i64(std::ostream& out, std::int64_t v) { write_pod(out, v); }
void write_f32(std::ostream& out, float v) { write_pod(out, v); }
void write_f64(std::ostream& out, double v) { write_pod(out, v); }
void write_bytes(std::ostream& out, std::string_view bytes) {
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void Reader::read_raw(char* dst, std::size_t n) {
  in_.read(dst, static_cast<std::streamsize>(n));
  auto got = static_cast<std::size_t>(in_.gcount());
  if (got != n) {
    throw Error(ErrorKind::kFormat, source_ + ": truncated at byte offset " +
                                        std::to_string(offset_ + got) + " (needed " +
                                        std::to_string(n) + " bytes at offset " +
                                        std::to_string(offset_) + ")");
  }
  offset_ += n;
}

std::uint32_t Reader::u32() {
  std::uint32_t v;
  read_raw(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

std::uint64_t Reader::u64() {
  std::uint64_t v;
  read_raw(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

std::int64_t Reader::i64() {
  std::int64_t v;
  read_raw(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

float Reader::f32() {
  float v;
  read_raw(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

double Reader::f64() {
  double v;
  read_raw(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

std::string Reader::bytes(std::size_t n) {
  std::string s(n, '\0');
  if (n > 0) read_raw(s.data(), n);
  return s;
}

void Reader::f32_array(std::span<float> out) {
  if (!out.empty()) read_raw(reinterpret_cast<char*>(out.data()), out.size_bytes());
}

bool Reader::at_end() {
  return in_.peek() == std::char_traits<char>::eof();
}

}  // namespace binio

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorKind::kIo, "sha256 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

std::string file_sha256(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return sha256_hex(bytes);
}

}  // namespace multibert
