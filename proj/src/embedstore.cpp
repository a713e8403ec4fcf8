#include "multibert/embedstore.hpp"

#include <cmath>
#include <fstream>

#include "multibert/common.hpp"

namespace multibert::embedstore {

namespace {

std::vector<double> unit_draw(std::string_view text, std::uint32_t dim, std::int64_t seed) {
  std::uint64_t key = fnv1a64(text) ^ splitmix64(static_cast<std::uint64_t>(seed));
  Rng rng(splitmix64(key));
  std::vector<double> v(dim);
  double norm2 = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    norm2 += x * x;
  }
  double inv = 1.0 / std::sqrt(norm2);
  for (auto& x : v) x *= inv;
  return v;
}

std::vector<float> to_float(const std::vector<double>& v) {
  return {v.begin(), v.end()};
}

}  // namespace

std::vector<float> synthetic_embed(std::string_view sentence, std::uint32_t dim,
                                   std::int64_t seed) {
  if (dim == 0) throw Error(ErrorKind::kContract, "synthetic_embed requires dim >= 1");
  return to_float(unit_draw(sentence, dim, seed));
}

std::vector<float> correlated_embed(std::string_view sentence, std::string_view genre,
                                    std::uint32_t dim, std::int64_t seed) {
  if (dim == 0) throw Error(ErrorKind::kContract, "correlated_embed requires dim >= 1");
  // The genre key is namespaced so a sentence equal to a genre name does not
  // collide with the genre base vector.
  auto base = unit_draw(std::string("genre:") + std::string(genre), dim, seed);
  auto noise = unit_draw(sentence, dim, seed);
  double norm2 = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    base[i] += kCorrelatedNoise * noise[i];
    norm2 += base[i] * base[i];
  }
  double inv = 1.0 / std::sqrt(norm2);
  for (auto& x : base) x *= inv;
  return to_float(base);
}

void write_embeddings(const std::vector<SentenceEmbeddingSet>& sets,
                      const std::filesystem::path& path) {
  std::uint32_t dim = sets.empty() ? 0 : sets.front().dim;
  for (const auto& s : sets) {
    if (s.dim != dim) {
      throw Error(ErrorKind::kFormat, "embedding set '" + s.book_id + "' has dim " +
                                          std::to_string(s.dim) + ", expected " +
                                          std::to_string(dim));
    }
    if (dim == 0 || s.values.size() % dim != 0) {
      throw Error(ErrorKind::kFormat, "embedding set '" + s.book_id + "' is not a whole number of rows");
    }
    if (s.values.size() / dim > UINT32_MAX) {
      throw Error(ErrorKind::kFormat, "too many sentences in '" + s.book_id + "'");
    }
    if (!all_finite(s.values)) {
      throw Error(ErrorKind::kNonFinite, "embedding set '" + s.book_id + "' has non-finite values");
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  binio::write_bytes(out, {kMagic, 4});
  binio::write_u32(out, kVersion);
  binio::write_u32(out, dim);
  binio::write_u64(out, sets.size());
  for (const auto& s : sets) {
    binio::write_u32(out, static_cast<std::uint32_t>(s.book_id.size()));
    binio::write_bytes(out, s.book_id);
    binio::write_u32(out, static_cast<std::uint32_t>(s.count()));
    binio::write_bytes(out, {reinterpret_cast<const char*>(s.values.data()),
                             s.values.size() * sizeof(float)});
  }
  if (!out) throw Error(ErrorKind::kIo, "write failure on " + path.string());
}

std::vector<SentenceEmbeddingSet> read_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot read " + path.string());
  binio::Reader reader(in, path.string());
  if (reader.bytes(4) != std::string_view(kMagic, 4)) {
    throw Error(ErrorKind::kFormat, path.string() + ": bad magic, expected SEMB");
  }
  std::uint32_t version = reader.u32();
  if (version != kVersion) {
    throw Error(ErrorKind::kFormat, path.string() + ": unsupported version " + std::to_string(version));
  }
  std::uint32_t dim = reader.u32();
  std::uint64_t count = reader.u64();
  if (count > 0 && dim == 0) throw Error(ErrorKind::kFormat, path.string() + ": dim 0 with records");
  std::vector<SentenceEmbeddingSet> sets;
  for (std::uint64_t r = 0; r < count; ++r) {
    SentenceEmbeddingSet s;
    s.dim = dim;
    s.book_id = reader.bytes(reader.u32());
    std::uint32_t n = reader.u32();
    s.values.resize(static_cast<std::size_t>(n) * dim);
    reader.f32_array(s.values);
    if (!all_finite(s.values)) {
      throw Error(ErrorKind::kFormat, path.string() + ": non-finite value in record '" + s.book_id + "'");
    }
    sets.push_back(std::move(s));
  }
  if (!reader.at_end()) {
    throw Error(ErrorKind::kFormat, path.string() + ": trailing bytes at offset " +
                                        std::to_string(reader.offset()));
  }
  return sets;
}

}  // namespace multibert::embedstore
