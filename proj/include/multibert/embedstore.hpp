#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace multibert::embedstore {

inline constexpr char kMagic[4] = {'S', 'E', 'M', 'B'};
inline constexpr std::uint32_t kVersion = 1;

/// Ordered per-sentence vectors for one book, stored row-major.
struct SentenceEmbeddingSet {
  std::string book_id;
  std::uint32_t dim = 0;
  std::vector<float> values;  // count() x dim

  std::size_t count() const { return dim == 0 ? 0 : values.size() / dim; }
  std::span<const float> row(std::size_t i) const {
    return {values.data() + i * dim, dim};
  }

  bool operator==(const SentenceEmbeddingSet&) const = default;
};

/// Layout: "SEMB" | version u32 | dim u32 | count u64 | per record:
/// id length u32, id bytes, sentence count u32, count*dim f32. All little-endian.
/// An empty list writes dim 0.
void write_embeddings(const std::vector<SentenceEmbeddingSet>& sets,
                      const std::filesystem::path& path);

std::vector<SentenceEmbeddingSet> read_embeddings(const std::filesystem::path& path);

/// Unit-norm pseudo-embedding of a sentence. The FNV-1a hash of the sentence
/// bytes is mixed with the seed through splitmix64 and seeds an Rng
/// (splitmix64 stream); dim Box-Muller normals are drawn in double precision,
/// L2-normalized, then rounded to float.
std::vector<float> synthetic_embed(std::string_view sentence, std::uint32_t dim,
                                   std::int64_t seed);

/// Noise scale applied to the per-sentence component in correlated mode.
inline constexpr double kCorrelatedNoise = 0.1;

/// Genre-correlated variant: normalize(base(genre) + 0.1 * noise(sentence)),
/// where both components are unit draws from the synthetic_embed stream.
std::vector<float> correlated_embed(std::string_view sentence, std::string_view genre,
                                    std::uint32_t dim, std::int64_t seed);

}  // namespace multibert::embedstore
