#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "multibert/codebook.hpp"
#include "multibert/embedstore.hpp"

namespace multibert::sequencer {

using TokenId = std::uint32_t;

/// Cluster ids 0..k-1 followed by the four specials.
struct TokenVocabulary {
  std::uint32_t k = 0;

  TokenId pad() const { return k; }
  TokenId bos() const { return k + 1; }
  TokenId eos() const { return k + 2; }
  TokenId mask() const { return k + 3; }
  std::uint32_t size() const { return k + 4; }
  bool is_cluster(TokenId t) const { return t < k; }
};

/// Matches the 514-entry position table: 512 usable slots plus 2 reserved.
inline constexpr std::uint32_t kDefaultMaxPositions = 512;

struct TokenSequence {
  std::string book_id;
  std::vector<TokenId> tokens;

  std::size_t length() const { return tokens.size(); }
  bool operator==(const TokenSequence&) const = default;
};

/// [BOS] + cluster id of each sentence (head-truncated to max_positions - 2) + [EOS].
TokenSequence encode_document(const embedstore::SentenceEmbeddingSet& embeddings,
                              const codebook::Codebook& codebook,
                              std::uint32_t max_positions = kDefaultMaxPositions);

/// Right-padded batch, row-major batch x length.
struct PaddedBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<TokenId> tokens;
  std::vector<std::uint8_t> mask;  // 1 on real tokens, 0 on PAD

  TokenId token(std::size_t b, std::size_t t) const { return tokens[b * length + t]; }
  bool real(std::size_t b, std::size_t t) const { return mask[b * length + t] != 0; }
};

PaddedBatch pad_batch(const std::vector<TokenSequence>& sequences, std::size_t batch_length,
                      const TokenVocabulary& vocab);

/// One line per sequence: book_id TAB space-separated ids.
void write_sequences(const std::vector<TokenSequence>& sequences, const std::filesystem::path& path);
std::vector<TokenSequence> read_sequences(const std::filesystem::path& path);

}  // namespace multibert::sequencer
