#pragma once

#include <span>
#include <string>
#include <vector>

#include "multibert/embedstore.hpp"
#include "multibert/encoder.hpp"

namespace multibert::docvec {

enum class Pooling {
  kMean,  // mean over cluster-token positions
  kBos,   // final state at the BOS position
};

struct DocumentEmbedding {
  std::string book_id;
  std::size_t encoder_dim = 0;
  std::vector<float> full;  // encoder part followed by sentence part

  std::span<const float> encoder_part() const { return {full.data(), encoder_dim}; }
  std::span<const float> sentence_part() const {
    return {full.data() + encoder_dim, full.size() - encoder_dim};
  }
};

/// Pooled final-layer states of one sequence. Mean pooling skips PAD, BOS and
/// EOS and falls back to the BOS state when no cluster token is present.
std::vector<float> encoder_docvec(const encoder::EncoderModel<float>& model,
                                  const sequencer::TokenSequence& sequence,
                                  Pooling pooling = Pooling::kMean);

/// Component-wise mean of the sentence vectors.
std::vector<float> sentence_docvec(const embedstore::SentenceEmbeddingSet& embeddings);

DocumentEmbedding compose(std::string book_id, std::span<const float> encoder_part,
                          std::span<const float> sentence_part);

}  // namespace multibert::docvec
