#include "multibert/docvec.hpp"

#include "multibert/common.hpp"

namespace multibert::docvec {

std::vector<float> encoder_docvec(const encoder::EncoderModel<float>& model,
                                  const sequencer::TokenSequence& sequence, Pooling pooling) {
  const auto& c = model.config;
  if (sequence.tokens.empty()) {
    throw Error(ErrorKind::kEmptyDocument, "sequence '" + sequence.book_id + "' is empty");
  }
  sequencer::TokenVocabulary vocab{c.vocab_size - 4};
  auto batch = sequencer::pad_batch({sequence}, sequence.tokens.size(), vocab);
  auto out = encoder::forward(model, batch);
  const std::size_t h = c.hidden_size;

  std::vector<double> acc(h, 0.0);
  std::size_t n = 0;
  if (pooling == Pooling::kMean) {
    for (std::size_t t = 0; t < sequence.tokens.size(); ++t) {
      if (!vocab.is_cluster(sequence.tokens[t])) continue;
      for (std::size_t j = 0; j < h; ++j) acc[j] += out.hidden[t * h + j];
      ++n;
    }
  }
  if (n == 0) {
    std::size_t bos = 0;
    while (bos < sequence.tokens.size() && sequence.tokens[bos] != vocab.bos()) ++bos;
    if (bos == sequence.tokens.size()) bos = 0;
    for (std::size_t j = 0; j < h; ++j) acc[j] = out.hidden[bos * h + j];
    n = 1;
  }
  std::vector<float> v(h);
  for (std::size_t j = 0; j < h; ++j) v[j] = static_cast<float>(acc[j] / static_cast<double>(n));
  return v;
}

std::vector<float> sentence_docvec(const embedstore::SentenceEmbeddingSet& embeddings) {
  const std::size_t n = embeddings.count();
  if (n == 0) {
    throw Error(ErrorKind::kEmptyDocument, "document '" + embeddings.book_id + "' has no sentences");
  }
  std::vector<double> acc(embeddings.dim, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = embeddings.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) acc[j] += r[j];
  }
  std::vector<float> v(embeddings.dim);
  for (std::size_t j = 0; j < v.size(); ++j) v[j] = static_cast<float>(acc[j] / static_cast<double>(n));
  return v;
}

DocumentEmbedding compose(std::string book_id, std::span<const float> encoder_part,
                          std::span<const float> sentence_part) {
  if (!all_finite(encoder_part) || !all_finite(sentence_part)) {
    throw Error(ErrorKind::kNonFinite, "document '" + book_id + "' has non-finite embedding parts");
  }
  DocumentEmbedding d;
  d.book_id = std::move(book_id);
  d.encoder_dim = encoder_part.size();
  d.full.reserve(encoder_part.size() + sentence_part.size());
  d.full.insert(d.full.end(), encoder_part.begin(), encoder_part.end());
  d.full.insert(d.full.end(), sentence_part.begin(), sentence_part.end());
  return d;
}

}  // namespace multibert::docvec
