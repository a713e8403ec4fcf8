#include "multibert/sequencer.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>

#include "multibert/common.hpp"

namespace multibert::sequencer {

TokenSequence encode_document(const embedstore::SentenceEmbeddingSet& embeddings,
                              const codebook::Codebook& codebook, std::uint32_t max_positions) {
  if (embeddings.dim != codebook.dim) {
    throw Error(ErrorKind::kShape, "document '" + embeddings.book_id + "' has dim " +
                                       std::to_string(embeddings.dim) + ", codebook dim " +
                                       std::to_string(codebook.dim));
  }
  if (embeddings.count() == 0) {
    throw Error(ErrorKind::kEmptyDocument, "document '" + embeddings.book_id + "' has no sentences");
  }
  if (max_positions < 2) throw Error(ErrorKind::kConfig, "max_positions must be at least 2");
  TokenVocabulary vocab{codebook.k};
  std::size_t kept = std::min<std::size_t>(embeddings.count(), max_positions - 2);
  TokenSequence seq;
  seq.book_id = embeddings.book_id;
  seq.tokens.reserve(kept + 2);
  seq.tokens.push_back(vocab.bos());
  for (std::size_t i = 0; i < kept; ++i) seq.tokens.push_back(codebook::assign(codebook, embeddings.row(i)));
  seq.tokens.push_back(vocab.eos());
  return seq;
}

PaddedBatch pad_batch(const std::vector<TokenSequence>& sequences, std::size_t batch_length,
                      const TokenVocabulary& vocab) {
  PaddedBatch out;
  out.batch = sequences.size();
  out.length = batch_length;
  out.tokens.assign(out.batch * batch_length, vocab.pad());
  out.mask.assign(out.batch * batch_length, 0);
  for (std::size_t b = 0; b < sequences.size(); ++b) {
    const auto& s = sequences[b].tokens;
    if (s.size() > batch_length) {
      throw Error(ErrorKind::kContract, "sequence '" + sequences[b].book_id + "' of length " +
                                            std::to_string(s.size()) + " exceeds batch length " +
                                            std::to_string(batch_length));
    }
    std::copy(s.begin(), s.end(), out.tokens.begin() + static_cast<std::ptrdiff_t>(b * batch_length));
    std::fill_n(out.mask.begin() + static_cast<std::ptrdiff_t>(b * batch_length), s.size(), 1);
  }
  return out;
}

void write_sequences(const std::vector<TokenSequence>& sequences, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  for (const auto& s : sequences) {
    out << s.book_id << '\t';
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      if (i) out << ' ';
      out << s.tokens[i];
    }
    out << '\n';
  }
  if (!out) throw Error(ErrorKind::kIo, "write failure on " + path.string());
}

std::vector<TokenSequence> read_sequences(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot read " + path.string());
  std::vector<TokenSequence> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw Error(ErrorKind::kFormat, path.string() + ":" + std::to_string(line_no) + ": missing tab");
    }
    TokenSequence s;
    s.book_id = line.substr(0, tab);
    const char* p = line.data() + tab + 1;
    const char* end = line.data() + line.size();
    while (p < end) {
      if (*p == ' ') {
        ++p;
        continue;
      }
      TokenId id = 0;
      auto [next, ec] = std::from_chars(p, end, id);
      if (ec != std::errc{}) {
        throw Error(ErrorKind::kFormat, path.string() + ":" + std::to_string(line_no) + ": bad token id");
      }
      s.tokens.push_back(id);
      p = next;
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace multibert::sequencer
