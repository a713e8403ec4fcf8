#include "multibert/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "multibert/common.hpp"
#include "multibert/embedstore.hpp"
#include "multibert/retrieval.hpp"
#include "multibert/sequencer.hpp"

namespace multibert::pipeline {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string lowercase(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

template <typename T>
json optional_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

json path_json(const std::optional<fs::path>& p) { return p ? json(p->string()) : json(nullptr); }

std::optional<fs::path> path_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return fs::path(j.get<std::string>());
}

std::string_view pooling_name(docvec::Pooling p) { return p == docvec::Pooling::kMean ? "mean" : "bos"; }

docvec::Pooling parse_pooling(const std::string& s) {
  if (s == "mean") return docvec::Pooling::kMean;
  if (s == "bos") return docvec::Pooling::kBos;
  throw Error(ErrorKind::kConfig, "unknown pooling '" + s + "' (expected mean or bos)");
}

RetrievalMode parse_mode(const std::string& s) {
  if (s == "cosine") return RetrievalMode::kCosine;
  if (s == "cluster") return RetrievalMode::kCluster;
  throw Error(ErrorKind::kConfig, "unknown retrieval mode '" + s + "' (expected cosine or cluster)");
}

void require_file(const std::optional<fs::path>& p, const std::string& what) {
  if (!p) throw Error(ErrorKind::kConfig, what + " path is not configured");
  if (!fs::exists(*p)) throw Error(ErrorKind::kIo, what + " file not found: " + p->string());
}

void require_file(const fs::path& p, const std::string& what) { require_file(std::optional<fs::path>(p), what); }

fs::path sentence_embeddings_path(const RunConfig& c) {
  return c.embeddings ? *c.embeddings : RunFiles{c.run_dir}.sentences();
}

encoder::EncoderConfig effective_encoder(const RunConfig& c) {
  auto e = c.encoder;
  e.vocab_size = c.kmeans.k + 4;
  return e;
}

void prepare_run_dir(const RunConfig& c) {
  fs::create_directories(c.run_dir);
  std::ofstream out(RunFiles{c.run_dir}.config(), std::ios::binary | std::ios::trunc);
  out << c.to_json().dump(2) << '\n';
}

std::vector<corpus::BookRecord> load_run_corpus(const RunConfig& c) {
  RunFiles files{c.run_dir};
  require_file(files.corpus(), "merged corpus (run ingest first)");
  auto records = corpus::load_books(files.corpus()).records;
  corpus::label_genres(records, c.genres);
  return records;
}

std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::vector<std::pair<std::uint32_t, double>> read_loss_file(const fs::path& path) {
  std::vector<std::pair<std::uint32_t, double>> rows;
  std::ifstream in(path);
  std::uint32_t epoch;
  double loss;
  while (in >> epoch >> loss) rows.emplace_back(epoch, loss);
  return rows;
}

retrieval::EmbeddingIndex load_document_index(const RunConfig& c, const fs::path& path) {
  auto sets = embedstore::read_embeddings(path);
  std::vector<std::string> ids;
  std::vector<float> matrix;
  std::size_t dim = sets.empty() ? 0 : sets.front().dim;
  for (const auto& s : sets) {
    if (s.count() != 1) {
      throw Error(ErrorKind::kFormat, path.string() + ": record '" + s.book_id + "' should hold one document vector");
    }
    ids.push_back(s.book_id);
    matrix.insert(matrix.end(), s.values.begin(), s.values.end());
  }
  retrieval::EmbeddingIndex index(std::move(ids), dim, std::move(matrix));
  if (c.retrieval == RetrievalMode::kCluster) {
    retrieval::build_cluster_index(index, {c.n_clusters, c.cluster_seed, c.kmeans.max_iter, c.kmeans.tol});
  }
  return index;
}

std::vector<retrieval::ScoredId> retrieve(const RunConfig& c, const retrieval::EmbeddingIndex& index,
                                          const std::string& query, std::size_t k) {
  if (c.retrieval == RetrievalMode::kCluster) return retrieval::cluster_retrieve(index, query, k);
  return retrieval::top_k(index, query, k);
}

retrieval::EmbeddingIndex subset_index(const retrieval::EmbeddingIndex& index, const std::vector<std::string>& ids) {
  std::vector<float> matrix;
  for (const auto& id : ids) {
    auto r = index.row(*index.find(id));
    matrix.insert(matrix.end(), r.begin(), r.end());
  }
  return {ids, index.dim(), std::move(matrix)};
}

}  // namespace

// ---- config ---------------------------------------------------------------

ordered_json RunConfig::to_json() const {
  ordered_json j;
  j["paths"] = {{"books", path_json(books)},
                {"reviews", path_json(reviews)},
                {"embeddings", path_json(embeddings)},
                {"sbert_documents", path_json(sbert_documents)},
                {"run_dir", run_dir.string()}};
  j["corpus"] = {{"include_reviews", include_reviews},
                 {"defaults",
                  {{"description", optional_json(defaults.description)},
                   {"language_code", optional_json(defaults.language_code)},
                   {"average_rating", optional_json(defaults.average_rating)}}}};
  j["genres"] = {{"vocabulary", genres.vocabulary}, {"min_count", genres.min_count}};
  j["synthetic"] = {{"enabled", synthetic},
                    {"correlated", synthetic_correlated},
                    {"dim", synthetic_dim},
                    {"seed", synthetic_seed}};
  j["codebook"] = {{"k", kmeans.k}, {"max_iter", kmeans.max_iter}, {"tol", kmeans.tol}, {"seed", kmeans.seed}};
  j["encoder"] = {{"hidden_size", encoder.hidden_size}, {"n_layers", encoder.n_layers},
                  {"n_heads", encoder.n_heads},         {"ffn_size", encoder.ffn_size},
                  {"max_positions", encoder.max_positions}, {"dropout", encoder.dropout},
                  {"seed", encoder.seed}};
  j["train"] = {{"batch_size", train.batch_size},
                {"learning_rate", train.learning_rate},
                {"beta1", train.beta1},
                {"beta2", train.beta2},
                {"epsilon", train.epsilon},
                {"epochs", train.epochs},
                {"mask_probability", train.mask_probability},
                {"clip_norm", optional_json(train.clip_norm)},
                {"seed", train.seed}};
  j["docvec"] = {{"pooling", pooling_name(pooling)}};
  j["retrieval"] = {{"mode", retrieval == RetrievalMode::kCosine ? "cosine" : "cluster"},
                    {"n_clusters", n_clusters},
                    {"seed", cluster_seed}};
  j["relevance"] = {{"threshold", relevance.threshold}, {"rule", evaluate::to_string(relevance.rule)}};
  j["threads"] = threads;
  return j;
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  try {
    const auto& p = j.at("paths");
    c.books = path_from(p.at("books"));
    c.reviews = path_from(p.at("reviews"));
    c.embeddings = path_from(p.at("embeddings"));
    c.sbert_documents = path_from(p.at("sbert_documents"));
    c.run_dir = p.at("run_dir").get<std::string>();

    const auto& co = j.at("corpus");
    c.include_reviews = co.at("include_reviews").get<bool>();
    const auto& d = co.at("defaults");
    c.defaults.description = d.at("description").is_null()
                                 ? std::nullopt
                                 : std::optional<std::string>(d.at("description").get<std::string>());
    c.defaults.language_code = d.at("language_code").is_null()
                                   ? std::nullopt
                                   : std::optional<std::string>(d.at("language_code").get<std::string>());
    c.defaults.average_rating = d.at("average_rating").is_null()
                                    ? std::nullopt
                                    : std::optional<double>(d.at("average_rating").get<double>());

    c.genres.vocabulary.clear();
    for (const auto& g : j.at("genres").at("vocabulary")) c.genres.vocabulary.push_back(lowercase(g.get<std::string>()));
    c.genres.min_count = j.at("genres").at("min_count").get<std::int64_t>();

    const auto& s = j.at("synthetic");
    c.synthetic = s.at("enabled").get<bool>();
    c.synthetic_correlated = s.at("correlated").get<bool>();
    c.synthetic_dim = s.at("dim").get<std::uint32_t>();
    c.synthetic_seed = s.at("seed").get<std::int64_t>();

    const auto& k = j.at("codebook");
    c.kmeans.k = k.at("k").get<std::uint32_t>();
    c.kmeans.max_iter = k.at("max_iter").get<std::uint32_t>();
    c.kmeans.tol = k.at("tol").get<double>();
    c.kmeans.seed = k.at("seed").get<std::int64_t>();

    const auto& e = j.at("encoder");
    c.encoder.hidden_size = e.at("hidden_size").get<std::uint32_t>();
    c.encoder.n_layers = e.at("n_layers").get<std::uint32_t>();
    c.encoder.n_heads = e.at("n_heads").get<std::uint32_t>();
    c.encoder.ffn_size = e.at("ffn_size").is_null() ? 0 : e.at("ffn_size").get<std::uint32_t>();
    if (c.encoder.ffn_size == 0) c.encoder.ffn_size = 4 * c.encoder.hidden_size;
    c.encoder.max_positions = e.at("max_positions").get<std::uint32_t>();
    c.encoder.dropout = e.at("dropout").get<float>();
    c.encoder.seed = e.at("seed").get<std::uint32_t>();
    c.encoder.vocab_size = c.kmeans.k + 4;

    const auto& t = j.at("train");
    c.train.batch_size = t.at("batch_size").get<std::uint32_t>();
    c.train.learning_rate = t.at("learning_rate").get<double>();
    c.train.beta1 = t.at("beta1").get<double>();
    c.train.beta2 = t.at("beta2").get<double>();
    c.train.epsilon = t.at("epsilon").get<double>();
    c.train.epochs = t.at("epochs").get<std::uint32_t>();
    c.train.mask_probability = t.at("mask_probability").get<double>();
    c.train.clip_norm = t.at("clip_norm").is_null() ? std::nullopt
                                                     : std::optional<double>(t.at("clip_norm").get<double>());
    c.train.seed = t.at("seed").get<std::uint64_t>();

    c.pooling = parse_pooling(j.at("docvec").at("pooling").get<std::string>());
    const auto& r = j.at("retrieval");
    c.retrieval = parse_mode(r.at("mode").get<std::string>());
    c.n_clusters = r.at("n_clusters").get<std::uint32_t>();
    c.cluster_seed = r.at("seed").get<std::int64_t>();

    const auto& rel = j.at("relevance");
    c.relevance.threshold = rel.at("threshold").get<double>();
    c.relevance.rule = evaluate::parse_ratio_rule(rel.at("rule").get<std::string>());
    c.relevance.vocabulary = c.genres.vocabulary;
    c.threads = j.at("threads").get<unsigned>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kConfig, std::string("invalid config: ") + e.what());
  }
  if (c.genres.vocabulary.empty()) throw Error(ErrorKind::kConfig, "genres.vocabulary must not be empty");
  if (c.kmeans.k == 0) throw Error(ErrorKind::kConfig, "codebook.k must be positive");
  if (c.synthetic_dim == 0) throw Error(ErrorKind::kConfig, "synthetic.dim must be positive");
  c.train.validate();
  return c;
}

std::string RunConfig::digest() const { return sha256_hex(to_json().dump()); }

ordered_json default_config_json() {
  RunConfig c;
  c.encoder.ffn_size = 4 * c.encoder.hidden_size;
  c.encoder.vocab_size = c.kmeans.k + 4;
  return c.to_json();
}

namespace {

// Recursively overlays `patch` onto `base`, keeping keys `base` does not know
// out so typos surface as config errors.
void overlay(ordered_json& base, const json& patch, const std::string& where) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    std::string key = where.empty() ? it.key() : where + "." + it.key();
    if (!base.contains(it.key())) throw Error(ErrorKind::kConfig, "unknown config key '" + key + "'");
    auto& slot = base[it.key()];
    if (slot.is_object() && it->is_object()) {
      overlay(slot, *it, key);
    } else {
      slot = *it;
    }
  }
}

}  // namespace

RunConfig load_config(const std::optional<fs::path>& path, const std::vector<std::string>& overrides) {
  ordered_json merged = default_config_json();
  if (path) {
    std::ifstream in(*path);
    if (!in) throw Error(ErrorKind::kIo, "cannot read config " + path->string());
    json file = json::parse(in, nullptr, false, true);
    if (file.is_discarded() || !file.is_object()) {
      throw Error(ErrorKind::kConfig, "config " + path->string() + " is not a JSON object");
    }
    overlay(merged, file, "");
  }
  for (const auto& o : overrides) {
    auto eq = o.find('=');
    if (eq == std::string::npos) throw Error(ErrorKind::kConfig, "override '" + o + "' is not key=value");
    std::string key = o.substr(0, eq), text = o.substr(eq + 1);
    json value = json::parse(text, nullptr, false);
    if (value.is_discarded()) value = text;
    json patch = value;
    std::string rest = key;
    std::vector<std::string> parts;
    for (std::size_t dot; (dot = rest.find('.')) != std::string::npos; rest = rest.substr(dot + 1)) {
      parts.push_back(rest.substr(0, dot));
    }
    parts.push_back(rest);
    for (auto p = parts.rbegin(); p != parts.rend(); ++p) patch = json{{*p, patch}};
    overlay(merged, patch, "");
  }
  // ffn_size in the defaults is concrete; a hidden_size override without an
  // ffn_size override should keep the 4x convention.
  bool ffn_given = false;
  for (const auto& o : overrides) ffn_given |= o.rfind("encoder.ffn_size=", 0) == 0;
  if (path && !ffn_given) {
    std::ifstream in(*path);
    json file = json::parse(in, nullptr, false, true);
    ffn_given = file.contains("encoder") && file["encoder"].contains("ffn_size");
  }
  if (!ffn_given) merged["encoder"]["ffn_size"] = nullptr;
  auto config = RunConfig::from_json(merged);
  set_thread_limit(config.threads);
  return config;
}

// ---- commands ---------------------------------------------------------------

IngestSummary cmd_ingest(const RunConfig& c, std::ostream& log) {
  require_file(c.books, "books");
  if (c.reviews) require_file(c.reviews, "reviews");
  prepare_run_dir(c);
  IngestSummary summary;
  auto loaded = corpus::load_books(*c.books);
  summary.skipped_books = loaded.skipped;
  std::vector<corpus::Review> reviews;
  if (c.reviews) {
    auto r = corpus::load_reviews(*c.reviews);
    summary.skipped_reviews = r.skipped;
    reviews = std::move(r.reviews);
  }
  summary.reviews = reviews.size();
  auto merged = corpus::merge_reviews(std::move(loaded.records), reviews);
  summary.orphan_reviews = merged.orphans;
  auto records = corpus::fill_defaults(std::move(merged.books), c.defaults);
  corpus::label_genres(records, c.genres);
  summary.records = records.size();
  corpus::write_corpus(records, RunFiles{c.run_dir}.corpus());
  update_manifest(c);
  log << "ingest: records=" << summary.records << " skipped_books=" << summary.skipped_books
      << " reviews=" << summary.reviews << " skipped_reviews=" << summary.skipped_reviews
      << " orphan_reviews=" << summary.orphan_reviews << '\n';
  return summary;
}

void cmd_embed_sentences(const RunConfig& c, std::ostream& log) {
  if (!c.synthetic) {
    throw Error(ErrorKind::kConfig, "synthetic embeddings are disabled; supply paths.embeddings from the exporter");
  }
  auto records = load_run_corpus(c);
  std::vector<const corpus::BookRecord*> admitted;
  std::vector<corpus::Document> docs;
  for (const auto& r : records) {
    if (auto d = corpus::make_document(r, c.include_reviews)) {
      admitted.push_back(&r);
      docs.push_back(std::move(*d));
    }
  }
  std::vector<embedstore::SentenceEmbeddingSet> sets(docs.size());
  parallel_for(docs.size(), [&](std::size_t i) {
    auto& s = sets[i];
    s.book_id = docs[i].book_id;
    s.dim = c.synthetic_dim;
    std::optional<std::string> genre;
    if (c.synthetic_correlated) {
      for (const auto& g : c.genres.vocabulary) {
        if (admitted[i]->genres.count(g)) {
          genre = g;
          break;
        }
      }
    }
    for (const auto& sentence : docs[i].sentences) {
      auto v = genre ? embedstore::correlated_embed(sentence, *genre, c.synthetic_dim, c.synthetic_seed)
                     : embedstore::synthetic_embed(sentence, c.synthetic_dim, c.synthetic_seed);
      s.values.insert(s.values.end(), v.begin(), v.end());
    }
  });
  auto path = sentence_embeddings_path(c);
  fs::create_directories(c.run_dir);
  embedstore::write_embeddings(sets, path);
  update_manifest(c);
  log << "embed-sentences: documents=" << sets.size() << " excluded=" << (records.size() - sets.size())
      << " dim=" << c.synthetic_dim << " path=" << path.string() << '\n';
}

void cmd_dump_sentences(const RunConfig& c, std::ostream& out) {
  auto records = load_run_corpus(c);
  for (const auto& r : records) {
    auto d = corpus::make_document(r, c.include_reviews);
    if (!d) continue;
    for (const auto& s : d->sentences) out << d->book_id << '\t' << s << '\n';
  }
}

codebook::Codebook cmd_build_codebook(const RunConfig& c, std::ostream& log) {
  auto path = sentence_embeddings_path(c);
  require_file(path, "sentence embeddings");
  prepare_run_dir(c);
  auto sets = embedstore::read_embeddings(path);
  codebook::PointSet points;
  points.dim = sets.empty() ? 0 : sets.front().dim;
  for (const auto& s : sets) points.values.insert(points.values.end(), s.values.begin(), s.values.end());
  auto fit = codebook::kmeans_fit(points, c.kmeans);
  codebook::save_codebook(fit.codebook, RunFiles{c.run_dir}.codebook());
  update_manifest(c);
  log << "build-codebook: k=" << fit.codebook.k << " iterations=" << fit.codebook.iterations_run
      << " inertia=" << format_real(fit.codebook.inertia) << " vectors=" << points.size() << '\n';
  return fit.codebook;
}

std::vector<double> cmd_train(const RunConfig& c, bool resume, std::ostream& log) {
  RunFiles files{c.run_dir};
  auto path = sentence_embeddings_path(c);
  require_file(path, "sentence embeddings");
  require_file(files.codebook(), "codebook (run build-codebook first)");
  prepare_run_dir(c);
  auto cb = codebook::load_codebook(files.codebook());
  if (cb.k != c.kmeans.k) {
    throw Error(ErrorKind::kConfig, "codebook has k=" + std::to_string(cb.k) + " but config says " +
                                        std::to_string(c.kmeans.k));
  }
  auto sets = embedstore::read_embeddings(path);
  std::vector<sequencer::TokenSequence> sequences;
  for (const auto& s : sets) {
    if (s.count() == 0) continue;
    sequences.push_back(sequencer::encode_document(s, cb, c.encoder.max_positions));
  }
  sequencer::write_sequences(sequences, files.sequences());

  auto model_config = effective_encoder(c);
  encoder::EncoderModel<float> model;
  std::uint32_t first_epoch = 1;
  std::vector<std::pair<std::uint32_t, double>> history;
  if (resume) {
    require_file(files.checkpoint(), "checkpoint to resume from");
    model = encoder::load_checkpoint(files.checkpoint());
    if (model.config.vocab_size != model_config.vocab_size) {
      throw Error(ErrorKind::kConfig, "checkpoint vocabulary does not match the codebook");
    }
    history = read_loss_file(files.loss());
    if (!history.empty()) first_epoch = history.back().first + 1;
  } else {
    model = encoder::init_model<float>(model_config);
  }
  auto tcfg = c.train;
  // A resumed run continues the data order rather than replaying epoch 1's.
  if (resume) tcfg.seed = splitmix64(tcfg.seed + first_epoch);
  auto result = encoder::train(std::move(model), sequences, tcfg, [&](std::uint32_t epoch, double loss) {
    log << "train: epoch " << (first_epoch + epoch - 1) << " loss " << format_real(loss) << '\n';
  });
  encoder::save_checkpoint(result.model, files.checkpoint());
  std::ofstream loss_out(files.loss(), std::ios::binary | std::ios::trunc);
  for (const auto& [epoch, loss] : history) loss_out << epoch << '\t' << format_real(loss) << '\n';
  for (std::size_t i = 0; i < result.epoch_loss.size(); ++i) {
    loss_out << (first_epoch + i) << '\t' << format_real(result.epoch_loss[i]) << '\n';
  }
  loss_out.close();
  update_manifest(c);
  log << "train: sequences=" << sequences.size() << " parameters=" << result.model.parameter_count()
      << " epochs=" << result.epoch_loss.size() << '\n';
  return result.epoch_loss;
}

void cmd_embed(const RunConfig& c, std::ostream& log) {
  RunFiles files{c.run_dir};
  auto path = sentence_embeddings_path(c);
  require_file(path, "sentence embeddings");
  require_file(files.codebook(), "codebook (run build-codebook first)");
  require_file(files.checkpoint(), "checkpoint (run train first)");
  prepare_run_dir(c);
  auto cb = codebook::load_codebook(files.codebook());
  auto model = encoder::load_checkpoint(files.checkpoint());
  if (model.config.vocab_size != cb.k + 4) {
    throw Error(ErrorKind::kConfig, "checkpoint vocabulary does not match the codebook");
  }
  auto sets = embedstore::read_embeddings(path);
  std::erase_if(sets, [](const auto& s) { return s.count() == 0; });
  std::vector<embedstore::SentenceEmbeddingSet> docs(sets.size());
  parallel_for(sets.size(), [&](std::size_t i) {
    auto seq = sequencer::encode_document(sets[i], cb, model.config.max_positions);
    auto enc = docvec::encoder_docvec(model, seq, c.pooling);
    auto sent = docvec::sentence_docvec(sets[i]);
    auto composed = docvec::compose(sets[i].book_id, enc, sent);
    docs[i].book_id = composed.book_id;
    docs[i].dim = static_cast<std::uint32_t>(composed.full.size());
    docs[i].values = std::move(composed.full);
  });
  embedstore::write_embeddings(docs, files.documents());
  update_manifest(c);
  log << "embed: documents=" << docs.size() << " dim=" << (docs.empty() ? 0 : docs.front().dim) << '\n';
}

std::vector<retrieval::ScoredId> cmd_recommend(const RunConfig& c, const std::string& query_id, std::size_t k,
                                               std::ostream& out) {
  RunFiles files{c.run_dir};
  require_file(files.documents(), "document embeddings (run embed first)");
  auto index = load_document_index(c, files.documents());
  auto results = retrieve(c, index, query_id, k);
  std::map<std::string, std::string> titles;
  bool have_titles = fs::exists(files.corpus());
  if (have_titles) {
    for (const auto& r : corpus::load_books(files.corpus()).records) titles[r.book_id] = r.title;
  }
  out << retrieval::format_results(results, have_titles ? &titles : nullptr);
  return results;
}

evaluate::EvalReport cmd_evaluate(const RunConfig& c, std::ostream& log) {
  RunFiles files{c.run_dir};
  auto path = sentence_embeddings_path(c);
  require_file(path, "sentence embeddings");
  require_file(files.documents(), "document embeddings (run embed first)");
  if (c.sbert_documents) require_file(c.sbert_documents, "SBERT document embeddings");
  auto relevance = c.relevance;
  relevance.vocabulary = c.genres.vocabulary;
  relevance.validate();
  auto records = load_run_corpus(c);
  prepare_run_dir(c);

  auto multibert_index = load_document_index(c, files.documents());
  std::map<std::string, const corpus::BookRecord*> by_id;
  for (const auto& r : records) by_id[r.book_id] = &r;

  // The benchmark covers books that reached the embedding stage.
  std::vector<std::string> ids;
  std::vector<evaluate::BookLabels> labels;
  for (const auto& id : multibert_index.ids()) {
    auto it = by_id.find(id);
    if (it == by_id.end()) {
      throw Error(ErrorKind::kContract, "document '" + id + "' is missing from the merged corpus");
    }
    ids.push_back(id);
    labels.push_back({id, it->second->genres});
  }

  auto sentence_sets = embedstore::read_embeddings(path);
  std::erase_if(sentence_sets, [](const auto& s) { return s.count() == 0; });
  retrieval::EmbeddingIndex sbert_index;
  if (c.sbert_documents) {
    auto full = load_document_index(RunConfig{}, *c.sbert_documents);
    for (const auto& id : ids) {
      if (!full.find(id)) throw Error(ErrorKind::kContract, "SBERT documents lack book '" + id + "'");
    }
    sbert_index = subset_index(full, ids);
  } else {
    sbert_index = evaluate::baseline_sentence_mean(sentence_sets);
  }
  if (c.retrieval == RetrievalMode::kCluster) {
    retrieval::build_cluster_index(sbert_index, {c.n_clusters, c.cluster_seed, c.kmeans.max_iter, c.kmeans.tol});
  }

  std::vector<std::string> texts;
  for (const auto& id : ids) texts.push_back(corpus::tfidf_text(*by_id.at(id), c.include_reviews));
  evaluate::TfidfIndex tfidf(ids, evaluate::tfidf_vectorize(texts));

  std::vector<evaluate::ModelUnderTest> models;
  models.push_back({"multi-bert", ids, [&](const std::string& q, std::size_t k) {
                      return retrieve(c, multibert_index, q, k);
                    }});
  models.push_back({"sbert-baseline", sbert_index.ids(), [&](const std::string& q, std::size_t k) {
                      return retrieve(c, sbert_index, q, k);
                    }});
  models.push_back({"tfidf", ids, [&](const std::string& q, std::size_t k) { return tfidf.top_k(q, k); }});

  auto report = evaluate::run_benchmark(labels, models, relevance);
  report.notes.push_back("retrieval mode: " +
                         std::string(c.retrieval == RetrievalMode::kCosine ? "cosine" : "cluster") +
                         "  relevance: " + std::string(evaluate::to_string(relevance.rule)) + " > " +
                         format_real(relevance.threshold));
  report.notes.push_back("random-ranking expectation: " +
                         format_real(evaluate::expected_random_precision(labels, relevance)));
  if (c.retrieval == RetrievalMode::kCluster) {
    std::size_t k = *std::max_element(report.ks.begin(), report.ks.end());
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& l : labels) {
      if (l.genres.empty() || multibert_index.norm(*multibert_index.find(l.book_id)) == 0.0) continue;
      total += retrieval::recall(retrieval::cluster_retrieve(multibert_index, l.book_id, k),
                                 retrieval::top_k(multibert_index, l.book_id, k));
      ++n;
    }
    report.notes.push_back("multi-bert cluster recall@" + std::to_string(k) +
                           " vs exact scan: " + format_real(n ? total / static_cast<double>(n) : 0.0));
  }

  std::ofstream table(files.report(), std::ios::binary | std::ios::trunc);
  table << evaluate::format_table(report);
  table.close();
  evaluate::write_details(report, files.details());
  update_manifest(c);
  log << evaluate::format_table(report);
  return report;
}

encoder::EncoderConfig toy_encoder_config(std::uint32_t vocab_size) {
  encoder::EncoderConfig e;
  e.vocab_size = vocab_size;
  e.hidden_size = 32;
  e.n_layers = 2;
  e.n_heads = 2;
  e.ffn_size = 128;
  e.max_positions = sequencer::kDefaultMaxPositions;
  e.seed = 0;
  return e;
}

encoder::EncoderConfig gradcheck_encoder_config() {
  encoder::EncoderConfig e;
  e.vocab_size = 8;
  e.hidden_size = 4;
  e.n_layers = 1;
  e.n_heads = 1;
  e.ffn_size = 16;
  e.max_positions = 4;
  e.seed = 7;
  return e;
}

encoder::EncoderModel<double> gradcheck_model(std::uint64_t seed) {
  auto model = encoder::init_model<double>(gradcheck_encoder_config());
  Rng rng(seed);
  for (auto& t : model.tensors) {
    bool gain = t.name.size() >= 4 && t.name.compare(t.name.size() - 4, 4, "gain") == 0;
    bool table = t.name.rfind("embeddings.", 0) == 0 && t.shape.size() == 2;
    double sd = 0.1;
    if (table) {
      sd = 1.0;
    } else if (t.shape.size() == 2) {
      sd = 1.0 / std::sqrt(static_cast<double>(t.shape[0]));
    }
    for (auto& v : t.data) v = gain ? 1.0 + 0.1 * rng.normal() : sd * rng.normal();
  }
  return model;
}

encoder::ReconstructionBatch gradcheck_batch() {
  // vocab 8 = 4 clusters + PAD 4, BOS 5, EOS 6, MASK 7
  sequencer::TokenVocabulary vocab{4};
  sequencer::TokenSequence s{"gradcheck", {vocab.bos(), 2, 0, vocab.eos()}};
  return encoder::make_reconstruction_batch({s}, vocab, 0.0, nullptr);
}

encoder::GradCheckResult cmd_gradcheck(double step, std::ostream& out) {
  auto result = encoder::gradient_check(gradcheck_model(), gradcheck_batch(), step);
  out << "gradcheck: parameters=" << result.parameters_checked
      << " max_relative_error=" << format_real(result.max_relative_error) << " worst=" << result.worst_tensor
      << "[" << result.worst_index << "] analytic=" << format_real(result.analytic)
      << " numeric=" << format_real(result.numeric) << '\n';
  return result;
}

// ---- synthetic corpus -------------------------------------------------------

void write_synthetic_corpus(const SyntheticCorpusOptions& o, const fs::path& books_path,
                            const fs::path& reviews_path) {
  if (o.genres.empty() || o.n_books == 0 || o.min_sentences == 0 || o.max_sentences < o.min_sentences) {
    throw Error(ErrorKind::kConfig, "invalid synthetic corpus options");
  }
  static const std::vector<std::string> kCommon = {
      "the", "a", "young", "child", "friend", "story", "journey", "family", "home", "learns",
      "finds", "new", "old", "day", "night", "together", "world", "little", "big", "heart"};
  constexpr std::size_t kGenreWords = 24;
  Rng rng(o.seed);
  std::ofstream books(books_path, std::ios::binary | std::ios::trunc);
  std::ofstream reviews(reviews_path, std::ios::binary | std::ios::trunc);
  if (!books || !reviews) throw Error(ErrorKind::kIo, "cannot write synthetic corpus files");
  for (std::size_t i = 0; i < o.n_books; ++i) {
    const std::string& genre = o.genres[i % o.genres.size()];
    std::size_t n_sent = o.min_sentences + rng.below(o.max_sentences - o.min_sentences + 1);
    std::string description;
    for (std::size_t s = 0; s < n_sent; ++s) {
      std::size_t n_words = 6 + rng.below(5);
      std::string sentence;
      for (std::size_t w = 0; w < n_words; ++w) {
        std::string word = rng.uniform() < 0.5 ? genre + std::to_string(rng.below(kGenreWords))
                                               : kCommon[rng.below(kCommon.size())];
        if (w == 0) word[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(word[0])));
        sentence += (w ? " " : "") + word;
      }
      description += (s ? " " : "") + sentence + ".";
    }
    ordered_json b;
    std::string id = "b" + std::to_string(i);
    b["book_id"] = id;
    b["title"] = "Book " + std::to_string(i);
    b["description"] = description;
    b["authors"] = {"a" + std::to_string(i % 37)};
    b["language_code"] = "eng";
    b["is_ebook"] = (i % 3 == 0) ? "true" : "false";
    b["average_rating"] = format_real(3.0 + static_cast<double>(rng.below(200)) / 100.0);
    b["ratings_count"] = std::to_string(rng.below(1000));
    b["popular_shelves"] = {{{"name", "to-read"}, {"count", std::to_string(100 + rng.below(400))}},
                            {{"name", genre}, {"count", std::to_string(1 + rng.below(50))}}};
    books << b.dump() << '\n';
    std::size_t n_reviews = rng.below(3);
    for (std::size_t r = 0; r < n_reviews; ++r) {
      ordered_json rv;
      rv["book_id"] = id;
      rv["review_text"] = "A lovely " + genre + " book for children. Review " + std::to_string(r) + ".";
      rv["rating"] = static_cast<int>(1 + rng.below(5));
      rv["n_votes"] = static_cast<int>(rng.below(20));
      reviews << rv.dump() << '\n';
    }
  }
}

void update_manifest(const RunConfig& c) {
  RunFiles files{c.run_dir};
  ordered_json m;
  m["config_sha256"] = c.digest();
  ordered_json digests = ordered_json::object();
  for (const auto& p : {files.config(), files.corpus(), files.sentences(), files.codebook(), files.sequences(),
                        files.checkpoint(), files.loss(), files.documents(), files.report(), files.details()}) {
    if (fs::exists(p)) digests[p.filename().string()] = file_sha256(p.string());
  }
  if (c.embeddings && fs::exists(*c.embeddings)) digests["external:embeddings"] = file_sha256(c.embeddings->string());
  m["files"] = std::move(digests);
  std::ofstream out(files.manifest(), std::ios::binary | std::ios::trunc);
  out << m.dump(2) << '\n';
}

}  // namespace multibert::pipeline
