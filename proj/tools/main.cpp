#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "multibert/common.hpp"
#include "multibert/pipeline.hpp"

namespace pl = multibert::pipeline;

int main(int argc, char** argv) {
  CLI::App app{"multibert: cluster-token document embeddings for book recommendation"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  int threads = -1;
  app.add_option("-c,--config", config_path, "JSON config (partial configs overlay the defaults)");
  app.add_option("-s,--set", overrides, "override a config key, e.g. --set codebook.k=20")->take_all();
  app.add_option("-t,--threads", threads, "worker threads (0 = hardware)")->check(CLI::NonNegativeNumber);

  auto* ingest = app.add_subcommand("ingest", "merge books and reviews, derive genres");
  auto* embed_sentences = app.add_subcommand("embed-sentences", "synthetic sentence embeddings for the corpus");
  auto* sentences = app.add_subcommand("sentences", "print book_id<TAB>sentence lines for an external embedder");
  auto* build_codebook = app.add_subcommand("build-codebook", "k-means codebook over sentence embeddings");

  auto* train = app.add_subcommand("train", "train the encoder on cluster-token sequences");
  bool resume = false;
  train->add_flag("--resume", resume, "continue from the run's checkpoint");

  auto* embed = app.add_subcommand("embed", "compose document embeddings");

  auto* recommend = app.add_subcommand("recommend", "nearest books for a query book");
  std::string query;
  std::size_t k = 10;
  recommend->add_option("book_id", query, "query book")->required();
  recommend->add_option("-k,--top", k, "number of results")->check(CLI::PositiveNumber);

  auto* evaluate = app.add_subcommand("evaluate", "precision@k for multi-bert and both baselines");

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check on a tiny encoder");
  double step = 1e-3;
  gradcheck->add_option("--step", step, "central-difference step");

  auto* synth = app.add_subcommand("synth-corpus", "write a genre-structured synthetic corpus");
  pl::SyntheticCorpusOptions synth_options;
  std::string synth_books, synth_reviews;
  synth->add_option("--books", synth_books, "books output")->required();
  synth->add_option("--reviews", synth_reviews, "reviews output")->required();
  synth->add_option("--n-books", synth_options.n_books)->check(CLI::PositiveNumber);
  synth->add_option("--genres", synth_options.genres)->delimiter(',');
  synth->add_option("--seed", synth_options.seed);

  auto* show_config = app.add_subcommand("config", "print the effective configuration");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gradcheck) {
      auto result = pl::cmd_gradcheck(step, std::cout);
      return result.max_relative_error < 1e-4 ? 0 : 1;
    }
    if (*synth) {
      pl::write_synthetic_corpus(synth_options, synth_books, synth_reviews);
      std::cerr << "synth-corpus: books=" << synth_options.n_books << '\n';
      return 0;
    }
    if (threads >= 0) overrides.push_back("threads=" + std::to_string(threads));
    auto config = pl::load_config(config_path.empty() ? std::nullopt : std::optional<pl::fs::path>(config_path),
                                  overrides);
    if (*show_config) {
      std::cout << config.to_json().dump(2) << '\n';
    } else if (*ingest) {
      pl::cmd_ingest(config, std::cerr);
    } else if (*embed_sentences) {
      pl::cmd_embed_sentences(config, std::cerr);
    } else if (*sentences) {
      pl::cmd_dump_sentences(config, std::cout);
    } else if (*build_codebook) {
      pl::cmd_build_codebook(config, std::cerr);
    } else if (*train) {
      pl::cmd_train(config, resume, std::cerr);
    } else if (*embed) {
      pl::cmd_embed(config, std::cerr);
    } else if (*recommend) {
      pl::cmd_recommend(config, query, k, std::cout);
    } else if (*evaluate) {
      pl::cmd_evaluate(config, std::cout);
    }
  } catch (const multibert::Error& e) {
    std::cerr << "error: " << multibert::to_string(e.kind()) << ": " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
