#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <map>

#include "multibert/common.hpp"
#include "multibert/encoder.hpp"
#include "multibert/pipeline.hpp"
#include "reference_forward.hpp"
#include "test_util.hpp"

using namespace multibert;
using namespace multibert::encoder;
using mbtest::reference_forward;
using mbtest::TempDir;

namespace {

EncoderConfig small_config() {
  EncoderConfig c;
  c.vocab_size = 12;
  c.hidden_size = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.ffn_size = 16;
  c.max_positions = 16;
  c.seed = 3;
  return c;
}

std::vector<TokenSequence> random_sequences(std::uint64_t seed, std::size_t n, std::uint32_t k,
                                            std::size_t max_len) {
  Rng rng(seed);
  TokenVocabulary v{k};
  std::vector<TokenSequence> out;
  for (std::size_t i = 0; i < n; ++i) {
    TokenSequence s{"s" + std::to_string(i), {v.bos()}};
    std::size_t len = 1 + rng.below(max_len);
    for (std::size_t j = 0; j < len; ++j) s.tokens.push_back(static_cast<TokenId>(rng.below(k)));
    s.tokens.push_back(v.eos());
    out.push_back(s);
  }
  return out;
}

}  // namespace

// ---- configuration and initialization ---------------------------------------

TEST(EncoderConfig, InvariantsAreEnforced) {
  auto c = small_config();
  EXPECT_NO_THROW(c.validate());
  c.n_heads = 3;
  EXPECT_EQ(mbtest::error_kind_of([&] { c.validate(); }), ErrorKind::kConfig);
  c = small_config();
  c.vocab_size = 4;
  EXPECT_EQ(mbtest::error_kind_of([&] { c.validate(); }), ErrorKind::kConfig);
  c = small_config();
  c.max_positions = 1;
  EXPECT_EQ(mbtest::error_kind_of([&] { c.validate(); }), ErrorKind::kConfig);
  c = small_config();
  c.dropout = 1.0f;
  EXPECT_EQ(mbtest::error_kind_of([&] { c.validate(); }), ErrorKind::kConfig);
  EXPECT_EQ(mbtest::error_kind_of([&] { init_model<float>(c); }), ErrorKind::kConfig);
}

TEST(EncoderConfig, ParameterCountMatchesHandCount) {
  // Hand count: token 20x32 + position 16x32 + embedding LN 2x32 = 1216;
  // per layer 4 x (32x32 + 32) + 2x32 + (32x64 + 64) + (64x32 + 32) + 2x32 = 8544.
  EncoderConfig c;
  c.vocab_size = 20;
  c.hidden_size = 32;
  c.n_heads = 4;
  c.n_layers = 2;
  c.ffn_size = 64;
  c.max_positions = 16;
  EXPECT_EQ(parameter_count(c), 18304u);
  auto m = init_model<float>(c);
  EXPECT_EQ(m.parameter_count(), 18304u);
  std::size_t total = 0;
  for (const auto& t : m.tensors) total += t.data.size();
  EXPECT_EQ(total, 18304u);
}

TEST(InitModel, DeterministicAndFollowsScheme) {
  auto c = small_config();
  auto a = init_model<float>(c), b = init_model<float>(c);
  ASSERT_EQ(a.tensors.size(), b.tensors.size());
  for (std::size_t t = 0; t < a.tensors.size(); ++t) EXPECT_EQ(a.tensors[t].data, b.tensors[t].data);
  c.seed = 4;
  EXPECT_NE(init_model<float>(c).tensors[0].data, a.tensors[0].data);

  double sum = 0, sq = 0;
  std::size_t n = 0;
  for (const auto& t : a.tensors) {
    bool gain = t.name.ends_with(".gain"), bias = t.name.ends_with(".bias");
    for (float v : t.data) {
      if (gain) {
        ASSERT_EQ(v, 1.0f) << t.name;
      } else if (bias) {
        ASSERT_EQ(v, 0.0f) << t.name;
      } else {
        sum += v;
        sq += double(v) * v;
        ++n;
      }
    }
  }
  EXPECT_NEAR(sum / n, 0.0, 0.003);
  EXPECT_NEAR(std::sqrt(sq / n), 0.02, 0.002);
}

TEST(InitModel, FloatAndDoubleShareTheDraws) {
  auto c = small_config();
  auto f = init_model<float>(c);
  auto d = init_model<double>(c);
  for (std::size_t t = 0; t < f.tensors.size(); ++t) {
    for (std::size_t i = 0; i < f.tensors[t].data.size(); ++i) {
      ASSERT_EQ(f.tensors[t].data[i], static_cast<float>(d.tensors[t].data[i]));
    }
  }
}

// ---- forward ------------------------------------------------------------------

TEST(Forward, MatchesScalarReference) {
  auto c = small_config();
  auto model = init_model<double>(c);
  // Larger weights than the init so every path contributes visibly.
  Rng rng(1);
  for (auto& t : model.tensors) {
    for (auto& v : t.data) v += 0.3 * rng.normal();
  }
  auto seqs = random_sequences(2, 3, 8, 6);
  TokenVocabulary vocab{8};
  std::size_t L = 0;
  for (const auto& s : seqs) L = std::max(L, s.length());
  auto batch = sequencer::pad_batch(seqs, L, vocab);
  auto out = forward(model, batch);
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    std::vector<bool> real(L);
    std::vector<TokenId> toks(L);
    for (std::size_t t = 0; t < L; ++t) {
      real[t] = batch.real(b, t);
      toks[t] = batch.token(b, t);
    }
    auto ref = reference_forward(model, toks, real);
    for (std::size_t t = 0; t < L; ++t) {
      for (std::size_t j = 0; j < c.hidden_size; ++j) {
        EXPECT_NEAR(out.hidden[(b * L + t) * c.hidden_size + j], ref.hidden[t][j], 1e-10);
      }
      for (std::size_t v = 0; v < c.vocab_size; ++v) {
        EXPECT_NEAR(out.logits[(b * L + t) * c.vocab_size + v], ref.logits[t][v], 1e-10);
      }
    }
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        for (std::size_t i = 0; i < L; ++i) {
          for (std::size_t j = 0; j < L; ++j) {
            EXPECT_NEAR(out.attention[l][((b * c.n_heads + h) * L + i) * L + j],
                        ref.attention[l * c.n_heads + h][i][j], 1e-12);
          }
        }
      }
    }
  }
}

TEST(Forward, FloatPathAgreesWithDoubleReference) {
  auto model = init_model<float>(small_config());
  auto seqs = random_sequences(3, 1, 8, 9);
  TokenVocabulary vocab{8};
  auto batch = sequencer::pad_batch(seqs, seqs[0].length(), vocab);
  auto out = forward(model, batch);
  auto ref = reference_forward(model, seqs[0].tokens, std::vector<bool>(seqs[0].length(), true));
  for (std::size_t t = 0; t < seqs[0].length(); ++t) {
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(out.hidden[t * 8 + j], ref.hidden[t][j], 1e-5);
  }
}

TEST(Forward, TwoPositionIntegerModel) {
  // 1 layer, 1 head, hidden 4, vocab 8 with small integer weights on the
  // sequence [BOS, EOS] = [5, 6].
  EncoderConfig c = pipeline::gradcheck_encoder_config();
  auto model = init_model<double>(c);
  Rng rng(0);
  for (auto& t : model.tensors) {
    if (t.name.ends_with(".gain")) continue;
    for (auto& v : t.data) v = static_cast<double>(static_cast<int>(rng.below(5)) - 2);
  }
  PaddedBatch batch{1, 2, {5, 6}, {1, 1}};
  auto out = forward(model, batch);
  auto ref = reference_forward(model, {5, 6}, {true, true});
  for (std::size_t t = 0; t < 2; ++t) {
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out.hidden[t * 4 + j], ref.hidden[t][j], 1e-12);
  }
  // The two probabilities of each query row are a logistic of the score gap.
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_NEAR(out.attention[0][i * 2] + out.attention[0][i * 2 + 1], 1.0, 1e-15);
  }

  // With query and key projections zeroed every score is 0, so each position
  // attends 1/2 to both keys and the context is the mean of the value rows.
  auto flat = model;
  for (auto slot : {EncoderModel<double>::kQueryW, EncoderModel<double>::kQueryB, EncoderModel<double>::kKeyW,
                    EncoderModel<double>::kKeyB}) {
    for (auto& v : flat.at(0, slot)) v = 0.0;
  }
  auto even = forward(flat, batch);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(even.attention[0][i], 0.5);
}

TEST(Forward, AttentionRowsSumToOneAndPadKeysGetZero) {
  auto model = init_model<float>(small_config());
  auto seqs = random_sequences(4, 5, 8, 10);
  TokenVocabulary vocab{8};
  auto batch = sequencer::pad_batch(seqs, 12, vocab);
  auto out = forward(model, batch);
  const std::size_t L = 12, NH = 2;
  for (const auto& probs : out.attention) {
    for (std::size_t b = 0; b < 5; ++b) {
      for (std::size_t h = 0; h < NH; ++h) {
        for (std::size_t i = 0; i < L; ++i) {
          double total = 0;
          for (std::size_t j = 0; j < L; ++j) {
            float p = probs[((b * NH + h) * L + i) * L + j];
            if (!batch.real(b, j)) {
              EXPECT_EQ(p, 0.0f);
            }
            total += p;
          }
          EXPECT_NEAR(total, 1.0, 1e-5);
        }
      }
    }
  }
}

TEST(Forward, TrailingPaddingDoesNotChangeRealPositions) {
  auto model = init_model<float>(small_config());
  auto seqs = random_sequences(5, 4, 8, 6);
  TokenVocabulary vocab{8};
  std::size_t L = 0;
  for (const auto& s : seqs) L = std::max(L, s.length());
  auto tight = forward(model, sequencer::pad_batch(seqs, L, vocab));
  auto loose = forward(model, sequencer::pad_batch(seqs, 16, vocab));
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    for (std::size_t t = 0; t < seqs[b].length(); ++t) {
      for (std::size_t j = 0; j < 8; ++j) {
        EXPECT_NEAR(tight.hidden[(b * L + t) * 8 + j], loose.hidden[(b * 16 + t) * 8 + j], 1e-5);
      }
    }
  }
}

TEST(Forward, IdenticalSequencesGiveIdenticalRows) {
  auto model = init_model<float>(small_config());
  auto s = random_sequences(6, 1, 8, 7)[0];
  TokenVocabulary vocab{8};
  auto out = forward(model, sequencer::pad_batch({s, s}, s.length(), vocab));
  std::size_t row = s.length() * 8;
  for (std::size_t i = 0; i < row; ++i) EXPECT_EQ(out.hidden[i], out.hidden[row + i]);
}

TEST(Forward, ContractErrors) {
  auto model = init_model<float>(small_config());
  PaddedBatch bad_token{1, 2, {5, 12}, {1, 1}};
  EXPECT_EQ(mbtest::error_kind_of([&] { forward(model, bad_token); }), ErrorKind::kContract);
  PaddedBatch too_long{1, 17, std::vector<TokenId>(17, 1), std::vector<std::uint8_t>(17, 1)};
  EXPECT_EQ(mbtest::error_kind_of([&] { forward(model, too_long); }), ErrorKind::kContract);
}

// ---- loss ---------------------------------------------------------------------

TEST(Loss, UniformLogitsGiveLogV) {
  std::vector<float> logits(3 * 24, 0.25f);
  std::vector<TokenId> targets = {0, 5, 23};
  EXPECT_NEAR(reconstruction_loss(logits, 24, targets, {1, 1, 1}), std::log(24.0), 1e-12);
}

TEST(Loss, ConfidentCorrectLogitsApproachZero) {
  std::vector<double> logits(2 * 5, 0.0);
  logits[0 * 5 + 3] = 60.0;
  logits[1 * 5 + 1] = 60.0;
  EXPECT_LT(reconstruction_loss(logits, 5, {3, 1}, {1, 1}), 1e-20);
}

TEST(Loss, MatchesScalarLoopCrossEntropy) {
  Rng rng(7);
  std::vector<float> logits(6 * 5);
  for (auto& v : logits) v = static_cast<float>(3.0 * rng.normal());
  std::vector<TokenId> targets = {0, 4, 2, 1, 3, 3};
  std::vector<std::uint8_t> counted = {1, 1, 0, 1, 1, 0};
  double total = 0;
  int n = 0;
  for (int r = 0; r < 6; ++r) {
    if (!counted[r]) continue;
    double z = 0;
    for (int v = 0; v < 5; ++v) z += std::exp(double(logits[r * 5 + v]));
    total += -(logits[r * 5 + targets[r]] - std::log(z));
    ++n;
  }
  EXPECT_NEAR(reconstruction_loss(logits, 5, targets, counted), total / n, 1e-6);
}

TEST(Loss, AllPaddingIsContractError) {
  std::vector<float> logits(2 * 5, 0.0f);
  EXPECT_EQ(mbtest::error_kind_of([&] { reconstruction_loss(logits, 5, {0, 0}, {0, 0}); }), ErrorKind::kContract);
}

TEST(Loss, InitialLossUnderMaskingIsNearLogVocabulary) {
  auto model = init_model<float>(pipeline::toy_encoder_config(24));
  auto seqs = random_sequences(8, 64, 20, 12);
  Rng rng(1);
  auto rb = make_reconstruction_batch(seqs, TokenVocabulary{20}, 1.0, &rng);
  auto out = forward(model, rb.inputs);
  EXPECT_NEAR(reconstruction_loss(out.logits, 24, rb.targets, rb.counted), std::log(24.0), 0.1);
}

TEST(Loss, InitialIdentityLossFavoursTheVisibleToken) {
  // Tied output embeddings score the input token's own row higher by about
  // |e|^2 / sigma after layer-norm, so the identity loss starts below ln V.
  auto model = init_model<float>(pipeline::toy_encoder_config(24));
  auto seqs = random_sequences(8, 64, 20, 12);
  auto rb = make_reconstruction_batch(seqs, TokenVocabulary{20}, 0.0, nullptr);
  auto out = forward(model, rb.inputs);
  double loss = reconstruction_loss(out.logits, 24, rb.targets, rb.counted);
  EXPECT_LT(loss, std::log(24.0) - 0.2);
  EXPECT_GT(loss, 2.0);
}

// ---- masking ------------------------------------------------------------------

TEST(Masking, IdentityModeCountsEveryRealPosition) {
  auto seqs = random_sequences(9, 4, 10, 5);
  auto rb = make_reconstruction_batch(seqs, TokenVocabulary{10}, 0.0, nullptr);
  EXPECT_EQ(rb.counted, rb.inputs.mask);
  EXPECT_EQ(rb.targets, rb.inputs.tokens);
}

TEST(Masking, MaskedPositionsAreTheOnlyCountedOnes) {
  TokenVocabulary v{10};
  auto seqs = random_sequences(10, 20, 10, 8);
  Rng rng(1);
  auto rb = make_reconstruction_batch(seqs, v, 0.15, &rng);
  for (std::size_t b = 0; b < 20; ++b) {
    std::size_t masked = 0;
    for (std::size_t t = 0; t < rb.inputs.length; ++t) {
      std::size_t i = b * rb.inputs.length + t;
      bool is_mask = rb.inputs.tokens[i] == v.mask();
      EXPECT_EQ(bool(rb.counted[i]), is_mask);
      if (is_mask) {
        ++masked;
        EXPECT_TRUE(v.is_cluster(rb.targets[i]));
      }
    }
    EXPECT_GE(masked, 1u);
  }
  auto all = make_reconstruction_batch(seqs, v, 1.0, &rng);
  for (std::size_t i = 0; i < all.targets.size(); ++i) {
    if (v.is_cluster(all.targets[i])) {
      EXPECT_EQ(all.inputs.tokens[i], v.mask());
    }
  }
  EXPECT_EQ(mbtest::error_kind_of([&] { make_reconstruction_batch(seqs, v, 0.5, nullptr); }), ErrorKind::kContract);
}

// ---- gradients ----------------------------------------------------------------

TEST(GradCheck, TinyModelBelowTolerance) {
  auto r = gradient_check(pipeline::gradcheck_model(), pipeline::gradcheck_batch(), 1e-3);
  EXPECT_EQ(r.parameters_checked, parameter_count(pipeline::gradcheck_encoder_config()));
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst_tensor << "[" << r.worst_index << "]";
}

TEST(GradCheck, DoublingTheStepChangesErrorSmoothly) {
  auto a = gradient_check(pipeline::gradcheck_model(), pipeline::gradcheck_batch(), 1e-3);
  auto b = gradient_check(pipeline::gradcheck_model(), pipeline::gradcheck_batch(), 2e-3);
  ASSERT_GT(a.max_relative_error, 0.0);
  double ratio = b.max_relative_error / a.max_relative_error;
  EXPECT_GT(ratio, 0.1);
  EXPECT_LT(ratio, 10.0);
}

TEST(GradCheck, TrainingInitPassesAtSmallerStep) {
  // At the 0.02 init the truncation error of a 1e-3 step dominates; shrinking
  // the step exposes the analytic gradient.
  auto model = init_model<double>(pipeline::gradcheck_encoder_config());
  auto coarse = gradient_check(model, pipeline::gradcheck_batch(), 1e-3);
  auto fine = gradient_check(model, pipeline::gradcheck_batch(), 1e-4);
  EXPECT_LT(fine.max_relative_error, coarse.max_relative_error);
  EXPECT_LT(fine.max_relative_error, 1e-3);
}

TEST(GradCheck, ZeroProjectionsDoNotDivideByZero) {
  using M = EncoderModel<double>;
  int passing = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto model = pipeline::gradcheck_model(seed);
    for (auto slot : {M::kQueryW, M::kKeyW, M::kValueW, M::kAttnOutW, M::kFfnInW, M::kFfnOutW}) {
      for (auto& v : model.at(0, slot)) v = 0.0;
    }
    auto r = gradient_check(model, pipeline::gradcheck_batch(), 1e-3);
    ASSERT_TRUE(std::isfinite(r.max_relative_error)) << seed;
    passing += r.max_relative_error < 1e-4;
    // A smaller step removes the truncation term, leaving only rounding.
    auto fine = gradient_check(model, pipeline::gradcheck_batch(), 1e-4);
    EXPECT_LT(fine.max_relative_error, 1e-5) << seed << " " << fine.worst_tensor << "[" << fine.worst_index << "]";
  }
  EXPECT_GE(passing, 8);
}

TEST(GradCheck, MaskedObjectiveAndPaddedBatch) {
  auto model = pipeline::gradcheck_model(5);
  TokenVocabulary v{4};
  std::vector<TokenSequence> seqs = {{"a", {v.bos(), 1, 3, v.eos()}}, {"b", {v.bos(), 2, v.eos()}}};
  Rng rng(2);
  auto rb = make_reconstruction_batch(seqs, v, 0.5, &rng);
  auto r = gradient_check(model, rb, 1e-3);
  EXPECT_LT(r.max_relative_error, 1e-4) << r.worst_tensor << "[" << r.worst_index << "]";
}

TEST(Gradient, LossMatchesForwardLoss) {
  auto model = init_model<double>(small_config());
  auto seqs = random_sequences(11, 3, 8, 5);
  auto rb = make_reconstruction_batch(seqs, TokenVocabulary{8}, 0.0, nullptr);
  auto lg = loss_and_gradient(model, rb);
  auto out = forward(model, rb.inputs);
  EXPECT_NEAR(lg.loss, reconstruction_loss(out.logits, 12, rb.targets, rb.counted), 1e-12);
  ASSERT_EQ(lg.gradients.size(), model.tensors.size());
}

// ---- optimizer and training -----------------------------------------------------

TEST(Adam, ZeroLearningRateOrGradientLeavesParameters) {
  auto model = init_model<float>(small_config());
  auto before = model;
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  AdamOptimizer adam(model, cfg);
  std::vector<std::vector<float>> zero;
  for (const auto& t : model.tensors) zero.emplace_back(t.data.size(), 0.0f);
  for (int i = 0; i < 5; ++i) adam.step(model, zero);
  for (std::size_t t = 0; t < model.tensors.size(); ++t) EXPECT_EQ(model.tensors[t].data, before.tensors[t].data);

  cfg.learning_rate = 0.0;
  cfg.epochs = 3;
  auto r = train(before, random_sequences(17, 20, 8, 6), cfg);
  for (std::size_t t = 0; t < model.tensors.size(); ++t) EXPECT_EQ(r.model.tensors[t].data, before.tensors[t].data);
  cfg.learning_rate = -1.0;
  EXPECT_EQ(mbtest::error_kind_of([&] { cfg.validate(); }), ErrorKind::kConfig);
}

TEST(Adam, FirstStepMovesEachParameterByLearningRate) {
  // With bias correction the first update is lr * g / (|g| + eps) = ~lr sign(g).
  auto model = init_model<float>(small_config());
  auto before = model;
  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  AdamOptimizer adam(model, cfg);
  std::vector<std::vector<float>> grads;
  for (const auto& t : model.tensors) grads.emplace_back(t.data.size(), -0.5f);
  adam.step(model, grads);
  for (std::size_t t = 0; t < model.tensors.size(); ++t) {
    for (std::size_t i = 0; i < model.tensors[t].data.size(); ++i) {
      ASSERT_NEAR(model.tensors[t].data[i] - before.tensors[t].data[i], 1e-2, 1e-6);
    }
  }
}

TEST(Train, SameSeedSameHistoryAndParameters) {
  auto cfg = small_config();
  auto seqs = random_sequences(12, 40, 8, 8);
  TrainConfig t;
  t.epochs = 3;
  t.learning_rate = 1e-3;
  auto a = train(init_model<float>(cfg), seqs, t);
  auto b = train(init_model<float>(cfg), seqs, t);
  EXPECT_EQ(a.epoch_loss, b.epoch_loss);
  for (std::size_t i = 0; i < a.model.tensors.size(); ++i) EXPECT_EQ(a.model.tensors[i].data, b.model.tensors[i].data);
  ASSERT_EQ(a.epoch_loss.size(), 3u);
}

TEST(Train, ThreadCountDoesNotChangeTheResult) {
  auto cfg = small_config();
  auto seqs = random_sequences(13, 40, 8, 8);
  TrainConfig t;
  t.epochs = 2;
  set_thread_limit(1);
  auto a = train(init_model<float>(cfg), seqs, t);
  set_thread_limit(3);
  auto b = train(init_model<float>(cfg), seqs, t);
  set_thread_limit(0);
  EXPECT_EQ(a.epoch_loss, b.epoch_loss);
  for (std::size_t i = 0; i < a.model.tensors.size(); ++i) EXPECT_EQ(a.model.tensors[i].data, b.model.tensors[i].data);
}

TEST(Train, LossDecreasesOnToyData) {
  auto cfg = pipeline::toy_encoder_config(24);
  auto seqs = random_sequences(14, 64, 20, 10);
  TrainConfig t;
  t.epochs = 8;
  t.learning_rate = 1e-3;
  std::vector<double> seen;
  auto r = train(init_model<float>(cfg), seqs, t, [&](std::uint32_t epoch, double loss) {
    EXPECT_EQ(epoch, seen.size() + 1);
    seen.push_back(loss);
  });
  EXPECT_EQ(seen, r.epoch_loss);
  EXPECT_LT(r.epoch_loss.back(), 0.8 * r.epoch_loss.front());
}

TEST(Train, MaskedObjectiveAndDropoutAndClippingRun) {
  auto cfg = small_config();
  cfg.dropout = 0.1f;
  auto seqs = random_sequences(15, 30, 8, 8);
  TrainConfig t;
  t.epochs = 2;
  t.mask_probability = 0.15;
  t.clip_norm = 0.5;
  auto r = train(init_model<float>(cfg), seqs, t);
  ASSERT_EQ(r.epoch_loss.size(), 2u);
  for (double l : r.epoch_loss) EXPECT_TRUE(std::isfinite(l));
  auto again = train(init_model<float>(cfg), seqs, t);
  EXPECT_EQ(r.epoch_loss, again.epoch_loss);
}

TEST(Train, NonFiniteParameterAbortsNamingTensor) {
  auto model = init_model<float>(small_config());
  model.at(0, EncoderModel<float>::kValueW)[3] = std::numeric_limits<float>::infinity();
  TrainConfig t;
  try {
    train(model, random_sequences(16, 4, 8, 4), t);
    FAIL() << "expected a non-finite error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNonFinite);
  }
  auto nan_model = init_model<float>(small_config());
  nan_model.at(0, EncoderModel<float>::kFfnOutB)[0] = std::numeric_limits<float>::quiet_NaN();
  try {
    train(nan_model, random_sequences(16, 4, 8, 4), t);
    FAIL() << "expected a non-finite error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNonFinite);
  }
}

TEST(Train, EmptySequenceListIsContractError) {
  TrainConfig t;
  EXPECT_EQ(mbtest::error_kind_of([&] { train(init_model<float>(small_config()), {}, t); }), ErrorKind::kContract);
}

// ---- checkpoints --------------------------------------------------------------

TEST(Checkpoint, RoundTripIsExact) {
  TempDir dir("mbrt");
  auto cfg = small_config();
  cfg.dropout = 0.25f;
  auto model = init_model<float>(cfg);
  save_checkpoint(model, dir / "m.mbrt");
  auto back = load_checkpoint(dir / "m.mbrt");
  EXPECT_EQ(back.config, model.config);
  ASSERT_EQ(back.tensors.size(), model.tensors.size());
  for (std::size_t i = 0; i < model.tensors.size(); ++i) {
    EXPECT_EQ(back.tensors[i].name, model.tensors[i].name);
    EXPECT_EQ(back.tensors[i].shape, model.tensors[i].shape);
    EXPECT_EQ(back.tensors[i].data, model.tensors[i].data);
  }
  save_checkpoint(back, dir / "again.mbrt");
  EXPECT_EQ(mbtest::slurp(dir / "m.mbrt"), mbtest::slurp(dir / "again.mbrt"));
}

TEST(Checkpoint, HeaderLayout) {
  TempDir dir("mbrt");
  auto model = init_model<float>(small_config());
  save_checkpoint(model, dir / "m.mbrt");
  auto bytes = mbtest::slurp(dir / "m.mbrt");
  EXPECT_EQ(bytes.substr(0, 4), "MBRT");
  auto u32_at = [&](std::size_t off) {
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + off, 4);
    return v;
  };
  EXPECT_EQ(u32_at(4), kCheckpointVersion);
  EXPECT_EQ(u32_at(8), 12u);   // vocab
  EXPECT_EQ(u32_at(12), 8u);   // hidden
  EXPECT_EQ(u32_at(16), 2u);   // layers
  EXPECT_EQ(u32_at(20), 2u);   // heads
  EXPECT_EQ(u32_at(24), 16u);  // ffn
  EXPECT_EQ(u32_at(28), 16u);  // positions
  EXPECT_EQ(u32_at(36), 3u);   // seed
  EXPECT_EQ(u32_at(40), model.tensors.size());
}

TEST(Checkpoint, CorruptFilesAreFormatErrors) {
  TempDir dir("mbrt");
  save_checkpoint(init_model<float>(small_config()), dir / "m.mbrt");
  auto bytes = mbtest::slurp(dir / "m.mbrt");
  mbtest::spit(dir / "cut.mbrt", bytes.substr(0, bytes.size() / 2));
  EXPECT_EQ(mbtest::error_kind_of([&] { load_checkpoint(dir / "cut.mbrt"); }), ErrorKind::kFormat);
  mbtest::spit(dir / "magic.mbrt", "XBRT" + bytes.substr(4));
  EXPECT_EQ(mbtest::error_kind_of([&] { load_checkpoint(dir / "magic.mbrt"); }), ErrorKind::kFormat);
  EXPECT_EQ(mbtest::error_kind_of([&] { load_checkpoint(dir / "none.mbrt"); }), ErrorKind::kIo);
}
