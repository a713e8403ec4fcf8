#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "multibert/common.hpp"
#include "multibert/sequencer.hpp"

namespace multibert::encoder {

using sequencer::PaddedBatch;
using sequencer::TokenId;
using sequencer::TokenSequence;
using sequencer::TokenVocabulary;

struct EncoderConfig {
  std::uint32_t vocab_size = 204;
  std::uint32_t hidden_size = 768;
  std::uint32_t n_layers = 6;
  std::uint32_t n_heads = 12;
  std::uint32_t ffn_size = 3072;
  std::uint32_t max_positions = sequencer::kDefaultMaxPositions;
  float dropout = 0.0f;
  std::uint32_t seed = 0;

  std::uint32_t head_dim() const { return hidden_size / n_heads; }
  /// Throws a config error when an invariant is violated.
  void validate() const;

  bool operator==(const EncoderConfig&) const = default;
};

/// Closed-form parameter count: token and position tables, the embedding
/// layer-norm, 16 tensors per layer. The output projection is tied.
std::size_t parameter_count(const EncoderConfig& config);

template <typename T>
struct Tensor {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<T> data;
};

/// Parameter tensors in a fixed order. Weight matrices are stored [in, out]
/// so a projection is y = x W + b.
template <typename T>
struct EncoderModel {
  EncoderConfig config;
  std::vector<Tensor<T>> tensors;

  // Slot indices into tensors.
  static constexpr std::size_t kTokenEmbedding = 0;
  static constexpr std::size_t kPositionEmbedding = 1;
  static constexpr std::size_t kEmbedLnGain = 2;
  static constexpr std::size_t kEmbedLnBias = 3;
  static constexpr std::size_t kLayerBase = 4;
  static constexpr std::size_t kPerLayer = 16;
  enum LayerSlot : std::size_t {
    kQueryW, kQueryB, kKeyW, kKeyB, kValueW, kValueB, kAttnOutW, kAttnOutB,
    kAttnLnGain, kAttnLnBias, kFfnInW, kFfnInB, kFfnOutW, kFfnOutB, kFfnLnGain, kFfnLnBias,
  };

  static std::size_t slot(std::size_t layer, LayerSlot s) { return kLayerBase + layer * kPerLayer + s; }

  std::vector<T>& at(std::size_t index) { return tensors[index].data; }
  const std::vector<T>& at(std::size_t index) const { return tensors[index].data; }
  std::vector<T>& at(std::size_t layer, LayerSlot s) { return tensors[slot(layer, s)].data; }
  const std::vector<T>& at(std::size_t layer, LayerSlot s) const { return tensors[slot(layer, s)].data; }

  std::size_t parameter_count() const;
};

/// Normal(0, 0.02) for embedding tables and projection weights, zero biases,
/// unit layer-norm gains. Draws are made in double from Rng(config.seed).
template <typename T>
EncoderModel<T> init_model(const EncoderConfig& config);

/// Same parameters, different scalar type.
template <typename To, typename From>
EncoderModel<To> convert(const EncoderModel<From>& model) {
  EncoderModel<To> out;
  out.config = model.config;
  for (const auto& t : model.tensors) {
    out.tensors.push_back({t.name, t.shape, std::vector<To>(t.data.begin(), t.data.end())});
  }
  return out;
}

template <typename T>
struct ForwardOutput {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<T> hidden;  // batch x length x hidden
  std::vector<T> logits;  // batch x length x vocab
  /// Per layer: batch x heads x length(query) x length(key) probabilities.
  std::vector<std::vector<T>> attention;
};

/// Inference pass (no dropout). Embeddings and a layer-norm, then per layer
/// multi-head self-attention with PAD keys excluded, residual and layer-norm,
/// GELU feed-forward, residual and layer-norm. Logits use the tied token table.
template <typename T>
ForwardOutput<T> forward(const EncoderModel<T>& model, const PaddedBatch& batch);

/// Inputs, targets and the positions that contribute to the loss.
struct ReconstructionBatch {
  PaddedBatch inputs;
  std::vector<TokenId> targets;       // batch x length
  std::vector<std::uint8_t> counted;  // batch x length, 1 where the loss applies
};

/// Targets are the input tokens. With mask_probability 0 every non-PAD
/// position counts. Otherwise each cluster token is replaced by MASK with that
/// probability (at least one per sequence that has cluster tokens) and only
/// masked positions count.
ReconstructionBatch make_reconstruction_batch(const std::vector<TokenSequence>& sequences,
                                              const TokenVocabulary& vocab,
                                              double mask_probability, Rng* rng);

/// Mean cross-entropy over counted positions.
template <typename T>
double reconstruction_loss(const std::vector<T>& logits, std::size_t vocab_size,
                           const std::vector<TokenId>& targets,
                           const std::vector<std::uint8_t>& counted);

template <typename T>
struct LossAndGradient {
  double loss = 0.0;
  std::size_t counted = 0;
  std::vector<std::vector<T>> gradients;  // parallel to model.tensors
};

/// Forward and backward over one batch. Dropout is applied when the model's
/// dropout rate is nonzero and an Rng is supplied.
template <typename T>
LossAndGradient<T> loss_and_gradient(const EncoderModel<T>& model, const ReconstructionBatch& batch,
                                     Rng* dropout_rng = nullptr);

struct TrainConfig {
  std::uint32_t batch_size = 16;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint32_t epochs = 1;
  double mask_probability = 0.0;
  std::optional<double> clip_norm;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Adam with bias correction; state lives beside the parameters it updates.
class AdamOptimizer {
 public:
  AdamOptimizer(const EncoderModel<float>& model, const TrainConfig& config);
  void step(EncoderModel<float>& model, const std::vector<std::vector<float>>& gradients);
  std::uint64_t steps() const { return step_; }

 private:
  double lr_, beta1_, beta2_, epsilon_;
  std::uint64_t step_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

struct TrainResult {
  EncoderModel<float> model;
  std::vector<double> epoch_loss;
};

/// Per epoch: seeded shuffle, batches of batch_size, loss, backward, optional
/// global-norm clipping, Adam step. Throws a non-finite error naming the
/// first offending tensor.
TrainResult train(EncoderModel<float> model, const std::vector<TokenSequence>& sequences,
                  const TrainConfig& config,
                  const std::function<void(std::uint32_t epoch, double loss)>& on_epoch = {});

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t parameters_checked = 0;
};

/// Compares the analytic gradient with central differences of the loss,
/// everything in double precision. Relative error is
/// |a - n| / max(1e-8, |a| + |n|).
GradCheckResult gradient_check(const EncoderModel<double>& model, const ReconstructionBatch& batch,
                               double step = 1e-3);
GradCheckResult gradient_check(const EncoderConfig& config, const ReconstructionBatch& batch,
                               double step = 1e-3);

/// "MBRT" checkpoint: version, config block, named f32 tensors.
void save_checkpoint(const EncoderModel<float>& model, const std::filesystem::path& path);
EncoderModel<float> load_checkpoint(const std::filesystem::path& path);

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr double kLayerNormEps = 1e-5;

}  // namespace multibert::encoder
