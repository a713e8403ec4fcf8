#include "multibert/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

namespace multibert::encoder {

void EncoderConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::kConfig, "encoder config: " + msg); };
  if (n_heads == 0 || hidden_size == 0 || hidden_size % n_heads != 0) {
    fail("hidden_size must be a positive multiple of n_heads");
  }
  if (vocab_size < 5) fail("vocab_size must be at least 5");
  if (max_positions < 2) fail("max_positions must be at least 2");
  if (n_layers == 0) fail("n_layers must be positive");
  if (ffn_size == 0) fail("ffn_size must be positive");
  if (!(dropout >= 0.0f && dropout < 1.0f)) fail("dropout must lie in [0, 1)");
}

std::size_t parameter_count(const EncoderConfig& c) {
  std::size_t h = c.hidden_size, f = c.ffn_size;
  std::size_t per_layer = 4 * (h * h + h) + 2 * (2 * h) + (h * f + f) + (f * h + h);
  return static_cast<std::size_t>(c.vocab_size) * h + static_cast<std::size_t>(c.max_positions) * h +
         2 * h + c.n_layers * per_layer;
}

template <typename T>
std::size_t EncoderModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.data.size();
  return n;
}

namespace {

constexpr double kInitStd = 0.02;

struct TensorSpec {
  std::string name;
  std::vector<std::uint32_t> shape;
  enum class Init { kNormal, kZero, kOne } init;
};

std::vector<TensorSpec> tensor_specs(const EncoderConfig& c) {
  using I = TensorSpec::Init;
  const std::uint32_t h = c.hidden_size, f = c.ffn_size;
  std::vector<TensorSpec> specs = {
      {"embeddings.token", {c.vocab_size, h}, I::kNormal},
      {"embeddings.position", {c.max_positions, h}, I::kNormal},
      {"embeddings.layer_norm.gain", {h}, I::kOne},
      {"embeddings.layer_norm.bias", {h}, I::kZero},
  };
  for (std::uint32_t l = 0; l < c.n_layers; ++l) {
    std::string p = "layer." + std::to_string(l) + ".";
    specs.push_back({p + "attention.query.weight", {h, h}, I::kNormal});
    specs.push_back({p + "attention.query.bias", {h}, I::kZero});
    specs.push_back({p + "attention.key.weight", {h, h}, I::kNormal});
    specs.push_back({p + "attention.key.bias", {h}, I::kZero});
    specs.push_back({p + "attention.value.weight", {h, h}, I::kNormal});
    specs.push_back({p + "attention.value.bias", {h}, I::kZero});
    specs.push_back({p + "attention.output.weight", {h, h}, I::kNormal});
    specs.push_back({p + "attention.output.bias", {h}, I::kZero});
    specs.push_back({p + "attention.layer_norm.gain", {h}, I::kOne});
    specs.push_back({p + "attention.layer_norm.bias", {h}, I::kZero});
    specs.push_back({p + "ffn.input.weight", {h, f}, I::kNormal});
    specs.push_back({p + "ffn.input.bias", {f}, I::kZero});
    specs.push_back({p + "ffn.output.weight", {f, h}, I::kNormal});
    specs.push_back({p + "ffn.output.bias", {h}, I::kZero});
    specs.push_back({p + "ffn.layer_norm.gain", {h}, I::kOne});
    specs.push_back({p + "ffn.layer_norm.bias", {h}, I::kZero});
  }
  return specs;
}

std::size_t element_count(const std::vector<std::uint32_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

// ---- dense kernels over row-major buffers --------------------------------

// Y[n, out] = X[n, in] W[in, out] + b[out]
template <typename T>
void linear(const T* x, const T* w, const T* b, T* y, std::size_t n, std::size_t in, std::size_t out) {
  for (std::size_t r = 0; r < n; ++r) {
    T* yr = y + r * out;
    for (std::size_t o = 0; o < out; ++o) yr[o] = b[o];
    const T* xr = x + r * in;
    for (std::size_t i = 0; i < in; ++i) {
      T xi = xr[i];
      const T* wi = w + i * out;
      for (std::size_t o = 0; o < out; ++o) yr[o] += xi * wi[o];
    }
  }
}

// dX = dY W^T (overwrites), dW += X^T dY, db += sum_rows dY
template <typename T>
void linear_backward(const T* x, const T* w, const T* dy, T* dx, T* dw, T* db, std::size_t n,
                     std::size_t in, std::size_t out) {
  for (std::size_t r = 0; r < n; ++r) {
    const T* dyr = dy + r * out;
    const T* xr = x + r * in;
    T* dxr = dx + r * in;
    for (std::size_t o = 0; o < out; ++o) db[o] += dyr[o];
    for (std::size_t i = 0; i < in; ++i) {
      const T* wi = w + i * out;
      T* dwi = dw + i * out;
      T xi = xr[i];
      T acc = 0;
      for (std::size_t o = 0; o < out; ++o) {
        acc += dyr[o] * wi[o];
        dwi[o] += xi * dyr[o];
      }
      dxr[i] = acc;
    }
  }
}

template <typename T>
void layer_norm(const T* x, const T* gain, const T* bias, T* y, T* xhat, T* rstd, std::size_t n,
                std::size_t h) {
  for (std::size_t r = 0; r < n; ++r) {
    const T* xr = x + r * h;
    T mean = 0;
    for (std::size_t j = 0; j < h; ++j) mean += xr[j];
    mean /= static_cast<T>(h);
    T var = 0;
    for (std::size_t j = 0; j < h; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(h);
    T rs = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
    rstd[r] = rs;
    for (std::size_t j = 0; j < h; ++j) {
      T xh = (xr[j] - mean) * rs;
      xhat[r * h + j] = xh;
      y[r * h + j] = gain[j] * xh + bias[j];
    }
  }
}

template <typename T>
void layer_norm_backward(const T* dy, const T* xhat, const T* rstd, const T* gain, T* dx, T* dgain,
                         T* dbias, std::size_t n, std::size_t h) {
  for (std::size_t r = 0; r < n; ++r) {
    const T* dyr = dy + r * h;
    const T* xr = xhat + r * h;
    T mean_d = 0, mean_dx = 0;
    for (std::size_t j = 0; j < h; ++j) {
      T dxh = dyr[j] * gain[j];
      dgain[j] += dyr[j] * xr[j];
      dbias[j] += dyr[j];
      mean_d += dxh;
      mean_dx += dxh * xr[j];
    }
    mean_d /= static_cast<T>(h);
    mean_dx /= static_cast<T>(h);
    for (std::size_t j = 0; j < h; ++j) {
      T dxh = dyr[j] * gain[j];
      dx[r * h + j] = rstd[r] * (dxh - mean_d - xr[j] * mean_dx);
    }
  }
}

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <typename T>
T gelu_grad(T x) {
  const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>)) + x * inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
}

// ---- forward with cache ---------------------------------------------------

template <typename T>
struct LayerCache {
  std::vector<T> input, q, k, v, probs, ctx, drop_attn, attn_xhat, attn_rstd, y, pre, act, drop_ffn,
      ffn_xhat, ffn_rstd;
};

template <typename T>
struct Cache {
  std::size_t batch = 0, length = 0;
  std::vector<T> embed_xhat, embed_rstd;
  std::vector<LayerCache<T>> layers;
  std::vector<T> hidden;
  std::vector<T> logits;
};

void check_batch(const EncoderConfig& c, const PaddedBatch& batch) {
  if (batch.tokens.size() != batch.batch * batch.length || batch.mask.size() != batch.tokens.size()) {
    throw Error(ErrorKind::kShape, "padded batch storage does not match batch x length");
  }
  if (batch.length > c.max_positions) {
    throw Error(ErrorKind::kContract, "batch length " + std::to_string(batch.length) +
                                          " exceeds max_positions " + std::to_string(c.max_positions));
  }
  for (auto t : batch.tokens) {
    if (t >= c.vocab_size) {
      throw Error(ErrorKind::kContract, "token id " + std::to_string(t) + " outside vocabulary of " +
                                            std::to_string(c.vocab_size));
    }
  }
}

template <typename T>
std::vector<T> dropout_mask(std::size_t n, double rate, Rng& rng) {
  std::vector<T> m(n);
  T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& x : m) x = rng.uniform() < rate ? T(0) : keep_scale;
  return m;
}

template <typename T>
Cache<T> run_forward(const EncoderModel<T>& model, const PaddedBatch& batch, Rng* dropout_rng) {
  using M = EncoderModel<T>;
  const auto& c = model.config;
  check_batch(c, batch);
  const std::size_t B = batch.batch, L = batch.length, H = c.hidden_size, F = c.ffn_size,
                    V = c.vocab_size, NH = c.n_heads, D = c.head_dim(), N = B * L;
  const bool use_dropout = dropout_rng != nullptr && c.dropout > 0.0f;
  const T scale = T(1) / std::sqrt(static_cast<T>(D));

  Cache<T> cache;
  cache.batch = B;
  cache.length = L;
  std::vector<T> x(N * H);
  const auto& tok = model.at(M::kTokenEmbedding);
  const auto& pos = model.at(M::kPositionEmbedding);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < L; ++t) {
      std::size_t id = batch.token(b, t);
      for (std::size_t j = 0; j < H; ++j) x[(b * L + t) * H + j] = tok[id * H + j] + pos[t * H + j];
    }
  }
  cache.embed_xhat.resize(N * H);
  cache.embed_rstd.resize(N);
  std::vector<T> h_state(N * H);
  layer_norm(x.data(), model.at(M::kEmbedLnGain).data(), model.at(M::kEmbedLnBias).data(), h_state.data(),
             cache.embed_xhat.data(), cache.embed_rstd.data(), N, H);

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    LayerCache<T> lc;
    lc.input = h_state;
    lc.q.resize(N * H);
    lc.k.resize(N * H);
    lc.v.resize(N * H);
    linear(h_state.data(), model.at(l, M::kQueryW).data(), model.at(l, M::kQueryB).data(), lc.q.data(), N, H, H);
    linear(h_state.data(), model.at(l, M::kKeyW).data(), model.at(l, M::kKeyB).data(), lc.k.data(), N, H, H);
    linear(h_state.data(), model.at(l, M::kValueW).data(), model.at(l, M::kValueB).data(), lc.v.data(), N, H, H);

    lc.probs.assign(B * NH * L * L, T(0));
    lc.ctx.assign(N * H, T(0));
    std::vector<T> scores(L);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t hd = 0; hd < NH; ++hd) {
        for (std::size_t i = 0; i < L; ++i) {
          const T* qi = lc.q.data() + (b * L + i) * H + hd * D;
          T max_score = -std::numeric_limits<T>::infinity();
          for (std::size_t j = 0; j < L; ++j) {
            if (!batch.real(b, j)) continue;
            const T* kj = lc.k.data() + (b * L + j) * H + hd * D;
            T s = 0;
            for (std::size_t d = 0; d < D; ++d) s += qi[d] * kj[d];
            scores[j] = s * scale;
            max_score = std::max(max_score, scores[j]);
          }
          T* p = lc.probs.data() + ((b * NH + hd) * L + i) * L;
          T total = 0;
          for (std::size_t j = 0; j < L; ++j) {
            if (!batch.real(b, j)) continue;
            p[j] = std::exp(scores[j] - max_score);
            total += p[j];
          }
          if (total > T(0)) {
            for (std::size_t j = 0; j < L; ++j) p[j] /= total;
          }
          T* ci = lc.ctx.data() + (b * L + i) * H + hd * D;
          for (std::size_t j = 0; j < L; ++j) {
            if (p[j] == T(0)) continue;
            const T* vj = lc.v.data() + (b * L + j) * H + hd * D;
            for (std::size_t d = 0; d < D; ++d) ci[d] += p[j] * vj[d];
          }
        }
      }
    }

    std::vector<T> attn_out(N * H);
    linear(lc.ctx.data(), model.at(l, M::kAttnOutW).data(), model.at(l, M::kAttnOutB).data(), attn_out.data(), N,
           H, H);
    if (use_dropout) {
      lc.drop_attn = dropout_mask<T>(N * H, c.dropout, *dropout_rng);
      for (std::size_t i = 0; i < N * H; ++i) attn_out[i] *= lc.drop_attn[i];
    }
    for (std::size_t i = 0; i < N * H; ++i) attn_out[i] += h_state[i];
    lc.y.resize(N * H);
    lc.attn_xhat.resize(N * H);
    lc.attn_rstd.resize(N);
    layer_norm(attn_out.data(), model.at(l, M::kAttnLnGain).data(), model.at(l, M::kAttnLnBias).data(), lc.y.data(),
               lc.attn_xhat.data(), lc.attn_rstd.data(), N, H);

    lc.pre.resize(N * F);
    lc.act.resize(N * F);
    linear(lc.y.data(), model.at(l, M::kFfnInW).data(), model.at(l, M::kFfnInB).data(), lc.pre.data(), N, H, F);
    for (std::size_t i = 0; i < N * F; ++i) lc.act[i] = gelu(lc.pre[i]);
    std::vector<T> ffn_out(N * H);
    linear(lc.act.data(), model.at(l, M::kFfnOutW).data(), model.at(l, M::kFfnOutB).data(), ffn_out.data(), N, F,
           H);
    if (use_dropout) {
      lc.drop_ffn = dropout_mask<T>(N * H, c.dropout, *dropout_rng);
      for (std::size_t i = 0; i < N * H; ++i) ffn_out[i] *= lc.drop_ffn[i];
    }
    for (std::size_t i = 0; i < N * H; ++i) ffn_out[i] += lc.y[i];
    lc.ffn_xhat.resize(N * H);
    lc.ffn_rstd.resize(N);
    layer_norm(ffn_out.data(), model.at(l, M::kFfnLnGain).data(), model.at(l, M::kFfnLnBias).data(), h_state.data(),
               lc.ffn_xhat.data(), lc.ffn_rstd.data(), N, H);
    cache.layers.push_back(std::move(lc));
  }

  cache.hidden = h_state;
  cache.logits.assign(N * V, T(0));
  for (std::size_t r = 0; r < N; ++r) {
    const T* hr = h_state.data() + r * H;
    for (std::size_t v = 0; v < V; ++v) {
      const T* ev = tok.data() + v * H;
      T s = 0;
      for (std::size_t j = 0; j < H; ++j) s += hr[j] * ev[j];
      cache.logits[r * V + v] = s;
    }
  }
  return cache;
}

template <typename T>
LossAndGradient<T> backward(const EncoderModel<T>& model, const ReconstructionBatch& rb, const Cache<T>& cache) {
  using M = EncoderModel<T>;
  const auto& c = model.config;
  const auto& batch = rb.inputs;
  const std::size_t B = cache.batch, L = cache.length, H = c.hidden_size, F = c.ffn_size, V = c.vocab_size,
                    NH = c.n_heads, D = c.head_dim(), N = B * L;
  const T scale = T(1) / std::sqrt(static_cast<T>(D));

  LossAndGradient<T> out;
  out.loss = reconstruction_loss(cache.logits, V, rb.targets, rb.counted);
  for (auto flag : rb.counted) out.counted += flag ? 1 : 0;
  out.gradients.resize(model.tensors.size());
  for (std::size_t i = 0; i < model.tensors.size(); ++i) out.gradients[i].assign(model.tensors[i].data.size(), T(0));
  auto& g = out.gradients;

  // Cross-entropy gradient: (softmax - onehot) / counted.
  std::vector<T> dlogits(N * V, T(0));
  const T inv_count = T(1) / static_cast<T>(out.counted);
  for (std::size_t r = 0; r < N; ++r) {
    if (!rb.counted[r]) continue;
    const T* lr = cache.logits.data() + r * V;
    T mx = *std::max_element(lr, lr + V);
    T total = 0;
    for (std::size_t v = 0; v < V; ++v) total += std::exp(lr[v] - mx);
    for (std::size_t v = 0; v < V; ++v) dlogits[r * V + v] = std::exp(lr[v] - mx) / total * inv_count;
    dlogits[r * V + rb.targets[r]] -= inv_count;
  }

  const auto& tok = model.at(M::kTokenEmbedding);
  auto& dtok = g[M::kTokenEmbedding];
  std::vector<T> dh(N * H, T(0));
  for (std::size_t r = 0; r < N; ++r) {
    if (!rb.counted[r]) continue;
    const T* hr = cache.hidden.data() + r * H;
    T* dhr = dh.data() + r * H;
    for (std::size_t v = 0; v < V; ++v) {
      T dl = dlogits[r * V + v];
      const T* ev = tok.data() + v * H;
      T* dev = dtok.data() + v * H;
      for (std::size_t j = 0; j < H; ++j) {
        dhr[j] += dl * ev[j];
        dev[j] += dl * hr[j];
      }
    }
  }

  std::vector<T> d_sum(N * H), d_tmp(N * H), d_act(N * F);
  for (std::size_t li = c.n_layers; li-- > 0;) {
    const auto& lc = cache.layers[li];
    // ffn layer-norm
    layer_norm_backward(dh.data(), lc.ffn_xhat.data(), lc.ffn_rstd.data(), model.at(li, M::kFfnLnGain).data(),
                        d_sum.data(), g[M::slot(li, M::kFfnLnGain)].data(), g[M::slot(li, M::kFfnLnBias)].data(), N,
                        H);
    // residual: d_sum flows to y directly and through the ffn branch
    std::vector<T> d_ffn_out = d_sum;
    if (!lc.drop_ffn.empty()) {
      for (std::size_t i = 0; i < N * H; ++i) d_ffn_out[i] *= lc.drop_ffn[i];
    }
    linear_backward(lc.act.data(), model.at(li, M::kFfnOutW).data(), d_ffn_out.data(), d_act.data(),
                    g[M::slot(li, M::kFfnOutW)].data(), g[M::slot(li, M::kFfnOutB)].data(), N, F, H);
    for (std::size_t i = 0; i < N * F; ++i) d_act[i] *= gelu_grad(lc.pre[i]);
    linear_backward(lc.y.data(), model.at(li, M::kFfnInW).data(), d_act.data(), d_tmp.data(),
                    g[M::slot(li, M::kFfnInW)].data(), g[M::slot(li, M::kFfnInB)].data(), N, H, F);
    std::vector<T> dy(N * H);
    for (std::size_t i = 0; i < N * H; ++i) dy[i] = d_sum[i] + d_tmp[i];

    // attention layer-norm
    layer_norm_backward(dy.data(), lc.attn_xhat.data(), lc.attn_rstd.data(), model.at(li, M::kAttnLnGain).data(),
                        d_sum.data(), g[M::slot(li, M::kAttnLnGain)].data(), g[M::slot(li, M::kAttnLnBias)].data(),
                        N, H);
    std::vector<T> d_attn_out = d_sum;
    if (!lc.drop_attn.empty()) {
      for (std::size_t i = 0; i < N * H; ++i) d_attn_out[i] *= lc.drop_attn[i];
    }
    std::vector<T> dctx(N * H);
    linear_backward(lc.ctx.data(), model.at(li, M::kAttnOutW).data(), d_attn_out.data(), dctx.data(),
                    g[M::slot(li, M::kAttnOutW)].data(), g[M::slot(li, M::kAttnOutB)].data(), N, H, H);

    std::vector<T> dq(N * H, T(0)), dk(N * H, T(0)), dv(N * H, T(0));
    std::vector<T> dp(L);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t hd = 0; hd < NH; ++hd) {
        for (std::size_t i = 0; i < L; ++i) {
          const T* p = lc.probs.data() + ((b * NH + hd) * L + i) * L;
          const T* dci = dctx.data() + (b * L + i) * H + hd * D;
          T weighted = 0;
          for (std::size_t j = 0; j < L; ++j) {
            if (!batch.real(b, j)) {
              dp[j] = 0;
              continue;
            }
            const T* vj = lc.v.data() + (b * L + j) * H + hd * D;
            T* dvj = dv.data() + (b * L + j) * H + hd * D;
            T s = 0;
            for (std::size_t d = 0; d < D; ++d) {
              s += dci[d] * vj[d];
              dvj[d] += p[j] * dci[d];
            }
            dp[j] = s;
            weighted += p[j] * s;
          }
          const T* qi = lc.q.data() + (b * L + i) * H + hd * D;
          T* dqi = dq.data() + (b * L + i) * H + hd * D;
          for (std::size_t j = 0; j < L; ++j) {
            if (!batch.real(b, j)) continue;
            T ds = p[j] * (dp[j] - weighted) * scale;
            const T* kj = lc.k.data() + (b * L + j) * H + hd * D;
            T* dkj = dk.data() + (b * L + j) * H + hd * D;
            for (std::size_t d = 0; d < D; ++d) {
              dqi[d] += ds * kj[d];
              dkj[d] += ds * qi[d];
            }
          }
        }
      }
    }

    // residual into the layer input plus the three projections
    std::vector<T> d_in = d_sum;
    linear_backward(lc.input.data(), model.at(li, M::kQueryW).data(), dq.data(), d_tmp.data(),
                    g[M::slot(li, M::kQueryW)].data(), g[M::slot(li, M::kQueryB)].data(), N, H, H);
    for (std::size_t i = 0; i < N * H; ++i) d_in[i] += d_tmp[i];
    linear_backward(lc.input.data(), model.at(li, M::kKeyW).data(), dk.data(), d_tmp.data(),
                    g[M::slot(li, M::kKeyW)].data(), g[M::slot(li, M::kKeyB)].data(), N, H, H);
    for (std::size_t i = 0; i < N * H; ++i) d_in[i] += d_tmp[i];
    linear_backward(lc.input.data(), model.at(li, M::kValueW).data(), dv.data(), d_tmp.data(),
                    g[M::slot(li, M::kValueW)].data(), g[M::slot(li, M::kValueB)].data(), N, H, H);
    for (std::size_t i = 0; i < N * H; ++i) d_in[i] += d_tmp[i];
    dh = std::move(d_in);
  }

  std::vector<T> dx(N * H);
  layer_norm_backward(dh.data(), cache.embed_xhat.data(), cache.embed_rstd.data(), model.at(M::kEmbedLnGain).data(),
                      dx.data(), g[M::kEmbedLnGain].data(), g[M::kEmbedLnBias].data(), N, H);
  auto& dpos = g[M::kPositionEmbedding];
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < L; ++t) {
      std::size_t id = batch.token(b, t);
      const T* dxr = dx.data() + (b * L + t) * H;
      for (std::size_t j = 0; j < H; ++j) {
        dtok[id * H + j] += dxr[j];
        dpos[t * H + j] += dxr[j];
      }
    }
  }
  return out;
}

}  // namespace

template <typename T>
EncoderModel<T> init_model(const EncoderConfig& config) {
  config.validate();
  EncoderModel<T> model;
  model.config = config;
  Rng rng(config.seed);
  for (auto& spec : tensor_specs(config)) {
    Tensor<T> t{spec.name, spec.shape, std::vector<T>(element_count(spec.shape))};
    switch (spec.init) {
      case TensorSpec::Init::kNormal:
        for (auto& x : t.data) x = static_cast<T>(kInitStd * rng.normal());
        break;
      case TensorSpec::Init::kZero:
        break;
      case TensorSpec::Init::kOne:
        std::fill(t.data.begin(), t.data.end(), T(1));
        break;
    }
    model.tensors.push_back(std::move(t));
  }
  return model;
}

template <typename T>
ForwardOutput<T> forward(const EncoderModel<T>& model, const PaddedBatch& batch) {
  auto cache = run_forward(model, batch, nullptr);
  ForwardOutput<T> out;
  out.batch = cache.batch;
  out.length = cache.length;
  out.hidden = std::move(cache.hidden);
  out.logits = std::move(cache.logits);
  for (auto& lc : cache.layers) out.attention.push_back(std::move(lc.probs));
  return out;
}

ReconstructionBatch make_reconstruction_batch(const std::vector<TokenSequence>& sequences,
                                              const TokenVocabulary& vocab, double mask_probability, Rng* rng) {
  std::size_t length = 0;
  for (const auto& s : sequences) length = std::max(length, s.tokens.size());
  ReconstructionBatch rb;
  rb.inputs = sequencer::pad_batch(sequences, length, vocab);
  rb.targets = rb.inputs.tokens;
  rb.counted = rb.inputs.mask;
  if (mask_probability <= 0.0) return rb;
  if (rng == nullptr) throw Error(ErrorKind::kContract, "masking requires an Rng");
  std::fill(rb.counted.begin(), rb.counted.end(), 0);
  for (std::size_t b = 0; b < rb.inputs.batch; ++b) {
    std::vector<std::size_t> cluster_positions;
    bool any = false;
    for (std::size_t t = 0; t < length; ++t) {
      std::size_t i = b * length + t;
      if (!vocab.is_cluster(rb.inputs.tokens[i])) continue;
      cluster_positions.push_back(i);
      if (rng->uniform() < mask_probability) {
        rb.inputs.tokens[i] = vocab.mask();
        rb.counted[i] = 1;
        any = true;
      }
    }
    if (!any && !cluster_positions.empty()) {
      std::size_t i = cluster_positions[rng->below(cluster_positions.size())];
      rb.inputs.tokens[i] = vocab.mask();
      rb.counted[i] = 1;
    }
  }
  return rb;
}

template <typename T>
double reconstruction_loss(const std::vector<T>& logits, std::size_t vocab_size, const std::vector<TokenId>& targets,
                           const std::vector<std::uint8_t>& counted) {
  if (targets.size() != counted.size() || logits.size() != targets.size() * vocab_size) {
    throw Error(ErrorKind::kShape, "reconstruction_loss: logits, targets and mask disagree in shape");
  }
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (!counted[r]) continue;
    if (targets[r] >= vocab_size) throw Error(ErrorKind::kContract, "target id outside vocabulary");
    const T* lr = logits.data() + r * vocab_size;
    double mx = static_cast<double>(*std::max_element(lr, lr + vocab_size));
    double sum = 0.0;
    for (std::size_t v = 0; v < vocab_size; ++v) sum += std::exp(static_cast<double>(lr[v]) - mx);
    total += mx + std::log(sum) - static_cast<double>(lr[targets[r]]);
    ++n;
  }
  if (n == 0) throw Error(ErrorKind::kContract, "reconstruction_loss: no counted (non-PAD) positions");
  return total / static_cast<double>(n);
}

template <typename T>
LossAndGradient<T> loss_and_gradient(const EncoderModel<T>& model, const ReconstructionBatch& batch,
                                     Rng* dropout_rng) {
  if (batch.targets.size() != batch.inputs.tokens.size() || batch.counted.size() != batch.inputs.tokens.size()) {
    throw Error(ErrorKind::kShape, "reconstruction batch storage mismatch");
  }
  auto cache = run_forward(model, batch.inputs, dropout_rng);
  return backward(model, batch, cache);
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw Error(ErrorKind::kConfig, "batch_size must be at least 1");
  if (!(learning_rate >= 0.0)) throw Error(ErrorKind::kConfig, "learning_rate must be nonnegative");
  if (!(mask_probability >= 0.0 && mask_probability <= 1.0)) {
    throw Error(ErrorKind::kConfig, "mask_probability must lie in [0, 1]");
  }
  if (clip_norm && !(*clip_norm > 0.0)) throw Error(ErrorKind::kConfig, "clip_norm must be positive");
}

AdamOptimizer::AdamOptimizer(const EncoderModel<float>& model, const TrainConfig& config)
    : lr_(config.learning_rate), beta1_(config.beta1), beta2_(config.beta2), epsilon_(config.epsilon) {
  for (const auto& t : model.tensors) {
    m_.emplace_back(t.data.size(), 0.0f);
    v_.emplace_back(t.data.size(), 0.0f);
  }
}

void AdamOptimizer::step(EncoderModel<float>& model, const std::vector<std::vector<float>>& gradients) {
  ++step_;
  const double correction1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double correction2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  for (std::size_t t = 0; t < model.tensors.size(); ++t) {
    auto& p = model.tensors[t].data;
    const auto& g = gradients[t];
    auto& m = m_[t];
    auto& v = v_[t];
    for (std::size_t i = 0; i < p.size(); ++i) {
      double gi = g[i];
      m[i] = static_cast<float>(beta1_ * m[i] + (1.0 - beta1_) * gi);
      v[i] = static_cast<float>(beta2_ * v[i] + (1.0 - beta2_) * gi * gi);
      double mhat = m[i] / correction1;
      double vhat = v[i] / correction2;
      double update = lr_ * mhat / (std::sqrt(vhat) + epsilon_);
      if (update != 0.0) p[i] = static_cast<float>(p[i] - update);
    }
  }
}

TrainResult train(EncoderModel<float> model, const std::vector<TokenSequence>& sequences, const TrainConfig& config,
                  const std::function<void(std::uint32_t, double)>& on_epoch) {
  config.validate();
  model.config.validate();
  if (sequences.empty()) throw Error(ErrorKind::kContract, "train: no sequences");
  if (model.config.vocab_size < 4) throw Error(ErrorKind::kConfig, "vocabulary too small");
  TokenVocabulary vocab{model.config.vocab_size - 4};
  Rng rng(config.seed);
  AdamOptimizer adam(model, config);
  TrainResult result;
  std::vector<std::size_t> order(sequences.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::uint32_t epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle(order, rng);
    double weighted_loss = 0.0;
    std::size_t weight = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<TokenSequence> members;
      for (std::size_t i = start; i < end; ++i) members.push_back(sequences[order[i]]);
      auto rb = make_reconstruction_batch(members, vocab, config.mask_probability, &rng);
      if (std::none_of(rb.counted.begin(), rb.counted.end(), [](std::uint8_t c) { return c != 0; })) continue;
      auto lg = loss_and_gradient(model, rb, &rng);
      if (!std::isfinite(lg.loss)) {
        throw Error(ErrorKind::kNonFinite, "non-finite loss at epoch " + std::to_string(epoch + 1) + ", step " +
                                               std::to_string(adam.steps() + 1));
      }
      double norm2 = 0.0;
      for (std::size_t t = 0; t < lg.gradients.size(); ++t) {
        if (!all_finite(lg.gradients[t])) {
          throw Error(ErrorKind::kNonFinite, "non-finite gradient in tensor '" + model.tensors[t].name +
                                                 "' at epoch " + std::to_string(epoch + 1) + ", step " +
                                                 std::to_string(adam.steps() + 1));
        }
        for (float x : lg.gradients[t]) norm2 += static_cast<double>(x) * x;
      }
      if (config.clip_norm && std::sqrt(norm2) > *config.clip_norm) {
        auto factor = static_cast<float>(*config.clip_norm / std::sqrt(norm2));
        for (auto& gt : lg.gradients) {
          for (auto& x : gt) x *= factor;
        }
      }
      adam.step(model, lg.gradients);
      for (const auto& t : model.tensors) {
        if (!all_finite(t.data)) {
          throw Error(ErrorKind::kNonFinite, "non-finite parameter in tensor '" + t.name + "' after step " +
                                                 std::to_string(adam.steps()));
        }
      }
      weighted_loss += lg.loss * static_cast<double>(lg.counted);
      weight += lg.counted;
    }
    double epoch_loss = weight ? weighted_loss / static_cast<double>(weight) : 0.0;
    result.epoch_loss.push_back(epoch_loss);
    if (on_epoch) on_epoch(epoch + 1, epoch_loss);
  }
  result.model = std::move(model);
  return result;
}

GradCheckResult gradient_check(const EncoderModel<double>& model, const ReconstructionBatch& batch, double step) {
  auto analytic = loss_and_gradient(model, batch);
  EncoderModel<double> probe = model;
  auto loss_at = [&] {
    auto cache = run_forward(probe, batch.inputs, nullptr);
    return reconstruction_loss(cache.logits, probe.config.vocab_size, batch.targets, batch.counted);
  };
  GradCheckResult result;
  for (std::size_t t = 0; t < probe.tensors.size(); ++t) {
    auto& data = probe.tensors[t].data;
    for (std::size_t i = 0; i < data.size(); ++i) {
      double saved = data[i];
      data[i] = saved + step;
      double plus = loss_at();
      data[i] = saved - step;
      double minus = loss_at();
      data[i] = saved;
      double numeric = (plus - minus) / (2.0 * step);
      double a = analytic.gradients[t][i];
      double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      ++result.parameters_checked;
      if (result.worst_tensor.empty() || rel > result.max_relative_error) {
        result.max_relative_error = rel;
        result.worst_tensor = probe.tensors[t].name;
        result.worst_index = i;
        result.analytic = a;
        result.numeric = numeric;
      }
    }
  }
  return result;
}

GradCheckResult gradient_check(const EncoderConfig& config, const ReconstructionBatch& batch, double step) {
  return gradient_check(init_model<double>(config), batch, step);
}

namespace {
constexpr char kCheckpointMagic[4] = {'M', 'B', 'R', 'T'};
}

void save_checkpoint(const EncoderModel<float>& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string());
  const auto& c = model.config;
  binio::write_bytes(out, {kCheckpointMagic, 4});
  binio::write_u32(out, kCheckpointVersion);
  binio::write_u32(out, c.vocab_size);
  binio::write_u32(out, c.hidden_size);
  binio::write_u32(out, c.n_layers);
  binio::write_u32(out, c.n_heads);
  binio::write_u32(out, c.ffn_size);
  binio::write_u32(out, c.max_positions);
  binio::write_f32(out, c.dropout);
  binio::write_u32(out, c.seed);
  binio::write_u32(out, static_cast<std::uint32_t>(model.tensors.size()));
  for (const auto& t : model.tensors) {
    binio::write_u32(out, static_cast<std::uint32_t>(t.name.size()));
    binio::write_bytes(out, t.name);
    binio::write_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) binio::write_u32(out, d);
    binio::write_bytes(out, {reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float)});
  }
  if (!out) throw Error(ErrorKind::kIo, "write failure on " + path.string());
}

EncoderModel<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot read " + path.string());
  binio::Reader reader(in, path.string());
  if (reader.bytes(4) != std::string_view(kCheckpointMagic, 4)) {
    throw Error(ErrorKind::kFormat, path.string() + ": bad magic, expected MBRT");
  }
  if (auto v = reader.u32(); v != kCheckpointVersion) {
    throw Error(ErrorKind::kFormat, path.string() + ": unsupported version " + std::to_string(v));
  }
  EncoderModel<float> model;
  auto& c = model.config;
  c.vocab_size = reader.u32();
  c.hidden_size = reader.u32();
  c.n_layers = reader.u32();
  c.n_heads = reader.u32();
  c.ffn_size = reader.u32();
  c.max_positions = reader.u32();
  c.dropout = reader.f32();
  c.seed = reader.u32();
  c.validate();
  auto specs = tensor_specs(c);
  std::uint32_t count = reader.u32();
  if (count != specs.size()) {
    throw Error(ErrorKind::kFormat, path.string() + ": expected " + std::to_string(specs.size()) + " tensors, found " +
                                        std::to_string(count));
  }
  for (const auto& spec : specs) {
    Tensor<float> t;
    t.name = reader.bytes(reader.u32());
    std::uint32_t rank = reader.u32();
    for (std::uint32_t r = 0; r < rank; ++r) t.shape.push_back(reader.u32());
    if (t.name != spec.name || t.shape != spec.shape) {
      throw Error(ErrorKind::kFormat, path.string() + ": tensor '" + t.name + "' does not match expected '" +
                                          spec.name + "'");
    }
    t.data.resize(element_count(t.shape));
    reader.f32_array(t.data);
    if (!all_finite(t.data)) throw Error(ErrorKind::kFormat, path.string() + ": non-finite values in " + t.name);
    model.tensors.push_back(std::move(t));
  }
  if (!reader.at_end()) {
    throw Error(ErrorKind::kFormat, path.string() + ": trailing bytes at offset " + std::to_string(reader.offset()));
  }
  return model;
}

template struct EncoderModel<float>;
template struct EncoderModel<double>;
template EncoderModel<float> init_model<float>(const EncoderConfig&);
template EncoderModel<double> init_model<double>(const EncoderConfig&);
template ForwardOutput<float> forward<float>(const EncoderModel<float>&, const PaddedBatch&);
template ForwardOutput<double> forward<double>(const EncoderModel<double>&, const PaddedBatch&);
template double reconstruction_loss<float>(const std::vector<float>&, std::size_t, const std::vector<TokenId>&,
                                           const std::vector<std::uint8_t>&);
template double reconstruction_loss<double>(const std::vector<double>&, std::size_t, const std::vector<TokenId>&,
                                            const std::vector<std::uint8_t>&);
template LossAndGradient<float> loss_and_gradient<float>(const EncoderModel<float>&, const ReconstructionBatch&,
                                                         Rng*);
template LossAndGradient<double> loss_and_gradient<double>(const EncoderModel<double>&, const ReconstructionBatch&,
                                                           Rng*);

}  // namespace multibert::encoder
