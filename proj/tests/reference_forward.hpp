#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "multibert/encoder.hpp"

namespace mbtest {

// Scalar-loop reference forward in double precision. Looks tensors up by name
// and follows the documented post-LN layout directly.
struct Reference {
  std::vector<std::vector<double>> hidden;  // per position, final states
  std::vector<std::vector<double>> logits;
  std::vector<std::vector<std::vector<double>>> attention;  // [layer*heads][query][key]
};

template <typename T>
inline Reference reference_forward(const multibert::encoder::EncoderModel<T>& m,
                                   const std::vector<multibert::encoder::TokenId>& tokens,
                                   const std::vector<bool>& real) {
  std::map<std::string, std::vector<double>> w;
  for (const auto& t : m.tensors) w[t.name] = std::vector<double>(t.data.begin(), t.data.end());
  const auto& c = m.config;
  const std::size_t H = c.hidden_size, L = tokens.size(), F = c.ffn_size, NH = c.n_heads, D = H / NH;
  auto ln = [&](std::vector<double> v, const std::string& prefix) {
    double mean = 0, var = 0;
    for (double x : v) mean += x;
    mean /= H;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= H;
    for (std::size_t j = 0; j < H; ++j) {
      v[j] = (v[j] - mean) / std::sqrt(var + 1e-5) * w[prefix + ".gain"][j] + w[prefix + ".bias"][j];
    }
    return v;
  };
  auto dense = [&](const std::vector<double>& x, const std::string& prefix, std::size_t in, std::size_t out) {
    std::vector<double> y(out);
    for (std::size_t o = 0; o < out; ++o) {
      double s = w[prefix + ".bias"][o];
      for (std::size_t i = 0; i < in; ++i) s += x[i] * w[prefix + ".weight"][i * out + o];
      y[o] = s;
    }
    return y;
  };
  Reference ref;
  std::vector<std::vector<double>> x(L, std::vector<double>(H));
  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t j = 0; j < H; ++j) {
      x[t][j] = w["embeddings.token"][tokens[t] * H + j] + w["embeddings.position"][t * H + j];
    }
    x[t] = ln(x[t], "embeddings.layer_norm");
  }
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    std::string p = "layer." + std::to_string(l) + ".";
    std::vector<std::vector<double>> q(L), k(L), v(L);
    for (std::size_t t = 0; t < L; ++t) {
      q[t] = dense(x[t], p + "attention.query", H, H);
      k[t] = dense(x[t], p + "attention.key", H, H);
      v[t] = dense(x[t], p + "attention.value", H, H);
    }
    std::vector<std::vector<double>> ctx(L, std::vector<double>(H, 0.0));
    for (std::size_t h = 0; h < NH; ++h) {
      std::vector<std::vector<double>> probs(L, std::vector<double>(L, 0.0));
      for (std::size_t i = 0; i < L; ++i) {
        double total = 0;
        for (std::size_t j = 0; j < L; ++j) {
          if (!real[j]) continue;
          double s = 0;
          for (std::size_t d = 0; d < D; ++d) s += q[i][h * D + d] * k[j][h * D + d];
          probs[i][j] = std::exp(s / std::sqrt(static_cast<double>(D)));
          total += probs[i][j];
        }
        for (std::size_t j = 0; j < L; ++j) probs[i][j] /= total;
        for (std::size_t j = 0; j < L; ++j) {
          for (std::size_t d = 0; d < D; ++d) ctx[i][h * D + d] += probs[i][j] * v[j][h * D + d];
        }
      }
      ref.attention.push_back(probs);
    }
    for (std::size_t t = 0; t < L; ++t) {
      auto a = dense(ctx[t], p + "attention.output", H, H);
      for (std::size_t j = 0; j < H; ++j) a[j] += x[t][j];
      x[t] = ln(a, p + "attention.layer_norm");
      auto pre = dense(x[t], p + "ffn.input", H, F);
      for (auto& z : pre) z = 0.5 * z * (1.0 + std::erf(z / std::sqrt(2.0)));
      auto f = dense(pre, p + "ffn.output", F, H);
      for (std::size_t j = 0; j < H; ++j) f[j] += x[t][j];
      x[t] = ln(f, p + "ffn.layer_norm");
    }
  }
  ref.hidden = x;
  for (std::size_t t = 0; t < L; ++t) {
    std::vector<double> lg(c.vocab_size);
    for (std::size_t v = 0; v < c.vocab_size; ++v) {
      for (std::size_t j = 0; j < H; ++j) lg[v] += x[t][j] * w["embeddings.token"][v * H + j];
    }
    ref.logits.push_back(lg);
  }
  return ref;
}

}  // namespace mbtest
