#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "autocirc/dataset.hpp"
#include "autocirc/model.hpp"
#include "autocirc/numerics.hpp"
#include "autocirc/rng.hpp"

namespace testutil {

using namespace autocirc;

inline ModelConfig random_config(Rng& rng, bool allow_mlp = true, bool allow_norm = true) {
  ModelConfig c;
  c.n_layers = 1 + static_cast<std::uint32_t>(rng.below(2));
  c.n_heads = 1 + static_cast<std::uint32_t>(rng.below(3));
  c.d_model = 4 + static_cast<std::uint32_t>(rng.below(4));
  c.d_head = 2 + static_cast<std::uint32_t>(rng.below(3));
  c.d_mlp = allow_mlp && rng.below(2) ? 3 + static_cast<std::uint32_t>(rng.below(4)) : 0;
  c.vocab = 5 + static_cast<std::uint32_t>(rng.below(4));
  c.n_ctx = 6;
  c.activation = rng.below(2) ? num::Activation::kGelu : num::Activation::kIdentity;
  c.norm = allow_norm && rng.below(2) ? NormKind::kPreLayerNorm : NormKind::kNone;
  c.pos_embed = rng.below(3) ? PosEmbedKind::kLearned : PosEmbedKind::kNone;
  c.attn_scale = default_attn_scale(c.d_head);
  return c;
}

inline TokenSeq random_tokens(Rng& rng, std::size_t len, std::size_t vocab) {
  TokenSeq t(len);
  for (auto& x : t) x = static_cast<Token>(rng.below(vocab));
  return t;
}

/// KL dataset measuring every position.
inline TaskDataset random_dataset(Rng& rng, const ModelConfig& c, std::size_t n, std::size_t len,
                                  MetricKind metric = MetricKind::kKl) {
  TaskDataset d;
  d.task = "random";
  d.metric = metric;
  for (std::size_t i = 0; i < n; ++i) {
    TaskExample ex;
    ex.clean = random_tokens(rng, len, c.vocab);
    ex.corrupted = random_tokens(rng, len, c.vocab);
    for (std::size_t p = 0; p < len; ++p) {
      ex.targets.positions.push_back(p);
      ex.targets.correct.push_back({static_cast<Token>(rng.below(c.vocab))});
      ex.targets.incorrect.push_back({static_cast<Token>(rng.below(c.vocab))});
      std::vector<double> target(c.vocab);
      for (auto& v : target) v = rng.normal();
      ex.targets.target.push_back(target);
    }
    d.examples.push_back(std::move(ex));
  }
  return d;
}

inline double max_abs(const num::Tensor& t) {
  double m = 0.0;
  for (double v : t.values()) m = std::max(m, std::abs(v));
  return m;
}

/// Max-norm error relative to the oracle's max-norm.
inline double rel_error(const num::Tensor& got, const num::Tensor& oracle) {
  return num::max_abs_diff(got, oracle) / std::max(max_abs(oracle), 1e-6);
}

inline num::Tensor random_tensor(Rng& rng, num::Shape shape, double scale = 1.0) {
  num::Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
  return t;
}

}  // namespace testutil
