#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "binder/errors.hpp"
#include "binder/params.hpp"
#include "binder/rng.hpp"
#include "binder/tensor.hpp"

namespace binder {

struct EncoderConfig {
  int num_layers = 2;
  int num_heads = 4;
  int d_model = 64;
  int ffn_dim = 256;
  int max_positions = 128;
  double dropout = 0.1;

  void validate() const {
    if (num_layers < 1) throw ConfigError("encoder: num_layers must be >= 1");
    if (num_heads < 1 || d_model % num_heads != 0)
      throw ConfigError("encoder: d_model must be divisible by num_heads");
    if (max_positions < 4) throw ConfigError("encoder: max_positions must be >= 4");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("encoder: dropout must be in [0,1)");
  }

  int head_dim() const { return d_model / num_heads; }
};

// Per-layer attention probabilities captured during a forward pass, one
// (len, len) matrix per head per layer.
struct EncodeTrace {
  std::vector<std::vector<Tensor>> attention;  // [layer][head]
};

// Transformer encoder with learned absolute positions and post-layer-norm
// residual blocks. All parameters live under a name prefix so the type and
// text encoders stay fully disjoint within one store.
inline void init_encoder_params(ParamStore& ps, const std::string& prefix,
                                const EncoderConfig& cfg, std::size_t vocab_size,
                                CounterRng& rng, double init_std = 0.02) {
  cfg.validate();
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t f = static_cast<std::size_t>(cfg.ffn_dim);
  ps.add_normal(prefix + "tok_emb", {vocab_size, d}, rng, init_std);
  ps.add_normal(prefix + "pos_emb", {static_cast<std::size_t>(cfg.max_positions), d}, rng,
                init_std);
  ps.add_full(prefix + "emb_ln_g", {d}, 1.0);
  ps.add_zeros(prefix + "emb_ln_b", {d});
  for (int l = 0; l < cfg.num_layers; ++l) {
    const std::string lp = prefix + "l" + std::to_string(l) + ".";
    for (const char* w : {"wq", "wk", "wv", "wo"}) ps.add_normal(lp + w, {d, d}, rng, init_std);
    for (const char* b : {"bq", "bk", "bv", "bo"}) ps.add_zeros(lp + b, {d});
    ps.add_full(lp + "ln1_g", {d}, 1.0);
    ps.add_zeros(lp + "ln1_b", {d});
    ps.add_normal(lp + "ffn_w1", {d, f}, rng, init_std);
    ps.add_zeros(lp + "ffn_b1", {f});
    ps.add_normal(lp + "ffn_w2", {f, d}, rng, init_std);
    ps.add_zeros(lp + "ffn_b2", {d});
    ps.add_full(lp + "ln2_g", {d}, 1.0);
    ps.add_zeros(lp + "ln2_b", {d});
  }
}

namespace detail {

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_bias_rows(matmul(x, w), b);
}

}  // namespace detail

// Encodes [CLS] w1..wn [SEP] ids to hidden states of shape (len, d_model).
// Dropout fires only in train mode and draws from drop_rng, so a fixed
// counter state reproduces the exact mask.
inline Tensor encode_sequence(const ParamStore& ps, const std::string& prefix,
                              const EncoderConfig& cfg, const std::vector<int>& ids, bool train,
                              CounterRng* drop_rng, EncodeTrace* trace = nullptr) {
  cfg.validate();
  const std::size_t len = ids.size();
  if (len > static_cast<std::size_t>(cfg.max_positions))
    throw std::length_error("encode: sequence length " + std::to_string(len) +
                            " exceeds max_positions " + std::to_string(cfg.max_positions));
  if (len == 0) throw ShapeError("encode: empty id list");
  if (train && !drop_rng) throw ConfigError("encode: train mode requires a dropout rng");

  std::vector<int> pos(len);
  for (std::size_t i = 0; i < len; ++i) pos[i] = static_cast<int>(i);

  Tensor x = add(index_rows(ps.get(prefix + "tok_emb"), ids),
                 index_rows(ps.get(prefix + "pos_emb"), pos));
  x = layer_norm(x, ps.get(prefix + "emb_ln_g"), ps.get(prefix + "emb_ln_b"));
  if (train) x = dropout(x, cfg.dropout, *drop_rng, true);

  const std::size_t dh = static_cast<std::size_t>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  if (trace) trace->attention.assign(static_cast<std::size_t>(cfg.num_layers), {});

  for (int l = 0; l < cfg.num_layers; ++l) {
    const std::string lp = prefix + "l" + std::to_string(l) + ".";
    Tensor q = detail::linear(x, ps.get(lp + "wq"), ps.get(lp + "bq"));
    Tensor k = detail::linear(x, ps.get(lp + "wk"), ps.get(lp + "bk"));
    Tensor v = detail::linear(x, ps.get(lp + "wv"), ps.get(lp + "bv"));

    std::vector<Tensor> heads;
    heads.reserve(static_cast<std::size_t>(cfg.num_heads));
    for (int h = 0; h < cfg.num_heads; ++h) {
      const std::size_t off = static_cast<std::size_t>(h) * dh;
      Tensor qh = slice_cols(q, off, dh);
      Tensor kh = slice_cols(k, off, dh);
      Tensor vh = slice_cols(v, off, dh);
      Tensor scores = mul_scalar(matmul(qh, transpose(kh)), scale);
      Tensor probs = softmax_rows(scores);
      if (trace) trace->attention[static_cast<std::size_t>(l)].push_back(probs);
      if (train) probs = dropout(probs, cfg.dropout, *drop_rng, true);
      heads.push_back(matmul(probs, vh));
    }
    Tensor attn = detail::linear(concat_cols(heads), ps.get(lp + "wo"), ps.get(lp + "bo"));
    if (train) attn = dropout(attn, cfg.dropout, *drop_rng, true);
    x = layer_norm(add(x, attn), ps.get(lp + "ln1_g"), ps.get(lp + "ln1_b"));

    Tensor h1 = gelu(detail::linear(x, ps.get(lp + "ffn_w1"), ps.get(lp + "ffn_b1")));
    Tensor h2 = detail::linear(h1, ps.get(lp + "ffn_w2"), ps.get(lp + "ffn_b2"));
    if (train) h2 = dropout(h2, cfg.dropout, *drop_rng, true);
    x = layer_norm(add(x, h2), ps.get(lp + "ln2_g"), ps.get(lp + "ln2_b"));
  }
  return x;
}

// Sequence-summary state: row 0 (the sequence-start marker) of the encoding.
inline Tensor encode_summary(const ParamStore& ps, const std::string& prefix,
                             const EncoderConfig& cfg, const std::vector<int>& ids, bool train,
                             CounterRng* drop_rng) {
  return row(encode_sequence(ps, prefix, cfg, ids, train, drop_rng), 0);
}

}  // namespace binder
