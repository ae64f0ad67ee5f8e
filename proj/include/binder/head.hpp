#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "binder/errors.hpp"
#include "binder/params.hpp"
#include "binder/tensor.hpp"

namespace binder {

struct HeadConfig {
  int d_model = 64;
  int d_proj = 128;
  int width_dim = 128;      // rows of the width table are this wide
  int max_positions = 128;  // width table row count; width index is j - i
  bool shared_linears = false;

  void validate() const {
    if (d_model < 1 || d_proj < 1 || width_dim < 1) throw ConfigError("head: dims must be >= 1");
    if (max_positions < 1) throw ConfigError("head: max_positions must be >= 1");
  }
};

// Projections of the per-type summary states: e scores whole spans, e_B start
// positions, e_Q end positions.
struct TypeEmbeddings {
  Tensor e;    // (K, d_proj)
  Tensor e_b;  // (K, d_proj)
  Tensor e_q;  // (K, d_proj)
};

struct TokenProjections {
  Tensor u;  // (len, d_proj), start channel
  Tensor v;  // (len, d_proj), end channel
};

inline void init_head_params(ParamStore& ps, const std::string& prefix, const HeadConfig& cfg,
                             CounterRng& rng, double init_std = 0.02,
                             double tau_init = 0.07) {
  cfg.validate();
  const std::size_t d = static_cast<std::size_t>(cfg.d_model);
  const std::size_t p = static_cast<std::size_t>(cfg.d_proj);
  const std::size_t m = static_cast<std::size_t>(cfg.width_dim);
  auto add_linear = [&](const std::string& name, std::size_t in, std::size_t out) {
    ps.add_normal(prefix + name + "_w", {in, out}, rng, init_std);
    ps.add_zeros(prefix + name + "_b", {out});
  };
  if (cfg.shared_linears) {
    add_linear("linear_E", d, p);
    add_linear("linear_T", d, p);
  } else {
    add_linear("linear_E", d, p);
    add_linear("linear_EB", d, p);
    add_linear("linear_EQ", d, p);
    add_linear("linear_TB", d, p);
    add_linear("linear_TQ", d, p);
  }
  add_linear("linear_S", 2 * d + m, p);
  ps.add_normal(prefix + "width_table", {static_cast<std::size_t>(cfg.max_positions), m}, rng,
                init_std);
  for (const char* t : {"log_tau_start", "log_tau_end", "log_tau_span"})
    ps.add_full(prefix + t, {1}, std::log(tau_init));
}

namespace detail {
inline Tensor head_linear(const ParamStore& ps, const std::string& prefix,
                          const std::string& name, const Tensor& x) {
  return add_bias_rows(matmul(x, ps.get(prefix + name + "_w")), ps.get(prefix + name + "_b"));
}
}  // namespace detail

// summaries: (K, d_model) stack of per-type sequence-summary states.
inline TypeEmbeddings entity_type_embeddings(const ParamStore& ps, const std::string& prefix,
                                             const HeadConfig& cfg, const Tensor& summaries) {
  if (summaries.rank() != 2 || summaries.dim(0) < 1)
    throw ShapeError("entity_type_embeddings: expected (K, d_model) with K >= 1");
  TypeEmbeddings te;
  te.e = detail::head_linear(ps, prefix, "linear_E", summaries);
  if (cfg.shared_linears) {
    te.e_b = te.e;
    te.e_q = te.e;
  } else {
    te.e_b = detail::head_linear(ps, prefix, "linear_EB", summaries);
    te.e_q = detail::head_linear(ps, prefix, "linear_EQ", summaries);
  }
  return te;
}

inline TokenProjections token_projections(const ParamStore& ps, const std::string& prefix,
                                          const HeadConfig& cfg, const Tensor& hidden) {
  TokenProjections tp;
  if (cfg.shared_linears) {
    tp.u = detail::head_linear(ps, prefix, "linear_T", hidden);
    tp.v = tp.u;
  } else {
    tp.u = detail::head_linear(ps, prefix, "linear_TB", hidden);
    tp.v = detail::head_linear(ps, prefix, "linear_TQ", hidden);
  }
  return tp;
}

struct SpanIndex {
  int start;  // hidden-row index, inclusive
  int end;    // hidden-row index, inclusive
  bool operator==(const SpanIndex&) const = default;
};

// Batched span representations: for each span, concat(hidden[i], hidden[j],
// width_table[j - i]) through the span linear. Returns (n_spans, d_proj).
inline Tensor span_representations(const ParamStore& ps, const std::string& prefix,
                                   const HeadConfig& cfg, const Tensor& hidden,
                                   const std::vector<SpanIndex>& spans) {
  if (hidden.rank() != 2) throw ShapeError("span_representations: hidden must be (len, d_model)");
  if (spans.empty()) throw ShapeError("span_representations: empty span list");
  const int len = static_cast<int>(hidden.dim(0));
  std::vector<int> starts, ends, widths;
  starts.reserve(spans.size());
  for (const auto& sp : spans) {
    if (sp.start > sp.end)
      throw ShapeError("span_representations: start " + std::to_string(sp.start) +
                       " exceeds end " + std::to_string(sp.end));
    if (sp.start < 0 || sp.end >= len)
      throw ShapeError("span_representations: span out of range for length " +
                       std::to_string(len));
    const int w = sp.end - sp.start;
    if (w >= cfg.max_positions)
      throw ShapeError("span_representations: width " + std::to_string(w) +
                       " outside width table of " + std::to_string(cfg.max_positions) + " rows");
    starts.push_back(sp.start);
    ends.push_back(sp.end);
    widths.push_back(w);
  }
  Tensor cat = concat_cols<double>({index_rows(hidden, starts), index_rows(hidden, ends),
                                    index_rows(ps.get(prefix + "width_table"), widths)});
  return detail::head_linear(ps, prefix, "linear_S", cat);
}

inline Tensor span_representation(const ParamStore& ps, const std::string& prefix,
                                  const HeadConfig& cfg, const Tensor& hidden, int i, int j) {
  return row(span_representations(ps, prefix, cfg, hidden, {{i, j}}), 0);
}

// cos(a, b) / tau with eps-guarded norms; tau is a plain positive value.
inline Tensor scaled_cosine(const Tensor& a, const Tensor& b, double tau) {
  if (tau <= 0.0) throw NumericError("scaled_cosine: tau must be positive");
  return div_scalar(cosine(a, b), tau);
}

// Same, with tau = exp(log_tau) carried as a learnable (1) tensor.
inline Tensor scaled_cosine(const Tensor& a, const Tensor& b, const Tensor& log_tau) {
  return scale_by(cosine(a, b), exp_elem(neg(log_tau)));
}

// Row-vs-row similarity matrix: (m, d_proj) x (K, d_proj) -> (m, K), each
// entry cos(row_i, row_k) / exp(log_tau).
inline Tensor similarity_matrix(const Tensor& a, const Tensor& b, const Tensor& log_tau) {
  Tensor an = l2_normalize_rows(a);
  Tensor bn = l2_normalize_rows(b);
  return scale_by(matmul(an, transpose(bn)), exp_elem(neg(log_tau)));
}

}  // namespace binder
