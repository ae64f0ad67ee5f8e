#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "binder/data.hpp"
#include "binder/errors.hpp"
#include "binder/head.hpp"
#include "binder/params.hpp"
#include "binder/tensor.hpp"

namespace binder {

enum class DecodeStrategy { joint_position_span, span_only };
enum class ThresholdMode { dynamic, learned_global, dev_tuned };

struct TypeThresholds {
  std::vector<double> start;  // b_null per type
  std::vector<double> end;    // e_null per type
  std::vector<double> span;   // s_null per type
};

struct DecodeConfig {
  DecodeStrategy strategy = DecodeStrategy::span_only;
  bool flat = false;
  int max_span_len = 30;
  ThresholdMode threshold_mode = ThresholdMode::dynamic;
  TypeThresholds dev_thresholds;  // used only in dev_tuned mode

  void validate() const {
    if (max_span_len < 1) throw ConfigError("decode: max_span_len must be >= 1");
  }
};

struct ScoredMention {
  int start = 0;  // content-token index, inclusive
  int end = 0;    // content-token index, inclusive
  int type_id = 0;
  double span_score = 0;
  double start_score = 0;
  double end_score = 0;
};

// All (i, j) with i <= j and token count j - i + 1 <= L, lexicographic.
inline std::vector<std::pair<int, int>> enumerate_spans(int n_tokens, int L) {
  if (L < 1) throw ConfigError("enumerate_spans: L must be >= 1");
  std::vector<std::pair<int, int>> out;
  for (int i = 0; i < n_tokens; ++i)
    for (int j = i; j < n_tokens && j - i + 1 <= L; ++j) out.emplace_back(i, j);
  return out;
}

// Greedy overlap removal: highest span score first, ties broken by ascending
// start, then end, then type id, keeping mentions whose token range is
// disjoint from everything kept so far.
inline std::vector<ScoredMention> remove_overlap(std::vector<ScoredMention> mentions) {
  std::sort(mentions.begin(), mentions.end(), [](const ScoredMention& a, const ScoredMention& b) {
    if (a.span_score != b.span_score) return a.span_score > b.span_score;
    return std::tie(a.start, a.end, a.type_id) < std::tie(b.start, b.end, b.type_id);
  });
  std::vector<ScoredMention> kept;
  for (const auto& m : mentions) {
    bool clash = false;
    for (const auto& k : kept)
      if (m.start <= k.end && k.start <= m.end) {
        clash = true;
        break;
      }
    if (!clash) kept.push_back(m);
  }
  return kept;
}

struct ScoreResult {
  std::vector<ScoredMention> candidates;  // span-major, type-minor order
  TypeThresholds thresholds;
};

// Scores every (span, type) pair of one encoded sequence. hidden has marker
// rows at 0 and len-1; span/position indices in the result are content-token
// coordinates. No gradients flow here.
inline ScoreResult score_all(const Tensor& hidden, const TypeEmbeddings& types,
                             const ParamStore& ps, const std::string& head_prefix,
                             const HeadConfig& hcfg, const DecodeConfig& dcfg) {
  dcfg.validate();
  NoGradGuard ng;
  if (hidden.rank() != 2 || hidden.dim(0) < 2)
    throw ShapeError("score_all: hidden must be (len >= 2, d_model)");
  const int len = static_cast<int>(hidden.dim(0));
  const int n_content = len - 2;
  const std::size_t K = types.e.dim(0);

  TokenProjections tp = token_projections(ps, head_prefix, hcfg, hidden);
  Tensor start_sims = similarity_matrix(tp.u, types.e_b, ps.get(head_prefix + "log_tau_start"));
  Tensor end_sims = similarity_matrix(tp.v, types.e_q, ps.get(head_prefix + "log_tau_end"));

  const auto spans = enumerate_spans(n_content, dcfg.max_span_len);
  std::vector<SpanIndex> rows;
  rows.reserve(spans.size() + 1);
  rows.push_back({0, 0});  // threshold span built from the marker at both ends
  for (const auto& [i, j] : spans) rows.push_back({i + 1, j + 1});
  Tensor reps = span_representations(ps, head_prefix, hcfg, hidden, rows);
  Tensor span_sims = similarity_matrix(reps, types.e, ps.get(head_prefix + "log_tau_span"));

  ScoreResult res;
  res.thresholds.start.resize(K);
  res.thresholds.end.resize(K);
  res.thresholds.span.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    switch (dcfg.threshold_mode) {
      case ThresholdMode::dynamic:
        res.thresholds.start[k] = start_sims.at(0, k);
        res.thresholds.end[k] = end_sims.at(0, k);
        res.thresholds.span[k] = span_sims.at(0, k);
        break;
      case ThresholdMode::learned_global:
        res.thresholds.start[k] = ps.get("thr.start").at(k);
        res.thresholds.end[k] = ps.get("thr.end").at(k);
        res.thresholds.span[k] = ps.get("thr.span").at(k);
        break;
      case ThresholdMode::dev_tuned:
        if (dcfg.dev_thresholds.span.size() != K || dcfg.dev_thresholds.start.size() != K ||
            dcfg.dev_thresholds.end.size() != K)
          throw ConfigError("score_all: dev thresholds must cover every type");
        res.thresholds.start[k] = dcfg.dev_thresholds.start[k];
        res.thresholds.end[k] = dcfg.dev_thresholds.end[k];
        res.thresholds.span[k] = dcfg.dev_thresholds.span[k];
        break;
    }
  }

  res.candidates.reserve(spans.size() * K);
  for (std::size_t s = 0; s < spans.size(); ++s) {
    const auto [i, j] = spans[s];
    for (std::size_t k = 0; k < K; ++k) {
      ScoredMention m;
      m.start = i;
      m.end = j;
      m.type_id = static_cast<int>(k);
      m.span_score = span_sims.at(s + 1, k);
      m.start_score = start_sims.at(static_cast<std::size_t>(i + 1), k);
      m.end_score = end_sims.at(static_cast<std::size_t>(j + 1), k);
      res.candidates.push_back(m);
    }
  }
  return res;
}

// Threshold filter: joint mode first prunes positions whose start/end score
// falls below the position thresholds, then both modes keep spans scoring
// strictly above the span threshold. Flat output passes overlap removal.
inline std::vector<ScoredMention> decode(const std::vector<ScoredMention>& candidates,
                                         const TypeThresholds& thresholds,
                                         const DecodeConfig& cfg) {
  cfg.validate();
  std::vector<ScoredMention> kept;
  for (const auto& c : candidates) {
    const std::size_t k = static_cast<std::size_t>(c.type_id);
    if (cfg.strategy == DecodeStrategy::joint_position_span) {
      if (c.start_score < thresholds.start[k] || c.end_score < thresholds.end[k]) continue;
    }
    if (c.span_score > thresholds.span[k]) kept.push_back(c);
  }
  if (cfg.flat) kept = remove_overlap(std::move(kept));
  return kept;
}

// Lifts per-window mentions to document coordinates, deduplicates identical
// (start, end, type) triples keeping the highest span score, and re-applies
// overlap removal in document space for flat output.
inline std::vector<ScoredMention> merge_window_predictions(
    const std::vector<Window>& windows, const std::vector<std::vector<ScoredMention>>& per_window,
    bool flat) {
  if (windows.size() != per_window.size())
    throw ShapeError("merge_window_predictions: window/prediction count mismatch");
  std::map<std::tuple<int, int, int>, ScoredMention> best;
  for (std::size_t w = 0; w < windows.size(); ++w) {
    for (ScoredMention m : per_window[w]) {
      m.start += windows[w].offset;
      m.end += windows[w].offset;
      const auto key = std::make_tuple(m.start, m.end, m.type_id);
      auto it = best.find(key);
      if (it == best.end() || m.span_score > it->second.span_score) best[key] = m;
    }
  }
  std::vector<ScoredMention> out;
  out.reserve(best.size());
  for (const auto& [k, m] : best) out.push_back(m);
  if (flat) out = remove_overlap(std::move(out));
  return out;
}

// ---------------------------------------------------------------------------
// Independent reference implementation. Everything below recomputes the
// decode result from raw parameter values with plain loops: separate linear
// algebra, separate cosine, separate filtering, separate greedy pass. Used by
// tests as an oracle; never by production paths.
// ---------------------------------------------------------------------------

namespace bruteforce {

inline std::vector<double> apply_linear(const std::vector<double>& x, const std::vector<double>& w,
                                        const std::vector<double>& b, std::size_t in,
                                        std::size_t out) {
  std::vector<double> y(out);
  for (std::size_t o = 0; o < out; ++o) {
    double acc = b[o];
    for (std::size_t i = 0; i < in; ++i) acc += x[i] * w[i * out + o];
    y[o] = acc;
  }
  return y;
}

inline double cos_sim(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / ((std::sqrt(na) + 1e-12) * (std::sqrt(nb) + 1e-12));
}

}  // namespace bruteforce

inline std::vector<ScoredMention> brute_force_reference(const Tensor& hidden,
                                                        const TypeEmbeddings& types,
                                                        const ParamStore& ps,
                                                        const std::string& head_prefix,
                                                        const HeadConfig& hcfg,
                                                        const DecodeConfig& cfg) {
  cfg.validate();
  const std::size_t len = hidden.dim(0);
  const std::size_t d = hidden.dim(1);
  const std::size_t p = static_cast<std::size_t>(hcfg.d_proj);
  const std::size_t m = static_cast<std::size_t>(hcfg.width_dim);
  const std::size_t K = types.e.dim(0);
  const int n_content = static_cast<int>(len) - 2;

  auto row_of = [&](const Tensor& t, std::size_t r) {
    const std::size_t c = t.dim(1);
    return std::vector<double>(t.values().begin() + r * c, t.values().begin() + (r + 1) * c);
  };
  const std::string tb = hcfg.shared_linears ? "linear_T" : "linear_TB";
  const std::string tq = hcfg.shared_linears ? "linear_T" : "linear_TQ";
  const auto& wu = ps.get(head_prefix + tb + "_w").values();
  const auto& bu = ps.get(head_prefix + tb + "_b").values();
  const auto& wv = ps.get(head_prefix + tq + "_w").values();
  const auto& bv = ps.get(head_prefix + tq + "_b").values();
  const auto& ws = ps.get(head_prefix + "linear_S_w").values();
  const auto& bs = ps.get(head_prefix + "linear_S_b").values();
  const auto& widths = ps.get(head_prefix + "width_table").values();
  const double tau_b = std::exp(ps.get(head_prefix + "log_tau_start").value());
  const double tau_q = std::exp(ps.get(head_prefix + "log_tau_end").value());
  const double tau_s = std::exp(ps.get(head_prefix + "log_tau_span").value());

  auto span_rep = [&](std::size_t hi, std::size_t hj) {
    std::vector<double> cat;
    cat.reserve(2 * d + m);
    auto ri = row_of(hidden, hi), rj = row_of(hidden, hj);
    cat.insert(cat.end(), ri.begin(), ri.end());
    cat.insert(cat.end(), rj.begin(), rj.end());
    const std::size_t w = hj - hi;
    cat.insert(cat.end(), widths.begin() + w * m, widths.begin() + (w + 1) * m);
    return bruteforce::apply_linear(cat, ws, bs, 2 * d + m, p);
  };

  std::vector<std::vector<double>> u(len), v(len);
  for (std::size_t r = 0; r < len; ++r) {
    u[r] = bruteforce::apply_linear(row_of(hidden, r), wu, bu, d, p);
    v[r] = bruteforce::apply_linear(row_of(hidden, r), wv, bv, d, p);
  }
  const auto s00 = span_rep(0, 0);

  std::vector<double> b_null(K), e_null(K), s_null(K);
  for (std::size_t k = 0; k < K; ++k) {
    switch (cfg.threshold_mode) {
      case ThresholdMode::dynamic:
        b_null[k] = bruteforce::cos_sim(u[0], row_of(types.e_b, k)) / tau_b;
        e_null[k] = bruteforce::cos_sim(v[0], row_of(types.e_q, k)) / tau_q;
        s_null[k] = bruteforce::cos_sim(s00, row_of(types.e, k)) / tau_s;
        break;
      case ThresholdMode::learned_global:
        b_null[k] = ps.get("thr.start").at(k);
        e_null[k] = ps.get("thr.end").at(k);
        s_null[k] = ps.get("thr.span").at(k);
        break;
      case ThresholdMode::dev_tuned:
        b_null[k] = cfg.dev_thresholds.start[k];
        e_null[k] = cfg.dev_thresholds.end[k];
        s_null[k] = cfg.dev_thresholds.span[k];
        break;
    }
  }

  std::vector<ScoredMention> survivors;
  for (int i = 0; i < n_content; ++i)
    for (int j = i; j < n_content && j - i + 1 <= cfg.max_span_len; ++j) {
      const auto rep = span_rep(static_cast<std::size_t>(i + 1), static_cast<std::size_t>(j + 1));
      for (std::size_t k = 0; k < K; ++k) {
        ScoredMention c;
        c.start = i;
        c.end = j;
        c.type_id = static_cast<int>(k);
        c.start_score = bruteforce::cos_sim(u[std::size_t(i + 1)], row_of(types.e_b, k)) / tau_b;
        c.end_score = bruteforce::cos_sim(v[std::size_t(j + 1)], row_of(types.e_q, k)) / tau_q;
        c.span_score = bruteforce::cos_sim(rep, row_of(types.e, k)) / tau_s;
        if (cfg.strategy == DecodeStrategy::joint_position_span &&
            (c.start_score < b_null[k] || c.end_score < e_null[k]))
          continue;
        if (c.span_score > s_null[k]) survivors.push_back(c);
      }
    }

  if (!cfg.flat) return survivors;

  // Independent greedy pass: repeatedly select the best remaining mention.
  std::vector<ScoredMention> kept;
  std::vector<bool> used(survivors.size(), false);
  for (;;) {
    int best = -1;
    for (std::size_t t = 0; t < survivors.size(); ++t) {
      if (used[t]) continue;
      if (best < 0) {
        best = static_cast<int>(t);
        continue;
      }
      const auto& a = survivors[t];
      const auto& b = survivors[static_cast<std::size_t>(best)];
      const bool better = a.span_score > b.span_score ||
                          (a.span_score == b.span_score &&
                           std::tie(a.start, a.end, a.type_id) < std::tie(b.start, b.end, b.type_id));
      if (better) best = static_cast<int>(t);
    }
    if (best < 0) break;
    used[static_cast<std::size_t>(best)] = true;
    const auto& cand = survivors[static_cast<std::size_t>(best)];
    bool clash = false;
    for (const auto& k : kept)
      if (cand.start <= k.end && k.start <= cand.end) clash = true;
    if (!clash) kept.push_back(cand);
  }
  return kept;
}

}  // namespace binder
