#pragma once

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "binder/data.hpp"
#include "binder/decoder.hpp"
#include "binder/encoder.hpp"
#include "binder/head.hpp"
#include "binder/metrics.hpp"
#include "binder/model.hpp"
#include "binder/params.hpp"
#include "binder/rng.hpp"
#include "binder/tensor.hpp"
#include "binder/tokenizer.hpp"

namespace binder {

// Span-classification baseline: one encoder, the same span representation as
// the main model, and a softmax over the entity types plus an explicit
// outside class. No type encoder, no similarity scores, no thresholds.
class SpanClassifierBaseline {
 public:
  ModelConfig cfg;
  Vocabulary vocab;
  std::vector<EntityTypeDef> type_defs;
  ParamStore params;

  static SpanClassifierBaseline create(const ModelConfig& cfg, const Vocabulary& vocab,
                                       std::vector<EntityTypeDef> defs, std::uint64_t seed) {
    cfg.validate();
    if (defs.empty()) throw ConfigError("baseline: at least one entity type is required");
    SpanClassifierBaseline m;
    m.cfg = cfg;
    m.vocab = vocab;
    m.type_defs = std::move(defs);
    CounterRng rng(seed, /*stream=*/2);
    init_encoder_params(m.params, "enc.", m.cfg.encoder, m.vocab.size(), rng, m.cfg.init_std);
    const auto d = static_cast<std::size_t>(m.cfg.head.d_model);
    const auto w = static_cast<std::size_t>(m.cfg.head.width_dim);
    const auto p = static_cast<std::size_t>(m.cfg.head.d_proj);
    m.params.add_normal("span.linear_S_w", {2 * d + w, p}, rng, m.cfg.init_std);
    m.params.add_zeros("span.linear_S_b", {p});
    m.params.add_normal("span.width_table",
                        {static_cast<std::size_t>(m.cfg.head.max_positions), w}, rng,
                        m.cfg.init_std);
    m.params.add_normal("cls_w", {p, m.type_defs.size() + 1}, rng, m.cfg.init_std);
    m.params.add_zeros("cls_b", {m.type_defs.size() + 1});
    return m;
  }

  std::size_t n_types() const { return type_defs.size(); }
  int outside_class() const { return static_cast<int>(type_defs.size()); }

  // Mean cross entropy over every candidate span in the batch, gold spans
  // labeled with their type and everything else with the outside class.
  Tensor batch_loss(const std::vector<Window>& batch, CounterRng& rng) const {
    if (batch.empty()) throw ShapeError("batch_loss: empty batch");
    Tensor total = Tensor::scalar(0.0);
    int counted = 0;
    for (const auto& w : batch) {
      if (w.tokens.empty()) continue;
      Tensor logits = window_logits(w, true, &rng);
      const std::size_t n_spans = logits.dim(0);
      auto spans = enumerate_spans(static_cast<int>(w.tokens.size()), cfg.max_span_len);
      std::vector<int> labels(n_spans, outside_class());
      for (const auto& m : w.mentions) {
        for (std::size_t s = 0; s < spans.size(); ++s)
          if (spans[s].first == m.start && spans[s].second == m.end) labels[s] = m.type_id;
      }
      std::vector<int> rows(n_spans);
      std::iota(rows.begin(), rows.end(), 0);
      Tensor ce = mean(sub(log_sum_exp_rows(logits), gather_rows_cols(logits, rows, labels)));
      total = add(total, ce);
      ++counted;
    }
    if (counted == 0) throw ShapeError("batch_loss: every window in the batch is empty");
    return mul_scalar(total, 1.0 / static_cast<double>(counted));
  }

  std::vector<ScoredMention> predict_doc(const LabeledDocument& doc,
                                         const DecodeConfig& dcfg) const {
    NoGradGuard ng;
    auto windows = make_windows(doc, cfg.window_len(), cfg.stride);
    std::vector<std::vector<ScoredMention>> per_window;
    per_window.reserve(windows.size());
    for (const auto& w : windows) {
      std::vector<ScoredMention> kept;
      if (!w.tokens.empty()) {
        Tensor logits = window_logits(w, false, nullptr);
        const auto& lv = logits.values();
        const std::size_t K1 = logits.dim(1);
        auto spans = enumerate_spans(static_cast<int>(w.tokens.size()), cfg.max_span_len);
        for (std::size_t s = 0; s < spans.size(); ++s) {
          const double* row = lv.data() + s * K1;
          std::size_t am = 0;
          for (std::size_t k = 1; k < K1; ++k)
            if (row[k] > row[am]) am = k;
          if (am == static_cast<std::size_t>(outside_class())) continue;
          double mx = row[am], denom = 0.0;
          for (std::size_t k = 0; k < K1; ++k) denom += std::exp(row[k] - mx);
          const double prob = 1.0 / denom;
          kept.push_back({spans[s].first, spans[s].second, static_cast<int>(am), prob, prob, prob});
        }
      }
      per_window.push_back(dcfg.flat ? remove_overlap(std::move(kept)) : kept);
    }
    return merge_window_predictions(windows, per_window, dcfg.flat);
  }

  std::vector<DocMentions> predict_all(const std::vector<LabeledDocument>& docs,
                                       const DecodeConfig& dcfg) const {
    std::vector<DocMentions> out;
    out.reserve(docs.size());
    for (const auto& d : docs) {
      DocMentions dm;
      dm.doc_id = d.doc_id;
      dm.gold = d.mentions;
      for (const auto& m : predict_doc(d, dcfg)) dm.pred.push_back({m.start, m.end, m.type_id});
      out.push_back(std::move(dm));
    }
    return out;
  }

  double evaluate_f1(const std::vector<LabeledDocument>& docs, const DecodeConfig& dcfg) const {
    return micro_span_f1(predict_all(docs, dcfg));
  }

 private:
  Tensor window_logits(const Window& w, bool train, CounterRng* rng) const {
    std::vector<std::string> texts;
    texts.reserve(w.tokens.size());
    for (const auto& t : w.tokens) texts.push_back(t.text);
    Tensor hidden =
        encode_sequence(params, "enc.", cfg.encoder, ids_with_markers(texts, vocab), train, rng);
    auto spans = enumerate_spans(static_cast<int>(w.tokens.size()), cfg.max_span_len);
    std::vector<SpanIndex> rows;
    rows.reserve(spans.size());
    for (const auto& [i, j] : spans) rows.push_back({i + 1, j + 1});
    Tensor reps = span_representations(params, "span.", cfg.head, hidden, rows);
    return add_bias_rows(matmul(reps, params.get("cls_w")), params.get("cls_b"));
  }
};

}  // namespace binder
