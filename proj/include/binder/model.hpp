#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "binder/data.hpp"
#include "binder/decoder.hpp"
#include "binder/encoder.hpp"
#include "binder/errors.hpp"
#include "binder/head.hpp"
#include "binder/metrics.hpp"
#include "binder/objectives.hpp"
#include "binder/params.hpp"
#include "binder/tokenizer.hpp"

#include <json.hpp>

namespace binder {

struct ModelConfig {
  EncoderConfig encoder;
  HeadConfig head;
  DescriptionMode desc_mode = DescriptionMode::guideline;
  LossWeights weights;
  ThresholdMode threshold_mode = ThresholdMode::dynamic;
  int max_span_len = 30;
  int stride = 16;
  double tau_init = 0.07;
  double init_std = 0.02;
  int prototypes_at_eval = 3;  // exemplars averaged per type at inference

  // Threshold terms train only when thresholds take part in decoding;
  // dev-tuned decoding pairs with the plain loss.
  bool with_threshold_terms() const { return threshold_mode != ThresholdMode::dev_tuned; }

  void validate() const {
    encoder.validate();
    head.validate();
    weights.validate();
    if (head.d_model != encoder.d_model)
      throw ConfigError("model: head d_model differs from encoder d_model");
    if (max_span_len < 1) throw ConfigError("model: max_span_len must be >= 1");
    if (stride < 0 || stride >= encoder.max_positions - 2)
      throw ConfigError("model: stride must be in [0, max_positions - 2)");
  }

  int window_len() const { return encoder.max_positions - 2; }

  nlohmann::json to_json() const {
    return {{"enc_layers", encoder.num_layers},
            {"enc_heads", encoder.num_heads},
            {"d_model", encoder.d_model},
            {"ffn_dim", encoder.ffn_dim},
            {"max_positions", encoder.max_positions},
            {"dropout", encoder.dropout},
            {"d_proj", head.d_proj},
            {"width_dim", head.width_dim},
            {"shared_linears", head.shared_linears},
            {"desc_mode", desc_mode == DescriptionMode::atomic      ? "atomic"
                          : desc_mode == DescriptionMode::keyword   ? "keyword"
                          : desc_mode == DescriptionMode::guideline ? "guideline"
                                                                    : "prototypes"},
            {"alpha", weights.alpha},
            {"gamma", weights.gamma},
            {"lambda", weights.lambda},
            {"beta", weights.beta},
            {"threshold_mode", threshold_mode == ThresholdMode::dynamic        ? "dynamic"
                               : threshold_mode == ThresholdMode::learned_global ? "learned_global"
                                                                                 : "dev_tuned"},
            {"max_span_len", max_span_len},
            {"stride", stride},
            {"tau_init", tau_init},
            {"init_std", init_std},
            {"prototypes_at_eval", prototypes_at_eval}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.encoder.num_layers = j.at("enc_layers").get<int>();
    c.encoder.num_heads = j.at("enc_heads").get<int>();
    c.encoder.d_model = j.at("d_model").get<int>();
    c.encoder.ffn_dim = j.at("ffn_dim").get<int>();
    c.encoder.max_positions = j.at("max_positions").get<int>();
    c.encoder.dropout = j.at("dropout").get<double>();
    c.head.d_model = c.encoder.d_model;
    c.head.d_proj = j.at("d_proj").get<int>();
    c.head.width_dim = j.at("width_dim").get<int>();
    c.head.max_positions = c.encoder.max_positions;
    c.head.shared_linears = j.at("shared_linears").get<bool>();
    c.desc_mode = parse_description_mode(j.at("desc_mode").get<std::string>());
    c.weights.alpha = j.at("alpha").get<double>();
    c.weights.gamma = j.at("gamma").get<double>();
    c.weights.lambda = j.at("lambda").get<double>();
    c.weights.beta = j.at("beta").get<double>();
    const std::string tm = j.at("threshold_mode").get<std::string>();
    c.threshold_mode = tm == "dynamic"          ? ThresholdMode::dynamic
                       : tm == "learned_global" ? ThresholdMode::learned_global
                                                : ThresholdMode::dev_tuned;
    c.max_span_len = j.at("max_span_len").get<int>();
    c.stride = j.at("stride").get<int>();
    c.tau_init = j.at("tau_init").get<double>();
    c.init_std = j.at("init_std").get<double>();
    c.prototypes_at_eval = j.value("prototypes_at_eval", 3);
    return c;
  }
};

// The bi-encoder model: a type encoder, a text encoder, and the similarity
// head, together with everything needed to score and decode documents.
class BinderModel {
 public:
  ModelConfig cfg;
  Vocabulary vocab;
  std::vector<EntityTypeDef> type_defs;
  ParamStore params;

  static BinderModel create(ModelConfig cfg, Vocabulary vocab, std::vector<EntityTypeDef> defs,
                            std::uint64_t seed) {
    cfg.validate();
    if (defs.empty()) throw ConfigError("model: at least one entity type required");
    BinderModel m;
    m.cfg = std::move(cfg);
    m.vocab = std::move(vocab);
    m.type_defs = std::move(defs);

    CounterRng rng(seed, /*stream=*/1);
    init_encoder_params(m.params, "type_enc.", m.cfg.encoder, m.vocab.size(), rng,
                        m.cfg.init_std);
    init_encoder_params(m.params, "text_enc.", m.cfg.encoder, m.vocab.size(), rng,
                        m.cfg.init_std);
    init_head_params(m.params, "head.", m.cfg.head, rng, m.cfg.init_std, m.cfg.tau_init);
    const std::size_t K = m.type_defs.size();
    if (m.cfg.desc_mode == DescriptionMode::atomic)
      m.params.add_normal("type_atomic", {K, static_cast<std::size_t>(m.cfg.encoder.d_model)},
                          rng, m.cfg.init_std);
    if (m.cfg.threshold_mode == ThresholdMode::learned_global)
      for (const char* ch : {"thr.start", "thr.end", "thr.span"}) m.params.add_zeros(ch, {K});

    m.build_description_ids();
    return m;
  }

  std::size_t n_types() const { return type_defs.size(); }

  std::vector<std::string> type_names() const {
    std::vector<std::string> names;
    for (const auto& d : type_defs) names.push_back(d.name);
    return names;
  }

  // (K, d_model) stack of type description summaries. Training samples one
  // prototype exemplar per type; evaluation averages the first
  // prototypes_at_eval exemplars (text descriptions have a single input).
  Tensor type_summaries(bool train, CounterRng* rng) const {
    if (cfg.desc_mode == DescriptionMode::atomic) {
      std::vector<int> all(n_types());
      for (std::size_t k = 0; k < all.size(); ++k) all[k] = static_cast<int>(k);
      return index_rows(params.get("type_atomic"), all);
    }
    std::vector<Tensor> rows;
    rows.reserve(n_types());
    for (std::size_t k = 0; k < n_types(); ++k) {
      const auto& ids = desc_ids_[k];
      const auto& pos = desc_summary_pos_[k];
      std::vector<std::size_t> chosen;
      if (train && ids.size() > 1) {
        if (!rng) throw ConfigError("type_summaries: training requires an rng");
        chosen = {rng->below(ids.size())};
      } else {
        const std::size_t n = std::min<std::size_t>(
            ids.size(), cfg.desc_mode == DescriptionMode::prototypes
                            ? static_cast<std::size_t>(cfg.prototypes_at_eval)
                            : ids.size());
        for (std::size_t i = 0; i < n; ++i) chosen.push_back(i);
      }
      std::vector<Tensor> encoded;
      for (std::size_t i : chosen)
        encoded.push_back(row(
            encode_sequence(params, "type_enc.", cfg.encoder, ids[i], train, rng),
            static_cast<std::size_t>(pos[i])));
      Tensor summary = encoded[0];
      for (std::size_t i = 1; i < encoded.size(); ++i) summary = add(summary, encoded[i]);
      if (encoded.size() > 1)
        summary = mul_scalar(summary, 1.0 / static_cast<double>(encoded.size()));
      rows.push_back(summary);
    }
    return stack_rows(rows);
  }

  TypeEmbeddings type_embeddings(bool train, CounterRng* rng) const {
    return entity_type_embeddings(params, "head.", cfg.head, type_summaries(train, rng));
  }

  // Training loss over a batch of windows (Eq.-style combined objective).
  Tensor batch_loss(const std::vector<Window>& batch, CounterRng& rng) const {
    if (batch.empty()) throw ShapeError("batch_loss: empty batch");
    TypeEmbeddings te = type_embeddings(true, &rng);
    const std::size_t K = n_types();

    std::vector<SentenceSims> sims;
    sims.reserve(batch.size());
    for (const auto& w : batch) sims.push_back(sentence_sims(w, te, true, &rng, K));
    return combined_loss(sims, cfg.weights, cfg.with_threshold_terms()).total;
  }

  // Per-document inference. Passing cached type embeddings skips re-encoding
  // the descriptions (the bi-encoder reuse property).
  std::vector<ScoredMention> predict_doc(const LabeledDocument& doc, const DecodeConfig& dcfg,
                                         const TypeEmbeddings* cached = nullptr) const {
    NoGradGuard ng;
    TypeEmbeddings local;
    if (!cached) local = type_embeddings(false, nullptr);
    const TypeEmbeddings& te = cached ? *cached : local;

    const auto windows = make_windows(doc, cfg.window_len(), cfg.stride);
    std::vector<std::vector<ScoredMention>> per_window;
    per_window.reserve(windows.size());
    for (const auto& w : windows) {
      Tensor hidden = encode_window(w, false, nullptr);
      ScoreResult sr = score_all(hidden, te, params, "head.", cfg.head, dcfg);
      per_window.push_back(decode(sr.candidates, sr.thresholds, dcfg));
    }
    return merge_window_predictions(windows, per_window, dcfg.flat);
  }

  std::vector<DocMentions> predict_all(const std::vector<LabeledDocument>& docs,
                                       const DecodeConfig& dcfg,
                                       const TypeEmbeddings* cached = nullptr) const {
    NoGradGuard ng;
    TypeEmbeddings local;
    if (!cached) local = type_embeddings(false, nullptr);
    const TypeEmbeddings& te = cached ? *cached : local;
    std::vector<DocMentions> out;
    out.reserve(docs.size());
    for (const auto& d : docs) {
      DocMentions dm;
      dm.doc_id = d.doc_id;
      for (const auto& m : predict_doc(d, dcfg, &te)) dm.pred.push_back({m.start, m.end, m.type_id});
      dm.gold = d.mentions;
      out.push_back(std::move(dm));
    }
    return out;
  }

  double evaluate_f1(const std::vector<LabeledDocument>& docs, const DecodeConfig& dcfg) const {
    return micro_span_f1(predict_all(docs, dcfg));
  }

  Tensor encode_window(const Window& w, bool train, CounterRng* rng) const {
    std::vector<std::string> texts;
    texts.reserve(w.tokens.size());
    for (const auto& t : w.tokens) texts.push_back(t.text);
    return encode_sequence(params, "text_enc.", cfg.encoder, ids_with_markers(texts, vocab),
                           train, rng);
  }

  // Similarities + targets of one window against all types.
  SentenceSims sentence_sims(const Window& w, const TypeEmbeddings& te, bool train,
                             CounterRng* rng, std::size_t K) const {
    Tensor hidden = encode_window(w, train, rng);
    const int n_content = static_cast<int>(w.tokens.size());

    TokenProjections tp = token_projections(params, "head.", cfg.head, hidden);
    Tensor start_full = similarity_matrix(tp.u, te.e_b, params.get("head.log_tau_start"));
    Tensor end_full = similarity_matrix(tp.v, te.e_q, params.get("head.log_tau_end"));

    const auto spans = enumerate_spans(n_content, cfg.max_span_len);
    std::vector<SpanIndex> rows;
    rows.reserve(spans.size() + 1);
    rows.push_back({0, 0});
    for (const auto& [i, j] : spans) rows.push_back({i + 1, j + 1});
    Tensor reps = span_representations(params, "head.", cfg.head, hidden, rows);
    Tensor span_full = similarity_matrix(reps, te.e, params.get("head.log_tau_span"));

    std::vector<int> content_idx(static_cast<std::size_t>(n_content));
    for (int i = 0; i < n_content; ++i) content_idx[static_cast<std::size_t>(i)] = i + 1;
    std::vector<int> span_idx(spans.size());
    for (std::size_t s = 0; s < spans.size(); ++s) span_idx[s] = static_cast<int>(s + 1);

    SentenceSims ss;
    ss.start_sim = index_rows(start_full, content_idx);
    ss.end_sim = index_rows(end_full, content_idx);
    ss.span_sim = index_rows(span_full, span_idx);
    if (cfg.threshold_mode == ThresholdMode::learned_global) {
      ss.thr_start = params.get("thr.start");
      ss.thr_end = params.get("thr.end");
      ss.thr_span = params.get("thr.span");
    } else {
      ss.thr_start = row(start_full, 0);
      ss.thr_end = row(end_full, 0);
      ss.thr_span = row(span_full, 0);
    }

    std::map<std::pair<int, int>, int> span_of;
    for (std::size_t s = 0; s < spans.size(); ++s) span_of[spans[s]] = static_cast<int>(s);
    ss.targets.n_content = n_content;
    ss.targets.n_spans = spans.size();
    ss.targets.gold_spans.assign(K, {});
    ss.targets.gold_starts.assign(K, {});
    ss.targets.gold_ends.assign(K, {});
    for (const auto& m : w.mentions) {
      const std::size_t k = static_cast<std::size_t>(m.type_id);
      if (k >= K) throw ShapeError("batch_loss: mention type out of range");
      auto it = span_of.find({m.start, m.end});
      if (it == span_of.end()) continue;  // wider than max_span_len; not scorable
      ss.targets.gold_spans[k].push_back(it->second);
      ss.targets.gold_starts[k].push_back(m.start);
      ss.targets.gold_ends[k].push_back(m.end);
    }
    return ss;
  }

 private:
  std::vector<std::vector<std::vector<int>>> desc_ids_;  // [type][exemplar] -> ids
  std::vector<std::vector<int>> desc_summary_pos_;       // [type][exemplar] -> hidden row

  void build_description_ids() {
    desc_ids_.clear();
    desc_summary_pos_.clear();
    for (const auto& def : type_defs) {
      DescriptionInput di = type_description(def, cfg.desc_mode);
      std::vector<std::vector<int>> per_type_ids;
      for (const auto& toks : di.token_lists) {
        auto ids = ids_with_markers(toks, vocab);
        if (ids.size() > static_cast<std::size_t>(cfg.encoder.max_positions))
          throw std::length_error("type description for '" + def.name + "' exceeds max_positions " +
                                  std::to_string(cfg.encoder.max_positions));
        per_type_ids.push_back(std::move(ids));
      }
      desc_ids_.push_back(std::move(per_type_ids));
      desc_summary_pos_.push_back(di.summary_pos);  // already hidden-row coordinates
    }
  }
};

}  // namespace binder
