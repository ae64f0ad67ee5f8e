#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "binder/data.hpp"
#include "binder/decoder.hpp"
#include "binder/metrics.hpp"
#include "binder/model.hpp"
#include "binder/params.hpp"
#include "binder/rng.hpp"

#include <json.hpp>

namespace binder {

struct TrainConfig {
  double lr = 3e-5;
  int epochs = 20;
  int batch_size = 8;
  int eval_every_steps = 50;
  int patience = 10;
  double weight_decay = 0.01;
  int warmup_steps = 0;
  std::uint64_t seed = 42;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    if (lr <= 0 || epochs < 1 || batch_size < 1 || eval_every_steps < 1 || patience < 1)
      throw ConfigError("train config: lr/epochs/batch_size/eval_every_steps/patience must be positive");
    if (weight_decay < 0 || warmup_steps < 0)
      throw ConfigError("train config: weight_decay and warmup_steps must be nonnegative");
  }
};

// Decoupled-weight-decay Adam. A parameter with zero gradient moves only by
// the weight-decay shrinkage term.
class AdamW {
 public:
  AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParamStore& ps, double lr, double weight_decay) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (auto& [name, p] : ps) {
      auto& slot = slots_[name];
      const std::size_t n = p.numel();
      if (slot.m.size() != n) {
        slot.m.assign(n, 0.0);
        slot.v.assign(n, 0.0);
      }
      static const std::vector<double> kNoGrad;
      const std::vector<double>& g = p.has_grad() ? p.grad() : kNoGrad;
      auto& vals = p.mutable_values();
      for (std::size_t i = 0; i < n; ++i) {
        const double gi = g.empty() ? 0.0 : g[i];
        slot.m[i] = b1_ * slot.m[i] + (1.0 - b1_) * gi;
        slot.v[i] = b2_ * slot.v[i] + (1.0 - b2_) * gi * gi;
        const double mhat = slot.m[i] / c1;
        const double vhat = slot.v[i] / c2;
        vals[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay * vals[i]);
      }
    }
  }

  long steps_taken() const { return t_; }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  double b1_, b2_, eps_;
  long t_ = 0;
  std::map<std::string, Slot> slots_;
};

// Linear decay from peak to exactly 0 at the last step, with optional linear
// warmup from lr/warmup to peak over the first warmup steps.
inline double linear_lr(double peak, long step, long total_steps, long warmup = 0) {
  if (total_steps <= 0) throw ConfigError("linear_lr: total_steps must be positive");
  if (step < warmup)
    return peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const long decay_span = total_steps - 1 - warmup;
  if (decay_span <= 0) return step >= total_steps - 1 && total_steps > 1 ? 0.0 : peak;
  return peak * (1.0 - static_cast<double>(step - warmup) / static_cast<double>(decay_span));
}

struct FitResult {
  double best_f1 = -1.0;
  long best_step = -1;
  long steps_run = 0;
  int evals_run = 0;
  bool stopped_early = false;
  bool aborted_non_finite = false;
};

// Trains any model exposing params() / batch_loss(windows, rng) /
// evaluate_f1(docs, decode config). Keeps the best dev checkpoint in memory
// and restores it at the end; a non-finite loss aborts with the best
// checkpoint retained. Log lines carry no timestamps so identical runs write
// identical logs.
template <typename Model>
FitResult fit(Model& model, std::vector<Window> train_windows,
              const std::vector<LabeledDocument>& dev_docs, const TrainConfig& tc,
              const DecodeConfig& dcfg, std::ostream* log = nullptr) {
  tc.validate();
  if (train_windows.empty()) throw ConfigError("fit: empty training split");
  if (dev_docs.empty()) throw ConfigError("fit: empty dev split");

  const long steps_per_epoch =
      static_cast<long>((train_windows.size() + tc.batch_size - 1) /
                        static_cast<std::size_t>(tc.batch_size));
  const long total_steps = steps_per_epoch * tc.epochs;

  AdamW opt(tc.adam_beta1, tc.adam_beta2, tc.adam_eps);
  CounterRng shuffle_rng(tc.seed, /*stream=*/101);
  CounterRng drop_rng(tc.seed, /*stream=*/202);

  FitResult res;
  std::optional<std::map<std::string, std::vector<double>>> best_snapshot;
  int fails = 0;
  long step = 0;
  bool stop = false;

  auto emit = [&](long s, double loss, std::optional<double> dev_f1) {
    if (!log) return;
    nlohmann::json j;
    j["step"] = s;
    j["loss"] = loss;
    if (dev_f1) j["dev_f1"] = *dev_f1;
    (*log) << j.dump() << '\n';
  };

  for (int epoch = 0; epoch < tc.epochs && !stop; ++epoch) {
    for (std::size_t i = train_windows.size(); i > 1; --i)
      std::swap(train_windows[i - 1], train_windows[shuffle_rng.below(i)]);

    for (long b = 0; b < steps_per_epoch && !stop; ++b) {
      const std::size_t lo = static_cast<std::size_t>(b) * static_cast<std::size_t>(tc.batch_size);
      const std::size_t hi =
          std::min(train_windows.size(), lo + static_cast<std::size_t>(tc.batch_size));
      std::vector<Window> batch(train_windows.begin() + static_cast<std::ptrdiff_t>(lo),
                                train_windows.begin() + static_cast<std::ptrdiff_t>(hi));
      double loss_value = 0.0;
      try {
        Tensor loss = model.batch_loss(batch, drop_rng);
        loss_value = loss.value();
        if (loss.requires_grad()) {
          backward(loss);
          opt.step(model.params, linear_lr(tc.lr, step, total_steps, tc.warmup_steps),
                   tc.weight_decay);
        }
        model.params.zero_grads();
      } catch (const NumericError&) {
        res.aborted_non_finite = true;
        stop = true;
        break;
      }

      ++step;
      res.steps_run = step;
      std::optional<double> dev_f1;
      if (step % tc.eval_every_steps == 0) {
        const double f1 = model.evaluate_f1(dev_docs, dcfg);
        dev_f1 = f1;
        ++res.evals_run;
        if (f1 > res.best_f1) {
          res.best_f1 = f1;
          res.best_step = step;
          best_snapshot = model.params.snapshot();
          fails = 0;
        } else {
          ++fails;
          if (fails >= tc.patience) {
            res.stopped_early = true;
            stop = true;
          }
        }
      }
      emit(step, loss_value, dev_f1);
    }
  }

  if (best_snapshot) model.params.restore(*best_snapshot);
  return res;
}

// ---------------------------------------------------------------------------
// Dev-tuned global thresholds.
// ---------------------------------------------------------------------------

struct TunedThresholds {
  TypeThresholds thresholds;
  double dev_f1 = 0.0;
};

// Grid search per type over quantiles of the observed span scores (or an
// explicit grid), coordinate-ascent over types, maximizing dev micro span F1.
// Start/end thresholds are set below every observed score so joint decoding
// reduces to span-only at the tuned point.
inline TunedThresholds tune_global_thresholds_on_dev(const BinderModel& model,
                                                     const std::vector<LabeledDocument>& dev,
                                                     DecodeConfig dcfg, int grid_points = 21,
                                                     const std::vector<double>* explicit_grid =
                                                         nullptr) {
  if (dev.empty()) throw ConfigError("tune_global_thresholds_on_dev: empty dev split");
  if (grid_points < 1) throw ConfigError("tune_global_thresholds_on_dev: grid_points must be >= 1");
  NoGradGuard ng;
  const std::size_t K = model.n_types();
  TypeEmbeddings te = model.type_embeddings(false, nullptr);

  // Score everything once; decoding against a candidate grid is then cheap.
  struct DocCache {
    std::vector<Window> windows;
    std::vector<std::vector<ScoredMention>> candidates;  // per window
    std::vector<Mention> gold;
    std::string doc_id;
  };
  DecodeConfig score_cfg = dcfg;
  score_cfg.threshold_mode = ThresholdMode::dev_tuned;
  score_cfg.dev_thresholds.start.assign(K, 0.0);
  score_cfg.dev_thresholds.end.assign(K, 0.0);
  score_cfg.dev_thresholds.span.assign(K, 0.0);

  std::vector<DocCache> cache;
  cache.reserve(dev.size());
  double min_pos_score = 0.0, min_span_score = 0.0;
  bool any = false;
  std::vector<std::vector<double>> span_scores_by_type(K);
  for (const auto& doc : dev) {
    DocCache dc;
    dc.doc_id = doc.doc_id;
    dc.gold = doc.mentions;
    dc.windows = make_windows(doc, model.cfg.window_len(), model.cfg.stride);
    for (const auto& w : dc.windows) {
      Tensor hidden = model.encode_window(w, false, nullptr);
      ScoreResult sr = score_all(hidden, te, model.params, "head.", model.cfg.head, score_cfg);
      for (const auto& c : sr.candidates) {
        span_scores_by_type[static_cast<std::size_t>(c.type_id)].push_back(c.span_score);
        const double lo = std::min({c.start_score, c.end_score});
        if (!any || lo < min_pos_score) min_pos_score = lo;
        if (!any || c.span_score < min_span_score) min_span_score = c.span_score;
        any = true;
      }
      dc.candidates.push_back(sr.candidates);
    }
    cache.push_back(std::move(dc));
  }

  std::vector<std::vector<double>> grids(K);
  for (std::size_t k = 0; k < K; ++k) {
    if (explicit_grid) {
      grids[k] = *explicit_grid;
    } else {
      auto& scores = span_scores_by_type[k];
      if (scores.empty()) {
        grids[k] = {0.0};
        continue;
      }
      std::sort(scores.begin(), scores.end());
      for (int g = 0; g < grid_points; ++g) {
        const double q = grid_points == 1 ? 0.5
                                          : static_cast<double>(g) /
                                                static_cast<double>(grid_points - 1);
        const std::size_t idx = std::min(scores.size() - 1,
                                         static_cast<std::size_t>(q * static_cast<double>(
                                                                          scores.size() - 1)));
        grids[k].push_back(scores[idx]);
      }
      grids[k].erase(std::unique(grids[k].begin(), grids[k].end()), grids[k].end());
    }
  }

  TypeThresholds thr;
  thr.start.assign(K, any ? min_pos_score - 1.0 : -1.0);
  thr.end.assign(K, any ? min_pos_score - 1.0 : -1.0);
  thr.span.assign(K, 0.0);
  for (std::size_t k = 0; k < K; ++k) thr.span[k] = grids[k][grids[k].size() / 2];

  auto eval_at = [&](const TypeThresholds& t) {
    DecodeConfig dc = dcfg;
    dc.threshold_mode = ThresholdMode::dev_tuned;
    dc.dev_thresholds = t;
    std::vector<DocMentions> resolved;
    resolved.reserve(cache.size());
    for (const auto& d : cache) {
      std::vector<std::vector<ScoredMention>> per_window;
      per_window.reserve(d.candidates.size());
      for (const auto& cands : d.candidates) per_window.push_back(decode(cands, t, dc));
      DocMentions dm;
      dm.doc_id = d.doc_id;
      dm.gold = d.gold;
      for (const auto& m : merge_window_predictions(d.windows, per_window, dc.flat))
        dm.pred.push_back({m.start, m.end, m.type_id});
      resolved.push_back(std::move(dm));
    }
    return micro_span_f1(resolved);
  };

  double best = eval_at(thr);
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t k = 0; k < K; ++k) {
      double best_val = thr.span[k];
      for (double v : grids[k]) {
        TypeThresholds t = thr;
        t.span[k] = v;
        const double f1 = eval_at(t);
        if (f1 > best) {
          best = f1;
          best_val = v;
        }
      }
      thr.span[k] = best_val;
    }
  }
  return {thr, best};
}

// ---------------------------------------------------------------------------
// Similarity-distribution export.
// ---------------------------------------------------------------------------

// CSV rows (doc_id, type, span_kind, channel, score) for external density
// plots: every content position on the start/end channels, every enumerated
// span on the span channel, plus one threshold row per (window, type,
// channel). Scores come from the same scoring path decode uses.
inline void dump_similarity_distributions(const BinderModel& model,
                                          const std::vector<LabeledDocument>& docs,
                                          std::ostream& out) {
  NoGradGuard ng;
  TypeEmbeddings te = model.type_embeddings(false, nullptr);
  DecodeConfig dcfg;
  dcfg.max_span_len = model.cfg.max_span_len;
  dcfg.threshold_mode = ThresholdMode::dynamic;

  out << "doc_id,type,span_kind,channel,score\n";
  char buf[64];
  auto score_str = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };

  for (const auto& doc : docs) {
    for (const auto& w : make_windows(doc, model.cfg.window_len(), model.cfg.stride)) {
      Tensor hidden = model.encode_window(w, false, nullptr);
      ScoreResult sr = score_all(hidden, te, model.params, "head.", model.cfg.head, dcfg);
      const std::size_t K = model.n_types();

      std::vector<std::set<int>> gold_starts(K), gold_ends(K);
      std::vector<std::set<std::pair<int, int>>> gold_spans(K);
      for (const auto& m : w.mentions) {
        gold_starts[static_cast<std::size_t>(m.type_id)].insert(m.start);
        gold_ends[static_cast<std::size_t>(m.type_id)].insert(m.end);
        gold_spans[static_cast<std::size_t>(m.type_id)].insert({m.start, m.end});
      }

      // Start/end channels: one row per content position per type. The
      // candidate list is span-major; position scores repeat across spans, so
      // read them from per-position candidates of width 1 plus the distinct
      // start positions; simplest is to rescan via the span list.
      const int n_content = static_cast<int>(w.tokens.size());
      std::vector<std::vector<double>> start_score(K, std::vector<double>(
                                                          static_cast<std::size_t>(n_content))),
          end_score(K, std::vector<double>(static_cast<std::size_t>(n_content)));
      for (const auto& c : sr.candidates) {
        start_score[static_cast<std::size_t>(c.type_id)][static_cast<std::size_t>(c.start)] =
            c.start_score;
        end_score[static_cast<std::size_t>(c.type_id)][static_cast<std::size_t>(c.end)] =
            c.end_score;
      }
      for (std::size_t k = 0; k < K; ++k) {
        const std::string& tname = model.type_defs[k].name;
        for (int i = 0; i < n_content; ++i) {
          out << doc.doc_id << ',' << tname << ','
              << (gold_starts[k].count(i) ? "entity" : "non_entity") << ",start,"
              << score_str(start_score[k][static_cast<std::size_t>(i)]) << '\n';
          out << doc.doc_id << ',' << tname << ','
              << (gold_ends[k].count(i) ? "entity" : "non_entity") << ",end,"
              << score_str(end_score[k][static_cast<std::size_t>(i)]) << '\n';
        }
        for (const auto& c : sr.candidates) {
          if (c.type_id != static_cast<int>(k)) continue;
          out << doc.doc_id << ',' << tname << ','
              << (gold_spans[k].count({c.start, c.end}) ? "entity" : "non_entity") << ",span,"
              << score_str(c.span_score) << '\n';
        }
        out << doc.doc_id << ',' << tname << ",threshold,start,"
            << score_str(sr.thresholds.start[k]) << '\n';
        out << doc.doc_id << ',' << tname << ",threshold,end," << score_str(sr.thresholds.end[k])
            << '\n';
        out << doc.doc_id << ',' << tname << ",threshold,span,"
            << score_str(sr.thresholds.span[k]) << '\n';
      }
    }
  }
}

}  // namespace binder
