#pragma once

#include <string>
#include <vector>

#include "binder/errors.hpp"
#include "binder/head.hpp"
#include "binder/tensor.hpp"

namespace binder {

struct LossWeights {
  double alpha = 0.2;   // start channel weight
  double gamma = 0.2;   // end channel weight
  double lambda = 0.6;  // span channel weight
  double beta = 0.5;    // mixing between pair terms and threshold terms

  void validate() const {
    if (alpha < 0 || gamma < 0 || lambda < 0 || alpha + gamma + lambda <= 0)
      throw ConfigError("loss weights: alpha/gamma/lambda must be nonnegative, sum positive");
    if (beta < 0 || beta > 1) throw ConfigError("loss weights: beta must be in [0,1]");
  }
};

// Contrastive term: -log softmax of the positive against {negatives U pos}.
// With no negatives the softmax is a singleton and the term is exactly 0.
inline Tensor info_nce(const Tensor& pos_sim, const std::vector<Tensor>& neg_sims) {
  if (pos_sim.numel() != 1) throw ShapeError("info_nce: positive must be scalar");
  std::vector<Tensor> pool = neg_sims;
  pool.push_back(pos_sim);
  return sub(log_sum_exp(concat(pool)), pos_sim);
}

// Vectorized form: pool = sims[neg_idx] U {sims[pos_idx]}.
inline Tensor info_nce_at(const Tensor& sims, int pos_idx, const std::vector<int>& neg_idx) {
  std::vector<int> pool = neg_idx;
  pool.push_back(pos_idx);
  Tensor pos = gather(sims, {pos_idx});
  return sub(log_sum_exp(gather(sims, pool)), pos);
}

// Gold targets of one sentence, in candidate-local coordinates.
struct SentenceTargets {
  int n_content = 0;                             // content token count
  std::size_t n_spans = 0;                       // candidate span count
  std::vector<std::vector<int>> gold_spans;      // [type] -> candidate indices
  std::vector<std::vector<int>> gold_starts;     // [type] -> content positions
  std::vector<std::vector<int>> gold_ends;       // [type] -> content positions
};

// Similarities of one sentence against all K types, plus threshold anchors.
// Row indices of start_sim/end_sim are content positions (no markers).
struct SentenceSims {
  Tensor span_sim;   // (n_spans, K)
  Tensor start_sim;  // (n_content, K)
  Tensor end_sim;    // (n_content, K)
  Tensor thr_span;   // (K): anchor similarity per type, span channel
  Tensor thr_start;  // (K)
  Tensor thr_end;    // (K)
  SentenceTargets targets;
};

struct BatchLosses {
  Tensor start;  // augmented (or plain) start loss
  Tensor end;
  Tensor span;
  Tensor total;
};

namespace detail {

inline Tensor mean_or_zero(const std::vector<Tensor>& terms) {
  if (terms.empty()) return Tensor::scalar(0.0);
  return div_scalar(sum(concat(terms)), static_cast<double>(terms.size()));
}

// One channel over the whole batch: per gold item an InfoNCE term against the
// non-gold candidates of its own sentence; per (sentence, type) one threshold
// term with the anchor standing in as positive over the same negatives.
//
// The anchor joins the candidate pool of every pair term. Decoding keeps a
// candidate only when it scores strictly above the anchor, so the loss has to
// order gold above the anchor and the anchor above everything else; with the
// anchor absent from the pair pool nothing ever pushes gold past it, and the
// anchor (which no term ever pushes down) ends up on top, leaving decoding
// empty at convergence.
struct ChannelAccum {
  std::vector<Tensor> pair_terms;
  std::vector<Tensor> thr_terms;

  void add_sentence(const Tensor& sims, const Tensor& thr_anchor, std::size_t n_items,
                    const std::vector<std::vector<int>>& gold_by_type, bool with_threshold) {
    const std::size_t K = sims.defined() && sims.rank() == 2 ? sims.dim(1) : gold_by_type.size();
    for (std::size_t k = 0; k < K; ++k) {
      std::vector<char> is_gold(n_items, 0);
      for (int gi : gold_by_type[k]) {
        if (gi < 0 || static_cast<std::size_t>(gi) >= n_items)
          throw ShapeError("loss: gold index out of range");
        is_gold[static_cast<std::size_t>(gi)] = 1;
      }
      std::vector<int> neg_idx;
      neg_idx.reserve(n_items);
      for (std::size_t i = 0; i < n_items; ++i)
        if (!is_gold[i]) neg_idx.push_back(static_cast<int>(i));

      Tensor anchor = gather(thr_anchor, {static_cast<int>(k)});
      if (n_items > 0 && !gold_by_type[k].empty()) {
        Tensor col = column(sims, k);
        for (int gi : gold_by_type[k]) {
          std::vector<Tensor> pool;
          if (!neg_idx.empty()) pool.push_back(gather(col, neg_idx));
          pool.push_back(anchor);
          pool.push_back(gather(col, {gi}));
          pair_terms.push_back(sub(log_sum_exp(concat(pool)), gather(col, {gi})));
        }
      }
      if (with_threshold) {
        std::vector<Tensor> negs;
        if (n_items > 0 && !neg_idx.empty()) negs.push_back(gather(column(sims, k), neg_idx));
        if (negs.empty())
          thr_terms.push_back(sub(log_sum_exp(anchor), anchor));
        else {
          negs.push_back(anchor);
          thr_terms.push_back(sub(log_sum_exp(concat(negs)), anchor));
        }
      }
    }
  }

  Tensor reduce(double beta, bool with_threshold) const {
    Tensor pair_mean = mean_or_zero(pair_terms);
    if (!with_threshold) return pair_mean;
    Tensor thr_mean = mean_or_zero(thr_terms);
    return add(mul_scalar(pair_mean, beta), mul_scalar(thr_mean, 1.0 - beta));
  }
};

}  // namespace detail

// Combined loss: alpha * start + gamma * end + lambda * span, each channel
// beta-mixed with its threshold term when with_threshold is set. Pair terms
// average over gold (mention, type) pairs batch-wide; threshold terms average
// over (sentence, type) pairs.
inline BatchLosses combined_loss(const std::vector<SentenceSims>& batch, const LossWeights& w,
                                 bool with_threshold) {
  w.validate();
  if (batch.empty()) throw ShapeError("combined_loss: empty batch");
  detail::ChannelAccum start_acc, end_acc, span_acc;
  for (const auto& s : batch) {
    const auto& t = s.targets;
    const std::size_t K = t.gold_spans.size();
    if (t.gold_starts.size() != K || t.gold_ends.size() != K)
      throw ShapeError("combined_loss: per-type gold lists disagree on K");
    start_acc.add_sentence(s.start_sim, s.thr_start, static_cast<std::size_t>(t.n_content),
                           t.gold_starts, with_threshold);
    end_acc.add_sentence(s.end_sim, s.thr_end, static_cast<std::size_t>(t.n_content),
                         t.gold_ends, with_threshold);
    span_acc.add_sentence(s.span_sim, s.thr_span, t.n_spans, t.gold_spans, with_threshold);
  }
  BatchLosses out;
  out.start = start_acc.reduce(w.beta, with_threshold);
  out.end = end_acc.reduce(w.beta, with_threshold);
  out.span = span_acc.reduce(w.beta, with_threshold);
  out.total = add(add(mul_scalar(out.start, w.alpha), mul_scalar(out.end, w.gamma)),
                  mul_scalar(out.span, w.lambda));
  return out;
}

inline BatchLosses plain_loss(const std::vector<SentenceSims>& batch, const LossWeights& w) {
  return combined_loss(batch, w, false);
}

}  // namespace binder
