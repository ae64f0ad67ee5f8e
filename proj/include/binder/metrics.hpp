#pragma once

#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "binder/data.hpp"

#include <json.hpp>

namespace binder {

// Predictions and gold mentions of one document, in document coordinates.
struct DocMentions {
  std::string doc_id;
  std::vector<Mention> pred;
  std::vector<Mention> gold;
};

// One metric cell. Counting is coverage-based: a prediction is matched when
// at least one same-document gold mention satisfies the metric's key, and a
// gold mention is matched when at least one prediction does. For the exact
// span metric both matched counts coincide with |pred ∩ gold|.
struct PrCell {
  std::size_t pred_total = 0;
  std::size_t gold_total = 0;
  std::size_t pred_matched = 0;  // "tp" on the precision side
  std::size_t gold_matched = 0;  // "tp" on the recall side

  std::size_t fp() const { return pred_total - pred_matched; }
  std::size_t fn() const { return gold_total - gold_matched; }
  double precision() const {
    return pred_total == 0 ? 0.0
                           : static_cast<double>(pred_matched) / static_cast<double>(pred_total);
  }
  double recall() const {
    return gold_total == 0 ? 0.0
                           : static_cast<double>(gold_matched) / static_cast<double>(gold_total);
  }
  double f1() const {
    const double p = precision(), r = recall();
    return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
  }
  void accumulate(const PrCell& o) {
    pred_total += o.pred_total;
    gold_total += o.gold_total;
    pred_matched += o.pred_matched;
    gold_matched += o.gold_matched;
  }
};

enum class MatchKind { span_exact, start_key, end_key, loose_overlap };

inline bool mention_match(MatchKind kind, const Mention& p, const Mention& g) {
  if (p.type_id != g.type_id) return false;
  switch (kind) {
    case MatchKind::span_exact:
      return p.start == g.start && p.end == g.end;
    case MatchKind::start_key:
      return p.start == g.start;
    case MatchKind::end_key:
      return p.end == g.end;
    case MatchKind::loose_overlap:
      return p.start <= g.end && g.start <= p.end;
  }
  return false;
}

// Counts one document for one metric, restricted to one type (or all types
// when type_id < 0).
inline PrCell count_doc(MatchKind kind, const DocMentions& doc, int type_id) {
  PrCell c;
  for (const auto& p : doc.pred) {
    if (type_id >= 0 && p.type_id != type_id) continue;
    ++c.pred_total;
    for (const auto& g : doc.gold)
      if (mention_match(kind, p, g)) {
        ++c.pred_matched;
        break;
      }
  }
  for (const auto& g : doc.gold) {
    if (type_id >= 0 && g.type_id != type_id) continue;
    ++c.gold_total;
    for (const auto& p : doc.pred)
      if (mention_match(kind, p, g)) {
        ++c.gold_matched;
        break;
      }
  }
  return c;
}

struct MetricBlock {
  std::string label;
  PrCell span;   // strict: exact (start, end, type)
  PrCell start;  // strict start: (start, type)
  PrCell end;    // strict end: (end, type)
  PrCell loose;  // same-type token overlap
};

struct EvalReport {
  std::vector<MetricBlock> per_type;
  MetricBlock micro;  // pooled over all types

  nlohmann::json to_json() const {
    auto cell = [](const PrCell& c) {
      return nlohmann::json{{"pred_total", c.pred_total},   {"gold_total", c.gold_total},
                            {"pred_matched", c.pred_matched}, {"gold_matched", c.gold_matched},
                            {"fp", c.fp()},                 {"fn", c.fn()},
                            {"precision", c.precision()},   {"recall", c.recall()},
                            {"f1", c.f1()}};
    };
    auto block = [&](const MetricBlock& b) {
      return nlohmann::json{{"type", b.label},
                            {"strict_span", cell(b.span)},
                            {"strict_start", cell(b.start)},
                            {"strict_end", cell(b.end)},
                            {"loose_span", cell(b.loose)}};
    };
    nlohmann::json j;
    j["metrics_version"] = 1;
    j["matching"] = "coverage";  // see count_doc
    auto arr = nlohmann::json::array();
    for (const auto& b : per_type) arr.push_back(block(b));
    j["per_type"] = std::move(arr);
    j["micro"] = block(micro);
    return j;
  }

  std::string to_table() const {
    std::ostringstream os;
    os << std::left << std::setw(16) << "type" << std::setw(14) << "metric";
    os << std::right << std::setw(9) << "P" << std::setw(9) << "R" << std::setw(9) << "F1"
       << std::setw(8) << "TP" << std::setw(8) << "FP" << std::setw(8) << "FN" << '\n';
    auto line = [&](const std::string& t, const char* m, const PrCell& c) {
      os << std::left << std::setw(16) << t << std::setw(14) << m;
      os << std::right << std::fixed << std::setprecision(4) << std::setw(9) << c.precision()
         << std::setw(9) << c.recall() << std::setw(9) << c.f1() << std::setw(8) << c.pred_matched
         << std::setw(8) << c.fp() << std::setw(8) << c.fn() << '\n';
    };
    auto block = [&](const MetricBlock& b) {
      line(b.label, "strict_span", b.span);
      line(b.label, "strict_start", b.start);
      line(b.label, "strict_end", b.end);
      line(b.label, "loose_span", b.loose);
    };
    for (const auto& b : per_type) block(b);
    block(micro);
    return os.str();
  }
};

inline EvalReport compute_report(const std::vector<DocMentions>& docs,
                                 const std::vector<std::string>& type_names) {
  EvalReport rep;
  rep.micro.label = "ALL";
  rep.per_type.resize(type_names.size());
  for (std::size_t k = 0; k < type_names.size(); ++k) rep.per_type[k].label = type_names[k];
  for (const auto& d : docs) {
    for (std::size_t k = 0; k < type_names.size(); ++k) {
      const int kk = static_cast<int>(k);
      rep.per_type[k].span.accumulate(count_doc(MatchKind::span_exact, d, kk));
      rep.per_type[k].start.accumulate(count_doc(MatchKind::start_key, d, kk));
      rep.per_type[k].end.accumulate(count_doc(MatchKind::end_key, d, kk));
      rep.per_type[k].loose.accumulate(count_doc(MatchKind::loose_overlap, d, kk));
    }
    rep.micro.span.accumulate(count_doc(MatchKind::span_exact, d, -1));
    rep.micro.start.accumulate(count_doc(MatchKind::start_key, d, -1));
    rep.micro.end.accumulate(count_doc(MatchKind::end_key, d, -1));
    rep.micro.loose.accumulate(count_doc(MatchKind::loose_overlap, d, -1));
  }
  return rep;
}

// Convenience single-triple forms used by tests and the threshold tuner.
inline PrCell strict_span_counts(const std::vector<DocMentions>& docs) {
  PrCell c;
  for (const auto& d : docs) c.accumulate(count_doc(MatchKind::span_exact, d, -1));
  return c;
}

inline double micro_span_f1(const std::vector<DocMentions>& docs) {
  return strict_span_counts(docs).f1();
}

}  // namespace binder
