#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "binder/errors.hpp"
#include "binder/rng.hpp"
#include "binder/tokenizer.hpp"

#include <json.hpp>

namespace binder {

struct Mention {
  int start = 0;  // token index, inclusive
  int end = 0;    // token index, inclusive
  int type_id = 0;
  auto operator<=>(const Mention&) const = default;
};

struct LabeledDocument {
  std::string doc_id;
  std::string text;
  std::vector<Token> tokens;
  std::vector<Mention> mentions;  // may nest or overlap; no exact duplicates

  void validate() const {
    std::set<std::tuple<int, int, int>> seen;
    for (const auto& m : mentions) {
      if (m.start < 0 || m.end < m.start || static_cast<std::size_t>(m.end) >= tokens.size())
        throw FormatError("doc '" + doc_id + "': mention (" + std::to_string(m.start) + "," +
                          std::to_string(m.end) + ") outside token range");
      if (!seen.insert({m.start, m.end, m.type_id}).second)
        throw FormatError("doc '" + doc_id + "': duplicate mention (" + std::to_string(m.start) +
                          "," + std::to_string(m.end) + ")");
    }
  }
};

class TypeCatalog {
 public:
  int add(const std::string& name) {
    auto it = ids_.find(name);
    if (it != ids_.end()) return it->second;
    const int id = static_cast<int>(names_.size());
    names_.push_back(name);
    ids_.emplace(name, id);
    return id;
  }
  int id_of(const std::string& name) const {
    auto it = ids_.find(name);
    return it == ids_.end() ? -1 : it->second;
  }
  const std::string& name(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= names_.size())
      throw FormatError("type catalog: id " + std::to_string(id) + " unknown");
    return names_[static_cast<std::size_t>(id)];
  }
  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
  std::map<std::string, int> ids_;
};

struct Corpus {
  std::vector<LabeledDocument> docs;
  TypeCatalog types;
};

struct PrototypeExemplar {
  std::vector<std::string> tokens;
  int start = 0;  // mention token range within tokens, inclusive
  int end = 0;
};

struct EntityTypeDef {
  int type_id = 0;
  std::string name;
  std::string keyword;
  std::string guideline;
  std::vector<PrototypeExemplar> prototypes;
};

enum class CorpusFormat { json_spans, bio_conll };

// ---------------------------------------------------------------------------
// json_spans: JSON-lines, one document per line.
// ---------------------------------------------------------------------------

inline nlohmann::json doc_to_json(const LabeledDocument& doc, const TypeCatalog& types) {
  nlohmann::json j;
  j["doc_id"] = doc.doc_id;
  j["text"] = doc.text;
  auto toks = nlohmann::json::array();
  for (const auto& t : doc.tokens)
    toks.push_back({{"text", t.text}, {"start_char", t.start_char}, {"end_char", t.end_char}});
  j["tokens"] = std::move(toks);
  auto ms = nlohmann::json::array();
  for (const auto& m : doc.mentions)
    ms.push_back({{"start_token", m.start}, {"end_token", m.end}, {"type", types.name(m.type_id)}});
  j["mentions"] = std::move(ms);
  return j;
}

inline void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("save_corpus: cannot open '" + path + "'");
  for (const auto& d : corpus.docs) out << doc_to_json(d, corpus.types).dump() << '\n';
}

inline Corpus load_json_spans(const std::string& path, TypeCatalog catalog = {},
                              bool allow_new_types = true) {
  std::ifstream in(path);
  if (!in) throw FormatError("load_corpus: cannot open '" + path + "'");
  Corpus corpus;
  corpus.types = std::move(catalog);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": bad JSON: " + e.what());
    }
    try {
      LabeledDocument doc;
      doc.doc_id = j.at("doc_id").get<std::string>();
      doc.text = j.at("text").get<std::string>();
      for (const auto& tj : j.at("tokens"))
        doc.tokens.push_back({tj.at("text").get<std::string>(),
                              tj.at("start_char").get<std::size_t>(),
                              tj.at("end_char").get<std::size_t>()});
      for (const auto& mj : j.at("mentions")) {
        const std::string tname = mj.at("type").get<std::string>();
        int tid = corpus.types.id_of(tname);
        if (tid < 0) {
          if (!allow_new_types)
            throw FormatError("unknown entity type '" + tname + "'");
          tid = corpus.types.add(tname);
        }
        doc.mentions.push_back(
            {mj.at("start_token").get<int>(), mj.at("end_token").get<int>(), tid});
      }
      doc.validate();
      corpus.docs.push_back(std::move(doc));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// BIO reader: two whitespace-separated columns, blank line between sentences.
// ---------------------------------------------------------------------------

inline Corpus load_bio_conll(const std::string& path, TypeCatalog catalog = {},
                             bool allow_new_types = true) {
  std::ifstream in(path);
  if (!in) throw FormatError("load_corpus: cannot open '" + path + "'");
  Corpus corpus;
  corpus.types = std::move(catalog);

  std::vector<std::pair<std::string, std::string>> rows;  // token, tag
  std::vector<std::size_t> row_lines;
  std::size_t lineno = 0, sent_index = 0;

  auto flush = [&]() {
    if (rows.empty()) return;
    LabeledDocument doc;
    doc.doc_id = "bio-" + std::to_string(sent_index++);
    std::size_t off = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::string low;
      for (char c : rows[i].first) low.push_back(detail::lower_byte(static_cast<unsigned char>(c)));
      if (i) {
        doc.text += ' ';
        ++off;
      }
      doc.tokens.push_back({low, off, off + low.size()});
      doc.text += low;
      off += low.size();
    }
    int open_start = -1, open_type = -1;
    auto close_run = [&](int last) {
      if (open_start >= 0) doc.mentions.push_back({open_start, last, open_type});
      open_start = -1;
      open_type = -1;
    };
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const std::string& tag = rows[i].second;
      if (tag == "O") {
        close_run(static_cast<int>(i) - 1);
      } else if (tag.size() > 2 && (tag[0] == 'B' || tag[0] == 'I') && tag[1] == '-') {
        const std::string tname = tag.substr(2);
        int tid = corpus.types.id_of(tname);
        if (tid < 0) {
          if (!allow_new_types)
            throw FormatError(path + ":" + std::to_string(row_lines[i]) +
                              ": unknown entity type '" + tname + "'");
          tid = corpus.types.add(tname);
        }
        if (tag[0] == 'B') {
          close_run(static_cast<int>(i) - 1);
          open_start = static_cast<int>(i);
          open_type = tid;
        } else {
          if (open_start < 0 || open_type != tid)
            throw FormatError(path + ":" + std::to_string(row_lines[i]) + ": I-" + tname +
                              " without a preceding B-" + tname);
        }
      } else {
        throw FormatError(path + ":" + std::to_string(row_lines[i]) + ": bad tag '" + tag + "'");
      }
    }
    close_run(static_cast<int>(rows.size()) - 1);
    doc.validate();
    corpus.docs.push_back(std::move(doc));
    rows.clear();
    row_lines.clear();
  };

  std::string line;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string tok, tag, extra;
    if (!(ls >> tok)) {
      flush();
      continue;
    }
    if (!(ls >> tag) || (ls >> extra))
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected 'token tag'");
    rows.emplace_back(tok, tag);
    row_lines.push_back(lineno);
  }
  flush();
  return corpus;
}

inline Corpus load_corpus(const std::string& path, CorpusFormat format, TypeCatalog catalog = {},
                          bool allow_new_types = true) {
  return format == CorpusFormat::json_spans
             ? load_json_spans(path, std::move(catalog), allow_new_types)
             : load_bio_conll(path, std::move(catalog), allow_new_types);
}

// ---------------------------------------------------------------------------
// Type definition file: JSON array of EntityTypeDef.
// ---------------------------------------------------------------------------

inline void save_type_defs(const std::vector<EntityTypeDef>& defs, const std::string& path) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& d : defs) {
    nlohmann::json pj = nlohmann::json::array();
    for (const auto& p : d.prototypes)
      pj.push_back({{"tokens", p.tokens}, {"start", p.start}, {"end", p.end}});
    arr.push_back({{"type_id", d.type_id},
                   {"name", d.name},
                   {"keyword", d.keyword},
                   {"guideline", d.guideline},
                   {"prototypes", std::move(pj)}});
  }
  std::ofstream out(path);
  if (!out) throw FormatError("save_type_defs: cannot open '" + path + "'");
  out << arr.dump(2) << '\n';
}

inline std::vector<EntityTypeDef> load_type_defs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("load_type_defs: cannot open '" + path + "'");
  nlohmann::json arr;
  try {
    in >> arr;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("load_type_defs: " + path + ": " + e.what());
  }
  std::vector<EntityTypeDef> defs;
  for (const auto& j : arr) {
    EntityTypeDef d;
    d.type_id = j.at("type_id").get<int>();
    d.name = j.at("name").get<std::string>();
    d.keyword = j.value("keyword", "");
    d.guideline = j.value("guideline", "");
    if (j.contains("prototypes"))
      for (const auto& pj : j["prototypes"])
        d.prototypes.push_back({pj.at("tokens").get<std::vector<std::string>>(),
                                pj.at("start").get<int>(), pj.at("end").get<int>()});
    if (d.keyword.empty() && d.guideline.empty() && d.prototypes.empty())
      throw FormatError("type '" + d.name + "': every description variant is empty");
    defs.push_back(std::move(d));
  }
  for (std::size_t i = 0; i < defs.size(); ++i)
    if (defs[i].type_id != static_cast<int>(i))
      throw FormatError("type defs: ids must be 0..K-1 in order");
  return defs;
}

// ---------------------------------------------------------------------------
// Windowing.
// ---------------------------------------------------------------------------

struct Window {
  std::string doc_id;
  int offset = 0;                 // document token index of the window start
  std::vector<Token> tokens;      // the window's slice of document tokens
  std::vector<Mention> mentions;  // window-local coordinates
  int dropped = 0;                // gold mentions crossing this window's edge
};

// Fixed-size windows over content tokens: consecutive windows overlap by
// `stride` tokens (step = max_len - stride). Mentions crossing a boundary are
// dropped from that window and counted.
inline std::vector<Window> make_windows(const LabeledDocument& doc, int max_len, int stride) {
  if (max_len <= stride || stride < 0)
    throw ConfigError("make_windows: need max_len > stride >= 0");
  const int n = static_cast<int>(doc.tokens.size());
  std::vector<Window> out;
  const int step = max_len - stride;
  for (int a = 0;; a += step) {
    const int b = std::min(a + max_len, n);
    Window w;
    w.doc_id = doc.doc_id;
    w.offset = a;
    w.tokens.assign(doc.tokens.begin() + a, doc.tokens.begin() + b);
    for (const auto& m : doc.mentions) {
      if (m.start >= a && m.end < b)
        w.mentions.push_back({m.start - a, m.end - a, m.type_id});
      else if (m.end >= a && m.start < b)
        ++w.dropped;
    }
    out.push_back(std::move(w));
    if (a + max_len >= n) break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Distant-supervision degradation.
// ---------------------------------------------------------------------------

struct DegradeResult {
  Corpus corpus;
  nlohmann::json manifest;  // {"dropped": [...], "injected": [...]}
};

// Simulates dictionary supervision: keeps floor(n * keep_recall + 0.5) of the
// gold mentions per type (seeded shuffle), optionally injecting spurious
// mentions at rate precision_noise of the original per-type count. Token text
// is never touched.
inline DegradeResult degrade_distant(const Corpus& corpus, double keep_recall,
                                     double precision_noise, std::uint64_t seed) {
  if (keep_recall < 0 || keep_recall > 1 || precision_noise < 0 || precision_noise > 1)
    throw ConfigError("degrade_distant: fractions must be in [0,1]");
  DegradeResult res;
  res.corpus = corpus;
  auto dropped = nlohmann::json::array();
  auto injected = nlohmann::json::array();
  CounterRng rng(seed, /*stream=*/71);

  const std::size_t K = corpus.types.size();
  std::vector<std::set<std::size_t>> drop_marks(corpus.docs.size());
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<std::pair<std::size_t, std::size_t>> locs;  // (doc, mention index)
    for (std::size_t d = 0; d < corpus.docs.size(); ++d)
      for (std::size_t mi = 0; mi < corpus.docs[d].mentions.size(); ++mi)
        if (corpus.docs[d].mentions[mi].type_id == static_cast<int>(k)) locs.emplace_back(d, mi);
    const std::size_t n = locs.size();
    const std::size_t keep =
        static_cast<std::size_t>(std::floor(static_cast<double>(n) * keep_recall + 0.5));
    for (std::size_t i = n; i > 1; --i)  // Fisher-Yates
      std::swap(locs[i - 1], locs[rng.below(i)]);
    for (std::size_t i = keep; i < n; ++i) {
      const auto [d, mi] = locs[i];
      drop_marks[d].insert(mi);
      const auto& m = corpus.docs[d].mentions[mi];
      dropped.push_back({{"doc_id", corpus.docs[d].doc_id},
                         {"start_token", m.start},
                         {"end_token", m.end},
                         {"type", corpus.types.name(m.type_id)}});
    }
  }
  for (std::size_t d = 0; d < corpus.docs.size(); ++d) {
    auto& doc = res.corpus.docs[d];
    std::vector<Mention> kept;
    for (std::size_t mi = 0; mi < doc.mentions.size(); ++mi)
      if (!drop_marks[d].count(mi)) kept.push_back(doc.mentions[mi]);
    doc.mentions = std::move(kept);
  }

  if (precision_noise > 0) {
    for (std::size_t k = 0; k < K; ++k) {
      std::size_t n = 0;
      for (const auto& doc : corpus.docs)
        for (const auto& m : doc.mentions)
          if (m.type_id == static_cast<int>(k)) ++n;
      const std::size_t inject =
          static_cast<std::size_t>(std::floor(static_cast<double>(n) * precision_noise + 0.5));
      std::size_t made = 0, attempts = 0;
      while (made < inject && attempts < inject * 50 + 100) {
        ++attempts;
        auto& doc = res.corpus.docs[rng.below(res.corpus.docs.size())];
        const int nt = static_cast<int>(doc.tokens.size());
        if (nt == 0) continue;
        const int s = static_cast<int>(rng.below(static_cast<std::size_t>(nt)));
        const int width = 1 + static_cast<int>(rng.below(3));
        const int e = std::min(s + width - 1, nt - 1);
        Mention cand{s, e, static_cast<int>(k)};
        if (std::find(doc.mentions.begin(), doc.mentions.end(), cand) != doc.mentions.end())
          continue;
        doc.mentions.push_back(cand);
        injected.push_back({{"doc_id", doc.doc_id},
                            {"start_token", s},
                            {"end_token", e},
                            {"type", corpus.types.name(static_cast<int>(k))}});
        ++made;
      }
    }
  }
  res.manifest = {{"dropped", std::move(dropped)}, {"injected", std::move(injected)}};
  return res;
}

// ---------------------------------------------------------------------------
// Entity-type description inputs.
// ---------------------------------------------------------------------------

enum class DescriptionMode { atomic, keyword, guideline, prototypes };

inline DescriptionMode parse_description_mode(const std::string& s) {
  if (s == "atomic") return DescriptionMode::atomic;
  if (s == "keyword") return DescriptionMode::keyword;
  if (s == "guideline") return DescriptionMode::guideline;
  if (s == "prototypes") return DescriptionMode::prototypes;
  throw ConfigError("unknown description mode '" + s + "'");
}

// One encoder input per available exemplar. summary_pos is the hidden-state
// row to read the type summary from: 0 (sequence-start marker) for text
// descriptions, the start-marker row for prototypes.
struct DescriptionInput {
  std::vector<std::vector<std::string>> token_lists;
  std::vector<int> summary_pos;
};

inline DescriptionInput type_description(const EntityTypeDef& def, DescriptionMode mode) {
  DescriptionInput out;
  auto text_variant = [&](const std::string& text) {
    if (text.empty())
      throw ConfigError("type '" + def.name + "': requested description variant is empty");
    std::vector<std::string> toks;
    for (const auto& t : basic_tokenize(text)) toks.push_back(t.text);
    out.token_lists.push_back(std::move(toks));
    out.summary_pos.push_back(0);
  };
  switch (mode) {
    case DescriptionMode::atomic:
      break;  // no encoder input; the model substitutes a learnable row
    case DescriptionMode::keyword:
      text_variant(def.keyword);
      break;
    case DescriptionMode::guideline:
      text_variant(def.guideline);
      break;
    case DescriptionMode::prototypes: {
      if (def.prototypes.empty())
        throw ConfigError("type '" + def.name + "': no prototype exemplars");
      for (const auto& p : def.prototypes) {
        if (p.start < 0 || p.end < p.start || static_cast<std::size_t>(p.end) >= p.tokens.size())
          throw FormatError("type '" + def.name + "': prototype mention out of range");
        std::vector<std::string> toks;
        for (int i = 0; i < static_cast<int>(p.tokens.size()); ++i) {
          if (i == p.start) toks.push_back(Vocabulary::kMentionStartToken);
          toks.push_back(p.tokens[static_cast<std::size_t>(i)]);
          if (i == p.end) toks.push_back(Vocabulary::kMentionEndToken);
        }
        out.token_lists.push_back(std::move(toks));
        out.summary_pos.push_back(p.start + 1);  // +1 for the sequence-start marker
      }
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic nested-NER corpus.
// ---------------------------------------------------------------------------

struct SynthResult {
  Corpus corpus;
  std::vector<EntityTypeDef> defs;
  std::size_t nested_docs = 0;  // self-audit: documents holding a nested pair
};

namespace synthwords {
inline const std::vector<std::string> first_names = {
    "alice", "ben",   "carla", "dan",   "elena", "frank", "grace", "hugo",  "ines",
    "jonas", "karin", "leo",   "mara",  "nils",  "olga",  "pavel", "quinn", "rosa",
    "sam",   "tanya", "ulrich", "vera", "walt",  "xenia", "yuri",  "zoe"};
inline const std::vector<std::string> last_names = {
    "abbott", "bauer",  "castillo", "duran",  "ericsson", "fischer", "gupta",  "hansen",
    "ibarra", "jensen", "kovacs",   "larsen", "mendez",   "novak",   "ohara",  "petrov",
    "quispe", "rossi",  "schmidt",  "tanaka", "ueda",     "vargas",  "weber",  "xu",
    "yamada", "zhang"};
inline const std::vector<std::string> org_suffixes = {
    "corp", "industries", "holdings", "labs",  "group",
    "partners", "systems", "logistics", "media", "capital"};
inline const std::vector<std::string> cities = {
    "amsterdam", "berlin", "cairo",  "dublin", "edinburgh", "florence", "geneva", "havana",
    "istanbul",  "jakarta", "kyoto", "lisbon", "madrid",    "nairobi",  "oslo",   "prague",
    "quito",     "riga",    "seoul", "tokyo",  "utrecht",   "vienna",   "warsaw", "yokohama",
    "zurich"};
}  // namespace synthwords

inline std::vector<EntityTypeDef> synth_type_defs() {
  std::vector<EntityTypeDef> defs(3);
  defs[0] = {0, "person", "person",
             "a person entity is the full name of a human being , given as a first name "
             "followed by a family name , for example alice bauer or leo schmidt",
             {{{"yesterday", "karin", "novak", "signed", "the", "letter"}, 1, 2},
              {{"the", "report", "quotes", "sam", "rossi", "at", "length"}, 3, 4},
              {{"hugo", "tanaka", "declined", "to", "comment"}, 0, 1}}};
  defs[1] = {1, "organization", "organization",
             "an organization entity is a company or institution , usually a name followed "
             "by a corporate suffix such as corp , labs or holdings , or a phrase like bank "
             "of a city",
             {{{"shares", "of", "weber", "capital", "rose", "sharply"}, 2, 3},
              {{"bank", "of", "riga", "issued", "new", "bonds"}, 0, 2},
              {{"she", "left", "petrov", "systems", "in", "june"}, 2, 3}}};
  defs[2] = {2, "location", "location",
             "a location entity is the name of a city , for example berlin , kyoto or "
             "madrid",
             {{{"the", "summit", "took", "place", "in", "geneva"}, 5, 5},
              {{"flights", "to", "istanbul", "resumed", "on", "monday"}, 2, 2},
              {{"oslo", "hosted", "the", "final", "round"}, 0, 0}}};
  return defs;
}

namespace detail {

struct SlotFill {
  std::vector<std::string> tokens;
  std::vector<Mention> mentions;  // relative to the fill
  bool nested = false;
};

inline SlotFill synth_person(CounterRng& rng) {
  SlotFill f;
  f.tokens = {synthwords::first_names[rng.below(synthwords::first_names.size())],
              synthwords::last_names[rng.below(synthwords::last_names.size())]};
  f.mentions = {{0, 1, 0}};
  return f;
}

inline SlotFill synth_location(CounterRng& rng) {
  SlotFill f;
  f.tokens = {synthwords::cities[rng.below(synthwords::cities.size())]};
  f.mentions = {{0, 0, 2}};
  return f;
}

// form 0: last + suffix (flat); form 1: first last + suffix (nested person);
// form 2: bank of city (nested location).
inline SlotFill synth_org(CounterRng& rng, int form) {
  SlotFill f;
  if (form == 1) {
    f.tokens = {synthwords::first_names[rng.below(synthwords::first_names.size())],
                synthwords::last_names[rng.below(synthwords::last_names.size())],
                synthwords::org_suffixes[rng.below(synthwords::org_suffixes.size())]};
    f.mentions = {{0, 2, 1}, {0, 1, 0}};
    f.nested = true;
  } else if (form == 2) {
    f.tokens = {"bank", "of", synthwords::cities[rng.below(synthwords::cities.size())]};
    f.mentions = {{0, 2, 1}, {2, 2, 2}};
    f.nested = true;
  } else {
    f.tokens = {synthwords::last_names[rng.below(synthwords::last_names.size())],
                synthwords::org_suffixes[rng.below(synthwords::org_suffixes.size())]};
    f.mentions = {{0, 1, 1}};
  }
  return f;
}

}  // namespace detail

// Template-grammar generator for a 3-type corpus (person/organization/
// location) with nested organization forms. Deterministic in the seed; at
// least 20% of documents carry a nested mention pair by construction.
inline SynthResult synth_generate(std::uint64_t seed, std::size_t n_docs) {
  // Slot letters: P person, O organization, L location.
  static const std::vector<std::vector<std::string>> templates = {
      {"P", "works", "at", "O", "."},
      {"O", "hired", "P", "in", "L", "."},
      {"P", "met", "P", "in", "L", "."},
      {"O", "opened", "an", "office", "in", "L", "."},
      {"P", "visited", "L", "last", "spring", "."},
      {"L", "welcomed", "O", "."},
      {"P", "joined", "O", "."},
      {"O", "and", "O", "merged", "."},
      {"analysts", "at", "O", "praised", "P", "."},
      {"P", "moved", "from", "L", "to", "L", "."},
  };
  static const std::vector<std::size_t> org_templates = {0, 1, 3, 5, 6, 7, 8};

  SynthResult res;
  res.defs = synth_type_defs();
  for (const auto& d : res.defs) res.corpus.types.add(d.name);

  CounterRng rng(seed, /*stream=*/11);
  for (std::size_t di = 0; di < n_docs; ++di) {
    const bool force_nested = di % 4 == 0;
    const auto& tpl = force_nested ? templates[org_templates[rng.below(org_templates.size())]]
                                   : templates[rng.below(templates.size())];
    LabeledDocument doc;
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "synth-%06zu", di);
    doc.doc_id = idbuf;

    bool nested_here = false;
    bool nested_placed = false;
    std::vector<std::string> words;
    for (const auto& slot : tpl) {
      detail::SlotFill fill;
      if (slot == "P")
        fill = detail::synth_person(rng);
      else if (slot == "L")
        fill = detail::synth_location(rng);
      else if (slot == "O") {
        int form;
        if (force_nested && !nested_placed) {
          form = 1 + static_cast<int>(rng.below(2));
          nested_placed = true;
        } else {
          form = static_cast<int>(rng.below(3));
        }
        fill = detail::synth_org(rng, form);
      } else {
        words.push_back(slot);
        continue;
      }
      const int base = static_cast<int>(words.size());
      for (auto& t : fill.tokens) words.push_back(std::move(t));
      for (auto m : fill.mentions)
        doc.mentions.push_back({m.start + base, m.end + base, m.type_id});
      nested_here = nested_here || fill.nested;
    }

    std::size_t off = 0;
    for (std::size_t i = 0; i < words.size(); ++i) {
      if (i) {
        doc.text += ' ';
        ++off;
      }
      doc.tokens.push_back({words[i], off, off + words[i].size()});
      doc.text += words[i];
      off += words[i].size();
    }
    doc.validate();
    if (nested_here) ++res.nested_docs;
    res.corpus.docs.push_back(std::move(doc));
  }
  return res;
}

}  // namespace binder
