#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "binder/errors.hpp"

namespace binder {

// Word-level vocabulary. Ids are line numbers in the vocab file; the first
// four lines are always [PAD], [UNK], [CLS], [SEP] in that order. Mention
// markers for prototype descriptions are ordinary entries added after them.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kSep = 3;
  static constexpr const char* kMentionStartToken = "[mstart]";
  static constexpr const char* kMentionEndToken = "[mend]";

  Vocabulary() {
    for (const char* s : {"[PAD]", "[UNK]", "[CLS]", "[SEP]"}) add(s);
  }

  int add(const std::string& tok) {
    auto it = token_to_id_.find(tok);
    if (it != token_to_id_.end()) return it->second;
    const int id = static_cast<int>(id_to_token_.size());
    id_to_token_.push_back(tok);
    token_to_id_.emplace(tok, id);
    return id;
  }

  int id(const std::string& tok) const {
    auto it = token_to_id_.find(tok);
    return it == token_to_id_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& tok) const { return token_to_id_.count(tok) > 0; }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
      throw FormatError("vocab: id " + std::to_string(id) + " out of range");
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  std::size_t size() const { return id_to_token_.size(); }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw FormatError("vocab: cannot open '" + path + "' for writing");
    for (const auto& t : id_to_token_) out << t << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("vocab: cannot open '" + path + "'");
    Vocabulary v;
    std::string line;
    std::size_t lineno = 0;
    static const char* expected[] = {"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
    while (std::getline(in, line)) {
      if (lineno < 4) {
        if (line != expected[lineno])
          throw FormatError("vocab: line " + std::to_string(lineno + 1) + " must be " +
                            expected[lineno] + ", got '" + line + "'");
      } else {
        if (line.empty())
          throw FormatError("vocab: empty token at line " + std::to_string(lineno + 1));
        if (v.contains(line))
          throw FormatError("vocab: duplicate token '" + line + "' at line " +
                            std::to_string(lineno + 1));
        v.add(line);
      }
      ++lineno;
    }
    if (lineno < 4) throw FormatError("vocab: file has fewer than 4 lines");
    return v;
  }

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

struct Token {
  std::string text;        // lowercased surface form
  std::size_t start_char;  // byte offset, inclusive
  std::size_t end_char;    // byte offset, exclusive
  bool operator==(const Token&) const = default;
};

namespace detail {
inline bool is_space_byte(unsigned char c) { return std::isspace(c) != 0; }
inline bool is_punct_byte(unsigned char c) { return c < 0x80 && std::ispunct(c) != 0; }
inline char lower_byte(unsigned char c) {
  return static_cast<char>(c < 0x80 ? std::tolower(c) : c);
}
}  // namespace detail

// Whitespace split plus punctuation isolation; every ASCII punctuation byte
// becomes its own token. Offsets are non-overlapping, ascending, and cover
// every non-space byte.
inline std::vector<Token> basic_tokenize(const std::string& text) {
  std::vector<Token> out;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    if (detail::is_space_byte(c)) {
      ++i;
      continue;
    }
    if (detail::is_punct_byte(c)) {
      out.push_back({std::string(1, detail::lower_byte(c)), i, i + 1});
      ++i;
      continue;
    }
    std::size_t j = i;
    std::string word;
    while (j < n) {
      const unsigned char cj = static_cast<unsigned char>(text[j]);
      if (detail::is_space_byte(cj) || detail::is_punct_byte(cj)) break;
      word.push_back(detail::lower_byte(cj));
      ++j;
    }
    out.push_back({std::move(word), i, j});
    i = j;
  }
  return out;
}

struct Tokenized {
  std::vector<Token> tokens;  // content tokens; tokens[i] corresponds to ids[i+1]
  std::vector<int> ids;       // [CLS] content... [SEP]
};

inline Tokenized tokenize(const std::string& text, const Vocabulary& vocab) {
  Tokenized t;
  t.tokens = basic_tokenize(text);
  t.ids.reserve(t.tokens.size() + 2);
  t.ids.push_back(Vocabulary::kCls);
  for (const auto& tok : t.tokens) t.ids.push_back(vocab.id(tok.text));
  t.ids.push_back(Vocabulary::kSep);
  return t;
}

// [CLS] tokens [SEP] for already-split tokens (corpus documents store their
// own token lists).
inline std::vector<int> ids_with_markers(const std::vector<std::string>& tokens,
                                         const Vocabulary& vocab) {
  std::vector<int> ids;
  ids.reserve(tokens.size() + 2);
  ids.push_back(Vocabulary::kCls);
  for (const auto& t : tokens) ids.push_back(vocab.id(t));
  ids.push_back(Vocabulary::kSep);
  return ids;
}

// Deterministic vocabulary construction: mention markers first, then all
// distinct tokens of all texts in lexicographic order.
inline Vocabulary build_vocabulary(const std::vector<std::string>& texts) {
  Vocabulary v;
  v.add(Vocabulary::kMentionStartToken);
  v.add(Vocabulary::kMentionEndToken);
  std::map<std::string, int> seen;
  for (const auto& text : texts)
    for (const auto& tok : basic_tokenize(text)) seen[tok.text] = 1;
  for (const auto& [tok, cnt] : seen)
    if (!v.contains(tok)) v.add(tok);
  return v;
}

}  // namespace binder
