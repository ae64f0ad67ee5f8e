#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "support.hpp"

using namespace binder;

namespace {

Vocabulary tiny_vocab() {
  return build_vocabulary({"jim bought shares", "ada visited york today", "bob met ada"});
}

EncoderConfig tiny_encoder() {
  EncoderConfig cfg;
  cfg.num_layers = 2;
  cfg.num_heads = 2;
  cfg.d_model = 16;
  cfg.ffn_dim = 32;
  cfg.max_positions = 16;
  cfg.dropout = 0.1;
  return cfg;
}

}  // namespace

TEST_CASE("tokenization wraps content in sequence markers") {
  Vocabulary v = tiny_vocab();
  Tokenized t = tokenize("Jim bought shares", v);
  REQUIRE(t.tokens.size() == 3);
  REQUIRE(t.ids.size() == 5);
  REQUIRE(t.ids.front() == Vocabulary::kCls);
  REQUIRE(t.ids.back() == Vocabulary::kSep);
  REQUIRE(t.tokens[0].text == "jim");
  REQUIRE(t.tokens[1].text == "bought");
  REQUIRE(t.tokens[2].text == "shares");
}

TEST_CASE("empty text tokenizes to the two markers alone") {
  Vocabulary v = tiny_vocab();
  Tokenized t = tokenize("", v);
  REQUIRE(t.tokens.empty());
  REQUIRE(t.ids == std::vector<int>{Vocabulary::kCls, Vocabulary::kSep});
}

TEST_CASE("out-of-vocabulary words map to the unknown id") {
  Vocabulary v = tiny_vocab();
  Tokenized t = tokenize("xqzzy", v);
  REQUIRE(t.ids == std::vector<int>{Vocabulary::kCls, Vocabulary::kUnk, Vocabulary::kSep});
}

TEST_CASE("tokenizer lowercases and splits punctuation with char offsets") {
  auto toks = basic_tokenize("Ada, visited York.");
  REQUIRE(toks.size() == 5);
  REQUIRE(toks[0].text == "ada");
  REQUIRE(toks[1].text == ",");
  REQUIRE(toks[2].text == "visited");
  REQUIRE(toks[3].text == "york");
  REQUIRE(toks[4].text == ".");
  REQUIRE(toks[0].start_char == 0);
  REQUIRE(toks[0].end_char == 3);
  REQUIRE(toks[3].start_char == 13);
  REQUIRE(toks[3].end_char == 17);
}

TEST_CASE("vocabulary round-trips every in-vocab word") {
  Vocabulary v = tiny_vocab();
  for (const auto& w : {"jim", "bought", "shares", "ada", "york"}) {
    REQUIRE(v.contains(w));
    REQUIRE(v.token(v.id(w)) == w);
  }
}

TEST_CASE("vocabulary saves and loads identically") {
  namespace fs = std::filesystem;
  Vocabulary v = tiny_vocab();
  const fs::path dir = fs::temp_directory_path() / "binder_vocab_test";
  fs::create_directories(dir);
  const std::string path = (dir / "vocab.txt").string();
  v.save(path);
  Vocabulary w = Vocabulary::load(path);
  REQUIRE(w.size() == v.size());
  for (int i = 0; i < static_cast<int>(v.size()); ++i) REQUIRE(w.token(i) == v.token(i));
  fs::remove_all(dir);
}

TEST_CASE("vocabulary construction is order independent given the same word set") {
  Vocabulary a = build_vocabulary({"ada visited york", "bob met ada"});
  Vocabulary b = build_vocabulary({"bob met ada", "ada visited york"});
  REQUIRE(a.size() == b.size());
  for (int i = 0; i < static_cast<int>(a.size()); ++i) REQUIRE(a.token(i) == b.token(i));
}

TEST_CASE("hidden states have one row per id and are deterministic in eval mode") {
  Vocabulary v = tiny_vocab();
  EncoderConfig cfg = tiny_encoder();
  ParamStore ps;
  CounterRng rng(3, 1);
  init_encoder_params(ps, "enc.", cfg, v.size(), rng, 0.05);

  auto ids = ids_with_markers({"ada", "visited", "york"}, v);
  NoGradGuard ng;
  Tensor h1 = encode_sequence(ps, "enc.", cfg, ids, false, nullptr);
  REQUIRE(h1.shape() == Shape{ids.size(), static_cast<std::size_t>(cfg.d_model)});
  Tensor h2 = encode_sequence(ps, "enc.", cfg, ids, false, nullptr);
  REQUIRE(h1.values() == h2.values());
}

TEST_CASE("swapping two content tokens changes the hidden states") {
  Vocabulary v = tiny_vocab();
  EncoderConfig cfg = tiny_encoder();
  ParamStore ps;
  CounterRng rng(3, 1);
  init_encoder_params(ps, "enc.", cfg, v.size(), rng, 0.05);

  NoGradGuard ng;
  Tensor ha = encode_sequence(ps, "enc.", cfg, ids_with_markers({"ada", "york"}, v), false, nullptr);
  Tensor hb = encode_sequence(ps, "enc.", cfg, ids_with_markers({"york", "ada"}, v), false, nullptr);
  bool any_diff = false;
  for (std::size_t i = 0; i < ha.numel(); ++i)
    if (ha.values()[i] != hb.values()[i]) any_diff = true;
  REQUIRE(any_diff);
}

TEST_CASE("sequences beyond max positions raise a length error naming the limit") {
  Vocabulary v = tiny_vocab();
  EncoderConfig cfg = tiny_encoder();
  ParamStore ps;
  CounterRng rng(3, 1);
  init_encoder_params(ps, "enc.", cfg, v.size(), rng, 0.05);

  std::vector<int> ids(cfg.max_positions + 1, Vocabulary::kUnk);
  REQUIRE_THROWS_MATCHES(encode_sequence(ps, "enc.", cfg, ids, false, nullptr), std::length_error,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("16")));
}

TEST_CASE("attention rows are normalized") {
  Vocabulary v = tiny_vocab();
  EncoderConfig cfg = tiny_encoder();
  ParamStore ps;
  CounterRng rng(5, 1);
  init_encoder_params(ps, "enc.", cfg, v.size(), rng, 0.05);

  auto ids = ids_with_markers({"ada", "visited", "york", "today"}, v);
  NoGradGuard ng;
  EncodeTrace trace;
  encode_sequence(ps, "enc.", cfg, ids, false, nullptr, &trace);
  REQUIRE(trace.attention.size() == static_cast<std::size_t>(cfg.num_layers));
  for (const auto& layer : trace.attention) {
    REQUIRE(layer.size() == static_cast<std::size_t>(cfg.num_heads));
    for (const auto& probs : layer) {
      REQUIRE(probs.shape() == Shape{ids.size(), ids.size()});
      for (std::size_t i = 0; i < ids.size(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < ids.size(); ++j) s += probs.at(i, j);
        REQUIRE(s == Catch::Approx(1.0).margin(1e-10));
      }
    }
  }
}

TEST_CASE("summary state is the first hidden row") {
  Vocabulary v = tiny_vocab();
  EncoderConfig cfg = tiny_encoder();
  ParamStore ps;
  CounterRng rng(7, 1);
  init_encoder_params(ps, "enc.", cfg, v.size(), rng, 0.05);

  auto ids = ids_with_markers({"ada", "visited"}, v);
  NoGradGuard ng;
  Tensor h = encode_sequence(ps, "enc.", cfg, ids, false, nullptr);
  Tensor s = encode_summary(ps, "enc.", cfg, ids, false, nullptr);
  REQUIRE(s.shape() == Shape{static_cast<std::size_t>(cfg.d_model)});
  for (int j = 0; j < cfg.d_model; ++j) REQUIRE(s.at(j) == h.at(0, j));
}

TEST_CASE("distinct descriptions embed to distinct summary vectors") {
  Vocabulary v = tiny_vocab();
  EncoderConfig cfg = tiny_encoder();
  ParamStore ps;
  CounterRng rng(9, 1);
  init_encoder_params(ps, "enc.", cfg, v.size(), rng, 0.05);

  NoGradGuard ng;
  Tensor a = encode_summary(ps, "enc.", cfg, ids_with_markers({"ada"}, v), false, nullptr);
  Tensor b = encode_summary(ps, "enc.", cfg, ids_with_markers({"york"}, v), false, nullptr);
  bool any_diff = false;
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (a.values()[i] != b.values()[i]) any_diff = true;
  REQUIRE(any_diff);
}

TEST_CASE("type and text encoders are fully decoupled") {
  auto toy = binder::testsupport::make_toy_batch(0);
  BinderModel model = BinderModel::create(toy.cfg, toy.vocab, toy.defs, 11);

  std::set<std::string> type_names, text_names;
  for (const auto& [name, t] : model.params) {
    if (name.rfind("type_enc.", 0) == 0) type_names.insert(name);
    if (name.rfind("text_enc.", 0) == 0) text_names.insert(name);
  }
  REQUIRE_FALSE(type_names.empty());
  REQUIRE_FALSE(text_names.empty());
  REQUIRE(type_names.size() == text_names.size());

  auto ids = ids_with_markers({"ada", "visited", "york"}, toy.vocab);
  NoGradGuard ng;
  Tensor before = encode_sequence(model.params, "text_enc.", toy.cfg.encoder, ids, false, nullptr);
  for (const auto& name : type_names)
    for (auto& x : model.params.get(name).mutable_values()) x += 0.37;
  Tensor after = encode_sequence(model.params, "text_enc.", toy.cfg.encoder, ids, false, nullptr);
  REQUIRE(before.values() == after.values());
}

TEST_CASE("training loss reaches every encoder parameter") {
  auto toy = binder::testsupport::make_toy_batch(0);
  BinderModel model = BinderModel::create(toy.cfg, toy.vocab, toy.defs, 13);

  CounterRng drop(13, 202);
  Tensor loss = model.batch_loss(toy.windows, drop);
  backward(loss);

  for (const auto& [name, t] : model.params) {
    if (name.rfind("type_enc.", 0) != 0 && name.rfind("text_enc.", 0) != 0) continue;
    INFO("parameter: " << name);
    REQUIRE(t.has_grad());
    double norm = 0.0;
    for (double g : t.grad()) norm += g * g;
    REQUIRE(norm > 0.0);
  }
}
