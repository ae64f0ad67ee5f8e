#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <random>
#include <set>
#include <tuple>

#include "support.hpp"

using namespace binder;
using binder::testsupport::rand_leaf;

namespace {

using Triple = std::tuple<int, int, int>;

std::set<Triple> triples(const std::vector<ScoredMention>& ms) {
  std::set<Triple> out;
  for (const auto& m : ms) out.insert({m.start, m.end, m.type_id});
  return out;
}

ScoredMention cand(int start, int end, int type, double span, double st = 0.0, double en = 0.0) {
  ScoredMention m;
  m.start = start;
  m.end = end;
  m.type_id = type;
  m.span_score = span;
  m.start_score = st;
  m.end_score = en;
  return m;
}

struct HeadInstance {
  HeadConfig cfg;
  ParamStore ps;
  TypeEmbeddings types;
  Tensor hidden;
  int n_content;
};

HeadInstance random_instance(std::uint64_t seed, int n_content, int K) {
  HeadInstance h;
  h.cfg.d_model = 8;
  h.cfg.d_proj = 6;
  h.cfg.width_dim = 4;
  h.cfg.max_positions = 16;
  CounterRng rng(seed, 1);
  init_head_params(h.ps, "head.", h.cfg, rng, 0.4);
  h.ps.add_normal("thr.start", {static_cast<std::size_t>(K)}, rng, 0.5);
  h.ps.add_normal("thr.end", {static_cast<std::size_t>(K)}, rng, 0.5);
  h.ps.add_normal("thr.span", {static_cast<std::size_t>(K)}, rng, 0.5);
  CounterRng data(seed, 2);
  h.n_content = n_content;
  h.hidden = rand_leaf({static_cast<std::size_t>(n_content + 2), 8}, data, -1.0, 1.0);
  NoGradGuard ng;
  Tensor summaries = rand_leaf({static_cast<std::size_t>(K), 8}, data, -1.0, 1.0);
  h.types = entity_type_embeddings(h.ps, "head.", h.cfg, summaries);
  return h;
}

}  // namespace

TEST_CASE("span enumeration counts and order") {
  auto spans = enumerate_spans(5, 3);
  REQUIRE(spans.size() == 12);
  REQUIRE(spans.front() == std::pair<int, int>{0, 0});
  REQUIRE(spans.back() == std::pair<int, int>{4, 4});
  for (std::size_t i = 1; i < spans.size(); ++i) REQUIRE(spans[i - 1] < spans[i]);
  for (const auto& [i, j] : spans) {
    REQUIRE(i <= j);
    REQUIRE(j - i + 1 <= 3);
  }

  REQUIRE(enumerate_spans(3, 10).size() == 6);
  REQUIRE(enumerate_spans(0, 5).empty());
}

TEST_CASE("scoring yields one candidate per span and type") {
  auto h = random_instance(101, 6, 3);
  DecodeConfig dcfg;
  dcfg.max_span_len = 4;
  auto res = score_all(h.hidden, h.types, h.ps, "head.", h.cfg, dcfg);
  REQUIRE(res.candidates.size() == enumerate_spans(6, 4).size() * 3);
  REQUIRE(res.thresholds.span.size() == 3);
}

TEST_CASE("dynamic thresholds are the marker-position similarities") {
  auto h = random_instance(102, 5, 2);
  DecodeConfig dcfg;
  auto res = score_all(h.hidden, h.types, h.ps, "head.", h.cfg, dcfg);

  NoGradGuard ng;
  TokenProjections tp = token_projections(h.ps, "head.", h.cfg, h.hidden);
  Tensor start_sims = similarity_matrix(tp.u, h.types.e_b, h.ps.get("head.log_tau_start"));
  Tensor end_sims = similarity_matrix(tp.v, h.types.e_q, h.ps.get("head.log_tau_end"));
  Tensor s00 = span_representations(h.ps, "head.", h.cfg, h.hidden, {{0, 0}});
  Tensor span_sims = similarity_matrix(s00, h.types.e, h.ps.get("head.log_tau_span"));

  for (std::size_t k = 0; k < 2; ++k) {
    REQUIRE(res.thresholds.start[k] == start_sims.at(0, k));
    REQUIRE(res.thresholds.end[k] == end_sims.at(0, k));
    REQUIRE(res.thresholds.span[k] == span_sims.at(0, k));
  }
}

TEST_CASE("all candidates below threshold decode to the empty set") {
  TypeThresholds thr{{10.0}, {10.0}, {10.0}};
  std::vector<ScoredMention> cands = {cand(0, 1, 0, 5.0, 5.0, 5.0), cand(1, 2, 0, -2.0, 0.0, 0.0)};
  DecodeConfig dcfg;
  REQUIRE(decode(cands, thr, dcfg).empty());
}

TEST_CASE("threshold ties are dropped under the strict rule") {
  TypeThresholds thr{{0.0}, {0.0}, {1.0}};
  DecodeConfig dcfg;
  REQUIRE(decode({cand(0, 1, 0, 1.0, 1.0, 1.0)}, thr, dcfg).empty());
  REQUIRE(decode({cand(0, 1, 0, 1.0 + 1e-12, 1.0, 1.0)}, thr, dcfg).size() == 1);
}

TEST_CASE("span-only keeps what joint mode prunes on position scores") {
  TypeThresholds thr{{0.5}, {0.5}, {0.0}};
  std::vector<ScoredMention> cands = {cand(1, 2, 0, 2.0, 0.1, 0.9)};

  DecodeConfig span_only;
  span_only.strategy = DecodeStrategy::span_only;
  REQUIRE(decode(cands, thr, span_only).size() == 1);

  DecodeConfig joint;
  joint.strategy = DecodeStrategy::joint_position_span;
  REQUIRE(decode(cands, thr, joint).empty());
}

TEST_CASE("nested mentions survive non-flat decoding") {
  TypeThresholds thr{{0.0, 0.0}, {0.0, 0.0}, {0.0, 0.0}};
  std::vector<ScoredMention> cands = {cand(0, 3, 0, 1.5, 1.0, 1.0), cand(1, 2, 1, 1.2, 1.0, 1.0)};
  DecodeConfig dcfg;
  dcfg.flat = false;
  auto out = decode(cands, thr, dcfg);
  REQUIRE(triples(out) == std::set<Triple>{{0, 3, 0}, {1, 2, 1}});
}

TEST_CASE("greedy overlap removal keeps the highest-scoring chain") {
  std::vector<ScoredMention> ms = {cand(0, 2, 0, 0.9), cand(1, 3, 1, 0.8), cand(4, 5, 2, 0.7)};
  auto out = remove_overlap(ms);
  REQUIRE(triples(out) == std::set<Triple>{{0, 2, 0}, {4, 5, 2}});
}

TEST_CASE("score ties break by earlier start") {
  std::vector<ScoredMention> ms = {cand(2, 3, 0, 0.5), cand(0, 1, 0, 0.5)};
  auto out = remove_overlap(ms);
  REQUIRE(out.size() == 2);
  REQUIRE(out[0].start == 0);
  REQUIRE(out[1].start == 2);

  // Overlapping tie: the earlier start wins the slot.
  std::vector<ScoredMention> ov = {cand(1, 2, 0, 0.5), cand(0, 1, 0, 0.5)};
  auto out2 = remove_overlap(ov);
  REQUIRE(out2.size() == 1);
  REQUIRE(out2[0].start == 0);
}

TEST_CASE("overlap removal of nothing is nothing") {
  REQUIRE(remove_overlap({}).empty());
}

TEST_CASE("overlap removal ignores input order") {
  std::vector<ScoredMention> ms = {cand(0, 2, 0, 0.9),  cand(1, 3, 1, 0.8), cand(4, 5, 2, 0.7),
                                   cand(2, 4, 0, 0.85), cand(5, 6, 1, 0.7), cand(0, 0, 2, 0.95)};
  auto reference = triples(remove_overlap(ms));
  std::mt19937 gen(7);
  for (int shuffle = 0; shuffle < 1000; ++shuffle) {
    std::shuffle(ms.begin(), ms.end(), gen);
    REQUIRE(triples(remove_overlap(ms)) == reference);
  }
}

TEST_CASE("flat output never overlaps") {
  CounterRng rng(55, 0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<ScoredMention> ms;
    const int n = 1 + static_cast<int>(rng.below(12));
    for (int c = 0; c < n; ++c) {
      int i = static_cast<int>(rng.below(8));
      int j = i + static_cast<int>(rng.below(3));
      ms.push_back(cand(i, j, static_cast<int>(rng.below(2)), rng.uniform()));
    }
    auto out = remove_overlap(ms);
    for (std::size_t a = 0; a < out.size(); ++a)
      for (std::size_t b = a + 1; b < out.size(); ++b) {
        const bool disjoint = out[a].end < out[b].start || out[b].end < out[a].start;
        REQUIRE(disjoint);
      }
  }
}

TEST_CASE("joint output is a subset of span-only output") {
  for (std::uint64_t seed = 200; seed < 210; ++seed) {
    auto h = random_instance(seed, 7, 2);
    DecodeConfig dcfg;
    dcfg.max_span_len = 4;
    auto res = score_all(h.hidden, h.types, h.ps, "head.", h.cfg, dcfg);

    DecodeConfig so = dcfg;
    so.strategy = DecodeStrategy::span_only;
    DecodeConfig jo = dcfg;
    jo.strategy = DecodeStrategy::joint_position_span;
    auto so_set = triples(decode(res.candidates, res.thresholds, so));
    auto jo_set = triples(decode(res.candidates, res.thresholds, jo));
    for (const auto& t : jo_set) REQUIRE(so_set.count(t) == 1);
  }
}

TEST_CASE("decode agrees with the brute-force reference") {
  int checked = 0;
  for (std::uint64_t seed = 300; seed < 340; ++seed) {
    const int n = 1 + static_cast<int>(seed % 10);
    const int K = 1 + static_cast<int>(seed % 3);
    auto h = random_instance(seed, n, K);
    for (auto strategy : {DecodeStrategy::span_only, DecodeStrategy::joint_position_span}) {
      for (bool flat : {false, true}) {
        for (auto mode : {ThresholdMode::dynamic, ThresholdMode::learned_global}) {
          DecodeConfig dcfg;
          dcfg.strategy = strategy;
          dcfg.flat = flat;
          dcfg.max_span_len = 5;
          dcfg.threshold_mode = mode;
          auto res = score_all(h.hidden, h.types, h.ps, "head.", h.cfg, dcfg);
          auto fast = triples(decode(res.candidates, res.thresholds, dcfg));
          auto slow = triples(brute_force_reference(h.hidden, h.types, h.ps, "head.", h.cfg, dcfg));
          REQUIRE(fast == slow);
          ++checked;
        }
      }
    }
  }
  REQUIRE(checked == 40 * 2 * 2 * 2);
}

TEST_CASE("strategies agree when position scores all clear their thresholds") {
  TypeThresholds thr{{-100.0}, {-100.0}, {0.0}};
  std::vector<ScoredMention> cands = {cand(0, 1, 0, 0.5, 0.0, 0.0), cand(1, 2, 0, -0.5, 0.0, 0.0),
                                      cand(2, 3, 0, 0.8, 0.0, 0.0)};
  DecodeConfig so;
  so.strategy = DecodeStrategy::span_only;
  DecodeConfig jo;
  jo.strategy = DecodeStrategy::joint_position_span;
  REQUIRE(triples(decode(cands, thr, so)) == triples(decode(cands, thr, jo)));
}

TEST_CASE("window merging dedupes by best score and shifts coordinates") {
  Window w1;
  w1.doc_id = "d";
  w1.offset = 0;
  Window w2;
  w2.doc_id = "d";
  w2.offset = 4;

  auto m1 = cand(5, 6, 0, 0.8);
  auto m2 = cand(1, 2, 0, 0.9);
  auto merged = merge_window_predictions({w1, w2}, {{m1}, {m2}}, false);
  REQUIRE(merged.size() == 1);
  REQUIRE(merged[0].start == 5);
  REQUIRE(merged[0].end == 6);
  REQUIRE(merged[0].span_score == 0.9);

  auto singleton = merge_window_predictions({w1}, {{m1}}, false);
  REQUIRE(singleton.size() == 1);
  REQUIRE(singleton[0].start == 5);

  auto disjoint = merge_window_predictions({w1, w2}, {{cand(0, 1, 0, 0.7)}, {cand(4, 4, 1, 0.6)}},
                                           false);
  REQUIRE(triples(disjoint) == std::set<Triple>{{0, 1, 0}, {8, 8, 1}});
}
