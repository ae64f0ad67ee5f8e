#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "support.hpp"

using namespace binder;

namespace {

struct FakeModel {
  ParamStore params;
  std::vector<double> dev_scores;
  mutable std::size_t eval_calls = 0;
  mutable std::vector<std::map<std::string, std::vector<double>>> seen_at_eval;
  long throw_at_step = -1;
  mutable long calls = 0;
  bool differentiable = true;

  FakeModel() { params.add_full("w", {4}, 1.0); }

  Tensor batch_loss(const std::vector<Window>&, CounterRng&) const {
    ++calls;
    if (throw_at_step >= 0 && calls > throw_at_step) throw NumericError("loss diverged");
    if (!differentiable) return Tensor::scalar(1.0);
    return sum(params.get("w"));
  }

  double evaluate_f1(const std::vector<LabeledDocument>&, const DecodeConfig&) const {
    seen_at_eval.push_back(params.snapshot());
    const double f1 =
        eval_calls < dev_scores.size() ? dev_scores[eval_calls] : dev_scores.back();
    ++eval_calls;
    return f1;
  }
};

std::vector<Window> fake_windows(int n) {
  LabeledDocument d = [] {
    LabeledDocument x;
    x.doc_id = "f";
    x.tokens = {{"a", 0, 1}};
    return x;
  }();
  std::vector<Window> ws;
  for (int i = 0; i < n; ++i) ws.push_back({d.doc_id, 0, d.tokens, {}, 0});
  return ws;
}

std::vector<LabeledDocument> fake_dev() {
  LabeledDocument d;
  d.doc_id = "dev";
  d.tokens = {{"a", 0, 1}};
  return {d};
}

TrainConfig quick_tc(int epochs, int eval_every, int patience) {
  TrainConfig tc;
  tc.lr = 0.1;
  tc.epochs = epochs;
  tc.batch_size = 1;
  tc.eval_every_steps = eval_every;
  tc.patience = patience;
  tc.weight_decay = 0.0;
  return tc;
}

}  // namespace

TEST_CASE("the schedule decays linearly to exactly zero") {
  REQUIRE(linear_lr(0.1, 0, 10) == 0.1);
  REQUIRE(linear_lr(0.1, 9, 10) == 0.0);
  REQUIRE_THAT(linear_lr(0.1, 4, 9), Catch::Matchers::WithinAbs(0.05, 1e-15));
  REQUIRE(linear_lr(0.1, 0, 1) == 0.1);
  for (long s = 1; s < 10; ++s) REQUIRE(linear_lr(0.1, s, 10) < linear_lr(0.1, s - 1, 10));
}

TEST_CASE("warmup climbs from a fraction of peak before the decay") {
  REQUIRE_THAT(linear_lr(0.2, 0, 20, 4), Catch::Matchers::WithinAbs(0.05, 1e-15));
  REQUIRE_THAT(linear_lr(0.2, 1, 20, 4), Catch::Matchers::WithinAbs(0.10, 1e-15));
  REQUIRE(linear_lr(0.2, 3, 20, 4) == 0.2);
  REQUIRE(linear_lr(0.2, 4, 20, 4) == 0.2);
  REQUIRE(linear_lr(0.2, 19, 20, 4) == 0.0);
  REQUIRE_THROWS_AS(linear_lr(0.1, 0, 0), ConfigError);
}

TEST_CASE("parameters with no gradient move only by weight decay") {
  ParamStore ps;
  ps.add_full("w", {3}, 2.0);
  AdamW opt;
  opt.step(ps, 0.5, 0.1);
  for (double v : ps.get("w").values()) REQUIRE(v == 2.0 * (1.0 - 0.5 * 0.1));
  REQUIRE(opt.steps_taken() == 1);

  ParamStore frozen;
  frozen.add_full("w", {3}, 2.0);
  AdamW opt2;
  opt2.step(frozen, 0.5, 0.0);
  for (double v : frozen.get("w").values()) REQUIRE(v == 2.0);
}

TEST_CASE("a unit gradient moves a fresh parameter by almost the learning rate") {
  ParamStore ps;
  ps.add_zeros("w", {2});
  backward(sum(mul_scalar(ps.get("w"), 1.0)));
  AdamW opt;
  opt.step(ps, 0.1, 0.0);
  for (double v : ps.get("w").values())
    REQUIRE_THAT(v, Catch::Matchers::WithinAbs(-0.1, 1e-8));
}

TEST_CASE("repeated descent on a constant gradient keeps moving") {
  ParamStore ps;
  ps.add_zeros("w", {1});
  AdamW opt;
  double prev = 0.0;
  for (int i = 0; i < 5; ++i) {
    backward(sum(ps.get("w")));
    opt.step(ps, 0.05, 0.0);
    ps.zero_grads();
    const double now = ps.get("w").values()[0];
    REQUIRE(now < prev);
    prev = now;
  }
  REQUIRE(opt.steps_taken() == 5);
}

TEST_CASE("training stops after patience consecutive non-improvements") {
  FakeModel m;
  m.dev_scores = {0.5, 0.5, 0.5, 0.5};
  auto res = fit(m, fake_windows(3), fake_dev(), quick_tc(40, 1, 1), DecodeConfig{});
  REQUIRE(res.evals_run == 2);
  REQUIRE(res.steps_run == 2);
  REQUIRE(res.stopped_early);
  REQUIRE(res.best_f1 == 0.5);
  REQUIRE(res.best_step == 1);
}

TEST_CASE("ties do not reset the patience counter") {
  FakeModel m;
  m.dev_scores = {0.4, 0.6, 0.6, 0.6, 0.6, 0.9};
  auto res = fit(m, fake_windows(2), fake_dev(), quick_tc(40, 1, 3), DecodeConfig{});
  REQUIRE(res.evals_run == 5);
  REQUIRE(res.best_f1 == 0.6);
  REQUIRE(res.best_step == 2);
  REQUIRE(res.stopped_early);
}

TEST_CASE("the best checkpoint is restored at the end") {
  FakeModel m;
  m.dev_scores = {0.3, 0.9, 0.5, 0.2};
  auto res = fit(m, fake_windows(1), fake_dev(), quick_tc(40, 1, 2), DecodeConfig{});
  REQUIRE(res.best_f1 == 0.9);
  REQUIRE(res.best_step == 2);
  REQUIRE(m.seen_at_eval.size() == 4);
  REQUIRE(m.params.snapshot() == m.seen_at_eval[1]);
  REQUIRE(m.params.snapshot() != m.seen_at_eval[3]);
}

TEST_CASE("a non-finite loss aborts but keeps the best checkpoint") {
  FakeModel m;
  m.dev_scores = {0.8};
  m.throw_at_step = 3;
  auto res = fit(m, fake_windows(1), fake_dev(), quick_tc(40, 1, 50), DecodeConfig{});
  REQUIRE(res.aborted_non_finite);
  REQUIRE_FALSE(res.stopped_early);
  REQUIRE(res.steps_run == 3);
  REQUIRE(res.evals_run == 3);
  REQUIRE(res.best_f1 == 0.8);
  REQUIRE(m.params.snapshot() == m.seen_at_eval[0]);
}

TEST_CASE("a loss that carries no graph still counts steps") {
  FakeModel m;
  m.differentiable = false;
  m.dev_scores = {0.1};
  auto res = fit(m, fake_windows(2), fake_dev(), quick_tc(2, 2, 10), DecodeConfig{});
  REQUIRE(res.steps_run == 4);
  REQUIRE(m.params.get("w").values()[0] == 1.0);
}

TEST_CASE("evaluations land every eval_every steps and are logged") {
  FakeModel m;
  m.dev_scores = {0.1, 0.2, 0.3};
  std::ostringstream log;
  auto res = fit(m, fake_windows(4), fake_dev(), quick_tc(3, 5, 50), DecodeConfig{}, &log);
  REQUIRE(res.steps_run == 12);
  REQUIRE(res.evals_run == 2);

  std::istringstream in(log.str());
  std::string line;
  long lines = 0, with_f1 = 0, expect_step = 1;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    REQUIRE(j["step"] == expect_step++);
    REQUIRE(j.contains("loss"));
    REQUIRE_FALSE(j.contains("time"));
    if (j.contains("dev_f1")) {
      ++with_f1;
      REQUIRE(j["step"].get<long>() % 5 == 0);
    }
    ++lines;
  }
  REQUIRE(lines == 12);
  REQUIRE(with_f1 == 2);
}

TEST_CASE("degenerate splits and configs are rejected") {
  FakeModel m;
  m.dev_scores = {0.5};
  REQUIRE_THROWS_AS(fit(m, {}, fake_dev(), quick_tc(1, 1, 1), DecodeConfig{}), ConfigError);
  REQUIRE_THROWS_AS(fit(m, fake_windows(1), {}, quick_tc(1, 1, 1), DecodeConfig{}), ConfigError);
  TrainConfig bad = quick_tc(1, 1, 1);
  bad.lr = 0.0;
  REQUIRE_THROWS_AS(fit(m, fake_windows(1), fake_dev(), bad, DecodeConfig{}), ConfigError);
  TrainConfig bad2 = quick_tc(1, 1, 1);
  bad2.warmup_steps = -1;
  REQUIRE_THROWS_AS(fit(m, fake_windows(1), fake_dev(), bad2, DecodeConfig{}), ConfigError);
}

TEST_CASE("two runs from the same seeds are bitwise identical") {
  auto run = [](std::string* log_out) {
    auto t = testsupport::make_toy_batch(3);
    auto model = BinderModel::create(t.cfg, t.vocab, t.defs, 3);
    TrainConfig tc = quick_tc(3, 2, 50);
    tc.lr = 1e-3;
    tc.batch_size = 2;
    tc.seed = 9;
    DecodeConfig dcfg;
    dcfg.max_span_len = t.cfg.max_span_len;
    std::ostringstream log;
    fit(model, t.windows, t.docs, tc, dcfg, &log);
    *log_out = log.str();
    return model.params.snapshot();
  };
  std::string log1, log2;
  auto p1 = run(&log1);
  auto p2 = run(&log2);
  REQUIRE(p1 == p2);
  REQUIRE(log1 == log2);
  REQUIRE_FALSE(log1.empty());
}

TEST_CASE("a small model memorizes a handful of sentences") {
  auto synth = synth_generate(7, 6);

  ModelConfig cfg;
  cfg.encoder.num_layers = 1;
  cfg.encoder.num_heads = 2;
  cfg.encoder.d_model = 32;
  cfg.encoder.ffn_dim = 64;
  cfg.encoder.max_positions = 18;
  cfg.encoder.dropout = 0.0;
  cfg.head.d_model = 32;
  cfg.head.d_proj = 16;
  cfg.head.width_dim = 8;
  cfg.head.max_positions = 18;
  cfg.max_span_len = 4;
  cfg.stride = 4;
  cfg.desc_mode = DescriptionMode::keyword;
  cfg.init_std = 0.2;

  std::vector<std::string> texts;
  for (const auto& d : synth.corpus.docs) texts.push_back(d.text);
  for (const auto& def : synth.defs) texts.push_back(def.keyword);
  Vocabulary vocab = build_vocabulary(texts);
  auto model = BinderModel::create(cfg, vocab, synth.defs, 5);

  std::vector<Window> windows;
  for (const auto& d : synth.corpus.docs)
    for (auto& w : make_windows(d, cfg.window_len(), cfg.stride)) windows.push_back(std::move(w));

  TrainConfig tc;
  tc.lr = 5e-3;
  tc.epochs = 60;
  tc.batch_size = 6;
  tc.eval_every_steps = 10;
  tc.patience = 20;
  tc.seed = 11;
  DecodeConfig dcfg;
  dcfg.max_span_len = cfg.max_span_len;

  auto res = fit(model, windows, synth.corpus.docs, tc, dcfg);
  REQUIRE(res.best_f1 == 1.0);
  REQUIRE(model.evaluate_f1(synth.corpus.docs, dcfg) == 1.0);
}

TEST_CASE("tuned thresholds reproduce their reported dev score") {
  auto t = testsupport::make_toy_batch(2);
  auto model = BinderModel::create(t.cfg, t.vocab, t.defs, 2);
  DecodeConfig dcfg;
  dcfg.max_span_len = t.cfg.max_span_len;
  auto tuned = tune_global_thresholds_on_dev(model, t.docs, dcfg, 7);

  DecodeConfig at = dcfg;
  at.threshold_mode = ThresholdMode::dev_tuned;
  at.dev_thresholds = tuned.thresholds;
  REQUIRE(model.evaluate_f1(t.docs, at) == tuned.dev_f1);
  REQUIRE(tuned.thresholds.span.size() == model.n_types());
  REQUIRE(tuned.thresholds.start.size() == model.n_types());
}

TEST_CASE("an explicit single-value grid pins every span threshold") {
  auto t = testsupport::make_toy_batch(2);
  auto model = BinderModel::create(t.cfg, t.vocab, t.defs, 2);
  DecodeConfig dcfg;
  dcfg.max_span_len = t.cfg.max_span_len;
  std::vector<double> grid = {0.25};
  auto tuned = tune_global_thresholds_on_dev(model, t.docs, dcfg, 1, &grid);
  for (double v : tuned.thresholds.span) REQUIRE(v == 0.25);

  REQUIRE_THROWS_AS(tune_global_thresholds_on_dev(model, {}, dcfg), ConfigError);
  REQUIRE_THROWS_AS(tune_global_thresholds_on_dev(model, t.docs, dcfg, 0), ConfigError);
}

TEST_CASE("tuning is deterministic and the prune-everything corner scores zero") {
  auto t = testsupport::make_toy_batch(4);
  auto model = BinderModel::create(t.cfg, t.vocab, t.defs, 4);
  DecodeConfig dcfg;
  dcfg.max_span_len = t.cfg.max_span_len;
  auto tuned1 = tune_global_thresholds_on_dev(model, t.docs, dcfg, 9);
  auto tuned2 = tune_global_thresholds_on_dev(model, t.docs, dcfg, 9);
  REQUIRE(tuned1.thresholds.span == tuned2.thresholds.span);
  REQUIRE(tuned1.dev_f1 == tuned2.dev_f1);

  std::vector<double> prune_all = {1e9};
  auto pinned = tune_global_thresholds_on_dev(model, t.docs, dcfg, 1, &prune_all);
  REQUIRE(pinned.dev_f1 == 0.0);
  REQUIRE(tuned1.dev_f1 >= pinned.dev_f1);
}

TEST_CASE("the similarity dump covers every position, span and threshold") {
  auto t = testsupport::make_toy_batch(6);
  auto model = BinderModel::create(t.cfg, t.vocab, t.defs, 6);
  std::ostringstream out;
  dump_similarity_distributions(model, t.docs, out);

  std::istringstream in(out.str());
  std::string line;
  REQUIRE(std::getline(in, line));
  REQUIRE(line == "doc_id,type,span_kind,channel,score");

  const std::size_t K = model.n_types();
  std::size_t expected = 0;
  std::map<std::string, std::vector<double>> thr_rows;
  for (const auto& d : t.docs) {
    for (const auto& w : make_windows(d, t.cfg.window_len(), t.cfg.stride)) {
      const std::size_t n = w.tokens.size();
      const std::size_t spans = enumerate_spans(static_cast<int>(n), t.cfg.max_span_len).size();
      expected += K * (2 * n + 3) + spans * K;
    }
  }

  std::size_t rows = 0, entity_rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    std::vector<std::string> cols;
    std::istringstream ls(line);
    std::string c;
    while (std::getline(ls, c, ',')) cols.push_back(c);
    REQUIRE(cols.size() == 5);
    REQUIRE((cols[2] == "entity" || cols[2] == "non_entity" || cols[2] == "threshold"));
    REQUIRE((cols[3] == "start" || cols[3] == "end" || cols[3] == "span"));
    if (cols[2] == "entity") ++entity_rows;
    if (cols[2] == "threshold") thr_rows[cols[0] + "|" + cols[1] + "|" + cols[3]].push_back(
        std::stod(cols[4]));
  }
  REQUIRE(rows == expected);
  REQUIRE(entity_rows > 0);

  const auto& doc0 = t.docs[0];
  auto ws = make_windows(doc0, t.cfg.window_len(), t.cfg.stride);
  NoGradGuard ng;
  TypeEmbeddings te = model.type_embeddings(false, nullptr);
  DecodeConfig dcfg;
  dcfg.max_span_len = t.cfg.max_span_len;
  dcfg.threshold_mode = ThresholdMode::dynamic;
  Tensor hidden = model.encode_window(ws[0], false, nullptr);
  ScoreResult sr = score_all(hidden, te, model.params, "head.", t.cfg.head, dcfg);
  for (std::size_t k = 0; k < K; ++k) {
    const std::string& tname = model.type_defs[k].name;
    const auto& starts = thr_rows[doc0.doc_id + "|" + tname + "|start"];
    const auto& spans = thr_rows[doc0.doc_id + "|" + tname + "|span"];
    REQUIRE_FALSE(starts.empty());
    REQUIRE(starts[0] == sr.thresholds.start[k]);
    REQUIRE(spans[0] == sr.thresholds.span[k]);
  }
}
