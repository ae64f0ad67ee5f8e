#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <binder/binder.hpp>

#include <CLI11.hpp>
#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace binder;

namespace {

// Input problems (bad keys, missing files, malformed values) exit 2;
// failures during an otherwise valid run exit 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  bool flat = false;
  std::string strategy = "span_only";
  int grid_points = 21;
};

const std::vector<std::string>& valid_keys() {
  static const std::vector<std::string> keys = {
      "enc_layers",  "enc_heads",       "d_model",        "ffn_dim",
      "max_positions", "dropout",       "d_proj",         "width_dim",
      "shared_linears", "desc_mode",    "alpha",          "gamma",
      "lambda",      "beta",            "threshold_mode", "max_span_len",
      "stride",      "tau_init",        "init_std",       "prototypes_at_eval",
      "lr",          "epochs",          "batch_size",     "eval_every_steps",
      "patience",    "weight_decay",    "warmup_steps",   "seed",
      "flat",        "strategy",        "grid_points"};
  return keys;
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const int r = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw UsageError("config key '" + key + "': expected integer, got '" + v + "'");
  }
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw UsageError("config key '" + key + "': expected number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw UsageError("config key '" + key + "': expected true/false, got '" + v + "'");
}

void set_key(RunConfig& rc, const std::string& key, const std::string& v) {
  auto& m = rc.model;
  auto& t = rc.train;
  if (key == "enc_layers") m.encoder.num_layers = parse_int(key, v);
  else if (key == "enc_heads") m.encoder.num_heads = parse_int(key, v);
  else if (key == "d_model") { m.encoder.d_model = parse_int(key, v); m.head.d_model = m.encoder.d_model; }
  else if (key == "ffn_dim") m.encoder.ffn_dim = parse_int(key, v);
  else if (key == "max_positions") { m.encoder.max_positions = parse_int(key, v); m.head.max_positions = m.encoder.max_positions; }
  else if (key == "dropout") m.encoder.dropout = parse_double(key, v);
  else if (key == "d_proj") m.head.d_proj = parse_int(key, v);
  else if (key == "width_dim") m.head.width_dim = parse_int(key, v);
  else if (key == "shared_linears") m.head.shared_linears = parse_bool(key, v);
  else if (key == "desc_mode") {
    try { m.desc_mode = parse_description_mode(v); }
    catch (const ConfigError& e) { throw UsageError(e.what()); }
  }
  else if (key == "alpha") m.weights.alpha = parse_double(key, v);
  else if (key == "gamma") m.weights.gamma = parse_double(key, v);
  else if (key == "lambda") m.weights.lambda = parse_double(key, v);
  else if (key == "beta") m.weights.beta = parse_double(key, v);
  else if (key == "threshold_mode") {
    if (v == "dynamic") m.threshold_mode = ThresholdMode::dynamic;
    else if (v == "learned_global") m.threshold_mode = ThresholdMode::learned_global;
    else if (v == "dev_tuned") m.threshold_mode = ThresholdMode::dev_tuned;
    else throw UsageError("config key 'threshold_mode': expected dynamic|learned_global|dev_tuned, got '" + v + "'");
  }
  else if (key == "max_span_len") m.max_span_len = parse_int(key, v);
  else if (key == "stride") m.stride = parse_int(key, v);
  else if (key == "tau_init") m.tau_init = parse_double(key, v);
  else if (key == "init_std") m.init_std = parse_double(key, v);
  else if (key == "prototypes_at_eval") m.prototypes_at_eval = parse_int(key, v);
  else if (key == "lr") t.lr = parse_double(key, v);
  else if (key == "epochs") t.epochs = parse_int(key, v);
  else if (key == "batch_size") t.batch_size = parse_int(key, v);
  else if (key == "eval_every_steps") t.eval_every_steps = parse_int(key, v);
  else if (key == "patience") t.patience = parse_int(key, v);
  else if (key == "weight_decay") t.weight_decay = parse_double(key, v);
  else if (key == "warmup_steps") t.warmup_steps = parse_int(key, v);
  else if (key == "seed") t.seed = static_cast<std::uint64_t>(parse_int(key, v));
  else if (key == "flat") rc.flat = parse_bool(key, v);
  else if (key == "strategy") {
    if (v != "joint" && v != "span_only")
      throw UsageError("config key 'strategy': expected joint|span_only, got '" + v + "'");
    rc.strategy = v;
  }
  else if (key == "grid_points") rc.grid_points = parse_int(key, v);
  else {
    std::string msg = "unknown config key '" + key + "'; valid keys:";
    for (const auto& k : valid_keys()) msg += " " + k;
    throw UsageError(msg);
  }
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

void apply_config_file(RunConfig& rc, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string body = buf.str();
  const auto first = body.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && body[first] == '{') {
    json j;
    try { j = json::parse(body); }
    catch (const json::exception& e) { throw UsageError(std::string("config file: ") + e.what()); }
    for (const auto& [k, v] : j.items())
      set_key(rc, k, v.is_string() ? v.get<std::string>() : v.dump());
    return;
  }
  std::istringstream lines(body);
  std::string line;
  int ln = 0;
  while (std::getline(lines, line)) {
    ++ln;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError(path + ":" + std::to_string(ln) + ": expected key=value");
    set_key(rc, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

RunConfig resolve_config(const std::string& config_path, const std::vector<std::string>& sets) {
  RunConfig rc;
  if (!config_path.empty()) apply_config_file(rc, config_path);
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
    set_key(rc, trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
  return rc;
}

json resolved_config(const RunConfig& rc) {
  json j = rc.model.to_json();
  j["lr"] = rc.train.lr;
  j["epochs"] = rc.train.epochs;
  j["batch_size"] = rc.train.batch_size;
  j["eval_every_steps"] = rc.train.eval_every_steps;
  j["patience"] = rc.train.patience;
  j["weight_decay"] = rc.train.weight_decay;
  j["warmup_steps"] = rc.train.warmup_steps;
  j["seed"] = rc.train.seed;
  j["flat"] = rc.flat;
  j["strategy"] = rc.strategy;
  j["grid_points"] = rc.grid_points;
  return j;
}

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw UsageError(what + " path is required");
  if (!fs::exists(path)) throw UsageError(what + " not found: " + path);
}

CorpusFormat parse_format(const std::string& f) {
  if (f == "json") return CorpusFormat::json_spans;
  if (f == "bio") return CorpusFormat::bio_conll;
  throw UsageError("--format expects json|bio, got '" + f + "'");
}

TypeCatalog catalog_of(const std::vector<EntityTypeDef>& defs) {
  TypeCatalog cat;
  for (const auto& d : defs) cat.add(d.name);
  return cat;
}

// Markers first, then every distinct token of the corpus and the type
// descriptions in lexicographic order (same convention as build_vocabulary).
Vocabulary vocabulary_for(const Corpus& c, const std::vector<EntityTypeDef>& defs) {
  std::set<std::string> words;
  for (const auto& d : c.docs)
    for (const auto& t : d.tokens) words.insert(t.text);
  for (const auto& def : defs) {
    for (const auto& t : basic_tokenize(def.name)) words.insert(t.text);
    for (const auto& t : basic_tokenize(def.keyword)) words.insert(t.text);
    for (const auto& t : basic_tokenize(def.guideline)) words.insert(t.text);
    for (const auto& p : def.prototypes)
      for (const auto& w : p.tokens) words.insert(w);
  }
  Vocabulary v;
  v.add(Vocabulary::kMentionStartToken);
  v.add(Vocabulary::kMentionEndToken);
  for (const auto& w : words)
    if (!v.contains(w)) v.add(w);
  return v;
}

DecodeConfig decode_config(const RunConfig& rc, const TypeThresholds* tuned) {
  DecodeConfig d;
  d.max_span_len = rc.model.max_span_len;
  d.flat = rc.flat;
  d.strategy = rc.strategy == "span_only" ? DecodeStrategy::span_only
                                          : DecodeStrategy::joint_position_span;
  d.threshold_mode = rc.model.threshold_mode;
  if (tuned && rc.model.threshold_mode == ThresholdMode::dev_tuned) d.dev_thresholds = *tuned;
  return d;
}

void ensure_out_dir(const std::string& out) {
  if (out.empty()) throw UsageError("--out directory is required");
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw UsageError("cannot create output directory " + out + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// Model directory layout: model.json, vocab.txt, types.json, checkpoint.bin.
// ---------------------------------------------------------------------------

struct LoadedModel {
  RunConfig rc;
  bool is_baseline = false;
  std::optional<BinderModel> model;
  std::optional<SpanClassifierBaseline> baseline;
  TypeThresholds tuned;
  bool has_tuned = false;

  const std::vector<EntityTypeDef>& defs() const {
    return is_baseline ? baseline->type_defs : model->type_defs;
  }
  const ParamStore& params() const { return is_baseline ? baseline->params : model->params; }
};

void save_model_dir(const std::string& dir, const RunConfig& rc, const ParamStore& ps,
                    const Vocabulary& vocab, const std::vector<EntityTypeDef>& defs,
                    bool is_baseline, const TypeThresholds* tuned) {
  json j;
  j["kind"] = is_baseline ? "baseline" : "binder";
  j["config"] = resolved_config(rc);
  if (tuned) {
    j["tuned_thresholds"] = {{"start", tuned->start}, {"end", tuned->end}, {"span", tuned->span}};
  }
  std::ofstream mj(fs::path(dir) / "model.json");
  if (!mj) throw FormatError("cannot write model.json in " + dir);
  mj << j.dump(2) << '\n';
  vocab.save((fs::path(dir) / "vocab.txt").string());
  save_type_defs(defs, (fs::path(dir) / "types.json").string());
  ps.save((fs::path(dir) / "checkpoint.bin").string());
}

LoadedModel load_model_dir(const std::string& dir) {
  for (const char* f : {"model.json", "vocab.txt", "types.json", "checkpoint.bin"})
    if (!fs::exists(fs::path(dir) / f))
      throw UsageError("model directory " + dir + " is missing " + f);
  std::ifstream mj(fs::path(dir) / "model.json");
  json j;
  try { mj >> j; }
  catch (const json::exception& e) { throw UsageError(std::string("model.json: ") + e.what()); }

  LoadedModel lm;
  lm.is_baseline = j.at("kind").get<std::string>() == "baseline";
  const json& cj = j.at("config");
  for (const auto& [k, v] : cj.items())
    set_key(lm.rc, k, v.is_string() ? v.get<std::string>() : v.dump());
  if (j.contains("tuned_thresholds")) {
    lm.has_tuned = true;
    lm.tuned.start = j["tuned_thresholds"].at("start").get<std::vector<double>>();
    lm.tuned.end = j["tuned_thresholds"].at("end").get<std::vector<double>>();
    lm.tuned.span = j["tuned_thresholds"].at("span").get<std::vector<double>>();
  }
  Vocabulary vocab = Vocabulary::load((fs::path(dir) / "vocab.txt").string());
  auto defs = load_type_defs((fs::path(dir) / "types.json").string());
  if (lm.is_baseline)
    lm.baseline.emplace(SpanClassifierBaseline::create(lm.rc.model, vocab, defs, 0));
  else
    lm.model.emplace(BinderModel::create(lm.rc.model, vocab, defs, 0));
  ParamStore& ps = lm.is_baseline ? lm.baseline->params : lm.model->params;
  ps.load((fs::path(dir) / "checkpoint.bin").string());
  return lm;
}

std::vector<DocMentions> predict_parallel(const LoadedModel& lm,
                                          const std::vector<LabeledDocument>& docs,
                                          const DecodeConfig& dcfg, int workers) {
  std::vector<DocMentions> out(docs.size());
  std::optional<TypeEmbeddings> te;
  if (!lm.is_baseline) {
    NoGradGuard ng;
    te = lm.model->type_embeddings(false, nullptr);
  }
  auto one = [&](std::size_t i) {
    DocMentions dm;
    dm.doc_id = docs[i].doc_id;
    dm.gold = docs[i].mentions;
    const auto preds = lm.is_baseline ? lm.baseline->predict_doc(docs[i], dcfg)
                                      : lm.model->predict_doc(docs[i], dcfg, &*te);
    for (const auto& m : preds) dm.pred.push_back({m.start, m.end, m.type_id});
    out[i] = std::move(dm);
  };
  if (workers <= 1) {
    for (std::size_t i = 0; i < docs.size(); ++i) one(i);
    return out;
  }
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < docs.size();) one(i);
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < workers; ++t) pool.emplace_back(work);
  for (auto& th : pool) th.join();
  return out;
}

std::vector<std::string> type_names(const std::vector<EntityTypeDef>& defs) {
  std::vector<std::string> names;
  names.reserve(defs.size());
  for (const auto& d : defs) names.push_back(d.name);
  return names;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// Subcommands.
// ---------------------------------------------------------------------------

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out;
};

int cmd_train(const CommonArgs& common, const std::string& train_path,
              const std::string& dev_path, const std::string& types_path,
              const std::string& format, bool baseline, bool show_config,
              std::chrono::steady_clock::time_point t0) {
  RunConfig rc = resolve_config(common.config_path, common.sets);
  if (show_config) {
    std::cout << resolved_config(rc).dump(2) << '\n';
    return 0;
  }
  try { rc.model.validate(); rc.train.validate(); }
  catch (const ConfigError& e) { throw UsageError(e.what()); }
  require_file(train_path, "--train corpus");
  require_file(dev_path, "--dev corpus");
  require_file(types_path, "--types file");
  ensure_out_dir(common.out);
  const CorpusFormat fmt = parse_format(format);

  auto defs = load_type_defs(types_path);
  Corpus train_c = load_corpus(train_path, fmt, catalog_of(defs), false);
  Corpus dev_c = load_corpus(dev_path, fmt, catalog_of(defs), false);
  Vocabulary vocab = vocabulary_for(train_c, defs);

  std::vector<Window> windows;
  for (const auto& d : train_c.docs)
    for (auto& w : make_windows(d, rc.model.window_len(), rc.model.stride))
      windows.push_back(std::move(w));
  if (windows.empty()) throw UsageError("training corpus produced no windows");

  DecodeConfig dcfg = decode_config(rc, nullptr);
  if (dcfg.threshold_mode == ThresholdMode::dev_tuned) {
    // Thresholds are tuned only after training; dev evals decode at zero,
    // the same bootstrap the tuner itself uses for its scoring pass.
    dcfg.dev_thresholds.start.assign(defs.size(), 0.0);
    dcfg.dev_thresholds.end.assign(defs.size(), 0.0);
    dcfg.dev_thresholds.span.assign(defs.size(), 0.0);
  }
  std::ofstream log(fs::path(common.out) / "train_log.jsonl");
  if (!log) throw FormatError("cannot write train_log.jsonl");

  FitResult fr;
  std::optional<TunedThresholds> tuned;
  if (baseline) {
    auto model = SpanClassifierBaseline::create(rc.model, vocab, defs, rc.train.seed);
    fr = fit(model, windows, dev_c.docs, rc.train, dcfg, &log);
    save_model_dir(common.out, rc, model.params, vocab, defs, true, nullptr);
  } else {
    auto model = BinderModel::create(rc.model, vocab, defs, rc.train.seed);
    fr = fit(model, windows, dev_c.docs, rc.train, dcfg, &log);
    if (rc.model.threshold_mode == ThresholdMode::dev_tuned)
      tuned = tune_global_thresholds_on_dev(model, dev_c.docs, dcfg, rc.grid_points);
    save_model_dir(common.out, rc, model.params, vocab, defs, false,
                   tuned ? &tuned->thresholds : nullptr);
  }
  if (fr.aborted_non_finite)
    std::cerr << "warning: training stopped on a non-finite loss; best checkpoint kept\n";

  RunManifest man;
  man.command = "train";
  man.config = resolved_config(rc);
  man.config["baseline"] = baseline;
  if (!common.config_path.empty()) man.add_input(common.config_path);
  man.add_input(train_path);
  man.add_input(dev_path);
  man.add_input(types_path);
  man.outputs = {"model.json", "vocab.txt", "types.json", "checkpoint.bin", "train_log.jsonl"};
  man.seed = rc.train.seed;
  man.wall_seconds = seconds_since(t0);
  man.save((fs::path(common.out) / "manifest.json").string());

  json summary = {{"best_dev_f1", fr.best_f1},
                  {"best_step", fr.best_step},
                  {"steps", fr.steps_run},
                  {"evals", fr.evals_run},
                  {"stopped_early", fr.stopped_early},
                  {"aborted_non_finite", fr.aborted_non_finite}};
  if (tuned) summary["tuned_dev_f1"] = tuned->dev_f1;
  std::cout << summary.dump(2) << '\n';
  return 0;
}

DecodeConfig decode_for_loaded(const LoadedModel& lm, int flat_override,
                               const std::string& strategy_override) {
  RunConfig rc = lm.rc;
  if (flat_override >= 0) rc.flat = flat_override != 0;
  if (!strategy_override.empty()) {
    if (strategy_override != "joint" && strategy_override != "span_only")
      throw UsageError("--strategy expects joint|span_only");
    rc.strategy = strategy_override;
  }
  return decode_config(rc, lm.has_tuned ? &lm.tuned : nullptr);
}

int cmd_eval(const CommonArgs& common, const std::string& model_dir,
             const std::string& corpus_path, const std::string& format, int flat_override,
             const std::string& strategy_override, int workers,
             std::chrono::steady_clock::time_point t0) {
  require_file(model_dir, "--model directory");
  require_file(corpus_path, "--corpus");
  ensure_out_dir(common.out);
  LoadedModel lm = load_model_dir(model_dir);
  Corpus c = load_corpus(corpus_path, parse_format(format), catalog_of(lm.defs()), false);
  DecodeConfig dcfg = decode_for_loaded(lm, flat_override, strategy_override);

  auto docs = predict_parallel(lm, c.docs, dcfg, workers);
  EvalReport rep = compute_report(docs, type_names(lm.defs()));
  std::cout << rep.to_table();

  std::ofstream rj(fs::path(common.out) / "report.json");
  if (!rj) throw FormatError("cannot write report.json");
  rj << rep.to_json().dump(2) << '\n';

  RunManifest man;
  man.command = "eval";
  man.config = resolved_config(lm.rc);
  man.config["workers"] = workers;
  man.config["eval_flat"] = dcfg.flat;
  man.config["eval_strategy"] =
      dcfg.strategy == DecodeStrategy::span_only ? "span_only" : "joint";
  man.add_input(corpus_path);
  man.add_input((fs::path(model_dir) / "checkpoint.bin").string());
  man.outputs = {"report.json"};
  man.seed = lm.rc.train.seed;
  man.wall_seconds = seconds_since(t0);
  man.save((fs::path(common.out) / "manifest.json").string());
  return 0;
}

int cmd_predict(const CommonArgs& common, const std::string& model_dir,
                const std::string& corpus_path, const std::string& raw_text,
                const std::string& format, int flat_override,
                const std::string& strategy_override, int workers,
                std::chrono::steady_clock::time_point t0) {
  require_file(model_dir, "--model directory");
  if (corpus_path.empty() == raw_text.empty())
    throw UsageError("predict needs exactly one of --corpus or --text");
  ensure_out_dir(common.out);
  LoadedModel lm = load_model_dir(model_dir);

  Corpus c;
  if (!corpus_path.empty()) {
    require_file(corpus_path, "--corpus");
    c = load_corpus(corpus_path, parse_format(format), catalog_of(lm.defs()), false);
  } else {
    c.types = catalog_of(lm.defs());
    LabeledDocument d;
    d.doc_id = "raw-0";
    d.text = raw_text;
    d.tokens = basic_tokenize(raw_text);
    c.docs.push_back(std::move(d));
  }

  DecodeConfig dcfg = decode_for_loaded(lm, flat_override, strategy_override);

  std::optional<TypeEmbeddings> te;
  if (!lm.is_baseline) {
    NoGradGuard ng;
    te = lm.model->type_embeddings(false, nullptr);
  }
  const auto names = type_names(lm.defs());

  std::vector<std::vector<ScoredMention>> preds(c.docs.size());
  auto one = [&](std::size_t i) {
    preds[i] = lm.is_baseline ? lm.baseline->predict_doc(c.docs[i], dcfg)
                              : lm.model->predict_doc(c.docs[i], dcfg, &*te);
  };
  if (workers <= 1) {
    for (std::size_t i = 0; i < c.docs.size(); ++i) one(i);
  } else {
    std::atomic<std::size_t> next{0};
    auto work = [&] {
      for (std::size_t i; (i = next.fetch_add(1)) < c.docs.size();) one(i);
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }

  std::ofstream pj(fs::path(common.out) / "predictions.jsonl");
  if (!pj) throw FormatError("cannot write predictions.jsonl");
  Corpus pred_corpus;
  pred_corpus.types = catalog_of(lm.defs());
  for (std::size_t i = 0; i < c.docs.size(); ++i) {
    const auto& d = c.docs[i];
    json j;
    j["doc_id"] = d.doc_id;
    auto ms = json::array();
    for (const auto& m : preds[i]) {
      ms.push_back({{"start_token", m.start},
                    {"end_token", m.end},
                    {"start_char", d.tokens[static_cast<std::size_t>(m.start)].start_char},
                    {"end_char", d.tokens[static_cast<std::size_t>(m.end)].end_char},
                    {"type", names[static_cast<std::size_t>(m.type_id)]},
                    {"score", m.span_score}});
    }
    j["mentions"] = std::move(ms);
    pj << j.dump() << '\n';

    LabeledDocument pd = d;
    pd.mentions.clear();
    for (const auto& m : preds[i]) pd.mentions.push_back({m.start, m.end, m.type_id});
    pred_corpus.docs.push_back(std::move(pd));
  }
  save_corpus(pred_corpus, (fs::path(common.out) / "predicted_corpus.jsonl").string());

  RunManifest man;
  man.command = "predict";
  man.config = resolved_config(lm.rc);
  man.config["workers"] = workers;
  if (!corpus_path.empty()) man.add_input(corpus_path);
  man.add_input((fs::path(model_dir) / "checkpoint.bin").string());
  man.outputs = {"predictions.jsonl", "predicted_corpus.jsonl"};
  man.seed = lm.rc.train.seed;
  man.wall_seconds = seconds_since(t0);
  man.save((fs::path(common.out) / "manifest.json").string());
  return 0;
}

int cmd_bench(const CommonArgs& common, const std::string& model_dir,
              const std::string& corpus_path, const std::string& format, int repeats,
              std::chrono::steady_clock::time_point t0) {
  require_file(model_dir, "--model directory");
  require_file(corpus_path, "--corpus");
  if (repeats < 1) throw UsageError("--repeats must be >= 1");
  ensure_out_dir(common.out);
  LoadedModel lm = load_model_dir(model_dir);
  if (lm.is_baseline) throw UsageError("bench requires a bi-encoder model directory");
  Corpus c = load_corpus(corpus_path, parse_format(format), catalog_of(lm.defs()), false);
  if (c.docs.empty()) throw UsageError("bench corpus is empty");
  DecodeConfig dcfg = decode_for_loaded(lm, -1, "");
  const BinderModel& model = *lm.model;

  std::size_t total_tokens = 0;
  std::size_t total_candidates = 0, max_window_candidates = 0, total_windows = 0;
  const std::size_t K = model.n_types();
  for (const auto& d : c.docs) {
    total_tokens += d.tokens.size();
    for (const auto& w : make_windows(d, model.cfg.window_len(), model.cfg.stride)) {
      const std::size_t cands =
          w.tokens.empty()
              ? 0
              : enumerate_spans(static_cast<int>(w.tokens.size()), model.cfg.max_span_len).size() *
                    K;
      total_candidates += cands;
      max_window_candidates = std::max(max_window_candidates, cands);
      ++total_windows;
    }
  }

  // Uncached: type descriptions re-encoded for every document.
  const auto tu0 = std::chrono::steady_clock::now();
  for (int r = 0; r < repeats; ++r)
    for (const auto& d : c.docs) model.predict_doc(d, dcfg, nullptr);
  const double uncached_s = seconds_since(tu0);

  // Cached: type embeddings computed once and reused.
  const auto tc0 = std::chrono::steady_clock::now();
  TypeEmbeddings te;
  {
    NoGradGuard ng;
    te = model.type_embeddings(false, nullptr);
  }
  for (int r = 0; r < repeats; ++r)
    for (const auto& d : c.docs) model.predict_doc(d, dcfg, &te);
  const double cached_s = seconds_since(tc0);

  const double n_tok = static_cast<double>(total_tokens * static_cast<std::size_t>(repeats));
  json rep = {{"docs", c.docs.size()},
              {"repeats", repeats},
              {"tokens", total_tokens},
              {"uncached", {{"seconds", uncached_s}, {"tokens_per_sec", n_tok / uncached_s}}},
              {"cached", {{"seconds", cached_s}, {"tokens_per_sec", n_tok / cached_s}}},
              {"speedup_cached_over_uncached", uncached_s / cached_s},
              {"candidates",
               {{"total", total_candidates},
                {"windows", total_windows},
                {"mean_per_doc", static_cast<double>(total_candidates) /
                                     static_cast<double>(c.docs.size())},
                {"max_per_window", max_window_candidates}}}};
  std::cout << rep.dump(2) << '\n';
  std::ofstream bj(fs::path(common.out) / "bench.json");
  if (!bj) throw FormatError("cannot write bench.json");
  bj << rep.dump(2) << '\n';

  RunManifest man;
  man.command = "bench";
  man.config = resolved_config(lm.rc);
  man.config["repeats"] = repeats;
  man.add_input(corpus_path);
  man.add_input((fs::path(model_dir) / "checkpoint.bin").string());
  man.outputs = {"bench.json"};
  man.seed = lm.rc.train.seed;
  man.wall_seconds = seconds_since(t0);
  man.save((fs::path(common.out) / "manifest.json").string());
  return 0;
}

int cmd_synth(const CommonArgs& common, std::uint64_t seed, int docs, int dev, int test,
              std::chrono::steady_clock::time_point t0) {
  if (docs < 1) throw UsageError("--docs must be >= 1");
  if (dev < 0 || test < 0 || dev + test >= docs)
    throw UsageError("--dev and --test must be nonnegative and leave at least one training doc");
  ensure_out_dir(common.out);
  SynthResult sr = synth_generate(seed, static_cast<std::size_t>(docs));

  const std::size_t n_train = static_cast<std::size_t>(docs - dev - test);
  auto slice = [&](std::size_t a, std::size_t b) {
    Corpus part;
    part.types = sr.corpus.types;
    part.docs.assign(sr.corpus.docs.begin() + static_cast<std::ptrdiff_t>(a),
                     sr.corpus.docs.begin() + static_cast<std::ptrdiff_t>(b));
    return part;
  };
  save_corpus(slice(0, n_train), (fs::path(common.out) / "train.jsonl").string());
  RunManifest man;
  man.command = "synth";
  man.outputs = {"train.jsonl", "types.json"};
  if (dev > 0) {
    save_corpus(slice(n_train, n_train + static_cast<std::size_t>(dev)),
                (fs::path(common.out) / "dev.jsonl").string());
    man.outputs.push_back("dev.jsonl");
  }
  if (test > 0) {
    save_corpus(slice(n_train + static_cast<std::size_t>(dev), sr.corpus.docs.size()),
                (fs::path(common.out) / "test.jsonl").string());
    man.outputs.push_back("test.jsonl");
  }
  save_type_defs(sr.defs, (fs::path(common.out) / "types.json").string());

  man.config = {{"docs", docs}, {"dev", dev}, {"test", test}, {"nested_docs", sr.nested_docs}};
  man.seed = seed;
  man.wall_seconds = seconds_since(t0);
  man.save((fs::path(common.out) / "manifest.json").string());
  std::cout << json({{"docs", docs}, {"nested_docs", sr.nested_docs}}).dump() << '\n';
  return 0;
}

int cmd_degrade(const CommonArgs& common, const std::string& in_path,
                const std::string& types_path, const std::string& format, double keep_recall,
                double precision_noise, std::uint64_t seed,
                std::chrono::steady_clock::time_point t0) {
  require_file(in_path, "--in corpus");
  require_file(types_path, "--types file");
  if (keep_recall < 0.0 || keep_recall > 1.0)
    throw UsageError("--keep-recall must be in [0, 1]");
  if (precision_noise < 0.0) throw UsageError("--precision-noise must be >= 0");
  ensure_out_dir(common.out);
  auto defs = load_type_defs(types_path);
  Corpus c = load_corpus(in_path, parse_format(format), catalog_of(defs), false);
  DegradeResult dr = degrade_distant(c, keep_recall, precision_noise, seed);
  save_corpus(dr.corpus, (fs::path(common.out) / "degraded.jsonl").string());

  RunManifest man;
  man.command = "degrade";
  man.config = {{"keep_recall", keep_recall}, {"precision_noise", precision_noise}};
  man.config["degrade"] = dr.manifest;
  man.add_input(in_path);
  man.add_input(types_path);
  man.outputs = {"degraded.jsonl"};
  man.seed = seed;
  man.wall_seconds = seconds_since(t0);
  man.save((fs::path(common.out) / "manifest.json").string());
  std::cout << json({{"dropped", dr.manifest.at("dropped").size()},
                     {"injected", dr.manifest.at("injected").size()}})
                   .dump()
            << '\n';
  return 0;
}

int cmd_simdump(const CommonArgs& common, const std::string& model_dir,
                const std::string& corpus_path, const std::string& format,
                std::chrono::steady_clock::time_point t0) {
  require_file(model_dir, "--model directory");
  require_file(corpus_path, "--corpus");
  ensure_out_dir(common.out);
  LoadedModel lm = load_model_dir(model_dir);
  if (lm.is_baseline) throw UsageError("simdump requires a bi-encoder model directory");
  Corpus c = load_corpus(corpus_path, parse_format(format), catalog_of(lm.defs()), false);

  std::ofstream csv(fs::path(common.out) / "similarities.csv");
  if (!csv) throw FormatError("cannot write similarities.csv");
  dump_similarity_distributions(*lm.model, c.docs, csv);

  RunManifest man;
  man.command = "simdump";
  man.config = resolved_config(lm.rc);
  man.add_input(corpus_path);
  man.add_input((fs::path(model_dir) / "checkpoint.bin").string());
  man.outputs = {"similarities.csv"};
  man.seed = lm.rc.train.seed;
  man.wall_seconds = seconds_since(t0);
  man.save((fs::path(common.out) / "manifest.json").string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  const auto t0 = std::chrono::steady_clock::now();
  CLI::App app{"binder: span-based entity recognition with a bi-encoder similarity head"};
  app.set_version_flag("--version", std::string("binder ") + kVersion);
  app.require_subcommand(1);

  CommonArgs common;
  std::string train_path, dev_path, types_path, model_dir, corpus_path, raw_text, in_path;
  std::string format = "json", strategy_override;
  int workers = 1, repeats = 1, flat_override = -1;
  int docs = 100, dev_n = 0, test_n = 0;
  bool baseline = false, show_config = false;
  std::uint64_t seed = 42;
  double keep_recall = 1.0, precision_noise = 0.0;

  auto add_common = [&](CLI::App* sub, bool with_config) {
    sub->add_option("--out", common.out, "output directory");
    if (with_config) {
      sub->add_option("--config", common.config_path, "config file (key=value lines or JSON)");
      sub->add_option("--set", common.sets, "override a config key, key=value");
    }
  };

  auto* tr = app.add_subcommand("train", "train a model and write a checkpoint directory");
  add_common(tr, true);
  tr->add_option("--train", train_path, "training corpus");
  tr->add_option("--dev", dev_path, "development corpus for early stopping");
  tr->add_option("--types", types_path, "entity type definition file");
  tr->add_option("--format", format, "corpus format: json|bio");
  tr->add_flag("--baseline", baseline, "train the span-classifier baseline instead");
  tr->add_flag("--show-config", show_config, "print the resolved config and exit");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a labeled corpus");
  add_common(ev, false);
  ev->add_option("--model", model_dir, "model directory from train");
  ev->add_option("--corpus", corpus_path, "labeled corpus");
  ev->add_option("--format", format, "corpus format: json|bio");
  ev->add_option("--flat", flat_override, "0|1: overlap removal on predictions");
  ev->add_option("--strategy", strategy_override, "joint|span_only");
  ev->add_option("--workers", workers, "parallel documents");

  auto* pr = app.add_subcommand("predict", "predict mentions for a corpus or raw text");
  add_common(pr, false);
  pr->add_option("--model", model_dir, "model directory from train");
  pr->add_option("--corpus", corpus_path, "input corpus");
  pr->add_option("--text", raw_text, "raw text instead of a corpus");
  pr->add_option("--format", format, "corpus format: json|bio");
  pr->add_option("--flat", flat_override, "0|1: overlap removal on predictions");
  pr->add_option("--strategy", strategy_override, "joint|span_only");
  pr->add_option("--workers", workers, "parallel documents");

  auto* be = app.add_subcommand("bench", "measure scoring/decoding throughput");
  add_common(be, false);
  be->add_option("--model", model_dir, "model directory from train");
  be->add_option("--corpus", corpus_path, "corpus to score");
  be->add_option("--format", format, "corpus format: json|bio");
  be->add_option("--repeats", repeats, "passes over the corpus");

  auto* sy = app.add_subcommand("synth", "generate the synthetic corpus");
  add_common(sy, false);
  sy->add_option("--seed", seed, "generator seed");
  sy->add_option("--docs", docs, "total documents");
  sy->add_option("--dev", dev_n, "documents held out for dev");
  sy->add_option("--test", test_n, "documents held out for test");

  auto* dg = app.add_subcommand("degrade", "simulate distant supervision on a corpus");
  add_common(dg, false);
  dg->add_option("--in", in_path, "input corpus");
  dg->add_option("--types", types_path, "entity type definition file");
  dg->add_option("--format", format, "corpus format: json|bio");
  dg->add_option("--keep-recall", keep_recall, "fraction of gold mentions kept per type");
  dg->add_option("--precision-noise", precision_noise, "spurious mention rate per type");
  dg->add_option("--seed", seed, "degradation seed");

  auto* sd = app.add_subcommand("simdump", "dump similarity distributions to CSV");
  add_common(sd, false);
  sd->add_option("--model", model_dir, "model directory from train");
  sd->add_option("--corpus", corpus_path, "labeled corpus");
  sd->add_option("--format", format, "corpus format: json|bio");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (tr->parsed())
      return cmd_train(common, train_path, dev_path, types_path, format, baseline, show_config,
                       t0);
    if (ev->parsed())
      return cmd_eval(common, model_dir, corpus_path, format, flat_override, strategy_override,
                      workers, t0);
    if (pr->parsed())
      return cmd_predict(common, model_dir, corpus_path, raw_text, format, flat_override,
                         strategy_override, workers, t0);
    if (be->parsed()) return cmd_bench(common, model_dir, corpus_path, format, repeats, t0);
    if (sy->parsed()) return cmd_synth(common, seed, docs, dev_n, test_n, t0);
    if (dg->parsed())
      return cmd_degrade(common, in_path, types_path, format, keep_recall, precision_noise,
                         seed, t0);
    if (sd->parsed()) return cmd_simdump(common, model_dir, corpus_path, format, t0);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
