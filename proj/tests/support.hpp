#pragma once

// Shared helpers for the test binaries: random-input gradient sweeps over
// every differentiable op, and small corpus builders.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "binder/binder.hpp"

namespace binder::testsupport {

inline Tensor rand_leaf(Shape shape, CounterRng& rng, double lo, double hi) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
  return Tensor::from_values(std::move(shape), std::move(v), true);
}

// Values bounded away from zero, random sign. Keeps relu kinks and division
// poles out of the finite-difference neighborhood.
inline Tensor rand_leaf_signed_away(Shape shape, CounterRng& rng, double lo, double hi) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) {
    const double mag = lo + (hi - lo) * rng.uniform();
    x = rng.uniform() < 0.5 ? -mag : mag;
  }
  return Tensor::from_values(std::move(shape), std::move(v), true);
}

// Reduces an arbitrary tensor to a scalar with fixed random weights so that
// grad_check sees a non-degenerate gradient (sum(softmax(x)) would be
// constant, for example).
inline Tensor scalarize(const Tensor& t, const Tensor& weights) {
  return sum(mul(t, weights));
}

inline Tensor fixed_weights(const Shape& shape, CounterRng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = -1.0 + 2.0 * rng.uniform();
  return Tensor::from_values(shape, std::move(v), false);
}

struct OpCheckResult {
  std::string op;
  double max_err = 0.0;
};

// Runs grad_check on every registered differentiable op with random inputs
// for the given seed. Returns per-op max relative errors.
inline std::vector<OpCheckResult> op_gradcheck_sweep(std::uint64_t seed) {
  std::vector<OpCheckResult> results;
  CounterRng rng(seed, 17);

  auto record = [&](const std::string& name, const std::function<Tensor()>& fn,
                    const std::vector<Tensor>& leaves) {
    results.push_back({name, grad_check<double>(fn, leaves)});
  };

  {
    Tensor a = rand_leaf({2, 3}, rng, -2.0, 2.0);
    Tensor b = rand_leaf({2, 3}, rng, -2.0, 2.0);
    record("add", [=] { return sum(add(a, b)); }, {a, b});
    record("sub", [=] { return sum(sub(a, b)); }, {a, b});
    record("mul", [=] { return sum(mul(a, b)); }, {a, b});
    record("neg", [=] { return sum(neg(a)); }, {a});
    record("add_scalar", [=] { return sum(add_scalar(a, 0.7)); }, {a});
    record("mul_scalar", [=] { return sum(mul_scalar(a, -1.3)); }, {a});
    record("div_scalar", [=] { return sum(div_scalar(a, 2.0)); }, {a});
    record("gelu", [=] { return sum(gelu(a)); }, {a});
  }
  {
    Tensor a = rand_leaf({2, 3}, rng, -2.0, 2.0);
    Tensor b = rand_leaf({2, 3}, rng, 0.5, 2.5);
    record("div_elems", [=] { return sum(div_elems(a, b)); }, {a, b});
  }
  {
    Tensor a = rand_leaf({2, 3}, rng, -2.0, 1.0);
    record("exp", [=] { return sum(exp_elem(a)); }, {a});
  }
  {
    Tensor a = rand_leaf({2, 3}, rng, 0.5, 3.0);
    record("log", [=] { return sum(log_elem(a)); }, {a});
  }
  {
    Tensor a = rand_leaf_signed_away({2, 3}, rng, 0.2, 2.0);
    record("relu", [=] { return sum(relu(a)); }, {a});
  }
  {
    Tensor a = rand_leaf({2, 3}, rng, -1.5, 1.5);
    Tensor b = rand_leaf({3, 4}, rng, -1.5, 1.5);
    record("matmul", [=] { return sum(matmul(a, b)); }, {a, b});
    Tensor w = fixed_weights({3, 2}, rng);
    record("transpose", [=] { return sum(mul(transpose(a), w)); }, {a});
  }
  {
    Tensor a = rand_leaf({3}, rng, -1.0, 1.0);
    Tensor b = rand_leaf({2}, rng, -1.0, 1.0);
    Tensor w = fixed_weights({5}, rng);
    record("concat", [=] { return scalarize(concat(std::vector<Tensor>{a, b}), w); }, {a, b});
  }
  {
    Tensor a = rand_leaf({2, 2}, rng, -1.0, 1.0);
    Tensor b = rand_leaf({2, 3}, rng, -1.0, 1.0);
    Tensor w = fixed_weights({2, 5}, rng);
    record("concat_cols", [=] { return scalarize(concat_cols(std::vector<Tensor>{a, b}), w); }, {a, b});
  }
  {
    Tensor v = rand_leaf({4}, rng, -1.0, 1.0);
    Tensor u = rand_leaf({4}, rng, -1.0, 1.0);
    Tensor w = fixed_weights({2, 4}, rng);
    record("stack_rows", [=] { return scalarize(stack_rows(std::vector<Tensor>{v, u}), w); }, {v, u});
  }
  {
    Tensor a = rand_leaf({2, 5}, rng, -1.0, 1.0);
    Tensor w = fixed_weights({2, 3}, rng);
    record("slice_cols", [=] { return scalarize(slice_cols(a, 1, 3), w); }, {a});
    Tensor w2 = fixed_weights({5, 2}, rng);
    record("reshape", [=] { return scalarize(reshape(a, {5, 2}), w2); }, {a});
  }
  {
    Tensor v = rand_leaf({3}, rng, -1.0, 1.0);
    Tensor w = fixed_weights({4, 3}, rng);
    record("tile_rows", [=] { return scalarize(tile_rows(v, 4), w); }, {v});
  }
  {
    Tensor a = rand_leaf({4, 3}, rng, -1.0, 1.0);
    Tensor w = fixed_weights({3, 3}, rng);
    record("index_rows", [=] { return scalarize(index_rows(a, {2, 0, 2}), w); }, {a});
  }
  {
    Tensor table = rand_leaf({5, 3}, rng, -1.0, 1.0);
    Tensor w = fixed_weights({3, 3}, rng);
    record("embedding_lookup", [=] { return scalarize(embedding_lookup(table, {1, 4, 1}), w); },
           {table});
  }
  {
    Tensor a = rand_leaf({3, 4}, rng, -1.0, 1.0);
    Tensor wr = fixed_weights({4}, rng);
    Tensor wc = fixed_weights({3}, rng);
    record("row", [=] { return scalarize(row(a, 1), wr); }, {a});
    record("column", [=] { return scalarize(column(a, 2), wc); }, {a});
    Tensor wg = fixed_weights({2}, rng);
    record("gather_rows_cols",
           [=] { return scalarize(gather_rows_cols(a, {0, 2}, {1, 3}), wg); }, {a});
  }
  {
    Tensor v = rand_leaf({6}, rng, -1.0, 1.0);
    Tensor w = fixed_weights({4}, rng);
    record("gather", [=] { return scalarize(gather(v, {0, 3, 3, 5}), w); }, {v});
  }
  {
    Tensor a = rand_leaf({2, 3}, rng, -2.0, 2.0);
    record("sum", [=] { return sum(a); }, {a});
    record("mean", [=] { return mean(a); }, {a});
  }
  {
    Tensor u = rand_leaf({5}, rng, -1.5, 1.5);
    Tensor v = rand_leaf({5}, rng, -1.5, 1.5);
    record("dot", [=] { return dot(u, v); }, {u, v});
  }
  {
    Tensor v = rand_leaf_signed_away({4}, rng, 0.3, 1.5);
    record("l2_norm", [=] { return l2_norm(v); }, {v});
  }
  {
    Tensor a = rand_leaf_signed_away({2, 4}, rng, 0.3, 1.5);
    Tensor w = fixed_weights({2, 4}, rng);
    record("l2_normalize_rows", [=] { return scalarize(l2_normalize_rows(a), w); }, {a});
  }
  {
    Tensor u = rand_leaf_signed_away({4}, rng, 0.3, 1.5);
    Tensor v = rand_leaf_signed_away({4}, rng, 0.3, 1.5);
    record("cosine", [=] { return cosine(u, v); }, {u, v});
  }
  {
    Tensor a = rand_leaf({2, 4}, rng, -1.5, 1.5);
    Tensor g = rand_leaf({4}, rng, 0.5, 1.5);
    Tensor b = rand_leaf({4}, rng, -0.5, 0.5);
    Tensor w = fixed_weights({2, 4}, rng);
    record("layer_norm", [=] { return scalarize(layer_norm(a, g, b, 1e-5), w); }, {a, g, b});
  }
  {
    Tensor v = rand_leaf({5}, rng, -1.5, 1.5);
    Tensor w = fixed_weights({5}, rng);
    record("softmax", [=] { return scalarize(softmax(v), w); }, {v});
    record("log_sum_exp", [=] { return log_sum_exp(v); }, {v});
  }
  {
    Tensor a = rand_leaf({2, 4}, rng, -1.5, 1.5);
    Tensor w = fixed_weights({2, 4}, rng);
    record("softmax_rows", [=] { return scalarize(softmax_rows(a), w); }, {a});
    Tensor wl = fixed_weights({2}, rng);
    record("log_sum_exp_rows", [=] { return scalarize(log_sum_exp_rows(a), wl); }, {a});
  }
  {
    Tensor a = rand_leaf({2, 3}, rng, -1.5, 1.5);
    Tensor b = rand_leaf({3}, rng, -1.0, 1.0);
    record("add_bias_rows", [=] { return sum(add_bias_rows(a, b)); }, {a, b});
    Tensor t = rand_leaf({1}, rng, 0.5, 2.0);
    record("scale_by", [=] { return sum(scale_by(a, t)); }, {a, t});
  }
  {
    Tensor a = rand_leaf({3, 4}, rng, -1.5, 1.5);
    const std::uint64_t mask_seed = seed * 7 + 1;
    record("dropout",
           [=] {
             CounterRng drop(mask_seed, 5);
             return sum(dropout(a, 0.5, drop, true));
           },
           {a});
  }

  return results;
}

// Max error across all ops over n_seeds sweeps.
inline double max_op_gradcheck_error(int n_seeds, std::string* worst_op = nullptr) {
  double worst = 0.0;
  std::string worst_name;
  for (int s = 0; s < n_seeds; ++s) {
    for (const auto& r : op_gradcheck_sweep(1000 + static_cast<std::uint64_t>(s))) {
      if (r.max_err > worst) {
        worst = r.max_err;
        worst_name = r.op;
      }
    }
  }
  if (worst_op) *worst_op = worst_name;
  return worst;
}

// Two-sentence, two-type toy batch with every loss channel active, for
// end-to-end gradient checks of the full training objective.
struct ToyBatch {
  ModelConfig cfg;
  Vocabulary vocab;
  std::vector<EntityTypeDef> defs;
  std::vector<LabeledDocument> docs;
  std::vector<Window> windows;
};

inline ToyBatch make_toy_batch(std::uint64_t seed) {
  ToyBatch t;
  t.cfg.encoder.num_layers = 1;
  t.cfg.encoder.num_heads = 2;
  t.cfg.encoder.d_model = 16;
  t.cfg.encoder.ffn_dim = 32;
  t.cfg.encoder.max_positions = 16;
  t.cfg.encoder.dropout = 0.0;
  t.cfg.head.d_model = 16;
  t.cfg.head.d_proj = 8;
  t.cfg.head.width_dim = 8;
  t.cfg.head.max_positions = 16;
  t.cfg.max_span_len = 3;
  t.cfg.stride = 4;
  t.cfg.desc_mode = DescriptionMode::keyword;
  t.cfg.init_std = 0.2;

  EntityTypeDef person;
  person.type_id = 0;
  person.name = "person";
  person.keyword = "person name";
  person.guideline = "a person mentioned by name";
  EntityTypeDef place;
  place.type_id = 1;
  place.name = "place";
  place.keyword = "place location";
  place.guideline = "a location mentioned by name";
  t.defs = {person, place};

  std::vector<LabeledDocument> docs(2);
  docs[0].doc_id = "toy-0";
  docs[0].tokens = {{"ada", 0, 3}, {"visited", 4, 11}, {"york", 12, 16}, {"today", 17, 22}};
  docs[0].text = "ada visited york today";
  docs[0].mentions = {{0, 0, 0}, {2, 2, 1}};
  docs[1].doc_id = "toy-1";
  docs[1].tokens = {{"bob", 0, 3}, {"met", 4, 7}, {"ada", 8, 11}};
  docs[1].text = "bob met ada";
  docs[1].mentions = {{0, 0, 0}, {2, 2, 0}};

  std::vector<std::string> texts;
  for (const auto& d : docs) texts.push_back(d.text);
  for (const auto& def : t.defs) {
    texts.push_back(def.keyword);
    texts.push_back(def.guideline);
  }
  t.vocab = build_vocabulary(texts);
  for (const auto& d : docs) {
    auto ws = make_windows(d, t.cfg.window_len(), t.cfg.stride);
    t.windows.insert(t.windows.end(), ws.begin(), ws.end());
  }
  t.docs = std::move(docs);
  (void)seed;
  return t;
}

}  // namespace binder::testsupport
