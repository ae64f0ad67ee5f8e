#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "binder/rng.hpp"

namespace binder {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

namespace detail {
inline thread_local bool autograd_enabled = true;
}

// Disables tape construction in scope; used for inference/scoring paths.
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::autograd_enabled) { detail::autograd_enabled = false; }
  ~NoGradGuard() { detail::autograd_enabled = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename S>
struct TensorNode {
  Shape shape;
  std::vector<S> values;
  std::vector<S> grad;  // allocated on demand, same size as values
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;
  std::vector<std::shared_ptr<TensorNode<S>>> parents;
  std::function<void(TensorNode<S>&)> backprop;

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), S(0));
  }
};

// Dense tensor with reverse-mode autodiff. Values are immutable once an op
// has produced them; only leaf parameters may be mutated (by the optimizer,
// between graphs). S is double by default; float gives the 32-bit mode.
template <typename S>
class TensorT {
 public:
  TensorT() = default;
  explicit TensorT(std::shared_ptr<TensorNode<S>> n) : n_(std::move(n)) {}

  static TensorT from_values(Shape shape, std::vector<S> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size())
      throw ShapeError("tensor init: shape " + shape_str(shape) + " does not match " +
                       std::to_string(values.size()) + " values");
    auto n = std::make_shared<TensorNode<S>>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    std::vector<S> v(shape_numel(shape), S(0));
    return from_values(std::move(shape), std::move(v), requires_grad);
  }

  static TensorT full(Shape shape, S value, bool requires_grad = false) {
    std::vector<S> v(shape_numel(shape), value);
    return from_values(std::move(shape), std::move(v), requires_grad);
  }

  static TensorT scalar(S value, bool requires_grad = false) {
    return from_values({1}, {value}, requires_grad);
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  std::size_t numel() const { return n_->values.size(); }
  std::size_t dim(std::size_t i) const { return n_->shape.at(i); }
  std::size_t rank() const { return n_->shape.size(); }

  const std::vector<S>& values() const { return n_->values; }

  // Leaf parameters only; op outputs are immutable.
  std::vector<S>& mutable_values() {
    if (!n_->is_leaf) throw GraphError("mutable_values: tensor is an op output, not a leaf");
    return n_->values;
  }

  S value() const {
    if (numel() != 1) throw ShapeError("value(): tensor has shape " + shape_str(n_->shape));
    return n_->values[0];
  }

  S at(std::size_t i) const { return n_->values.at(i); }
  S at(std::size_t r, std::size_t c) const {
    if (rank() != 2) throw ShapeError("at(r,c): tensor has shape " + shape_str(n_->shape));
    return n_->values.at(r * n_->shape[1] + c);
  }

  bool requires_grad() const { return n_->requires_grad; }
  bool has_grad() const { return n_->grad.size() == n_->values.size(); }
  const std::vector<S>& grad() const {
    if (!has_grad()) throw GraphError("grad(): no gradient present; call backward first");
    return n_->grad;
  }
  void clear_grad() { n_->grad.clear(); }

  std::shared_ptr<TensorNode<S>> node() const { return n_; }

 private:
  std::shared_ptr<TensorNode<S>> n_;
};

using Tensor = TensorT<double>;

namespace detail {

template <typename S>
void check_finite(const char* op, const std::vector<S>& values) {
  for (S v : values) {
    if (!std::isfinite(static_cast<double>(v)))
      throw NumericError(std::string("op '") + op + "' produced a non-finite value");
  }
}

template <typename S>
TensorT<S> make_op(const char* op, Shape shape, std::vector<S> values,
                   std::vector<TensorT<S>> inputs,
                   std::function<void(TensorNode<S>&)> backprop) {
  check_finite(op, values);
  auto n = std::make_shared<TensorNode<S>>();
  n->shape = std::move(shape);
  n->values = std::move(values);
  bool needs = false;
  if (autograd_enabled) {
    for (const auto& in : inputs)
      if (in.requires_grad()) needs = true;
  }
  if (needs) {
    n->requires_grad = true;
    n->is_leaf = false;
    n->parents.reserve(inputs.size());
    for (const auto& in : inputs) n->parents.push_back(in.node());
    n->backprop = std::move(backprop);
  }
  return TensorT<S>(std::move(n));
}

template <typename S>
void add_into(TensorNode<S>& dst, const std::vector<S>& delta) {
  if (!dst.requires_grad) return;
  dst.ensure_grad();
  for (std::size_t i = 0; i < delta.size(); ++i) dst.grad[i] += delta[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and arithmetic ops (no broadcasting; shapes must match exactly).
// ---------------------------------------------------------------------------

template <typename S>
void require_same_shape(const char* op, const TensorT<S>& a, const TensorT<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  require_same_shape("add", a, b);
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op<S>("add", a.shape(), std::move(out), {a, b}, [an, bn](TensorNode<S>& y) {
    detail::add_into(*an, y.grad);
    detail::add_into(*bn, y.grad);
  });
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  require_same_shape("sub", a, b);
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op<S>("sub", a.shape(), std::move(out), {a, b}, [an, bn](TensorNode<S>& y) {
    detail::add_into(*an, y.grad);
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < y.grad.size(); ++i) bn->grad[i] -= y.grad[i];
    }
  });
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  require_same_shape("mul", a, b);
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op<S>("mul", a.shape(), std::move(out), {a, b}, [an, bn](TensorNode<S>& y) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < y.grad.size(); ++i) an->grad[i] += y.grad[i] * bn->values[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < y.grad.size(); ++i) bn->grad[i] += y.grad[i] * an->values[i];
    }
  });
}

template <typename S>
TensorT<S> div_elems(const TensorT<S>& a, const TensorT<S>& b) {
  require_same_shape("div_elems", a, b);
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] / b.values()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op<S>("div_elems", a.shape(), std::move(out), {a, b},
                            [an, bn](TensorNode<S>& y) {
                              if (an->requires_grad) {
                                an->ensure_grad();
                                for (std::size_t i = 0; i < y.grad.size(); ++i)
                                  an->grad[i] += y.grad[i] / bn->values[i];
                              }
                              if (bn->requires_grad) {
                                bn->ensure_grad();
                                for (std::size_t i = 0; i < y.grad.size(); ++i)
                                  bn->grad[i] -= y.grad[i] * y.values[i] / bn->values[i];
                              }
                            });
}

template <typename S>
TensorT<S> mul_scalar(const TensorT<S>& a, double c) {
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * S(c);
  auto an = a.node();
  return detail::make_op<S>("mul_scalar", a.shape(), std::move(out), {a},
                            [an, c](TensorNode<S>& y) {
                              if (!an->requires_grad) return;
                              an->ensure_grad();
                              for (std::size_t i = 0; i < y.grad.size(); ++i)
                                an->grad[i] += y.grad[i] * S(c);
                            });
}

template <typename S>
TensorT<S> div_scalar(const TensorT<S>& a, double c) {
  if (c == 0.0) throw NumericError("div_scalar: division by zero");
  return mul_scalar(a, 1.0 / c);
}

template <typename S>
TensorT<S> add_scalar(const TensorT<S>& a, double c) {
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + S(c);
  auto an = a.node();
  return detail::make_op<S>("add_scalar", a.shape(), std::move(out), {a},
                            [an](TensorNode<S>& y) { detail::add_into(*an, y.grad); });
}

template <typename S>
TensorT<S> neg(const TensorT<S>& a) {
  return mul_scalar(a, -1.0);
}

// Elementwise multiply by a single learnable scalar (shape (1)).
template <typename S>
TensorT<S> scale_by(const TensorT<S>& a, const TensorT<S>& t) {
  if (t.numel() != 1)
    throw ShapeError("scale_by: scale tensor must have shape (1), got " + shape_str(t.shape()));
  const S tv = t.values()[0];
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * tv;
  auto an = a.node(), tn = t.node();
  return detail::make_op<S>("scale_by", a.shape(), std::move(out), {a, t},
                            [an, tn, tv](TensorNode<S>& y) {
                              if (an->requires_grad) {
                                an->ensure_grad();
                                for (std::size_t i = 0; i < y.grad.size(); ++i)
                                  an->grad[i] += y.grad[i] * tv;
                              }
                              if (tn->requires_grad) {
                                tn->ensure_grad();
                                S acc = 0;
                                for (std::size_t i = 0; i < y.grad.size(); ++i)
                                  acc += y.grad[i] * an->values[i];
                                tn->grad[0] += acc;
                              }
                            });
}

template <typename S>
TensorT<S> exp_elem(const TensorT<S>& a) {
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.values()[i]);
  auto an = a.node();
  return detail::make_op<S>("exp", a.shape(), std::move(out), {a}, [an](TensorNode<S>& y) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < y.grad.size(); ++i) an->grad[i] += y.grad[i] * y.values[i];
  });
}

template <typename S>
TensorT<S> log_elem(const TensorT<S>& a) {
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.values()[i]);
  auto an = a.node();
  return detail::make_op<S>("log", a.shape(), std::move(out), {a}, [an](TensorNode<S>& y) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < y.grad.size(); ++i) an->grad[i] += y.grad[i] / an->values[i];
  });
}

template <typename S>
TensorT<S> relu(const TensorT<S>& a) {
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] > S(0) ? a.values()[i] : S(0);
  auto an = a.node();
  return detail::make_op<S>("relu", a.shape(), std::move(out), {a}, [an](TensorNode<S>& y) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < y.grad.size(); ++i)
      if (an->values[i] > S(0)) an->grad[i] += y.grad[i];
  });
}

// Exact GELU: x * Phi(x) with Phi the standard normal CDF.
template <typename S>
TensorT<S> gelu(const TensorT<S>& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double x = static_cast<double>(a.values()[i]);
    out[i] = S(x * 0.5 * (1.0 + std::erf(x * inv_sqrt2)));
  }
  auto an = a.node();
  return detail::make_op<S>("gelu", a.shape(), std::move(out), {a}, [an](TensorNode<S>& y) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < y.grad.size(); ++i) {
      double x = static_cast<double>(an->values[i]);
      double phi = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
      double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
      an->grad[i] += y.grad[i] * S(phi + x * pdf);
    }
  });
}

// Inverted dropout; train-mode only, identity in eval mode. The mask comes
// from a counter-based stream so a given (seed, counter) always reproduces it.
template <typename S>
TensorT<S> dropout(const TensorT<S>& a, double p, CounterRng& rng, bool train) {
  if (p < 0.0 || p >= 1.0) throw NumericError("dropout: p must be in [0,1)");
  if (!train || p == 0.0) return a;
  auto mask = std::make_shared<std::vector<S>>(a.numel());
  const S keep_scale = S(1.0 / (1.0 - p));
  std::vector<S> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng.uniform() >= p ? keep_scale : S(0);
    out[i] = a.values()[i] * (*mask)[i];
  }
  auto an = a.node();
  return detail::make_op<S>("dropout", a.shape(), std::move(out), {a},
                            [an, mask](TensorNode<S>& y) {
                              if (!an->requires_grad) return;
                              an->ensure_grad();
                              for (std::size_t i = 0; i < y.grad.size(); ++i)
                                an->grad[i] += y.grad[i] * (*mask)[i];
                            });
}

// ---------------------------------------------------------------------------
// Linear algebra.
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<S> out(m * n, S(0));
  const S* av = a.values().data();
  const S* bv = b.values().data();
  for (std::size_t i = 0; i < m; ++i) {
    S* orow = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const S aip = av[i * k + p];
      const S* brow = bv + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  auto an = a.node(), bn = b.node();
  return detail::make_op<S>(
      "matmul", {m, n}, std::move(out), {a, b}, [an, bn, m, k, n](TensorNode<S>& y) {
        if (an->requires_grad) {
          an->ensure_grad();  // dA += dY * B^T
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              const S g = y.grad[i * n + j];
              const S* brow = bn->values.data() + j;
              for (std::size_t p = 0; p < k; ++p) an->grad[i * k + p] += g * brow[p * n];
            }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();  // dB += A^T * dY
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const S aip = an->values[i * k + p];
              const S* grow = y.grad.data() + i * n;
              for (std::size_t j = 0; j < n; ++j) bn->grad[p * n + j] += aip * grow[j];
            }
        }
      });
}

template <typename S>
TensorT<S> transpose(const TensorT<S>& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<S> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.values()[i * n + j];
  auto an = a.node();
  return detail::make_op<S>("transpose", {n, m}, std::move(out), {a},
                            [an, m, n](TensorNode<S>& y) {
                              if (!an->requires_grad) return;
                              an->ensure_grad();
                              for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < n; ++j)
                                  an->grad[i * n + j] += y.grad[j * m + i];
                            });
}

template <typename S>
TensorT<S> reshape(const TensorT<S>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  std::vector<S> out = a.values();
  auto an = a.node();
  return detail::make_op<S>("reshape", std::move(shape), std::move(out), {a},
                            [an](TensorNode<S>& y) { detail::add_into(*an, y.grad); });
}

// Adds a length-n bias vector to every row of an (m,n) matrix. This is the
// explicit replacement for bias broadcasting.
template <typename S>
TensorT<S> add_bias_rows(const TensorT<S>& a, const TensorT<S>& bias) {
  if (a.rank() != 2 || bias.rank() != 1 || a.dim(1) != bias.dim(0))
    throw ShapeError("add_bias_rows: shapes " + shape_str(a.shape()) + " and " +
                     shape_str(bias.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<S> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.values()[i * n + j] + bias.values()[j];
  auto an = a.node(), bn = bias.node();
  return detail::make_op<S>("add_bias_rows", a.shape(), std::move(out), {a, bias},
                            [an, bn, m, n](TensorNode<S>& y) {
                              detail::add_into(*an, y.grad);
                              if (bn->requires_grad) {
                                bn->ensure_grad();
                                for (std::size_t i = 0; i < m; ++i)
                                  for (std::size_t j = 0; j < n; ++j)
                                    bn->grad[j] += y.grad[i * n + j];
                              }
                            });
}

// Repeats a length-n vector as m rows. Explicit tile; there is no broadcasting.
template <typename S>
TensorT<S> tile_rows(const TensorT<S>& v, std::size_t m) {
  if (v.rank() != 1) throw ShapeError("tile_rows: expected rank 1, got " + shape_str(v.shape()));
  const std::size_t n = v.dim(0);
  std::vector<S> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = v.values()[j];
  auto vn = v.node();
  return detail::make_op<S>("tile_rows", {m, n}, std::move(out), {v},
                            [vn, m, n](TensorNode<S>& y) {
                              if (!vn->requires_grad) return;
                              vn->ensure_grad();
                              for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < n; ++j)
                                  vn->grad[j] += y.grad[i * n + j];
                            });
}

// ---------------------------------------------------------------------------
// Indexing / assembly.
// ---------------------------------------------------------------------------

// Row gather; duplicate indices accumulate gradient additively. Serves as the
// embedding lookup.
template <typename S>
TensorT<S> index_rows(const TensorT<S>& a, const std::vector<int>& idx) {
  if (a.rank() != 2) throw ShapeError("index_rows: expected rank 2, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<S> out(idx.size() * n);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= m)
      throw ShapeError("index_rows: index " + std::to_string(idx[r]) + " out of range for " +
                       shape_str(a.shape()));
    std::copy_n(a.values().data() + std::size_t(idx[r]) * n, n, out.data() + r * n);
  }
  auto an = a.node();
  auto ix = std::make_shared<std::vector<int>>(idx);
  return detail::make_op<S>("index_rows", {idx.size(), n}, std::move(out), {a},
                            [an, ix, n](TensorNode<S>& y) {
                              if (!an->requires_grad) return;
                              an->ensure_grad();
                              for (std::size_t r = 0; r < ix->size(); ++r)
                                for (std::size_t j = 0; j < n; ++j)
                                  an->grad[std::size_t((*ix)[r]) * n + j] += y.grad[r * n + j];
                            });
}

template <typename S>
TensorT<S> embedding_lookup(const TensorT<S>& table, const std::vector<int>& ids) {
  return index_rows(table, ids);
}

template <typename S>
TensorT<S> row(const TensorT<S>& a, std::size_t i) {
  if (a.rank() != 2 || i >= a.dim(0))
    throw ShapeError("row: index " + std::to_string(i) + " out of range for " +
                     shape_str(a.shape()));
  const std::size_t n = a.dim(1);
  std::vector<S> out(a.values().begin() + i * n, a.values().begin() + (i + 1) * n);
  auto an = a.node();
  return detail::make_op<S>("row", {n}, std::move(out), {a}, [an, i, n](TensorNode<S>& y) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += y.grad[j];
  });
}

template <typename S>
TensorT<S> column(const TensorT<S>& a, std::size_t j) {
  if (a.rank() != 2 || j >= a.dim(1))
    throw ShapeError("column: index " + std::to_string(j) + " out of range for " +
                     shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<S> out(m);
  for (std::size_t i = 0; i < m; ++i) out[i] = a.values()[i * n + j];
  auto an = a.node();
  return detail::make_op<S>("column", {m}, std::move(out), {a}, [an, j, m, n](TensorNode<S>& y) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) an->grad[i * n + j] += y.grad[i];
  });
}

// 1-D gather; duplicates accumulate.
template <typename S>
TensorT<S> gather(const TensorT<S>& v, const std::vector<int>& idx) {
  if (v.rank() != 1) throw ShapeError("gather: expected rank 1, got " + shape_str(v.shape()));
  std::vector<S> out(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= v.dim(0))
      throw ShapeError("gather: index " + std::to_string(idx[r]) + " out of range for " +
                       shape_str(v.shape()));
    out[r] = v.values()[std::size_t(idx[r])];
  }
  auto vn = v.node();
  auto ix = std::make_shared<std::vector<int>>(idx);
  return detail::make_op<S>("gather", {idx.size()}, std::move(out), {v},
                            [vn, ix](TensorNode<S>& y) {
                              if (!vn->requires_grad) return;
                              vn->ensure_grad();
                              for (std::size_t r = 0; r < ix->size(); ++r)
                                vn->grad[std::size_t((*ix)[r])] += y.grad[r];
                            });
}

// Element gather from a matrix at (rows[t], cols[t]).
template <typename S>
TensorT<S> gather_rows_cols(const TensorT<S>& a, const std::vector<int>& rows,
                            const std::vector<int>& cols) {
  if (a.rank() != 2) throw ShapeError("gather_rows_cols: expected rank 2");
  if (rows.size() != cols.size()) throw ShapeError("gather_rows_cols: index lists differ");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<S> out(rows.size());
  for (std::size_t t = 0; t < rows.size(); ++t) {
    if (rows[t] < 0 || std::size_t(rows[t]) >= m || cols[t] < 0 || std::size_t(cols[t]) >= n)
      throw ShapeError("gather_rows_cols: index out of range for " + shape_str(a.shape()));
    out[t] = a.values()[std::size_t(rows[t]) * n + std::size_t(cols[t])];
  }
  auto an = a.node();
  auto rs = std::make_shared<std::vector<int>>(rows);
  auto cs = std::make_shared<std::vector<int>>(cols);
  return detail::make_op<S>("gather_rows_cols", {rows.size()}, std::move(out), {a},
                            [an, rs, cs, n](TensorNode<S>& y) {
                              if (!an->requires_grad) return;
                              an->ensure_grad();
                              for (std::size_t t = 0; t < rs->size(); ++t)
                                an->grad[std::size_t((*rs)[t]) * n + std::size_t((*cs)[t])] +=
                                    y.grad[t];
                            });
}

template <typename S>
TensorT<S> concat(const std::vector<TensorT<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 1) throw ShapeError("concat: expected rank 1, got " + shape_str(p.shape()));
    total += p.numel();
  }
  std::vector<S> out;
  out.reserve(total);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  std::vector<std::shared_ptr<TensorNode<S>>> nodes;
  nodes.reserve(parts.size());
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make_op<S>("concat", {total}, std::move(out), parts,
                            [nodes](TensorNode<S>& y) {
                              std::size_t off = 0;
                              for (const auto& pn : nodes) {
                                if (pn->requires_grad) {
                                  pn->ensure_grad();
                                  for (std::size_t i = 0; i < pn->values.size(); ++i)
                                    pn->grad[i] += y.grad[off + i];
                                }
                                off += pn->values.size();
                              }
                            });
}

template <typename S>
TensorT<S> stack_rows(const std::vector<TensorT<S>>& rows_in) {
  if (rows_in.empty()) throw ShapeError("stack_rows: no inputs");
  const std::size_t n = rows_in[0].numel();
  for (const auto& r : rows_in)
    if (r.rank() != 1 || r.numel() != n)
      throw ShapeError("stack_rows: row shape mismatch " + shape_str(r.shape()));
  std::vector<S> out;
  out.reserve(rows_in.size() * n);
  for (const auto& r : rows_in) out.insert(out.end(), r.values().begin(), r.values().end());
  std::vector<std::shared_ptr<TensorNode<S>>> nodes;
  for (const auto& r : rows_in) nodes.push_back(r.node());
  return detail::make_op<S>("stack_rows", {rows_in.size(), n}, std::move(out), rows_in,
                            [nodes, n](TensorNode<S>& y) {
                              for (std::size_t r = 0; r < nodes.size(); ++r) {
                                auto& pn = nodes[r];
                                if (!pn->requires_grad) continue;
                                pn->ensure_grad();
                                for (std::size_t j = 0; j < n; ++j)
                                  pn->grad[j] += y.grad[r * n + j];
                              }
                            });
}

template <typename S>
TensorT<S> slice_cols(const TensorT<S>& a, std::size_t start, std::size_t width) {
  if (a.rank() != 2 || start + width > a.dim(1))
    throw ShapeError("slice_cols: [" + std::to_string(start) + "," +
                     std::to_string(start + width) + ") out of range for " +
                     shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<S> out(m * width);
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(a.values().data() + i * n + start, width, out.data() + i * width);
  auto an = a.node();
  return detail::make_op<S>("slice_cols", {m, width}, std::move(out), {a},
                            [an, start, width, m, n](TensorNode<S>& y) {
                              if (!an->requires_grad) return;
                              an->ensure_grad();
                              for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < width; ++j)
                                  an->grad[i * n + start + j] += y.grad[i * width + j];
                            });
}

template <typename S>
TensorT<S> concat_cols(const std::vector<TensorT<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t m = parts[0].dim(0);
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != m)
      throw ShapeError("concat_cols: row-count mismatch at " + shape_str(p.shape()));
    total += p.dim(1);
  }
  std::vector<S> out(m * total);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(p.values().data() + i * w, w, out.data() + i * total + off);
    off += w;
  }
  std::vector<std::shared_ptr<TensorNode<S>>> nodes;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    widths.push_back(p.dim(1));
  }
  return detail::make_op<S>("concat_cols", {m, total}, std::move(out), parts,
                            [nodes, widths, m, total](TensorNode<S>& y) {
                              std::size_t off = 0;
                              for (std::size_t t = 0; t < nodes.size(); ++t) {
                                auto& pn = nodes[t];
                                const std::size_t w = widths[t];
                                if (pn->requires_grad) {
                                  pn->ensure_grad();
                                  for (std::size_t i = 0; i < m; ++i)
                                    for (std::size_t j = 0; j < w; ++j)
                                      pn->grad[i * w + j] += y.grad[i * total + off + j];
                                }
                                off += w;
                              }
                            });
}

// ---------------------------------------------------------------------------
// Reductions and normalizations.
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> sum(const TensorT<S>& a) {
  S acc = 0;
  for (S v : a.values()) acc += v;
  auto an = a.node();
  return detail::make_op<S>("sum", {1}, {acc}, {a}, [an](TensorNode<S>& y) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += y.grad[0];
  });
}

template <typename S>
TensorT<S> mean(const TensorT<S>& a) {
  return div_scalar(sum(a), static_cast<double>(a.numel()));
}

template <typename S>
TensorT<S> dot(const TensorT<S>& a, const TensorT<S>& b) {
  require_same_shape("dot", a, b);
  S acc = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += a.values()[i] * b.values()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_op<S>("dot", {1}, {acc}, {a, b}, [an, bn](TensorNode<S>& y) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < an->grad.size(); ++i)
        an->grad[i] += y.grad[0] * bn->values[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < bn->grad.size(); ++i)
        bn->grad[i] += y.grad[0] * an->values[i];
    }
  });
}

template <typename S>
TensorT<S> l2_norm(const TensorT<S>& a) {
  S acc = 0;
  for (S v : a.values()) acc += v * v;
  const S norm = std::sqrt(acc);
  auto an = a.node();
  return detail::make_op<S>("l2_norm", {1}, {norm}, {a}, [an, norm](TensorNode<S>& y) {
    if (!an->requires_grad || norm == S(0)) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < an->grad.size(); ++i)
      an->grad[i] += y.grad[0] * an->values[i] / norm;
  });
}

// Scales each row to unit L2 norm; eps is added to the norm so zero rows
// stay finite.
template <typename S>
TensorT<S> l2_normalize_rows(const TensorT<S>& a, double eps = 1e-12) {
  if (a.rank() != 2)
    throw ShapeError("l2_normalize_rows: expected rank 2, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  auto norms = std::make_shared<std::vector<S>>(m);
  std::vector<S> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    S acc = 0;
    for (std::size_t j = 0; j < n; ++j) acc += a.values()[i * n + j] * a.values()[i * n + j];
    (*norms)[i] = std::sqrt(acc);
    const S d = (*norms)[i] + S(eps);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.values()[i * n + j] / d;
  }
  auto an = a.node();
  return detail::make_op<S>(
      "l2_normalize_rows", a.shape(), std::move(out), {a},
      [an, norms, m, n, eps](TensorNode<S>& y) {
        if (!an->requires_grad) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
          const S nr = (*norms)[i];
          const S d = nr + S(eps);
          S dy_dot_x = 0;
          for (std::size_t j = 0; j < n; ++j) dy_dot_x += y.grad[i * n + j] * an->values[i * n + j];
          for (std::size_t j = 0; j < n; ++j) {
            S g = y.grad[i * n + j] / d;
            if (nr > S(0)) g -= dy_dot_x * an->values[i * n + j] / (d * d * nr);
            an->grad[i * n + j] += g;
          }
        }
      });
}

// Cosine similarity with eps-guarded norms; never NaN for finite inputs.
template <typename S>
TensorT<S> cosine(const TensorT<S>& a, const TensorT<S>& b, double eps = 1e-12) {
  require_same_shape("cosine", a, b);
  auto na = add_scalar(l2_norm(a), eps);
  auto nb = add_scalar(l2_norm(b), eps);
  return div_elems(dot(a, b), mul(na, nb));
}

// Row-wise layer normalization with affine gain/bias. eps defaults small so
// the pre-affine output has mean 0 and variance 1 to ~1e-12.
template <typename S>
TensorT<S> layer_norm(const TensorT<S>& a, const TensorT<S>& gain, const TensorT<S>& bias,
                      double eps = 1e-12) {
  if (a.rank() != 2 || gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != a.dim(1) ||
      bias.dim(0) != a.dim(1))
    throw ShapeError("layer_norm: shapes " + shape_str(a.shape()) + ", " +
                     shape_str(gain.shape()) + ", " + shape_str(bias.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  auto xhat = std::make_shared<std::vector<S>>(m * n);
  auto inv_std = std::make_shared<std::vector<S>>(m);
  std::vector<S> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    S mu = 0;
    for (std::size_t j = 0; j < n; ++j) mu += a.values()[i * n + j];
    mu /= S(n);
    S var = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const S d = a.values()[i * n + j] - mu;
      var += d * d;
    }
    var /= S(n);
    const S istd = S(1) / std::sqrt(var + S(eps));
    (*inv_std)[i] = istd;
    for (std::size_t j = 0; j < n; ++j) {
      const S xh = (a.values()[i * n + j] - mu) * istd;
      (*xhat)[i * n + j] = xh;
      out[i * n + j] = xh * gain.values()[j] + bias.values()[j];
    }
  }
  auto an = a.node(), gn = gain.node(), bn = bias.node();
  return detail::make_op<S>(
      "layer_norm", a.shape(), std::move(out), {a, gain, bias},
      [an, gn, bn, xhat, inv_std, m, n](TensorNode<S>& y) {
        for (std::size_t i = 0; i < m; ++i) {
          // dxhat = dy * gain; dx via the standard layer-norm backward
          if (an->requires_grad) {
            an->ensure_grad();
            S sum_dxh = 0, sum_dxh_xh = 0;
            for (std::size_t j = 0; j < n; ++j) {
              const S dxh = y.grad[i * n + j] * gn->values[j];
              sum_dxh += dxh;
              sum_dxh_xh += dxh * (*xhat)[i * n + j];
            }
            for (std::size_t j = 0; j < n; ++j) {
              const S dxh = y.grad[i * n + j] * gn->values[j];
              an->grad[i * n + j] +=
                  (*inv_std)[i] *
                  (dxh - sum_dxh / S(n) - (*xhat)[i * n + j] * sum_dxh_xh / S(n));
            }
          }
          if (gn->requires_grad) {
            gn->ensure_grad();
            for (std::size_t j = 0; j < n; ++j)
              gn->grad[j] += y.grad[i * n + j] * (*xhat)[i * n + j];
          }
          if (bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t j = 0; j < n; ++j) bn->grad[j] += y.grad[i * n + j];
          }
        }
      });
}

template <typename S>
TensorT<S> softmax_rows(const TensorT<S>& a) {
  if (a.rank() != 2) throw ShapeError("softmax_rows: expected rank 2, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<S> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    S mx = a.values()[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a.values()[i * n + j]);
    S z = 0;
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp(a.values()[i * n + j] - mx);
      z += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  auto an = a.node();
  return detail::make_op<S>("softmax_rows", a.shape(), std::move(out), {a},
                            [an, m, n](TensorNode<S>& y) {
                              if (!an->requires_grad) return;
                              an->ensure_grad();
                              for (std::size_t i = 0; i < m; ++i) {
                                S dy_dot_y = 0;
                                for (std::size_t j = 0; j < n; ++j)
                                  dy_dot_y += y.grad[i * n + j] * y.values[i * n + j];
                                for (std::size_t j = 0; j < n; ++j)
                                  an->grad[i * n + j] += (y.grad[i * n + j] - dy_dot_y) *
                                                         y.values[i * n + j];
                              }
                            });
}

template <typename S>
TensorT<S> softmax(const TensorT<S>& a) {
  if (a.rank() != 1) throw ShapeError("softmax: expected rank 1, got " + shape_str(a.shape()));
  auto y = softmax_rows(reshape(a, {1, a.dim(0)}));
  return reshape(y, {a.dim(0)});
}

template <typename S>
TensorT<S> log_sum_exp(const TensorT<S>& a) {
  if (a.rank() != 1) throw ShapeError("log_sum_exp: expected rank 1, got " + shape_str(a.shape()));
  if (a.numel() == 0) throw ShapeError("log_sum_exp: empty input");
  S mx = a.values()[0];
  for (S v : a.values()) mx = std::max(mx, v);
  S z = 0;
  for (S v : a.values()) z += std::exp(v - mx);
  const S lse = mx + std::log(z);
  auto an = a.node();
  return detail::make_op<S>("log_sum_exp", {1}, {lse}, {a}, [an, lse](TensorNode<S>& y) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < an->grad.size(); ++i)
      an->grad[i] += y.grad[0] * std::exp(an->values[i] - lse);
  });
}

template <typename S>
TensorT<S> log_sum_exp_rows(const TensorT<S>& a) {
  if (a.rank() != 2)
    throw ShapeError("log_sum_exp_rows: expected rank 2, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<S> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    S mx = a.values()[i * n];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, a.values()[i * n + j]);
    S z = 0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(a.values()[i * n + j] - mx);
    out[i] = mx + std::log(z);
  }
  auto an = a.node();
  return detail::make_op<S>("log_sum_exp_rows", {m}, std::move(out), {a},
                            [an, m, n](TensorNode<S>& y) {
                              if (!an->requires_grad) return;
                              an->ensure_grad();
                              for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < n; ++j)
                                  an->grad[i * n + j] +=
                                      y.grad[i] * std::exp(an->values[i * n + j] - y.values[i]);
                            });
}

// ---------------------------------------------------------------------------
// Backward pass.
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Interior gradients are zeroed at the
// start of each sweep; leaf gradients accumulate across sweeps until cleared.
// A loss tensor can be swept only once.
template <typename S>
void backward(const TensorT<S>& loss) {
  if (loss.numel() != 1)
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  auto root = loss.node();
  if (root->consumed) throw GraphError("backward: graph already consumed; re-run the forward pass");
  if (!root->requires_grad) {
    root->consumed = true;
    return;
  }

  // Iterative post-order topological sort over parents.
  std::vector<TensorNode<S>*> order;
  std::unordered_set<TensorNode<S>*> visited;
  std::vector<std::pair<TensorNode<S>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode<S>* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (TensorNode<S>* n : order) {
    if (n->is_leaf)
      n->ensure_grad();  // leaves accumulate across sweeps
    else
      n->grad.assign(n->values.size(), S(0));
  }
  root->grad[0] = S(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode<S>* n = *it;
    if (!n->is_leaf && n->backprop) {
      n->backprop(*n);
      n->consumed = true;
    }
  }
  root->consumed = true;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check.
// ---------------------------------------------------------------------------

// Compares backward() gradients against central differences for every element
// of every leaf. Returns max over elements of |g_ad - g_fd| / max(1,|g_ad|,|g_fd|).
// fn must be a deterministic function of the leaves (fix any dropout stream).
template <typename S>
double grad_check(const std::function<TensorT<S>()>& fn, const std::vector<TensorT<S>>& leaves,
                  double eps = 1e-5) {
  if (eps < 1e-7 || eps > 1e-3) throw NumericError("grad_check: eps must be in [1e-7, 1e-3]");
  for (auto& leaf : leaves) const_cast<TensorT<S>&>(leaf).clear_grad();
  TensorT<S> out = fn();
  backward(out);

  std::vector<std::vector<S>> ad;
  ad.reserve(leaves.size());
  for (const auto& leaf : leaves)
    ad.push_back(leaf.has_grad() ? leaf.grad() : std::vector<S>(leaf.numel(), S(0)));

  double max_rel = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = const_cast<TensorT<S>&>(leaves[li]);
    auto& vals = leaf.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const S orig = vals[i];
      double fp, fm;
      {
        NoGradGuard ng;
        vals[i] = orig + S(eps);
        fp = static_cast<double>(fn().value());
        vals[i] = orig - S(eps);
        fm = static_cast<double>(fn().value());
        vals[i] = orig;
      }
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericError("grad_check: non-finite finite-difference value");
      const double fd = (fp - fm) / (2.0 * eps);
      const double g = static_cast<double>(ad[li][i]);
      const double denom = std::max({1.0, std::abs(g), std::abs(fd)});
      max_rel = std::max(max_rel, std::abs(g - fd) / denom);
    }
  }
  return max_rel;
}

}  // namespace binder
