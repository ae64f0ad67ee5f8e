#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "binder/rng.hpp"
#include "binder/tensor.hpp"

#include <json.hpp>

namespace binder {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts are unsupported");

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Named trainable parameters in deterministic (lexicographic) order.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t) {
    if (params_.count(name)) throw GraphError("ParamStore: duplicate parameter '" + name + "'");
    auto [it, ok] = params_.emplace(name, std::move(t));
    return it->second;
  }

  Tensor& add_normal(const std::string& name, Shape shape, CounterRng& rng, double stddev) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = rng.normal() * stddev;
    return add(name, Tensor::from_values(std::move(shape), std::move(v), true));
  }

  Tensor& add_zeros(const std::string& name, Shape shape) {
    return add(name, Tensor::zeros(std::move(shape), true));
  }

  Tensor& add_full(const std::string& name, Shape shape, double value) {
    return add(name, Tensor::full(std::move(shape), value, true));
  }

  bool has(const std::string& name) const { return params_.count(name) > 0; }

  Tensor& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw GraphError("ParamStore: unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw GraphError("ParamStore: unknown parameter '" + name + "'");
    return it->second;
  }

  std::size_t size() const { return params_.size(); }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& [k, t] : params_) n += t.numel();
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grads() {
    for (auto& [k, t] : params_) t.clear_grad();
  }

  // Value snapshot for in-memory best-checkpoint tracking.
  std::map<std::string, std::vector<double>> snapshot() const {
    std::map<std::string, std::vector<double>> out;
    for (const auto& [k, t] : params_) out[k] = t.values();
    return out;
  }

  void restore(const std::map<std::string, std::vector<double>>& snap) {
    for (auto& [k, t] : params_) {
      auto it = snap.find(k);
      if (it == snap.end()) throw CheckpointError("restore: missing parameter '" + k + "'");
      if (it->second.size() != t.numel())
        throw CheckpointError("restore: size mismatch for '" + k + "'");
      t.mutable_values() = it->second;
    }
  }

  // Layout: one JSON header line, then a little-endian float64 blob. Offsets
  // count elements from the start of the blob.
  void save(const std::string& path) const {
    nlohmann::json meta;
    meta["binder_checkpoint"] = 1;
    meta["dtype"] = "f64";
    nlohmann::json pj = nlohmann::json::object();
    std::size_t offset = 0;
    for (const auto& [k, t] : params_) {
      pj[k] = {{"offset", offset}, {"shape", t.shape()}};
      offset += t.numel();
    }
    meta["params"] = pj;

    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("save: cannot open '" + path + "' for writing");
    out << meta.dump() << '\n';
    for (const auto& [k, t] : params_) {
      const auto& v = t.values();
      out.write(reinterpret_cast<const char*>(v.data()),
                static_cast<std::streamsize>(v.size() * sizeof(double)));
    }
    if (!out) throw CheckpointError("save: write failed for '" + path + "'");
  }

  // Loads values into matching parameters; the store must already hold every
  // name in the file with the same shape, and vice versa.
  void load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("load: cannot open '" + path + "'");
    std::string header;
    if (!std::getline(in, header)) throw CheckpointError("load: missing header line");
    nlohmann::json meta;
    try {
      meta = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(std::string("load: bad header: ") + e.what());
    }
    if (!meta.contains("binder_checkpoint") || meta["binder_checkpoint"] != 1)
      throw CheckpointError("load: not a recognized checkpoint file");
    if (meta.value("dtype", "") != "f64")
      throw CheckpointError("load: unsupported dtype '" + meta.value("dtype", "") + "'");
    const auto& pj = meta.at("params");
    if (pj.size() != params_.size())
      throw CheckpointError("load: parameter count mismatch (file " +
                            std::to_string(pj.size()) + ", store " +
                            std::to_string(params_.size()) + ")");

    std::streampos blob_start = in.tellg();
    for (auto& [name, t] : params_) {
      if (!pj.contains(name)) throw CheckpointError("load: file lacks parameter '" + name + "'");
      const auto& entry = pj.at(name);
      Shape fshape = entry.at("shape").get<Shape>();
      if (fshape != t.shape())
        throw CheckpointError("load: shape mismatch for '" + name + "': file " +
                              shape_str(fshape) + ", store " + shape_str(t.shape()));
      const std::size_t offset = entry.at("offset").get<std::size_t>();
      in.seekg(blob_start + std::streampos(offset * sizeof(double)));
      auto& v = t.mutable_values();
      in.read(reinterpret_cast<char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
      if (in.gcount() != static_cast<std::streamsize>(v.size() * sizeof(double)))
        throw CheckpointError("load: truncated blob at parameter '" + name + "'");
      for (double x : v)
        if (!std::isfinite(x))
          throw CheckpointError("load: non-finite value in parameter '" + name + "'");
    }
  }

 private:
  std::map<std::string, Tensor> params_;
};

}  // namespace binder
