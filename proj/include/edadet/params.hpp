#pragma once

// Named trainable parameters, their binding into a graph, and AdamW.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>

#include "edadet/autograd.hpp"
#include "edadet/encoders.hpp"
#include "edadet/errors.hpp"
#include "edadet/tensor_io.hpp"

namespace edadet {

class ParamStore {
 public:
  ag::Mat& add(const std::string& name, ag::Mat init) {
    require(!params_.count(name), "ParamStore: duplicate parameter '" + name + "'");
    return params_.emplace(name, std::move(init)).first->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) > 0; }

  const ag::Mat& get(const std::string& name) const {
    auto it = params_.find(name);
    require(it != params_.end(), "ParamStore: unknown parameter '" + name + "'");
    return it->second;
  }
  ag::Mat& get(const std::string& name) {
    auto it = params_.find(name);
    require(it != params_.end(), "ParamStore: unknown parameter '" + name + "'");
    return it->second;
  }

  const NamedArrays& all() const { return params_; }
  NamedArrays& all() { return params_; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [k, v] : params_) n += static_cast<std::size_t>(v.size());
    return n;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.params_.size() != b.params_.size()) return false;
    for (const auto& [k, v] : a.params_) {
      auto it = b.params_.find(k);
      if (it == b.params_.end() || it->second.rows() != v.rows() || it->second.cols() != v.cols() ||
          it->second != v)
        return false;
    }
    return true;
  }

 private:
  NamedArrays params_;
};

// Seeded initializers; each parameter draws from its own stream keyed by name
// so adding a parameter never perturbs the others.
inline ag::Mat xavier_uniform(const std::string& name, std::uint64_t seed, int fan_in, int fan_out) {
  std::mt19937_64 rng(detail::fnv1a(name, seed));
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  ag::Mat m(fan_in, fan_out);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

inline ag::Mat normal_init(const std::string& name, std::uint64_t seed, int rows, int cols, double stddev) {
  std::mt19937_64 rng(detail::fnv1a(name, seed));
  std::normal_distribution<double> nd(0.0, stddev);
  ag::Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
  return m;
}

// Lazily creates one leaf per parameter used by a forward pass.
class ParamBinding {
 public:
  ParamBinding(ag::Graph& g, const ParamStore& store) : g_(g), store_(store) {}

  ag::Var operator()(const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    ag::Var v = g_.leaf(store_.get(name));
    vars_.emplace(name, v);
    return v;
  }

  ag::Graph& graph() { return g_; }

  // Gradients of every bound parameter (zero when no gradient reached it).
  NamedArrays grads() const {
    NamedArrays out;
    for (const auto& [name, v] : vars_) {
      const auto& gr = v.grad();
      out.emplace(name, gr.size() ? gr : ag::Mat::Zero(v.rows(), v.cols()));
    }
    return out;
  }

 private:
  ag::Graph& g_;
  const ParamStore& store_;
  std::map<std::string, ag::Var> vars_;
};

inline void accumulate_grads(NamedArrays& into, const NamedArrays& g, double weight = 1.0) {
  for (const auto& [name, m] : g) {
    auto it = into.find(name);
    if (it == into.end()) {
      into.emplace(name, m * weight);
    } else {
      it->second += m * weight;
    }
  }
}

struct AdamWConfig {
  double lr = 1e-3;  // toy-scale default; the full-scale recipe uses 2e-4
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Global gradient-norm clip; <= 0 disables.
  double grad_clip = 0.1;
};

// Adam with decoupled weight decay.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  std::int64_t steps() const { return t_; }

  void step(ParamStore& params, NamedArrays grads, double lr) {
    if (cfg_.grad_clip > 0) {
      double sq = 0;
      for (const auto& [k, g] : grads) sq += g.squaredNorm();
      const double norm = std::sqrt(sq);
      if (norm > cfg_.grad_clip) {
        for (auto& [k, g] : grads) g *= cfg_.grad_clip / norm;
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : params.all()) {
      auto git = grads.find(name);
      if (git == grads.end()) continue;
      const ag::Mat& g = git->second;
      auto& m = state(m_, name, p);
      auto& v = state(v_, name, p);
      m = cfg_.beta1 * m + (1 - cfg_.beta1) * g;
      v = cfg_.beta2 * v + (1 - cfg_.beta2) * g.cwiseAbs2();
      p *= (1.0 - lr * cfg_.weight_decay);
      p.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg_.eps);
    }
  }

  NamedArrays state_arrays() const {
    NamedArrays out;
    for (const auto& [k, m] : m_) out.emplace("adam_m/" + k, m);
    for (const auto& [k, v] : v_) out.emplace("adam_v/" + k, v);
    ag::Mat t(1, 1);
    t(0, 0) = static_cast<double>(t_);
    out.emplace("adam_t", t);
    return out;
  }

  void load_state(const NamedArrays& arrays) {
    m_.clear();
    v_.clear();
    for (const auto& [k, m] : arrays) {
      if (k.rfind("adam_m/", 0) == 0) m_.emplace(k.substr(7), m);
      else if (k.rfind("adam_v/", 0) == 0) v_.emplace(k.substr(7), m);
      else if (k == "adam_t") t_ = static_cast<std::int64_t>(m(0, 0));
    }
  }

 private:
  static ag::Mat& state(NamedArrays& s, const std::string& name, const ag::Mat& like) {
    auto it = s.find(name);
    if (it == s.end()) it = s.emplace(name, ag::Mat::Zero(like.rows(), like.cols())).first;
    return it->second;
  }

  AdamWConfig cfg_;
  std::int64_t t_ = 0;
  NamedArrays m_, v_;
};

}  // namespace edadet
