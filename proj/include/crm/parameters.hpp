#pragma once

#include "crm/autodiff.hpp"

#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace crm {

// Named, ordered collection of trainable arrays. Indices are stable.
template <typename Scalar>
class ParameterSet {
 public:
  std::size_t add(std::string name, Matrix<Scalar> init, bool decay) {
    for (const auto& p : params_) {
      if (p.name == name) throw ConfigError("duplicate parameter name '" + name + "'");
    }
    Parameter<Scalar> p;
    p.name = std::move(name);
    p.value = std::move(init);
    p.decay = decay;
    params_.push_back(std::move(p));
    return params_.size() - 1;
  }

  Parameter<Scalar>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<Scalar>& operator[](std::size_t i) const { return params_[i]; }
  std::size_t size() const { return params_.size(); }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  const Parameter<Scalar>* find(std::string_view name) const {
    for (const auto& p : params_) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }
  Parameter<Scalar>* find(std::string_view name) {
    for (auto& p : params_) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  Eigen::Index scalar_count() const {
    Eigen::Index n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

 private:
  std::vector<Parameter<Scalar>> params_;
};

template <typename Scalar>
Matrix<Scalar> random_normal(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix<Scalar> m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = static_cast<Scalar>(dist(rng));
  }
  return m;
}

// Affine map x * W + b over rows.
template <typename Scalar>
struct Linear {
  std::size_t weight = 0;
  std::size_t bias = 0;
  bool has_bias = true;

  static Linear create(ParameterSet<Scalar>& ps, const std::string& name, Eigen::Index in, Eigen::Index out,
                       std::mt19937_64& rng, bool with_bias = true) {
    Linear l;
    const double stddev = std::sqrt(2.0 / static_cast<double>(in + out));
    l.weight = ps.add(name + ".weight", random_normal<Scalar>(in, out, stddev, rng), true);
    l.has_bias = with_bias;
    if (with_bias) l.bias = ps.add(name + ".bias", Matrix<Scalar>::Zero(1, out), false);
    return l;
  }

  Var<Scalar> operator()(Tape<Scalar>& t, const ParameterSet<Scalar>& ps, const Var<Scalar>& x) const {
    Var<Scalar> y = ad::matmul(x, t.parameter(ps[weight]));
    return has_bias ? ad::add_row(y, t.parameter(ps[bias])) : y;
  }
};

template <typename Scalar>
struct LayerNorm {
  std::size_t gamma = 0;
  std::size_t beta = 0;

  static LayerNorm create(ParameterSet<Scalar>& ps, const std::string& name, Eigen::Index dim) {
    LayerNorm n;
    n.gamma = ps.add(name + ".gamma", Matrix<Scalar>::Ones(1, dim), false);
    n.beta = ps.add(name + ".beta", Matrix<Scalar>::Zero(1, dim), false);
    return n;
  }

  Var<Scalar> operator()(Tape<Scalar>& t, const ParameterSet<Scalar>& ps, const Var<Scalar>& x) const {
    return ad::layer_norm(x, t.parameter(ps[gamma]), t.parameter(ps[beta]));
  }
};

}  // namespace crm
