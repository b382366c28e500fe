#pragma once

// Central finite-difference checks for tape gradients (float64).

#include "crm/autodiff.hpp"
#include "crm/parameters.hpp"

#include <cmath>
#include <functional>
#include <vector>

namespace gradcheck {

struct Result {
  long checked = 0;
  long passed = 0;
  double worst_abs = 0.0;

  double pass_fraction() const { return checked ? static_cast<double>(passed) / checked : 1.0; }
};

inline bool close(double analytic, double numeric, double rtol, double atol) {
  return std::abs(analytic - numeric) <= atol + rtol * std::max(std::abs(analytic), std::abs(numeric));
}

using InputFn = std::function<crm::Var<double>(crm::Tape<double>&, const std::vector<crm::Var<double>>&)>;

// Gradient of f w.r.t. each input matrix, entry by entry.
inline Result inputs(const InputFn& f, std::vector<Eigen::MatrixXd> xs, double step = 1e-5, double rtol = 1e-3,
                     double atol = 1e-8) {
  std::vector<Eigen::MatrixXd> analytic;
  {
    crm::Tape<double> t;
    std::vector<crm::Parameter<double>> ps(xs.size());
    std::vector<crm::Var<double>> vs;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      ps[i].value = xs[i];
      vs.push_back(t.parameter(ps[i]));
    }
    t.backward(f(t, vs));
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const auto& g = t.grad(vs[i].id());
      analytic.push_back(g.size() ? g : Eigen::MatrixXd::Zero(xs[i].rows(), xs[i].cols()));
    }
  }
  auto eval = [&](const std::vector<Eigen::MatrixXd>& values) {
    crm::Tape<double> t(false);
    std::vector<crm::Var<double>> vs;
    for (const auto& v : values) vs.push_back(t.constant(v));
    return f(t, vs).scalar();
  };
  Result r;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    for (Eigen::Index j = 0; j < xs[i].size(); ++j) {
      const double orig = xs[i].data()[j];
      xs[i].data()[j] = orig + step;
      const double up = eval(xs);
      xs[i].data()[j] = orig - step;
      const double down = eval(xs);
      xs[i].data()[j] = orig;
      const double numeric = (up - down) / (2 * step);
      const double a = analytic[i].data()[j];
      ++r.checked;
      if (close(a, numeric, rtol, atol)) ++r.passed;
      r.worst_abs = std::max(r.worst_abs, std::abs(a - numeric));
    }
  }
  return r;
}

// Gradient of a loss built from parameters in ps (recorded fresh on each call).
inline Result parameters(crm::ParameterSet<double>& ps, const std::function<crm::Var<double>(crm::Tape<double>&)>& loss,
                         double step = 1e-5, double rtol = 1e-3, double atol = 1e-8) {
  ps.zero_grad();
  {
    crm::Tape<double> t;
    t.backward(loss(t));
  }
  Result r;
  for (auto& p : ps) {
    const Eigen::MatrixXd analytic = p.grad.size() ? p.grad : Eigen::MatrixXd::Zero(p.value.rows(), p.value.cols());
    for (Eigen::Index j = 0; j < p.value.size(); ++j) {
      const double orig = p.value.data()[j];
      p.value.data()[j] = orig + step;
      double up, down;
      {
        crm::Tape<double> t(false);
        up = loss(t).scalar();
      }
      p.value.data()[j] = orig - step;
      {
        crm::Tape<double> t(false);
        down = loss(t).scalar();
      }
      p.value.data()[j] = orig;
      const double numeric = (up - down) / (2 * step);
      ++r.checked;
      if (close(analytic.data()[j], numeric, rtol, atol)) ++r.passed;
      r.worst_abs = std::max(r.worst_abs, std::abs(analytic.data()[j] - numeric));
    }
  }
  return r;
}

}  // namespace gradcheck
