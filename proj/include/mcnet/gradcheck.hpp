#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace mcnet {

struct GradCheckReport {
  double max_rel_err = 0.0;  // max over components of |ana - num| / max(1, |ana|)
  std::size_t worst_index = 0;
  std::string worst_param;
  bool finite = true;

  bool ok(double tol) const { return finite && max_rel_err < tol; }
};

// Central-difference check of reverse-mode gradients with respect to x.
// `build` gets a fresh Graph and must be a pure function of the tensor values
// it reads; it returns a scalar loss.
template <typename T, typename BuildFn>
GradCheckReport grad_check(BuildFn&& build, Tensor<T>& x, T h, const std::string& name = "x") {
  GradCheckReport rep;
  rep.worst_param = name;
  std::vector<T> analytic;
  {
    Graph<T> g;
    Tensor<T> loss = build(g);
    g.backward(loss);
    analytic = x.grad();
  }
  auto eval = [&]() -> double {
    Graph<T> g;
    g.set_enabled(false);
    return static_cast<double>(build(g).item());
  };
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T old = x.values()[i];
    x.values()[i] = old + h;
    const double f1 = eval();
    x.values()[i] = old - h;
    const double f2 = eval();
    x.values()[i] = old;
    const double num = (f1 - f2) / (2.0 * static_cast<double>(h));
    const double ana = static_cast<double>(analytic[i]);
    if (!std::isfinite(num) || !std::isfinite(ana)) {
      rep.finite = false;
      rep.worst_index = i;
      return rep;
    }
    const double rel = std::abs(ana - num) / std::max(1.0, std::abs(ana));
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_index = i;
    }
  }
  return rep;
}

// Same check across several named parameters; reports the worst.
template <typename T, typename BuildFn>
GradCheckReport grad_check_params(BuildFn&& build,
                                  const std::vector<std::pair<std::string, Tensor<T>>>& params,
                                  T h) {
  GradCheckReport worst;
  for (const auto& [name, p] : params) {
    auto rep = grad_check(build, const_cast<Tensor<T>&>(p), h, name);
    if (!rep.finite) return rep;
    if (rep.max_rel_err >= worst.max_rel_err) {
      worst.max_rel_err = rep.max_rel_err;
      worst.worst_index = rep.worst_index;
      worst.worst_param = name;
    }
  }
  return worst;
}

}  // namespace mcnet
