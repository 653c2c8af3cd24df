#pragma once

// Central finite-difference verification of tape gradients.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "gkd/autodiff.hpp"
#include "gkd/tensor.hpp"

namespace gkd {

template <typename T>
using ParamMap = std::map<std::string, Tensor<T>>;

struct GradCheckOptions {
  double epsilon = 1e-4;
  // 0 checks every element; otherwise a seeded random subset per tensor.
  std::size_t max_elements_per_tensor = 0;
  std::uint64_t seed = 0;
  // When the +step and -step evaluations fall on different pieces of a
  // piecewise-linear op, the step is divided by 10, at most this many times.
  int kink_refinements = 3;
};

struct GradCheckResult {
  double max_relative_error = 0;
  std::string worst_tensor;
  std::size_t worst_index = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
  std::size_t checked = 0;
  std::size_t refined = 0;  // elements that needed a smaller step
};

/// |a - n| / max(|a|, |n|, 1e-8)
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// `loss_fn(tape, params) -> Var` must register every parameter it uses via
/// tape.parameter(name, params.at(name)) and be deterministic.
template <typename T, typename LossFn>
GradCheckResult grad_check(LossFn&& loss_fn, ParamMap<T>& params,
                           const GradCheckOptions& options = {}) {
  if (!(options.epsilon > 0)) throw std::invalid_argument("grad_check: epsilon must be > 0");

  std::map<std::string, Tensor<T>> analytic;
  {
    Tape<T> tape;
    Var loss = loss_fn(tape, static_cast<const ParamMap<T>&>(params));
    if (!std::isfinite(static_cast<double>(tape.value(loss)[0]))) {
      throw std::domain_error("grad_check: non-finite function value");
    }
    tape.backward(loss);
    analytic = tape.gradients();
  }

  struct Sample {
    double value;
    std::uint64_t signature;
  };
  auto evaluate = [&]() {
    Tape<T> tape(false);
    tape.track_branches(true);
    Var loss = loss_fn(tape, static_cast<const ParamMap<T>&>(params));
    const double v = static_cast<double>(tape.value(loss)[0]);
    if (!std::isfinite(v)) throw std::domain_error("grad_check: non-finite function value");
    return Sample{v, tape.branch_signature()};
  };

  std::mt19937_64 rng(options.seed);
  GradCheckResult result;
  for (auto& [name, tensor] : params) {
    auto it = analytic.find(name);
    if (it == analytic.end()) continue;
    std::vector<std::size_t> indices(tensor.size());
    std::iota(indices.begin(), indices.end(), std::size_t{0});
    if (options.max_elements_per_tensor != 0 && indices.size() > options.max_elements_per_tensor) {
      std::vector<std::size_t> picked;
      std::sample(indices.begin(), indices.end(), std::back_inserter(picked),
                  options.max_elements_per_tensor, rng);
      indices = std::move(picked);
    }
    for (std::size_t i : indices) {
      const T saved = tensor[i];
      double step = options.epsilon;
      double numeric = 0;
      for (int attempt = 0;; ++attempt) {
        tensor[i] = static_cast<T>(saved + step);
        const Sample plus = evaluate();
        tensor[i] = static_cast<T>(saved - step);
        const Sample minus = evaluate();
        tensor[i] = saved;
        numeric = (plus.value - minus.value) / (2 * step);
        if (plus.signature == minus.signature || attempt >= options.kink_refinements) break;
        if (attempt == 0) ++result.refined;
        step /= 10;
      }
      const double a = static_cast<double>(it->second[i]);
      const double err = relative_error(a, numeric);
      ++result.checked;
      if (result.checked == 1 || err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_tensor = name;
        result.worst_index = i;
        result.worst_analytic = a;
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace gkd
