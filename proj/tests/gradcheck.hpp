#pragma once

// Central finite-difference oracle for reverse-mode gradients. Test-only; it
// never touches the backward closures it is checking.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "talkrf/rng.hpp"
#include "talkrf/tensor.hpp"

namespace talkrf::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;
};

/// ||a - n|| / max(||a||, ||n||, floor) over the probed coordinates.
inline double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                             double floor = 1e-12) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
}

/// Compares d loss / d input against central differences for each named input.
/// Large inputs are probed on `max_coords` random coordinates.
inline GradCheckResult check_gradients(const std::function<Tensor()>& loss_fn,
                                       const std::vector<std::pair<std::string, Tensor>>& inputs,
                                       double step = 1e-5, std::size_t max_coords = 48,
                                       std::uint64_t seed = 7) {
  for (const auto& [name, t] : inputs) {
    Tensor h = t;
    h.zero_grad();
  }
  loss_fn().backward();
  Rng rng(seed);
  GradCheckResult result;
  for (const auto& [name, t] : inputs) {
    Tensor h = t;
    const auto analytic_full = h.grad();
    std::vector<std::size_t> coords(h.numel());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng.engine());
      coords.resize(max_coords);
    }
    std::vector<double> analytic, numeric;
    NoGradGuard guard;
    for (auto i : coords) {
      auto v = h.mutable_values();
      const double orig = v[i];
      v[i] = orig + step;
      const double up = loss_fn().item();
      v[i] = orig - step;
      const double down = loss_fn().item();
      v[i] = orig;
      analytic.push_back(analytic_full[i]);
      numeric.push_back((up - down) / (2.0 * step));
    }
    const double err = relative_error(analytic, numeric);
    if (err >= result.max_rel_error) {
      result.max_rel_error = err;
      result.worst = name;
    }
  }
  return result;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = true) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (auto& v : t.mutable_values()) v = rng.normal(0.0, scale);
  return t;
}

}  // namespace talkrf::testing
