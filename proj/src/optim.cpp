#include "talkrf/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace talkrf {

void Adam::step(ParamStore& params) {
  auto entries = params.trainable();
  for (const auto& e : entries) {
    if (!e.tensor.has_grad()) throw std::runtime_error("adam_step: missing gradient for " + e.name);
  }
  ++steps_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
  for (auto& e : entries) {
    auto& st = state_[e.name];
    const std::size_t n = e.tensor.numel();
    if (st.m.size() != n) {
      st.m.assign(n, 0.0);
      st.v.assign(n, 0.0);
    }
    auto w = e.tensor.mutable_values();
    const auto& g = e.tensor.node().grad;
    for (std::size_t i = 0; i < n; ++i) {
      st.m[i] = options_.beta1 * st.m[i] + (1.0 - options_.beta1) * g[i];
      st.v[i] = options_.beta2 * st.v[i] + (1.0 - options_.beta2) * g[i] * g[i];
      const double mhat = st.m[i] / bc1;
      const double vhat = st.v[i] / bc2;
      w[i] -= options_.lr * mhat / (std::sqrt(vhat) + options_.eps);
    }
  }
}

}  // namespace talkrf
