#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "talkrf/nn.hpp"

namespace talkrf {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over every trainable tensor of a ParamStore. Moment estimates are keyed
/// by parameter name so they survive a checkpoint round trip.
class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamOptions options) : options_(options) {}

  /// Throws std::runtime_error naming the first trainable parameter without a gradient.
  void step(ParamStore& params);

  AdamOptions& options() { return options_; }
  const AdamOptions& options() const { return options_; }
  std::int64_t steps() const { return steps_; }

  struct Moments {
    std::vector<double> m, v;
  };
  const std::map<std::string, Moments>& state() const { return state_; }
  void restore(std::int64_t steps, std::map<std::string, Moments> state) {
    steps_ = steps;
    state_ = std::move(state);
  }

 private:
  AdamOptions options_;
  std::int64_t steps_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace talkrf
