#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "talkrf/ops.hpp"
#include "talkrf/rng.hpp"
#include "talkrf/tensor.hpp"

namespace talkrf {

/// Named parameters and buffers of one model. Names are unique; each tensor is
/// registered exactly once. Buffers (e.g. batch-norm running statistics) are
/// checkpointed but never touched by the optimizer.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    bool trainable = true;
  };

  Tensor add(const std::string& name, Tensor tensor);
  Tensor add_buffer(const std::string& name, Tensor tensor);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Tensor get(const std::string& name) const;
  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry> trainable() const;
  std::size_t parameter_count() const;

  void zero_grad();
  /// Toggles gradient tracking of every trainable tensor (freezing a model).
  void set_requires_grad(bool on);
  /// Copies values from another store with identical names and shapes.
  void copy_values_from(const ParamStore& other);

 private:
  Tensor insert(const std::string& name, Tensor tensor, bool trainable);

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Uniform(-bound, bound) tensor, the usual 1/sqrt(fan_in) initialization.
Tensor uniform_tensor(Shape shape, double bound, Rng& rng);

class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
         bool zero_init = false);
  Tensor operator()(const Tensor& x) const { return affine(x, weight_, bias_); }

  const Tensor& weight() const { return weight_; }
  const Tensor& bias() const { return bias_; }

 private:
  Tensor weight_, bias_;
};

class Conv1d {
 public:
  Conv1d() = default;
  Conv1d(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
         std::size_t kernel, ConvOptions opt, Rng& rng, bool zero_init = false);
  Tensor operator()(const Tensor& x) const { return conv1d(x, weight_, bias_, opt_); }

 private:
  Tensor weight_, bias_;
  ConvOptions opt_;
};

class ConvTranspose1d {
 public:
  ConvTranspose1d() = default;
  ConvTranspose1d(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                  std::size_t kernel, ConvOptions opt, Rng& rng);
  Tensor operator()(const Tensor& x) const { return conv_transpose1d(x, weight_, bias_, opt_); }

 private:
  Tensor weight_, bias_;
  ConvOptions opt_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, std::size_t channels);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma_, beta_); }

 private:
  Tensor gamma_, beta_;
};

class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(ParamStore& store, const std::string& name, std::size_t channels,
            double momentum = 0.99);
  Tensor operator()(const Tensor& x, bool training) {
    return batch_norm(x, gamma_, beta_, stats_, training);
  }

 private:
  Tensor gamma_, beta_;
  BatchNormStats stats_;
};

/// Non-causal gated WaveNet stack with an additive per-layer condition.
/// Dilations cycle 1, 2, 4, 8. Input and output are [B, T, channels]; the
/// condition is [B, T, cond_channels].
class WaveNet {
 public:
  WaveNet() = default;
  WaveNet(ParamStore& store, const std::string& name, std::size_t channels,
          std::size_t cond_channels, std::size_t layers, std::size_t kernel, Rng& rng);
  Tensor operator()(const Tensor& x, const Tensor& cond) const;

  static std::size_t dilation_for_layer(std::size_t layer) { return std::size_t{1} << (layer % 4); }

 private:
  std::size_t channels_ = 0;
  std::vector<Conv1d> in_layers_;
  std::vector<Linear> cond_layers_;
  std::vector<Linear> res_skip_layers_;
};

}  // namespace talkrf
