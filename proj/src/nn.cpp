#include "talkrf/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace talkrf {

Tensor ParamStore::insert(const std::string& name, Tensor tensor, bool trainable) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  tensor.set_requires_grad(trainable);
  index_[name] = entries_.size();
  entries_.push_back({name, tensor, trainable});
  return tensor;
}

Tensor ParamStore::add(const std::string& name, Tensor tensor) {
  return insert(name, std::move(tensor), true);
}

Tensor ParamStore::add_buffer(const std::string& name, Tensor tensor) {
  return insert(name, std::move(tensor), false);
}

Tensor ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return entries_[it->second].tensor;
}

std::vector<ParamStore::Entry> ParamStore::trainable() const {
  std::vector<Entry> out;
  for (const auto& e : entries_)
    if (e.trainable) out.push_back(e);
  return out;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    if (e.trainable) n += e.tensor.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.tensor.zero_grad();
}

void ParamStore::set_requires_grad(bool on) {
  for (auto& e : entries_)
    if (e.trainable) e.tensor.set_requires_grad(on);
}

void ParamStore::copy_values_from(const ParamStore& other) {
  for (auto& e : entries_) {
    Tensor src = other.get(e.name);
    if (src.shape() != e.tensor.shape()) {
      throw ShapeError("copy_values_from: shape mismatch for " + e.name);
    }
    auto dst = e.tensor.mutable_values();
    std::copy(src.values().begin(), src.values().end(), dst.begin());
  }
}

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.mutable_values()) v = rng.uniform(-bound, bound);
  return t;
}

Linear::Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
               Rng& rng, bool zero_init) {
  const double bound = zero_init ? 0.0 : 1.0 / std::sqrt(static_cast<double>(in));
  weight_ = store.add(name + ".weight", uniform_tensor({in, out}, bound, rng));
  bias_ = store.add(name + ".bias", uniform_tensor({out}, bound, rng));
}

Conv1d::Conv1d(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
               std::size_t kernel, ConvOptions opt, Rng& rng, bool zero_init)
    : opt_(opt) {
  const double bound = zero_init ? 0.0 : 1.0 / std::sqrt(static_cast<double>(in * kernel));
  weight_ = store.add(name + ".weight", uniform_tensor({kernel, in, out}, bound, rng));
  bias_ = store.add(name + ".bias", uniform_tensor({out}, bound, rng));
}

ConvTranspose1d::ConvTranspose1d(ParamStore& store, const std::string& name, std::size_t in,
                                 std::size_t out, std::size_t kernel, ConvOptions opt, Rng& rng)
    : opt_(opt) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel));
  weight_ = store.add(name + ".weight", uniform_tensor({kernel, in, out}, bound, rng));
  bias_ = store.add(name + ".bias", uniform_tensor({out}, bound, rng));
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& name, std::size_t channels) {
  gamma_ = store.add(name + ".gamma", Tensor::full({channels}, 1.0));
  beta_ = store.add(name + ".beta", Tensor::zeros({channels}));
}

BatchNorm::BatchNorm(ParamStore& store, const std::string& name, std::size_t channels,
                     double momentum) {
  gamma_ = store.add(name + ".gamma", Tensor::full({channels}, 1.0));
  beta_ = store.add(name + ".beta", Tensor::zeros({channels}));
  stats_.running_mean = store.add_buffer(name + ".running_mean", Tensor::zeros({channels}));
  stats_.running_var = store.add_buffer(name + ".running_var", Tensor::full({channels}, 1.0));
  stats_.momentum = momentum;
}

WaveNet::WaveNet(ParamStore& store, const std::string& name, std::size_t channels,
                 std::size_t cond_channels, std::size_t layers, std::size_t kernel, Rng& rng)
    : channels_(channels) {
  for (std::size_t i = 0; i < layers; ++i) {
    const std::string p = name + ".layer" + std::to_string(i);
    ConvOptions opt{1, dilation_for_layer(i), Padding::Same};
    in_layers_.emplace_back(store, p + ".in", channels, 2 * channels, kernel, opt, rng);
    cond_layers_.emplace_back(store, p + ".cond", cond_channels, 2 * channels, rng);
    // The last layer only feeds the skip path.
    const std::size_t rs = i + 1 < layers ? 2 * channels : channels;
    res_skip_layers_.emplace_back(store, p + ".res_skip", channels, rs, rng);
  }
}

Tensor WaveNet::operator()(const Tensor& x, const Tensor& cond) const {
  Tensor h = x;
  Tensor skip;
  const std::size_t n = in_layers_.size();
  for (std::size_t i = 0; i < n; ++i) {
    Tensor pre = in_layers_[i](h) + cond_layers_[i](cond);
    Tensor acts = tanh(slice(pre, 2, 0, channels_)) * sigmoid(slice(pre, 2, channels_, channels_));
    Tensor rs = res_skip_layers_[i](acts);
    Tensor s;
    if (i + 1 < n) {
      h = h + slice(rs, 2, 0, channels_);
      s = slice(rs, 2, channels_, channels_);
    } else {
      s = rs;
    }
    skip = skip.defined() ? skip + s : s;
  }
  return skip.defined() ? skip : x;
}

}  // namespace talkrf
