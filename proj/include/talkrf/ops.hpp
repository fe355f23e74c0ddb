#pragma once

#include <cstddef>
#include <vector>

#include "talkrf/rng.hpp"
#include "talkrf/tensor.hpp"

namespace talkrf {

// Elementwise arithmetic with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double offset);
Tensor neg(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(double s, const Tensor& a) { return add_scalar(a, s); }
inline Tensor operator-(double s, const Tensor& a) { return add_scalar(neg(a), s); }

// Pointwise nonlinearities.
Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
/// Gradient flows only where lo < x < hi.
Tensor clamp(const Tensor& x, double lo, double hi);

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, std::size_t axis);
Tensor mean_axis(const Tensor& x, std::size_t axis);
Tensor mse(const Tensor& a, const Tensor& b);

// Structure.
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
Tensor flip(const Tensor& x, std::size_t axis);
/// Treats x as rows along axis 0 and gathers rows by index.
Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows);

// Dense layers. Feature axis is always the last one.
/// x: [..., K], w: [K, N] -> [..., N]
Tensor matmul(const Tensor& x, const Tensor& w);
/// matmul plus bias b: [N]; b may be undefined.
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);

enum class Padding { Same, Valid };

struct ConvOptions {
  std::size_t stride = 1;
  std::size_t dilation = 1;
  Padding padding = Padding::Same;
};

/// Dilated 1D convolution over time. x: [B, T, Cin], w: [K, Cin, Cout], b: [Cout] or
/// undefined. Same padding keeps ceil(T / stride) outputs with symmetric zero padding
/// of dilation * (K - 1) / 2 on the left.
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, ConvOptions opt = {});
/// Transposed 1D convolution: scatters each input step through the kernel.
/// Output length is T * stride; same padding trims dilation * (K - 1) / 2.
Tensor conv_transpose1d(const Tensor& x, const Tensor& w, const Tensor& b,
                        ConvOptions opt = {});
std::size_t conv1d_output_length(std::size_t length, std::size_t kernel, ConvOptions opt);

/// Normalizes over the last axis.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Running statistics owned by a batch-norm layer.
struct BatchNormStats {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.99;
};

/// Normalizes each channel (last axis) over every other axis. In training mode the
/// batch statistics are used and folded into `stats` as
/// running = momentum * running + (1 - momentum) * batch.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormStats& stats, bool training, double eps = 1e-5);

/// Inverted dropout; identity when not training or p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);

}  // namespace talkrf
