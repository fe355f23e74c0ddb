#include "talkrf/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace talkrf {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b,
                             const std::string& what = "incompatible shapes") {
  throw ShapeError(std::string(op) + ": " + what + " " + to_string(a) + " vs " + to_string(b));
}

std::vector<double>* grad_target(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? &p.grad_buffer() : nullptr;
}

// ---------------------------------------------------------------- broadcasting

struct Broadcast {
  Shape out;
  std::vector<std::size_t> a_strides;
  std::vector<std::size_t> b_strides;
};

std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

Broadcast broadcast_shapes(const char* op, const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r - a.size(), 1), pb(r - b.size(), 1);
  pa.insert(pa.end(), a.begin(), a.end());
  pb.insert(pb.end(), b.begin(), b.end());
  Broadcast bc;
  bc.out.resize(r);
  auto sa = contiguous_strides(pa), sb = contiguous_strides(pb);
  bc.a_strides.resize(r);
  bc.b_strides.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) shape_fail(op, a, b);
    bc.out[i] = std::max(pa[i], pb[i]);
    bc.a_strides[i] = pa[i] == 1 ? 0 : sa[i];
    bc.b_strides[i] = pb[i] == 1 ? 0 : sb[i];
  }
  return bc;
}

// Calls fn(out_index, a_index, b_index) for every output element.
template <class Fn>
void for_each_broadcast(const Broadcast& bc, Fn&& fn) {
  const std::size_t r = bc.out.size();
  const std::size_t n = numel(bc.out);
  if (n == 0) return;
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    fn(o, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += bc.a_strides[d];
      ib += bc.b_strides[d];
      if (idx[d] < bc.out[d]) break;
      ia -= bc.a_strides[d] * idx[d];
      ib -= bc.b_strides[d] * idx[d];
      idx[d] = 0;
    }
  }
}

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary(const char* name, BinOp kind, const Tensor& a, const Tensor& b) {
  auto apply = [kind](double x, double y) {
    switch (kind) {
      case BinOp::Add: return x + y;
      case BinOp::Sub: return x - y;
      case BinOp::Mul: return x * y;
      case BinOp::Div: return x / y;
    }
    return 0.0;
  };
  const auto& av = a.values();
  const auto& bv = b.values();
  if (a.shape() == b.shape()) {
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(av[i], bv[i]);
    return make_result(name, a.shape(), std::move(out), {a, b}, [kind](Node& self) {
      const auto& g = self.grad;
      const auto& x = self.parents[0]->value;
      const auto& y = self.parents[1]->value;
      if (auto* ga = grad_target(self, 0)) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          switch (kind) {
            case BinOp::Add:
            case BinOp::Sub: (*ga)[i] += g[i]; break;
            case BinOp::Mul: (*ga)[i] += g[i] * y[i]; break;
            case BinOp::Div: (*ga)[i] += g[i] / y[i]; break;
          }
        }
      }
      if (auto* gb = grad_target(self, 1)) {
        for (std::size_t i = 0; i < g.size(); ++i) {
          switch (kind) {
            case BinOp::Add: (*gb)[i] += g[i]; break;
            case BinOp::Sub: (*gb)[i] -= g[i]; break;
            case BinOp::Mul: (*gb)[i] += g[i] * x[i]; break;
            case BinOp::Div: (*gb)[i] -= g[i] * x[i] / (y[i] * y[i]); break;
          }
        }
      }
    });
  }
  Broadcast bc = broadcast_shapes(name, a.shape(), b.shape());
  std::vector<double> out(numel(bc.out));
  for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
    out[o] = apply(av[ia], bv[ib]);
  });
  return make_result(name, bc.out, std::move(out), {a, b}, [kind, bc](Node& self) {
    const auto& g = self.grad;
    const auto& x = self.parents[0]->value;
    const auto& y = self.parents[1]->value;
    auto* ga = grad_target(self, 0);
    auto* gb = grad_target(self, 1);
    for_each_broadcast(bc, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      switch (kind) {
        case BinOp::Add:
          if (ga) (*ga)[ia] += g[o];
          if (gb) (*gb)[ib] += g[o];
          break;
        case BinOp::Sub:
          if (ga) (*ga)[ia] += g[o];
          if (gb) (*gb)[ib] -= g[o];
          break;
        case BinOp::Mul:
          if (ga) (*ga)[ia] += g[o] * y[ib];
          if (gb) (*gb)[ib] += g[o] * x[ia];
          break;
        case BinOp::Div:
          if (ga) (*ga)[ia] += g[o] / y[ib];
          if (gb) (*gb)[ib] -= g[o] * x[ia] / (y[ib] * y[ib]);
          break;
      }
    });
  });
}

// Pointwise op with derivative expressed through input x and output y.
template <class F, class DF>
Tensor unary(const char* name, const Tensor& x, F f, DF df) {
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return make_result(name, x.shape(), std::move(out), {x}, [df](Node& self) {
    auto* gx = grad_target(self, 0);
    if (!gx) return;
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      (*gx)[i] += self.grad[i] * df(xv[i], self.value[i]);
    }
  });
}

// Splits a shape around `axis` into (outer, length, inner) for strided loops.
struct AxisView {
  std::size_t outer = 1, length = 1, inner = 1;
};

AxisView axis_view(const Shape& s, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.length = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

void check_axis(const char* op, const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for shape " + to_string(x.shape()));
  }
}

}  // namespace

// ------------------------------------------------------------------ arithmetic

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", BinOp::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", BinOp::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", BinOp::Mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary("div", BinOp::Div, a, b); }

Tensor scale(const Tensor& x, double factor) {
  return unary("scale", x, [factor](double v) { return v * factor; },
               [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& x, double offset) {
  return unary("add_scalar", x, [offset](double v) { return v + offset; },
               [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

// ------------------------------------------------------------- nonlinearities

Tensor relu(const Tensor& x) {
  return unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& x) {
  return unary("tanh", x, [](double v) { return std::tanh(v); },
               [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x,
               [](double v) {
                 if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
                 const double e = std::exp(v);
                 return e / (1.0 + e);
               },
               [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& x) {
  return unary("softplus", x,
               [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
               [](double v, double) {
                 if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
                 const double e = std::exp(v);
                 return e / (1.0 + e);
               });
}

Tensor exp(const Tensor& x) {
  return unary("exp", x, [](double v) { return std::exp(v); },
               [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary("log", x, [](double v) { return std::log(v); },
               [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary("sqrt", x, [](double v) { return std::sqrt(v); },
               [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& x) {
  return unary("square", x, [](double v) { return v * v; },
               [](double v, double) { return 2.0 * v; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary("clamp", x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
               [lo, hi](double v, double) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

// ------------------------------------------------------------------ reductions

Tensor sum(const Tensor& x) {
  const auto& v = x.values();
  double s = std::accumulate(v.begin(), v.end(), 0.0);
  return make_result("sum", {1}, {s}, {x}, [](Node& self) {
    if (auto* gx = grad_target(self, 0)) {
      for (auto& g : *gx) g += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_axis(const Tensor& x, std::size_t axis) {
  check_axis("sum_axis", x, axis);
  AxisView v = axis_view(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape = {1};
  std::vector<double> out(v.outer * v.inner, 0.0);
  const auto& xv = x.values();
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t l = 0; l < v.length; ++l)
      for (std::size_t i = 0; i < v.inner; ++i)
        out[o * v.inner + i] += xv[(o * v.length + l) * v.inner + i];
  return make_result("sum_axis", out_shape, std::move(out), {x}, [v](Node& self) {
    auto* gx = grad_target(self, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t l = 0; l < v.length; ++l)
        for (std::size_t i = 0; i < v.inner; ++i)
          (*gx)[(o * v.length + l) * v.inner + i] += self.grad[o * v.inner + i];
  });
}

Tensor mean_axis(const Tensor& x, std::size_t axis) {
  check_axis("mean_axis", x, axis);
  return scale(sum_axis(x, axis), 1.0 / static_cast<double>(x.dim(axis)));
}

Tensor mse(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail("mse", a.shape(), b.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  const double n = static_cast<double>(av.size());
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
  return make_result("mse", {1}, {s / n}, {a, b}, [n](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    const double g = self.grad[0] * 2.0 / n;
    auto* ga = grad_target(self, 0);
    auto* gb = grad_target(self, 1);
    for (std::size_t i = 0; i < av.size(); ++i) {
      const double d = g * (av[i] - bv[i]);
      if (ga) (*ga)[i] += d;
      if (gb) (*gb)[i] -= d;
    }
  });
}

// ------------------------------------------------------------------- structure

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) shape_fail("reshape", x.shape(), shape);
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_result("reshape", std::move(shape), std::move(out), {x}, [](Node& self) {
    if (auto* gx = grad_target(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i];
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  check_axis("concat", parts[0], axis);
  Shape out_shape = parts[0].shape();
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != out_shape.size()) shape_fail("concat", parts[0].shape(), p.shape());
    for (std::size_t d = 0; d < p.rank(); ++d) {
      if (d != axis && p.dim(d) != parts[0].dim(d)) shape_fail("concat", parts[0].shape(), p.shape());
    }
    out_shape[axis] += p.dim(axis);
  }
  AxisView ov = axis_view(out_shape, axis);
  std::vector<double> out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t len = p.dim(axis);
    const auto& pv = p.values();
    for (std::size_t o = 0; o < ov.outer; ++o) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * len * ov.inner), len * ov.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * ov.length + off) * ov.inner));
    }
    off += len;
  }
  return make_result("concat", out_shape, std::move(out), parts, [ov, offsets](Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto* gp = grad_target(self, k);
      if (!gp) continue;
      const std::size_t len = gp->size() / (ov.outer * ov.inner);
      for (std::size_t o = 0; o < ov.outer; ++o) {
        const double* src = self.grad.data() + (o * ov.length + offsets[k]) * ov.inner;
        double* dst = gp->data() + o * len * ov.inner;
        for (std::size_t i = 0; i < len * ov.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  check_axis("slice", x, axis);
  if (start + length > x.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + length) + ") exceeds axis " + std::to_string(axis) +
                     " of shape " + to_string(x.shape()));
  }
  AxisView v = axis_view(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<double> out(v.outer * length * v.inner);
  const auto& xv = x.values();
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * v.length + start) * v.inner),
                length * v.inner, out.begin() + static_cast<std::ptrdiff_t>(o * length * v.inner));
  }
  return make_result("slice", out_shape, std::move(out), {x}, [v, start, length](Node& self) {
    auto* gx = grad_target(self, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < v.outer; ++o) {
      const double* src = self.grad.data() + o * length * v.inner;
      double* dst = gx->data() + (o * v.length + start) * v.inner;
      for (std::size_t i = 0; i < length * v.inner; ++i) dst[i] += src[i];
    }
  });
}

Tensor flip(const Tensor& x, std::size_t axis) {
  check_axis("flip", x, axis);
  AxisView v = axis_view(x.shape(), axis);
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  auto src_index = [v](std::size_t o, std::size_t l, std::size_t i) {
    return (o * v.length + (v.length - 1 - l)) * v.inner + i;
  };
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t l = 0; l < v.length; ++l)
      for (std::size_t i = 0; i < v.inner; ++i)
        out[(o * v.length + l) * v.inner + i] = xv[src_index(o, l, i)];
  return make_result("flip", x.shape(), std::move(out), {x}, [v, src_index](Node& self) {
    auto* gx = grad_target(self, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t l = 0; l < v.length; ++l)
        for (std::size_t i = 0; i < v.inner; ++i)
          (*gx)[src_index(o, l, i)] += self.grad[(o * v.length + l) * v.inner + i];
  });
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  if (x.rank() == 0) throw ShapeError("gather_rows: scalar input");
  const std::size_t n = x.dim(0);
  const std::size_t row = x.numel() / std::max<std::size_t>(n, 1);
  Shape out_shape = x.shape();
  out_shape[0] = rows.size();
  std::vector<double> out(rows.size() * row);
  const auto& xv = x.values();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= n) {
      throw ShapeError("gather_rows: index " + std::to_string(rows[r]) + " out of range for " +
                       to_string(x.shape()));
    }
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(rows[r] * row), row,
                out.begin() + static_cast<std::ptrdiff_t>(r * row));
  }
  return make_result("gather_rows", out_shape, std::move(out), {x}, [rows, row](Node& self) {
    auto* gx = grad_target(self, 0);
    if (!gx) return;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const double* src = self.grad.data() + r * row;
      double* dst = gx->data() + rows[r] * row;
      for (std::size_t i = 0; i < row; ++i) dst[i] += src[i];
    }
  });
}

// ---------------------------------------------------------------- dense layers

Tensor matmul(const Tensor& x, const Tensor& w) {
  if (w.rank() != 2 || x.rank() == 0 || x.shape().back() != w.dim(0)) {
    shape_fail("matmul", x.shape(), w.shape());
  }
  const std::size_t k = w.dim(0), n = w.dim(1);
  const std::size_t m = x.numel() / k;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  std::vector<double> out(m * n);
  MatMap(out.data(), m, n).noalias() =
      ConstMatMap(x.values().data(), m, k) * ConstMatMap(w.values().data(), k, n);
  return make_result("matmul", out_shape, std::move(out), {x, w}, [m, k, n](Node& self) {
    ConstMatMap g(self.grad.data(), m, n);
    if (auto* gx = grad_target(self, 0)) {
      MatMap(gx->data(), m, k).noalias() +=
          g * ConstMatMap(self.parents[1]->value.data(), k, n).transpose();
    }
    if (auto* gw = grad_target(self, 1)) {
      MatMap(gw->data(), k, n).noalias() +=
          ConstMatMap(self.parents[0]->value.data(), m, k).transpose() * g;
    }
  });
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  if (!b.defined()) return y;
  if (b.rank() != 1 || b.dim(0) != w.dim(1)) shape_fail("affine", w.shape(), b.shape(), "bias mismatch");
  return add(y, b);
}

std::size_t conv1d_output_length(std::size_t length, std::size_t kernel, ConvOptions opt) {
  if (opt.padding == Padding::Same) return (length + opt.stride - 1) / opt.stride;
  const std::size_t span = opt.dilation * (kernel - 1) + 1;
  if (length < span) return 0;
  return (length - span) / opt.stride + 1;
}

namespace {

struct ConvGeometry {
  std::size_t batch, t_in, t_out, c_in, c_out, kernel;
  std::ptrdiff_t pad;
  ConvOptions opt;

  // Input time index for output step t and tap k, or -1 when it falls in padding.
  std::ptrdiff_t input_index(std::size_t t, std::size_t k) const {
    const std::ptrdiff_t i = static_cast<std::ptrdiff_t>(t * opt.stride + k * opt.dilation) - pad;
    return (i < 0 || i >= static_cast<std::ptrdiff_t>(t_in)) ? -1 : i;
  }
};

void check_conv_args(const char* op, const Tensor& x, const Tensor& w, const Tensor& b,
                     ConvOptions opt) {
  if (x.rank() != 3 || w.rank() != 3 || x.dim(2) != w.dim(1)) shape_fail(op, x.shape(), w.shape());
  if (opt.dilation < 1 || opt.stride < 1) {
    throw ShapeError(std::string(op) + ": stride and dilation must be >= 1");
  }
  if (b.defined() && (b.rank() != 1 || b.dim(0) != w.dim(2))) {
    shape_fail(op, w.shape(), b.shape(), "bias mismatch");
  }
}

}  // namespace

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, ConvOptions opt) {
  check_conv_args("conv1d", x, w, b, opt);
  ConvGeometry geo{x.dim(0), x.dim(1), 0, x.dim(2), w.dim(2), w.dim(0), 0, opt};
  geo.t_out = conv1d_output_length(geo.t_in, geo.kernel, opt);
  if (geo.t_out == 0) shape_fail("conv1d", x.shape(), w.shape(), "sequence shorter than kernel span");
  geo.pad = opt.padding == Padding::Same
                ? static_cast<std::ptrdiff_t>(opt.dilation * (geo.kernel - 1) / 2)
                : 0;
  const std::size_t rows = geo.batch * geo.t_out;
  const std::size_t kc = geo.kernel * geo.c_in;
  // im2col: each output step gathers its receptive field into one row.
  auto cols = std::make_shared<std::vector<double>>(rows * kc, 0.0);
  const auto& xv = x.values();
  for (std::size_t bi = 0; bi < geo.batch; ++bi)
    for (std::size_t t = 0; t < geo.t_out; ++t)
      for (std::size_t k = 0; k < geo.kernel; ++k) {
        const auto i = geo.input_index(t, k);
        if (i < 0) continue;
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((bi * geo.t_in + i) * geo.c_in), geo.c_in,
                    cols->begin() + static_cast<std::ptrdiff_t>((bi * geo.t_out + t) * kc + k * geo.c_in));
      }
  std::vector<double> out(rows * geo.c_out);
  MatMap y(out.data(), rows, geo.c_out);
  y.noalias() = ConstMatMap(cols->data(), rows, kc) * ConstMatMap(w.values().data(), kc, geo.c_out);
  if (b.defined()) y.rowwise() += ConstVecMap(b.values().data(), geo.c_out).transpose();
  std::vector<Tensor> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return make_result("conv1d", {geo.batch, geo.t_out, geo.c_out}, std::move(out), parents,
                     [geo, cols, rows, kc](Node& self) {
                       ConstMatMap g(self.grad.data(), rows, geo.c_out);
                       if (auto* gw = grad_target(self, 1)) {
                         MatMap(gw->data(), kc, geo.c_out).noalias() +=
                             ConstMatMap(cols->data(), rows, kc).transpose() * g;
                       }
                       if (self.parents.size() > 2) {
                         if (auto* gb = grad_target(self, 2)) {
                           VecMap(gb->data(), geo.c_out) += g.colwise().sum().transpose();
                         }
                       }
                       if (auto* gx = grad_target(self, 0)) {
                         RowMat dcols =
                             g * ConstMatMap(self.parents[1]->value.data(), kc, geo.c_out).transpose();
                         for (std::size_t bi = 0; bi < geo.batch; ++bi)
                           for (std::size_t t = 0; t < geo.t_out; ++t)
                             for (std::size_t k = 0; k < geo.kernel; ++k) {
                               const auto i = geo.input_index(t, k);
                               if (i < 0) continue;
                               const double* src = dcols.data() + (bi * geo.t_out + t) * kc + k * geo.c_in;
                               double* dst = gx->data() + (bi * geo.t_in + i) * geo.c_in;
                               for (std::size_t c = 0; c < geo.c_in; ++c) dst[c] += src[c];
                             }
                       }
                     });
}

Tensor conv_transpose1d(const Tensor& x, const Tensor& w, const Tensor& b, ConvOptions opt) {
  check_conv_args("conv_transpose1d", x, w, b, opt);
  ConvGeometry geo{x.dim(0), x.dim(1), 0, x.dim(2), w.dim(2), w.dim(0), 0, opt};
  geo.pad = opt.padding == Padding::Same
                ? static_cast<std::ptrdiff_t>(opt.dilation * (geo.kernel - 1) / 2)
                : 0;
  geo.t_out = opt.padding == Padding::Same
                  ? geo.t_in * opt.stride
                  : (geo.t_in - 1) * opt.stride + opt.dilation * (geo.kernel - 1) + 1;
  // Output position receiving input step t through tap k, or -1 when trimmed.
  auto out_index = [geo](std::size_t t, std::size_t k) -> std::ptrdiff_t {
    const std::ptrdiff_t o = static_cast<std::ptrdiff_t>(t * geo.opt.stride + k * geo.opt.dilation) - geo.pad;
    return (o < 0 || o >= static_cast<std::ptrdiff_t>(geo.t_out)) ? -1 : o;
  };
  const std::size_t rows = geo.batch * geo.t_in;
  const std::size_t kc = geo.kernel * geo.c_out;
  // Reorder w[k][ci][co] into wt[ci][k * Cout + co] so one GEMM yields all taps.
  auto wt = std::make_shared<RowMat>(geo.c_in, kc);
  const auto& wv = w.values();
  for (std::size_t k = 0; k < geo.kernel; ++k)
    for (std::size_t ci = 0; ci < geo.c_in; ++ci)
      for (std::size_t co = 0; co < geo.c_out; ++co)
        (*wt)(ci, k * geo.c_out + co) = wv[(k * geo.c_in + ci) * geo.c_out + co];
  RowMat taps = ConstMatMap(x.values().data(), rows, geo.c_in) * (*wt);
  std::vector<double> out(geo.batch * geo.t_out * geo.c_out, 0.0);
  for (std::size_t bi = 0; bi < geo.batch; ++bi)
    for (std::size_t t = 0; t < geo.t_in; ++t)
      for (std::size_t k = 0; k < geo.kernel; ++k) {
        const auto o = out_index(t, k);
        if (o < 0) continue;
        const double* src = taps.data() + (bi * geo.t_in + t) * kc + k * geo.c_out;
        double* dst = out.data() + (bi * geo.t_out + o) * geo.c_out;
        for (std::size_t c = 0; c < geo.c_out; ++c) dst[c] += src[c];
      }
  if (b.defined()) {
    MatMap(out.data(), geo.batch * geo.t_out, geo.c_out).rowwise() +=
        ConstVecMap(b.values().data(), geo.c_out).transpose();
  }
  std::vector<Tensor> parents{x, w};
  if (b.defined()) parents.push_back(b);
  return make_result(
      "conv_transpose1d", {geo.batch, geo.t_out, geo.c_out}, std::move(out), parents,
      [geo, wt, rows, kc, out_index](Node& self) {
        // Gather output gradients back to the tap layout.
        RowMat dtaps = RowMat::Zero(rows, kc);
        for (std::size_t bi = 0; bi < geo.batch; ++bi)
          for (std::size_t t = 0; t < geo.t_in; ++t)
            for (std::size_t k = 0; k < geo.kernel; ++k) {
              const auto o = out_index(t, k);
              if (o < 0) continue;
              const double* src = self.grad.data() + (bi * geo.t_out + o) * geo.c_out;
              double* dst = dtaps.data() + (bi * geo.t_in + t) * kc + k * geo.c_out;
              for (std::size_t c = 0; c < geo.c_out; ++c) dst[c] = src[c];
            }
        if (auto* gx = grad_target(self, 0)) {
          MatMap(gx->data(), rows, geo.c_in).noalias() += dtaps * wt->transpose();
        }
        if (auto* gw = grad_target(self, 1)) {
          RowMat dwt = ConstMatMap(self.parents[0]->value.data(), rows, geo.c_in).transpose() * dtaps;
          for (std::size_t k = 0; k < geo.kernel; ++k)
            for (std::size_t ci = 0; ci < geo.c_in; ++ci)
              for (std::size_t co = 0; co < geo.c_out; ++co)
                (*gw)[(k * geo.c_in + ci) * geo.c_out + co] += dwt(ci, k * geo.c_out + co);
        }
        if (self.parents.size() > 2) {
          if (auto* gb = grad_target(self, 2)) {
            VecMap(gb->data(), geo.c_out) +=
                ConstMatMap(self.grad.data(), geo.batch * geo.t_out, geo.c_out).colwise().sum().transpose();
          }
        }
      });
}

// --------------------------------------------------------------- normalization

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t c = x.shape().back();
  if (gamma.numel() != c || beta.numel() != c) shape_fail("layer_norm", x.shape(), gamma.shape());
  const std::size_t rows = x.numel() / c;
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * c;
    double mu = 0.0;
    for (std::size_t i = 0; i < c; ++i) mu += row[i];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t i = 0; i < c; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t i = 0; i < c; ++i) {
      const double h = (row[i] - mu) * is;
      (*xhat)[r * c + i] = h;
      out[r * c + i] = gv[i] * h + bv[i];
    }
  }
  return make_result("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                     [rows, c, xhat, inv_std](Node& self) {
                       const auto& g = self.grad;
                       const auto& gv = self.parents[1]->value;
                       auto* gx = grad_target(self, 0);
                       auto* gg = grad_target(self, 1);
                       auto* gb = grad_target(self, 2);
                       std::vector<double> dh(c);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double m1 = 0.0, m2 = 0.0;
                         for (std::size_t i = 0; i < c; ++i) {
                           const std::size_t j = r * c + i;
                           if (gg) (*gg)[i] += g[j] * (*xhat)[j];
                           if (gb) (*gb)[i] += g[j];
                           dh[i] = g[j] * gv[i];
                           m1 += dh[i];
                           m2 += dh[i] * (*xhat)[j];
                         }
                         if (!gx) continue;
                         m1 /= static_cast<double>(c);
                         m2 /= static_cast<double>(c);
                         for (std::size_t i = 0; i < c; ++i) {
                           const std::size_t j = r * c + i;
                           (*gx)[j] += (*inv_std)[r] * (dh[i] - m1 - (*xhat)[j] * m2);
                         }
                       }
                     });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormStats& stats,
                  bool training, double eps) {
  if (x.rank() == 0) throw ShapeError("batch_norm: scalar input");
  const std::size_t c = x.shape().back();
  if (gamma.numel() != c || beta.numel() != c) shape_fail("batch_norm", x.shape(), gamma.shape());
  const std::size_t rows = x.numel() / c;
  const auto& xv = x.values();
  std::vector<double> mu(c, 0.0), var(c, 0.0);
  if (training) {
    if (rows < 2) throw ShapeError("batch_norm: training mode needs at least 2 rows per channel");
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t i = 0; i < c; ++i) mu[i] += xv[r * c + i];
    for (auto& m : mu) m /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t i = 0; i < c; ++i) {
        const double d = xv[r * c + i] - mu[i];
        var[i] += d * d;
      }
    auto rm = stats.running_mean.mutable_values();
    auto rv = stats.running_var.mutable_values();
    for (std::size_t i = 0; i < c; ++i) {
      const double unbiased = var[i] / static_cast<double>(rows - 1);
      var[i] /= static_cast<double>(rows);
      rm[i] = stats.momentum * rm[i] + (1.0 - stats.momentum) * mu[i];
      rv[i] = stats.momentum * rv[i] + (1.0 - stats.momentum) * unbiased;
    }
  } else {
    std::copy(stats.running_mean.values().begin(), stats.running_mean.values().end(), mu.begin());
    std::copy(stats.running_var.values().begin(), stats.running_var.values().end(), var.begin());
  }
  auto inv_std = std::make_shared<std::vector<double>>(c);
  for (std::size_t i = 0; i < c; ++i) (*inv_std)[i] = 1.0 / std::sqrt(var[i] + eps);
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  std::vector<double> out(x.numel());
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < c; ++i) {
      const std::size_t j = r * c + i;
      (*xhat)[j] = (xv[j] - mu[i]) * (*inv_std)[i];
      out[j] = gv[i] * (*xhat)[j] + bv[i];
    }
  return make_result("batch_norm", x.shape(), std::move(out), {x, gamma, beta},
                     [rows, c, xhat, inv_std, training](Node& self) {
                       const auto& g = self.grad;
                       const auto& gv = self.parents[1]->value;
                       auto* gx = grad_target(self, 0);
                       auto* gg = grad_target(self, 1);
                       auto* gb = grad_target(self, 2);
                       std::vector<double> m1(c, 0.0), m2(c, 0.0);
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t i = 0; i < c; ++i) {
                           const std::size_t j = r * c + i;
                           if (gg) (*gg)[i] += g[j] * (*xhat)[j];
                           if (gb) (*gb)[i] += g[j];
                           const double dh = g[j] * gv[i];
                           m1[i] += dh;
                           m2[i] += dh * (*xhat)[j];
                         }
                       if (!gx) return;
                       for (std::size_t i = 0; i < c; ++i) {
                         m1[i] /= static_cast<double>(rows);
                         m2[i] /= static_cast<double>(rows);
                       }
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t i = 0; i < c; ++i) {
                           const std::size_t j = r * c + i;
                           const double dh = g[j] * gv[i];
                           (*gx)[j] += training ? (*inv_std)[i] * (dh - m1[i] - (*xhat)[j] * m2[i])
                                                : (*inv_std)[i] * dh;
                         }
                     });
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0, 1)");
  if (!training || p == 0.0) return x;
  auto mask = std::make_shared<std::vector<double>>(x.numel());
  const double keep = 1.0 / (1.0 - p);
  for (auto& m : *mask) m = rng.uniform() < p ? 0.0 : keep;
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * (*mask)[i];
  return make_result("dropout", x.shape(), std::move(out), {x}, [mask](Node& self) {
    if (auto* gx = grad_target(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i] * (*mask)[i];
    }
  });
}

}  // namespace talkrf
