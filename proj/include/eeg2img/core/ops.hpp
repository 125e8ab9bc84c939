#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "eeg2img/core/error.hpp"
#include "eeg2img/core/rng.hpp"
#include "eeg2img/core/tensor.hpp"

namespace eeg2img {

namespace detail {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

inline Tensor make_result(Shape shape, std::vector<double> value, std::initializer_list<const Tensor*> inputs,
                          std::function<void(Node&)> backward) {
  auto node = make_node(std::move(shape), std::move(value));
  node->leaf = false;
  for (const Tensor* in : inputs) {
    if (in->requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    for (const Tensor* in : inputs) {
      if (in->defined()) node->parents.push_back(in->node());
    }
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

/// Elementwise map with a derivative expressed in terms of (input, output).
template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df) {
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  auto xn = x.node();
  return make_result(x.shape(), std::move(out), {&x}, [xn, df](Node& self) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      xn->grad[i] += self.grad[i] * df(xn->value[i], self.value[i]);
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, [an, bn](detail::Node& self) {
    for (auto* p : {an.get(), bn.get()}) {
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, [an, bn](detail::Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, [an, bn](detail::Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->value[i];
    }
  });
}

/// scale * x + shift
inline Tensor affine(const Tensor& x, double scale, double shift) {
  return detail::unary(
      x, [=](double v) { return scale * v + shift; }, [=](double, double) { return scale; });
}

inline Tensor scale(const Tensor& x, double s) { return affine(x, s, 0.0); }

/// x + b where b's shape equals the trailing extents of x (bias, positional table).
inline Tensor add_trailing(const Tensor& x, const Tensor& b) {
  const Shape& xs = x.shape();
  const Shape& bs = b.shape();
  if (bs.size() > xs.size() || !std::equal(bs.rbegin(), bs.rend(), xs.rbegin())) {
    throw ShapeError("add_trailing: " + shape_str(bs) + " is not a suffix of " + shape_str(xs));
  }
  const std::size_t inner = b.numel();
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] + b.data()[i % inner];
  auto xn = x.node(), bn = b.node();
  return detail::make_result(xs, std::move(out), {&x, &b}, [xn, bn, inner](detail::Node& self) {
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i % inner] += self.grad[i];
    }
  });
}

/// x[B,C,...] + b[C] broadcast along axis 1.
inline Tensor add_channel(const Tensor& x, const Tensor& b) {
  if (x.rank() < 2 || b.rank() != 1 || b.dim(0) != x.dim(1)) {
    throw ShapeError("add_channel: bias " + shape_str(b.shape()) + " does not match channels of " +
                     shape_str(x.shape()));
  }
  const std::size_t channels = x.dim(1);
  const std::size_t planes = x.dim(0) * channels;
  const std::size_t spatial = x.numel() / planes;
  std::vector<double> out(x.numel());
  const double* in = x.data().data();
  const double* bias = b.data().data();
  for (std::size_t p = 0; p < planes; ++p) {
    const double bv = bias[p % channels];
    for (std::size_t k = 0; k < spatial; ++k) out[p * spatial + k] = in[p * spatial + k] + bv;
  }
  auto xn = x.node(), bn = b.node();
  return detail::make_result(x.shape(), std::move(out), {&x, &b}, [xn, bn, channels, planes, spatial](detail::Node& self) {
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t p = 0; p < planes; ++p) {
        double acc = 0.0;
        for (std::size_t k = 0; k < spatial; ++k) acc += self.grad[p * spatial + k];
        bn->grad[p % channels] += acc;
      }
    }
  });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto xn = x.node();
  return detail::make_result({1}, {s}, {&x}, [xn](detail::Node& self) {
    xn->ensure_grad();
    for (double& g : xn->grad) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

/// log(max(x, floor)); gradient is zero where the floor is active.
inline Tensor log_floor(const Tensor& x, double floor = 1e-12) {
  return detail::unary(
      x, [=](double v) { return std::log(std::max(v, floor)); },
      [=](double v, double) { return v > floor ? 1.0 / v : 0.0; });
}

/// mean |a - b| over every element.
inline Tensor mean_abs_diff(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mean_abs_diff");
  const double inv_n = 1.0 / static_cast<double>(a.numel());
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += std::abs(a.data()[i] - b.data()[i]);
  auto an = a.node(), bn = b.node();
  return detail::make_result({1}, {s * inv_n}, {&a, &b}, [an, bn, inv_n](detail::Node& self) {
    const double g = self.grad[0] * inv_n;
    for (std::size_t i = 0; i < an->value.size(); ++i) {
      const double d = an->value[i] - bn->value[i];
      const double sgn = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
      if (an->requires_grad) {
        an->ensure_grad();
        an->grad[i] += g * sgn;
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        bn->grad[i] -= g * sgn;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Activations

enum class Activation { Relu, LeakyRelu, Elu, Tanh, Sigmoid };

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor leaky_relu(const Tensor& x, double alpha = 0.2) {
  return detail::unary(
      x, [=](double v) { return v > 0.0 ? v : alpha * v; }, [=](double v, double) { return v > 0.0 ? 1.0 : alpha; });
}

inline Tensor elu(const Tensor& x, double alpha = 1.0) {
  return detail::unary(
      x, [=](double v) { return v > 0.0 ? v : alpha * std::expm1(v); },
      [=](double v, double y) { return v > 0.0 ? 1.0 : y + alpha; });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      x,
      [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Tensor activate(const Tensor& x, Activation kind, double alpha = 0.2) {
  switch (kind) {
    case Activation::Relu: return relu(x);
    case Activation::LeakyRelu: return leaky_relu(x, alpha);
    case Activation::Elu: return elu(x);
    case Activation::Tanh: return tanh(x);
    case Activation::Sigmoid: return sigmoid(x);
  }
  throw ValueError("unknown activation");
}

// ---------------------------------------------------------------------------
// Layout

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto xn = x.node();
  return detail::make_result(std::move(shape), x.to_vector(), {&x}, [xn](detail::Node& self) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
  });
}

/// Axis permutation: out.shape[i] = x.shape[axes[i]].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.rank();
  if (axes.size() != r) throw ShapeError("permute: axis count does not match rank of " + shape_str(x.shape()));
  std::vector<bool> used(r, false);
  for (std::size_t a : axes) {
    if (a >= r || used[a]) throw ShapeError("permute: axes are not a permutation");
    used[a] = true;
  }
  Shape out_shape(r);
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * x.dim(i);
  std::vector<std::size_t> src_strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = x.dim(axes[i]);
    src_strides[i] = in_strides[axes[i]];
  }
  // map[out_flat] = in_flat
  std::vector<std::size_t> map(x.numel());
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < map.size(); ++o) {
    map[o] = src;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      src += src_strides[d];
      if (idx[d] < out_shape[d]) break;
      src -= src_strides[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = x.data()[map[o]];
  auto xn = x.node();
  return detail::make_result(std::move(out_shape), std::move(out), {&x}, [xn, map = std::move(map)](detail::Node& self) {
    xn->ensure_grad();
    for (std::size_t o = 0; o < map.size(); ++o) xn->grad[map[o]] += self.grad[o];
  });
}

// ---------------------------------------------------------------------------
// Products

/// Standard matrix product a[m,k] x b[k,n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  const auto em = static_cast<Eigen::Index>(m), ek = static_cast<Eigen::Index>(k), en = static_cast<Eigen::Index>(n);
  detail::MapRM(out.data(), em, en).noalias() =
      detail::CMapRM(a.data().data(), em, ek) * detail::CMapRM(b.data().data(), ek, en);
  auto an = a.node(), bn = b.node();
  return detail::make_result({m, n}, std::move(out), {&a, &b}, [an, bn, em, ek, en](detail::Node& self) {
    detail::CMapRM g(self.grad.data(), em, en);
    if (an->requires_grad) {
      an->ensure_grad();
      detail::MapRM(an->grad.data(), em, ek).noalias() += g * detail::CMapRM(bn->value.data(), ek, en).transpose();
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      detail::MapRM(bn->grad.data(), ek, en).noalias() += detail::CMapRM(an->value.data(), em, ek).transpose() * g;
    }
  });
}

/// Batched product over the leading axis: a[N,m,k] x b[N,k,n], or
/// a[N,m,k] x b[N,n,k]^T when transpose_b is set.
inline Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(transpose_b ? 2 : 1)) {
    throw ShapeError("bmm: dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                     (transpose_b ? "^T" : ""));
  }
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = transpose_b ? b.dim(1) : b.dim(2);
  const auto em = static_cast<Eigen::Index>(m), ek = static_cast<Eigen::Index>(k), en = static_cast<Eigen::Index>(n);
  std::vector<double> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    detail::CMapRM A(a.data().data() + i * m * k, em, ek);
    detail::MapRM C(out.data() + i * m * n, em, en);
    if (transpose_b) {
      C.noalias() = A * detail::CMapRM(b.data().data() + i * n * k, en, ek).transpose();
    } else {
      C.noalias() = A * detail::CMapRM(b.data().data() + i * k * n, ek, en);
    }
  }
  auto an = a.node(), bn = b.node();
  return detail::make_result(
      {batch, m, n}, std::move(out), {&a, &b}, [an, bn, batch, em, ek, en, transpose_b](detail::Node& self) {
        const std::size_t mk = static_cast<std::size_t>(em * ek), kn = static_cast<std::size_t>(ek * en),
                          mn = static_cast<std::size_t>(em * en);
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (std::size_t i = 0; i < batch; ++i) {
          detail::CMapRM G(self.grad.data() + i * mn, em, en);
          detail::CMapRM A(an->value.data() + i * mk, em, ek);
          if (transpose_b) {
            detail::CMapRM B(bn->value.data() + i * kn, en, ek);
            if (an->requires_grad) detail::MapRM(an->grad.data() + i * mk, em, ek).noalias() += G * B;
            if (bn->requires_grad) detail::MapRM(bn->grad.data() + i * kn, en, ek).noalias() += G.transpose() * A;
          } else {
            detail::CMapRM B(bn->value.data() + i * kn, ek, en);
            if (an->requires_grad) detail::MapRM(an->grad.data() + i * mk, em, ek).noalias() += G * B.transpose();
            if (bn->requires_grad) detail::MapRM(bn->grad.data() + i * kn, ek, en).noalias() += A.transpose() * G;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Convolution and resampling

enum class Padding { Valid, Same };

struct Stride {
  std::size_t h = 1;
  std::size_t w = 1;
};

struct ConvGeometry {
  std::size_t batch, in_channels, height, width;
  std::size_t out_channels, kh, kw;
  std::size_t stride_h, stride_w, pad_h, pad_w;
  std::size_t out_h, out_w;
};

inline ConvGeometry conv_geometry(const Shape& input, const Shape& kernels, Stride stride, Padding padding) {
  if (input.size() != 4 || kernels.size() != 4 || input[1] != kernels[1]) {
    throw ShapeError("conv2d: input " + shape_str(input) + " incompatible with kernels " + shape_str(kernels));
  }
  if (stride.h == 0 || stride.w == 0) throw ValueError("conv2d: stride must be positive");
  ConvGeometry g{};
  g.batch = input[0];
  g.in_channels = input[1];
  g.height = input[2];
  g.width = input[3];
  g.out_channels = kernels[0];
  g.kh = kernels[2];
  g.kw = kernels[3];
  g.stride_h = stride.h;
  g.stride_w = stride.w;
  if (padding == Padding::Same) {
    if (g.kh % 2 == 0 || g.kw % 2 == 0) {
      throw ValueError("conv2d: 'same' padding requires odd kernel extents, got " + shape_str(kernels));
    }
    g.pad_h = (g.kh - 1) / 2;
    g.pad_w = (g.kw - 1) / 2;
  }
  if (g.height + 2 * g.pad_h < g.kh || g.width + 2 * g.pad_w < g.kw) {
    throw ShapeError("conv2d: kernel " + shape_str(kernels) + " larger than padded input " + shape_str(input));
  }
  g.out_h = (g.height + 2 * g.pad_h - g.kh) / g.stride_h + 1;
  g.out_w = (g.width + 2 * g.pad_w - g.kw) / g.stride_w + 1;
  return g;
}

namespace detail {

// cols[(c*kh + i)*kw + j][oy*out_w + ox] = x[c][oy*sh + i - ph][ox*sw + j - pw]
inline void im2col(const double* x, const ConvGeometry& g, double* cols) {
  const std::size_t hw = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    const double* xc = x + c * g.height * g.width;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        double* row = cols + ((c * g.kh + i) * g.kw + j) * hw;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride_h + i) - static_cast<std::ptrdiff_t>(g.pad_h);
          double* dst = row + oy * g.out_w;
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = xc + static_cast<std::size_t>(y) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t xx =
                static_cast<std::ptrdiff_t>(ox * g.stride_w + j) - static_cast<std::ptrdiff_t>(g.pad_w);
            dst[ox] = (xx < 0 || xx >= static_cast<std::ptrdiff_t>(g.width)) ? 0.0 : src[xx];
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* cols, const ConvGeometry& g, double* dx) {
  const std::size_t hw = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    double* dxc = dx + c * g.height * g.width;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const double* row = cols + ((c * g.kh + i) * g.kw + j) * hw;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride_h + i) - static_cast<std::ptrdiff_t>(g.pad_h);
          if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.height)) continue;
          double* dst = dxc + static_cast<std::size_t>(y) * g.width;
          const double* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t xx =
                static_cast<std::ptrdiff_t>(ox * g.stride_w + j) - static_cast<std::ptrdiff_t>(g.pad_w);
            if (xx >= 0 && xx < static_cast<std::ptrdiff_t>(g.width)) dst[xx] += src[ox];
          }
        }
      }
    }
  }
}

inline bool is_pointwise(const ConvGeometry& g) {
  return g.kh == 1 && g.kw == 1 && g.stride_h == 1 && g.stride_w == 1 && g.pad_h == 0 && g.pad_w == 0;
}

}  // namespace detail

/// 2-D cross-correlation of input[B,C_in,H,W] with kernels[C_out,C_in,kh,kw],
/// plus an optional per-channel bias[C_out] (pass an undefined tensor for none).
inline Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, Stride stride = {},
                     Padding padding = Padding::Valid) {
  const ConvGeometry g = conv_geometry(input.shape(), kernels.shape(), stride, padding);
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != g.out_channels)) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match " + std::to_string(g.out_channels) +
                     " output channels");
  }
  const std::size_t in_sz = g.in_channels * g.height * g.width;
  const std::size_t out_hw = g.out_h * g.out_w;
  const std::size_t patch = g.in_channels * g.kh * g.kw;
  const auto e_out = static_cast<Eigen::Index>(g.out_channels), e_patch = static_cast<Eigen::Index>(patch),
             e_hw = static_cast<Eigen::Index>(out_hw);
  const bool pointwise = detail::is_pointwise(g);

  std::vector<double> out(g.batch * g.out_channels * out_hw);
  std::vector<double> cols(pointwise ? 0 : patch * out_hw);
  detail::CMapRM W(kernels.data().data(), e_out, e_patch);
  for (std::size_t n = 0; n < g.batch; ++n) {
    const double* x = input.data().data() + n * in_sz;
    const double* c = x;
    if (!pointwise) {
      detail::im2col(x, g, cols.data());
      c = cols.data();
    }
    detail::MapRM Y(out.data() + n * g.out_channels * out_hw, e_out, e_hw);
    Y.noalias() = W * detail::CMapRM(c, e_patch, e_hw);
    if (has_bias) {
      Y.colwise() += Eigen::Map<const Eigen::VectorXd>(bias.data().data(), e_out);
    }
  }

  auto xn = input.node(), kn = kernels.node();
  auto bn = has_bias ? bias.node() : nullptr;
  const Tensor none;
  return detail::make_result(
      {g.batch, g.out_channels, g.out_h, g.out_w}, std::move(out), {&input, &kernels, has_bias ? &bias : &none},
      [xn, kn, bn, g, in_sz, out_hw, patch, e_out, e_patch, e_hw, pointwise](detail::Node& self) {
        std::vector<double> cols(pointwise || !kn->requires_grad ? 0 : patch * out_hw);
        std::vector<double> dcols(pointwise || !xn->requires_grad ? 0 : patch * out_hw);
        if (xn->requires_grad) xn->ensure_grad();
        if (kn->requires_grad) kn->ensure_grad();
        const bool bias_grad = bn && bn->requires_grad;
        if (bias_grad) bn->ensure_grad();
        detail::CMapRM W(kn->value.data(), e_out, e_patch);
        for (std::size_t n = 0; n < g.batch; ++n) {
          detail::CMapRM G(self.grad.data() + n * g.out_channels * out_hw, e_out, e_hw);
          if (bias_grad) {
            // Plain loop: Eigen's vectorised row sum peels by address alignment.
            const double* gp = self.grad.data() + n * g.out_channels * out_hw;
            for (std::size_t o = 0; o < g.out_channels; ++o) {
              double s = 0.0;
              for (std::size_t j = 0; j < out_hw; ++j) s += gp[o * out_hw + j];
              bn->grad[o] += s;
            }
          }
          if (kn->requires_grad) {
            const double* c = xn->value.data() + n * in_sz;
            if (!pointwise) {
              detail::im2col(c, g, cols.data());
              c = cols.data();
            }
            detail::MapRM(kn->grad.data(), e_out, e_patch).noalias() += G * detail::CMapRM(c, e_patch, e_hw).transpose();
          }
          if (xn->requires_grad) {
            if (pointwise) {
              detail::MapRM(xn->grad.data() + n * in_sz, e_patch, e_hw).noalias() += W.transpose() * G;
            } else {
              detail::MapRM(dcols.data(), e_patch, e_hw).noalias() = W.transpose() * G;
              detail::col2im_add(dcols.data(), g, xn->grad.data() + n * in_sz);
            }
          }
        }
      });
}

inline Tensor conv2d(const Tensor& input, const Tensor& kernels, Stride stride = {}, Padding padding = Padding::Valid) {
  return conv2d(input, kernels, Tensor{}, stride, padding);
}

/// Non-overlapping max pooling with a square window (floor on ragged edges).
inline Tensor maxpool2d(const Tensor& x, std::size_t window = 2) {
  if (x.rank() != 4) throw ShapeError("maxpool2d: expected [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / window, ow = w / window;
  if (oh == 0 || ow == 0) throw ShapeError("maxpool2d: window larger than input " + shape_str(x.shape()));
  std::vector<double> out(planes * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  const auto in = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = p * h * w + oy * window * w + ox * window;
        for (std::size_t i = 0; i < window; ++i) {
          for (std::size_t j = 0; j < window; ++j) {
            const std::size_t idx = p * h * w + (oy * window + i) * w + ox * window + j;
            if (in[idx] > in[best]) best = idx;
          }
        }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out[o] = in[best];
        argmax[o] = best;
      }
    }
  }
  auto xn = x.node();
  return detail::make_result({x.dim(0), x.dim(1), oh, ow}, std::move(out), {&x},
                             [xn, argmax = std::move(argmax)](detail::Node& self) {
                               xn->ensure_grad();
                               for (std::size_t o = 0; o < argmax.size(); ++o) xn->grad[argmax[o]] += self.grad[o];
                             });
}

/// Nearest-neighbour upsampling: every pixel becomes a factor x factor block.
inline Tensor upsample_nearest(const Tensor& x, std::size_t factor = 2) {
  if (x.rank() != 4) throw ShapeError("upsample_nearest: expected [B,C,H,W], got " + shape_str(x.shape()));
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h * factor, ow = w * factor;
  std::vector<double> out(planes * oh * ow);
  const auto in = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) out[(p * oh + y) * ow + xx] = in[(p * h + y / factor) * w + xx / factor];
    }
  }
  auto xn = x.node();
  return detail::make_result({x.dim(0), x.dim(1), oh, ow}, std::move(out), {&x},
                             [xn, planes, h, w, oh, ow, factor](detail::Node& self) {
                               xn->ensure_grad();
                               for (std::size_t p = 0; p < planes; ++p) {
                                 for (std::size_t y = 0; y < oh; ++y) {
                                   for (std::size_t xx = 0; xx < ow; ++xx) {
                                     xn->grad[(p * h + y / factor) * w + xx / factor] += self.grad[(p * oh + y) * ow + xx];
                                   }
                                 }
                               }
                             });
}

// ---------------------------------------------------------------------------
// Normalisation, probabilities, losses

/// Softmax over the last axis with max subtraction.
inline Tensor softmax(const Tensor& logits) {
  const std::size_t m = logits.shape().back();
  const std::size_t rows = logits.numel() / m;
  std::vector<double> out(logits.numel());
  const auto in = logits.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.data() + r * m;
    double* y = out.data() + r * m;
    const double mx = *std::max_element(x, x + m);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < m; ++j) y[j] /= z;
  }
  auto xn = logits.node();
  return detail::make_result(logits.shape(), std::move(out), {&logits}, [xn, rows, m](detail::Node& self) {
    xn->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * m;
      const double* g = self.grad.data() + r * m;
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < m; ++j) xn->grad[r * m + j] += y[j] * (g[j] - dot);
    }
  });
}

/// -(1/B) sum_i log max(probs[i, labels[i]], 1e-12)
inline Tensor cross_entropy(const Tensor& probs, std::span<const int> labels) {
  if (probs.rank() != 2 || probs.dim(0) != labels.size()) {
    throw ShapeError("cross_entropy: probs " + shape_str(probs.shape()) + " vs " + std::to_string(labels.size()) +
                     " labels");
  }
  constexpr double floor = 1e-12;
  const std::size_t batch = probs.dim(0), m = probs.dim(1);
  std::vector<std::size_t> picks(batch);
  double loss = 0.0;
  for (std::size_t i = 0; i < batch; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= m) {
      throw IndexError("cross_entropy: label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(m) + ")");
    }
    picks[i] = i * m + static_cast<std::size_t>(labels[i]);
    loss -= std::log(std::max(probs.data()[picks[i]], floor));
  }
  const double inv_b = 1.0 / static_cast<double>(batch);
  auto pn = probs.node();
  return detail::make_result({1}, {loss * inv_b}, {&probs}, [pn, picks = std::move(picks), inv_b](detail::Node& self) {
    pn->ensure_grad();
    for (std::size_t idx : picks) {
      const double p = pn->value[idx];
      if (p > floor) pn->grad[idx] -= self.grad[0] * inv_b / p;
    }
  });
}

enum class Mode { Train, Eval };

/// Running statistics owned by a batch-norm layer.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-channel normalisation of x[B,C,...]. Train mode uses batch statistics
/// and updates the running estimates; eval mode is a fixed affine map.
inline Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state, Mode mode) {
  if (x.rank() < 2) throw ShapeError("batchnorm: expected [B,C,...], got " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), channels = x.dim(1);
  const std::size_t spatial = x.numel() / (batch * channels);
  if (gamma.numel() != channels || beta.numel() != channels || state.running_mean.numel() != channels) {
    throw ShapeError("batchnorm: parameters do not match " + std::to_string(channels) + " channels");
  }
  if (mode == Mode::Train && batch < 2) {
    throw ValueError("batchnorm: degenerate batch of size 1 in train mode");
  }
  const double count = static_cast<double>(batch * spatial);
  std::vector<double> mu(channels), inv_std(channels);
  const auto in = x.data();
  if (mode == Mode::Train) {
    auto rm = state.running_mean.mutable_data();
    auto rv = state.running_var.mutable_data();
    for (std::size_t c = 0; c < channels; ++c) {
      double s = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* p = in.data() + (b * channels + c) * spatial;
        for (std::size_t k = 0; k < spatial; ++k) s += p[k];
      }
      const double m = s / count;
      double v = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const double* p = in.data() + (b * channels + c) * spatial;
        for (std::size_t k = 0; k < spatial; ++k) v += (p[k] - m) * (p[k] - m);
      }
      const double var = v / count;
      mu[c] = m;
      inv_std[c] = 1.0 / std::sqrt(var + state.eps);
      rm[c] = (1.0 - state.momentum) * rm[c] + state.momentum * m;
      rv[c] = (1.0 - state.momentum) * rv[c] + state.momentum * (v / (count - 1.0));
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mu[c] = state.running_mean.data()[c];
      inv_std[c] = 1.0 / std::sqrt(state.running_var.data()[c] + state.eps);
    }
  }
  std::vector<double> xhat(x.numel()), out(x.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t base = (b * channels + c) * spatial;
      for (std::size_t k = 0; k < spatial; ++k) {
        xhat[base + k] = (in[base + k] - mu[c]) * inv_std[c];
        out[base + k] = gamma.data()[c] * xhat[base + k] + beta.data()[c];
      }
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  const bool train = mode == Mode::Train;
  return detail::make_result(
      x.shape(), std::move(out), {&x, &gamma, &beta},
      [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), batch, channels, spatial, count,
       train](detail::Node& self) {
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        for (std::size_t c = 0; c < channels; ++c) {
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t base = (b * channels + c) * spatial;
            for (std::size_t k = 0; k < spatial; ++k) {
              sum_g += self.grad[base + k];
              sum_gx += self.grad[base + k] * xhat[base + k];
            }
          }
          if (gn->requires_grad) gn->grad[c] += sum_gx;
          if (bn->requires_grad) bn->grad[c] += sum_g;
          if (!xn->requires_grad) continue;
          const double gam = gn->value[c];
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t base = (b * channels + c) * spatial;
            for (std::size_t k = 0; k < spatial; ++k) {
              const double g = self.grad[base + k];
              xn->grad[base + k] += train ? gam * inv_std[c] * (g - sum_g / count - xhat[base + k] * sum_gx / count)
                                          : gam * inv_std[c] * g;
            }
          }
        }
      });
}

/// Normalisation over the last axis with learnable scale/shift.
inline Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) throw ShapeError("layernorm: parameter width mismatch");
  const std::size_t rows = x.numel() / d;
  std::vector<double> xhat(x.numel()), out(x.numel()), inv_std(rows);
  const auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = in.data() + r * d;
    double m = 0.0;
    for (std::size_t j = 0; j < d; ++j) m += p[j];
    m /= static_cast<double>(d);
    double v = 0.0;
    for (std::size_t j = 0; j < d; ++j) v += (p[j] - m) * (p[j] - m);
    inv_std[r] = 1.0 / std::sqrt(v / static_cast<double>(d) + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (p[j] - m) * inv_std[r];
      out[r * d + j] = gamma.data()[j] * xhat[r * d + j] + beta.data()[j];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return detail::make_result(x.shape(), std::move(out), {&x, &gamma, &beta},
                             [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](detail::Node& self) {
                               if (gn->requires_grad) gn->ensure_grad();
                               if (bn->requires_grad) bn->ensure_grad();
                               if (xn->requires_grad) xn->ensure_grad();
                               const double dd = static_cast<double>(d);
                               for (std::size_t r = 0; r < rows; ++r) {
                                 const double* g = self.grad.data() + r * d;
                                 const double* xh = xhat.data() + r * d;
                                 double sum_dx = 0.0, sum_dxx = 0.0;
                                 for (std::size_t j = 0; j < d; ++j) {
                                   if (gn->requires_grad) gn->grad[j] += g[j] * xh[j];
                                   if (bn->requires_grad) bn->grad[j] += g[j];
                                   const double dxh = g[j] * gn->value[j];
                                   sum_dx += dxh;
                                   sum_dxx += dxh * xh[j];
                                 }
                                 if (!xn->requires_grad) continue;
                                 for (std::size_t j = 0; j < d; ++j) {
                                   const double dxh = g[j] * gn->value[j];
                                   xn->grad[r * d + j] += inv_std[r] * (dxh - sum_dx / dd - xh[j] * sum_dxx / dd);
                                 }
                               }
                             });
}

/// Inverted dropout; the mask is drawn from the caller's stream.
inline Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ValueError("dropout: rate must be < 1");
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = rng.uniform() >= rate ? keep_scale : 0.0;
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
  auto xn = x.node();
  return detail::make_result(x.shape(), std::move(out), {&x}, [xn, mask = std::move(mask)](detail::Node& self) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < mask.size(); ++i) xn->grad[i] += self.grad[i] * mask[i];
  });
}

}  // namespace eeg2img
