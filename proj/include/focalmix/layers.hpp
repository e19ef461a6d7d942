#pragma once

// Dense 3D layers with hand-written reverse passes. Tensors are channel-major
// (c, z, y, x). Convolutions lower to a GEMM over an im2col matrix whose rows
// are (in_channel, kz, ky, kx) and whose columns are output positions.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "focalmix/error.hpp"
#include "focalmix/volume.hpp"

namespace focalmix {

/// Storage for anything handed to Eigen. Vectorised kernels peel unaligned
/// heads, so the summation order (and the rounding) would otherwise depend on
/// where the allocator happened to place the buffer.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

template <typename T>
struct Tensor {
  int channels = 0;
  Shape3 dims{0, 0, 0};
  Buffer<T> data;

  Tensor() = default;
  Tensor(int c, Shape3 d, T fill = T(0))
      : channels(c), dims(d), data(static_cast<std::size_t>(c) * voxel_count(d), fill) {}

  std::size_t plane() const { return voxel_count(dims); }
  std::size_t size() const { return data.size(); }
  T* channel(int c) { return data.data() + static_cast<std::size_t>(c) * plane(); }
  const T* channel(int c) const { return data.data() + static_cast<std::size_t>(c) * plane(); }
};

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstRowMap = Eigen::Map<const RowMatrix<T>>;

/// Shape-only description of a convolution; weights live in the model state.
struct ConvSpec {
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 3;  // 1 or 3
  int stride = 1;  // 1 or 2

  int pad() const { return kernel / 2; }
  std::size_t weight_count() const {
    return static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel * kernel;
  }
  std::size_t fan_in() const { return static_cast<std::size_t>(in_channels) * kernel * kernel * kernel; }
  Shape3 output_dims(const Shape3& in) const {
    Shape3 o{};
    for (int a = 0; a < 3; ++a) o[a] = (in[a] + 2 * pad() - kernel) / stride + 1;
    return o;
  }
  bool pointwise() const { return kernel == 1 && stride == 1; }
};

template <typename T>
struct ConvCache {
  Shape3 in_dims{0, 0, 0};
  Buffer<T> cols;  // empty for pointwise convolutions (input reused)
};

namespace detail {

template <typename T>
void im2col(const ConvSpec& spec, const Tensor<T>& in, Buffer<T>& cols) {
  const Shape3 od = spec.output_dims(in.dims);
  const std::size_t n = voxel_count(od);
  const int k = spec.kernel, s = spec.stride, p = spec.pad();
  cols.assign(spec.fan_in() * n, T(0));
  std::size_t row = 0;
  for (int c = 0; c < in.channels; ++c) {
    const T* src = in.channel(c);
    for (int kz = 0; kz < k; ++kz)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx, ++row) {
          T* dst = cols.data() + row * n;
          // Output x range whose input x lies inside [0, W).
          const int x_lo = std::max(0, (p - kx + s - 1) / s);
          const int x_hi = std::min(od[2], (in.dims[2] - 1 + p - kx) / s + 1);
          for (int oz = 0; oz < od[0]; ++oz) {
            const int iz = oz * s + kz - p;
            if (iz < 0 || iz >= in.dims[0]) continue;
            for (int oy = 0; oy < od[1]; ++oy) {
              const int iy = oy * s + ky - p;
              if (iy < 0 || iy >= in.dims[1]) continue;
              const T* line = src + (static_cast<std::size_t>(iz) * in.dims[1] + iy) * in.dims[2];
              T* out = dst + (static_cast<std::size_t>(oz) * od[1] + oy) * od[2];
              if (s == 1) {
                const int off = kx - p;
                for (int ox = x_lo; ox < x_hi; ++ox) out[ox] = line[ox + off];
              } else {
                for (int ox = x_lo; ox < x_hi; ++ox) out[ox] = line[ox * s + kx - p];
              }
            }
          }
        }
  }
}

template <typename T>
void col2im_add(const ConvSpec& spec, std::span<const T> cols, Tensor<T>& din) {
  const Shape3 od = spec.output_dims(din.dims);
  const std::size_t n = voxel_count(od);
  const int k = spec.kernel, s = spec.stride, p = spec.pad();
  std::size_t row = 0;
  for (int c = 0; c < din.channels; ++c) {
    T* dst = din.channel(c);
    for (int kz = 0; kz < k; ++kz)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx, ++row) {
          const T* src = cols.data() + row * n;
          const int x_lo = std::max(0, (p - kx + s - 1) / s);
          const int x_hi = std::min(od[2], (din.dims[2] - 1 + p - kx) / s + 1);
          for (int oz = 0; oz < od[0]; ++oz) {
            const int iz = oz * s + kz - p;
            if (iz < 0 || iz >= din.dims[0]) continue;
            for (int oy = 0; oy < od[1]; ++oy) {
              const int iy = oy * s + ky - p;
              if (iy < 0 || iy >= din.dims[1]) continue;
              T* line = dst + (static_cast<std::size_t>(iz) * din.dims[1] + iy) * din.dims[2];
              const T* g = src + (static_cast<std::size_t>(oz) * od[1] + oy) * od[2];
              for (int ox = x_lo; ox < x_hi; ++ox) line[ox * s + kx - p] += g[ox];
            }
          }
        }
  }
}

}  // namespace detail

/// out = conv(in; weight, bias). When `cache` is non-null the lowered input
/// is kept for the reverse pass.
template <typename T>
Tensor<T> conv3d_forward(const ConvSpec& spec, std::span<const T> weight, std::span<const T> bias,
                         const Tensor<T>& in, ConvCache<T>* cache) {
  if (in.channels != spec.in_channels) throw ConfigError("conv3d: input channel mismatch");
  const Shape3 od = spec.output_dims(in.dims);
  const auto n = static_cast<Eigen::Index>(voxel_count(od));
  const auto kdim = static_cast<Eigen::Index>(spec.fan_in());
  Tensor<T> out(spec.out_channels, od);

  Buffer<T> local;
  Buffer<T>& cols = cache ? cache->cols : local;
  const T* lowered = in.data.data();
  if (!spec.pointwise()) {
    detail::im2col(spec, in, cols);
    lowered = cols.data();
  } else if (cache) {
    cache->cols.clear();
  }
  if (cache) cache->in_dims = in.dims;

  ConstRowMap<T> w(weight.data(), spec.out_channels, kdim);
  ConstRowMap<T> x(lowered, kdim, n);
  RowMap<T> y(out.data.data(), spec.out_channels, n);
  y.noalias() = w * x;
  for (int c = 0; c < spec.out_channels; ++c) y.row(c).array() += bias[c];
  return out;
}

/// Accumulates weight/bias gradients and returns d loss / d input.
/// `input` must be the tensor passed to the forward call (only read for
/// pointwise convolutions, whose cache holds no lowered copy).
template <typename T>
Tensor<T> conv3d_backward(const ConvSpec& spec, std::span<const T> weight, const ConvCache<T>& cache,
                          const Tensor<T>& input, const Tensor<T>& dout, std::span<T> dweight,
                          std::span<T> dbias, bool need_input_grad = true) {
  const auto n = static_cast<Eigen::Index>(dout.plane());
  const auto kdim = static_cast<Eigen::Index>(spec.fan_in());
  const T* lowered = spec.pointwise() ? input.data.data() : cache.cols.data();
  if (!spec.pointwise() && cache.cols.size() != static_cast<std::size_t>(kdim * n))
    throw ConfigError("conv3d_backward: missing forward cache");

  ConstRowMap<T> dy(dout.data.data(), spec.out_channels, n);
  ConstRowMap<T> x(lowered, kdim, n);
  RowMap<T> dw(dweight.data(), spec.out_channels, kdim);
  dw.noalias() += dy * x.transpose();
  for (int c = 0; c < spec.out_channels; ++c) dbias[c] += dy.row(c).sum();

  Tensor<T> din(spec.in_channels, cache.in_dims);
  if (!need_input_grad) return din;
  ConstRowMap<T> w(weight.data(), spec.out_channels, kdim);
  if (spec.pointwise()) {
    RowMap<T> dx(din.data.data(), kdim, n);
    dx.noalias() = w.transpose() * dy;
  } else {
    Buffer<T> dcols(static_cast<std::size_t>(kdim * n));
    RowMap<T> dx(dcols.data(), kdim, n);
    dx.noalias() = w.transpose() * dy;
    detail::col2im_add<T>(spec, dcols, din);
  }
  return din;
}

template <typename T>
void relu_inplace(Tensor<T>& t) {
  for (T& v : t.data) v = v > T(0) ? v : T(0);
}

/// Masks `grad` by the rectifier's output (gradient passes where out > 0).
template <typename T>
void relu_backward_inplace(const Tensor<T>& out, Tensor<T>& grad) {
  for (std::size_t i = 0; i < grad.data.size(); ++i)
    if (!(out.data[i] > T(0))) grad.data[i] = T(0);
}

/// Nearest-neighbour 2x upsampling on every axis.
template <typename T>
Tensor<T> upsample2x(const Tensor<T>& in) {
  Tensor<T> out(in.channels, {in.dims[0] * 2, in.dims[1] * 2, in.dims[2] * 2});
  for (int c = 0; c < in.channels; ++c) {
    const T* src = in.channel(c);
    T* dst = out.channel(c);
    for (int z = 0; z < out.dims[0]; ++z)
      for (int y = 0; y < out.dims[1]; ++y) {
        const T* line = src + (static_cast<std::size_t>(z / 2) * in.dims[1] + y / 2) * in.dims[2];
        T* o = dst + (static_cast<std::size_t>(z) * out.dims[1] + y) * out.dims[2];
        for (int x = 0; x < out.dims[2]; ++x) o[x] = line[x / 2];
      }
  }
  return out;
}

/// Adjoint of upsample2x: sums each 2x2x2 block.
template <typename T>
Tensor<T> upsample2x_backward(const Tensor<T>& dout) {
  Tensor<T> din(dout.channels, {dout.dims[0] / 2, dout.dims[1] / 2, dout.dims[2] / 2});
  for (int c = 0; c < dout.channels; ++c) {
    const T* src = dout.channel(c);
    T* dst = din.channel(c);
    for (int z = 0; z < dout.dims[0]; ++z)
      for (int y = 0; y < dout.dims[1]; ++y) {
        const T* g = src + (static_cast<std::size_t>(z) * dout.dims[1] + y) * dout.dims[2];
        T* o = dst + (static_cast<std::size_t>(z / 2) * din.dims[1] + y / 2) * din.dims[2];
        for (int x = 0; x < dout.dims[2]; ++x) o[x / 2] += g[x];
      }
  }
  return din;
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  if (a.data.size() != b.data.size()) throw ConfigError("add: shape mismatch");
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

template <typename T>
T sigmoid(T z) {
  if (z >= T(0)) {
    const T e = std::exp(-z);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(z);
  return e / (T(1) + e);
}

}  // namespace focalmix
