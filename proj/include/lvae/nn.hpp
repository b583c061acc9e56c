#pragma once

// Minimal reverse-mode building blocks: dense, batch norm, 3D (transposed)
// convolution and pointwise activations.  Layers own parameters and
// gradients; per-call activations live in caller-provided cache structs so
// forward() is const and eval-mode calls can share a model.
//
// Dense activations are [features, batch]; volumetric activations are one
// [channels, voxels] matrix per sample (channel-major, x fastest).

#include <Eigen/Dense>

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "lvae/errors.hpp"
#include "lvae/volume.hpp"

namespace lvae::nn {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using Batch3d = std::vector<Mat<T>>;

template <class T>
struct Param {
  std::string name;
  Mat<T> value;
  Mat<T> grad;

  void resize(Eigen::Index rows, Eigen::Index cols) {
    value = Mat<T>::Zero(rows, cols);
    grad = Mat<T>::Zero(rows, cols);
  }
  void zero_grad() { grad.setZero(); }
};

/// Non-learnable persistent state (batch-norm running statistics).
template <class T>
struct Buffer {
  std::string name;
  Mat<T> value;
};

template <class T, class Rng>
void fill_normal(Mat<T>& m, Rng& rng, double sd) {
  std::normal_distribution<double> n(0.0, sd);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(n(rng));
}

// ---------------------------------------------------------------- dense

template <class T>
struct DenseCache {
  Mat<T> x;
};

template <class T>
class Dense {
public:
  Dense() = default;
  /// Layers feeding a batch norm drop the bias (the norm's shift subsumes it).
  Dense(std::string name, int in, int out, bool bias = true) : in_(in), out_(out), has_bias_(bias) {
    w_.name = name + ".weight";
    b_.name = name + ".bias";
    w_.resize(out, in);
    b_.resize(out, 1);
  }

  int in() const { return in_; }
  int out() const { return out_; }

  Mat<T> forward(const Mat<T>& x, DenseCache<T>* cache) const {
    if (x.rows() != in_)
      throw ShapeError(w_.name + ": expected " + std::to_string(in_) + " input features, got " +
                       std::to_string(x.rows()));
    if (cache) cache->x = x;
    Mat<T> y = w_.value * x;
    if (has_bias_) y.colwise() += b_.value.col(0);
    return y;
  }

  Mat<T> backward(const Mat<T>& dy, const DenseCache<T>& cache) {
    w_.grad.noalias() += dy * cache.x.transpose();
    if (has_bias_) b_.grad.col(0) += dy.rowwise().sum();
    return w_.value.transpose() * dy;
  }

  template <class Fn>
  void visit(Fn&& fn) {
    fn(w_);
    if (has_bias_) fn(b_);
  }

private:
  int in_ = 0, out_ = 0;
  bool has_bias_ = true;
  Param<T> w_, b_;
};

// ---------------------------------------------------------------- batch norm

template <class T>
struct BatchNormCache {
  Mat<T> xhat;
  Mat<T> inv_std;  // [features, 1]
  Mat<T> batch_mean, batch_var;
  bool train = false;
};

/// Per-feature normalisation over the batch (columns).  Running statistics
/// are an exponential moving average with the configured momentum and are
/// only updated through commit().
template <class T>
class BatchNorm {
public:
  BatchNorm() = default;
  BatchNorm(std::string name, int features, double momentum, double eps)
      : features_(features), momentum_(momentum), eps_(eps) {
    gamma_.name = name + ".gamma";
    beta_.name = name + ".beta";
    gamma_.resize(features, 1);
    gamma_.value.setOnes();
    beta_.resize(features, 1);
    rmean_.name = name + ".running_mean";
    rvar_.name = name + ".running_var";
    rmean_.value = Mat<T>::Zero(features, 1);
    rvar_.value = Mat<T>::Ones(features, 1);
  }

  Mat<T> forward(const Mat<T>& x, bool train, BatchNormCache<T>* cache) const {
    if (x.rows() != features_) throw ShapeError(gamma_.name + ": feature count mismatch");
    const Eigen::Index b = x.cols();
    Mat<T> mean, var;
    if (train) {
      if (b < 2) throw ShapeError(gamma_.name + ": train-mode batch norm needs a batch of at least 2");
      mean = x.rowwise().mean();
      Mat<T> centered = x.colwise() - mean.col(0);
      var = centered.array().square().rowwise().sum() / static_cast<T>(b);
    } else {
      mean = rmean_.value;
      var = rvar_.value;
    }
    Mat<T> inv_std = (var.array() + static_cast<T>(eps_)).rsqrt();
    Mat<T> xhat = (x.colwise() - mean.col(0)).array().colwise() * inv_std.col(0).array();
    Mat<T> y = (xhat.array().colwise() * gamma_.value.col(0).array()).colwise() + beta_.value.col(0).array();
    if (cache) {
      cache->xhat = std::move(xhat);
      cache->inv_std = std::move(inv_std);
      cache->train = train;
      if (train) {
        cache->batch_mean = std::move(mean);
        cache->batch_var = std::move(var);
      }
    }
    return y;
  }

  Mat<T> backward(const Mat<T>& dy, const BatchNormCache<T>& c) {
    gamma_.grad.col(0) += (dy.array() * c.xhat.array()).rowwise().sum().matrix();
    beta_.grad.col(0) += dy.rowwise().sum();
    Mat<T> dxhat = dy.array().colwise() * gamma_.value.col(0).array();
    if (!c.train) return dxhat.array().colwise() * c.inv_std.col(0).array();
    const T n = static_cast<T>(dy.cols());
    Mat<T> sum_d = dxhat.rowwise().sum();
    Mat<T> sum_dx = (dxhat.array() * c.xhat.array()).rowwise().sum();
    Mat<T> dx = (n * dxhat.array() - c.xhat.array().colwise() * sum_dx.col(0).array()).colwise() -
                sum_d.col(0).array();
    return dx.array().colwise() * (c.inv_std.col(0).array() / n);
  }

  /// Folds one train-mode batch's statistics into the running averages.
  void commit(const BatchNormCache<T>& c, Eigen::Index batch) {
    if (!c.train) return;
    const T m = static_cast<T>(momentum_);
    const T unbias = batch > 1 ? static_cast<T>(batch) / static_cast<T>(batch - 1) : T(1);
    rmean_.value = m * rmean_.value + (T(1) - m) * c.batch_mean;
    rvar_.value = m * rvar_.value + (T(1) - m) * unbias * c.batch_var;
  }

  template <class Fn>
  void visit(Fn&& fn) {
    fn(gamma_);
    fn(beta_);
  }
  template <class Fn>
  void visit_buffers(Fn&& fn) {
    fn(rmean_);
    fn(rvar_);
  }

private:
  int features_ = 0;
  double momentum_ = 0.99, eps_ = 1e-5;
  Param<T> gamma_, beta_;
  Buffer<T> rmean_, rvar_;
};

/// Per-channel batch norm of [C, voxels] maps, pooling the batch and all voxels.
template <class T>
class BatchNorm3d {
public:
  BatchNorm3d() = default;
  BatchNorm3d(std::string name, int channels, double momentum, double eps) : bn_(std::move(name), channels, momentum, eps) {}

  Batch3d<T> forward(const Batch3d<T>& x, bool train, BatchNormCache<T>* cache) const {
    if (x.empty()) return {};
    if (!train && !cache) {
      Batch3d<T> out(x.size());
      for (std::size_t n = 0; n < x.size(); ++n) out[n] = bn_.forward(x[n], false, nullptr);
      return out;
    }
    const Eigen::Index v = x[0].cols();
    Mat<T> joined(x[0].rows(), v * static_cast<Eigen::Index>(x.size()));
    for (std::size_t n = 0; n < x.size(); ++n) joined.middleCols(static_cast<Eigen::Index>(n) * v, v) = x[n];
    Mat<T> y = bn_.forward(joined, train, cache);
    Batch3d<T> out(x.size());
    for (std::size_t n = 0; n < x.size(); ++n) out[n] = y.middleCols(static_cast<Eigen::Index>(n) * v, v);
    return out;
  }

  Batch3d<T> backward(const Batch3d<T>& dy, const BatchNormCache<T>& c) {
    const Eigen::Index v = dy[0].cols();
    Mat<T> joined(dy[0].rows(), v * static_cast<Eigen::Index>(dy.size()));
    for (std::size_t n = 0; n < dy.size(); ++n) joined.middleCols(static_cast<Eigen::Index>(n) * v, v) = dy[n];
    Mat<T> dx = bn_.backward(joined, c);
    Batch3d<T> out(dy.size());
    for (std::size_t n = 0; n < dy.size(); ++n) out[n] = dx.middleCols(static_cast<Eigen::Index>(n) * v, v);
    return out;
  }

  void commit(const BatchNormCache<T>& c) { bn_.commit(c, c.xhat.cols()); }

  template <class Fn>
  void visit(Fn&& fn) {
    bn_.visit(fn);
  }
  template <class Fn>
  void visit_buffers(Fn&& fn) {
    bn_.visit_buffers(fn);
  }

private:
  BatchNorm<T> bn_;
};

// ---------------------------------------------------------------- activations

template <class T>
Mat<T> relu(const Mat<T>& x) {
  return x.cwiseMax(T(0));
}
/// Gradient of relu given its output.
template <class T>
Mat<T> relu_backward(const Mat<T>& dy, const Mat<T>& y) {
  return (y.array() > T(0)).select(dy, T(0));
}

template <class T>
Mat<T> elu(const Mat<T>& x) {
  return (x.array() > T(0)).select(x, x.array().exp() - T(1));
}
template <class T>
Mat<T> elu_backward(const Mat<T>& dy, const Mat<T>& y) {
  return (y.array() > T(0)).select(dy, dy.array() * (y.array() + T(1)));
}

template <class T>
T sigmoid(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}
template <class T>
Mat<T> sigmoid(const Mat<T>& x) {
  return x.unaryExpr([](T v) { return sigmoid(v); });
}
template <class T>
Mat<T> sigmoid_backward(const Mat<T>& dy, const Mat<T>& y) {
  return dy.array() * y.array() * (T(1) - y.array());
}

// ---------------------------------------------------------------- 3D convolution

/// Geometry of a strided 3D convolution from `in` to `out` dims.
struct ConvGeometry {
  Dims in;
  Dims out;
  int kernel = 4;
  int stride = 2;
  int pad = 1;

  static ConvGeometry downsample(Dims in, int kernel, int stride) {
    ConvGeometry g;
    g.in = in;
    g.kernel = kernel;
    g.stride = stride;
    g.pad = (kernel - stride) / 2;
    auto o = [&](int n) { return (n + 2 * g.pad - kernel) / stride + 1; };
    g.out = Dims{o(in.x), o(in.y), o(in.z)};
    return g;
  }
  int taps() const { return kernel * kernel * kernel; }
};

namespace detail {

/// Output positions o in [lo, hi) whose input index o * stride - pad + tap lies inside [0, n).
inline void valid_range(int n_in, int n_out, int stride, int pad, int tap, int& lo, int& hi) {
  lo = 0;
  while (lo < n_out && lo * stride - pad + tap < 0) ++lo;
  hi = n_out;
  while (hi > lo && (hi - 1) * stride - pad + tap >= n_in) --hi;
}

}  // namespace detail

/// cols[(c, kz, ky, kx), out voxel] = x[c, in voxel] (zero outside the grid).
template <class T>
void im2col(const T* x, int channels, const ConvGeometry& g, T* cols) {
  const int k = g.kernel, s = g.stride, p = g.pad;
  const std::size_t nin = g.in.voxels(), nout = g.out.voxels();
  for (int c = 0; c < channels; ++c) {
    const T* xc = x + c * nin;
    for (int kz = 0; kz < k; ++kz)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          T* dst = cols + ((((static_cast<std::size_t>(c) * k + kz) * k + ky) * k + kx) * nout);
          int xlo, xhi;
          detail::valid_range(g.in.x, g.out.x, s, p, kx, xlo, xhi);
          for (int oz = 0; oz < g.out.z; ++oz) {
            const int iz = oz * s - p + kz;
            for (int oy = 0; oy < g.out.y; ++oy) {
              const int iy = oy * s - p + ky;
              T* row = dst + (static_cast<std::size_t>(oz) * g.out.y + oy) * g.out.x;
              if (iz < 0 || iz >= g.in.z || iy < 0 || iy >= g.in.y) {
                std::fill(row, row + g.out.x, T(0));
                continue;
              }
              const T* src = xc + (static_cast<std::size_t>(iz) * g.in.y + iy) * g.in.x - p + kx;
              std::fill(row, row + xlo, T(0));
              for (int ox = xlo; ox < xhi; ++ox) row[ox] = src[ox * s];
              std::fill(row + xhi, row + g.out.x, T(0));
            }
          }
        }
  }
}

/// Adjoint of im2col: x[c, in voxel] += cols[(c, taps), out voxel].
template <class T>
void col2im(const T* cols, int channels, const ConvGeometry& g, T* x) {
  const int k = g.kernel, s = g.stride, p = g.pad;
  const std::size_t nin = g.in.voxels(), nout = g.out.voxels();
  for (int c = 0; c < channels; ++c) {
    T* xc = x + c * nin;
    for (int kz = 0; kz < k; ++kz)
      for (int ky = 0; ky < k; ++ky)
        for (int kx = 0; kx < k; ++kx) {
          const T* src = cols + ((((static_cast<std::size_t>(c) * k + kz) * k + ky) * k + kx) * nout);
          int xlo, xhi;
          detail::valid_range(g.in.x, g.out.x, s, p, kx, xlo, xhi);
          for (int oz = 0; oz < g.out.z; ++oz) {
            const int iz = oz * s - p + kz;
            if (iz < 0 || iz >= g.in.z) continue;
            for (int oy = 0; oy < g.out.y; ++oy) {
              const int iy = oy * s - p + ky;
              if (iy < 0 || iy >= g.in.y) continue;
              const T* row = src + (static_cast<std::size_t>(oz) * g.out.y + oy) * g.out.x;
              T* dst = xc + (static_cast<std::size_t>(iz) * g.in.y + iy) * g.in.x - p + kx;
              for (int ox = xlo; ox < xhi; ++ox) dst[ox * s] += row[ox];
            }
          }
        }
  }
}

template <class T>
struct ConvCache {
  Batch3d<T> cols;  // Conv3d: im2col of the input; ConvTranspose3d: the input itself
};

/// Strided 3D convolution, weight [out_channels, in_channels * k^3].
template <class T>
class Conv3d {
public:
  Conv3d() = default;
  Conv3d(std::string name, int in_ch, int out_ch, ConvGeometry g) : in_ch_(in_ch), out_ch_(out_ch), g_(g) {
    w_.name = name + ".weight";
    b_.name = name + ".bias";
    w_.resize(out_ch, static_cast<Eigen::Index>(in_ch) * g.taps());
    b_.resize(out_ch, 1);
  }

  const ConvGeometry& geometry() const { return g_; }
  int out_channels() const { return out_ch_; }

  Batch3d<T> forward(const Batch3d<T>& x, ConvCache<T>* cache) const {
    Batch3d<T> y(x.size());
    if (cache) cache->cols.resize(x.size());
    Mat<T> scratch;
    for (std::size_t n = 0; n < x.size(); ++n) {
      check_input(x[n]);
      Mat<T>& cols = cache ? cache->cols[n] : scratch;
      cols.resize(static_cast<Eigen::Index>(in_ch_) * g_.taps(), static_cast<Eigen::Index>(g_.out.voxels()));
      im2col(x[n].data(), in_ch_, g_, cols.data());
      y[n].noalias() = w_.value * cols;
      y[n].colwise() += b_.value.col(0);
    }
    return y;
  }

  Batch3d<T> backward(const Batch3d<T>& dy, const ConvCache<T>& cache) {
    Batch3d<T> dx(dy.size());
    Mat<T> dcols;
    for (std::size_t n = 0; n < dy.size(); ++n) {
      w_.grad.noalias() += dy[n] * cache.cols[n].transpose();
      b_.grad.col(0) += dy[n].rowwise().sum();
      dcols.noalias() = w_.value.transpose() * dy[n];
      dx[n] = Mat<T>::Zero(in_ch_, static_cast<Eigen::Index>(g_.in.voxels()));
      col2im(dcols.data(), in_ch_, g_, dx[n].data());
    }
    return dx;
  }

  template <class Fn>
  void visit(Fn&& fn) {
    fn(w_);
    fn(b_);
  }

private:
  void check_input(const Mat<T>& x) const {
    if (x.rows() != in_ch_ || x.cols() != static_cast<Eigen::Index>(g_.in.voxels()))
      throw ShapeError(w_.name + ": expected input [" + std::to_string(in_ch_) + ", " + to_string(g_.in) +
                       "], got [" + std::to_string(x.rows()) + ", " + std::to_string(x.cols()) + " voxels]");
  }

  int in_ch_ = 0, out_ch_ = 0;
  ConvGeometry g_;
  Param<T> w_, b_;
};

/// Transposed (upsampling) 3D convolution: the adjoint of Conv3d's geometry
/// `g` mapping g.out -> g.in.  Weight [in_channels, out_channels * k^3].
template <class T>
class ConvTranspose3d {
public:
  ConvTranspose3d() = default;
  /// `g` is the geometry of the matching downsampling conv (g.in is our output).
  ConvTranspose3d(std::string name, int in_ch, int out_ch, ConvGeometry g) : in_ch_(in_ch), out_ch_(out_ch), g_(g) {
    w_.name = name + ".weight";
    b_.name = name + ".bias";
    w_.resize(in_ch, static_cast<Eigen::Index>(out_ch) * g.taps());
    b_.resize(out_ch, 1);
  }

  Dims out_dims() const { return g_.in; }

  Batch3d<T> forward(const Batch3d<T>& x, ConvCache<T>* cache) const {
    Batch3d<T> y(x.size());
    if (cache) cache->cols = x;
    Mat<T> cols;
    for (std::size_t n = 0; n < x.size(); ++n) {
      if (x[n].rows() != in_ch_ || x[n].cols() != static_cast<Eigen::Index>(g_.out.voxels()))
        throw ShapeError(w_.name + ": input shape mismatch");
      cols.noalias() = w_.value.transpose() * x[n];
      y[n] = Mat<T>::Zero(out_ch_, static_cast<Eigen::Index>(g_.in.voxels()));
      col2im(cols.data(), out_ch_, g_, y[n].data());
      y[n].colwise() += b_.value.col(0);
    }
    return y;
  }

  Batch3d<T> backward(const Batch3d<T>& dy, const ConvCache<T>& cache) {
    Batch3d<T> dx(dy.size());
    Mat<T> dcols(static_cast<Eigen::Index>(out_ch_) * g_.taps(), static_cast<Eigen::Index>(g_.out.voxels()));
    for (std::size_t n = 0; n < dy.size(); ++n) {
      b_.grad.col(0) += dy[n].rowwise().sum();
      im2col(dy[n].data(), out_ch_, g_, dcols.data());
      w_.grad.noalias() += cache.cols[n] * dcols.transpose();
      dx[n].noalias() = w_.value * dcols;
    }
    return dx;
  }

  template <class Fn>
  void visit(Fn&& fn) {
    fn(w_);
    fn(b_);
  }

private:
  int in_ch_ = 0, out_ch_ = 0;
  ConvGeometry g_;
  Param<T> w_, b_;
};

template <class T>
Batch3d<T> relu(const Batch3d<T>& x) {
  Batch3d<T> y(x.size());
  for (std::size_t n = 0; n < x.size(); ++n) y[n] = relu(x[n]);
  return y;
}
template <class T>
Batch3d<T> relu_backward(const Batch3d<T>& dy, const Batch3d<T>& y) {
  Batch3d<T> dx(dy.size());
  for (std::size_t n = 0; n < dy.size(); ++n) dx[n] = relu_backward(dy[n], y[n]);
  return dx;
}

/// Stacks per-sample volumes as columns: [C * voxels, batch].
template <class T>
Mat<T> flatten(const Batch3d<T>& x) {
  Mat<T> out(x.empty() ? 0 : x[0].size(), static_cast<Eigen::Index>(x.size()));
  for (std::size_t n = 0; n < x.size(); ++n)
    out.col(static_cast<Eigen::Index>(n)) = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(x[n].data(), x[n].size());
  return out;
}

template <class T>
Batch3d<T> unflatten(const Mat<T>& x, int channels, std::size_t voxels) {
  Batch3d<T> out(static_cast<std::size_t>(x.cols()));
  for (Eigen::Index n = 0; n < x.cols(); ++n) {
    out[n].resize(channels, static_cast<Eigen::Index>(voxels));
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(out[n].data(), out[n].size()) = x.col(n);
  }
  return out;
}

}  // namespace lvae::nn
