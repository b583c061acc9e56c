#pragma once

#include <cmath>
#include <random>

#include "lvae/errors.hpp"
#include "lvae/nn.hpp"

namespace lvae {

/// Diagonal Gaussian over a batch: mean and variance are [dim, batch].
template <class T>
struct GaussianParams {
  nn::Mat<T> mean;
  nn::Mat<T> var;

  Eigen::Index dim() const { return mean.rows(); }
  Eigen::Index batch() const { return mean.cols(); }

  static GaussianParams standard(Eigen::Index dim, Eigen::Index batch) {
    return {nn::Mat<T>::Zero(dim, batch), nn::Mat<T>::Ones(dim, batch)};
  }
};

template <class T>
struct GaussianGrad {
  nn::Mat<T> mean;
  nn::Mat<T> var;

  static GaussianGrad zeros_like(const GaussianParams<T>& g) {
    return {nn::Mat<T>::Zero(g.mean.rows(), g.mean.cols()), nn::Mat<T>::Zero(g.var.rows(), g.var.cols())};
  }
};

namespace detail {
template <class T>
void require_same_shape(const GaussianParams<T>& a, const GaussianParams<T>& b, const char* what) {
  if (a.mean.rows() != b.mean.rows() || a.mean.cols() != b.mean.cols() || a.var.rows() != a.mean.rows() ||
      b.var.rows() != b.mean.rows() || a.var.cols() != a.mean.cols() || b.var.cols() != b.mean.cols())
    throw ShapeError(std::string(what) + ": Gaussian parameter length mismatch");
}
}  // namespace detail

/// Variances are produced as exp(clamp(log_var, log var_min, log var_max)).
struct VarianceBounds {
  double var_min = 1e-6;
  double var_max = 1e3;
};

template <class T>
nn::Mat<T> variance_from_log(const nn::Mat<T>& log_var, const VarianceBounds& b) {
  const T lo = static_cast<T>(std::log(b.var_min)), hi = static_cast<T>(std::log(b.var_max));
  return log_var.cwiseMax(lo).cwiseMin(hi).array().exp().matrix();
}

/// d(loss)/d(log_var) given d(loss)/d(var); zero where the clamp is active.
template <class T>
nn::Mat<T> variance_from_log_backward(const nn::Mat<T>& dvar, const nn::Mat<T>& log_var, const nn::Mat<T>& var,
                                      const VarianceBounds& b) {
  const T lo = static_cast<T>(std::log(b.var_min)), hi = static_cast<T>(std::log(b.var_max));
  return ((log_var.array() > lo) && (log_var.array() < hi)).select(dvar.array() * var.array(), T(0));
}

/// Precision-weighted fusion of a likelihood estimate `e` with a prior `p`:
///   var_d = 1 / (1/var_e + 1/var_p),  mean_d = (mean_e/var_e + mean_p/var_p) * var_d.
template <class T>
GaussianParams<T> precision_merge(const GaussianParams<T>& e, const GaussianParams<T>& p) {
  detail::require_same_shape(e, p, "precision_merge");
  nn::Mat<T> prec_e = e.var.cwiseInverse();
  nn::Mat<T> prec_p = p.var.cwiseInverse();
  GaussianParams<T> d;
  d.var = (prec_e + prec_p).cwiseInverse();
  d.mean = (e.mean.cwiseProduct(prec_e) + p.mean.cwiseProduct(prec_p)).cwiseProduct(d.var);
  return d;
}

/// Accumulates the gradients of precision_merge into `de` and `dp`.
template <class T>
void precision_merge_backward(const GaussianGrad<T>& dd, const GaussianParams<T>& e, const GaussianParams<T>& p,
                              const GaussianParams<T>& d, GaussianGrad<T>& de, GaussianGrad<T>& dp) {
  auto ve = e.var.array(), vp = p.var.array(), vd = d.var.array();
  auto gm = dd.mean.array(), gv = dd.var.array();
  // d mean_d / d mean_e = var_d/var_e ; d var_d / d var_e = var_d^2/var_e^2
  // d mean_d / d var_e = -var_d (mean_e - mean_d) / var_e^2
  de.mean.array() += gm * vd / ve;
  dp.mean.array() += gm * vd / vp;
  de.var.array() += gv * vd.square() / ve.square() - gm * vd * (e.mean.array() - d.mean.array()) / ve.square();
  dp.var.array() += gv * vd.square() / vp.square() - gm * vd * (p.mean.array() - d.mean.array()) / vp.square();
}

/// Reparameterised draw z = mean + sqrt(var) * eps; `eps` receives the noise.
template <class T, class Rng>
nn::Mat<T> sample_gaussian(const GaussianParams<T>& g, Rng& rng, nn::Mat<T>* eps_out = nullptr) {
  std::normal_distribution<double> n01(0.0, 1.0);
  nn::Mat<T> eps(g.mean.rows(), g.mean.cols());
  for (Eigen::Index i = 0; i < eps.size(); ++i) eps.data()[i] = static_cast<T>(n01(rng));
  nn::Mat<T> z = g.mean.array() + g.var.array().sqrt() * eps.array();
  if (eps_out) *eps_out = std::move(eps);
  return z;
}

template <class T>
nn::Mat<T> sample_gaussian_with(const GaussianParams<T>& g, const nn::Mat<T>& eps) {
  return g.mean.array() + g.var.array().sqrt() * eps.array();
}

template <class T>
void sample_gaussian_backward(const nn::Mat<T>& dz, const GaussianParams<T>& g, const nn::Mat<T>& eps,
                              GaussianGrad<T>& dg) {
  dg.mean += dz;
  dg.var.array() += dz.array() * eps.array() / (T(2) * g.var.array().sqrt());
}

}  // namespace lvae
