#pragma once

// Composite training objective:
//
//   L = sum_c (1 - softDice_c) + gamma * ( sum_i alpha_i KL_i + beta CE )
//
// KL_i is KL(posterior_i || prior_i) below the top and KL(posterior_L || N(0, I))
// at the top; KL terms are summed over latent dimensions and averaged over the
// batch.  gamma follows a stepwise deterministic warm-up.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "lvae/errors.hpp"
#include "lvae/gaussian.hpp"
#include "lvae/model.hpp"
#include "lvae/volume.hpp"

namespace lvae {

inline constexpr double kDiceSmoothing = 1.0;
inline constexpr double kScoreClamp = 1e-7;

// ------------------------------------------------------------ scalar formulas

/// 1 - (2 sum(p t) + 1) / (sum p + sum t + 1).
inline double soft_dice_loss(std::span<const float> prediction, std::span<const float> target) {
  if (prediction.size() != target.size()) throw ShapeError("soft_dice_loss: dims mismatch");
  double inter = 0, sp = 0, st = 0;
  for (std::size_t i = 0; i < prediction.size(); ++i) {
    inter += static_cast<double>(prediction[i]) * target[i];
    sp += prediction[i];
    st += target[i];
  }
  return 1.0 - (2.0 * inter + kDiceSmoothing) / (sp + st + kDiceSmoothing);
}

/// Per-channel soft Dice loss between two volumes of equal geometry.
inline double soft_dice_loss(const Volume& prediction, const Volume& target, int channel) {
  require_same_geometry(prediction, target, "soft_dice_loss");
  return soft_dice_loss(prediction.channel(channel), target.channel(channel));
}

/// Closed-form KL(q || p) of diagonal Gaussians, summed over dimensions.
inline double kl_diag_gaussians(std::span<const double> q_mean, std::span<const double> q_var,
                                std::span<const double> p_mean, std::span<const double> p_var) {
  if (q_mean.size() != q_var.size() || p_mean.size() != p_var.size() || q_mean.size() != p_mean.size())
    throw ShapeError("kl_diag_gaussians: length mismatch");
  double kl = 0;
  for (std::size_t i = 0; i < q_mean.size(); ++i) {
    double dm = q_mean[i] - p_mean[i];
    kl += 0.5 * (std::log(p_var[i] / q_var[i]) + (q_var[i] + dm * dm) / p_var[i] - 1.0);
  }
  return kl;
}

/// Batched KL, summed over dimensions (rows) and averaged over the batch (columns).
template <class T>
double kl_diag_gaussians(const GaussianParams<T>& q, const GaussianParams<T>& p) {
  detail::require_same_shape(q, p, "kl_diag_gaussians");
  double kl = 0;
  for (Eigen::Index i = 0; i < q.mean.size(); ++i) {
    double qm = q.mean.data()[i], qv = q.var.data()[i], pm = p.mean.data()[i], pv = p.var.data()[i];
    double dm = qm - pm;
    kl += 0.5 * (std::log(pv / qv) + (qv + dm * dm) / pv - 1.0);
  }
  return kl / static_cast<double>(q.batch());
}

template <class T>
double kl_standard(const GaussianParams<T>& q) {
  return kl_diag_gaussians(q, GaussianParams<T>::standard(q.dim(), q.batch()));
}

/// Accumulates scale * d KL(q||p) / d(q, p) for the batched KL above.
template <class T>
void kl_diag_gaussians_backward(const GaussianParams<T>& q, const GaussianParams<T>& p, double scale,
                                GaussianGrad<T>& dq, GaussianGrad<T>* dp) {
  const T s = static_cast<T>(scale / static_cast<double>(q.batch()));
  auto dm = (q.mean - p.mean).array();
  auto pv = p.var.array(), qv = q.var.array();
  dq.mean.array() += s * dm / pv;
  dq.var.array() += s * T(0.5) * (pv.inverse() - qv.inverse());
  if (dp) {
    dp->mean.array() -= s * dm / pv;
    dp->var.array() += s * T(0.5) * (pv.inverse() - (qv + dm.square()) / pv.square());
  }
}

inline double clamp_score(double s) { return std::clamp(s, kScoreClamp, 1.0 - kScoreClamp); }

/// Batch-averaged binary cross-entropy with scores clamped to [1e-7, 1 - 1e-7].
inline double binary_cross_entropy(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ShapeError("binary_cross_entropy: length mismatch");
  if (scores.empty()) return 0.0;
  double ce = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    double s = clamp_score(scores[i]);
    ce -= labels[i] ? std::log(s) : std::log(1.0 - s);
  }
  return ce / static_cast<double>(scores.size());
}

inline double binary_cross_entropy(double score, int label) {
  return binary_cross_entropy(std::span<const double>(&score, 1), std::span<const int>(&label, 1));
}

// ------------------------------------------------------------ weights and schedule

struct WarmupSchedule {
  double step = 0.5;
  std::int64_t interval = 4000;
  double cap = 100.0;
  bool enabled = true;
};

/// gamma = min(cap, step * floor(iteration / interval)); the cap from the start when disabled.
inline double warmup_gamma(std::int64_t iteration, const WarmupSchedule& s = {}) {
  if (iteration < 0) throw ParameterError("warmup_gamma: iteration must be >= 0");
  if (!s.enabled) return s.cap;
  return std::min(s.cap, s.step * static_cast<double>(iteration / s.interval));
}

struct LossWeights {
  std::vector<double> alpha{0.02, 0.001, 0.0001};
  double beta = 0.005;
  WarmupSchedule gamma;

  void validate(int levels) const {
    if (static_cast<int>(alpha.size()) != levels)
      throw ParameterError("loss weights: alpha has " + std::to_string(alpha.size()) + " entries for " +
                           std::to_string(levels) + " latent levels");
    for (double a : alpha)
      if (!(a >= 0)) throw ParameterError("loss weights: alpha entries must be nonnegative");
    if (!(beta >= 0)) throw ParameterError("loss weights: beta must be nonnegative");
    if (!(gamma.step >= 0) || gamma.interval < 1 || !(gamma.cap >= 0))
      throw ParameterError("loss weights: warm-up schedule needs step >= 0, interval >= 1, cap >= 0");
  }
};

struct LossBreakdown {
  std::vector<double> dice;  ///< per-channel soft-Dice losses
  std::vector<double> kl;    ///< per-level KL terms, bottom-up
  double ce = 0;
  double gamma = 0;
  double total = 0;

  double reconstruction() const { return std::accumulate(dice.begin(), dice.end(), 0.0); }
};

/// Combines the parts into the total objective.
inline LossBreakdown total_loss(std::vector<double> dice, std::vector<double> kl, double ce, const LossWeights& w,
                                double gamma) {
  if (kl.size() != w.alpha.size())
    throw ParameterError("total_loss: " + std::to_string(kl.size()) + " KL terms for " +
                         std::to_string(w.alpha.size()) + " alpha weights");
  LossBreakdown b{std::move(dice), std::move(kl), ce, gamma, 0.0};
  double reg = w.beta * ce;
  for (std::size_t i = 0; i < b.kl.size(); ++i) reg += w.alpha[i] * b.kl[i];
  b.total = b.reconstruction() + gamma * reg;
  return b;
}

// ------------------------------------------------------------ batched objective + gradients

template <class T>
struct Objective {
  LossBreakdown breakdown;
  OutputGrads<T> grads;
};

/// Evaluates the objective on a forward result and the gradients with respect
/// to the model outputs.  `target` holds per-sample masks [channels, voxels].
template <class T>
Objective<T> evaluate_objective(const ForwardResult<T>& fr, const nn::Batch3d<T>& target, std::span<const int> labels,
                                const LossWeights& w, double gamma) {
  const std::size_t B = fr.recon.size();
  if (target.size() != B || labels.size() != B) throw ShapeError("evaluate_objective: batch size mismatch");
  const int L = static_cast<int>(fr.ladder.levels.size());
  w.validate(L);
  Objective<T> out;
  auto& g = out.grads;
  const Eigen::Index C = fr.recon.front().rows();

  std::vector<double> dice(static_cast<std::size_t>(C), 0.0);
  g.recon.resize(B);
  const double inv_b = 1.0 / static_cast<double>(B);
  for (std::size_t n = 0; n < B; ++n) {
    const auto& p = fr.recon[n];
    const auto& t = target[n];
    if (p.rows() != t.rows() || p.cols() != t.cols()) throw ShapeError("evaluate_objective: target dims mismatch");
    g.recon[n].resize(p.rows(), p.cols());
    for (Eigen::Index c = 0; c < C; ++c) {
      double inter = 0, sp = 0, st = 0;
      for (Eigen::Index v = 0; v < p.cols(); ++v) {
        inter += static_cast<double>(p(c, v)) * t(c, v);
        sp += p(c, v);
        st += t(c, v);
      }
      const double num = 2.0 * inter + kDiceSmoothing, den = sp + st + kDiceSmoothing;
      dice[static_cast<std::size_t>(c)] += (1.0 - num / den) * inv_b;
      // d/dp_v [1 - num/den] = -(2 t_v den - num) / den^2
      const double a = -2.0 / den * inv_b, b = num / (den * den) * inv_b;
      for (Eigen::Index v = 0; v < p.cols(); ++v) g.recon[n](c, v) = static_cast<T>(a * t(c, v) + b);
    }
  }

  std::vector<double> kl(static_cast<std::size_t>(L));
  g.posterior.resize(static_cast<std::size_t>(L));
  g.prior.resize(static_cast<std::size_t>(L - 1));
  for (int i = 0; i < L; ++i) {
    const auto& lv = fr.ladder.levels[static_cast<std::size_t>(i)];
    auto& dq = g.posterior[static_cast<std::size_t>(i)];
    dq = GaussianGrad<T>::zeros_like(lv.d);
    const double scale = gamma * w.alpha[static_cast<std::size_t>(i)];
    if (i == L - 1) {
      auto std_normal = GaussianParams<T>::standard(lv.d.dim(), lv.d.batch());
      kl[static_cast<std::size_t>(i)] = kl_diag_gaussians(lv.d, std_normal);
      kl_diag_gaussians_backward<T>(lv.d, std_normal, scale, dq, nullptr);
    } else {
      auto& dp = g.prior[static_cast<std::size_t>(i)];
      dp = GaussianGrad<T>::zeros_like(lv.p);
      kl[static_cast<std::size_t>(i)] = kl_diag_gaussians(lv.d, lv.p);
      kl_diag_gaussians_backward<T>(lv.d, lv.p, scale, dq, &dp);
    }
  }

  std::vector<double> scores(B);
  g.scores = nn::Mat<T>::Zero(1, static_cast<Eigen::Index>(B));
  for (std::size_t n = 0; n < B; ++n) {
    const double s = fr.scores(0, static_cast<Eigen::Index>(n));
    scores[n] = s;
    if (s > kScoreClamp && s < 1.0 - kScoreClamp) {
      const double ds = labels[n] ? -1.0 / s : 1.0 / (1.0 - s);
      g.scores(0, static_cast<Eigen::Index>(n)) = static_cast<T>(gamma * w.beta * ds * inv_b);
    }
  }
  const double ce = binary_cross_entropy(scores, labels);

  out.breakdown = total_loss(std::move(dice), std::move(kl), ce, w, gamma);
  return out;
}

}  // namespace lvae
