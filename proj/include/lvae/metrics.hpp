#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lvae/errors.hpp"
#include "lvae/volume.hpp"

namespace lvae {

/// 2|A n B| / (|A| + |B|) on hard masks (>= 0.5 is foreground); 1 when both are empty.
inline double dice_score(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("dice_score: dims mismatch");
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    bool x = a[i] >= 0.5f, y = b[i] >= 0.5f;
    na += x;
    nb += y;
    both += x && y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

inline double dice_score(const Volume& a, const Volume& b, int channel = 0) {
  require_same_geometry(a, b, "dice_score");
  return dice_score(a.channel(channel), b.channel(channel));
}

enum class SliceAxis { x, y, z };

namespace detail {

/// Exact 1-D squared distance transform (lower envelope of parabolas) with
/// sample spacing `h`: out[i] = min_j (f[j] + ((i - j) h)^2).
inline void edt_1d(const double* f, int n, double h, double* out, std::vector<int>& v, std::vector<double>& z) {
  const double inf = std::numeric_limits<double>::infinity();
  v.assign(static_cast<std::size_t>(n), 0);
  z.assign(static_cast<std::size_t>(n) + 1, 0.0);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
      continue;
    }
    double s;
    while (true) {
      int p = v[static_cast<std::size_t>(k)];
      double qh = q * h, ph = p * h;
      s = ((f[q] + qh * qh) - (f[p] + ph * ph)) / (2.0 * (qh - ph));
      if (s <= z[static_cast<std::size_t>(k)] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    if (s <= z[static_cast<std::size_t>(k)]) {
      // only possible with k == 0 and z[0] == -inf; never taken
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = s;
    z[static_cast<std::size_t>(k) + 1] = inf;
  }
  if (k < 0) {
    for (int q = 0; q < n; ++q) out[q] = inf;
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<std::size_t>(j) + 1] < q * h) ++j;
    double d = (q - v[static_cast<std::size_t>(j)]) * h;
    out[q] = d * d + f[v[static_cast<std::size_t>(j)]];
  }
}

/// Squared Euclidean distance (mm^2) from every pixel of a w x h slice to the nearest set pixel.
inline std::vector<double> squared_edt_2d(const std::vector<char>& set, int w, int h, double su, double sv) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> g(static_cast<std::size_t>(w) * h);
  std::vector<double> col(static_cast<std::size_t>(h)), colout(static_cast<std::size_t>(h));
  std::vector<int> v;
  std::vector<double> z;
  for (int u = 0; u < w; ++u) {
    for (int t = 0; t < h; ++t) col[static_cast<std::size_t>(t)] = set[static_cast<std::size_t>(t) * w + u] ? 0.0 : inf;
    edt_1d(col.data(), h, sv, colout.data(), v, z);
    for (int t = 0; t < h; ++t) g[static_cast<std::size_t>(t) * w + u] = colout[static_cast<std::size_t>(t)];
  }
  std::vector<double> out(g.size());
  for (int t = 0; t < h; ++t) edt_1d(g.data() + static_cast<std::size_t>(t) * w, w, su, out.data() + static_cast<std::size_t>(t) * w, v, z);
  return out;
}

struct SliceView {
  int w, h, n;          // in-plane size and slice count
  double su, sv;        // in-plane spacing
};

inline SliceView slice_view(const Volume& v, SliceAxis axis) {
  switch (axis) {
    case SliceAxis::x: return {v.dims.y, v.dims.z, v.dims.x, v.spacing.y, v.spacing.z};
    case SliceAxis::y: return {v.dims.x, v.dims.z, v.dims.y, v.spacing.x, v.spacing.z};
    case SliceAxis::z: return {v.dims.x, v.dims.y, v.dims.z, v.spacing.x, v.spacing.y};
  }
  return {v.dims.x, v.dims.y, v.dims.z, v.spacing.x, v.spacing.y};
}

inline std::vector<char> extract_slice(const Volume& v, int channel, SliceAxis axis, int s) {
  auto sv = slice_view(v, axis);
  std::vector<char> out(static_cast<std::size_t>(sv.w) * sv.h);
  for (int t = 0; t < sv.h; ++t)
    for (int u = 0; u < sv.w; ++u) {
      float val = axis == SliceAxis::z   ? v.at(channel, u, t, s)
                  : axis == SliceAxis::y ? v.at(channel, u, s, t)
                                         : v.at(channel, s, u, t);
      out[static_cast<std::size_t>(t) * sv.w + u] = val >= 0.5f;
    }
  return out;
}

}  // namespace detail

/// Symmetric Hausdorff distance (mm) between two nonempty pixel sets of one slice.
inline double hausdorff_2d(const std::vector<char>& a, const std::vector<char>& b, int w, int h, double su,
                           double sv) {
  auto da = detail::squared_edt_2d(a, w, h, su, sv);
  auto db = detail::squared_edt_2d(b, w, h, su, sv);
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]) worst = std::max(worst, db[i]);
    if (b[i]) worst = std::max(worst, da[i]);
  }
  return std::sqrt(worst);
}

/// Mean over slices of the symmetric 2-D Hausdorff distance (mm).  Slices where
/// only one mask has foreground contribute the in-plane diagonal; slices where
/// both are empty are skipped.  Throws MetricError when no slice has
/// foreground in both masks.
inline double hausdorff_2d_slicewise(const Volume& a, const Volume& b, int channel = 0,
                                     SliceAxis axis = SliceAxis::z) {
  require_same_geometry(a, b, "hausdorff_2d_slicewise");
  auto sv = detail::slice_view(a, axis);
  const double diagonal = std::hypot(sv.w * sv.su, sv.h * sv.sv);
  double total = 0;
  int counted = 0, common = 0;
  for (int s = 0; s < sv.n; ++s) {
    auto sa = detail::extract_slice(a, channel, axis, s);
    auto sb = detail::extract_slice(b, channel, axis, s);
    bool ea = std::none_of(sa.begin(), sa.end(), [](char c) { return c; });
    bool eb = std::none_of(sb.begin(), sb.end(), [](char c) { return c; });
    if (ea && eb) continue;
    ++counted;
    if (ea || eb) {
      total += diagonal;
      continue;
    }
    ++common;
    total += hausdorff_2d(sa, sb, sv.w, sv.h, sv.su, sv.sv);
  }
  if (common == 0) throw MetricError("hausdorff_2d_slicewise: no slice has foreground in both masks");
  return total / counted;
}

struct ClassificationRates {
  double accuracy = 0;
  std::optional<double> sensitivity;  ///< empty when there are no positives
  std::optional<double> specificity;  ///< empty when there are no negatives
  std::size_t positives = 0, negatives = 0;
};

/// Confusion-matrix rates with class 1 positive; a score equal to the threshold is positive.
inline ClassificationRates classification_metrics(std::span<const double> scores, std::span<const int> labels,
                                                  double threshold = 0.5) {
  if (scores.size() != labels.size()) throw ShapeError("classification_metrics: length mismatch");
  if (scores.empty()) throw MetricError("classification_metrics: no samples");
  std::size_t tp = 0, tn = 0, p = 0, n = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ParameterError("classification_metrics: labels must be 0 or 1");
    bool pred = scores[i] >= threshold;
    if (labels[i] == 1) {
      ++p;
      tp += pred;
    } else {
      ++n;
      tn += !pred;
    }
  }
  ClassificationRates r;
  r.positives = p;
  r.negatives = n;
  r.accuracy = static_cast<double>(tp + tn) / static_cast<double>(p + n);
  if (p) r.sensitivity = static_cast<double>(tp) / static_cast<double>(p);
  if (n) r.specificity = static_cast<double>(tn) / static_cast<double>(n);
  return r;
}

struct Point2 {
  double x = 0, y = 0;
};

/// Distance between the two class centroids over the pooled within-class
/// standard deviation sqrt(sum |p - c_k|^2 / ((N - 2) * 2)).  +inf when the pooled sd is 0.
inline double cluster_separation(std::span<const Point2> points, std::span<const int> labels) {
  if (points.size() != labels.size()) throw ShapeError("cluster_separation: length mismatch");
  double sx[2] = {0, 0}, sy[2] = {0, 0};
  std::size_t cnt[2] = {0, 0};
  for (std::size_t i = 0; i < points.size(); ++i) {
    int l = labels[i];
    if (l != 0 && l != 1) throw ParameterError("cluster_separation: labels must be 0 or 1");
    sx[l] += points[i].x;
    sy[l] += points[i].y;
    ++cnt[l];
  }
  if (cnt[0] < 2 || cnt[1] < 2) throw MetricError("cluster_separation: need at least 2 points per class");
  double cx[2], cy[2];
  for (int k = 0; k < 2; ++k) {
    cx[k] = sx[k] / static_cast<double>(cnt[k]);
    cy[k] = sy[k] / static_cast<double>(cnt[k]);
  }
  double ss = 0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    int l = labels[i];
    ss += (points[i].x - cx[l]) * (points[i].x - cx[l]) + (points[i].y - cy[l]) * (points[i].y - cy[l]);
  }
  const double pooled = std::sqrt(ss / (static_cast<double>(points.size() - 2) * 2.0));
  const double dist = std::hypot(cx[1] - cx[0], cy[1] - cy[0]);
  if (pooled == 0) return dist == 0 ? 0.0 : std::numeric_limits<double>::infinity();
  return dist / pooled;
}

struct MeanSd {
  double mean = 0;
  double sd = 0;
};

/// Sample mean and (n - 1) standard deviation.
inline MeanSd mean_sd(std::span<const double> xs) {
  MeanSd r;
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return r;
}

}  // namespace lvae
