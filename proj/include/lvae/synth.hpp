#pragma once

// Synthetic two-class shell dataset.
//
// Class 0: truncated ellipsoidal shells of near-uniform wall thickness.
// Class 1: the same family with a smaller cavity and a wall thickened inward
// inside an azimuthal sector (a septal-hypertrophy analogue), so the
// discriminative shape signal is known exactly.
//
// Channel 0 is the "relaxed" shape; channel 1 (when present) is a contracted
// copy with a smaller cavity and thicker wall.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "lvae/dataset.hpp"
#include "lvae/errors.hpp"
#include "lvae/volume.hpp"

namespace lvae {

struct SynthParams {
  Dims dims{32, 32, 32};
  int channels = 2;
  Spacing spacing{2.0, 2.0, 2.0};

  double inner_radius = 7.0;  ///< voxels
  double outer_radius = 12.0;
  double long_axis_scale = 1.25;   ///< ellipsoid stretch along z
  double center_z_fraction = 0.56; ///< shell center height as a fraction of dims.z
  double base_cut = 0.5;           ///< truncate where (z - cz)/long_axis_scale > base_cut * outer radius

  double sector_center_deg = 180.0;
  double sector_half_width_deg = 50.0;
  double thickness_increment = 3.0;  ///< voxels, class 1 only, grows into the cavity
  double cavity_shrink = 0.10;       ///< class 1 inner radius scale is (1 - cavity_shrink)

  double contracted_inner_scale = 0.65;
  double contracted_outer_scale = 0.92;

  double radius_jitter = 0.5;     ///< sd, voxels
  double thickness_jitter = 0.3;  ///< sd, voxels
  double pose_jitter = 0.7;       ///< sd of the center offset, voxels

  std::uint64_t seed = 7;

  void validate() const {
    if (!dims.positive()) throw ParameterError("synth dims must be positive");
    if (channels < 1 || channels > 2) throw ParameterError("synth channels must be 1 or 2");
    if (!(inner_radius > 0)) throw ParameterError("inner radius must be > 0");
    if (!(outer_radius > inner_radius)) throw ParameterError("outer radius must exceed inner radius");
    if (!(thickness_increment >= 0)) throw ParameterError("thickness increment must be >= 0");
    if (!(sector_half_width_deg > 0 && sector_half_width_deg <= 180))
      throw ParameterError("sector half-width must lie in (0, 180] degrees");
    if (!(cavity_shrink >= 0 && cavity_shrink < 1)) throw ParameterError("cavity shrink must lie in [0, 1)");
    if (!(long_axis_scale > 0)) throw ParameterError("long-axis scale must be > 0");
    if (radius_jitter < 0 || thickness_jitter < 0 || pose_jitter < 0)
      throw ParameterError("jitter scales must be nonnegative");
    if (!(contracted_inner_scale > 0 && contracted_outer_scale > 0))
      throw ParameterError("contracted scales must be > 0");
  }

  double nominal_cx() const { return 0.5 * (dims.x - 1); }
  double nominal_cy() const { return 0.5 * (dims.y - 1); }
  double nominal_cz() const { return center_z_fraction * dims.z; }
};

/// Angular distance in degrees, folded into [0, 180].
inline double angular_distance_deg(double a, double b) {
  double d = std::fmod(std::abs(a - b), 360.0);
  return d > 180.0 ? 360.0 - d : d;
}

/// Thickening profile over the sector: flat top over 70% of the half-width,
/// cosine taper to zero at the edge.
inline double sector_weight(const SynthParams& p, double azimuth_deg) {
  double d = angular_distance_deg(azimuth_deg, p.sector_center_deg);
  double hw = p.sector_half_width_deg;
  double flat = 0.7 * hw;
  if (d <= flat) return 1.0;
  if (d >= hw) return 0.0;
  double t = (d - flat) / (hw - flat);
  double c = std::cos(0.5 * std::numbers::pi * t);
  return c * c;
}

/// True when (x, y) lies inside the thickened azimuthal sector around the nominal long axis.
inline bool in_thickened_sector(const SynthParams& p, int x, int y) {
  double az = std::atan2(y - p.nominal_cy(), x - p.nominal_cx()) * 180.0 / std::numbers::pi;
  return angular_distance_deg(az, p.sector_center_deg) <= p.sector_half_width_deg;
}

namespace detail {

struct ShellInstance {
  double cx, cy, cz;
  double r_in, r_out;
  double increment;  // 0 for class 0
};

inline void rasterize_shell(const SynthParams& p, const ShellInstance& s, double inner_scale, double outer_scale,
                            Volume& v, int channel) {
  const double deg = 180.0 / std::numbers::pi;
  for (int z = 0; z < p.dims.z; ++z) {
    double dz = (z - s.cz) / p.long_axis_scale;
    if (dz > p.base_cut * s.r_out) continue;
    for (int y = 0; y < p.dims.y; ++y) {
      double dy = y - s.cy;
      for (int x = 0; x < p.dims.x; ++x) {
        double dx = x - s.cx;
        double rho = std::sqrt(dx * dx + dy * dy + dz * dz);
        double r_in = s.r_in;
        if (s.increment > 0) r_in -= s.increment * sector_weight(p, std::atan2(dy, dx) * deg);
        r_in = std::max(r_in, 0.0) * inner_scale;
        double r_out = s.r_out * outer_scale;
        if (rho >= r_in && rho <= r_out) v.at(channel, x, y, z) = 1.0f;
      }
    }
  }
}

}  // namespace detail

/// Generates 2*n_per_class samples: ids "c0_0000".., then "c1_0000"...
/// Every sample draws its jitter from its own generator derived from
/// (seed, label, index), so output is independent of iteration order.
inline std::vector<Sample> synth_generate(const SynthParams& p, int n_per_class) {
  p.validate();
  if (n_per_class < 1) throw ParameterError("n_per_class must be >= 1");
  std::vector<Sample> out;
  out.reserve(2 * static_cast<std::size_t>(n_per_class));
  for (int label = 0; label < 2; ++label) {
    for (int k = 0; k < n_per_class; ++k) {
      std::seed_seq seq{static_cast<std::uint32_t>(p.seed), static_cast<std::uint32_t>(p.seed >> 32),
                        static_cast<std::uint32_t>(label), static_cast<std::uint32_t>(k)};
      std::mt19937_64 rng(seq);
      std::normal_distribution<double> n01(0.0, 1.0);
      detail::ShellInstance s{};
      s.r_in = p.inner_radius + p.radius_jitter * n01(rng);
      double thickness = (p.outer_radius - p.inner_radius) + p.thickness_jitter * n01(rng);
      s.r_out = s.r_in + std::max(thickness, 0.5);
      s.cx = p.nominal_cx() + p.pose_jitter * n01(rng);
      s.cy = p.nominal_cy() + p.pose_jitter * n01(rng);
      s.cz = p.nominal_cz() + p.pose_jitter * n01(rng);
      if (label == 1) {
        s.r_in *= (1.0 - p.cavity_shrink);
        s.increment = p.thickness_increment;
      }
      Volume v(p.dims, p.channels, p.spacing);
      detail::rasterize_shell(p, s, 1.0, 1.0, v, 0);
      if (p.channels == 2)
        detail::rasterize_shell(p, s, p.contracted_inner_scale, p.contracted_outer_scale, v, 1);
      char id[32];
      std::snprintf(id, sizeof id, "c%d_%04d", label, k);
      out.push_back(Sample{id, std::move(v), label, Split::train});
    }
  }
  return out;
}

/// Mean radial foreground width (voxels) inside the flat top of the thickened
/// sector, measured on rays from the nominal long axis over the mid-height
/// band of the shell.  Works on masks and on probability maps (thresholded at 0.5).
inline double sector_wall_thickness(const Volume& v, const SynthParams& p, int channel = 0) {
  const double step = 0.25;
  const double rad = std::numbers::pi / 180.0;
  double flat = 0.7 * p.sector_half_width_deg;
  double max_r = 0.5 * std::max(p.dims.x, p.dims.y);
  int z0 = static_cast<int>(std::lround(p.nominal_cz() - 0.5 * p.outer_radius * p.long_axis_scale));
  int z1 = static_cast<int>(std::lround(p.nominal_cz()));
  double total = 0;
  int rays = 0;
  for (int z = std::max(z0, 0); z <= std::min(z1, p.dims.z - 1); ++z) {
    for (double a = -flat; a <= flat + 1e-9; a += 2.0) {
      double th = (p.sector_center_deg + a) * rad;
      double width = 0;
      for (double r = 0; r < max_r; r += step) {
        int x = static_cast<int>(std::lround(p.nominal_cx() + r * std::cos(th)));
        int y = static_cast<int>(std::lround(p.nominal_cy() + r * std::sin(th)));
        if (!v.contains(x, y, z)) break;
        if (v.at(channel, x, y, z) >= 0.5f) width += step;
      }
      total += width;
      ++rays;
    }
  }
  return rays ? total / rays : 0.0;
}

}  // namespace lvae
