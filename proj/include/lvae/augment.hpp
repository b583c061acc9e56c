#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <random>

#include "lvae/errors.hpp"
#include "lvae/volume.hpp"

namespace lvae {

/// Recenters on the channel-0 foreground center of mass and crops/pads to `target`.
/// Foreground is any voxel >= 0.5; padding is 0.
inline Volume crop_pad_center(const Volume& v, Dims target) {
  if (!target.positive()) throw ParameterError("crop target dims must be positive");
  double sx = 0, sy = 0, sz = 0;
  std::size_t n = 0;
  for (int z = 0; z < v.dims.z; ++z)
    for (int y = 0; y < v.dims.y; ++y)
      for (int x = 0; x < v.dims.x; ++x)
        if (v.at(0, x, y, z) >= 0.5f) {
          sx += x;
          sy += y;
          sz += z;
          ++n;
        }
  if (n == 0) throw ParameterError("crop_pad_center: channel 0 has no foreground (no center of mass)");
  const double inv = 1.0 / static_cast<double>(n);
  const int ox = static_cast<int>(std::lround(sx * inv)) - target.x / 2;
  const int oy = static_cast<int>(std::lround(sy * inv)) - target.y / 2;
  const int oz = static_cast<int>(std::lround(sz * inv)) - target.z / 2;

  Volume out(target, v.channels, v.spacing);
  for (int c = 0; c < v.channels; ++c)
    for (int z = 0; z < target.z; ++z)
      for (int y = 0; y < target.y; ++y)
        for (int x = 0; x < target.x; ++x)
          if (v.contains(x + ox, y + oy, z + oz)) out.at(c, x, y, z) = v.at(c, x + ox, y + oy, z + oz);
  return out;
}

/// Rotation angles in degrees about the x, y and z axes; applied x first.
struct RotationAngles {
  double x = 0;
  double y = 0;
  double z = 0;
};

namespace detail {

using Mat3 = std::array<std::array<double, 3>, 3>;

inline Mat3 matmul(const Mat3& a, const Mat3& b) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) r[i][j] += a[i][k] * b[k][j];
  return r;
}

inline Mat3 rotation_matrix(const RotationAngles& a) {
  const double k = std::numbers::pi / 180.0;
  double cx = std::cos(a.x * k), sx = std::sin(a.x * k);
  double cy = std::cos(a.y * k), sy = std::sin(a.y * k);
  double cz = std::cos(a.z * k), sz = std::sin(a.z * k);
  Mat3 rx{{{1, 0, 0}, {0, cx, -sx}, {0, sx, cx}}};
  Mat3 ry{{{cy, 0, sy}, {0, 1, 0}, {-sy, 0, cy}}};
  Mat3 rz{{{cz, -sz, 0}, {sz, cz, 0}, {0, 0, 1}}};
  return matmul(rz, matmul(ry, rx));
}

}  // namespace detail

/// Nearest-neighbour rotation about the geometric grid center.  Voxels whose
/// preimage falls outside the grid become 0.
inline Volume rotate(const Volume& v, const RotationAngles& angles) {
  if (angles.x == 0 && angles.y == 0 && angles.z == 0) return v;
  const auto r = detail::rotation_matrix(angles);
  const double cx = 0.5 * (v.dims.x - 1), cy = 0.5 * (v.dims.y - 1), cz = 0.5 * (v.dims.z - 1);
  Volume out(v.dims, v.channels, v.spacing);
  for (int z = 0; z < v.dims.z; ++z)
    for (int y = 0; y < v.dims.y; ++y)
      for (int x = 0; x < v.dims.x; ++x) {
        double px = x - cx, py = y - cy, pz = z - cz;
        // inverse rotation = transpose
        double qx = r[0][0] * px + r[1][0] * py + r[2][0] * pz + cx;
        double qy = r[0][1] * px + r[1][1] * py + r[2][1] * pz + cy;
        double qz = r[0][2] * px + r[1][2] * py + r[2][2] * pz + cz;
        int ix = static_cast<int>(std::lround(qx));
        int iy = static_cast<int>(std::lround(qy));
        int iz = static_cast<int>(std::lround(qz));
        if (!v.contains(ix, iy, iz)) continue;
        for (int c = 0; c < v.channels; ++c) out.at(c, x, y, z) = v.at(c, ix, iy, iz);
      }
  return out;
}

/// Random small rotation, angles drawn from N(0, sigma_deg^2) per axis.
template <class Rng>
Volume augment_rotate(const Volume& v, Rng& rng, double sigma_deg = 6.0) {
  std::normal_distribution<double> n(0.0, sigma_deg);
  RotationAngles a;
  a.x = n(rng);
  a.y = n(rng);
  a.z = n(rng);
  return rotate(v, a);
}

}  // namespace lvae
