#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "lvae/errors.hpp"

namespace lvae {

struct Dims {
  int x = 0;
  int y = 0;
  int z = 0;

  std::size_t voxels() const { return static_cast<std::size_t>(x) * y * z; }
  bool positive() const { return x > 0 && y > 0 && z > 0; }
  friend bool operator==(const Dims&, const Dims&) = default;
};

inline std::string to_string(const Dims& d) {
  return std::to_string(d.x) + "x" + std::to_string(d.y) + "x" + std::to_string(d.z);
}

/// Physical voxel size in mm.
struct Spacing {
  double x = 1.0;
  double y = 1.0;
  double z = 1.0;

  friend bool operator==(const Spacing&, const Spacing&) = default;
};

/// Multi-channel 3D volume, channel-major, x fastest.
///
/// Masks hold exactly 0 or 1; model outputs hold probabilities in [0, 1];
/// difference maps may be signed.
struct Volume {
  Dims dims;
  int channels = 1;
  Spacing spacing;
  std::vector<float> data;

  Volume() = default;
  Volume(Dims d, int c, Spacing s = {})
      : dims(d), channels(c), spacing(s), data(static_cast<std::size_t>(c) * d.voxels(), 0.0f) {
    if (!d.positive()) throw ParameterError("volume dims must be positive, got " + to_string(d));
    if (c < 1) throw ParameterError("volume channel count must be >= 1");
    if (!(s.x > 0 && s.y > 0 && s.z > 0)) throw ParameterError("volume spacing must be strictly positive");
  }

  std::size_t voxels_per_channel() const { return dims.voxels(); }

  std::size_t index(int c, int x, int y, int z) const {
    return static_cast<std::size_t>(c) * dims.voxels() +
           (static_cast<std::size_t>(z) * dims.y + y) * dims.x + x;
  }
  float& at(int c, int x, int y, int z) { return data[index(c, x, y, z)]; }
  float at(int c, int x, int y, int z) const { return data[index(c, x, y, z)]; }

  bool contains(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < dims.x && y < dims.y && z < dims.z;
  }

  std::span<float> channel(int c) {
    return {data.data() + static_cast<std::size_t>(c) * dims.voxels(), dims.voxels()};
  }
  std::span<const float> channel(int c) const {
    return {data.data() + static_cast<std::size_t>(c) * dims.voxels(), dims.voxels()};
  }

  bool is_mask() const {
    return std::all_of(data.begin(), data.end(), [](float v) { return v == 0.0f || v == 1.0f; });
  }

  /// Throws if the structural invariants do not hold.
  void validate() const {
    if (!dims.positive()) throw ParameterError("volume dims must be positive");
    if (channels < 1) throw ParameterError("volume channel count must be >= 1");
    if (!(spacing.x > 0 && spacing.y > 0 && spacing.z > 0))
      throw ParameterError("volume spacing must be strictly positive");
    if (data.size() != static_cast<std::size_t>(channels) * dims.voxels())
      throw ShapeError("volume data length does not match channels * dx * dy * dz");
  }

  friend bool operator==(const Volume&, const Volume&) = default;
};

inline std::size_t foreground_count(const Volume& v, int channel) {
  auto ch = v.channel(channel);
  return static_cast<std::size_t>(std::count_if(ch.begin(), ch.end(), [](float x) { return x >= 0.5f; }));
}

/// Threshold at 0.5 into a mask with the same geometry.
inline Volume binarize(const Volume& v, float threshold = 0.5f) {
  Volume out = v;
  for (auto& x : out.data) x = x >= threshold ? 1.0f : 0.0f;
  return out;
}

inline Volume extract_channel(const Volume& v, int c) {
  Volume out(v.dims, 1, v.spacing);
  auto src = v.channel(c);
  std::copy(src.begin(), src.end(), out.data.begin());
  return out;
}

inline void require_same_geometry(const Volume& a, const Volume& b, const char* what) {
  if (a.dims != b.dims || a.channels != b.channels)
    throw ShapeError(std::string(what) + ": volume dims mismatch (" + to_string(a.dims) + "x" +
                     std::to_string(a.channels) + " vs " + to_string(b.dims) + "x" +
                     std::to_string(b.channels) + ")");
}

}  // namespace lvae
