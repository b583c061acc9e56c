#pragma once

// Template comparison against the synthetic generator's known thickening.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "json.hpp"

#include "lvae/latent.hpp"
#include "lvae/synth.hpp"

namespace lvae {

/// Share of the top-decile positive diff voxels (all channels pooled) whose
/// (x, y) lies inside the generator's thickened sector.  NaN without positives.
inline double top_decile_sector_fraction(const Volume& diff, const SynthParams& p, std::size_t* used = nullptr) {
  struct Hit {
    float value;
    bool inside;
  };
  std::vector<Hit> pos;
  for (int c = 0; c < diff.channels; ++c)
    for (int z = 0; z < diff.dims.z; ++z)
      for (int y = 0; y < diff.dims.y; ++y)
        for (int x = 0; x < diff.dims.x; ++x)
          if (float d = diff.at(c, x, y, z); d > 0) pos.push_back({d, in_thickened_sector(p, x, y)});
  if (used) *used = 0;
  if (pos.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t k = (pos.size() + 9) / 10;
  std::partial_sort(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(k), pos.end(),
                    [](const Hit& a, const Hit& b) { return a.value > b.value; });
  std::size_t inside = 0;
  for (std::size_t i = 0; i < k; ++i) inside += pos[i].inside;
  if (used) *used = k;
  return static_cast<double>(inside) / static_cast<double>(k);
}

struct TemplateAnalysis {
  double thickness[2] = {0, 0};        ///< sector wall thickness of the binarized templates, channel 0
  std::size_t foreground[2] = {0, 0};  ///< wall voxels, channel 0
  std::size_t cavity[2] = {0, 0};      ///< enclosed cavity voxels, channel 0
  double wall_volume_rate = 0;         ///< class 1 wall against class 0, percent
  double cavity_volume_rate = 0;       ///< class 1 cavity against class 0, percent
  double top_decile_in_sector = 0;
  std::size_t top_decile_voxels = 0;
};

/// Compares the class-1 template against the class-0 template.
inline TemplateAnalysis analyze_templates(const TemplateShape& t0, const TemplateShape& t1, const SynthParams& p) {
  TemplateAnalysis a;
  const TemplateShape* t[2] = {&t0, &t1};
  for (int k = 0; k < 2; ++k) {
    a.thickness[k] = sector_wall_thickness(t[k]->binary, p, 0);
    a.foreground[k] = foreground_count(t[k]->binary, 0);
    a.cavity[k] = enclosed_voxel_count(t[k]->binary, 0);
  }
  auto rate = [](std::size_t v, std::size_t ref) {
    return ref ? volume_rate(static_cast<double>(v), static_cast<double>(ref)) : std::numeric_limits<double>::quiet_NaN();
  };
  a.wall_volume_rate = rate(a.foreground[1], a.foreground[0]);
  a.cavity_volume_rate = rate(a.cavity[1], a.cavity[0]);
  a.top_decile_in_sector = top_decile_sector_fraction(diff_map(t1, t0), p, &a.top_decile_voxels);
  return a;
}

inline nlohmann::json to_json(const TemplateAnalysis& a) {
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
  return {{"sector_thickness", {a.thickness[0], a.thickness[1]}},
          {"wall_voxels", {a.foreground[0], a.foreground[1]}},
          {"cavity_voxels", {a.cavity[0], a.cavity[1]}},
          {"wall_volume_rate_percent", num(a.wall_volume_rate)},
          {"cavity_volume_rate_percent", num(a.cavity_volume_rate)},
          {"top_decile_in_sector", num(a.top_decile_in_sector)},
          {"top_decile_voxels", a.top_decile_voxels}};
}

/// Fraction of grid lines along the dominant axis of `direction` whose
/// binarized sector thickness is monotone (non-strictly) across the line.
/// Steps against the trend of at most `tolerance` voxels are ignored.
inline double monotone_line_fraction(const std::vector<GridNode>& nodes, const SynthParams& p, Point2 direction,
                                     double tolerance = 0) {
  if (!(tolerance >= 0)) throw ParameterError("monotone_line_fraction: tolerance must be >= 0");
  int rx = 0, ry = 0;
  for (const auto& n : nodes) {
    rx = std::max(rx, n.ix + 1);
    ry = std::max(ry, n.iy + 1);
  }
  std::vector<double> th(nodes.size());
  for (std::size_t i = 0; i < nodes.size(); ++i) th[i] = sector_wall_thickness(nodes[i].volume, p, 0);
  auto at = [&](int ix, int iy) { return th[static_cast<std::size_t>(iy) * rx + ix]; };
  const bool along_x = std::abs(direction.x) >= std::abs(direction.y);
  const int lines = along_x ? ry : rx, len = along_x ? rx : ry;
  if (lines == 0) return 0;
  int monotone = 0;
  for (int l = 0; l < lines; ++l) {
    bool up = true, down = true;
    for (int s = 1; s < len; ++s) {
      const double prev = along_x ? at(s - 1, l) : at(l, s - 1), cur = along_x ? at(s, l) : at(l, s);
      up = up && cur >= prev - tolerance;
      down = down && cur <= prev + tolerance;
    }
    monotone += up || down;
  }
  return static_cast<double>(monotone) / lines;
}

}  // namespace lvae
