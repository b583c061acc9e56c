#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "lvae/dataset.hpp"
#include "lvae/errors.hpp"
#include "lvae/evaluate.hpp"
#include "lvae/metrics.hpp"
#include "lvae/model.hpp"
#include "lvae/svol.hpp"

namespace lvae {

struct LatentEmbedding {
  std::string id;
  int label = 0;
  Point2 coords;
};

/// Top-level likelihood means (eval mode) for every sample.
template <class T>
std::vector<LatentEmbedding> embed(const Model<T>& model, const std::vector<const Sample*>& samples) {
  if (model.config().latent_dims.back() != 2) throw ShapeError("embed: top latent level is not 2-dimensional");
  std::vector<LatentEmbedding> out;
  for (auto& p : predict(model, samples)) out.push_back({p.id, p.label, {p.top_mean[0], p.top_mean[1]}});
  return out;
}

inline std::vector<Point2> coordinates(const std::vector<LatentEmbedding>& e, int label = -1) {
  std::vector<Point2> pts;
  for (const auto& x : e)
    if (label < 0 || x.label == label) pts.push_back(x.coords);
  return pts;
}

// ------------------------------------------------------------ kernel density

/// Gaussian-kernel density with a diagonal bandwidth.
struct DensityModel {
  std::vector<Point2> support;
  double hx = 1, hy = 1;
  int label = 0;

  double operator()(Point2 q) const {
    const double norm = 1.0 / (2.0 * std::numbers::pi * hx * hy * static_cast<double>(support.size()));
    double s = 0;
    for (const auto& p : support) {
      const double u = (q.x - p.x) / hx, v = (q.y - p.y) / hy;
      s += std::exp(-0.5 * (u * u + v * v));
    }
    return s * norm;
  }
};

/// Scott's rule per dimension, h = n^(-1/6) * sd.  A zero spread falls back
/// to a bandwidth of 1e-3 so the density stays proper.
inline DensityModel fit_kde(const std::vector<Point2>& points, int label = 0) {
  if (points.size() < 2) throw ParameterError("fit_kde: need at least 2 points");
  std::vector<double> xs, ys;
  for (const auto& p : points) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw ParameterError("fit_kde: non-finite point");
    xs.push_back(p.x);
    ys.push_back(p.y);
  }
  const double f = std::pow(static_cast<double>(points.size()), -1.0 / 6.0);
  constexpr double floor = 1e-3;
  DensityModel d;
  d.support = points;
  d.hx = std::max(f * mean_sd(xs).sd, floor);
  d.hy = std::max(f * mean_sd(ys).sd, floor);
  d.label = label;
  return d;
}

/// Smoothed bootstrap: a uniformly chosen support point plus kernel noise.
template <class Rng>
std::vector<Point2> sample_class(const DensityModel& d, std::size_t n, Rng& rng) {
  if (n < 1) throw ParameterError("sample_class: n must be >= 1");
  if (d.support.empty()) throw ParameterError("sample_class: empty density");
  std::uniform_int_distribution<std::size_t> pick(0, d.support.size() - 1);
  std::normal_distribution<double> z(0.0, 1.0);
  std::vector<Point2> out(n);
  for (auto& p : out) {
    const auto& s = d.support[pick(rng)];
    p.x = s.x + d.hx * z(rng);
    p.y = s.y + d.hy * z(rng);
  }
  return out;
}

// ------------------------------------------------------------ decoding latent points

/// Prior-only decodes of top-level points, in chunks; probabilities in (0, 1).
template <class T>
std::vector<Volume> decode_latent_points(const Model<T>& model, const std::vector<Point2>& pts,
                                         Spacing spacing = {}, std::size_t chunk = 64) {
  const auto& cfg = model.config();
  if (cfg.latent_dims.back() != 2) throw ShapeError("decode_latent_points: top latent level is not 2-dimensional");
  std::vector<Volume> out;
  out.reserve(pts.size());
  for (std::size_t b = 0; b < pts.size(); b += chunk) {
    const std::size_t e = std::min(pts.size(), b + chunk);
    nn::Mat<T> z(2, static_cast<Eigen::Index>(e - b));
    for (std::size_t i = b; i < e; ++i) {
      z(0, static_cast<Eigen::Index>(i - b)) = static_cast<T>(pts[i].x);
      z(1, static_cast<Eigen::Index>(i - b)) = static_cast<T>(pts[i].y);
    }
    auto fr = model.decode_prior(z);
    for (auto& r : fr.recon) out.push_back(to_volume<T>(r, cfg.input_dims, spacing));
  }
  return out;
}

template <class T>
Volume decode_latent_point(const Model<T>& model, Point2 z, Spacing spacing = {}) {
  return decode_latent_points(model, {z}, spacing).front();
}

struct TemplateShape {
  Volume mean;    ///< voxelwise average of decoded probabilities
  Volume binary;  ///< mean >= 0.5
  std::size_t n = 0;
  int label = 0;
};

/// Average of n prior-only decodes of points drawn from the class density.
template <class T, class Rng>
TemplateShape class_template(const Model<T>& model, const DensityModel& d, std::size_t n, Rng& rng,
                             Spacing spacing = {}) {
  if (n < 1) throw ParameterError("class_template: n must be >= 1");
  auto pts = sample_class(d, n, rng);
  const auto& cfg = model.config();
  std::vector<double> acc(static_cast<std::size_t>(cfg.input_channels) * cfg.input_dims.voxels(), 0.0);
  constexpr std::size_t chunk = 64;
  for (std::size_t b = 0; b < n; b += chunk) {
    std::vector<Point2> part(pts.begin() + static_cast<std::ptrdiff_t>(b),
                             pts.begin() + static_cast<std::ptrdiff_t>(std::min(n, b + chunk)));
    for (const auto& v : decode_latent_points(model, part, spacing, chunk))
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += v.data[i];
  }
  TemplateShape t;
  t.n = n;
  t.label = d.label;
  t.mean = Volume(cfg.input_dims, cfg.input_channels, spacing);
  for (std::size_t i = 0; i < acc.size(); ++i) t.mean.data[i] = static_cast<float>(acc[i] / static_cast<double>(n));
  t.binary = binarize(t.mean);
  return t;
}

/// Voxelwise a.mean - b.mean.
inline Volume diff_map(const TemplateShape& a, const TemplateShape& b) {
  require_same_geometry(a.mean, b.mean, "diff_map");
  Volume d = a.mean;
  for (std::size_t i = 0; i < d.data.size(); ++i) d.data[i] = a.mean.data[i] - b.mean.data[i];
  return d;
}

/// |(v - v_ref) / v_ref| * 100.
inline double volume_rate(double v, double v_ref) {
  if (!(v_ref > 0)) throw ParameterError("volume_rate: reference volume must be > 0");
  return std::abs((v - v_ref) / v_ref) * 100.0;
}

/// Background voxels of `channel` not reachable from the slice border within
/// their z-slice (4-connectivity): the enclosed cavity of a shell.
inline std::size_t enclosed_voxel_count(const Volume& v, int channel = 0) {
  const int W = v.dims.x, H = v.dims.y;
  std::size_t count = 0;
  std::vector<char> seen(static_cast<std::size_t>(W) * H);
  std::vector<int> stack;
  for (int z = 0; z < v.dims.z; ++z) {
    std::fill(seen.begin(), seen.end(), 0);
    auto bg = [&](int x, int y) { return v.at(channel, x, y, z) < 0.5f; };
    auto push = [&](int x, int y) {
      const std::size_t i = static_cast<std::size_t>(y) * W + x;
      if (!seen[i] && bg(x, y)) {
        seen[i] = 1;
        stack.push_back(static_cast<int>(i));
      }
    };
    for (int x = 0; x < W; ++x) {
      push(x, 0);
      push(x, H - 1);
    }
    for (int y = 0; y < H; ++y) {
      push(0, y);
      push(W - 1, y);
    }
    while (!stack.empty()) {
      const int i = stack.back();
      stack.pop_back();
      const int x = i % W, y = i / W;
      if (x > 0) push(x - 1, y);
      if (x + 1 < W) push(x + 1, y);
      if (y > 0) push(x, y - 1);
      if (y + 1 < H) push(x, y + 1);
    }
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        if (bg(x, y) && !seen[static_cast<std::size_t>(y) * W + x]) ++count;
  }
  return count;
}

// ------------------------------------------------------------ latent grid

struct LatentBounds {
  double xmin = -1, xmax = 1, ymin = -1, ymax = 1;
};

/// Bounding box of the points, widened by `margin` of its extent (split evenly on both sides).
inline LatentBounds default_bounds(const std::vector<Point2>& pts, double margin = 0.2) {
  if (pts.empty()) throw ParameterError("default_bounds: no points");
  LatentBounds b{pts[0].x, pts[0].x, pts[0].y, pts[0].y};
  for (const auto& p : pts) {
    b.xmin = std::min(b.xmin, p.x);
    b.xmax = std::max(b.xmax, p.x);
    b.ymin = std::min(b.ymin, p.y);
    b.ymax = std::max(b.ymax, p.y);
  }
  const double wx = std::max(b.xmax - b.xmin, 1e-6), wy = std::max(b.ymax - b.ymin, 1e-6);
  b.xmin -= 0.5 * margin * wx;
  b.xmax += 0.5 * margin * wx;
  b.ymin -= 0.5 * margin * wy;
  b.ymax += 0.5 * margin * wy;
  return b;
}

struct GridNode {
  int ix = 0, iy = 0;
  Point2 z;
  Volume volume;
};

/// Node (ix, iy) sits at xmin + ix * (xmax - xmin) / (rx - 1), likewise for y.  Row-major in iy.
template <class T>
std::vector<GridNode> latent_grid(const Model<T>& model, const LatentBounds& b, int rx, int ry, Spacing spacing = {}) {
  if (rx < 2 || ry < 2) throw ParameterError("latent_grid: resolution must be >= 2 per axis");
  if (!std::isfinite(b.xmin) || !std::isfinite(b.xmax) || !std::isfinite(b.ymin) || !std::isfinite(b.ymax))
    throw ParameterError("latent_grid: bounds must be finite");
  std::vector<GridNode> nodes;
  std::vector<Point2> pts;
  for (int iy = 0; iy < ry; ++iy)
    for (int ix = 0; ix < rx; ++ix) {
      GridNode n;
      n.ix = ix;
      n.iy = iy;
      n.z = {b.xmin + ix * (b.xmax - b.xmin) / (rx - 1), b.ymin + iy * (b.ymax - b.ymin) / (ry - 1)};
      pts.push_back(n.z);
      nodes.push_back(std::move(n));
    }
  auto vols = decode_latent_points(model, pts, spacing);
  for (std::size_t i = 0; i < nodes.size(); ++i) nodes[i].volume = std::move(vols[i]);
  return nodes;
}

// ------------------------------------------------------------ images

struct GrayImage {
  int width = 0, height = 0;
  std::vector<std::uint8_t> pixels;
};

inline void write_pgm(const GrayImage& img, const std::filesystem::path& path) {
  std::string out = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  write_file_bytes(path, out);
}

/// Central x-plane (y horizontal, z vertical with z up) of one channel, values scaled to 0..255.
inline GrayImage mid_plane(const Volume& v, int channel = 0) {
  GrayImage img{v.dims.y, v.dims.z, {}};
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  const int x = v.dims.x / 2;
  for (int z = 0; z < v.dims.z; ++z)
    for (int y = 0; y < v.dims.y; ++y) {
      float val = std::clamp(v.at(channel, x, y, z), 0.0f, 1.0f);
      img.pixels[static_cast<std::size_t>(v.dims.z - 1 - z) * img.width + y] =
          static_cast<std::uint8_t>(std::lround(val * 255.0f));
    }
  return img;
}

/// Tiles mid-planes of the grid volumes; row iy = ry - 1 is drawn at the top.
inline GrayImage contact_sheet(const std::vector<GridNode>& nodes, int channel = 0) {
  if (nodes.empty()) return {};
  int rx = 0, ry = 0;
  for (const auto& n : nodes) {
    rx = std::max(rx, n.ix + 1);
    ry = std::max(ry, n.iy + 1);
  }
  const int tw = nodes[0].volume.dims.y, th = nodes[0].volume.dims.z, gap = 1;
  GrayImage sheet{rx * (tw + gap) + gap, ry * (th + gap) + gap, {}};
  sheet.pixels.assign(static_cast<std::size_t>(sheet.width) * sheet.height, 128);
  for (const auto& n : nodes) {
    GrayImage tile = mid_plane(n.volume, channel);
    const int ox = gap + n.ix * (tw + gap), oy = gap + (ry - 1 - n.iy) * (th + gap);
    for (int r = 0; r < th; ++r)
      std::copy_n(tile.pixels.begin() + static_cast<std::ptrdiff_t>(r) * tw, tw,
                  sheet.pixels.begin() + static_cast<std::ptrdiff_t>(oy + r) * sheet.width + ox);
  }
  return sheet;
}

/// Scatter plot of embeddings: class 0 grey, class 1 white, on black.
inline GrayImage scatter_image(const std::vector<LatentEmbedding>& e, int size = 256) {
  GrayImage img{size, size, std::vector<std::uint8_t>(static_cast<std::size_t>(size) * size, 0)};
  if (e.empty()) return img;
  auto b = default_bounds(coordinates(e), 0.1);
  for (const auto& p : e) {
    int px = static_cast<int>(std::lround((p.coords.x - b.xmin) / (b.xmax - b.xmin) * (size - 1)));
    int py = size - 1 - static_cast<int>(std::lround((p.coords.y - b.ymin) / (b.ymax - b.ymin) * (size - 1)));
    const std::uint8_t c = p.label ? 255 : 110;
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        int x = px + dx, y = py + dy;
        if (x >= 0 && x < size && y >= 0 && y < size) img.pixels[static_cast<std::size_t>(y) * size + x] = c;
      }
  }
  return img;
}

// ------------------------------------------------------------ latent CSV

inline void export_latents(const std::vector<LatentEmbedding>& e, const std::filesystem::path& path) {
  std::string out = "id,label,dim1,dim2\n";
  for (const auto& x : e) {
    if (x.id.find_first_of(",\n\"") != std::string::npos)
      throw ParameterError("export_latents: id '" + x.id + "' contains a delimiter");
    out += x.id + "," + std::to_string(x.label) + "," + format_number(x.coords.x) + "," + format_number(x.coords.y) +
           "\n";
  }
  write_file_bytes(path, out);
}

inline std::vector<LatentEmbedding> import_latents(const std::filesystem::path& path) {
  std::istringstream in(read_file_bytes(path));
  std::string line;
  if (!std::getline(in, line) || line != "id,label,dim1,dim2")
    throw FormatError("latent CSV: bad header in " + path.string(), 0);
  std::vector<LatentEmbedding> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t pos = 0;
    for (std::size_t c; (c = line.find(',', pos)) != std::string::npos; pos = c + 1) f.push_back(line.substr(pos, c - pos));
    f.push_back(line.substr(pos));
    if (f.size() != 4) throw FormatError("latent CSV: line " + std::to_string(lineno) + " needs 4 fields", 0);
    LatentEmbedding x;
    x.id = f[0];
    auto parse = [&](const std::string& s, auto& dst) {
      auto r = std::from_chars(s.data(), s.data() + s.size(), dst);
      if (r.ec != std::errc() || r.ptr != s.data() + s.size())
        throw FormatError("latent CSV: bad number '" + s + "' on line " + std::to_string(lineno), 0);
    };
    parse(f[1], x.label);
    parse(f[2], x.coords.x);
    parse(f[3], x.coords.y);
    out.push_back(std::move(x));
  }
  return out;
}

}  // namespace lvae
