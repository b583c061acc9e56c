#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "lvae/explain.hpp"
#include "lvae/latent.hpp"

using namespace lvae;
namespace fs = std::filesystem;

namespace {

std::vector<Point2> cloud(std::size_t n, std::uint64_t seed, double cx = 0, double cy = 0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> x(cx, 1.0), y(cy, 0.5);
  std::vector<Point2> pts(n);
  for (auto& p : pts) p = {x(rng), y(rng)};
  return pts;
}

Model<float> mini_model(std::uint64_t seed = 1) {
  Model<float> m(support::miniature_config());
  std::mt19937_64 rng(seed);
  m.initialize(rng);
  return m;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("lvae_latent_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Kde, IntegratesToOne) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    auto d = fit_kde(cloud(40, seed));
    double xmin = 1e9, xmax = -1e9, ymin = 1e9, ymax = -1e9;
    for (const auto& p : d.support) {
      xmin = std::min(xmin, p.x);
      xmax = std::max(xmax, p.x);
      ymin = std::min(ymin, p.y);
      ymax = std::max(ymax, p.y);
    }
    xmin -= 6 * d.hx;
    xmax += 6 * d.hx;
    ymin -= 6 * d.hy;
    ymax += 6 * d.hy;
    const int n = 400;
    const double dx = (xmax - xmin) / n, dy = (ymax - ymin) / n;
    double total = 0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) total += d({xmin + (i + 0.5) * dx, ymin + (j + 0.5) * dy});
    EXPECT_NEAR(total * dx * dy, 1.0, 0.01);
  }
}

TEST(Kde, ScottBandwidth) {
  auto pts = cloud(64, 4);
  auto d = fit_kde(pts);
  double mx = 0, my = 0;
  for (const auto& p : pts) {
    mx += p.x;
    my += p.y;
  }
  mx /= 64;
  my /= 64;
  double sx = 0, sy = 0;
  for (const auto& p : pts) {
    sx += (p.x - mx) * (p.x - mx);
    sy += (p.y - my) * (p.y - my);
  }
  const double factor = std::pow(64.0, -1.0 / 6.0);
  EXPECT_NEAR(d.hx, factor * std::sqrt(sx / 63), 1e-12);
  EXPECT_NEAR(d.hy, factor * std::sqrt(sy / 63), 1e-12);
}

TEST(Kde, SupportBeatsFarPointAndIsNonnegative) {
  auto d = fit_kde(cloud(20, 5));
  for (const auto& p : d.support) EXPECT_GE(d(p), d({p.x + 10 * d.hx + 100, p.y + 10 * d.hy + 100}));
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(-50, 50);
  for (int i = 0; i < 1000; ++i) EXPECT_GE(d({u(rng), u(rng)}), 0.0);
}

TEST(Kde, IdenticalPointsPeakAtThatPoint) {
  auto d = fit_kde({{1.5, -2.0}, {1.5, -2.0}});
  EXPECT_EQ(d.hx, 1e-3);
  const double peak = d({1.5, -2.0});
  for (double e : {1e-4, 1e-3, 1e-2}) {
    EXPECT_LT(d({1.5 + e, -2.0}), peak);
    EXPECT_LT(d({1.5, -2.0 - e}), peak);
  }
}

TEST(Kde, TooFewPointsRejected) {
  EXPECT_THROW(fit_kde({}), ParameterError);
  EXPECT_THROW(fit_kde({{0, 0}}), ParameterError);
}

TEST(SampleClass, MeanWithinThreeStandardErrors) {
  auto d = fit_kde(cloud(30, 7, 2.0, -1.0));
  double mx = 0, my = 0, vx = 0, vy = 0;
  for (const auto& p : d.support) {
    mx += p.x / 30;
    my += p.y / 30;
  }
  for (const auto& p : d.support) {
    vx += (p.x - mx) * (p.x - mx) / 30;
    vy += (p.y - my) * (p.y - my) / 30;
  }
  // mixture variance: spread of the support plus the kernel
  const double se_x = std::sqrt((vx + d.hx * d.hx) / 1e5), se_y = std::sqrt((vy + d.hy * d.hy) / 1e5);
  std::mt19937_64 rng(8);
  auto s = sample_class(d, 100000, rng);
  double sx = 0, sy = 0;
  for (const auto& p : s) {
    sx += p.x;
    sy += p.y;
  }
  EXPECT_NEAR(sx / 1e5, mx, 3 * se_x);
  EXPECT_NEAR(sy / 1e5, my, 3 * se_y);
}

TEST(SampleClass, SeededReproducibilityAndPreconditions) {
  auto d = fit_kde(cloud(10, 9));
  std::mt19937_64 a(3), b(3);
  auto x = sample_class(d, 50, a), y = sample_class(d, 50, b);
  for (std::size_t i = 0; i < 50; ++i) {
    EXPECT_EQ(x[i].x, y[i].x);
    EXPECT_EQ(x[i].y, y[i].y);
  }
  EXPECT_THROW(sample_class(d, 0, a), ParameterError);
}

TEST(Decode, DeterministicWithConfiguredDims) {
  auto m = mini_model();
  auto a = decode_latent_point(m, {0.3, -0.7}), b = decode_latent_point(m, {0.3, -0.7});
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.dims, (Dims{8, 8, 8}));
  EXPECT_EQ(a.channels, 2);
  for (float v : a.data) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
  auto batch = decode_latent_points(m, {{0.3, -0.7}, {1, 1}, {0.3, -0.7}}, {}, 2);
  EXPECT_EQ(batch[0], a);
  EXPECT_EQ(batch[2], a);
}

TEST(Templates, SingleSampleEqualsItsDecode) {
  auto m = mini_model(2);
  auto d = fit_kde(cloud(5, 10));
  std::mt19937_64 r1(4), r2(4);
  auto t = class_template(m, d, 1, r1);
  auto z = sample_class(d, 1, r2);
  auto v = decode_latent_point(m, z[0]);
  for (std::size_t i = 0; i < v.data.size(); ++i) EXPECT_FLOAT_EQ(t.mean.data[i], v.data[i]);
  EXPECT_EQ(t.binary, binarize(t.mean));
  EXPECT_TRUE(t.binary.is_mask());
}

TEST(Templates, MeanInUnitIntervalAndAveragesDecodes) {
  auto m = mini_model(3);
  auto d = fit_kde(cloud(8, 11));
  std::mt19937_64 r1(5), r2(5);
  auto t = class_template(m, d, 70, r1);
  auto vols = decode_latent_points(m, sample_class(d, 70, r2));
  for (std::size_t i = 0; i < t.mean.data.size(); ++i) {
    double s = 0;
    for (const auto& v : vols) s += v.data[i];
    EXPECT_NEAR(t.mean.data[i], s / 70, 1e-6);
    EXPECT_GE(t.mean.data[i], 0.0f);
    EXPECT_LE(t.mean.data[i], 1.0f);
  }
  EXPECT_THROW(class_template(m, d, 0, r1), ParameterError);
}

TEST(DiffMap, ZeroOnSelfAndAntisymmetric) {
  auto m = mini_model(4);
  std::mt19937_64 rng(6);
  auto a = class_template(m, fit_kde(cloud(6, 12)), 10, rng);
  auto b = class_template(m, fit_kde(cloud(6, 13, 3, 3)), 10, rng);
  for (float v : diff_map(a, a).data) EXPECT_EQ(v, 0.0f);
  auto ab = diff_map(a, b), ba = diff_map(b, a);
  for (std::size_t i = 0; i < ab.data.size(); ++i) EXPECT_EQ(ab.data[i], -ba.data[i]);
  TemplateShape c;
  c.mean = Volume({4, 4, 4}, 2);
  EXPECT_THROW(diff_map(a, c), ShapeError);
}

TEST(VolumeRate, Examples) {
  EXPECT_EQ(volume_rate(100, 100), 0.0);
  EXPECT_NEAR(volume_rate(85, 100), 15.0, 1e-12);
  EXPECT_NEAR(volume_rate(115, 100), 15.0, 1e-12);
  EXPECT_THROW(volume_rate(5, 0), ParameterError);
  EXPECT_THROW(volume_rate(5, -1), ParameterError);
}

TEST(VolumeRate, InvariantUnderCommonScaling) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(1, 1000), s(0.01, 100);
  for (int i = 0; i < 1000; ++i) {
    const double v = u(rng), r = u(rng), k = s(rng);
    EXPECT_NEAR(volume_rate(k * v, k * r), volume_rate(v, r), 1e-9 * std::max(1.0, volume_rate(v, r)));
    EXPECT_GE(volume_rate(v, r), 0.0);
  }
}

TEST(EnclosedVoxels, CountsCavityOfRing) {
  Volume v({9, 9, 2}, 1);
  for (int z = 0; z < 2; ++z)
    for (int y = 2; y <= 6; ++y)
      for (int x = 2; x <= 6; ++x)
        if (x == 2 || x == 6 || y == 2 || y == 6) v.at(0, x, y, z) = 1.0f;
  EXPECT_EQ(enclosed_voxel_count(v), 2u * 9u);
  v.at(0, 2, 4, 0) = 0.0f;
  EXPECT_EQ(enclosed_voxel_count(v), 9u);
}

TEST(LatentGrid, NodeCountPositionsAndConsistency) {
  auto m = mini_model(5);
  LatentBounds b{-1, 1, -2, 2};
  auto g = latent_grid(m, b, 3, 3);
  ASSERT_EQ(g.size(), 9u);
  EXPECT_EQ(g[4].z.x, 0.0);
  EXPECT_EQ(g[4].z.y, 0.0);
  EXPECT_EQ(g[5].ix, 2);
  EXPECT_EQ(g[5].iy, 1);
  EXPECT_EQ(g[8].z.y, 2.0);
  for (const auto& n : g) EXPECT_EQ(n.volume, decode_latent_point(m, n.z));
  EXPECT_THROW(latent_grid(m, b, 1, 3), ParameterError);
  EXPECT_THROW(latent_grid(m, {0, std::numeric_limits<double>::infinity(), 0, 1}, 2, 2), ParameterError);
  auto sheet = contact_sheet(g);
  EXPECT_EQ(sheet.width, 3 * 8 + 4);
}

/// Noise-free class-1 shell with the given sector increment.
Volume shell_with_increment(const SynthParams& base, double increment) {
  SynthParams p = base;
  p.thickness_increment = increment;
  return synth_generate(p, 1)[1].volume;
}

TEST(SectorAnalysis, MonotoneLineFractionCountsLinesAlongTheDirection) {
  SynthParams p;
  p.radius_jitter = p.thickness_jitter = p.pose_jitter = 0;
  const double inc[2][3] = {{0, 1, 2}, {2, 0, 2}};
  std::vector<GridNode> nodes;
  for (int iy = 0; iy < 2; ++iy)
    for (int ix = 0; ix < 3; ++ix) nodes.push_back({ix, iy, {double(ix), double(iy)}, shell_with_increment(p, inc[iy][ix])});
  EXPECT_DOUBLE_EQ(monotone_line_fraction(nodes, p, {1, 0}), 0.5);
  // columns: (0, 2), (1, 0), (2, 2) are each monotone
  EXPECT_DOUBLE_EQ(monotone_line_fraction(nodes, p, {0, -1}), 1.0);
  EXPECT_THROW(monotone_line_fraction(nodes, p, {1, 0}, -1), ParameterError);
}

TEST(SectorAnalysis, ToleranceAbsorbsSmallReversals) {
  SynthParams p;
  p.radius_jitter = p.thickness_jitter = p.pose_jitter = 0;
  std::vector<GridNode> nodes;
  const double inc[3] = {0, 2, 1};
  for (int ix = 0; ix < 3; ++ix) nodes.push_back({ix, 0, {double(ix), 0}, shell_with_increment(p, inc[ix])});
  nodes.push_back({0, 1, {0, 1}, nodes[0].volume});
  nodes.push_back({1, 1, {1, 1}, nodes[1].volume});
  nodes.push_back({2, 1, {2, 1}, nodes[2].volume});
  const double drop = sector_wall_thickness(nodes[1].volume, p) - sector_wall_thickness(nodes[2].volume, p);
  ASSERT_GT(drop, 0);
  EXPECT_DOUBLE_EQ(monotone_line_fraction(nodes, p, {1, 0}), 0.0);
  EXPECT_DOUBLE_EQ(monotone_line_fraction(nodes, p, {1, 0}, drop * 0.9), 0.0);
  EXPECT_DOUBLE_EQ(monotone_line_fraction(nodes, p, {1, 0}, drop * 1.1), 1.0);
}

TEST(SectorAnalysis, TopDecileShareAgainstBruteForce) {
  SynthParams p;
  p.dims = {16, 16, 4};
  p.channels = 1;
  Volume d(p.dims, 1, p.spacing);
  EXPECT_TRUE(std::isnan(top_decile_sector_fraction(d, p)));
  std::mt19937_64 rng(3);
  std::normal_distribution<float> g(0.0f, 1.0f);
  for (auto& v : d.data) v = g(rng);
  std::vector<std::pair<float, bool>> pos;
  for (int z = 0; z < d.dims.z; ++z)
    for (int y = 0; y < d.dims.y; ++y)
      for (int x = 0; x < d.dims.x; ++x)
        if (d.at(0, x, y, z) > 0) pos.push_back({d.at(0, x, y, z), in_thickened_sector(p, x, y)});
  std::sort(pos.begin(), pos.end(), [](auto& a, auto& b) { return a.first > b.first; });
  const std::size_t k = (pos.size() + 9) / 10;
  std::size_t inside = 0;
  for (std::size_t i = 0; i < k; ++i) inside += pos[i].second;
  std::size_t used = 0;
  EXPECT_DOUBLE_EQ(top_decile_sector_fraction(d, p, &used), double(inside) / double(k));
  EXPECT_EQ(used, k);
}

TEST(SectorAnalysis, TopDecileIsOneWhenOnlyTheSectorGrows) {
  SynthParams p;
  p.radius_jitter = p.thickness_jitter = p.pose_jitter = 0;
  p.cavity_shrink = 0;
  auto s = synth_generate(p, 1);
  TemplateShape a, b;
  a.mean = s[1].volume;
  b.mean = s[0].volume;
  EXPECT_DOUBLE_EQ(top_decile_sector_fraction(diff_map(a, b), p), 1.0);
}

TEST(LatentGrid, DefaultBoundsAddHalfMarginEachSide) {
  auto b = default_bounds({{0, 0}, {10, 4}}, 0.2);
  EXPECT_DOUBLE_EQ(b.xmin, -1.0);
  EXPECT_DOUBLE_EQ(b.xmax, 11.0);
  EXPECT_DOUBLE_EQ(b.ymin, -0.4);
  EXPECT_DOUBLE_EQ(b.ymax, 4.4);
}

TEST(Embed, OnePerSampleAndRepeatable) {
  auto m = mini_model(6);
  auto data = support::tiny_dataset(5);
  std::vector<const Sample*> all;
  for (const auto& s : data) all.push_back(&s);
  auto a = embed(m, all), b = embed(m, all);
  ASSERT_EQ(a.size(), data.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].id, data[i].id);
    EXPECT_EQ(a[i].label, data[i].label);
    EXPECT_EQ(a[i].coords.x, b[i].coords.x);
    EXPECT_EQ(a[i].coords.y, b[i].coords.y);
  }
  EXPECT_EQ(coordinates(a, 1).size(), 5u);
}

TEST(LatentCsv, RoundTripAndLineCounts) {
  auto dir = scratch("csv");
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0, 3);
  std::vector<LatentEmbedding> e;
  for (int i = 0; i < 100; ++i) e.push_back({"case" + std::to_string(i), i % 2, {n(rng), n(rng)}});
  export_latents(e, dir / "z.csv");
  auto text = read_file_bytes(dir / "z.csv");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 101);
  auto back = import_latents(dir / "z.csv");
  ASSERT_EQ(back.size(), 100u);
  for (std::size_t i = 0; i < 100; ++i) {
    EXPECT_EQ(back[i].id, e[i].id);
    EXPECT_EQ(back[i].label, e[i].label);
    EXPECT_EQ(back[i].coords.x, e[i].coords.x);
    EXPECT_EQ(back[i].coords.y, e[i].coords.y);
  }
  export_latents({}, dir / "empty.csv");
  EXPECT_EQ(read_file_bytes(dir / "empty.csv"), "id,label,dim1,dim2\n");
  EXPECT_TRUE(import_latents(dir / "empty.csv").empty());
  write_file_bytes(dir / "bad.csv", "id,label,dim1,dim2\na,1,2\n");
  EXPECT_THROW(import_latents(dir / "bad.csv"), FormatError);
}
