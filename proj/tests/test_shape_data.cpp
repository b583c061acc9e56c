#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "lvae/augment.hpp"
#include "lvae/dataset.hpp"
#include "lvae/svol.hpp"
#include "lvae/synth.hpp"

using namespace lvae;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("lvae_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Volume random_mask(Dims d, int channels, std::mt19937_64& rng, double p = 0.3) {
  Volume v(d, channels, {1.5, 2.0, 0.5});
  std::bernoulli_distribution b(p);
  for (auto& x : v.data) x = b(rng) ? 1.0f : 0.0f;
  return v;
}

}  // namespace

TEST(Volume, LayoutIsChannelMajorXFastest) {
  Volume v({3, 4, 5}, 2);
  EXPECT_EQ(v.data.size(), 2u * 3 * 4 * 5);
  EXPECT_EQ(v.index(0, 1, 0, 0), 1u);
  EXPECT_EQ(v.index(0, 0, 1, 0), 3u);
  EXPECT_EQ(v.index(0, 0, 0, 1), 12u);
  EXPECT_EQ(v.index(1, 0, 0, 0), 60u);
}

TEST(Volume, RejectsBadGeometry) {
  EXPECT_THROW(Volume({0, 2, 2}, 1), ParameterError);
  EXPECT_THROW(Volume({2, 2, 2}, 0), ParameterError);
  EXPECT_THROW(Volume({2, 2, 2}, 1, {1, 0, 1}), ParameterError);
}

TEST(Svol, MaskRoundTrip4Cubed) {
  std::mt19937_64 rng(1);
  Volume v = random_mask({4, 4, 4}, 1, rng);
  auto dir = temp_dir("svol_rt");
  save_volume(v, dir / "a.svol");
  EXPECT_EQ(load_volume(dir / "a.svol"), v);
}

TEST(Svol, RoundTripRandomVolumesBitwise) {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> dim(1, 7), ch(1, 3);
  std::uniform_real_distribution<float> u(-2.0f, 2.0f);
  for (int t = 0; t < 50; ++t) {
    Volume m = random_mask({dim(rng), dim(rng), dim(rng)}, ch(rng), rng);
    EXPECT_EQ(decode_volume(encode_volume(m, VolumeEncoding::mask)), m);
    Volume f = m;
    for (auto& x : f.data) x = u(rng);
    f.spacing = {0.1 + t, 1.0 / 3.0, 7.25};
    EXPECT_EQ(decode_volume(encode_volume(f, VolumeEncoding::float32)), f);
  }
}

TEST(Svol, TruncatedPayloadIsFormatError) {
  std::mt19937_64 rng(3);
  std::string bytes = encode_volume(random_mask({4, 4, 4}, 1, rng), VolumeEncoding::mask);
  bytes.pop_back();
  EXPECT_THROW(decode_volume(bytes), FormatError);
}

TEST(Svol, Header2x2x2With2ChannelsAccepts16Bytes) {
  std::string bytes = "SVOL1\n2 2 2 2 1 1 1\n" + std::string(16, '\1');
  Volume v = decode_volume(bytes);
  EXPECT_EQ(v.channels, 2);
  EXPECT_EQ(v.data.size(), 16u);
}

TEST(Svol, MalformedInputsReportOffsets) {
  try {
    decode_volume("SVOLX\n1 1 1 1 1 1 1\n\1");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  EXPECT_THROW(decode_volume("SVOL1\n1 1 1 1 1 1\n\1"), FormatError);
  EXPECT_THROW(decode_volume("SVOL1\n1 1 x 1 1 1 1\n\1"), FormatError);
  try {
    decode_volume("SVOL1\n2 1 1 1 1 1 1\n\1\2");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), std::string("SVOL1\n2 1 1 1 1 1 1\n").size() + 1);
  }
}

TEST(Manifest, ResolvesRelativePathsAndRejectsDuplicates) {
  auto dir = temp_dir("manifest");
  std::mt19937_64 rng(4);
  std::vector<Sample> samples;
  for (int i = 0; i < 4; ++i) samples.push_back({"s" + std::to_string(i), random_mask({3, 3, 3}, 2, rng), i % 2, Split::train});
  samples[3].split = Split::test;
  auto manifest = save_dataset(samples, dir);
  auto back = load_dataset(manifest);
  ASSERT_EQ(back.size(), samples.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].id, samples[i].id);
    EXPECT_EQ(back[i].volume, samples[i].volume);
    EXPECT_EQ(back[i].label, samples[i].label);
    EXPECT_EQ(back[i].split, samples[i].split);
  }
  write_file_bytes(dir / "dup.json",
                   R"([{"id":"a","path":"volumes/s0.svol","label":0,"split":"train"},)"
                   R"({"id":"a","path":"volumes/s1.svol","label":1,"split":"train"}])");
  EXPECT_THROW(load_manifest(dir / "dup.json"), FormatError);
}

TEST(Synth, DegenerateIncrementGivesIdenticalClasses) {
  SynthParams p;
  p.thickness_increment = 0;
  p.cavity_shrink = 0;
  p.radius_jitter = p.thickness_jitter = p.pose_jitter = 0;
  auto s = synth_generate(p, 3);
  ASSERT_EQ(s.size(), 6u);
  for (int k = 0; k < 3; ++k) EXPECT_EQ(s[static_cast<std::size_t>(k)].volume, s[static_cast<std::size_t>(3 + k)].volume);
}

TEST(Synth, DeterministicAndBalanced) {
  SynthParams p;
  auto a = synth_generate(p, 4), b = synth_generate(p, 4);
  ASSERT_EQ(a.size(), 8u);
  int ones = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].id, b[i].id);
    EXPECT_EQ(encode_volume(a[i].volume, VolumeEncoding::mask), encode_volume(b[i].volume, VolumeEncoding::mask));
    ones += a[i].label;
    EXPECT_TRUE(a[i].volume.is_mask());
  }
  EXPECT_EQ(ones, 4);
}

TEST(Synth, Class1HasMoreVoxelsInTheSectorWindow) {
  SynthParams p;
  auto s = synth_generate(p, 20);
  double count[2] = {0, 0};
  for (const auto& x : s)
    for (int z = 0; z < p.dims.z; ++z)
      for (int y = 0; y < p.dims.y; ++y)
        for (int xx = 0; xx < p.dims.x; ++xx)
          if (in_thickened_sector(p, xx, y) && x.volume.at(0, xx, y, z) >= 0.5f) count[x.label] += 1;
  EXPECT_GT(count[1] / 20, count[0] / 20);
}

TEST(Synth, SectorThicknessGapMatchesIncrement) {
  SynthParams p;
  p.radius_jitter = p.thickness_jitter = p.pose_jitter = 0;
  auto s = synth_generate(p, 1);
  const double t0 = sector_wall_thickness(s[0].volume, p), t1 = sector_wall_thickness(s[1].volume, p);
  // inward increment plus the shrunken cavity, up to rasterization
  EXPECT_NEAR(t1 - t0, p.thickness_increment + p.cavity_shrink * p.inner_radius, 1.0);
}

TEST(Synth, InvalidParamsNameTheConstraint) {
  SynthParams p;
  p.outer_radius = p.inner_radius;
  try {
    p.validate();
    FAIL();
  } catch (const ParameterError& e) {
    EXPECT_NE(std::string(e.what()).find("outer radius"), std::string::npos);
  }
  SynthParams q;
  q.sector_half_width_deg = 0;
  EXPECT_THROW(q.validate(), ParameterError);
  SynthParams r;
  r.thickness_increment = -1;
  EXPECT_THROW(r.validate(), ParameterError);
}

TEST(CropPad, CenteredContentUnchanged) {
  Volume v({8, 8, 8}, 1);
  for (int z = 3; z <= 5; ++z)
    for (int y = 3; y <= 5; ++y)
      for (int x = 3; x <= 5; ++x) v.at(0, x, y, z) = 1;
  EXPECT_EQ(crop_pad_center(v, {8, 8, 8}), v);
}

TEST(CropPad, CornerVoxelMovesToCenter) {
  Volume v({8, 8, 8}, 1);
  v.at(0, 0, 0, 0) = 1;
  Volume out = crop_pad_center(v, {8, 8, 8});
  EXPECT_EQ(out.at(0, 4, 4, 4), 1.0f);
  EXPECT_EQ(foreground_count(out, 0), 1u);
}

TEST(CropPad, ExactCentralCrop) {
  std::mt19937_64 rng(5);
  Volume v({10, 10, 10}, 1);
  Volume inner = random_mask({6, 6, 6}, 1, rng, 0.5);
  // symmetric content so the center of mass sits at the grid center
  for (int z = 0; z < 6; ++z)
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x) {
        float val = inner.at(0, std::min(x, 5 - x), std::min(y, 5 - y), std::min(z, 5 - z));
        v.at(0, x + 2, y + 2, z + 2) = val;
      }
  v.at(0, 2, 2, 2) = v.at(0, 7, 7, 7) = 1;
  Volume out = crop_pad_center(v, {6, 6, 6});
  for (int z = 0; z < 6; ++z)
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x) EXPECT_EQ(out.at(0, x, y, z), v.at(0, x + 2, y + 2, z + 2));
}

TEST(CropPad, EmptyForegroundIsError) {
  EXPECT_THROW(crop_pad_center(Volume({4, 4, 4}, 1), {4, 4, 4}), ParameterError);
}

TEST(Rotate, ZeroAnglesIsIdentity) {
  std::mt19937_64 rng(6);
  Volume v = random_mask({7, 6, 5}, 2, rng);
  EXPECT_EQ(rotate(v, {0, 0, 0}), v);
}

TEST(Rotate, QuarterTurnAboutZMovesVoxelAnalytically) {
  Volume v({9, 9, 9}, 1);
  v.at(0, 6, 4, 4) = 1;  // (+2, 0) from the center (4, 4)
  Volume r = rotate(v, {0, 0, 90});
  EXPECT_EQ(r.at(0, 4, 6, 4), 1.0f);  // rotated to (0, +2)
  EXPECT_EQ(foreground_count(r, 0), 1u);
}

TEST(Rotate, SeededAugmentationReproducibleAndBinary) {
  SynthParams p;
  Volume v = synth_generate(p, 1)[0].volume;
  std::mt19937_64 a(9), b(9);
  Volume ra = augment_rotate(v, a), rb = augment_rotate(v, b);
  EXPECT_EQ(ra, rb);
  EXPECT_EQ(ra.dims, v.dims);
  EXPECT_TRUE(ra.is_mask());
}

TEST(Rotate, ForegroundCountStableForModerateAngles) {
  SynthParams p;
  auto s = synth_generate(p, 3);
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> ang(-18.0, 18.0);
  for (const auto& x : s) {
    for (int t = 0; t < 4; ++t) {
      Volume r = rotate(x.volume, {ang(rng), ang(rng), ang(rng)});
      for (int c = 0; c < 2; ++c) {
        const double before = static_cast<double>(foreground_count(x.volume, c));
        const double after = static_cast<double>(foreground_count(r, c));
        EXPECT_LT(std::abs(after - before) / before, 0.15);
      }
    }
  }
}

TEST(Split, StratifiedCounts) {
  std::vector<Sample> s;
  for (int i = 0; i < 200; ++i) s.push_back({"id" + std::to_string(i), Volume({1, 1, 1}, 1), i < 100 ? 0 : 1, Split::train});
  split_dataset(s, {0.7, 0.15, 0.15}, 3);
  int count[2][3] = {};
  for (const auto& x : s) ++count[x.label][static_cast<int>(x.split)];
  for (int l = 0; l < 2; ++l) {
    EXPECT_EQ(count[l][0], 70);
    EXPECT_EQ(count[l][1], 15);
    EXPECT_EQ(count[l][2], 15);
  }
}

TEST(Split, AllTrainAndDeterministic) {
  std::vector<Sample> s;
  for (int i = 0; i < 30; ++i) s.push_back({"id" + std::to_string(i), Volume({1, 1, 1}, 1), i % 2, Split::test});
  auto t = s;
  split_dataset(t, {1, 0, 0}, 5);
  for (const auto& x : t) EXPECT_EQ(x.split, Split::train);
  auto a = s, b = s;
  split_dataset(a, {0.5, 0.2, 0.3}, 8);
  split_dataset(b, {0.5, 0.2, 0.3}, 8);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].split, b[i].split);
}

TEST(Split, LargestRemainderMatchesRoundedFractions) {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> n(3, 60);
  std::uniform_real_distribution<double> u(0.05, 1.0);
  for (int t = 0; t < 200; ++t) {
    double a = u(rng), b = u(rng), c = u(rng), s = a + b + c;
    std::vector<double> f{a / s, b / s, c / s};
    const std::size_t total = static_cast<std::size_t>(n(rng));
    auto counts = apportion(total, f);
    EXPECT_EQ(counts[0] + counts[1] + counts[2], total);
    for (int k = 0; k < 3; ++k) EXPECT_LT(std::abs(static_cast<double>(counts[static_cast<std::size_t>(k)]) - f[static_cast<std::size_t>(k)] * total), 1.0);
  }
}

TEST(Split, TooFewSamplesPerClassIsError) {
  std::vector<Sample> s{{"a", Volume({1, 1, 1}, 1), 0, Split::train},
                        {"b", Volume({1, 1, 1}, 1), 0, Split::train},
                        {"c", Volume({1, 1, 1}, 1), 1, Split::train}};
  EXPECT_THROW(split_dataset(s, {0.4, 0.3, 0.3}, 1), ParameterError);
}
