// Command-line pipeline and trained-model checks on the reference experiment.
// Expects the acceptance runs to exist under --work.

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <algorithm>
#include <array>
#include <cstdlib>
#include <filesystem>
#include <queue>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lvae/evaluate.hpp"
#include "lvae/explain.hpp"
#include "lvae/pipeline.hpp"
#include "reference_run.hpp"

namespace fs = std::filesystem;
using namespace lvae;

namespace {

struct Args {
  fs::path work = "acceptance_runs";
  fs::path cli = "lvae";
  fs::path config = "configs/desk.json";
} g_args;

struct Shell {
  int code = -1;
  std::string err;
};

Shell run_cli(const std::string& args, const fs::path& log) {
  fs::create_directories(log.parent_path());
  const std::string cmd = "\"" + g_args.cli.string() + "\" " + args + " > \"" + log.string() + ".out\" 2> \"" +
                          log.string() + ".err\"";
  const int status = std::system(cmd.c_str());
  Shell s;
  s.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  s.err = fs::exists(log.string() + ".err") ? read_file_bytes(log.string() + ".err") : "";
  return s;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(read_file_bytes(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(cells);
  }
  return rows;
}

/// Highest-density support point of a KDE.
Point2 kde_mode(const DensityModel& d) {
  Point2 best = d.support.front();
  double top = -1;
  for (const auto& p : d.support)
    if (double v = d(p); v > top) {
      top = v;
      best = p;
    }
  return best;
}

std::size_t sector_voxels(const Volume& v, const SynthParams& p, int channel = 0) {
  std::size_t n = 0;
  for (int z = 0; z < v.dims.z; ++z)
    for (int y = 0; y < v.dims.y; ++y)
      for (int x = 0; x < v.dims.x; ++x) n += v.at(channel, x, y, z) >= 0.5f && in_thickened_sector(p, x, y);
  return n;
}

class Reference : public ::testing::Test {
protected:
  static void SetUpTestSuite() {
    ex_ = new support::ReferenceExperiment(g_args.config, g_args.work);
    model_ = new Model<float>(model_from_checkpoint<float>(read_checkpoint(ex_->reference().checkpoint)));
    pair_ = new TemplatePair(build_templates(*model_, select_split(ex_->data(), Split::train),
                                             ex_->config().analysis.template_samples, ex_->config().analysis.seed,
                                             ex_->config().synth.spacing));
  }
  static void TearDownTestSuite() {
    delete pair_;
    delete model_;
    delete ex_;
  }

  static support::ReferenceExperiment* ex_;
  static Model<float>* model_;
  static TemplatePair* pair_;
};

support::ReferenceExperiment* Reference::ex_ = nullptr;
Model<float>* Reference::model_ = nullptr;
TemplatePair* Reference::pair_ = nullptr;

TEST_F(Reference, KdeSamplesFallOnTheirClassSideOfTheBoundary) {
  std::mt19937_64 rng(17);
  constexpr std::size_t n = 500;
  std::size_t right = 0;
  for (int k = 0; k < 2; ++k) {
    auto pts = sample_class(pair_->density[k], n, rng);
    nn::Mat<float> z(2, static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
      z(0, static_cast<Eigen::Index>(i)) = static_cast<float>(pts[i].x);
      z(1, static_cast<Eigen::Index>(i)) = static_cast<float>(pts[i].y);
    }
    auto s = model_->mlp_classify(z);
    for (std::size_t i = 0; i < n; ++i) right += (s(0, static_cast<Eigen::Index>(i)) >= 0.5f) == (k == 1);
  }
  EXPECT_GE(static_cast<double>(right) / (2 * n), 0.95);
}

TEST_F(Reference, ModeDecodesDifferInSectorVolume) {
  const auto& p = ex_->config().synth;
  auto v0 = binarize(decode_latent_point(*model_, kde_mode(pair_->density[0]), p.spacing));
  auto v1 = binarize(decode_latent_point(*model_, kde_mode(pair_->density[1]), p.spacing));
  EXPECT_GT(sector_voxels(v1, p), sector_voxels(v0, p));
}

TEST_F(Reference, TemplateSectorThickensAndCavityShrinks) {
  auto a = analyze_templates(pair_->shape[0], pair_->shape[1], ex_->config().synth);
  EXPECT_GT(a.thickness[1], a.thickness[0]);
  EXPECT_LT(a.cavity[1], a.cavity[0]);
  EXPECT_GT(a.cavity_volume_rate, 0.0);
}

TEST_F(Reference, LargestPositiveDiffRegionIsInTheSector) {
  const auto& p = ex_->config().synth;
  Volume d = diff_map(pair_->shape[1], pair_->shape[0]);
  float peak = 0;
  for (int z = 0; z < d.dims.z; ++z)
    for (int y = 0; y < d.dims.y; ++y)
      for (int x = 0; x < d.dims.x; ++x) peak = std::max(peak, d.at(0, x, y, z));
  ASSERT_GT(peak, 0.0f);
  const float cut = 0.5f * peak;
  const Dims D = d.dims;
  std::vector<int> comp(D.voxels(), -1);
  auto idx = [&](int x, int y, int z) { return (static_cast<std::size_t>(z) * D.y + y) * D.x + x; };
  struct Region {
    double mass = 0;
    std::size_t voxels = 0, inside = 0;
  };
  std::vector<Region> regions;
  for (int z = 0; z < D.z; ++z)
    for (int y = 0; y < D.y; ++y)
      for (int x = 0; x < D.x; ++x) {
        if (d.at(0, x, y, z) < cut || comp[idx(x, y, z)] >= 0) continue;
        const int id = static_cast<int>(regions.size());
        Region r;
        std::queue<std::array<int, 3>> q;
        q.push({x, y, z});
        comp[idx(x, y, z)] = id;
        while (!q.empty()) {
          auto [cx, cy, cz] = q.front();
          q.pop();
          r.mass += d.at(0, cx, cy, cz);
          ++r.voxels;
          r.inside += in_thickened_sector(p, cx, cy);
          const int nb[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
          for (const auto& o : nb) {
            const int nx = cx + o[0], ny = cy + o[1], nz = cz + o[2];
            if (!d.contains(nx, ny, nz) || comp[idx(nx, ny, nz)] >= 0 || d.at(0, nx, ny, nz) < cut) continue;
            comp[idx(nx, ny, nz)] = id;
            q.push({nx, ny, nz});
          }
        }
        regions.push_back(r);
      }
  auto top = std::max_element(regions.begin(), regions.end(),
                              [](const Region& a, const Region& b) { return a.mass < b.mass; });
  EXPECT_GT(2 * top->inside, top->voxels) << top->inside << " of " << top->voxels << " voxels in the sector";
}

// mean radial width of a binarized decode wobbles by a few hundredths of a
// voxel on the plateaus either side of the boundary
constexpr double kThicknessJitter = 0.25;

TEST_F(Reference, GridRowsChangeSectorThicknessMonotonically) {
  const auto& cfg = ex_->config();
  auto b = default_bounds(coordinates(pair_->embeddings));
  auto nodes = latent_grid(*model_, b, cfg.analysis.grid_x, cfg.analysis.grid_y, cfg.synth.spacing);
  EXPECT_GE(monotone_line_fraction(nodes, cfg.synth, centroid_direction(pair_->embeddings), kThicknessJitter), 0.8);
}

// ------------------------------------------------------------ command line

class Cli : public ::testing::Test {
protected:
  static fs::path dir() { return g_args.work / "cli"; }
  static std::string common() { return "--config \"" + g_args.config.string() + "\""; }
  static std::string data() { return "--data \"" + (dir() / "data" / "manifest.json").string() + "\""; }
  static std::string checkpoint() {
    const fs::path file = g_args.config;
    return checkpoint_path(dir() / "train", load_run_config(&file, {}).train.max_iterations).string();
  }

  static void SetUpTestSuite() {
    fs::remove_all(dir());
    synth_ = run_cli("synth " + common() + " --out \"" + (dir() / "data").string() + "\"", dir() / "logs" / "synth");
    if (synth_.code == 0)
      train_ = run_cli("train " + common() + " " + data() + " --out \"" + (dir() / "train").string() + "\"",
                       dir() / "logs" / "train");
  }

  static Shell synth_, train_;
};

Shell Cli::synth_, Cli::train_;

TEST_F(Cli, SynthWritesTheConfiguredDataset) {
  ASSERT_EQ(synth_.code, 0) << synth_.err;
  auto refs = load_manifest(dir() / "data" / "manifest.json");
  auto ex = support::ReferenceExperiment(g_args.config, g_args.work);
  EXPECT_EQ(refs.size(), ex.data().size());
  EXPECT_EQ(dataset_fingerprint(load_dataset(dir() / "data" / "manifest.json")), dataset_fingerprint(ex.data()));
  auto m = nlohmann::json::parse(read_file_bytes(dir() / "data" / "run_manifest.json"));
  EXPECT_EQ(m.at("command"), "synth");
  EXPECT_EQ(m.at("config_hash").get<std::string>().size(), 16u);
}

TEST_F(Cli, TrainMatchesTheReferenceRunByteForByte) {
  ASSERT_EQ(train_.code, 0) << train_.err;
  auto ex = support::ReferenceExperiment(g_args.config, g_args.work);
  const auto ref = checkpoint_path(g_args.work / "runs" / ("ladder_seed" + std::to_string(ex.config().train.seed)),
                                   ex.config().train.max_iterations);
  ASSERT_TRUE(fs::exists(ref));
  EXPECT_TRUE(read_file_bytes(checkpoint()) == read_file_bytes(ref));
  EXPECT_TRUE(read_file_bytes(dir() / "train" / "train_log.csv") ==
              read_file_bytes(ref.parent_path().parent_path() / "train_log.csv"));
}

TEST_F(Cli, EvalReportsAccuracyAboveThreshold) {
  ASSERT_EQ(train_.code, 0) << train_.err;
  auto s = run_cli("eval " + common() + " " + data() + " --checkpoint \"" + checkpoint() + "\" --split test --out \"" +
                       (dir() / "eval").string() + "\"",
                   dir() / "logs" / "eval");
  ASSERT_EQ(s.code, 0) << s.err;
  auto cls = read_csv(dir() / "eval" / "eval_classification.csv");
  ASSERT_EQ(cls.size(), 2u);
  EXPECT_EQ(cls[0][2], "accuracy");
  EXPECT_GE(std::stod(cls[1][2]), 0.95);
  auto seg = read_csv(dir() / "eval" / "eval_segmentation.csv");
  ASSERT_EQ(seg.size(), 3u);
  for (std::size_t r = 1; r < seg.size(); ++r) {
    const double dice = std::stod(seg[r][2]);
    EXPECT_GT(dice, 0.0);
    EXPECT_LE(dice, 1.0);
  }
}

TEST_F(Cli, EvalIsByteIdenticalOnRerun) {
  ASSERT_EQ(train_.code, 0) << train_.err;
  for (const char* name : {"a", "b"}) {
    auto s = run_cli("eval " + common() + " " + data() + " --checkpoint \"" + checkpoint() + "\" --out \"" +
                         (dir() / "rerun").string() + "\" --name " + name,
                     dir() / "logs" / (std::string("rerun_") + name));
    ASSERT_EQ(s.code, 0) << s.err;
  }
  for (const char* kind : {"_segmentation.csv", "_classification.csv"})
    EXPECT_EQ(read_file_bytes(dir() / "rerun" / (std::string("a") + kind)),
              read_file_bytes(dir() / "rerun" / (std::string("b") + kind)));
}

TEST_F(Cli, BaselineEvalRunsOnTheFlatCheckpoint) {
  ASSERT_EQ(train_.code, 0) << train_.err;
  auto ex = support::ReferenceExperiment(g_args.config, g_args.work);
  const auto flat = checkpoint_path(g_args.work / "runs" / ("flat_seed" + std::to_string(ex.config().train.seed)),
                                    ex.config().train.max_iterations);
  ASSERT_TRUE(fs::exists(flat));
  auto s = run_cli("eval " + common() + " --baseline " + data() + " --checkpoint \"" + flat.string() +
                       "\" --split test --out \"" + (dir() / "eval_flat").string() + "\"",
                   dir() / "logs" / "eval_flat");
  ASSERT_EQ(s.code, 0) << s.err;
  auto seg = read_csv(dir() / "eval_flat" / "eval_segmentation.csv");
  EXPECT_EQ(seg.size(), 3u);
}

TEST_F(Cli, EmbedSeparatesTheClasses) {
  ASSERT_EQ(train_.code, 0) << train_.err;
  auto s = run_cli("embed " + common() + " " + data() + " --checkpoint \"" + checkpoint() + "\" --out \"" +
                       (dir() / "embed").string() + "\"",
                   dir() / "logs" / "embed");
  ASSERT_EQ(s.code, 0) << s.err;
  auto e = import_latents(dir() / "embed" / "latents.csv");
  auto ex = support::ReferenceExperiment(g_args.config, g_args.work);
  EXPECT_EQ(e.size(), select_split(ex.data(), Split::test).size());
  auto j = nlohmann::json::parse(read_file_bytes(dir() / "embed" / "embedding.json"));
  EXPECT_GE(j.at("cluster_separation").get<double>(), 3.0);
  EXPECT_TRUE(fs::exists(dir() / "embed" / "scatter.pgm"));
}

TEST_F(Cli, TemplatesAreReproducibleAndThicker) {
  ASSERT_EQ(train_.code, 0) << train_.err;
  for (const char* name : {"templates", "templates_again"}) {
    auto s = run_cli("templates " + common() + " " + data() + " --checkpoint \"" + checkpoint() + "\" --out \"" +
                         (dir() / name).string() + "\"",
                     dir() / "logs" / name);
    ASSERT_EQ(s.code, 0) << s.err;
  }
  for (const char* f : {"template_c0.svol", "template_c1.svol", "diff_c1_minus_c0.svol", "templates.json"})
    EXPECT_EQ(read_file_bytes(dir() / "templates" / f), read_file_bytes(dir() / "templates_again" / f)) << f;
  auto j = nlohmann::json::parse(read_file_bytes(dir() / "templates" / "templates.json"));
  EXPECT_GT(j.at("sector_thickness")[1].get<double>(), j.at("sector_thickness")[0].get<double>());
  auto t0 = load_volume(dir() / "templates" / "template_c0_binary.svol");
  EXPECT_EQ(t0.channels, 2);
}

TEST_F(Cli, GridWritesEveryNode) {
  ASSERT_EQ(train_.code, 0) << train_.err;
  auto s = run_cli("grid " + common() + " " + data() + " --checkpoint \"" + checkpoint() + "\" --res 4 3 --out \"" +
                       (dir() / "grid").string() + "\"",
                   dir() / "logs" / "grid");
  ASSERT_EQ(s.code, 0) << s.err;
  auto j = nlohmann::json::parse(read_file_bytes(dir() / "grid" / "grid.json"));
  ASSERT_EQ(j.at("nodes").size(), 12u);
  for (const auto& n : j.at("nodes")) EXPECT_TRUE(fs::exists(dir() / "grid" / n.at("path").get<std::string>()));
  EXPECT_TRUE(fs::exists(dir() / "grid" / "contact_sheet.pgm"));
}

TEST_F(Cli, MissingCheckpointExitsWithItsOwnCode) {
  auto s = run_cli("eval " + common() + " " + data() + " --checkpoint \"" + (dir() / "nope.lvck").string() +
                       "\" --out \"" + (dir() / "nope").string() + "\"",
                   dir() / "logs" / "missing");
  EXPECT_EQ(s.code, 3);
  EXPECT_EQ(s.err.rfind("error: missing_checkpoint: ", 0), 0u) << s.err;
  EXPECT_EQ(std::count(s.err.begin(), s.err.end(), '\n'), 1);
}

TEST_F(Cli, UnknownConfigKeyIsAUsageError) {
  auto s = run_cli("synth " + common() + " --set train.learnin_rate=1 --out \"" + (dir() / "bad").string() + "\"",
                   dir() / "logs" / "bad_key");
  EXPECT_EQ(s.code, 2);
  EXPECT_NE(s.err.find("train.learnin_rate"), std::string::npos) << s.err;
}

}  // namespace

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  for (int i = 1; i + 1 < argc; i += 2) {
    const std::string k = argv[i];
    if (k == "--work") g_args.work = argv[i + 1];
    else if (k == "--cli") g_args.cli = argv[i + 1];
    else if (k == "--config") g_args.config = argv[i + 1];
    else {
      std::fprintf(stderr, "unknown argument %s\n", k.c_str());
      return 2;
    }
  }
  return RUN_ALL_TESTS();
}
