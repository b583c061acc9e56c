#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lvae/ablation.hpp"
#include "lvae/checkpoint.hpp"
#include "lvae/config.hpp"
#include "lvae/evaluate.hpp"
#include "lvae/pipeline.hpp"
#include "lvae/trainer.hpp"

#ifndef LVAE_VERSION
#define LVAE_VERSION "dev"
#endif

namespace fs = std::filesystem;
using namespace lvae;

namespace {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfig = 2,
  kMissingCheckpoint = 3,
  kFormat = 4,
  kIo = 5,
  kNumeric = 6,
};

class MissingCheckpoint : public Error {
public:
  explicit MissingCheckpoint(const fs::path& p) : Error("checkpoint not found: " + p.string()) {}
};

struct Common {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  bool baseline = false;
  std::string data;
  std::string checkpoint;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "run config (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--seed", c.seed, "seed of this command's stochastic stage");
  cmd->add_option("--set", c.sets, "config override key.path=value (repeatable)");
  cmd->add_flag("--baseline", c.baseline, "flat VAE baseline with one latent space");
}

RunConfig load(const Common& c) {
  std::vector<std::string> sets = c.sets;
  if (c.baseline) sets.push_back("baseline=true");
  fs::path file = c.config;
  return load_run_config(c.config.empty() ? nullptr : &file, sets);
}

/// Dataset from a manifest when given, otherwise synthesized from the config.
std::vector<Sample> dataset(const Common& c, const RunConfig& cfg) {
  if (!c.data.empty()) return load_dataset(c.data);
  return make_dataset(cfg);
}

CheckpointData open_checkpoint(const std::string& path) {
  if (path.empty()) throw ConfigError("--checkpoint", "required");
  if (!fs::is_regular_file(path)) throw MissingCheckpoint(path);
  return read_checkpoint(path);
}

void write_manifest(const Common& c, const RunConfig& cfg, const std::string& command, std::uint64_t seed,
                    const nlohmann::json& inputs = nlohmann::json::object()) {
  const nlohmann::json j = to_json(cfg);
  nlohmann::json m{{"command", command},
                   {"version", LVAE_VERSION},
                   {"config_hash", config_hash(j)},
                   {"seed", seed},
                   {"inputs", inputs},
                   {"config", j}};
  write_file_bytes(fs::path(c.out) / "run_manifest.json", m.dump(2) + "\n");
}

nlohmann::json inputs_of(const Common& c) {
  nlohmann::json in = nlohmann::json::object();
  if (!c.data.empty()) in["data"] = c.data;
  if (!c.checkpoint.empty()) in["checkpoint"] = c.checkpoint;
  if (!c.config.empty()) in["config"] = c.config;
  return in;
}

std::vector<const Sample*> pick(const std::vector<Sample>& data, const std::string& split) {
  if (split == "all") {
    std::vector<const Sample*> all;
    for (const auto& s : data) all.push_back(&s);
    return all;
  }
  return select_split(data, split_from_string(split));
}

int cmd_synth(const Common& c) {
  RunConfig cfg = load(c);
  if (c.seed) cfg.synth.seed = *c.seed;
  auto data = make_dataset(cfg);
  auto manifest = save_dataset(data, c.out);
  write_manifest(c, cfg, "synth", cfg.synth.seed, inputs_of(c));
  std::printf("wrote %zu samples to %s\n", data.size(), manifest.string().c_str());
  return kOk;
}

int cmd_train(const Common& c, const std::string& resume) {
  RunConfig cfg = load(c);
  if (c.seed) cfg.train.seed = *c.seed;
  auto data = dataset(c, cfg);
  std::optional<fs::path> from;
  if (!resume.empty()) {
    if (!fs::is_regular_file(resume)) throw MissingCheckpoint(resume);
    from = resume;
  }
  auto r = train_loop<float>(cfg.effective_model(), cfg.train, cfg.effective_loss(), data, c.out, from);
  auto in = inputs_of(c);
  if (from) in["resume"] = resume;
  write_manifest(c, cfg, "train", cfg.train.seed, in);
  std::printf("final checkpoint %s\n", r.final_checkpoint.string().c_str());
  return kOk;
}

int cmd_eval(const Common& c, const std::vector<std::string>& splits, const std::string& name) {
  RunConfig cfg = load(c);
  auto ck = open_checkpoint(c.checkpoint);
  auto model = model_from_checkpoint<float>(ck);
  auto data = dataset(c, cfg);
  std::vector<EvalReport> reports;
  for (const auto& s : splits) {
    auto samples = pick(data, s);
    if (samples.empty()) throw ParameterError("eval: split '" + s + "' is empty");
    reports.push_back(evaluate_predictions(predict(model, samples), s));
  }
  fs::create_directories(c.out);
  write_eval_report(reports, fs::path(c.out) / name);
  write_manifest(c, cfg, "eval", 0, inputs_of(c));
  for (const auto& r : reports) {
    std::printf("%s: n=%zu accuracy=%s", r.split.c_str(), r.count, format_number(r.rates.accuracy).c_str());
    for (std::size_t ch = 0; ch < r.channels.size(); ++ch)
      std::printf(" dice_c%zu=%s", ch, format_number(r.channels[ch].dice.mean).c_str());
    std::printf("\n");
  }
  return kOk;
}

int cmd_embed(const Common& c, const std::string& split) {
  RunConfig cfg = load(c);
  auto model = model_from_checkpoint<float>(open_checkpoint(c.checkpoint));
  auto data = dataset(c, cfg);
  auto e = embed(model, pick(data, split));
  fs::create_directories(c.out);
  export_latents(e, fs::path(c.out) / "latents.csv");
  write_pgm(scatter_image(e), fs::path(c.out) / "scatter.pgm");
  std::vector<Point2> pts;
  std::vector<int> labels;
  for (const auto& x : e) {
    pts.push_back(x.coords);
    labels.push_back(x.label);
  }
  nlohmann::json summary{{"count", e.size()}};
  try {
    summary["cluster_separation"] = cluster_separation(pts, labels);
  } catch (const MetricError&) {
    summary["cluster_separation"] = nullptr;
  }
  write_file_bytes(fs::path(c.out) / "embedding.json", summary.dump(2) + "\n");
  write_manifest(c, cfg, "embed", 0, inputs_of(c));
  std::printf("%zu embeddings\n", e.size());
  return kOk;
}

int cmd_templates(const Common& c, const std::string& split, std::optional<std::size_t> n) {
  RunConfig cfg = load(c);
  if (c.seed) cfg.analysis.seed = *c.seed;
  if (n) cfg.analysis.template_samples = *n;
  cfg.validate();
  auto model = model_from_checkpoint<float>(open_checkpoint(c.checkpoint));
  auto data = dataset(c, cfg);
  auto t = build_templates(model, pick(data, split), cfg.analysis.template_samples, cfg.analysis.seed,
                           cfg.synth.spacing);
  const fs::path out = c.out;
  for (int k = 0; k < 2; ++k) {
    save_volume(t.shape[k].mean, out / ("template_c" + std::to_string(k) + ".svol"), VolumeEncoding::float32);
    save_volume(t.shape[k].binary, out / ("template_c" + std::to_string(k) + "_binary.svol"), VolumeEncoding::mask);
  }
  save_volume(diff_map(t.shape[1], t.shape[0]), out / "diff_c1_minus_c0.svol", VolumeEncoding::float32);
  auto analysis = analyze_templates(t.shape[0], t.shape[1], cfg.synth);
  nlohmann::json j = to_json(analysis);
  j["samples_per_class"] = cfg.analysis.template_samples;
  write_file_bytes(out / "templates.json", j.dump(2) + "\n");
  write_manifest(c, cfg, "templates", cfg.analysis.seed, inputs_of(c));
  std::printf("sector thickness %s -> %s, wall volume rate %s%%\n", format_number(analysis.thickness[0]).c_str(),
              format_number(analysis.thickness[1]).c_str(), format_number(analysis.wall_volume_rate).c_str());
  return kOk;
}

int cmd_grid(const Common& c, const std::vector<double>& bounds, const std::vector<int>& res, const std::string& split) {
  RunConfig cfg = load(c);
  auto model = model_from_checkpoint<float>(open_checkpoint(c.checkpoint));
  if (res.size() == 2) {
    cfg.analysis.grid_x = res[0];
    cfg.analysis.grid_y = res[1];
  }
  cfg.validate();
  LatentBounds b;
  if (bounds.size() == 4) {
    b = {bounds[0], bounds[1], bounds[2], bounds[3]};
  } else {
    auto data = dataset(c, cfg);
    b = default_bounds(coordinates(embed(model, pick(data, split))));
  }
  auto nodes = latent_grid(model, b, cfg.analysis.grid_x, cfg.analysis.grid_y, cfg.synth.spacing);
  const fs::path out = c.out;
  nlohmann::json listing = nlohmann::json::array();
  for (const auto& n : nodes) {
    char name[64];
    std::snprintf(name, sizeof name, "grid/node_y%02d_x%02d.svol", n.iy, n.ix);
    save_volume(n.volume, out / name, VolumeEncoding::float32);
    listing.push_back({{"ix", n.ix}, {"iy", n.iy}, {"z", {n.z.x, n.z.y}}, {"path", name}});
  }
  write_pgm(contact_sheet(nodes, 0), out / "contact_sheet.pgm");
  nlohmann::json j{{"bounds", {b.xmin, b.xmax, b.ymin, b.ymax}},
                   {"resolution", {cfg.analysis.grid_x, cfg.analysis.grid_y}},
                   {"nodes", listing}};
  write_file_bytes(out / "grid.json", j.dump(2) + "\n");
  write_manifest(c, cfg, "grid", 0, inputs_of(c));
  std::printf("%zu grid volumes\n", nodes.size());
  return kOk;
}

int cmd_ablate(const Common& c) {
  RunConfig cfg = load(c);
  if (c.seed) cfg.train.seed = *c.seed;
  auto data = dataset(c, cfg);
  auto rows = run_ablation(cfg, data, fs::path(c.out) / "variants");
  write_ablation_report(rows, fs::path(c.out) / "ablation.csv");
  write_manifest(c, cfg, "ablate", cfg.train.seed, inputs_of(c));
  for (const auto& r : rows)
    std::printf("%s dice=%s accuracy=%s\n", r.variant_id.c_str(), format_number(r.dice.mean).c_str(),
                format_number(r.accuracy).c_str());
  return kOk;
}

/// One line, tab-free: "error: <kind>: <message>".
int fail(int code, const char* kind, const std::string& what) {
  std::string msg = what;
  for (char& ch : msg)
    if (ch == '\n' || ch == '\r' || ch == '\t') ch = ' ';
  std::fprintf(stderr, "error: %s: %s\n", kind, msg.c_str());
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ladder VAE shape classification and explanation"};
  app.set_version_flag("--version", std::string(LVAE_VERSION));
  app.require_subcommand(1);

  Common c;
  std::string resume, name = "eval", split = "test", latent_split = "train";
  std::vector<std::string> splits{"val", "test"};
  std::vector<double> bounds;
  std::vector<int> res;
  std::optional<std::size_t> n;

  auto* synth = app.add_subcommand("synth", "generate the synthetic dataset");
  auto* train = app.add_subcommand("train", "train a model");
  auto* eval = app.add_subcommand("eval", "segmentation and classification metrics");
  auto* emb = app.add_subcommand("embed", "export top-latent embeddings");
  auto* tmpl = app.add_subcommand("templates", "class templates, difference map and volume rates");
  auto* grid = app.add_subcommand("grid", "decode a grid over the top latent space");
  auto* ablate = app.add_subcommand("ablate", "warm-up / augmentation / KL-ordering ablation");
  for (auto* s : {synth, train, eval, emb, tmpl, grid, ablate}) add_common(s, c);
  for (auto* s : {train, eval, emb, tmpl, grid, ablate})
    s->add_option("--data", c.data, "dataset manifest (default: synthesize from config)");
  for (auto* s : {eval, emb, tmpl, grid}) s->add_option("--checkpoint", c.checkpoint, "model checkpoint")->required();
  train->add_option("--resume", resume, "continue from this checkpoint");
  eval->add_option("--split", splits, "splits to evaluate (train, val, test, all)");
  eval->add_option("--name", name, "report file prefix");
  emb->add_option("--split", split, "split to embed (train, val, test, all)");
  tmpl->add_option("--split", latent_split, "split the class densities are fitted on");
  tmpl->add_option("--n", n, "samples per class template");
  grid->add_option("--bounds", bounds, "xmin xmax ymin ymax")->expected(4);
  grid->add_option("--res", res, "resolution rx ry")->expected(2);
  grid->add_option("--split", latent_split, "split whose embeddings define the default bounds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail(kConfig, "usage", e.what());
  }

  try {
    if (*synth) return cmd_synth(c);
    if (*train) return cmd_train(c, resume);
    if (*eval) return cmd_eval(c, splits, name);
    if (*emb) return cmd_embed(c, split);
    if (*tmpl) return cmd_templates(c, latent_split, n);
    if (*grid) return cmd_grid(c, bounds, res, latent_split);
    if (*ablate) return cmd_ablate(c);
  } catch (const MissingCheckpoint& e) {
    return fail(kMissingCheckpoint, "missing_checkpoint", e.what());
  } catch (const ConfigError& e) {
    return fail(kConfig, "config", e.what());
  } catch (const FormatError& e) {
    return fail(kFormat, "format", e.what());
  } catch (const IoError& e) {
    return fail(kIo, "io", e.what());
  } catch (const NumericError& e) {
    return fail(kNumeric, "numeric", e.what());
  } catch (const Error& e) {
    return fail(kFailure, "lvae", e.what());
  } catch (const std::exception& e) {
    return fail(kFailure, "internal", e.what());
  }
  return kFailure;
}
