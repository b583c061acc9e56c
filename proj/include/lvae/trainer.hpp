#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "lvae/augment.hpp"
#include "lvae/checkpoint.hpp"
#include "lvae/dataset.hpp"
#include "lvae/errors.hpp"
#include "lvae/evaluate.hpp"
#include "lvae/loss.hpp"
#include "lvae/model.hpp"
#include "lvae/optim.hpp"

namespace lvae {

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 16;
  std::int64_t max_iterations = 3000;
  std::int64_t augment_iterations = 40000;  ///< augment only while iteration < this
  double augment_sigma_deg = 6.0;
  std::uint64_t seed = 1;
  std::int64_t checkpoint_every = 1000;  ///< 0 disables intermediate checkpoints
  std::int64_t validate_every = 500;     ///< 0 disables periodic validation
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  AdamConfig adam() const { return {learning_rate, beta1, beta2, adam_eps}; }

  void validate() const {
    if (!(learning_rate > 0)) throw ParameterError("train.learning_rate must be > 0");
    if (batch_size < 1) throw ParameterError("train.batch_size must be >= 1");
    if (max_iterations < 0) throw ParameterError("train.max_iterations must be >= 0");
    if (augment_iterations < 0) throw ParameterError("train.augment_iterations must be >= 0");
    if (!(augment_sigma_deg >= 0)) throw ParameterError("train.augment_sigma_deg must be >= 0");
    if (checkpoint_every < 0 || validate_every < 0) throw ParameterError("train cadences must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ParameterError("train: Adam betas must lie in [0, 1)");
    if (!(adam_eps > 0)) throw ParameterError("train.adam_eps must be > 0");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate},       {"batch_size", c.batch_size},
                     {"max_iterations", c.max_iterations},     {"augment_iterations", c.augment_iterations},
                     {"augment_sigma_deg", c.augment_sigma_deg}, {"seed", c.seed},
                     {"checkpoint_every", c.checkpoint_every}, {"validate_every", c.validate_every},
                     {"beta1", c.beta1},                       {"beta2", c.beta2},
                     {"adam_eps", c.adam_eps}};
}

inline void update_from_json(TrainConfig& c, const nlohmann::json& j, const std::string& prefix = "train.") {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const auto& v = it.value();
    try {
      if (k == "learning_rate") c.learning_rate = v.get<double>();
      else if (k == "batch_size") c.batch_size = v.get<int>();
      else if (k == "max_iterations") c.max_iterations = v.get<std::int64_t>();
      else if (k == "augment_iterations") c.augment_iterations = v.get<std::int64_t>();
      else if (k == "augment_sigma_deg") c.augment_sigma_deg = v.get<double>();
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "checkpoint_every") c.checkpoint_every = v.get<std::int64_t>();
      else if (k == "validate_every") c.validate_every = v.get<std::int64_t>();
      else if (k == "beta1") c.beta1 = v.get<double>();
      else if (k == "beta2") c.beta2 = v.get<double>();
      else if (k == "adam_eps") c.adam_eps = v.get<double>();
      else throw ConfigError(prefix + k, "unknown key");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(prefix + k, std::string("wrong type: ") + e.what());
    }
  }
}

inline void to_json(nlohmann::json& j, const LossWeights& w) {
  j = nlohmann::json{{"alpha", w.alpha},
                     {"beta", w.beta},
                     {"gamma_step", w.gamma.step},
                     {"gamma_interval", w.gamma.interval},
                     {"gamma_cap", w.gamma.cap},
                     {"warmup", w.gamma.enabled}};
}

inline void update_from_json(LossWeights& w, const nlohmann::json& j, const std::string& prefix = "loss.") {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const auto& v = it.value();
    try {
      if (k == "alpha") w.alpha = v.get<std::vector<double>>();
      else if (k == "beta") w.beta = v.get<double>();
      else if (k == "gamma_step") w.gamma.step = v.get<double>();
      else if (k == "gamma_interval") w.gamma.interval = v.get<std::int64_t>();
      else if (k == "gamma_cap") w.gamma.cap = v.get<double>();
      else if (k == "warmup") w.gamma.enabled = v.get<bool>();
      else throw ConfigError(prefix + k, "unknown key");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(prefix + k, std::string("wrong type: ") + e.what());
    }
  }
}

inline std::string describe(const LossBreakdown& b) {
  std::ostringstream os;
  os << "dice=[";
  for (std::size_t i = 0; i < b.dice.size(); ++i) os << (i ? "," : "") << b.dice[i];
  os << "] kl=[";
  for (std::size_t i = 0; i < b.kl.size(); ++i) os << (i ? "," : "") << b.kl[i];
  os << "] ce=" << b.ce << " gamma=" << b.gamma << " total=" << b.total;
  return os.str();
}

/// Draws a batch of distinct indices in [0, n) (all of them, shuffled, when n <= size).
template <class Rng>
std::vector<std::size_t> draw_batch(std::size_t n, std::size_t size, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  const std::size_t k = std::min(n, size);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  return idx;
}

/// One optimizer update on `batch`.  The rng drives augmentation and the
/// reparameterization noise.  Throws NumericError (before touching the
/// parameters) when the loss is not finite.
template <class T, class Rng>
LossBreakdown train_step(Model<T>& model, Adam<T>& opt, const std::vector<const Sample*>& batch,
                         const LossWeights& weights, std::int64_t iteration, Rng& rng, bool augment,
                         double augment_sigma_deg = 6.0) {
  if (batch.empty()) throw ParameterError("train_step: empty batch");
  std::vector<Volume> vols;
  std::vector<int> labels;
  vols.reserve(batch.size());
  for (const Sample* s : batch) {
    Volume v = prepare_input(s->volume, model.config());
    vols.push_back(augment ? augment_rotate(v, rng, augment_sigma_deg) : std::move(v));
    labels.push_back(s->label);
  }
  std::vector<const Volume*> ptrs;
  for (const auto& v : vols) ptrs.push_back(&v);
  const nn::Batch3d<T> x = to_batch<T>(ptrs);

  Tape<T> tape;
  auto fr = model.forward(x, Mode::train, &rng, &tape);
  auto obj = evaluate_objective(fr, x, labels, weights, warmup_gamma(iteration, weights.gamma));
  if (!std::isfinite(obj.breakdown.total))
    throw NumericError("non-finite loss at iteration " + std::to_string(iteration) + ": " + describe(obj.breakdown));
  model.zero_grad();
  model.backward(tape, fr, obj.grads);
  model.commit_batch_stats(tape);
  opt.step(model);
  return obj.breakdown;
}

struct LogRow {
  std::int64_t iteration = 0;
  LossBreakdown loss;
  std::optional<double> val_dice;
  std::optional<double> val_acc;
};

inline std::string log_header(int channels, int levels) {
  std::string h = "iteration,gamma";
  for (int c = 0; c < channels; ++c) h += ",dice_c" + std::to_string(c);
  for (int i = 1; i <= levels; ++i) h += ",kl_" + std::to_string(i);
  return h + ",ce,total,val_dice,val_acc";
}

inline std::string format_log_row(const LogRow& r) {
  std::string s = std::to_string(r.iteration) + "," + format_number(r.loss.gamma);
  for (double d : r.loss.dice) s += "," + format_number(d);
  for (double k : r.loss.kl) s += "," + format_number(k);
  s += "," + format_number(r.loss.ce) + "," + format_number(r.loss.total) + ",";
  if (r.val_dice) s += format_number(*r.val_dice);
  s += ",";
  if (r.val_acc) s += format_number(*r.val_acc);
  return s;
}

struct TrainResult {
  std::vector<LogRow> log;  ///< rows produced by this call
  std::vector<std::filesystem::path> checkpoints;
  std::filesystem::path final_checkpoint;
  std::filesystem::path log_path;
};

inline std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, std::int64_t iteration) {
  char name[48];
  std::snprintf(name, sizeof name, "ckpt_%08lld.lvck", static_cast<long long>(iteration));
  return out_dir / "checkpoints" / name;
}

/// Mean per-channel hard Dice and accuracy on `samples` in eval mode.
template <class T>
std::pair<double, double> quick_validation(const Model<T>& model, const std::vector<const Sample*>& samples) {
  auto report = evaluate_predictions(predict(model, samples), "val");
  return {mean_dice(report), report.rates.accuracy};
}

/// Full training run (or its continuation from `resume_from`).  Writes
/// checkpoints to <out>/checkpoints and the metric log to <out>/train_log.csv.
/// A single seeded engine drives initialization, batching, augmentation and
/// latent sampling, and its state is checkpointed, so a resumed run matches
/// the uninterrupted one bit for bit.
template <class T = float>
TrainResult train_loop(const ModelConfig& model_cfg, const TrainConfig& cfg, const LossWeights& weights,
                       const std::vector<Sample>& dataset, const std::filesystem::path& out_dir,
                       const std::optional<std::filesystem::path>& resume_from = std::nullopt) {
  cfg.validate();
  auto train = select_split(dataset, Split::train);
  auto val = select_split(dataset, Split::val);
  if (train.empty()) throw ParameterError("train_loop: train split is empty");
  if (val.empty()) throw ParameterError("train_loop: val split is empty");

  std::mt19937_64 rng(cfg.seed);
  Model<T> model;
  Adam<T> opt;
  std::int64_t start = 0;
  if (resume_from) {
    CheckpointData ck = read_checkpoint(*resume_from);
    model = model_from_checkpoint<T>(ck);
    opt = Adam<T>(model, cfg.adam());
    restore_optimizer(ck, opt);
    start = ck.header.at("iteration").get<std::int64_t>();
    std::istringstream is(ck.header.at("rng_state").get<std::string>());
    is >> rng;
    if (!is) throw FormatError("checkpoint: unreadable rng state", 0);
  } else {
    model = Model<T>(model_cfg);
    model.initialize(rng);
    opt = Adam<T>(model, cfg.adam());
  }
  weights.validate(model.levels());

  TrainResult result;
  result.log_path = out_dir / "train_log.csv";
  const nlohmann::json train_json = cfg, loss_json = weights;
  const std::string fingerprint = dataset_fingerprint(dataset);
  auto save = [&](std::int64_t iteration) {
    std::ostringstream rs;
    rs << rng;
    nlohmann::json extra{{"iteration", iteration},
                         {"seed", cfg.seed},
                         {"rng_state", rs.str()},
                         {"train", train_json},
                         {"loss", loss_json},
                         {"dataset", fingerprint}};
    auto path = checkpoint_path(out_dir, iteration);
    write_checkpoint(make_checkpoint(model, &opt, extra), path);
    result.checkpoints.push_back(path);
    result.final_checkpoint = path;
  };

  // Metric log: keep rows from before the resume point, then append.
  std::string log_text = log_header(model.config().input_channels, model.levels()) + "\n";
  if (resume_from && std::filesystem::exists(result.log_path)) {
    std::istringstream in(read_file_bytes(result.log_path));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (std::stoll(line.substr(0, line.find(','))) < start) log_text += line + "\n";
    }
  }
  std::filesystem::create_directories(out_dir);
  std::ofstream log(result.log_path, std::ios::binary | std::ios::trunc);
  if (!log) throw IoError("cannot write " + result.log_path.string());
  log << log_text;
  log.flush();

  if (!resume_from) save(0);
  for (std::int64_t it = start; it < cfg.max_iterations; ++it) {
    auto idx = draw_batch(train.size(), static_cast<std::size_t>(cfg.batch_size), rng);
    std::vector<const Sample*> batch;
    for (auto i : idx) batch.push_back(train[i]);
    LogRow row;
    row.iteration = it;
    row.loss = train_step(model, opt, batch, weights, it, rng, it < cfg.augment_iterations, cfg.augment_sigma_deg);
    const std::int64_t done = it + 1;
    if (cfg.validate_every > 0 && done % cfg.validate_every == 0) {
      auto [d, a] = quick_validation(model, val);
      row.val_dice = d;
      row.val_acc = a;
    }
    log << format_log_row(row) << "\n";
    log.flush();
    result.log.push_back(std::move(row));
    if ((cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || done == cfg.max_iterations) save(done);
  }
  if (result.final_checkpoint.empty()) result.final_checkpoint = checkpoint_path(out_dir, std::max(start, cfg.max_iterations));
  return result;
}

/// Final checkpoint of a run with exactly these settings in `out_dir`,
/// training it first unless a matching one is already there.
template <class T = float>
std::filesystem::path train_or_reuse(const ModelConfig& model_cfg, const TrainConfig& cfg, const LossWeights& weights,
                                     const std::vector<Sample>& dataset, const std::filesystem::path& out_dir,
                                     bool* reused = nullptr) {
  const auto final_ck = checkpoint_path(out_dir, cfg.max_iterations);
  if (reused) *reused = false;
  if (std::filesystem::exists(final_ck)) {
    try {
      const auto h = read_checkpoint(final_ck).header;
      if (h.value("train", nlohmann::json()) == nlohmann::json(cfg) &&
          h.value("loss", nlohmann::json()) == nlohmann::json(weights) &&
          h.value("model", nlohmann::json()) == nlohmann::json(model_cfg) &&
          h.value("dataset", std::string()) == dataset_fingerprint(dataset)) {
        if (reused) *reused = true;
        return final_ck;
      }
    } catch (const FormatError&) {
    }
  }
  return train_loop<T>(model_cfg, cfg, weights, dataset, out_dir).final_checkpoint;
}

}  // namespace lvae
