#pragma once

// Warm-up / augmentation / KL-ordering ablation matrix.

#include <filesystem>
#include <string>
#include <vector>

#include "lvae/config.hpp"
#include "lvae/trainer.hpp"

namespace lvae {

struct AblationRow {
  std::string variant_id;
  MeanSd dice;       ///< per-sample Dice averaged over channels
  MeanSd hausdorff;  ///< per-sample slice-wise Hausdorff (mm) averaged over channels
  double accuracy = 0;
};

/// Training settings of one variant: the run config with the toggles applied.
inline std::pair<TrainConfig, LossWeights> variant_settings(const RunConfig& cfg, const AblationVariant& v) {
  TrainConfig t = cfg.train;
  if (!v.augment) t.augment_iterations = 0;
  LossWeights w = cfg.loss;
  auto it = cfg.ablation.orderings.find(v.ordering);
  if (it == cfg.ablation.orderings.end()) throw ConfigError("ablation.variants", "unknown ordering '" + v.ordering + "'");
  w.alpha = it->second;
  w.gamma.enabled = v.warmup;
  RunConfig tmp = cfg;
  tmp.loss = w;
  return {t, tmp.effective_loss()};
}

/// Per-sample channel-averaged Dice and Hausdorff, and accuracy.
inline AblationRow summarize(const std::string& id, const std::vector<Prediction>& preds) {
  if (preds.empty()) throw MetricError("ablation: no samples to evaluate");
  std::vector<double> dice, haus;
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& p : preds) {
    Volume hard = binarize(p.recon);
    double d = 0, h = 0;
    bool defined = true;
    for (int c = 0; c < p.input.channels; ++c) {
      d += dice_score(hard, p.input, c);
      try {
        h += hausdorff_2d_slicewise(hard, p.input, c);
      } catch (const MetricError&) {
        defined = false;
      }
    }
    dice.push_back(d / p.input.channels);
    if (defined) haus.push_back(h / p.input.channels);
    scores.push_back(p.score);
    labels.push_back(p.label);
  }
  AblationRow r;
  r.variant_id = id;
  r.dice = mean_sd(dice);
  r.hausdorff = haus.empty() ? MeanSd{std::numeric_limits<double>::quiet_NaN(), 0} : mean_sd(haus);
  r.accuracy = classification_metrics(scores, labels).accuracy;
  return r;
}

/// Trains every variant into <out>/<variant_id> and evaluates it on the
/// configured split.  A variant whose final checkpoint already exists with
/// the same model, training and loss settings is evaluated without retraining.
inline std::vector<AblationRow> run_ablation(const RunConfig& cfg, const std::vector<Sample>& dataset,
                                             const std::filesystem::path& out_dir) {
  cfg.validate();
  const Split split = split_from_string(cfg.ablation.split);
  auto eval_samples = select_split(dataset, split);
  std::vector<AblationRow> rows;
  for (const auto& v : cfg.ablation.variants) {
    auto [train, weights] = variant_settings(cfg, v);
    const auto dir = out_dir / v.id;
    auto model = model_from_checkpoint<float>(
        read_checkpoint(train_or_reuse<float>(cfg.effective_model(), train, weights, dataset, out_dir / v.id)));
    rows.push_back(summarize(v.id, predict(model, eval_samples)));
  }
  return rows;
}

inline void write_ablation_report(const std::vector<AblationRow>& rows, const std::filesystem::path& path) {
  std::string out = "variant_id,dsc_mean,dsc_sd,hausdorff_mean,hausdorff_sd,accuracy\n";
  for (const auto& r : rows)
    out += r.variant_id + "," + format_number(r.dice.mean) + "," + format_number(r.dice.sd) + "," +
           format_number(r.hausdorff.mean) + "," + format_number(r.hausdorff.sd) + "," + format_number(r.accuracy) +
           "\n";
  write_file_bytes(path, out);
}

}  // namespace lvae
