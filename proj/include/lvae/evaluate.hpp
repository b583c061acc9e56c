#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "lvae/augment.hpp"
#include "lvae/dataset.hpp"
#include "lvae/errors.hpp"
#include "lvae/metrics.hpp"
#include "lvae/model.hpp"
#include "lvae/svol.hpp"

namespace lvae {

/// Brings a sample volume to the model's input geometry (centered crop/pad if needed).
inline Volume prepare_input(const Volume& v, const ModelConfig& cfg) {
  if (v.channels != cfg.input_channels)
    throw ShapeError("volume has " + std::to_string(v.channels) + " channels, model expects " +
                     std::to_string(cfg.input_channels));
  if (v.dims == cfg.input_dims) return v;
  return crop_pad_center(v, cfg.input_dims);
}

/// Eval-mode outputs for one sample.
struct Prediction {
  std::string id;
  int label = 0;
  Volume input;
  Volume recon;                ///< probabilities
  double score = 0;            ///< class-1 probability
  std::vector<double> top_mean;  ///< mu_e of the top level
};

/// Deterministic eval-mode inference in chunks of `chunk` samples.
template <class T>
std::vector<Prediction> predict(const Model<T>& model, const std::vector<const Sample*>& samples,
                                std::size_t chunk = 16) {
  std::vector<Prediction> out;
  out.reserve(samples.size());
  const auto& cfg = model.config();
  for (std::size_t b = 0; b < samples.size(); b += chunk) {
    const std::size_t e = std::min(samples.size(), b + chunk);
    std::vector<Volume> vols;
    for (std::size_t i = b; i < e; ++i) vols.push_back(prepare_input(samples[i]->volume, cfg));
    std::vector<const Volume*> ptrs;
    for (const auto& v : vols) ptrs.push_back(&v);
    auto fr = model.forward_eval(to_batch<T>(ptrs));
    for (std::size_t i = b; i < e; ++i) {
      Prediction p;
      p.id = samples[i]->id;
      p.label = samples[i]->label;
      p.input = std::move(vols[i - b]);
      p.recon = to_volume<T>(fr.recon[i - b], cfg.input_dims, p.input.spacing);
      p.score = fr.scores(0, static_cast<Eigen::Index>(i - b));
      const auto& top = fr.ladder.top().e.mean;
      for (Eigen::Index r = 0; r < top.rows(); ++r) p.top_mean.push_back(top(r, static_cast<Eigen::Index>(i - b)));
      out.push_back(std::move(p));
    }
  }
  return out;
}

struct ChannelStats {
  MeanSd dice;
  MeanSd hausdorff;                 ///< mm, over samples where it is defined
  std::size_t hausdorff_undefined = 0;
};

struct EvalReport {
  std::string split;
  std::vector<ChannelStats> channels;
  ClassificationRates rates;
  std::size_t count = 0;
};

inline EvalReport evaluate_predictions(const std::vector<Prediction>& preds, const std::string& split = "test") {
  if (preds.empty()) throw MetricError("evaluate: no samples");
  EvalReport r;
  r.split = split;
  r.count = preds.size();
  const int C = preds.front().input.channels;
  for (int c = 0; c < C; ++c) {
    std::vector<double> dice, haus;
    ChannelStats cs;
    for (const auto& p : preds) {
      Volume hard = binarize(p.recon);
      dice.push_back(dice_score(hard, p.input, c));
      try {
        haus.push_back(hausdorff_2d_slicewise(hard, p.input, c));
      } catch (const MetricError&) {
        ++cs.hausdorff_undefined;
      }
    }
    cs.dice = mean_sd(dice);
    cs.hausdorff = haus.empty() ? MeanSd{std::numeric_limits<double>::quiet_NaN(), 0} : mean_sd(haus);
    r.channels.push_back(cs);
  }
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& p : preds) {
    scores.push_back(p.score);
    labels.push_back(p.label);
  }
  r.rates = classification_metrics(scores, labels);
  return r;
}

/// Mean over channels of the mean Dice.
inline double mean_dice(const EvalReport& r) {
  double s = 0;
  for (const auto& c : r.channels) s += c.dice.mean;
  return s / static_cast<double>(r.channels.size());
}

inline std::string format_number(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

/// Writes <prefix>_segmentation.csv and <prefix>_classification.csv.
inline void write_eval_report(const std::vector<EvalReport>& reports, const std::filesystem::path& prefix) {
  std::string seg = "split,channel,dsc_mean,dsc_sd,h_mean,h_sd\n";
  std::string cls = "split,count,accuracy,sensitivity,specificity\n";
  for (const auto& r : reports) {
    for (std::size_t c = 0; c < r.channels.size(); ++c) {
      const auto& s = r.channels[c];
      seg += r.split + "," + std::to_string(c) + "," + format_number(s.dice.mean) + "," + format_number(s.dice.sd) +
             "," + format_number(s.hausdorff.mean) + "," + format_number(s.hausdorff.sd) + "\n";
    }
    cls += r.split + "," + std::to_string(r.count) + "," + format_number(r.rates.accuracy) + "," +
           (r.rates.sensitivity ? format_number(*r.rates.sensitivity) : "") + "," +
           (r.rates.specificity ? format_number(*r.rates.specificity) : "") + "\n";
  }
  write_file_bytes(prefix.string() + "_segmentation.csv", seg);
  write_file_bytes(prefix.string() + "_classification.csv", cls);
}

}  // namespace lvae
