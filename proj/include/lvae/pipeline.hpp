#pragma once

// Building blocks shared by the command-line tool and the reference checks.

#include <random>
#include <vector>

#include "lvae/config.hpp"
#include "lvae/explain.hpp"
#include "lvae/latent.hpp"
#include "lvae/synth.hpp"

namespace lvae {

/// Synthetic dataset of the run config, split into train/val/test.
inline std::vector<Sample> make_dataset(const RunConfig& cfg) {
  auto data = synth_generate(cfg.synth, cfg.n_per_class);
  split_dataset(data, cfg.split.fractions, cfg.split.seed);
  return data;
}

struct TemplatePair {
  std::vector<LatentEmbedding> embeddings;  ///< of the samples the densities were fitted on
  DensityModel density[2];
  TemplateShape shape[2];
};

/// Per-class KDE over the top-latent embeddings of `samples`, then
/// `n` prior-only decodes per class.  Class 0 is sampled before class 1 from
/// one engine seeded with `seed`.
template <class T>
TemplatePair build_templates(const Model<T>& model, const std::vector<const Sample*>& samples, std::size_t n,
                             std::uint64_t seed, Spacing spacing = {}) {
  TemplatePair t;
  t.embeddings = embed(model, samples);
  std::mt19937_64 rng(seed);
  for (int k = 0; k < 2; ++k) {
    t.density[k] = fit_kde(coordinates(t.embeddings, k), k);
    t.shape[k] = class_template(model, t.density[k], n, rng, spacing);
  }
  return t;
}

/// Class centroid difference (class 1 minus class 0) in the top latent space.
inline Point2 centroid_direction(const std::vector<LatentEmbedding>& e) {
  double sx[2] = {0, 0}, sy[2] = {0, 0}, n[2] = {0, 0};
  for (const auto& x : e) {
    const int k = x.label ? 1 : 0;
    sx[k] += x.coords.x;
    sy[k] += x.coords.y;
    n[k] += 1;
  }
  if (n[0] == 0 || n[1] == 0) return {1, 0};
  return {sx[1] / n[1] - sx[0] / n[0], sy[1] / n[1] - sy[0] / n[0]};
}

}  // namespace lvae
