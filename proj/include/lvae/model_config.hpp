#pragma once

#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"
#include "lvae/errors.hpp"
#include "lvae/gaussian.hpp"
#include "lvae/volume.hpp"

namespace lvae {

/// Architecture hyperparameters.  Latent levels are ordered bottom-up
/// (index 0 is the level feeding the decoder, the last is the 2-D top level).
struct ModelConfig {
  Dims input_dims{32, 32, 32};
  int input_channels = 2;
  std::vector<int> encoder_channels{8, 16, 32, 32};
  std::vector<int> decoder_channels{32, 32, 16, 8};  ///< deepest first; output layer maps the last to input_channels
  int conv_kernel = 4;
  int conv_stride = 2;
  int embedding_dim = 128;
  std::vector<int> latent_dims{16, 8, 2};
  std::vector<int> ladder_hidden{64, 32, 16};  ///< deterministic width per level (inference path and prior heads)
  int classifier_hidden = 32;
  VarianceBounds variance;
  double bn_momentum = 0.99;
  double bn_eps = 1e-5;
  double init_sd = 0.02;
  /// Flat VAE baseline: a single latent level, standard-normal prior, classifier on the whole latent.
  bool flat = false;

  int levels() const { return static_cast<int>(latent_dims.size()); }
  int total_latent() const { return std::accumulate(latent_dims.begin(), latent_dims.end(), 0); }

  Dims deepest_dims() const {
    Dims d = input_dims;
    for (std::size_t s = 0; s < encoder_channels.size(); ++s)
      d = Dims{(d.x + 2 * pad() - conv_kernel) / conv_stride + 1, (d.y + 2 * pad() - conv_kernel) / conv_stride + 1,
               (d.z + 2 * pad() - conv_kernel) / conv_stride + 1};
    return d;
  }
  int pad() const { return (conv_kernel - conv_stride) / 2; }

  /// The matching flat baseline: same encoder/decoder, one latent space whose
  /// size is the sum of the ladder's.
  ModelConfig flat_baseline() const {
    ModelConfig c = *this;
    c.flat = true;
    c.latent_dims = {total_latent()};
    c.ladder_hidden = {ladder_hidden.empty() ? 64 : ladder_hidden.front()};
    return c;
  }

  void validate() const {
    if (!input_dims.positive()) throw ParameterError("input_dims must be positive");
    if (input_channels < 1) throw ParameterError("input_channels must be >= 1");
    if (encoder_channels.empty()) throw ParameterError("encoder_channels must be nonempty");
    if (decoder_channels.size() != encoder_channels.size())
      throw ParameterError("decoder_channels must have as many stages as encoder_channels");
    for (int c : encoder_channels)
      if (c < 1) throw ParameterError("encoder_channels entries must be >= 1");
    for (int c : decoder_channels)
      if (c < 1) throw ParameterError("decoder_channels entries must be >= 1");
    if (conv_stride < 1 || conv_kernel < conv_stride || (conv_kernel - conv_stride) % 2 != 0)
      throw ParameterError("conv_kernel - conv_stride must be a nonnegative even number");
    Dims d = input_dims;
    for (std::size_t s = 0; s < encoder_channels.size(); ++s) {
      if (d.x % conv_stride || d.y % conv_stride || d.z % conv_stride)
        throw ParameterError("input_dims must be divisible by conv_stride^stages");
      d = Dims{d.x / conv_stride, d.y / conv_stride, d.z / conv_stride};
    }
    if (embedding_dim < 1) throw ParameterError("embedding_dim must be >= 1");
    if (classifier_hidden < 1) throw ParameterError("classifier_hidden must be >= 1");
    if (ladder_hidden.size() != latent_dims.size())
      throw ParameterError("ladder_hidden must have one width per latent level");
    for (int h : ladder_hidden)
      if (h < 1) throw ParameterError("ladder_hidden entries must be >= 1");
    for (int z : latent_dims)
      if (z < 1) throw ParameterError("latent_dims entries must be >= 1");
    if (!(variance.var_min > 0 && variance.var_max > variance.var_min))
      throw ParameterError("variance bounds must satisfy 0 < var_min < var_max");
    if (!(bn_momentum >= 0 && bn_momentum < 1)) throw ParameterError("bn_momentum must lie in [0, 1)");
    if (flat) {
      if (latent_dims.size() != 1) throw ParameterError("flat baseline has exactly one latent level");
      return;
    }
    if (latent_dims.size() < 2) throw ParameterError("latent_dims must have at least 2 levels");
    if (latent_dims.back() != 2) throw ParameterError("top latent level must be 2-dimensional");
    for (std::size_t i = 1; i < latent_dims.size(); ++i)
      if (latent_dims[i] >= latent_dims[i - 1])
        throw ParameterError("latent_dims must be strictly decreasing bottom-up");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"input_dims", {c.input_dims.x, c.input_dims.y, c.input_dims.z}},
                     {"input_channels", c.input_channels},
                     {"encoder_channels", c.encoder_channels},
                     {"decoder_channels", c.decoder_channels},
                     {"conv_kernel", c.conv_kernel},
                     {"conv_stride", c.conv_stride},
                     {"embedding_dim", c.embedding_dim},
                     {"latent_dims", c.latent_dims},
                     {"ladder_hidden", c.ladder_hidden},
                     {"classifier_hidden", c.classifier_hidden},
                     {"var_min", c.variance.var_min},
                     {"var_max", c.variance.var_max},
                     {"bn_momentum", c.bn_momentum},
                     {"bn_eps", c.bn_eps},
                     {"init_sd", c.init_sd},
                     {"flat", c.flat}};
}

/// Reads known keys, rejecting unknown ones.  Absent keys keep their current value.
inline void update_from_json(ModelConfig& c, const nlohmann::json& j, const std::string& prefix = "model.") {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const auto& v = it.value();
    try {
      if (k == "input_dims") {
        auto a = v.get<std::vector<int>>();
        if (a.size() != 3) throw ConfigError(prefix + k, "expected 3 integers");
        c.input_dims = Dims{a[0], a[1], a[2]};
      } else if (k == "input_channels") c.input_channels = v.get<int>();
      else if (k == "encoder_channels") c.encoder_channels = v.get<std::vector<int>>();
      else if (k == "decoder_channels") c.decoder_channels = v.get<std::vector<int>>();
      else if (k == "conv_kernel") c.conv_kernel = v.get<int>();
      else if (k == "conv_stride") c.conv_stride = v.get<int>();
      else if (k == "embedding_dim") c.embedding_dim = v.get<int>();
      else if (k == "latent_dims") c.latent_dims = v.get<std::vector<int>>();
      else if (k == "ladder_hidden") c.ladder_hidden = v.get<std::vector<int>>();
      else if (k == "classifier_hidden") c.classifier_hidden = v.get<int>();
      else if (k == "var_min") c.variance.var_min = v.get<double>();
      else if (k == "var_max") c.variance.var_max = v.get<double>();
      else if (k == "bn_momentum") c.bn_momentum = v.get<double>();
      else if (k == "bn_eps") c.bn_eps = v.get<double>();
      else if (k == "init_sd") c.init_sd = v.get<double>();
      else if (k == "flat") c.flat = v.get<bool>();
      else throw ConfigError(prefix + k, "unknown key");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(prefix + k, std::string("wrong type: ") + e.what());
    }
  }
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  update_from_json(c, j);
  return c;
}

}  // namespace lvae
