#pragma once

// Run configuration: one JSON document with sections synth, split, model,
// train, loss, ablation and analysis.  Unknown keys anywhere are rejected
// with the dotted path of the offending key.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "lvae/errors.hpp"
#include "lvae/loss.hpp"
#include "lvae/model_config.hpp"
#include "lvae/svol.hpp"
#include "lvae/synth.hpp"
#include "lvae/trainer.hpp"

namespace lvae {

struct SplitConfig {
  std::vector<double> fractions{200.0 / 350.0, 50.0 / 350.0, 100.0 / 350.0};
  std::uint64_t seed = 11;
};

struct AblationVariant {
  std::string id;
  bool warmup = true;
  bool augment = true;
  std::string ordering = "ascending";
};

struct AblationConfig {
  /// KL weight vectors by ordering name, bottom-up.
  std::map<std::string, std::vector<double>> orderings{
      {"ascending", {0.02, 0.001, 0.0001}},
      {"equal", {0.0001, 0.0001, 0.0001}},
      {"descending", {0.0001, 0.001, 0.02}},
  };
  std::vector<AblationVariant> variants{
      {"dwu1_da1_ascending", true, true, "ascending"},  {"dwu0_da1_ascending", false, true, "ascending"},
      {"dwu1_da0_ascending", true, false, "ascending"}, {"dwu0_da0_ascending", false, false, "ascending"},
      {"dwu1_da1_equal", true, true, "equal"},          {"dwu1_da1_descending", true, true, "descending"},
  };
  std::string split = "train";
};

struct AnalysisConfig {
  std::size_t template_samples = 1000;
  int grid_x = 7, grid_y = 7;
  std::uint64_t seed = 5;
};

struct RunConfig {
  SynthParams synth;
  int n_per_class = 175;
  SplitConfig split;
  ModelConfig model;
  TrainConfig train;
  LossWeights loss;
  AblationConfig ablation;
  AnalysisConfig analysis;
  bool baseline = false;

  /// Model and loss weights actually trained (the flat baseline when `baseline`).
  ModelConfig effective_model() const { return baseline ? model.flat_baseline() : model; }
  LossWeights effective_loss() const {
    LossWeights w = loss;
    if (baseline) w.alpha = {loss.alpha.empty() ? 0.0 : loss.alpha.front()};
    return w;
  }

  void validate() const {
    try {
      synth.validate();
    } catch (const ParameterError& e) {
      throw ConfigError("synth", e.what());
    }
    if (n_per_class < 1) throw ConfigError("n_per_class", "must be >= 1");
    double s = 0;
    for (double f : split.fractions) {
      if (!(f >= 0)) throw ConfigError("split.fractions", "entries must be nonnegative");
      s += f;
    }
    if (split.fractions.size() != 3 || std::abs(s - 1.0) > 1e-9)
      throw ConfigError("split.fractions", "need 3 fractions summing to 1");
    try {
      model.validate();
      effective_model().validate();
    } catch (const ParameterError& e) {
      throw ConfigError("model", e.what());
    }
    try {
      train.validate();
    } catch (const ParameterError& e) {
      throw ConfigError("train", e.what());
    }
    try {
      effective_loss().validate(effective_model().levels());
    } catch (const ParameterError& e) {
      throw ConfigError("loss", e.what());
    }
    for (const auto& [name, a] : ablation.orderings)
      if (a.size() != loss.alpha.size())
        throw ConfigError("ablation.orderings." + name, "needs one weight per latent level");
    for (const auto& v : ablation.variants)
      if (!ablation.orderings.count(v.ordering))
        throw ConfigError("ablation.variants", "variant '" + v.id + "' names unknown ordering '" + v.ordering + "'");
    if (ablation.split != "train" && ablation.split != "val" && ablation.split != "test")
      throw ConfigError("ablation.split", "must be train, val or test");
    if (analysis.template_samples < 1) throw ConfigError("analysis.template_samples", "must be >= 1");
    if (analysis.grid_x < 2 || analysis.grid_y < 2) throw ConfigError("analysis.grid", "resolution must be >= 2");
  }
};

// ------------------------------------------------------------ JSON

inline nlohmann::json synth_to_json(const SynthParams& p) {
  return {{"dims", {p.dims.x, p.dims.y, p.dims.z}},
          {"channels", p.channels},
          {"spacing", {p.spacing.x, p.spacing.y, p.spacing.z}},
          {"inner_radius", p.inner_radius},
          {"outer_radius", p.outer_radius},
          {"long_axis_scale", p.long_axis_scale},
          {"center_z_fraction", p.center_z_fraction},
          {"base_cut", p.base_cut},
          {"sector_center_deg", p.sector_center_deg},
          {"sector_half_width_deg", p.sector_half_width_deg},
          {"thickness_increment", p.thickness_increment},
          {"cavity_shrink", p.cavity_shrink},
          {"contracted_inner_scale", p.contracted_inner_scale},
          {"contracted_outer_scale", p.contracted_outer_scale},
          {"radius_jitter", p.radius_jitter},
          {"thickness_jitter", p.thickness_jitter},
          {"pose_jitter", p.pose_jitter},
          {"seed", p.seed}};
}

namespace detail {

template <class Fn>
void for_each_key(const nlohmann::json& j, const std::string& section, Fn&& fn) {
  if (!j.is_object()) throw ConfigError(section, "expected an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string path = section + "." + it.key();
    try {
      if (!fn(it.key(), it.value())) throw ConfigError(path, "unknown key");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(path, std::string("wrong type: ") + e.what());
    }
  }
}

}  // namespace detail

inline void synth_from_json(SynthParams& p, const nlohmann::json& j) {
  detail::for_each_key(j, "synth", [&](const std::string& k, const nlohmann::json& v) {
    if (k == "dims") {
      auto a = v.get<std::vector<int>>();
      if (a.size() != 3) throw ConfigError("synth.dims", "expected 3 integers");
      p.dims = {a[0], a[1], a[2]};
    } else if (k == "spacing") {
      auto a = v.get<std::vector<double>>();
      if (a.size() != 3) throw ConfigError("synth.spacing", "expected 3 numbers");
      p.spacing = {a[0], a[1], a[2]};
    } else if (k == "channels") p.channels = v.get<int>();
    else if (k == "inner_radius") p.inner_radius = v.get<double>();
    else if (k == "outer_radius") p.outer_radius = v.get<double>();
    else if (k == "long_axis_scale") p.long_axis_scale = v.get<double>();
    else if (k == "center_z_fraction") p.center_z_fraction = v.get<double>();
    else if (k == "base_cut") p.base_cut = v.get<double>();
    else if (k == "sector_center_deg") p.sector_center_deg = v.get<double>();
    else if (k == "sector_half_width_deg") p.sector_half_width_deg = v.get<double>();
    else if (k == "thickness_increment") p.thickness_increment = v.get<double>();
    else if (k == "cavity_shrink") p.cavity_shrink = v.get<double>();
    else if (k == "contracted_inner_scale") p.contracted_inner_scale = v.get<double>();
    else if (k == "contracted_outer_scale") p.contracted_outer_scale = v.get<double>();
    else if (k == "radius_jitter") p.radius_jitter = v.get<double>();
    else if (k == "thickness_jitter") p.thickness_jitter = v.get<double>();
    else if (k == "pose_jitter") p.pose_jitter = v.get<double>();
    else if (k == "seed") p.seed = v.get<std::uint64_t>();
    else return false;
    return true;
  });
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json orderings = nlohmann::json::object();
  for (const auto& [k, v] : c.ablation.orderings) orderings[k] = v;
  nlohmann::json variants = nlohmann::json::array();
  for (const auto& v : c.ablation.variants)
    variants.push_back({{"id", v.id}, {"warmup", v.warmup}, {"augment", v.augment}, {"ordering", v.ordering}});
  return {{"synth", synth_to_json(c.synth)},
          {"n_per_class", c.n_per_class},
          {"split", {{"fractions", c.split.fractions}, {"seed", c.split.seed}}},
          {"model", c.model},
          {"train", c.train},
          {"loss", c.loss},
          {"ablation", {{"orderings", orderings}, {"variants", variants}, {"split", c.ablation.split}}},
          {"analysis",
           {{"template_samples", c.analysis.template_samples},
            {"grid", {c.analysis.grid_x, c.analysis.grid_y}},
            {"seed", c.analysis.seed}}},
          {"baseline", c.baseline}};
}

/// Applies every key of `j` onto `c`; absent keys keep their current value.
inline void update_from_json(RunConfig& c, const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const auto& v = it.value();
    try {
      if (k == "synth") synth_from_json(c.synth, v);
      else if (k == "n_per_class") c.n_per_class = v.get<int>();
      else if (k == "model") update_from_json(c.model, v, "model.");
      else if (k == "train") update_from_json(c.train, v, "train.");
      else if (k == "loss") update_from_json(c.loss, v, "loss.");
      else if (k == "baseline") c.baseline = v.get<bool>();
      else if (k == "split") {
        detail::for_each_key(v, "split", [&](const std::string& s, const nlohmann::json& x) {
          if (s == "fractions") c.split.fractions = x.get<std::vector<double>>();
          else if (s == "seed") c.split.seed = x.get<std::uint64_t>();
          else return false;
          return true;
        });
      } else if (k == "ablation") {
        detail::for_each_key(v, "ablation", [&](const std::string& s, const nlohmann::json& x) {
          if (s == "orderings") c.ablation.orderings = x.get<std::map<std::string, std::vector<double>>>();
          else if (s == "split") c.ablation.split = x.get<std::string>();
          else if (s == "variants") {
            c.ablation.variants.clear();
            for (const auto& e : x) {
              AblationVariant var;
              detail::for_each_key(e, "ablation.variants[]", [&](const std::string& f, const nlohmann::json& y) {
                if (f == "id") var.id = y.get<std::string>();
                else if (f == "warmup") var.warmup = y.get<bool>();
                else if (f == "augment") var.augment = y.get<bool>();
                else if (f == "ordering") var.ordering = y.get<std::string>();
                else return false;
                return true;
              });
              c.ablation.variants.push_back(var);
            }
          } else return false;
          return true;
        });
      } else if (k == "analysis") {
        detail::for_each_key(v, "analysis", [&](const std::string& s, const nlohmann::json& x) {
          if (s == "template_samples") c.analysis.template_samples = x.get<std::size_t>();
          else if (s == "seed") c.analysis.seed = x.get<std::uint64_t>();
          else if (s == "grid") {
            auto g = x.get<std::vector<int>>();
            if (g.size() != 2) throw ConfigError("analysis.grid", "expected 2 integers");
            c.analysis.grid_x = g[0];
            c.analysis.grid_y = g[1];
          } else return false;
          return true;
        });
      } else throw ConfigError(k, "unknown key");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(k, std::string("wrong type: ") + e.what());
    }
  }
}

/// Parses a `key.path=value` override.  The value is read as JSON when it
/// parses as JSON and as a plain string otherwise.
inline void apply_override(nlohmann::json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like key=value");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  nlohmann::json* node = &root;
  std::size_t pos = 0;
  while (true) {
    const auto dot = key.find('.', pos);
    const std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (part.empty()) throw ConfigError(key, "empty path component");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    if (!node->contains(part)) (*node)[part] = nlohmann::json::object();
    node = &(*node)[part];
    if (!node->is_object()) throw ConfigError(key, "'" + part + "' is not a section");
    pos = dot + 1;
  }
}

/// Defaults, then the file (if any), then overrides; validated.
inline RunConfig load_run_config(const std::filesystem::path* file, const std::vector<std::string>& overrides) {
  nlohmann::json j = nlohmann::json::object();
  if (file) {
    try {
      j = nlohmann::json::parse(read_file_bytes(*file));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(file->string(), std::string("invalid JSON: ") + e.what());
    }
  }
  for (const auto& o : overrides) apply_override(j, o);
  RunConfig c;
  update_from_json(c, j);
  c.validate();
  return c;
}

/// FNV-1a over the canonical JSON text.
inline std::string config_hash(const nlohmann::json& j) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace lvae
