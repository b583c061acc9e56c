#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "lvae/errors.hpp"
#include "lvae/svol.hpp"
#include "lvae/volume.hpp"

namespace lvae {

enum class Split { train, val, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ParameterError("unknown split '" + s + "'");
}

struct Sample {
  std::string id;
  Volume volume;
  int label = 0;
  Split split = Split::train;
};

/// Manifest row: a sample whose volume lives in a file.
struct SampleRef {
  std::string id;
  std::filesystem::path path;
  int label = 0;
  Split split = Split::train;
};

/// Reads a JSON manifest (array of {id, path, label, split}).  Relative paths
/// are resolved against the manifest's directory.
inline std::vector<SampleRef> load_manifest(const std::filesystem::path& path) {
  std::string text = read_file_bytes(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("manifest is not valid JSON: ") + e.what(), e.byte);
  }
  if (!j.is_array()) throw FormatError("manifest must be a JSON array", 0);
  std::vector<SampleRef> out;
  std::set<std::string> seen;
  auto base = path.parent_path();
  for (const auto& e : j) {
    if (!e.is_object() || !e.contains("id") || !e.contains("path") || !e.contains("label") || !e.contains("split"))
      throw FormatError("manifest entry " + std::to_string(out.size()) + " lacks id/path/label/split", 0);
    SampleRef r;
    r.id = e.at("id").get<std::string>();
    std::filesystem::path p = e.at("path").get<std::string>();
    r.path = p.is_absolute() ? p : base / p;
    r.label = e.at("label").get<int>();
    if (r.label != 0 && r.label != 1) throw FormatError("manifest entry '" + r.id + "' has label outside {0,1}", 0);
    r.split = split_from_string(e.at("split").get<std::string>());
    if (!seen.insert(r.id).second) throw FormatError("duplicate sample id '" + r.id + "' in manifest", 0);
    out.push_back(std::move(r));
  }
  return out;
}

/// Writes each sample's volume under `dir/volumes/` and a manifest at `dir/manifest.json`.
inline std::filesystem::path save_dataset(const std::vector<Sample>& samples, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "volumes");
  nlohmann::json j = nlohmann::json::array();
  std::set<std::string> seen;
  for (const auto& s : samples) {
    if (!seen.insert(s.id).second) throw ParameterError("duplicate sample id '" + s.id + "'");
    std::string rel = "volumes/" + s.id + ".svol";
    save_volume(s.volume, dir / rel);
    j.push_back({{"id", s.id}, {"path", rel}, {"label", s.label}, {"split", to_string(s.split)}});
  }
  auto manifest = dir / "manifest.json";
  write_file_bytes(manifest, j.dump(2) + "\n");
  return manifest;
}

inline std::vector<Sample> load_dataset(const std::filesystem::path& manifest) {
  std::vector<Sample> out;
  for (auto& r : load_manifest(manifest)) out.push_back({r.id, load_volume(r.path), r.label, r.split});
  return out;
}

inline std::vector<const Sample*> select_split(const std::vector<Sample>& samples, Split s) {
  std::vector<const Sample*> out;
  for (const auto& x : samples)
    if (x.split == s) out.push_back(&x);
  return out;
}

/// Largest-remainder apportionment of `n` items over `fractions`.  Ties in the
/// remainder go to the earlier split.
inline std::vector<std::size_t> apportion(std::size_t n, const std::vector<double>& fractions) {
  std::vector<std::size_t> counts(fractions.size());
  std::vector<std::pair<double, std::size_t>> rem;
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < fractions.size(); ++k) {
    double exact = fractions[k] * static_cast<double>(n);
    counts[k] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    assigned += counts[k];
    rem.emplace_back(exact - static_cast<double>(counts[k]), k);
  }
  std::stable_sort(rem.begin(), rem.end(), [](auto& a, auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; assigned < n && k < rem.size(); ++k, ++assigned) ++counts[rem[k].second];
  return counts;
}

/// Stratified random split into train/val/test.  Within each label, samples are
/// ordered by id, shuffled with `seed`, and cut by largest-remainder counts.
inline void split_dataset(std::vector<Sample>& samples, const std::vector<double>& fractions, std::uint64_t seed) {
  if (fractions.size() != 3) throw ParameterError("split fractions must have exactly 3 entries (train, val, test)");
  double sum = 0;
  for (double f : fractions) {
    if (f < 0) throw ParameterError("split fractions must be nonnegative");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ParameterError("split fractions must sum to 1");
  std::size_t nonzero = std::count_if(fractions.begin(), fractions.end(), [](double f) { return f > 0; });

  std::map<int, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < samples.size(); ++i) by_label[samples[i].label].push_back(i);

  std::mt19937_64 rng(seed);
  for (auto& [label, idx] : by_label) {
    if (idx.size() < nonzero)
      throw ParameterError("class " + std::to_string(label) + " has " + std::to_string(idx.size()) +
                           " samples, fewer than the " + std::to_string(nonzero) + " requested splits");
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return samples[a].id < samples[b].id; });
    std::shuffle(idx.begin(), idx.end(), rng);
    auto counts = apportion(idx.size(), fractions);
    std::size_t pos = 0;
    for (std::size_t k = 0; k < 3; ++k)
      for (std::size_t c = 0; c < counts[k]; ++c) samples[idx[pos++]].split = static_cast<Split>(k);
  }
}

/// FNV-1a over ids, labels, splits, geometry and voxel values, as 16 hex digits.
inline std::string dataset_fingerprint(const std::vector<Sample>& samples) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&](const void* p, std::size_t n) {
    auto b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ull;
    }
  };
  for (const auto& s : samples) {
    mix(s.id.data(), s.id.size());
    const int meta[] = {s.label, static_cast<int>(s.split), s.volume.dims.x, s.volume.dims.y, s.volume.dims.z,
                        s.volume.channels};
    mix(meta, sizeof meta);
    const double sp[] = {s.volume.spacing.x, s.volume.spacing.y, s.volume.spacing.z};
    mix(sp, sizeof sp);
    mix(s.volume.data.data(), s.volume.data.size() * sizeof(float));
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace lvae
