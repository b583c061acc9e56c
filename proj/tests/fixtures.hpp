#pragma once

#include <random>
#include <string>
#include <vector>

#include "lvae/dataset.hpp"
#include "lvae/volume.hpp"

namespace lvae::support {

/// Two-channel 8^3 boxes; class 1 boxes are one voxel wider.  Splits are
/// assigned round-robin: train, train, val, test.
inline std::vector<Sample> tiny_dataset(int n_per_class, std::uint64_t seed = 3) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> shift(-1, 1);
  std::vector<Sample> out;
  const Split order[] = {Split::train, Split::train, Split::val, Split::test};
  for (int label = 0; label < 2; ++label) {
    for (int k = 0; k < n_per_class; ++k) {
      Volume v({8, 8, 8}, 2);
      const int dx = shift(rng), dy = shift(rng), half = 1 + label;
      for (int c = 0; c < 2; ++c)
        for (int z = 2; z < 6; ++z)
          for (int y = 4 - half + dy; y < 4 + half + dy; ++y)
            for (int x = 4 - half - c + dx; x < 4 + half + dx; ++x) v.at(c, x, y, z) = 1.0f;
      out.push_back({"s" + std::to_string(label) + "_" + std::to_string(k), std::move(v), label, order[k % 4]});
    }
  }
  return out;
}

}  // namespace lvae::support
