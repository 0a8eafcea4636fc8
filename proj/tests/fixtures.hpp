#pragma once

#include <random>
#include <vector>

#include "visiontom/model.hpp"

namespace vtom::testing {

inline ModelConfig small_config(std::uint64_t seed, int layers = 2, int heads = 2, int head_dim = 4) {
  ModelConfig c;
  c.layers = layers;
  c.heads = heads;
  c.head_dim = head_dim;
  c.vocab = 12;
  c.visual_channels = 2;
  c.frames = 2;
  c.grid = 3;
  c.max_text = 3;
  c.seed = seed;
  return c;
}

inline std::vector<double> random_frames(const ModelConfig& c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 255.0);
  std::vector<double> f(c.frame_values());
  for (auto& v : f) v = u(rng);
  return f;
}

}  // namespace vtom::testing
