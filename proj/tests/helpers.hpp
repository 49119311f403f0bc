#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "rilke/model.hpp"
#include "rilke/rng.hpp"

namespace testing {

inline rilke::ModelConfig tiny_config(std::uint64_t seed = 3) {
  rilke::ModelConfig c;
  c.layers = 2;
  c.width = 16;
  c.heads = 2;
  c.ffn = 32;
  c.vocab = 24;
  c.max_len = 16;
  c.seed = seed;
  return c;
}

inline rilke::BaseModel tiny_model(std::uint64_t seed = 3) { return rilke::init_model(tiny_config(seed)); }

inline std::vector<float> gaussian(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  rilke::Rng rng(seed);
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(nd(rng));
  return v;
}

inline rilke::Matrix gaussian_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  return rilke::Matrix(r, c, gaussian(r * c, seed, scale));
}

// Fresh empty directory under the build tree's temp area.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("rilke-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing
