#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "srlvae/data.hpp"
#include "srlvae/tensor.hpp"
#include "srlvae/vae.hpp"

namespace srlvae::test_support {

inline VaeConfig tiny_config(std::uint64_t seed = 7) {
  VaeConfig c;
  c.image_channels = 3;
  c.channels = {4, 6, 8};
  c.downsample_levels = 2;
  c.latent_channels = 2;
  c.init_seed = seed;
  return c;
}

inline Tensor random_tensor(const Shape& s, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(s);
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

inline ImageBatch random_batch(int n, int c, int h, int w, std::uint64_t seed) {
  ImageBatch b;
  b.pixels = random_tensor({n, c, h, w}, seed, 0.05, 0.95);
  for (int i = 0; i < n; ++i) b.ids.push_back("img_" + std::to_string(i));
  return b;
}

// |a - b| / max(|a|, |b|); pairs where both sides are below `floor` count as
// agreeing.
inline double relative_error(double a, double b, double floor = 1e-9) {
  const double scale = std::max(std::abs(a), std::abs(b));
  if (scale < floor) return 0.0;
  return std::abs(a - b) / scale;
}

inline double central_difference(std::vector<double>& params, std::size_t index, double h,
                                 const std::function<double()>& f) {
  const double saved = params[index];
  params[index] = saved + h;
  const double up = f();
  params[index] = saved - h;
  const double down = f();
  params[index] = saved;
  return (up - down) / (2.0 * h);
}

// Indices spread over the whole vector plus a few random ones.
inline std::vector<std::size_t> sample_indices(std::size_t size, int count, std::uint64_t seed) {
  std::vector<std::size_t> out;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, size - 1);
  for (int i = 0; i < count; ++i) {
    out.push_back(i % 2 == 0 ? (size - 1) * static_cast<std::size_t>(i) / static_cast<std::size_t>(count) : pick(rng));
  }
  return out;
}

}  // namespace srlvae::test_support
