#pragma once

#include <cstdint>
#include <string>

#include <Eigen/Core>

#include "srlvae/data.hpp"
#include "srlvae/vae.hpp"

namespace srlvae {

// Latent-MSE landscape around one image along two orthonormal pixel-space
// directions. Offsets run over radius * [-1, 1] in pixel units: a unit l2
// direction is scaled by sqrt(C*H*W) so that its RMS per-pixel magnitude is 1.
struct SurfaceGrid {
  Eigen::MatrixXd grid;  // (2R+1) x (2R+1), max-normalized
  Tensor d1;
  Tensor d2;
  int half_res = 0;
  double radius = 0.0;
  double raw_max = 0.0;
  std::uint64_t seed = 0;
  std::string anchor_id;
};

// Per-pixel Gaussian directions, l2-normalized and Gram-Schmidt orthogonalized.
std::pair<Tensor, Tensor> surface_directions(const Shape& item_shape, std::uint64_t seed);

SurfaceGrid loss_surface(const VaeModel& model, const ImageBatch& anchor, double radius, int half_res,
                         std::uint64_t seed);
SurfaceGrid loss_surface_along(const VaeModel& model, const ImageBatch& anchor, const Tensor& d1, const Tensor& d2,
                               double radius, int half_res);

// Mean |first difference| along rows plus the same along columns; 0 for a
// constant grid, lower is smoother.
double smoothness_score(const Eigen::MatrixXd& grid);
inline double smoothness_score(const SurfaceGrid& g) { return smoothness_score(g.grid); }

struct PcaResult {
  Eigen::VectorXd mean;
  Eigen::MatrixXd components;  // d x k, orthonormal columns
  Eigen::VectorXd explained_variance_ratio;
  Eigen::MatrixXd projections;  // N x k
};

// Rows of `latents` are flattened latent vectors.
PcaResult latent_pca(const Eigen::MatrixXd& latents, int k);
Eigen::MatrixXd flatten_items(const Tensor& t);

struct TightnessStats {
  double mean_pair_dist = 0.0;
  double baseline_spread = 0.0;
  double tightness_ratio = 0.0;
};

// Distance between clean and Gaussian-noised latents relative to the spread
// between distinct images.
TightnessStats cluster_tightness(const VaeModel& model, const ImageBatch& x, double noise_sigma, std::uint64_t seed);

}  // namespace srlvae
