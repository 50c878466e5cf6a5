#include "srlvae/latent_analysis.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <Eigen/Eigenvalues>
#include <fmt/format.h>

#include "srlvae/error.hpp"

namespace srlvae {
namespace {

constexpr int kSurfaceChunk = 64;

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void normalize(Tensor& t) {
  const double n = std::sqrt(dot(t.values(), t.values()));
  if (n == 0.0) throw NumericError("surface direction has zero norm");
  for (auto& v : t.storage()) v /= n;
}

}  // namespace

std::pair<Tensor, Tensor> surface_directions(const Shape& item_shape, std::uint64_t seed) {
  Shape s = item_shape;
  s.n = 1;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor d1(s), d2(s);
  for (auto& v : d1.storage()) v = normal(rng);
  for (auto& v : d2.storage()) v = normal(rng);
  normalize(d1);
  normalize(d2);
  const double proj = dot(d1.values(), d2.values());
  for (std::size_t i = 0; i < d2.size(); ++i) d2[i] -= proj * d1[i];
  normalize(d2);
  return {std::move(d1), std::move(d2)};
}

SurfaceGrid loss_surface(const VaeModel& model, const ImageBatch& anchor, double radius, int half_res,
                         std::uint64_t seed) {
  auto [d1, d2] = surface_directions(anchor.pixels.shape(), seed);
  SurfaceGrid g = loss_surface_along(model, anchor, d1, d2, radius, half_res);
  g.seed = seed;
  return g;
}

SurfaceGrid loss_surface_along(const VaeModel& model, const ImageBatch& anchor, const Tensor& d1, const Tensor& d2,
                               double radius, int half_res) {
  if (anchor.size() != 1) throw ShapeError("loss_surface expects a single anchor image");
  if (half_res < 2) throw ConfigError("loss_surface: half resolution must be >= 2");
  if (!(radius > 0.0)) throw ConfigError("loss_surface: radius must be positive");
  const Shape item = anchor.pixels.shape();
  if (d1.shape() != item || d2.shape() != item) throw ShapeError("loss_surface: direction shape mismatch");

  const int side = 2 * half_res + 1;
  const double pixel_scale = std::sqrt(static_cast<double>(item.per_item()));
  const Tensor clean = model.encode(anchor.pixels).mu();

  SurfaceGrid g;
  g.grid = Eigen::MatrixXd::Zero(side, side);
  g.d1 = d1;
  g.d2 = d2;
  g.half_res = half_res;
  g.radius = radius;
  g.anchor_id = anchor.ids.empty() ? "" : anchor.ids.front();

  const int cells = side * side;
  for (int first = 0; first < cells; first += kSurfaceChunk) {
    const int count = std::min(kSurfaceChunk, cells - first);
    Shape s = item;
    s.n = count;
    Tensor batch(s);
    for (int k = 0; k < count; ++k) {
      const int i = (first + k) / side - half_res;
      const int j = (first + k) % side - half_res;
      const double a = radius * i / half_res * pixel_scale;
      const double b = radius * j / half_res * pixel_scale;
      auto dst = batch.item(k);
      auto src = anchor.pixels.item(0);
      for (std::size_t p = 0; p < dst.size(); ++p) dst[p] = src[p] + a * d1[p] + b * d2[p];
    }
    const Tensor mu = model.encode(batch).mu();
    for (int k = 0; k < count; ++k) {
      auto m = mu.item(k);
      auto c = clean.item(0);
      double se = 0.0;
      for (std::size_t p = 0; p < m.size(); ++p) se += (m[p] - c[p]) * (m[p] - c[p]);
      g.grid((first + k) / side, (first + k) % side) = se / static_cast<double>(m.size());
    }
  }
  // The center is the anchor itself; batched GEMM rounding would otherwise
  // leave a ~1e-29 residue there.
  g.grid(half_res, half_res) = 0.0;
  g.raw_max = g.grid.maxCoeff();
  if (g.raw_max > 0.0) g.grid /= g.raw_max;
  return g;
}

double smoothness_score(const Eigen::MatrixXd& grid) {
  double score = 0.0;
  if (grid.cols() > 1) {
    score += (grid.rightCols(grid.cols() - 1) - grid.leftCols(grid.cols() - 1)).cwiseAbs().mean();
  }
  if (grid.rows() > 1) {
    score += (grid.bottomRows(grid.rows() - 1) - grid.topRows(grid.rows() - 1)).cwiseAbs().mean();
  }
  return score;
}

Eigen::MatrixXd flatten_items(const Tensor& t) {
  const Shape& s = t.shape();
  Eigen::MatrixXd m(s.n, static_cast<Eigen::Index>(s.per_item()));
  for (int n = 0; n < s.n; ++n) {
    auto item = t.item(n);
    for (std::size_t k = 0; k < item.size(); ++k) m(n, static_cast<Eigen::Index>(k)) = item[k];
  }
  return m;
}

PcaResult latent_pca(const Eigen::MatrixXd& latents, int k) {
  const Eigen::Index n = latents.rows();
  const Eigen::Index d = latents.cols();
  if (k < 1) throw ConfigError("latent_pca: k must be >= 1");
  if (n < k) throw ConfigError(fmt::format("latent_pca: {} samples cannot support {} components", n, k));
  if (n < 2) throw ConfigError("latent_pca: need at least 2 samples");
  PcaResult r;
  r.mean = latents.colwise().mean().transpose();
  const Eigen::MatrixXd centered = latents.rowwise() - r.mean.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw NumericError("latent_pca: eigendecomposition failed");
  const Eigen::VectorXd eig = es.eigenvalues().reverse().cwiseMax(0.0);
  const Eigen::MatrixXd vecs = es.eigenvectors().rowwise().reverse();
  const double total = eig.sum();
  const double tol = 1e-12 * std::max(eig.size() > 0 ? eig(0) : 0.0, 1e-300);
  const Eigen::Index rank = (eig.array() > tol).count();
  if (k > rank) throw ConfigError(fmt::format("latent_pca: k = {} exceeds data rank {}", k, rank));
  r.components = vecs.leftCols(k);
  for (int c = 0; c < k; ++c) {
    Eigen::Index arg;
    r.components.col(c).cwiseAbs().maxCoeff(&arg);
    if (r.components(arg, c) < 0) r.components.col(c) *= -1.0;
  }
  r.explained_variance_ratio = total > 0 ? Eigen::VectorXd(eig.head(k) / total) : Eigen::VectorXd::Zero(k);
  r.projections = centered * r.components;
  (void)d;
  return r;
}

TightnessStats cluster_tightness(const VaeModel& model, const ImageBatch& x, double noise_sigma, std::uint64_t seed) {
  if (x.size() < 2) throw ConfigError("cluster_tightness needs at least 2 images for a pairwise spread");
  if (!(noise_sigma > 0.0)) throw ConfigError("cluster_tightness: noise_sigma must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, noise_sigma);
  Tensor noisy = x.pixels;
  for (auto& v : noisy.storage()) v = std::clamp(v + normal(rng), 0.0, 1.0);
  const Eigen::MatrixXd clean = flatten_items(model.encode(x.pixels).mu());
  const Eigen::MatrixXd pert = flatten_items(model.encode(noisy).mu());
  const Eigen::Index n = clean.rows();
  TightnessStats s;
  std::vector<double> pair;
  for (Eigen::Index i = 0; i < n; ++i) pair.push_back((clean.row(i) - pert.row(i)).norm());
  s.mean_pair_dist = compensated_sum(pair) / static_cast<double>(n);
  std::vector<double> spread;
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) spread.push_back((clean.row(i) - clean.row(j)).norm());
  }
  s.baseline_spread = compensated_sum(spread) / static_cast<double>(spread.size());
  if (!(s.baseline_spread > 0.0)) throw NumericError("cluster_tightness: all clean latents coincide");
  s.tightness_ratio = s.mean_pair_dist / s.baseline_spread;
  return s;
}

}  // namespace srlvae
