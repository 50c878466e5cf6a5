#include <gtest/gtest.h>

#include <Eigen/SVD>
#include <cmath>

#include "srlvae/error.hpp"
#include "srlvae/latent_analysis.hpp"
#include "support.hpp"

using namespace srlvae;
namespace ts = srlvae::test_support;

namespace {

double dot(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST(Surface, DirectionsAreOrthonormalAndSeeded) {
  const auto [d1, d2] = surface_directions({4, 3, 8, 8}, 9);
  EXPECT_EQ(d1.shape(), (Shape{1, 3, 8, 8}));
  EXPECT_NEAR(dot(d1, d1), 1.0, 1e-12);
  EXPECT_NEAR(dot(d2, d2), 1.0, 1e-12);
  EXPECT_NEAR(dot(d1, d2), 0.0, 1e-12);
  const auto again = surface_directions({1, 3, 8, 8}, 9);
  EXPECT_EQ(again.first.storage(), d1.storage());
  EXPECT_NE(surface_directions({1, 3, 8, 8}, 10).first.storage(), d1.storage());
}

TEST(Surface, GridShapeCenterAndNormalization) {
  const VaeModel model(ts::tiny_config(2));
  const ImageBatch anchor = ts::random_batch(1, 3, 8, 8, 3);
  const SurfaceGrid g = loss_surface(model, anchor, 8.0 / 255.0, 3, 4);
  EXPECT_EQ(g.grid.rows(), 7);
  EXPECT_EQ(g.grid.cols(), 7);
  EXPECT_EQ(g.grid(3, 3), 0.0);
  EXPECT_NEAR(g.grid.maxCoeff(), 1.0, 1e-15);
  EXPECT_GE(g.grid.minCoeff(), 0.0);
  EXPECT_GT(g.raw_max, 0.0);
  EXPECT_EQ(g.anchor_id, "img_0");
  EXPECT_EQ(g.seed, 4u);
}

TEST(Surface, CellMatchesDirectEncoding) {
  const VaeModel model(ts::tiny_config(2));
  const ImageBatch anchor = ts::random_batch(1, 3, 8, 8, 3);
  const double radius = 0.05;
  const int r = 2;
  const SurfaceGrid g = loss_surface(model, anchor, radius, r, 4);
  const double scale = std::sqrt(3.0 * 8 * 8);
  const Tensor clean = model.encode(anchor.pixels).mu();
  // Row index -> d1 offset, column index -> d2 offset.
  const int i = 0, j = 3;
  Tensor x = anchor.pixels;
  for (std::size_t p = 0; p < x.size(); ++p) {
    x[p] += radius * (i - r) / r * scale * g.d1[p] + radius * (j - r) / r * scale * g.d2[p];
  }
  const Tensor mu = model.encode(x).mu();
  double se = 0;
  for (std::size_t p = 0; p < mu.size(); ++p) se += (mu[p] - clean[p]) * (mu[p] - clean[p]);
  EXPECT_NEAR(g.grid(i, j) * g.raw_max, se / static_cast<double>(mu.size()), 1e-12);
}

TEST(Surface, ArgumentErrors) {
  const VaeModel model(ts::tiny_config(2));
  EXPECT_THROW(loss_surface(model, ts::random_batch(2, 3, 8, 8, 3), 0.03, 3, 1), ShapeError);
  EXPECT_THROW(loss_surface(model, ts::random_batch(1, 3, 8, 8, 3), 0.03, 1, 1), ConfigError);
  EXPECT_THROW(loss_surface(model, ts::random_batch(1, 3, 8, 8, 3), 0.0, 3, 1), ConfigError);
}

TEST(Smoothness, MatchesLoopOracle) {
  EXPECT_EQ(smoothness_score(Eigen::MatrixXd::Constant(5, 5, 0.3)), 0.0);
  Eigen::MatrixXd g(3, 4);
  g << 0, 1, 0, 2,
       1, 1, 3, 0,
       0, 2, 2, 1;
  double rows = 0, cols = 0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j + 1 < 4; ++j) cols += std::abs(g(i, j + 1) - g(i, j));
  for (int i = 0; i + 1 < 3; ++i)
    for (int j = 0; j < 4; ++j) rows += std::abs(g(i + 1, j) - g(i, j));
  EXPECT_NEAR(smoothness_score(g), cols / 9 + rows / 8, 1e-14);
  Eigen::MatrixXd rough = g;
  rough(1, 1) += 5;
  EXPECT_GT(smoothness_score(rough), smoothness_score(g));
}

TEST(Pca, MatchesSvdOfCenteredData) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n01;
  Eigen::MatrixXd x(30, 6);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = n01(rng) * (6 - j) + j;
  const PcaResult r = latent_pca(x, 3);
  const Eigen::MatrixXd centered = x.rowwise() - x.colwise().mean();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  const Eigen::VectorXd s2 = svd.singularValues().array().square();
  EXPECT_TRUE((r.components.transpose() * r.components).isIdentity(1e-12));
  for (int c = 0; c < 3; ++c) {
    EXPECT_NEAR(std::abs(r.components.col(c).dot(svd.matrixV().col(c))), 1.0, 1e-9);
    EXPECT_NEAR(r.explained_variance_ratio(c), s2(c) / s2.sum(), 1e-12);
  }
  EXPECT_TRUE(r.projections.isApprox(centered * r.components, 1e-12));
  EXPECT_TRUE(r.projections.colwise().mean().isZero(1e-12));
}

TEST(Pca, RankAndArgumentErrors) {
  Eigen::MatrixXd x(4, 3);
  x << 1, 2, 3,
       2, 4, 6,
       3, 6, 9,
       4, 8, 12;  // rank-1 after centering
  EXPECT_NO_THROW(latent_pca(x, 1));
  EXPECT_THROW(latent_pca(x, 2), ConfigError);
  EXPECT_THROW(latent_pca(x, 0), ConfigError);
  EXPECT_THROW(latent_pca(x.topRows(1), 1), ConfigError);
}

TEST(Tightness, RatioFromDirectDistances) {
  const VaeModel model(ts::tiny_config(3));
  const ImageBatch x = ts::random_batch(4, 3, 8, 8, 6);
  const TightnessStats s = cluster_tightness(model, x, 0.03, 2);
  EXPECT_GT(s.mean_pair_dist, 0.0);
  EXPECT_GT(s.baseline_spread, 0.0);
  EXPECT_DOUBLE_EQ(s.tightness_ratio, s.mean_pair_dist / s.baseline_spread);

  const Eigen::MatrixXd clean = flatten_items(model.encode(x.pixels).mu());
  double spread = 0;
  int pairs = 0;
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j, ++pairs) spread += (clean.row(i) - clean.row(j)).norm();
  EXPECT_NEAR(s.baseline_spread, spread / pairs, 1e-12);

  const TightnessStats same = cluster_tightness(model, x, 0.03, 2);
  EXPECT_EQ(same.tightness_ratio, s.tightness_ratio);
  EXPECT_LT(cluster_tightness(model, x, 1e-4, 2).tightness_ratio, s.tightness_ratio);
}

TEST(Tightness, ArgumentErrors) {
  const VaeModel model(ts::tiny_config(3));
  EXPECT_THROW(cluster_tightness(model, ts::random_batch(1, 3, 8, 8, 1), 0.03, 1), ConfigError);
  EXPECT_THROW(cluster_tightness(model, ts::random_batch(3, 3, 8, 8, 1), 0.0, 1), ConfigError);
}
