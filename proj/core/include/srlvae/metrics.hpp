#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "srlvae/attacks.hpp"
#include "srlvae/data.hpp"
#include "srlvae/vae.hpp"

namespace srlvae {

inline constexpr double kPsnrCapDb = 99.0;

// Named scalar metrics plus provenance labels. Serialized with keys in
// lexicographic order so identical inputs give identical bytes.
struct MetricReport {
  std::map<std::string, double> metrics;
  std::map<std::string, std::string> labels;
  int sample_count = 0;

  void validate() const;
  std::string to_json() const;
  std::string csv_header() const;
  std::string csv_row() const;
};

std::vector<double> psnr_per_item(const Tensor& a, const Tensor& b);
// Batch mean of per-image 10*log10(1/MSE), capped at kPsnrCapDb.
double psnr(const Tensor& a, const Tensor& b);

// Gaussian-window SSIM (11x11, sigma 1.5, K1 = 0.01, K2 = 0.03, data range 1)
// averaged over valid window positions and channels.
std::vector<double> ssim_per_item(const Tensor& a, const Tensor& b);
double ssim(const Tensor& a, const Tensor& b);

// |mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)), with 1e-6 * I added to
// both covariances.
double frechet_distance_from_moments(const Eigen::VectorXd& mu_a, const Eigen::MatrixXd& cov_a,
                                     const Eigen::VectorXd& mu_b, const Eigen::MatrixXd& cov_b);
// Rows are samples. Sets with fewer than dim + 1 rows fall back to a
// shrinkage covariance estimate.
double frechet_feature_distance(const Eigen::MatrixXd& set_a, const Eigen::MatrixXd& set_b);

// Cosine between the mean feature vectors of two sets.
double editing_similarity_proxy(const Eigen::MatrixXd& features_a, const Eigen::MatrixXd& features_b);

Eigen::MatrixXd to_matrix(const std::vector<std::vector<double>>& rows);

using AttackGenerator = std::function<AttackOutcome(const VaeModel&, const ImageBatch&)>;

struct ReportOptions {
  std::string corpus_id;
  std::string model_id;
  std::string attack_descriptor = "none";
  int chunk_size = 64;
};

// Reconstructs the corpus through the posterior mean and aggregates every
// metric; with an attack, also reports the under-attack variants.
MetricReport reconstruction_report(const VaeModel& model, const PerceptualExtractor& extractor,
                                   const ImageBatch& corpus, const AttackGenerator* attack,
                                   const ReportOptions& options);

// Reconstruction through the posterior mean.
Tensor reconstruct_mean(const VaeModel& model, const Tensor& x);

}  // namespace srlvae
