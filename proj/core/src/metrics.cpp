#include "srlvae/metrics.hpp"

#include <cmath>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "srlvae/error.hpp"

namespace srlvae {
namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;
constexpr double kCovRidge = 1e-6;

std::array<double, kWindow> gaussian_taps() {
  std::array<double, kWindow> taps{};
  double total = 0.0;
  for (int i = 0; i < kWindow; ++i) {
    const double d = i - kWindow / 2;
    taps[static_cast<std::size_t>(i)] = std::exp(-d * d / (2 * kSigma * kSigma));
    total += taps[static_cast<std::size_t>(i)];
  }
  for (auto& t : taps) t /= total;
  return taps;
}

// Valid-mode separable Gaussian filtering of an H x W plane.
Eigen::MatrixXd filter_valid(const Eigen::MatrixXd& plane, const std::array<double, kWindow>& taps) {
  const Eigen::Index h = plane.rows() - kWindow + 1;
  const Eigen::Index w = plane.cols() - kWindow + 1;
  Eigen::MatrixXd rows(plane.rows(), w);
  for (Eigen::Index x = 0; x < w; ++x) {
    rows.col(x).setZero();
    for (int k = 0; k < kWindow; ++k) rows.col(x) += taps[static_cast<std::size_t>(k)] * plane.col(x + k);
  }
  Eigen::MatrixXd out(h, w);
  for (Eigen::Index y = 0; y < h; ++y) {
    out.row(y).setZero();
    for (int k = 0; k < kWindow; ++k) out.row(y) += taps[static_cast<std::size_t>(k)] * rows.row(y + k);
  }
  return out;
}

Eigen::MatrixXd plane_of(const Tensor& t, int n, int c) {
  const Shape& s = t.shape();
  Eigen::MatrixXd m(s.h, s.w);
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x) m(y, x) = t.at(n, c, y, x);
  }
  return m;
}

Eigen::MatrixXd symmetric_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success) throw NumericError("frechet: eigendecomposition failed");
  const double tol = 1e-9 * std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  if (es.eigenvalues().minCoeff() < -tol) throw NumericError("frechet: covariance is not positive semi-definite");
  Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : compensated_sum(v) / static_cast<double>(v.size());
}

struct Moments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

Moments moments_of(const Eigen::MatrixXd& set) {
  const Eigen::Index n = set.rows();
  const Eigen::Index d = set.cols();
  if (n < 2) throw ShapeError("frechet: each feature set needs at least 2 samples");
  Moments m;
  m.mean = set.colwise().mean().transpose();
  const Eigen::MatrixXd centered = set.rowwise() - m.mean.transpose();
  m.cov = centered.transpose() * centered / static_cast<double>(n - 1);
  if (n < d + 1) {
    // Shrink toward the scaled identity when the sample covariance is singular.
    const double s = static_cast<double>(d) / static_cast<double>(n + d);
    const double avg = m.cov.trace() / static_cast<double>(d);
    m.cov = (1.0 - s) * m.cov + s * avg * Eigen::MatrixXd::Identity(d, d);
  }
  return m;
}

}  // namespace

std::vector<double> psnr_per_item(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "psnr");
  std::vector<double> out;
  for (int n = 0; n < a.shape().n; ++n) {
    auto x = a.item(n);
    auto y = b.item(n);
    double se = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) se += (x[k] - y[k]) * (x[k] - y[k]);
    const double mse = se / static_cast<double>(x.size());
    out.push_back(mse < 1e-10 ? kPsnrCapDb : 10.0 * std::log10(1.0 / mse));
  }
  return out;
}

double psnr(const Tensor& a, const Tensor& b) { return mean_of(psnr_per_item(a, b)); }

std::vector<double> ssim_per_item(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "ssim");
  const Shape& s = a.shape();
  if (s.h < kWindow || s.w < kWindow) {
    throw ShapeError(fmt::format("ssim needs images of at least {0}x{0}, got {1}x{2}", kWindow, s.h, s.w));
  }
  const auto taps = gaussian_taps();
  std::vector<double> out;
  for (int n = 0; n < s.n; ++n) {
    double total = 0.0;
    for (int c = 0; c < s.c; ++c) {
      const Eigen::MatrixXd x = plane_of(a, n, c);
      const Eigen::MatrixXd y = plane_of(b, n, c);
      const Eigen::MatrixXd mx = filter_valid(x, taps);
      const Eigen::MatrixXd my = filter_valid(y, taps);
      const Eigen::MatrixXd sxx = filter_valid(x.cwiseProduct(x), taps) - mx.cwiseProduct(mx);
      const Eigen::MatrixXd syy = filter_valid(y.cwiseProduct(y), taps) - my.cwiseProduct(my);
      const Eigen::MatrixXd sxy = filter_valid(x.cwiseProduct(y), taps) - mx.cwiseProduct(my);
      const Eigen::ArrayXXd num = (2 * mx.cwiseProduct(my).array() + kC1) * (2 * sxy.array() + kC2);
      const Eigen::ArrayXXd den =
          (mx.cwiseAbs2().array() + my.cwiseAbs2().array() + kC1) * (sxx.array() + syy.array() + kC2);
      total += (num / den).mean();
    }
    out.push_back(total / s.c);
  }
  return out;
}

double ssim(const Tensor& a, const Tensor& b) { return mean_of(ssim_per_item(a, b)); }

double frechet_distance_from_moments(const Eigen::VectorXd& mu_a, const Eigen::MatrixXd& cov_a,
                                     const Eigen::VectorXd& mu_b, const Eigen::MatrixXd& cov_b) {
  const Eigen::Index d = mu_a.size();
  if (mu_b.size() != d || cov_a.rows() != d || cov_a.cols() != d || cov_b.rows() != d || cov_b.cols() != d) {
    throw ShapeError("frechet: moment dimensions disagree");
  }
  const Eigen::MatrixXd ridge = kCovRidge * Eigen::MatrixXd::Identity(d, d);
  const Eigen::MatrixXd sa = cov_a + ridge;
  const Eigen::MatrixXd sb = cov_b + ridge;
  const Eigen::MatrixXd root_a = symmetric_sqrt(sa);
  const Eigen::MatrixXd inner = root_a * sb * root_a;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw NumericError("frechet: eigendecomposition failed");
  const double tol = 1e-9 * std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  if (es.eigenvalues().minCoeff() < -tol) throw NumericError("frechet: covariance product is not PSD");
  const double trace_root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value = (mu_a - mu_b).squaredNorm() + sa.trace() + sb.trace() - 2.0 * trace_root;
  return std::max(0.0, value);
}

double frechet_feature_distance(const Eigen::MatrixXd& set_a, const Eigen::MatrixXd& set_b) {
  if (set_a.cols() != set_b.cols()) throw ShapeError("frechet: feature dimensions disagree");
  const Moments a = moments_of(set_a);
  const Moments b = moments_of(set_b);
  return frechet_distance_from_moments(a.mean, a.cov, b.mean, b.cov);
}

double editing_similarity_proxy(const Eigen::MatrixXd& features_a, const Eigen::MatrixXd& features_b) {
  if (features_a.cols() != features_b.cols()) throw ShapeError("similarity proxy: feature dimensions disagree");
  if (features_a.rows() == 0 || features_b.rows() == 0) throw ShapeError("similarity proxy: empty feature set");
  const Eigen::VectorXd ma = features_a.colwise().mean().transpose();
  const Eigen::VectorXd mb = features_b.colwise().mean().transpose();
  const double na = ma.norm();
  const double nb = mb.norm();
  if (na == 0.0 || nb == 0.0) throw NumericError("similarity proxy: zero-norm mean feature vector");
  return std::clamp(ma.dot(mb) / (na * nb), -1.0, 1.0);
}

Eigen::MatrixXd to_matrix(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return {};
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  return m;
}

Tensor reconstruct_mean(const VaeModel& model, const Tensor& x) { return model.decode(model.encode(x).mu()); }

void MetricReport::validate() const {
  for (const auto& key : {"ssim", "adv_ssim"}) {
    auto it = metrics.find(key);
    if (it != metrics.end() && (it->second < -1.0 || it->second > 1.0)) throw NumericError("ssim outside [-1, 1]");
  }
  for (const auto& key : {"psnr_db", "adv_psnr_db"}) {
    auto it = metrics.find(key);
    if (it != metrics.end() && !(it->second > 0.0)) throw NumericError("psnr must be positive");
  }
  for (const auto& key : {"frechet_rfid_proxy", "adv_frechet_rfid_proxy"}) {
    auto it = metrics.find(key);
    if (it != metrics.end() && it->second < 0.0) throw NumericError("frechet distance must be non-negative");
  }
}

std::string MetricReport::to_json() const {
  nlohmann::json j;
  j["metrics"] = metrics;
  j["labels"] = labels;
  j["sample_count"] = sample_count;
  return j.dump(2) + "\n";
}

namespace {

std::string csv_field(const std::string& v) {
  if (v.find_first_of(",\"\n") == std::string::npos) return v;
  std::string out = "\"";
  for (char c : v) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::string MetricReport::csv_header() const {
  std::string out = "sample_count";
  for (const auto& [k, v] : labels) out += "," + k;
  for (const auto& [k, v] : metrics) out += "," + k;
  return out;
}

std::string MetricReport::csv_row() const {
  std::string out = std::to_string(sample_count);
  for (const auto& [k, v] : labels) out += "," + csv_field(v);
  for (const auto& [k, v] : metrics) out += fmt::format(",{}", v);
  return out;
}

MetricReport reconstruction_report(const VaeModel& model, const PerceptualExtractor& extractor,
                                   const ImageBatch& corpus, const AttackGenerator* attack,
                                   const ReportOptions& options) {
  if (corpus.size() < 1) throw ConfigError("reconstruction_report: corpus is empty");
  const int chunk = std::max(1, options.chunk_size);
  std::vector<double> mse, psnr_v, ssim_v, perc;
  std::vector<double> adv_mse, adv_psnr, adv_ssim, adv_perc;
  std::vector<std::vector<double>> f_orig, f_rec, f_adv;
  for (int first = 0; first < corpus.size(); first += chunk) {
    const ImageBatch part = corpus.slice(first, std::min(chunk, corpus.size() - first));
    const Tensor rec = reconstruct_mean(model, part.pixels);
    for (int i = 0; i < part.size(); ++i) {
      mse.push_back(mse_loss(rec.slice(i, 1), part.pixels.slice(i, 1)));
    }
    const auto p = psnr_per_item(rec, part.pixels);
    psnr_v.insert(psnr_v.end(), p.begin(), p.end());
    const auto s = ssim_per_item(rec, part.pixels);
    ssim_v.insert(ssim_v.end(), s.begin(), s.end());
    const auto d = perceptual_distances(extractor, rec, part.pixels);
    perc.insert(perc.end(), d.begin(), d.end());
    for (auto& row : extractor.pooled(part.pixels)) f_orig.push_back(std::move(row));
    for (auto& row : extractor.pooled(rec)) f_rec.push_back(std::move(row));
    if (attack) {
      const AttackOutcome out = (*attack)(model, part);
      const Tensor rec_adv = reconstruct_mean(model, out.x_adv);
      for (int i = 0; i < part.size(); ++i) {
        adv_mse.push_back(mse_loss(rec_adv.slice(i, 1), part.pixels.slice(i, 1)));
      }
      const auto ap = psnr_per_item(rec_adv, part.pixels);
      adv_psnr.insert(adv_psnr.end(), ap.begin(), ap.end());
      const auto as = ssim_per_item(rec_adv, part.pixels);
      adv_ssim.insert(adv_ssim.end(), as.begin(), as.end());
      const auto ad = perceptual_distances(extractor, rec_adv, part.pixels);
      adv_perc.insert(adv_perc.end(), ad.begin(), ad.end());
      for (auto& row : extractor.pooled(rec_adv)) f_adv.push_back(std::move(row));
    }
  }
  MetricReport r;
  r.sample_count = corpus.size();
  r.labels["corpus_id"] = options.corpus_id;
  r.labels["model_id"] = options.model_id;
  r.labels["attack"] = options.attack_descriptor;
  r.labels["frechet_label"] = "rFID-proxy (" + extractor.source_tag() + " features; not Inception FID)";
  r.labels["similarity_label"] = "clip-proxy (" + extractor.source_tag() + " features; not CLIP)";
  r.labels["reconstruction_latent"] = "mean";
  r.metrics["mse"] = mean_of(mse);
  r.metrics["psnr_db"] = mean_of(psnr_v);
  r.metrics["ssim"] = mean_of(ssim_v);
  r.metrics["perceptual"] = mean_of(perc);
  const Eigen::MatrixXd orig = to_matrix(f_orig);
  const Eigen::MatrixXd recm = to_matrix(f_rec);
  if (corpus.size() >= 2) r.metrics["frechet_rfid_proxy"] = frechet_feature_distance(recm, orig);
  if (attack) {
    const Eigen::MatrixXd advm = to_matrix(f_adv);
    r.metrics["adv_mse"] = mean_of(adv_mse);
    r.metrics["adv_psnr_db"] = mean_of(adv_psnr);
    r.metrics["adv_ssim"] = mean_of(adv_ssim);
    r.metrics["adv_perceptual"] = mean_of(adv_perc);
    if (corpus.size() >= 2) r.metrics["adv_frechet_rfid_proxy"] = frechet_feature_distance(advm, orig);
    r.metrics["clip_proxy_cosine"] = editing_similarity_proxy(recm, advm);
  }
  r.validate();
  return r;
}

}  // namespace srlvae
